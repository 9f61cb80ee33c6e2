mod common;

use common::{small_run, toy_data};
use lmn_core::ctr::*;
use lmn_core::data::{Sample, Vocab};
use lmn_core::memory::Checkpoint;
use lmn_core::numerics::{sigmoid, Matrix, ParamSet, TableKey, Tape};
use lmn_core::optim::Adagrad;

fn sample(user: usize, item: usize, seq: &[usize], len: usize, label: u8) -> Sample {
    let mut s = seq.to_vec();
    s.resize(len, 0);
    Sample {
        user_id: user,
        item_id: item,
        cross_id: 1,
        seq: s,
        mask_len: seq.len(),
        label,
        day: 1,
    }
}

fn vocab() -> Vocab {
    Vocab {
        users: 5,
        items: 9,
        cross: 3,
    }
}

fn model(variant: Variant) -> CtrModel {
    let cfg = small_run(variant);
    CtrModel::new(cfg.model_config(vocab()), Adagrad::new(0.05), 1).unwrap()
}

#[test]
fn pooling_op_examples() {
    let emb = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap();
    let mut tape = Tape::new();
    let x = tape.input(emb);
    let out = tape.segment_mean(x, vec![0..1, 0..2, 2..2]).unwrap();
    let v = tape.value(out);
    assert_eq!(v.row(0), &[1.0, 2.0]);
    assert_eq!(v.row(1), &[2.0, -1.0]);
    assert_eq!(v.row(2), &[0.0, 0.0]);
}

#[test]
fn target_attention_examples() {
    let mut tape = Tape::new();
    let seq = tape.input(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![5.0, 7.0]]).unwrap());
    // single item; two items orthogonal to the target; a hand case; fully masked
    let target =
        tape.input(Matrix::from_rows(&[vec![9.0, 9.0], vec![0.0, 0.0], vec![1.0, 0.5], vec![1.0, 1.0]]).unwrap());
    let out = tape
        .target_attention(seq, target, vec![2..3, 0..2, 0..2, 1..1])
        .unwrap();
    let v = tape.value(out);
    assert_eq!(v.row(0), &[5.0, 7.0]);
    assert_eq!(v.row(1), &[0.5, 1.0]);
    // scores [1, 1]·… = [1, 1] would be uniform; here [1·1, 2·0.5] = [1, 1]
    let w = lmn_core::numerics::softmax(&[1.0, 1.0]).unwrap();
    assert!((v.get(2, 0) - w[0]).abs() < 1e-15 && (v.get(2, 1) - 2.0 * w[1]).abs() < 1e-15);
    assert_eq!(v.row(3), &[0.0, 0.0]);

    let mut tape = Tape::new();
    let seq = tape.input(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let target = tape.input(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let out = tape.target_attention(seq, target, vec![0..2]).unwrap();
    let w = lmn_core::numerics::softmax(&[1.0, 2.0]).unwrap();
    assert!((tape.value(out).get(0, 0) - w[0]).abs() < 1e-15);
    assert!((tape.value(out).get(0, 1) - w[1]).abs() < 1e-15);
}

#[test]
fn losses() {
    assert!((ctr_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(ctr_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-6);
    assert!((ctr_loss(&[0.75], &[1.0]).unwrap() + 0.75f64.ln()).abs() < 1e-12);
    assert_eq!(total_loss(0.7, 0.3, 0.0).unwrap(), 0.7);
    assert_eq!(total_loss(0.7, 0.0, 1.0).unwrap(), 0.7);
    assert!((total_loss(0.7, 0.2, 0.1).unwrap() - 0.72).abs() < 1e-15);
    assert!(total_loss(0.7, 0.2, -0.1).is_err());
}

#[test]
fn padding_rows_are_zero_and_stay_frozen() {
    let mut m = model(Variant::Lmn);
    for name in ["emb.user", "emb.item", "emb.cross"] {
        let id = m.params().find(name).unwrap();
        assert!(m.params().get(id).row(0).iter().all(|v| *v == 0.0));
    }
    let batch = vec![sample(1, 2, &[3, 4], 5, 1), sample(2, 3, &[], 5, 0)];
    let (_, grads) = m.gradients(&batch).unwrap();
    let item = m.params().find("emb.item").unwrap();
    assert!(!grads.sparse_rows(TableKey::Param(item)).unwrap().contains_key(&0));
    m.train_step(&batch).unwrap();
    assert!(m.params().get(item).row(0).iter().all(|v| *v == 0.0));
}

#[test]
fn out_of_range_ids_are_errors() {
    let m = model(Variant::Pooling);
    assert!(m.forward(&[sample(7, 2, &[1], 3, 1)]).is_err());
    assert!(m.forward(&[sample(1, 2, &[100], 3, 1)]).is_err());
}

fn eval_mlp_by_hand(params: &ParamSet, prefix: &str, x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    let mut l = 0;
    while let Some(w) = params.find(&format!("{prefix}.{l}.weight")) {
        let w = params.get(w);
        let b = params.get(params.find(&format!("{prefix}.{l}.bias")).unwrap());
        let mut out: Vec<f64> = (0..w.cols())
            .map(|j| b.get(0, j) + (0..w.rows()).map(|k| h[k] * w.get(k, j)).sum::<f64>())
            .collect();
        l += 1;
        if params.find(&format!("{prefix}.{l}.weight")).is_some() {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = out;
    }
    h[0]
}

#[test]
fn prediction_matches_hand_evaluation() {
    let m = model(Variant::Pooling);
    let s = sample(2, 5, &[1, 3], 4, 1);
    let p = m.params();
    let row = |name: &str, id: usize| p.get(p.find(name).unwrap()).row(id).to_vec();
    let mut x = row("emb.user", 2);
    x.extend(row("emb.item", 5));
    x.extend(row("emb.cross", 1));
    x.extend(
        row("emb.item", 1)
            .iter()
            .zip(row("emb.item", 3))
            .map(|(a, b)| (a + b) / 2.0),
    );
    let expected = sigmoid(eval_mlp_by_hand(p, "tower", &x));
    let got = m.forward(&[s]).unwrap().probs[0];
    assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
}

#[test]
fn zero_final_layer_predicts_sigmoid_of_bias() {
    let mut m = model(Variant::Base);
    let p = m.params_mut();
    let w = p.find("tower.2.weight").unwrap();
    let b = p.find("tower.2.bias").unwrap();
    let shape = p.get(w).shape();
    p.set(w, Matrix::zeros(shape.0, shape.1)).unwrap();
    p.set(b, Matrix::row_vector(&[0.0])).unwrap();
    assert_eq!(m.forward(&[sample(1, 1, &[], 2, 0)]).unwrap().probs, vec![0.5]);
    m.params_mut().set(b, Matrix::row_vector(&[1.3])).unwrap();
    assert_eq!(
        m.forward(&[sample(3, 4, &[2], 2, 0)]).unwrap().probs,
        vec![sigmoid(1.3)]
    );
}

#[test]
fn padding_is_neutral_for_every_variant() {
    for v in Variant::ALL {
        let m = model(v);
        let batch = vec![
            sample(1, 2, &[3, 4], 3, 1),
            sample(2, 3, &[], 3, 0),
            sample(4, 8, &[5, 6, 7], 3, 1),
        ];
        let wide: Vec<Sample> = batch.iter().map(|s| s.with_seq_len(9)).collect();
        let a = m.forward(&batch).unwrap();
        let b = m.forward(&wide).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() <= 1e-12, "{v}");
        }
        assert_eq!(a.memory_loss, b.memory_loss);
    }
}

#[test]
fn lmn_without_memory_in_tower_reproduces_pooling() {
    let pool = model(Variant::Pooling);
    let mut cfg = small_run(Variant::Lmn);
    cfg.memory.alpha = 0.0;
    cfg.memory_in_tower = false;
    let lmn = CtrModel::new(cfg.model_config(vocab()), Adagrad::new(0.05), 1).unwrap();
    let batch = vec![sample(1, 2, &[3, 4], 3, 1), sample(2, 3, &[], 3, 0)];
    let (a, b) = (pool.forward(&batch).unwrap(), lmn.forward(&batch).unwrap());
    assert_eq!(a.probs, b.probs);
    assert_eq!(a.total_loss, b.total_loss);
}

#[test]
fn value_updates_touch_only_activated_rows() {
    let mut m = model(Variant::Lmn);
    let before = m.memory_values().unwrap();
    let batch = vec![sample(1, 2, &[3], 3, 1)];
    let (_, grads) = m.gradients(&batch).unwrap();
    let touched: Vec<usize> = grads
        .sparse_rows(lmn_core::memory::VALUES_TABLE)
        .unwrap()
        .keys()
        .copied()
        .collect();
    assert!(!touched.is_empty() && touched.len() <= 3);
    m.train_step(&batch).unwrap();
    let after = m.memory_values().unwrap();
    for slot in 0..before.slots() {
        let changed = before.row(slot).unwrap() != after.row(slot).unwrap();
        assert_eq!(changed, touched.contains(&slot), "slot {slot}");
    }
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let data = toy_data(5);
    assert!(data.train.len() >= 1000);
    let cfg = small_run(Variant::Lmn);
    let a = train(&cfg, &data.train, &data.eval, data.vocab()).unwrap();
    assert_eq!(a.epochs.len(), 2);
    assert!(a.epochs[1].train_logloss < a.epochs[0].train_logloss);
    assert!(a.epochs.iter().all(|e| e.eval.is_some()));
    let b = train(&cfg, &data.train, &data.eval, data.vocab()).unwrap();
    assert_eq!(
        a.model.to_checkpoint().to_bytes().unwrap(),
        b.model.to_checkpoint().to_bytes().unwrap()
    );
    assert_eq!(a.epochs, b.epochs);

    let mut no_mem = cfg.clone();
    no_mem.memory.alpha = 0.0;
    let c = train(&no_mem, &data.train, &data.eval, data.vocab()).unwrap();
    assert_ne!(a.model.memory_values(), c.model.memory_values());
}

#[test]
fn max_steps_and_divergence() {
    let data = toy_data(6);
    let mut cfg = small_run(Variant::Pooling);
    cfg.train.max_steps = Some(3);
    let out = train(&cfg, &data.train, &data.eval, data.vocab()).unwrap();
    assert_eq!(out.steps, 3);
    assert_eq!(out.epochs.len(), 1);

    // NaN in the output bias reaches the loss
    let mut m = model(Variant::Pooling);
    let b = m.params().find("tower.2.bias").unwrap();
    m.params_mut().set(b, Matrix::row_vector(&[f64::NAN])).unwrap();
    let err = m.train_step(&[sample(1, 2, &[3], 3, 1)]).unwrap_err();
    assert!(matches!(err, lmn_core::LmnError::Diverged(_)), "{err}");

    // NaN behind a ReLU only shows up in the gradient; nothing may be updated
    let mut m = model(Variant::Pooling);
    let w = m.params().find("tower.0.weight").unwrap();
    let mut bad = m.params().get(w).clone();
    bad.data_mut()[0] = f64::NAN;
    m.params_mut().set(w, bad).unwrap();
    let before = m.to_checkpoint().to_bytes().unwrap();
    let err = m.train_step(&[sample(1, 2, &[3], 3, 1)]).unwrap_err();
    assert!(matches!(err, lmn_core::LmnError::NonFinite(_)), "{err}");
    assert_eq!(m.to_checkpoint().to_bytes().unwrap(), before);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = toy_data(7);
    let mut cfg = small_run(Variant::Lmn);
    cfg.train.max_steps = Some(10);
    let out = train(&cfg, &data.train, &data.eval, data.vocab()).unwrap();
    let bytes = out.model.to_checkpoint().to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.lmn");
    out.model.to_checkpoint().save(&path).unwrap();
    let loaded = CtrModel::from_checkpoint(&Checkpoint::load(&path).unwrap(), 4).unwrap();
    assert_eq!(loaded.to_checkpoint().to_bytes().unwrap(), bytes);
    assert_eq!(
        loaded.predict(&data.eval, 64).unwrap(),
        out.model.predict(&data.eval, 64).unwrap()
    );
    let mut bad = bytes.clone();
    bad.truncate(bytes.len() - 3);
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

fn tiny_model(variant: Variant, seed: u64) -> CtrModel {
    let mut cfg = small_run(variant);
    cfg.embed_dim = 4;
    cfg.tower = vec![6];
    cfg.memory.sqrt_n = 4;
    cfg.memory.k_top = 2;
    cfg.memory.alpha = 0.1;
    cfg.seed = seed;
    CtrModel::new(cfg.model_config(vocab()), Adagrad::new(0.05), 1).unwrap()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let batch = vec![
        sample(1, 2, &[3, 4], 3, 1),
        sample(2, 3, &[5], 3, 0),
        sample(3, 8, &[], 3, 1),
        sample(4, 6, &[7, 1, 2], 3, 0),
    ];
    for v in Variant::ALL {
        let mut m = tiny_model(v, 2);
        jitter_biases(&mut m, 2, 0.3);
        let (_, grads) = m.gradients(&batch).unwrap();
        let analytic = m.flat_gradients(&grads);
        let report =
            lmn_core::numerics::finite_diff_check(&mut m, |m| Ok(m.forward(&batch)?.total_loss), &analytic, 1e-5, 1e-4)
                .unwrap();
        let worst: Vec<_> = report.failures().collect();
        assert!(report.passed(), "{v}: {worst:?}");
    }
}

#[test]
fn shard_count_does_not_change_training() {
    let data = toy_data(8);
    let mut cfg = small_run(Variant::Lmn);
    cfg.train.max_steps = Some(15);
    let mut ref_bytes = None;
    for shards in [1, 3, 4] {
        cfg.train.shards = shards;
        let out = train(&cfg, &data.train, &data.eval, data.vocab()).unwrap();
        let bytes = out.model.to_checkpoint().to_bytes().unwrap();
        match &ref_bytes {
            None => ref_bytes = Some(bytes),
            Some(r) => assert!(r == &bytes, "shards={shards}"),
        }
    }
}
