use super::matrix::Matrix;
use super::params::{param_rng, uniform, ParamSet};
use super::tape::{NodeId, ParamId, Tape};
use crate::error::{LmnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

/// A stack of affine layers whose weights live in a [`ParamSet`].
///
/// Weights are stored `in × out` so that a batch of row vectors is mapped by
/// `X · W + b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    layers: Vec<Layer>,
    in_dim: usize,
    out_dim: usize,
}

impl Mlp {
    /// Creates layers for `dims = [in, h1, ..., out]`: ReLU on hidden layers,
    /// identity on the last. Weights use He-uniform fan-in scaling, biases start at zero.
    pub fn new(params: &mut ParamSet, prefix: &str, dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(LmnError::contract(format!(
                "mlp {prefix} needs at least two positive dims, got {dims:?}"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (l, w) in dims.windows(2).enumerate() {
            let wname = format!("{prefix}.{l}.weight");
            let scale = (6.0 / w[0] as f64).sqrt();
            let weight = params.add(wname.clone(), uniform(&mut param_rng(seed, &wname), w[0], w[1], scale));
            let bias = params.add(format!("{prefix}.{l}.bias"), Matrix::zeros(1, w[1]));
            let activation = if l + 2 == dims.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        Ok(Mlp {
            layers,
            in_dim: dims[0],
            out_dim: dims[dims.len() - 1],
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Records the forward pass of a batch of row vectors on `tape`.
    pub fn forward(&self, params: &ParamSet, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        if tape.value(x).cols() != self.in_dim {
            return Err(LmnError::shape("mlp_forward", self.in_dim, tape.value(x).cols()));
        }
        let mut h = x;
        for layer in &self.layers {
            let w = tape.param(layer.weight, params.get(layer.weight));
            let b = tape.param(layer.bias, params.get(layer.bias));
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if layer.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Tape-free evaluation of a batch of row vectors.
    pub fn eval(&self, params: &ParamSet, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim {
            return Err(LmnError::shape("mlp_eval", self.in_dim, x.cols()));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = h.matmul(params.get(layer.weight))?;
            let b = params.get(layer.bias);
            for r in 0..h.rows() {
                for (v, bb) in h.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bb;
                    if layer.activation == Activation::Relu {
                        *v = v.max(0.0);
                    }
                }
            }
        }
        Ok(h)
    }
}

/// Forward pass of one vector through `mlp`, recorded on `tape`; returns the output values.
pub fn mlp_forward(mlp: &Mlp, params: &ParamSet, x: &[f64], tape: &mut Tape) -> Result<Vec<f64>> {
    let input = tape.input(Matrix::row_vector(x));
    let out = mlp.forward(params, tape, input)?;
    Ok(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(params: &mut ParamSet, w: Matrix, b: Vec<f64>) -> Mlp {
        let mlp = Mlp::new(params, "m", &[w.rows(), w.cols()], 0).unwrap();
        let l = &mlp.layers()[0];
        params.set(l.weight, w).unwrap();
        params.set(l.bias, Matrix::row_vector(&b)).unwrap();
        mlp
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut p = ParamSet::new();
        let mlp = single_layer(&mut p, Matrix::identity(3), vec![0.0; 3]);
        let mut tape = Tape::new();
        let x = [0.5, -2.0, 3.0];
        assert_eq!(mlp_forward(&mlp, &p, &x, &mut tape).unwrap(), x.to_vec());
    }

    #[test]
    fn zero_weight_layer_returns_bias() {
        let mut p = ParamSet::new();
        let mlp = single_layer(&mut p, Matrix::zeros(2, 3), vec![0.1, 0.2, 0.3]);
        let mut tape = Tape::new();
        assert_eq!(
            mlp_forward(&mlp, &p, &[9.0, -9.0], &mut tape).unwrap(),
            vec![0.1, 0.2, 0.3]
        );
    }

    #[test]
    fn two_layer_net_matches_hand_evaluation() {
        // 2 → 2 (ReLU) → 1
        let mut p = ParamSet::new();
        let mlp = Mlp::new(&mut p, "m", &[2, 2, 1], 0).unwrap();
        let l = mlp.layers().to_vec();
        p.set(
            l[0].weight,
            Matrix::from_rows(&[vec![0.5, -1.0], vec![0.25, 2.0]]).unwrap(),
        )
        .unwrap();
        p.set(l[0].bias, Matrix::row_vector(&[0.1, -0.2])).unwrap();
        p.set(l[1].weight, Matrix::from_rows(&[vec![1.5], vec![-0.5]]).unwrap())
            .unwrap();
        p.set(l[1].bias, Matrix::row_vector(&[0.05])).unwrap();
        // x = [1, 2]: h = relu([0.5+0.5+0.1, -1+4-0.2]) = [1.1, 2.8]
        // y = 1.5·1.1 − 0.5·2.8 + 0.05 = 0.3
        let mut tape = Tape::new();
        let y = mlp_forward(&mlp, &p, &[1.0, 2.0], &mut tape).unwrap();
        assert!((y[0] - 0.3).abs() < 1e-12);
        // x = [-4, 0]: h = relu([-2+0.1, 4-0.2]) = [0, 3.8] → y = −1.9 + 0.05
        let y = mlp.eval(&p, &Matrix::row_vector(&[-4.0, 0.0])).unwrap();
        assert!((y.get(0, 0) + 1.85).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = ParamSet::new();
        let mlp = Mlp::new(&mut p, "m", &[3, 2], 1).unwrap();
        let mut tape = Tape::new();
        assert!(mlp_forward(&mlp, &p, &[1.0, 2.0], &mut tape).is_err());
        assert!(Mlp::new(&mut p, "bad", &[3], 1).is_err());
    }
}
