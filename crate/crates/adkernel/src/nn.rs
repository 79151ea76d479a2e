//! Small layer helpers on top of the tape: batch-norm and dropout.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::{Real, Result};

/// 1-D batch normalization over rows of `[batch, features]`.
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::full(&[1, features], T::one()),
            beta: Tensor::zeros(&[1, features]),
            running_mean: Tensor::zeros(&[1, features]),
            running_var: Tensor::full(&[1, features], T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training forward: normalizes by batch statistics and folds them into
    /// the running estimates. `gamma`/`beta` enter as the given vars so the
    /// caller controls which leaves receive gradients.
    pub fn forward_train(&mut self, g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let mu = g.mean_axis0(x)?;
        let neg_mu = g.affine(mu, -1.0, 0.0);
        let centered = g.add_row(x, neg_mu)?;
        let sq = g.square(centered);
        let var = g.mean_axis0(sq)?;
        let var_eps = g.affine(var, 1.0, self.eps);
        let std = g.sqrt(var_eps);
        let inv_std = g.recip(std);
        let xhat = g.mul_row(centered, inv_std)?;
        let scaled = g.mul_row(xhat, gamma)?;
        let out = g.add_row(scaled, beta)?;

        let mom = T::from_f64(self.momentum);
        let keep = T::one() - mom;
        let (mv, vv) = (g.value(mu).data().to_vec(), g.value(var).data().to_vec());
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&mv) {
            *r = keep * *r + mom * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&vv) {
            *r = keep * *r + mom * b;
        }
        Ok(out)
    }

    /// Eval forward: a fixed affine map from the running statistics.
    pub fn forward_eval(&self, g: &mut Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let scale: Vec<T> = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(self.eps)).sqrt())
            .collect();
        let shift: Vec<T> = self.running_mean.data().iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
        let n = scale.len();
        let sc = g.constant(Tensor::from_vec(scale, &[1, n])?);
        let sh = g.constant(Tensor::from_vec(shift, &[1, n])?);
        let xs = g.mul_row(x, sc)?;
        let xhat = g.add_row(xs, sh)?;
        let scaled = g.mul_row(xhat, gamma)?;
        g.add_row(scaled, beta)
    }
}

/// Inverted dropout: keeps are rescaled by `1/(1-rate)` so eval is identity.
pub fn dropout_train<T: Real>(g: &mut Graph<T>, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let n = g.value(x).numel();
    let keep = 1.0 - rate;
    let scale = T::from_f64(1.0 / keep);
    let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() }).collect();
    let shape = g.value(x).shape().to_vec();
    g.mul_const(x, &Tensor::from_vec(mask, &shape)?)
}

/// Eval-mode dropout is the identity.
pub fn dropout_eval<T: Real>(_g: &mut Graph<T>, x: Var) -> Var {
    x
}
