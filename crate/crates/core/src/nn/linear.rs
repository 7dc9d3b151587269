use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, Param, Parameters};
use crate::scalar::Scalar;

/// Fully-connected layer `y = x Wᵀ + b` on row-major batches.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Scalar> Linear<S> {
    /// He-uniform weights; bias uniform on `±1/√in_features`.
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::he_uniform(&[out_features, in_features], in_features, rng),
            bias: Param::uniform(&[out_features], 1.0 / (in_features as f64).sqrt(), rng),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight");
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-d bias");
        let mut y = Array2::<S>::zeros((x.nrows(), w.nrows()));
        general_mat_mul(S::one(), x, &w.t(), S::zero(), &mut y);
        y += &b;
        y
    }

    pub fn backward(&mut self, x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight");
        let mut dw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-d grad");
        general_mat_mul(S::one(), &dy.t(), x, S::one(), &mut dw);
        let mut db = self.bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d grad");
        db += &dy.sum_axis(Axis(0));
        let mut dx = Array2::<S>::zeros(x.raw_dim());
        general_mat_mul(S::one(), dy, &w, S::zero(), &mut dx);
        dx
    }
}

impl<S: Scalar> Parameters<S> for Linear<S> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<S>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<S>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
