//! Adam with a step-decay learning-rate schedule.

use ndarray::ArrayD;

use crate::nn::Param;
use crate::scalar::{cst, Scalar};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `base · factor^⌊episode / every⌋`, with `episode` counted from 0.
pub fn step_decay(base: f64, factor: f64, every: u64, episode: u64) -> f64 {
    base * factor.powi((episode / every.max(1)) as i32)
}

/// One Adam state over an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub step: u64,
    pub first_moment: Vec<ArrayD<S>>,
    pub second_moment: Vec<ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Param<S>>) -> Self {
        let (first_moment, second_moment) = params
            .into_iter()
            .map(|p| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())))
            .unzip();
        Self {
            step: 0,
            first_moment,
            second_moment,
        }
    }

    /// Applies one update from the accumulated gradients.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param<S>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2): (S, S) = (cst(ADAM_BETA1), cst(ADAM_BETA2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let step_size: S = cst(lr / bc1);
        let inv_bc2: S = cst(1.0 / bc2);
        let eps: S = cst(ADAM_EPS);
        for ((p, m), v) in params
            .into_iter()
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        }
    }
}
