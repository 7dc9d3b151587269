use ndarray::{Array1, Array4, ArrayD, IxDyn};

use super::{join, Param, Parameters};
use crate::scalar::{cst, Scalar};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `(batch, height, width)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: ArrayD<S>,
    pub running_var: ArrayD<S>,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<S> {
    xhat: Array4<S>,
    inv_std: Array1<S>,
    batch_mean: Array1<S>,
    batch_var_unbiased: Array1<S>,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], S::one()),
            beta: Param::filled(&[channels], S::zero()),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), S::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_train(&self, x: &Array4<S>) -> (Array4<S>, BatchNormCache<S>) {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let count = n * hw;
        let count_s: S = cst(count as f64);
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut mean = Array1::<S>::zeros(c);
        let mut var = Array1::<S>::zeros(c);
        for (i, plane) in src.chunks_exact(hw).enumerate() {
            mean[i % c] += plane.iter().copied().sum::<S>();
        }
        mean.mapv_inplace(|m| m / count_s);
        for (i, plane) in src.chunks_exact(hw).enumerate() {
            let m = mean[i % c];
            var[i % c] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<S>();
        }
        var.mapv_inplace(|v| v / count_s);
        let eps: S = cst(BN_EPS);
        let inv_std = var.mapv(|v| S::one() / (v + eps).sqrt());
        let mut xhat = Array4::<S>::zeros((n, c, h, w));
        let mut y = Array4::<S>::zeros((n, c, h, w));
        {
            let xh = xhat.as_slice_mut().expect("fresh array");
            let out = y.as_slice_mut().expect("fresh array");
            for (i, ((plane, xp), yp)) in src
                .chunks_exact(hw)
                .zip(xh.chunks_exact_mut(hw))
                .zip(out.chunks_exact_mut(hw))
                .enumerate()
            {
                let ch = i % c;
                let (m, is) = (mean[ch], inv_std[ch]);
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for ((&v, xo), yo) in plane.iter().zip(xp.iter_mut()).zip(yp.iter_mut()) {
                    let t = (v - m) * is;
                    *xo = t;
                    *yo = g * t + b;
                }
            }
        }
        let unbias: S = if count > 1 {
            cst(count as f64 / (count - 1) as f64)
        } else {
            S::one()
        };
        let cache = BatchNormCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var.mapv(|v| v * unbias),
        };
        (y, cache)
    }

    pub fn forward_eval(&self, x: &Array4<S>) -> Array4<S> {
        self.forward_eval_owned(x.as_standard_layout().into_owned(), false)
    }

    /// Running-statistics normalization in place, optionally followed by ReLU.
    pub fn forward_eval_owned(&self, mut y: Array4<S>, relu: bool) -> Array4<S> {
        let (_, c, h, w) = y.dim();
        if !y.is_standard_layout() {
            y = y.as_standard_layout().into_owned();
        }
        let eps: S = cst(BN_EPS);
        let coef: Vec<(S, S)> = (0..c)
            .map(|ch| {
                let is = S::one() / (self.running_var[ch] + eps).sqrt();
                let g = self.gamma.value[ch] * is;
                (g, self.beta.value[ch] - g * self.running_mean[ch])
            })
            .collect();
        for (i, plane) in y.as_slice_mut().expect("standard layout").chunks_exact_mut(h * w).enumerate() {
            let (g, b) = coef[i % c];
            if relu {
                plane.iter_mut().for_each(|v| {
                    let t = g * *v + b;
                    *v = if t > S::zero() { t } else { S::zero() };
                });
            } else {
                plane.iter_mut().for_each(|v| *v = g * *v + b);
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNormCache<S>, dy: &Array4<S>) -> Array4<S> {
        let (n, c, h, w) = dy.dim();
        let hw = h * w;
        let count: S = cst((n * hw) as f64);
        let dy = dy.as_standard_layout();
        let g = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let mut dbeta = vec![S::zero(); c];
        let mut dgamma = vec![S::zero(); c];
        for (i, (dp, xp)) in g.chunks_exact(hw).zip(xh.chunks_exact(hw)).enumerate() {
            let ch = i % c;
            dbeta[ch] += dp.iter().copied().sum::<S>();
            dgamma[ch] += dp.iter().zip(xp).map(|(&d, &x)| d * x).sum::<S>();
        }
        let mut dx = Array4::<S>::zeros((n, c, h, w));
        for (i, ((dp, xp), op)) in g
            .chunks_exact(hw)
            .zip(xh.chunks_exact(hw))
            .zip(dx.as_slice_mut().expect("fresh array").chunks_exact_mut(hw))
            .enumerate()
        {
            let ch = i % c;
            let scale = self.gamma.value[ch] * cache.inv_std[ch] / count;
            let (db, dg) = (dbeta[ch], dgamma[ch]);
            for ((o, &d), &x) in op.iter_mut().zip(dp).zip(xp) {
                *o = scale * (count * d - db - x * dg);
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += dgamma[ch];
            self.beta.grad[ch] += dbeta[ch];
        }
        dx
    }

    /// Folds the batch statistics from a training forward into the running averages.
    pub fn commit(&mut self, cache: &BatchNormCache<S>) {
        let mom: S = cst(BN_MOMENTUM);
        let keep = S::one() - mom;
        for ch in 0..self.channels() {
            self.running_mean[ch] = keep * self.running_mean[ch] + mom * cache.batch_mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + mom * cache.batch_var_unbiased[ch];
        }
    }
}

impl<S: Scalar> Parameters<S> for BatchNorm2d<S> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<S>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<S>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<S>)>) {
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<S>)>) {
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}
