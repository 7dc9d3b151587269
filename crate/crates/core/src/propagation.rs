//! Label propagation over a normalized graph operator, class probabilities,
//! predictions and the weighted multi-layer cross-entropy.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::graph::PropagationOperator;
use crate::scalar::{cst, Scalar};

/// Probability floor applied before taking logarithms in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    Initial,
    Propagated,
}

/// `[n_nodes, n_way]` label scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix<S> {
    pub values: Array2<S>,
    pub kind: ScoreKind,
}

/// Row-stochastic `[n_nodes, n_way]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities<S> {
    pub p: Array2<S>,
}

/// Per-layer cross-entropies and their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_layer: BTreeMap<usize, f64>,
    pub weights: BTreeMap<usize, f64>,
    pub total: f64,
}

/// One-hot rows for the support nodes, zero rows for the query nodes.
pub fn initial_scores<S: Scalar>(episode: &Episode) -> ScoreMatrix<S> {
    initial_scores_from_labels(&episode.support_labels(), episode.n_nodes(), episode.n_way())
}

pub fn initial_scores_from_labels<S: Scalar>(support_labels: &[usize], n_nodes: usize, n_way: usize) -> ScoreMatrix<S> {
    let mut values = Array2::zeros((n_nodes, n_way));
    for (row, &label) in support_labels.iter().enumerate() {
        values[[row, label]] = S::one();
    }
    ScoreMatrix {
        values,
        kind: ScoreKind::Initial,
    }
}

/// LU factorization with partial pivoting.
#[derive(Clone, Debug)]
pub struct LuFactors<S> {
    lu: Array2<S>,
    perm: Vec<usize>,
}

impl<S: Scalar> LuFactors<S> {
    pub fn factor(mut a: Array2<S>) -> Result<Self> {
        let n = a.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(S::zero(), |m, &v| m.max(v.abs()));
        if !scale.is_finite() {
            return Err(Error::PropagationSingular { condition: f64::INFINITY });
        }
        let tiny = scale * S::epsilon() * cst(n as f64);
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, a[[i, k]].abs()))
                .fold((k, S::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pivot > tiny) {
                return Err(Error::PropagationSingular {
                    condition: Self::condition_of(&a, k),
                });
            }
            if p != k {
                for j in 0..n {
                    a.swap([k, j], [p, j]);
                }
                perm.swap(k, p);
            }
            let d = a[[k, k]];
            for i in (k + 1)..n {
                let f = a[[i, k]] / d;
                a[[i, k]] = f;
                if f != S::zero() {
                    for j in (k + 1)..n {
                        let u = a[[k, j]];
                        a[[i, j]] -= f * u;
                    }
                }
            }
        }
        Ok(Self { lu: a, perm })
    }

    fn condition_of(a: &Array2<S>, upto: usize) -> f64 {
        let diag: Vec<f64> = (0..upto.max(1).min(a.nrows()))
            .map(|i| a[[i, i]].abs().to_f64_lossy())
            .collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Ratio of the largest to the smallest pivot magnitude.
    pub fn condition_estimate(&self) -> f64 {
        Self::condition_of(&self.lu, self.lu.nrows())
    }

    pub fn solve(&self, b: &Array2<S>) -> Array2<S> {
        let n = self.lu.nrows();
        let mut x = Array2::<S>::zeros(b.raw_dim());
        for (i, &p) in self.perm.iter().enumerate() {
            x.row_mut(i).assign(&b.row(p));
        }
        let cols = x.ncols();
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[[i, k]];
                if f != S::zero() {
                    for c in 0..cols {
                        let v = x[[k, c]];
                        x[[i, c]] -= f * v;
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let f = self.lu[[i, k]];
                if f != S::zero() {
                    for c in 0..cols {
                        let v = x[[k, c]];
                        x[[i, c]] -= f * v;
                    }
                }
            }
            let d = self.lu[[i, i]];
            for c in 0..cols {
                x[[i, c]] /= d;
            }
        }
        x
    }
}

fn propagation_system<S: Scalar>(op: &PropagationOperator<S>, alpha: f64) -> Result<Array2<S>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let a: S = cst(alpha);
    let mut sys = op.matrix.mapv(|v| -a * v);
    for i in 0..sys.nrows() {
        sys[[i, i]] += S::one();
    }
    Ok(sys)
}

/// `P* = (I − αL)⁻¹ P⁰` by LU solve; also returns the factors for the backward pass.
pub fn propagate_with_factors<S: Scalar>(
    op: &PropagationOperator<S>,
    p0: &ScoreMatrix<S>,
    alpha: f64,
) -> Result<(ScoreMatrix<S>, LuFactors<S>)> {
    let lu = LuFactors::factor(propagation_system(op, alpha)?)?;
    let values = lu.solve(&p0.values);
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::PropagationSingular {
            condition: lu.condition_estimate(),
        });
    }
    Ok((
        ScoreMatrix {
            values,
            kind: ScoreKind::Propagated,
        },
        lu,
    ))
}

pub fn propagate_closed_form<S: Scalar>(op: &PropagationOperator<S>, p0: &ScoreMatrix<S>, alpha: f64) -> Result<ScoreMatrix<S>> {
    propagate_with_factors(op, p0, alpha).map(|(p, _)| p)
}

/// Gradient with respect to `L` of a loss with gradient `d_p` at `P*`.
///
/// With `A = I − αL`, `Λ = A⁻ᵀ dP*` and `∂ℓ/∂L = α Λ P*ᵀ`. `A` is symmetric
/// (L is constructed exactly symmetric), so `A⁻ᵀ = A⁻¹`.
pub fn propagate_backward<S: Scalar>(lu: &LuFactors<S>, p_star: &ScoreMatrix<S>, d_p: &Array2<S>, alpha: f64) -> Array2<S> {
    let lambda = lu.solve(d_p);
    let mut d_l = lambda.dot(&p_star.values.t());
    d_l *= cst::<S>(alpha);
    d_l
}

/// Applies `P ← αLP + (1−α)P⁰` exactly `steps` times starting from `P⁰`.
///
/// The fixed point is `(1−α)(I − αL)⁻¹P⁰`: the closed form scaled by `1−α`.
/// The closed form keeps the unscaled scores because they feed the softmax.
pub fn propagate_iterative<S: Scalar>(op: &PropagationOperator<S>, p0: &ScoreMatrix<S>, alpha: f64, steps: usize) -> ScoreMatrix<S> {
    let a: S = cst(alpha);
    let base = p0.values.mapv(|v| (S::one() - a) * v);
    // L has at most 2m nonzeros per row, so iterate over those only.
    let rows: Vec<Vec<(usize, S)>> = op
        .matrix
        .rows()
        .into_iter()
        .map(|r| r.iter().enumerate().filter(|(_, v)| **v != S::zero()).map(|(k, &v)| (k, a * v)).collect())
        .collect();
    let width = base.ncols();
    let base = base.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
    let mut p = p0.values.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
    let mut next = base.clone();
    for _ in 0..steps {
        next.copy_from_slice(&base);
        for (j, row) in rows.iter().enumerate() {
            let out = &mut next[j * width..(j + 1) * width];
            for &(k, v) in row {
                for (o, &x) in out.iter_mut().zip(&p[k * width..(k + 1) * width]) {
                    *o += v * x;
                }
            }
        }
        std::mem::swap(&mut p, &mut next);
    }
    let p = Array2::from_shape_vec((rows.len(), width), p).expect("score shape");
    ScoreMatrix {
        values: p,
        kind: if steps == 0 { p0.kind } else { ScoreKind::Propagated },
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn class_probabilities<S: Scalar>(p_star: &ScoreMatrix<S>) -> ClassProbabilities<S> {
    let mut p = p_star.values.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    ClassProbabilities { p }
}

/// Argmax over the rows from `first_query` on; ties go to the lowest class index.
pub fn predict<S: Scalar>(p_star: &ScoreMatrix<S>, first_query: usize) -> Vec<usize> {
    p_star
        .values
        .axis_iter(Axis(0))
        .skip(first_query)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Unreduced cross-entropy over every node: `Σ_j −log p_j[y_j]`.
pub fn layer_cross_entropy<S: Scalar>(probs: &ClassProbabilities<S>, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(j, &y)| -probs.p[[j, y]].to_f64_lossy().max(PROB_FLOOR).ln())
        .sum()
}

/// Gradient of `weight · layer_cross_entropy` with respect to the scores `P*`.
///
/// Rows whose true-class probability sits below the floor contribute a
/// constant to the loss and therefore a zero gradient.
pub fn cross_entropy_grad<S: Scalar>(probs: &ClassProbabilities<S>, labels: &[usize], weight: f64) -> Array2<S> {
    let w: S = cst(weight);
    let mut g = probs.p.mapv(|v| v * w);
    for (j, &y) in labels.iter().enumerate() {
        if probs.p[[j, y]].to_f64_lossy() < PROB_FLOOR {
            g.row_mut(j).fill(S::zero());
        } else {
            g[[j, y]] -= w;
        }
    }
    g
}

/// Weighted sum of per-layer cross-entropies over all nodes (support and query).
pub fn episode_loss<S: Scalar>(
    probs: &BTreeMap<usize, ClassProbabilities<S>>,
    labels: &[usize],
    weights: &BTreeMap<usize, f64>,
) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    for (&layer, p) in probs {
        let w = weights.get(&layer).copied().unwrap_or(0.0);
        let ce = layer_cross_entropy(p, labels);
        out.per_layer.insert(layer, ce);
        out.weights.insert(layer, w);
        out.total += w * ce;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::PropagationOperator;
    use ndarray::array;

    #[test]
    fn two_way_one_shot_one_query_initial_scores() {
        let p0 = initial_scores_from_labels::<f64>(&[0, 1], 3, 2);
        assert_eq!(p0.values, array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        assert_eq!(p0.kind, ScoreKind::Initial);
    }

    #[test]
    fn five_way_five_shot_has_25_ones() {
        let labels: Vec<usize> = (0..5).flat_map(|l| std::iter::repeat_n(l, 5)).collect();
        let p0 = initial_scores_from_labels::<f64>(&labels, 100, 5);
        assert_eq!(p0.values.shape(), &[100, 5]);
        assert_eq!(p0.values.sum(), 25.0);
        for (j, row) in p0.values.axis_iter(Axis(0)).enumerate() {
            assert_eq!(row.sum(), if j < 25 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn zero_operator_leaves_scores_unchanged() {
        let op = PropagationOperator::from_matrix(Array2::<f64>::zeros((3, 3)));
        let p0 = initial_scores_from_labels::<f64>(&[0, 1], 3, 2);
        let p = propagate_closed_form(&op, &p0, 0.99).unwrap();
        assert_eq!(p.values, p0.values);
    }

    #[test]
    fn small_alpha_approaches_initial_scores() {
        let l = array![[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]];
        let op = PropagationOperator::from_matrix(l);
        let p0 = initial_scores_from_labels::<f64>(&[0, 1], 3, 2);
        let p = propagate_closed_form(&op, &p0, 1e-9).unwrap();
        for (a, b) in p.values.iter().zip(&p0.values) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn iterative_edge_cases() {
        let op = PropagationOperator::from_matrix(Array2::<f64>::zeros((3, 3)));
        let p0 = initial_scores_from_labels::<f64>(&[0, 1], 3, 2);
        assert_eq!(propagate_iterative(&op, &p0, 0.5, 0).values, p0.values);
        assert_eq!(propagate_iterative(&op, &p0, 0.5, 1).values, p0.values.mapv(|v| 0.5 * v));
    }

    #[test]
    fn rejects_alpha_outside_unit_interval() {
        let op = PropagationOperator::from_matrix(Array2::<f64>::zeros((2, 2)));
        let p0 = initial_scores_from_labels::<f64>(&[0], 2, 2);
        assert!(propagate_closed_form(&op, &p0, 1.0).is_err());
        assert!(propagate_closed_form(&op, &p0, 0.0).is_err());
    }

    #[test]
    fn lu_solves_pivoting_system() {
        let a = array![[0.0f64, 2.0, 1.0], [1.0, 1.0, 0.0], [3.0, 0.0, 1.0]];
        let b = array![[3.0], [2.0], [4.0]];
        let x = LuFactors::factor(a.clone()).unwrap().solve(&b);
        let back = a.dot(&x);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_system_reports_condition() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        let err = LuFactors::factor(a).unwrap_err();
        assert!(err.to_string().contains("propagation singular"));
    }

    #[test]
    fn softmax_hand_values() {
        let s = ScoreMatrix {
            values: array![[0.0f64, 0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0]],
            kind: ScoreKind::Propagated,
        };
        let p = class_probabilities(&s);
        for v in p.p.row(0) {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let two = class_probabilities(&ScoreMatrix {
            values: array![[1.0, 0.0]],
            kind: ScoreKind::Propagated,
        });
        let e = std::f64::consts::E;
        assert!((two.p[[0, 0]] - e / (e + 1.0)).abs() < 1e-15);
        assert!((two.p[[0, 0]] - 0.7311).abs() < 1e-4);
        assert!((two.p[[0, 1]] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = class_probabilities(&ScoreMatrix {
            values: array![[0.3f64, -1.2, 2.0]],
            kind: ScoreKind::Propagated,
        });
        let b = class_probabilities(&ScoreMatrix {
            values: array![[100.3, 98.8, 102.0]],
            kind: ScoreKind::Propagated,
        });
        for (x, y) in a.p.iter().zip(&b.p) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_and_ties() {
        let s = ScoreMatrix {
            values: array![[9.0, 0.0], [0.1, 0.9], [0.5, 0.5]],
            kind: ScoreKind::Propagated,
        };
        assert_eq!(predict(&s, 1), vec![1, 0]);
    }

    #[test]
    fn predictions_follow_class_permutation() {
        let s = array![[0.2, 0.7, 0.1], [0.6, 0.3, 0.1], [0.1, 0.2, 0.7]];
        let perm = [2, 0, 1]; // old column c moves to perm[c]
        let mut t = Array2::zeros((3, 3));
        for c in 0..3 {
            t.column_mut(perm[c]).assign(&s.column(c));
        }
        let a = predict(&ScoreMatrix { values: s, kind: ScoreKind::Propagated }, 0);
        let b = predict(&ScoreMatrix { values: t, kind: ScoreKind::Propagated }, 0);
        assert_eq!(a.iter().map(|&c| perm[c]).collect::<Vec<_>>(), b);
    }

    #[test]
    fn perfect_and_uniform_losses() {
        let labels = vec![0, 1, 2, 3, 4];
        let perfect = ClassProbabilities { p: Array2::<f64>::eye(5) };
        assert_eq!(layer_cross_entropy(&perfect, &labels), 0.0);

        let uniform = ClassProbabilities {
            p: Array2::<f64>::from_elem((5, 5), 0.2),
        };
        let probs: BTreeMap<usize, _> = [(2, uniform.clone()), (3, uniform.clone()), (4, uniform)].into();
        let weights: BTreeMap<usize, f64> = [(2, 0.5), (3, 1.0), (4, 2.0)].into();
        let loss = episode_loss(&probs, &labels, &weights);
        let expected = 3.5 * 5.0 * 5f64.ln();
        assert!((loss.total - expected).abs() < 1e-12);
        assert!((loss.per_layer[&4] / 5.0 - 1.6094).abs() < 1e-4);
    }

    #[test]
    fn zero_weights_reduce_to_last_layer() {
        let labels = vec![0, 1, 1];
        let p = |a: f64| ClassProbabilities {
            p: array![[a, 1.0 - a], [0.3, 0.7], [0.6, 0.4]],
        };
        let probs: BTreeMap<usize, _> = [(2, p(0.9)), (3, p(0.2)), (4, p(0.5))].into();
        let weights: BTreeMap<usize, f64> = [(2, 0.0), (3, 0.0), (4, 1.0)].into();
        let loss = episode_loss(&probs, &labels, &weights);
        assert_eq!(loss.total, loss.per_layer[&4]);
    }

    #[test]
    fn floored_probability_has_finite_loss_and_zero_gradient() {
        let probs = ClassProbabilities { p: array![[1.0, 0.0]] };
        let loss = layer_cross_entropy(&probs, &[1]);
        assert!((loss - (-PROB_FLOOR.ln())).abs() < 1e-9);
        let g = cross_entropy_grad(&probs, &[1], 1.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }
}
