//! Episode graphs: Gaussian similarities under learned length scales,
//! m-nearest-neighbour sparsification and symmetric degree normalization.
//!
//! The normalized operator `L = D^{-1/2} W D^{-1/2}` is what the method calls
//! a "normalized graph Laplacian"; strictly it is the normalized adjacency
//! (the Laplacian would be `I - L`). The name `L` is kept throughout.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::{cst, Scalar};

/// Sparsified, symmetrized similarity matrix.
#[derive(Clone, Debug)]
pub struct AffinityGraph<S> {
    pub weights: Array2<S>,
    pub m: usize,
    /// `kept[[j, k]]`: entry `k` survived row `j`'s top-m selection.
    kept: Array2<bool>,
}

impl<S: Scalar> AffinityGraph<S> {
    pub fn n_nodes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn kept(&self) -> &Array2<bool> {
        &self.kept
    }

    pub fn row_nonzeros(&self, row: usize) -> usize {
        self.weights.row(row).iter().filter(|&&v| v != S::zero()).count()
    }
}

/// `L = D^{-1/2} W D^{-1/2}`; rows and columns of isolated nodes are zero.
#[derive(Clone, Debug)]
pub struct PropagationOperator<S> {
    pub matrix: Array2<S>,
    inv_sqrt_degree: Array1<S>,
}

impl<S: Scalar> PropagationOperator<S> {
    pub fn from_matrix(matrix: Array2<S>) -> Self {
        let n = matrix.nrows();
        Self {
            matrix,
            inv_sqrt_degree: Array1::zeros(n),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.matrix.nrows()
    }
}

fn scaled_rows<S: Scalar>(embedding: ArrayView2<S>, sigma: ArrayView1<S>) -> Result<Array2<S>> {
    if embedding.nrows() != sigma.len() {
        return Err(Error::Shape {
            context: "length scales".into(),
            expected: vec![embedding.nrows()],
            received: vec![sigma.len()],
        });
    }
    if sigma.iter().any(|&s| !(s > S::zero()) || !s.is_finite()) {
        return Err(Error::Config("length scales must be positive and finite".into()));
    }
    let mut z = embedding.as_standard_layout().into_owned();
    for (mut row, &s) in z.axis_iter_mut(Axis(0)).zip(sigma) {
        row.mapv_inplace(|v| v / s);
    }
    Ok(z)
}

/// Eight interleaved partial sums, so the loop vectorizes.
fn squared_distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut lanes = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: S = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| (x - y) * (x - y)).fold(S::zero(), |s, v| s + v);
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            let d = xa[i] - xb[i];
            lanes[i] += d * d;
        }
    }
    lanes.iter().fold(tail, |s, &v| s + v)
}

/// Dense `S[j,k] = exp(-½‖f_j/σ_j − f_k/σ_k‖²)` with unit diagonal.
pub fn pairwise_similarity<S: Scalar>(embedding: ArrayView2<S>, sigma: ArrayView1<S>) -> Result<Array2<S>> {
    let z = scaled_rows(embedding, sigma)?;
    similarity_of_scaled(&z)
}

fn similarity_of_scaled<S: Scalar>(z: &Array2<S>) -> Result<Array2<S>> {
    let n = z.nrows();
    let half: S = cst(0.5);
    let mut s = Array2::<S>::eye(n);
    for j in 0..n {
        let zj = z.row(j);
        let zj = zj.as_slice().expect("standard layout");
        for k in (j + 1)..n {
            let zk = z.row(k);
            let v = (-half * squared_distance(zj, zk.as_slice().expect("standard layout"))).exp();
            if !v.is_finite() {
                return Err(Error::SimilarityOverflow);
            }
            s[[j, k]] = v;
            s[[k, j]] = v;
        }
    }
    Ok(s)
}

/// Zeroes the diagonal, keeps the `m` largest off-diagonal entries of each
/// row (ties to the lower column index), then symmetrizes by averaging.
pub fn sparsify<S: Scalar>(s: &Array2<S>, m: usize) -> Result<AffinityGraph<S>> {
    let n = s.nrows();
    if m >= n {
        return Err(Error::NeighborsTooLarge { m, n_nodes: n });
    }
    if m == 0 {
        return Err(Error::Config("m must be at least 1".into()));
    }
    let mut kept = Array2::from_elem((n, n), false);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for j in 0..n {
        order.clear();
        order.extend((0..n).filter(|&k| k != j));
        order.sort_by(|&a, &b| {
            s[[j, b]]
                .partial_cmp(&s[[j, a]])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &k in &order[..m] {
            kept[[j, k]] = true;
        }
    }
    let half: S = cst(0.5);
    let weights = Array2::from_shape_fn((n, n), |(j, k)| {
        let a = if kept[[j, k]] { s[[j, k]] } else { S::zero() };
        let b = if kept[[k, j]] { s[[k, j]] } else { S::zero() };
        (a + b) * half
    });
    Ok(AffinityGraph { weights, m, kept })
}

/// The degree is offset by machine epsilon before the inverse square root.
/// Without it a node whose similarities have all but underflowed gets an
/// enormous `d^{-1/2}` and the products in `L` and its gradient overflow.
pub fn normalize<S: Scalar>(graph: &AffinityGraph<S>) -> PropagationOperator<S> {
    let w = &graph.weights;
    let inv_sqrt_degree = w.sum_axis(Axis(1)).mapv(|d| {
        if d > S::zero() {
            S::one() / (d + S::epsilon()).sqrt()
        } else {
            S::zero()
        }
    });
    let s = &inv_sqrt_degree;
    // s_j * s_k is formed first so that L is exactly symmetric.
    let matrix = Array2::from_shape_fn(w.raw_dim(), |(j, k)| w[[j, k]] * (s[j] * s[k]));
    PropagationOperator {
        matrix,
        inv_sqrt_degree,
    }
}

/// Intermediate values of [`build_operator`] needed for the backward pass.
#[derive(Clone, Debug)]
pub struct GraphTrace<S> {
    embedding: Array2<S>,
    sigma: Array1<S>,
    scaled: Array2<S>,
    pub similarity: Array2<S>,
    pub graph: AffinityGraph<S>,
}

/// Similarity → sparsify → normalize in one pass.
pub fn build_operator<S: Scalar>(
    embedding: ArrayView2<S>,
    sigma: ArrayView1<S>,
    m: usize,
) -> Result<(PropagationOperator<S>, GraphTrace<S>)> {
    let scaled = scaled_rows(embedding, sigma)?;
    let similarity = similarity_of_scaled(&scaled)?;
    let graph = sparsify(&similarity, m)?;
    let op = normalize(&graph);
    let trace = GraphTrace {
        embedding: embedding.to_owned(),
        sigma: sigma.to_owned(),
        scaled,
        similarity,
        graph,
    };
    Ok((op, trace))
}

/// Gradient of the affinity weights given the gradient of `L`.
pub fn normalize_backward<S: Scalar>(graph: &AffinityGraph<S>, op: &PropagationOperator<S>, d_l: &Array2<S>) -> Array2<S> {
    let w = &graph.weights;
    let s = &op.inv_sqrt_degree;
    let n = w.nrows();
    let neg_half: S = cst(-0.5);
    let mut d_deg = Array1::<S>::zeros(n);
    for j in 0..n {
        let mut ds = S::zero();
        for k in 0..n {
            ds += (d_l[[j, k]] + d_l[[k, j]]) * w[[j, k]] * s[k];
        }
        d_deg[j] = ds * neg_half * s[j] * s[j] * s[j];
    }
    Array2::from_shape_fn((n, n), |(j, k)| d_l[[j, k]] * s[j] * s[k] + d_deg[j])
}

/// Gradient of the dense similarities given the gradient of the sparsified weights.
pub fn sparsify_backward<S: Scalar>(graph: &AffinityGraph<S>, d_w: &Array2<S>) -> Array2<S> {
    let half: S = cst(0.5);
    let kept = &graph.kept;
    Array2::from_shape_fn(d_w.raw_dim(), |(j, k)| {
        if kept[[j, k]] {
            (d_w[[j, k]] + d_w[[k, j]]) * half
        } else {
            S::zero()
        }
    })
}

/// Gradients of embedding rows and length scales given the gradient of the
/// dense similarity matrix (diagonal entries are constant and ignored).
pub fn similarity_backward<S: Scalar>(trace: &GraphTrace<S>, d_s: &Array2<S>) -> (Array2<S>, Array1<S>) {
    let n = d_s.nrows();
    let s = &trace.similarity;
    let neg_half: S = cst(-0.5);
    // H = G + Gᵀ with G = ∂ℓ/∂(d²) = -½ S ∘ dS off the diagonal.
    let mut h = Array2::<S>::zeros((n, n));
    for j in 0..n {
        for k in 0..n {
            if j != k {
                let g_jk = neg_half * s[[j, k]] * d_s[[j, k]];
                let g_kj = neg_half * s[[k, j]] * d_s[[k, j]];
                h[[j, k]] = g_jk + g_kj;
            }
        }
    }
    let two: S = cst(2.0);
    let row_sums = h.sum_axis(Axis(1));
    // dZ = 2 (diag(H 1) − H) Z
    let hz = h.dot(&trace.scaled);
    let mut d_z = trace.scaled.clone();
    for (j, mut row) in d_z.axis_iter_mut(Axis(0)).enumerate() {
        let rs = row_sums[j];
        ndarray::Zip::from(&mut row)
            .and(hz.row(j))
            .for_each(|v, &hzv| *v = two * (rs * *v - hzv));
    }
    let mut d_emb = d_z.clone();
    let mut d_sigma = Array1::<S>::zeros(n);
    for j in 0..n {
        let sj = trace.sigma[j];
        let dot = d_z
            .row(j)
            .iter()
            .zip(trace.embedding.row(j))
            .fold(S::zero(), |acc, (&a, &b)| acc + a * b);
        d_sigma[j] = -dot / (sj * sj);
        d_emb.row_mut(j).mapv_inplace(|v| v / sj);
    }
    (d_emb, d_sigma)
}

/// Full backward of [`build_operator`].
pub fn operator_backward<S: Scalar>(
    trace: &GraphTrace<S>,
    op: &PropagationOperator<S>,
    d_l: &Array2<S>,
) -> (Array2<S>, Array1<S>) {
    let d_w = normalize_backward(&trace.graph, op, d_l);
    let d_s = sparsify_backward(&trace.graph, &d_w);
    similarity_backward(trace, &d_s)
}
