//! Per-task cosine nearest-neighbor graph and feature propagation.
//!
//! Pipeline for a task with vertex features `V`:
//!
//! 1. `S[i,j] = cos(V_i, V_j)` off the diagonal, `S[i,i] = 0`;
//! 2. keep only the `m` strongest entries of every row, mirrored so that
//!    `S` stays symmetric;
//! 3. `E = D^{-1/2} S D^{-1/2}` with `D_ii = Σ_j S[i,j]`;
//! 4. `V_new = (αI + E)^γ V`, where `α` is trained with the classifier.

use std::cmp::Ordering;

use crate::error::{check_dim, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, norm, Scalar};

/// Floor applied to vertex degrees so isolated vertices stay finite.
pub const DEGREE_FLOOR: f64 = 1e-12;

/// How the per-row top-m selections are combined into a symmetric mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SparsifyRule {
    /// Keep `(i,j)` if it is in the top-m of row `i` or of row `j`.
    #[default]
    Union,
    /// Keep `(i,j)` only if it is in the top-m of both rows.
    Intersection,
}

impl std::str::FromStr for SparsifyRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "union" => Ok(Self::Union),
            "intersection" => Ok(Self::Intersection),
            other => Err(format!("unknown sparsify rule {other:?} (union|intersection)")),
        }
    }
}

impl std::fmt::Display for SparsifyRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Union => "union",
            Self::Intersection => "intersection",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig<T> {
    pub alpha: T,
    pub gamma: usize,
}

impl<T: Scalar> PropagationConfig<T> {
    pub fn new(alpha: T, gamma: usize) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::param("alpha", "must be finite"));
        }
        Ok(Self { alpha, gamma })
    }
}

/// Graph construction settings shared by every task of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    /// Neighbors kept per row.
    pub m: usize,
    pub gamma: usize,
    pub alpha_init: f64,
    pub rule: SparsifyRule,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            m: 10,
            gamma: 3,
            alpha_init: 1.0,
            rule: SparsifyRule::Union,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::param("m", "must be positive"));
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::param("alpha_init", "must be finite"));
        }
        Ok(())
    }

    pub fn propagation<T: Scalar>(&self) -> PropagationConfig<T> {
        PropagationConfig {
            alpha: T::lit(self.alpha_init),
            gamma: self.gamma,
        }
    }
}

/// Task graph: vertices, sparsified similarities and normalized adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph<T> {
    pub v: Matrix<T>,
    pub s: Matrix<T>,
    pub e_norm: Matrix<T>,
    pub degrees: Vec<T>,
    pub m: usize,
}

impl<T: Scalar> TaskGraph<T> {
    pub fn build(v: Matrix<T>, m: usize, rule: SparsifyRule) -> Result<Self> {
        let dense = build_similarity(&v)?;
        let s = sparsify_top_m(&dense, m, rule)?;
        let (e_norm, degrees) = normalize_signed(&s)?;
        Ok(Self {
            v,
            s,
            e_norm,
            degrees,
            m,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.v.rows()
    }

    pub fn propagate(&self, cfg: &PropagationConfig<T>) -> Result<Matrix<T>> {
        propagate(&self.v, &self.e_norm, cfg)
    }
}

/// `uᵀv / (‖u‖‖v‖)`.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    check_dim("cosine_similarity", u.len(), v.len())?;
    let nu = norm(u);
    if nu == T::zero() {
        return Err(Error::DegenerateVector { row: 0 });
    }
    let nv = norm(v);
    if nv == T::zero() {
        return Err(Error::DegenerateVector { row: 1 });
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Dense cosine similarity between all vertex pairs with a zero diagonal.
/// Each unordered pair is evaluated once and mirrored.
pub fn build_similarity<T: Scalar>(v: &Matrix<T>) -> Result<Matrix<T>> {
    let n = v.rows();
    let norms: Vec<T> = v.row_iter().map(norm).collect();
    if let Some(row) = norms.iter().position(|&x| x == T::zero() || !x.is_finite()) {
        return Err(Error::DegenerateVector { row });
    }
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let c = dot(v.row(i), v.row(j)) / (norms[i] * norms[j]);
            s[(i, j)] = c;
            s[(j, i)] = c;
        }
    }
    Ok(s)
}

/// Column indices of the `m` largest off-diagonal entries of row `i`,
/// ties going to the lower column index.
fn row_top_m<T: Scalar>(s: &Matrix<T>, i: usize, m: usize) -> Vec<usize> {
    let mut cols: Vec<usize> = (0..s.cols()).filter(|&j| j != i).collect();
    cols.sort_by(|&a, &b| {
        s[(i, b)]
            .partial_cmp(&s[(i, a)])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    cols.truncate(m);
    cols
}

/// Keeps the `m` largest entries per row and mirrors the selection.
///
/// With `m ≥ n − 1` every entry survives under either rule and the input is
/// returned unchanged.
pub fn sparsify_top_m<T: Scalar>(s: &Matrix<T>, m: usize, rule: SparsifyRule) -> Result<Matrix<T>> {
    let n = s.rows();
    check_dim("sparsify_top_m (square)", n, s.cols())?;
    if m == 0 {
        return Err(Error::param("m", "must be positive"));
    }
    if m + 1 >= n {
        log::debug!("sparsify_top_m: m = {m} keeps all {n} vertices' neighbors, no-op");
        return Ok(s.clone());
    }
    let mut in_top = vec![false; n * n];
    for i in 0..n {
        for j in row_top_m(s, i, m) {
            in_top[i * n + j] = true;
        }
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let keep = match rule {
                SparsifyRule::Union => in_top[i * n + j] || in_top[j * n + i],
                SparsifyRule::Intersection => in_top[i * n + j] && in_top[j * n + i],
            };
            if keep && i != j {
                out[(i, j)] = s[(i, j)];
            }
        }
    }
    Ok(out)
}

/// `E = D^{-1/2} S D^{-1/2}` with degrees floored at [`DEGREE_FLOOR`].
///
/// `S` must be non-negative; a negative kept similarity is rejected.
pub fn normalize_adjacency<T: Scalar>(s: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    let n = s.rows();
    check_dim("normalize_adjacency (square)", n, s.cols())?;
    if let Some(pos) = s.as_slice().iter().position(|&x| x < T::zero()) {
        return Err(Error::ContractViolation(format!(
            "negative similarity at ({}, {}) in adjacency input",
            pos / n,
            pos % n
        )));
    }
    normalize_signed(s)
}

/// Normalization used by [`TaskGraph::build`]: raw cosines are kept, so
/// negative entries are allowed as long as no degree is negative.
fn normalize_signed<T: Scalar>(s: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    let n = s.rows();
    check_dim("normalize_adjacency (square)", n, s.cols())?;
    let sums: Vec<T> = s.row_iter().map(|r| r.iter().copied().sum::<T>()).collect();
    if let Some(i) = sums.iter().position(|&d| d < T::zero()) {
        return Err(Error::ContractViolation(format!(
            "vertex {i} has negative degree {}",
            sums[i]
        )));
    }
    let floor = T::lit(DEGREE_FLOOR);
    let degrees: Vec<T> = sums.into_iter().map(|d| d.max(floor)).collect();
    let root: Vec<T> = degrees.iter().map(|d| d.sqrt()).collect();
    let mut e = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let x = s[(i, j)] / (root[i] * root[j]);
            e[(i, j)] = x;
            e[(j, i)] = x;
        }
    }
    Ok((e, degrees))
}

fn check_propagation_shapes<T: Scalar>(v: &Matrix<T>, e: &Matrix<T>) -> Result<()> {
    check_dim("propagate: adjacency rows", v.rows(), e.rows())?;
    check_dim("propagate: adjacency cols", v.rows(), e.cols())
}

/// One application of `(αI + E)`: `αW + E·W`.
fn hop<T: Scalar>(w: &Matrix<T>, e: &Matrix<T>, alpha: T) -> Result<Matrix<T>> {
    let mut out = e.matmul(w)?;
    for (o, &x) in out.as_mut_slice().iter_mut().zip(w.as_slice()) {
        *o += alpha * x;
    }
    Ok(out)
}

/// `(αI + E)^γ V` by `γ` successive hops; `γ = 0` returns `V`.
pub fn propagate<T: Scalar>(
    v: &Matrix<T>,
    e_norm: &Matrix<T>,
    cfg: &PropagationConfig<T>,
) -> Result<Matrix<T>> {
    check_propagation_shapes(v, e_norm)?;
    let mut w = v.clone();
    for _ in 0..cfg.gamma {
        w = hop(&w, e_norm, cfg.alpha)?;
    }
    Ok(w)
}

/// Derivative of `⟨upstream, (αI+E)^γ V⟩` with respect to `α`:
/// `γ · ⟨upstream, (αI+E)^{γ−1} V⟩`.
pub fn propagate_alpha_grad<T: Scalar>(
    v: &Matrix<T>,
    e_norm: &Matrix<T>,
    cfg: &PropagationConfig<T>,
    upstream: &Matrix<T>,
) -> Result<T> {
    check_propagation_shapes(v, e_norm)?;
    check_dim("propagate_alpha_grad: upstream rows", v.rows(), upstream.rows())?;
    check_dim("propagate_alpha_grad: upstream cols", v.cols(), upstream.cols())?;
    if cfg.gamma == 0 {
        return Ok(T::zero());
    }
    let partial = PropagationConfig {
        alpha: cfg.alpha,
        gamma: cfg.gamma - 1,
    };
    let w = propagate(v, e_norm, &partial)?;
    Ok(T::lit(cfg.gamma as f64) * upstream.frobenius_dot(&w)?)
}
