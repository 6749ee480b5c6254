//! Riemannian and exterior-calculus operators on lattice fields.
//!
//! Form norms use full index contraction throughout: |H|² = H_{ijk}H^{ijk}
//! with no factorial normalization, and (H²)_{ij} = H_{iab}H_j^{ab}, so that
//! tr_g H² = |H|².

mod curvature;
mod forms;

pub use curvature::*;
pub use forms::*;

use crate::lattice::{
    component_indices, component_number, Grid, LatticeError, TensorField, TensorKind, SPD_FLOOR,
};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("metric is not positive definite at grid point {point}")]
    NotPositive { point: usize },
    #[error("expected a symmetric 2-tensor, got {0:?}")]
    NotSymmetric(TensorKind),
    #[error("expected a differential form, got {0:?}")]
    NotAForm(TensorKind),
    #[error("form degree {degree} out of range for dimension {dims}")]
    Degree { degree: usize, dims: usize },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// A positive definite symmetric 2-tensor with its pointwise inverse and
/// volume density cached.
#[derive(Clone, Debug)]
pub struct MetricField {
    g: TensorField,
    inv: Vec<f64>,
    sqrt_det: Vec<f64>,
}

impl MetricField {
    pub fn new(g: TensorField) -> Result<Self> {
        if g.kind() != TensorKind::Symmetric2 {
            return Err(GeometryError::NotSymmetric(g.kind()));
        }
        let grid = *g.grid();
        let n = grid.dims();
        let npts = grid.len();
        let mut inv = vec![0.0; n * n * npts];
        let mut sqrt_det = vec![0.0; npts];
        let mut m = [0.0; 16];
        let mut mi = [0.0; 16];
        for p in 0..npts {
            for c in 0..n * n {
                m[c] = g.data()[c * npts + p];
            }
            if !is_spd(&m, n, SPD_FLOOR) {
                return Err(GeometryError::NotPositive { point: p });
            }
            let det = invert(&m, n, &mut mi);
            for c in 0..n * n {
                inv[c * npts + p] = mi[c];
            }
            sqrt_det[p] = det.sqrt();
        }
        Ok(Self { g, inv, sqrt_det })
    }

    pub fn flat(grid: Grid) -> Self {
        Self::constant(grid, &identity(grid.dims())).expect("identity is positive")
    }

    /// A spatially constant metric from a row-major n×n matrix.
    pub fn constant(grid: Grid, m: &[f64]) -> Result<Self> {
        let n = grid.dims();
        let g = TensorField::from_fn(grid, TensorKind::Symmetric2, |_, c| {
            c.copy_from_slice(&m[..n * n]);
        });
        Self::new(g)
    }

    /// e^{2φ} δ.
    pub fn conformal(phi: &crate::lattice::ScalarField) -> Self {
        let grid = *phi.grid();
        let n = grid.dims();
        let npts = grid.len();
        let mut data = vec![0.0; n * n * npts];
        for i in 0..n {
            for p in 0..npts {
                data[(i * n + i) * npts + p] = (2.0 * phi.values()[p]).exp();
            }
        }
        Self::new(TensorField::new(grid, TensorKind::Symmetric2, data).expect("valid"))
            .expect("conformal metrics are positive")
    }

    pub fn grid(&self) -> &Grid {
        self.g.grid()
    }

    pub fn dims(&self) -> usize {
        self.g.grid().dims()
    }

    pub fn tensor(&self) -> &TensorField {
        &self.g
    }

    pub fn into_tensor(self) -> TensorField {
        self.g
    }

    /// Metric components, `data[(i*n + j)*len + p]`.
    pub fn components(&self) -> &[f64] {
        self.g.data()
    }

    /// Inverse metric components in the same layout.
    pub fn inverse(&self) -> &[f64] {
        &self.inv
    }

    pub fn sqrt_det(&self) -> &[f64] {
        &self.sqrt_det
    }

    pub fn g_at(&self, i: usize, j: usize, p: usize) -> f64 {
        let n = self.dims();
        self.g.data()[(i * n + j) * self.grid().len() + p]
    }

    pub fn inv_at(&self, i: usize, j: usize, p: usize) -> f64 {
        let n = self.dims();
        self.inv[(i * n + j) * self.grid().len() + p]
    }

    /// Raise every index of a covariant tensor.
    pub fn raise_all(&self, t: &TensorField) -> Vec<f64> {
        let mut data = t.data().to_vec();
        for slot in 0..t.rank() {
            data = apply_slot(self.grid(), t.rank(), &data, slot, &self.inv);
        }
        data
    }

    /// Lower every index of a contravariant tensor.
    pub fn lower_all(&self, t: &TensorField) -> Vec<f64> {
        let mut data = t.data().to_vec();
        for slot in 0..t.rank() {
            data = apply_slot(self.grid(), t.rank(), &data, slot, self.g.data());
        }
        data
    }

    /// max |g·g⁻¹ − Id| over the grid.
    pub fn inverse_defect(&self) -> f64 {
        let n = self.dims();
        let npts = self.grid().len();
        let mut worst: f64 = 0.0;
        for p in 0..npts {
            for i in 0..n {
                for j in 0..n {
                    let s: f64 = (0..n).map(|k| self.g_at(i, k, p) * self.inv_at(k, j, p)).sum();
                    let e = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((s - e).abs());
                }
            }
        }
        worst
    }
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Contract slot `slot` of a rank-`rank` field with a pointwise n×n matrix
/// field `mat` (component-major), `out_{..a..} = Σ_m M_{am} in_{..m..}`.
pub(crate) fn apply_slot(grid: &Grid, rank: usize, data: &[f64], slot: usize, mat: &[f64]) -> Vec<f64> {
    let n = grid.dims();
    let npts = grid.len();
    let ncomp = n.pow(rank as u32);
    let mut out = vec![0.0; data.len()];
    for c in 0..ncomp {
        let idx = component_indices(n, rank, c);
        let a = idx[slot];
        let dst = &mut out[c * npts..(c + 1) * npts];
        for m in 0..n {
            let mut src_idx = idx;
            src_idx[slot] = m;
            let sc = component_number(n, &src_idx[..rank]);
            let src = &data[sc * npts..(sc + 1) * npts];
            let mm = &mat[(a * n + m) * npts..(a * n + m + 1) * npts];
            for p in 0..npts {
                dst[p] += mm[p] * src[p];
            }
        }
    }
    out
}

/// Cholesky test of `m − floor·I`, row-major n×n.
pub(crate) fn is_spd(m: &[f64], n: usize, floor: f64) -> bool {
    let mut l = [0.0; 16];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i * n + j] - if i == j { floor } else { 0.0 };
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return false;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    true
}

/// Inverse of a row-major n×n matrix (n ≤ 4) by Gauss–Jordan with partial
/// pivoting; returns the determinant.
pub(crate) fn invert(m: &[f64], n: usize, out: &mut [f64]) -> f64 {
    match n {
        2 => {
            let det = m[0] * m[3] - m[1] * m[2];
            out[0] = m[3] / det;
            out[1] = -m[1] / det;
            out[2] = -m[2] / det;
            out[3] = m[0] / det;
            det
        }
        3 => {
            let c00 = m[4] * m[8] - m[5] * m[7];
            let c01 = m[5] * m[6] - m[3] * m[8];
            let c02 = m[3] * m[7] - m[4] * m[6];
            let det = m[0] * c00 + m[1] * c01 + m[2] * c02;
            let r = 1.0 / det;
            out[0] = c00 * r;
            out[1] = (m[2] * m[7] - m[1] * m[8]) * r;
            out[2] = (m[1] * m[5] - m[2] * m[4]) * r;
            out[3] = c01 * r;
            out[4] = (m[0] * m[8] - m[2] * m[6]) * r;
            out[5] = (m[2] * m[3] - m[0] * m[5]) * r;
            out[6] = c02 * r;
            out[7] = (m[1] * m[6] - m[0] * m[7]) * r;
            out[8] = (m[0] * m[4] - m[1] * m[3]) * r;
            det
        }
        _ => {
            let mut a = [0.0; 16];
            a[..n * n].copy_from_slice(&m[..n * n]);
            for (i, v) in out[..n * n].iter_mut().enumerate() {
                *v = if i % (n + 1) == 0 { 1.0 } else { 0.0 };
            }
            let mut det = 1.0;
            for col in 0..n {
                let piv = (col..n)
                    .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
                    .unwrap();
                if piv != col {
                    for k in 0..n {
                        a.swap(piv * n + k, col * n + k);
                        out.swap(piv * n + k, col * n + k);
                    }
                    det = -det;
                }
                let d = a[col * n + col];
                det *= d;
                for k in 0..n {
                    a[col * n + k] /= d;
                    out[col * n + k] /= d;
                }
                for r in 0..n {
                    if r != col {
                        let f = a[r * n + col];
                        for k in 0..n {
                            a[r * n + k] -= f * a[col * n + k];
                            out[r * n + k] -= f * out[col * n + k];
                        }
                    }
                }
            }
            det
        }
    }
}

/// Gather the n×n matrix of a component-major matrix field at a point.
#[inline]
pub(crate) fn gather(data: &[f64], n: usize, npts: usize, p: usize, out: &mut [f64; 16]) {
    for c in 0..n * n {
        out[c] = data[c * npts + p];
    }
}
