//! Periodic structured grids on the n-torus.
//!
//! Fields are stored component-major: component `c` of a tensor field
//! occupies `data[c * len .. (c + 1) * len]`, where `len` is the number of
//! grid points. Components use the full index layout, so a rank-`r` tensor
//! on an `n`-dimensional grid has `n^r` components addressed row-major by
//! their index tuple.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::MetricField;

pub const MAX_DIMS: usize = 4;

/// Floor on pointwise eigenvalues of positive symmetric fields.
pub const SPD_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum LatticeError {
    #[error("grid dimension {0} outside 2..=4")]
    Dimension(usize),
    #[error("resolution {res} on axis {axis} must be even and at least 8")]
    Resolution { res: usize, axis: usize },
    #[error("period {period} on axis {axis} must be positive and finite")]
    Period { period: f64, axis: usize },
    #[error("axis {axis} out of range for a {dims}-dimensional grid")]
    Axis { axis: usize, dims: usize },
    #[error("rank mismatch: {0} vs {1}")]
    RankMismatch(usize, usize),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("component data has length {got}, expected {expected}")]
    Length { got: usize, expected: usize },
    #[error("declared symmetry {0:?} violated")]
    Symmetry(TensorKind),
    #[error("non-finite value in field")]
    NonFinite,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("payload mismatch: {0}")]
    PayloadMismatch(String),
    #[error("snapshot header: {0}")]
    Header(String),
}

pub type Result<T, E = LatticeError> = std::result::Result<T, E>;

/// A periodic grid with `dims` axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    dims: usize,
    res: [usize; MAX_DIMS],
    periods: [f64; MAX_DIMS],
}

impl Grid {
    pub fn new(resolutions: &[usize], periods: &[f64]) -> Result<Self> {
        let dims = resolutions.len();
        if !(2..=MAX_DIMS).contains(&dims) {
            return Err(LatticeError::Dimension(dims));
        }
        if periods.len() != dims {
            return Err(LatticeError::Dimension(periods.len()));
        }
        let mut res = [1; MAX_DIMS];
        let mut per = [1.0; MAX_DIMS];
        for axis in 0..dims {
            let r = resolutions[axis];
            if r < 8 || !r.is_multiple_of(2) {
                return Err(LatticeError::Resolution { res: r, axis });
            }
            let p = periods[axis];
            if !(p.is_finite() && p > 0.0) {
                return Err(LatticeError::Period { period: p, axis });
            }
            res[axis] = r;
            per[axis] = p;
        }
        Ok(Self { dims, res, periods: per })
    }

    /// `n` points per axis and period 2π on every axis.
    pub fn cubic(dims: usize, n: usize) -> Result<Self> {
        Self::new(&vec![n; dims], &vec![TAU; dims])
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn resolution(&self, axis: usize) -> usize {
        self.res[axis]
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.res[..self.dims]
    }

    pub fn period(&self, axis: usize) -> f64 {
        self.periods[axis]
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods[..self.dims]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.periods[axis] / self.res[axis] as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dims).map(|a| self.spacing(a)).fold(f64::INFINITY, f64::min)
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.res[..self.dims].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight of a single point, ∏ h_a.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dims).map(|a| self.spacing(a)).product()
    }

    pub fn volume(&self) -> f64 {
        self.periods[..self.dims].iter().product()
    }

    /// Row-major stride of an axis (last axis fastest).
    pub fn stride(&self, axis: usize) -> usize {
        self.res[axis + 1..self.dims].iter().product()
    }

    pub fn multi_index(&self, mut p: usize) -> [usize; MAX_DIMS] {
        let mut idx = [0; MAX_DIMS];
        for axis in (0..self.dims).rev() {
            idx[axis] = p % self.res[axis];
            p /= self.res[axis];
        }
        idx
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .take(self.dims)
            .enumerate()
            .fold(0, |acc, (a, &i)| acc * self.res[a] + i % self.res[a])
    }

    /// Coordinates of point `p`, `x_a = i_a h_a`.
    pub fn coords(&self, p: usize) -> [f64; MAX_DIMS] {
        let idx = self.multi_index(p);
        let mut x = [0.0; MAX_DIMS];
        for a in 0..self.dims {
            x[a] = idx[a] as f64 * self.spacing(a);
        }
        x
    }

    pub fn check_axis(&self, axis: usize) -> Result<()> {
        if axis < self.dims {
            Ok(())
        } else {
            Err(LatticeError::Axis { axis, dims: self.dims })
        }
    }

    /// Number of components of a rank-`rank` tensor in full layout.
    pub fn components(&self, rank: usize) -> usize {
        self.dims.pow(rank as u32)
    }
}

/// Decompose a component number into its index tuple.
pub fn component_indices(dims: usize, rank: usize, mut c: usize) -> [usize; MAX_DIMS] {
    let mut idx = [0; MAX_DIMS];
    for slot in (0..rank).rev() {
        idx[slot] = c % dims;
        c /= dims;
    }
    idx
}

pub fn component_number(dims: usize, idx: &[usize]) -> usize {
    idx.iter().fold(0, |acc, &i| acc * dims + i)
}

/// Sign and sorted-order flag of a permutation of distinct indices;
/// returns 0 when an index repeats.
pub fn permutation_sign(idx: &[usize]) -> i32 {
    let mut sign = 1;
    for i in 0..idx.len() {
        for j in i + 1..idx.len() {
            if idx[i] == idx[j] {
                return 0;
            }
            if idx[i] > idx[j] {
                sign = -sign;
            }
        }
    }
    sign
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "degree", rename_all = "snake_case")]
pub enum TensorKind {
    Scalar,
    Vector,
    Covector,
    Symmetric2,
    /// Differential form of the given degree.
    Antisymmetric(usize),
    General(usize),
}

impl TensorKind {
    pub fn rank(&self) -> usize {
        match *self {
            TensorKind::Scalar => 0,
            TensorKind::Vector | TensorKind::Covector => 1,
            TensorKind::Symmetric2 => 2,
            TensorKind::Antisymmetric(k) | TensorKind::General(k) => k,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            TensorKind::Scalar => "scalar",
            TensorKind::Vector => "vector",
            TensorKind::Covector => "covector",
            TensorKind::Symmetric2 => "symmetric2",
            TensorKind::Antisymmetric(_) => "antisymmetric",
            TensorKind::General(_) => "general",
        }
    }

    pub fn from_tag(tag: &str, rank: usize) -> Option<Self> {
        Some(match (tag, rank) {
            ("scalar", 0) => TensorKind::Scalar,
            ("vector", 1) => TensorKind::Vector,
            ("covector", 1) => TensorKind::Covector,
            ("symmetric2", 2) => TensorKind::Symmetric2,
            ("antisymmetric", k) => TensorKind::Antisymmetric(k),
            ("general", k) => TensorKind::General(k),
            _ => return None,
        })
    }

    /// Whether the tensor carries lower (covariant) indices.
    pub fn is_covariant(&self) -> bool {
        !matches!(self, TensorKind::Vector)
    }
}

/// One real value per grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(LatticeError::Length { got: values.len(), expected: grid.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LatticeError::NonFinite);
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_vec(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self { grid, values: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|p| f(&grid.coords(p)[..grid.dims()]))
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.values)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn into_tensor(self) -> TensorField {
        TensorField { grid: self.grid, kind: TensorKind::Scalar, data: self.values }
    }
}

/// A tensor field in the full index layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    grid: Grid,
    kind: TensorKind,
    data: Vec<f64>,
}

impl TensorField {
    /// Build a field, checking length, finiteness and the declared symmetry.
    pub fn new(grid: Grid, kind: TensorKind, data: Vec<f64>) -> Result<Self> {
        let expected = grid.len() * grid.components(kind.rank());
        if data.len() != expected {
            return Err(LatticeError::Length { got: data.len(), expected });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LatticeError::NonFinite);
        }
        let field = Self { grid, kind, data };
        if !field.symmetry_holds() {
            return Err(LatticeError::Symmetry(kind));
        }
        Ok(field)
    }

    pub(crate) fn from_vec(grid: Grid, kind: TensorKind, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len() * grid.components(kind.rank()));
        Self { grid, kind, data }
    }

    pub fn zeros(grid: Grid, kind: TensorKind) -> Self {
        let len = grid.len() * grid.components(kind.rank());
        Self { grid, kind, data: vec![0.0; len] }
    }

    /// Build from a pointwise closure writing the component array. For
    /// symmetric fields and forms only the canonical components (i ≤ j,
    /// increasing index tuples) are read; the rest follow by symmetry.
    pub fn from_fn(grid: Grid, kind: TensorKind, f: impl Fn(&[f64], &mut [f64])) -> Self {
        let ncomp = grid.components(kind.rank());
        let npts = grid.len();
        let mut data = vec![0.0; ncomp * npts];
        let mut buf = vec![0.0; ncomp];
        for p in 0..npts {
            buf.iter_mut().for_each(|v| *v = 0.0);
            f(&grid.coords(p)[..grid.dims()], &mut buf);
            for c in 0..ncomp {
                data[c * npts + p] = buf[c];
            }
        }
        let mut field = Self { grid, kind, data };
        field.fill_from_canonical();
        field
    }

    fn fill_from_canonical(&mut self) {
        let n = self.grid.dims();
        let npts = self.grid.len();
        let rank = self.rank();
        match self.kind {
            TensorKind::Symmetric2 => {
                for i in 0..n {
                    for j in 0..i {
                        self.data.copy_within((j * n + i) * npts..(j * n + i + 1) * npts, (i * n + j) * npts);
                    }
                }
            }
            TensorKind::Antisymmetric(k) if k >= 2 => {
                for c in 0..self.ncomp() {
                    let idx = component_indices(n, rank, c);
                    let sign = permutation_sign(&idx[..rank]);
                    let canon = sorted_component(n, &idx[..rank]);
                    if canon == c && sign != 0 {
                        continue;
                    }
                    for p in 0..npts {
                        self.data[c * npts + p] = sign as f64 * self.data[canon * npts + p];
                    }
                }
            }
            _ => {}
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> TensorKind {
        self.kind
    }

    pub fn rank(&self) -> usize {
        self.kind.rank()
    }

    pub fn ncomp(&self) -> usize {
        self.grid.components(self.kind.rank())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Value of the component with index tuple `idx` at point `p`.
    pub fn at(&self, idx: &[usize], p: usize) -> f64 {
        let c = component_number(self.grid.dims(), idx);
        self.data[c * self.grid.len() + p]
    }

    pub fn with_kind(mut self, kind: TensorKind) -> Result<Self> {
        if kind.rank() != self.kind.rank() {
            return Err(LatticeError::RankMismatch(kind.rank(), self.kind.rank()));
        }
        self.kind = kind;
        if !self.symmetry_holds() {
            return Err(LatticeError::Symmetry(kind));
        }
        Ok(self)
    }

    /// Exact check of the declared symmetry.
    pub fn symmetry_holds(&self) -> bool {
        let n = self.grid.dims();
        let npts = self.grid.len();
        match self.kind {
            TensorKind::Symmetric2 => (0..n).all(|i| {
                (i + 1..n).all(|j| self.component(i * n + j) == self.component(j * n + i))
            }),
            TensorKind::Antisymmetric(k) if k >= 2 => {
                let rank = k;
                (0..self.ncomp()).all(|c| {
                    let idx = component_indices(n, rank, c);
                    let sign = permutation_sign(&idx[..rank]);
                    let canon = sorted_component(n, &idx[..rank]);
                    let src = &self.data[canon * npts..(canon + 1) * npts];
                    let dst = &self.data[c * npts..(c + 1) * npts];
                    match sign {
                        0 => dst.iter().all(|&v| v == 0.0),
                        1 => dst == src,
                        _ => dst.iter().zip(src).all(|(&a, &b)| a == -b),
                    }
                })
            }
            _ => true,
        }
    }

    pub fn symmetrized(mut self) -> Self {
        let n = self.grid.dims();
        let npts = self.grid.len();
        for i in 0..n {
            for j in i + 1..n {
                for p in 0..npts {
                    let a = self.data[(i * n + j) * npts + p];
                    let b = self.data[(j * n + i) * npts + p];
                    let m = 0.5 * (a + b);
                    self.data[(i * n + j) * npts + p] = m;
                    self.data[(j * n + i) * npts + p] = m;
                }
            }
        }
        self
    }

    /// Replace each component by the alternating average over index
    /// permutations.
    pub fn antisymmetrized(self) -> Self {
        let n = self.grid.dims();
        let rank = self.rank();
        let npts = self.grid.len();
        let mut out = vec![0.0; self.data.len()];
        let perms = permutations(rank);
        let norm = 1.0 / perms.len() as f64;
        for c in 0..self.ncomp() {
            let idx = component_indices(n, rank, c);
            if permutation_sign(&idx[..rank]) == 0 {
                continue;
            }
            for (perm, sign) in &perms {
                let mut pidx = [0; MAX_DIMS];
                for s in 0..rank {
                    pidx[s] = idx[perm[s]];
                }
                let pc = component_number(n, &pidx[..rank]);
                let coef = norm * *sign as f64;
                for p in 0..npts {
                    out[c * npts + p] += coef * self.data[pc * npts + p];
                }
            }
        }
        // Exact antisymmetry: copy canonical components with signs.
        for c in 0..self.ncomp() {
            let idx = component_indices(n, rank, c);
            let sign = permutation_sign(&idx[..rank]);
            let canon = sorted_component(n, &idx[..rank]);
            if sign == 0 || canon == c {
                continue;
            }
            for p in 0..npts {
                out[c * npts + p] = sign as f64 * out[canon * npts + p];
            }
        }
        Self { grid: self.grid, kind: self.kind, data: out }
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.data)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { grid: self.grid, kind: self.kind, data: self.data.iter().map(|v| v * s).collect() }
    }

    /// `self + s * other`, keeping the kind of `self`.
    pub fn axpy(&self, s: f64, other: &TensorField) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + s * b).collect();
        Ok(Self { grid: self.grid, kind: self.kind, data })
    }

    pub fn check_same_shape(&self, other: &TensorField) -> Result<()> {
        if self.grid != other.grid {
            return Err(LatticeError::GridMismatch);
        }
        if self.rank() != other.rank() {
            return Err(LatticeError::RankMismatch(self.rank(), other.rank()));
        }
        Ok(())
    }

    /// Translate by `shift[a]` grid steps along each axis:
    /// `out(i) = self(i - shift)`.
    pub fn shifted(&self, shift: &[isize]) -> Self {
        let npts = self.grid.len();
        let mut data = vec![0.0; self.data.len()];
        for p in 0..npts {
            let idx = self.grid.multi_index(p);
            let mut src = [0; MAX_DIMS];
            for a in 0..self.grid.dims() {
                let r = self.grid.resolution(a) as isize;
                src[a] = (idx[a] as isize - shift.get(a).copied().unwrap_or(0)).rem_euclid(r) as usize;
            }
            let q = self.grid.linear_index(&src[..self.grid.dims()]);
            for c in 0..self.ncomp() {
                data[c * npts + p] = self.data[c * npts + q];
            }
        }
        Self { grid: self.grid, kind: self.kind, data }
    }
}

impl ScalarField {
    pub fn shifted(&self, shift: &[isize]) -> Self {
        let t = self.clone().into_tensor().shifted(shift);
        Self { grid: self.grid, values: t.data }
    }
}

/// Canonical (sorted) component number of an index tuple.
fn sorted_component(dims: usize, idx: &[usize]) -> usize {
    let mut s = [0; MAX_DIMS];
    s[..idx.len()].copy_from_slice(idx);
    s[..idx.len()].sort_unstable();
    component_number(dims, &s[..idx.len()])
}

fn permutations(k: usize) -> Vec<([usize; MAX_DIMS], i32)> {
    fn rec(prefix: &mut Vec<usize>, k: usize, out: &mut Vec<([usize; MAX_DIMS], i32)>) {
        if prefix.len() == k {
            let mut p = [0; MAX_DIMS];
            p[..k].copy_from_slice(prefix);
            out.push((p, permutation_sign(prefix)));
            return;
        }
        for i in 0..k {
            if !prefix.contains(&i) {
                prefix.push(i);
                rec(prefix, k, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), k, &mut out);
    out
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fourth-order centered periodic difference of one scalar array along an
/// axis, written into `dst`.
pub(crate) fn diff_axis(grid: &Grid, axis: usize, src: &[f64], dst: &mut [f64]) {
    let n = grid.resolution(axis);
    let stride = grid.stride(axis);
    let block = n * stride;
    let h = grid.spacing(axis);
    let c1 = 8.0 / (12.0 * h);
    let c2 = 1.0 / (12.0 * h);
    for base in (0..src.len()).step_by(block) {
        for i in 0..n {
            let o = base + i * stride;
            let p1 = base + ((i + 1) % n) * stride;
            let p2 = base + ((i + 2) % n) * stride;
            let m1 = base + ((i + n - 1) % n) * stride;
            let m2 = base + ((i + n - 2) % n) * stride;
            for k in 0..stride {
                dst[o + k] = c1 * (src[p1 + k] - src[m1 + k]) - c2 * (src[p2 + k] - src[m2 + k]);
            }
        }
    }
}

/// Fourier symbol of the lattice derivative: D e^{ikx} = i·s(k)·e^{ikx}.
#[cfg(test)]
pub(crate) fn derivative_symbol(h: f64, k: f64) -> f64 {
    (8.0 * (k * h).sin() - (2.0 * k * h).sin()) / (6.0 * h)
}

pub(crate) fn diff(grid: &Grid, axis: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    diff_axis(grid, axis, src, &mut out);
    out
}

/// Componentwise ∂_axis of a tensor field.
pub fn partial_derivative(field: &TensorField, axis: usize) -> Result<TensorField> {
    field.grid.check_axis(axis)?;
    let npts = field.grid.len();
    let mut data = vec![0.0; field.data.len()];
    for (src, dst) in field.data.chunks(npts).zip(data.chunks_mut(npts)) {
        diff_axis(&field.grid, axis, src, dst);
    }
    Ok(TensorField { grid: field.grid, kind: field.kind, data })
}

pub fn partial_derivative_scalar(field: &ScalarField, axis: usize) -> Result<ScalarField> {
    field.grid.check_axis(axis)?;
    Ok(ScalarField { grid: field.grid, values: diff(&field.grid, axis, &field.values) })
}

/// All first derivatives of all components: component `(a, I)` of the
/// result holds ∂_a T_I, laid out as `(a * ncomp + c) * len + p`.
pub(crate) fn gradient_data(grid: &Grid, data: &[f64]) -> Vec<f64> {
    let npts = grid.len();
    let ncomp = data.len() / npts;
    let mut out = vec![0.0; data.len() * grid.dims()];
    for a in 0..grid.dims() {
        for c in 0..ncomp {
            let o = (a * ncomp + c) * npts;
            diff_axis(grid, a, &data[c * npts..(c + 1) * npts], &mut out[o..o + npts]);
        }
    }
    out
}

/// Uniform-weight periodic quadrature.
pub fn integrate(density: &ScalarField) -> f64 {
    sum(&density.values) * density.grid.cell_volume()
}

/// Fixed-order sum.
pub(crate) fn sum(v: &[f64]) -> f64 {
    v.iter().sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Subtracts the index-n/2 Fourier content along every even axis, one
/// line at a time. An orthogonal projection; `u` is one scalar component.
pub fn remove_nyquist(grid: &Grid, u: &mut [f64]) {
    for a in 0..grid.dims() {
        let m = grid.resolution(a);
        if !m.is_multiple_of(2) {
            continue;
        }
        let stride = grid.stride(a);
        let block = m * stride;
        for base in (0..u.len()).step_by(block) {
            for k in 0..stride {
                let mut c = 0.0;
                for j in 0..m {
                    let v = u[base + j * stride + k];
                    c += if j % 2 == 0 { v } else { -v };
                }
                c /= m as f64;
                for j in 0..m {
                    u[base + j * stride + k] -= if j % 2 == 0 { c } else { -c };
                }
            }
        }
    }
}

/// Pointwise full contraction ⟨a, b⟩_g.
pub fn pointwise_inner(a: &TensorField, b: &TensorField, g: &MetricField) -> Result<Vec<f64>> {
    a.check_same_shape(b)?;
    if a.grid != *g.grid() {
        return Err(LatticeError::GridMismatch);
    }
    let raised = if b.kind.is_covariant() { g.raise_all(b) } else { g.lower_all(b) };
    let npts = a.grid.len();
    let mut out = vec![0.0; npts];
    for c in 0..a.ncomp() {
        let ac = a.component(c);
        let bc = &raised[c * npts..(c + 1) * npts];
        for p in 0..npts {
            out[p] += ac[p] * bc[p];
        }
    }
    Ok(out)
}

/// ∫ ⟨a, b⟩_g · weight · √det g dx.
pub fn weighted_inner(
    a: &TensorField,
    b: &TensorField,
    g: &MetricField,
    weight: &ScalarField,
) -> Result<f64> {
    if weight.grid != a.grid {
        return Err(LatticeError::GridMismatch);
    }
    let pw = pointwise_inner(a, b, g)?;
    let sg = g.sqrt_det();
    let total: f64 = (0..pw.len()).map(|p| pw[p] * weight.values[p] * sg[p]).sum();
    Ok(total * a.grid.cell_volume())
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"GRFSNAP1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SnapshotGrid {
    pub dims: usize,
    pub resolutions: Vec<usize>,
    pub periods: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SnapshotFieldHeader {
    pub name: String,
    pub rank: usize,
    pub symmetry: String,
    pub component_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SnapshotHeader {
    pub grid: SnapshotGrid,
    pub fields: Vec<SnapshotFieldHeader>,
}

/// Write named fields sharing one grid.
///
/// Layout: the 8 magic bytes, a little-endian u64 header length, the UTF-8
/// JSON header, then each field's values as little-endian f64, point-major
/// with the component index running fastest.
pub fn save_snapshot(path: impl AsRef<Path>, fields: &[(String, TensorField)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_snapshot(&mut out, fields)?;
    out.flush()?;
    Ok(())
}

pub fn write_snapshot(out: &mut impl Write, fields: &[(String, TensorField)]) -> Result<()> {
    let grid = match fields.first() {
        Some((_, f)) => *f.grid(),
        None => return Err(LatticeError::Header("no fields to write".into())),
    };
    if fields.iter().any(|(_, f)| *f.grid() != grid) {
        return Err(LatticeError::GridMismatch);
    }
    let header = SnapshotHeader {
        grid: SnapshotGrid {
            dims: grid.dims(),
            resolutions: grid.resolutions().to_vec(),
            periods: grid.periods().to_vec(),
        },
        fields: fields
            .iter()
            .map(|(name, f)| SnapshotFieldHeader {
                name: name.clone(),
                rank: f.rank(),
                symmetry: f.kind().tag().to_string(),
                component_count: f.ncomp(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| LatticeError::Header(e.to_string()))?;
    out.write_all(SNAPSHOT_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let npts = grid.len();
    for (_, f) in fields {
        let ncomp = f.ncomp();
        let mut buf = Vec::with_capacity(npts * ncomp * 8);
        for p in 0..npts {
            for c in 0..ncomp {
                buf.extend_from_slice(&f.data[c * npts + p].to_le_bytes());
            }
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Vec<(String, TensorField)>> {
    read_snapshot(&mut BufReader::new(File::open(path)?))
}

/// Read only the header of a snapshot.
pub fn read_snapshot_header(input: &mut impl Read) -> Result<SnapshotHeader> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| LatticeError::BadMagic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(LatticeError::BadMagic);
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 26 {
        return Err(LatticeError::Header(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    serde_json::from_slice(&json).map_err(|e| LatticeError::Header(e.to_string()))
}

pub fn read_snapshot(input: &mut impl Read) -> Result<Vec<(String, TensorField)>> {
    let header = read_snapshot_header(input)?;
    let g = &header.grid;
    if g.resolutions.len() != g.dims || g.periods.len() != g.dims {
        return Err(LatticeError::Header("grid arrays disagree with dims".into()));
    }
    let grid = Grid::new(&g.resolutions, &g.periods)?;
    let npts = grid.len();
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let expected: usize = header.fields.iter().map(|f| f.component_count * npts * 8).sum();
    if payload.len() != expected {
        return Err(LatticeError::PayloadMismatch(format!(
            "header declares {expected} bytes, file holds {}",
            payload.len()
        )));
    }
    let mut offset = 0;
    let mut fields = Vec::with_capacity(header.fields.len());
    for fh in &header.fields {
        let kind = TensorKind::from_tag(&fh.symmetry, fh.rank)
            .ok_or_else(|| LatticeError::Header(format!("unknown symmetry {:?}", fh.symmetry)))?;
        if grid.components(fh.rank) != fh.component_count {
            return Err(LatticeError::PayloadMismatch(format!(
                "field {} declares {} components for rank {}",
                fh.name, fh.component_count, fh.rank
            )));
        }
        let ncomp = fh.component_count;
        let mut data = vec![0.0; ncomp * npts];
        for p in 0..npts {
            for c in 0..ncomp {
                let bytes: [u8; 8] = payload[offset..offset + 8].try_into().expect("8 bytes");
                data[c * npts + p] = f64::from_le_bytes(bytes);
                offset += 8;
            }
        }
        fields.push((fh.name.clone(), TensorField::new(grid, kind, data)?));
    }
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sin_field(grid: Grid) -> ScalarField {
        ScalarField::from_fn(grid, |x| x[0].sin())
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(matches!(Grid::cubic(1, 16), Err(LatticeError::Dimension(1))));
        assert!(matches!(Grid::cubic(5, 16), Err(LatticeError::Dimension(5))));
        assert!(matches!(Grid::cubic(3, 6), Err(LatticeError::Resolution { .. })));
        assert!(matches!(Grid::cubic(3, 9), Err(LatticeError::Resolution { .. })));
        assert!(Grid::new(&[8, 8], &[1.0, -1.0]).is_err());
        let g = Grid::new(&[8, 10, 12], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.len(), 960);
        assert_eq!(g.multi_index(g.linear_index(&[3, 7, 11])), [3, 7, 11, 0]);
        assert!((g.coords(g.linear_index(&[1, 2, 3]))[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let grid = Grid::cubic(3, 16).unwrap();
        let d = partial_derivative_scalar(&ScalarField::constant(grid, 1.0), 0).unwrap();
        assert_eq!(d.max_abs(), 0.0);
        assert!(partial_derivative_scalar(&ScalarField::constant(grid, 1.0), 3).is_err());
    }

    #[test]
    fn derivative_of_sine_is_fourth_order() {
        let err = |n| {
            let grid = Grid::cubic(3, n).unwrap();
            let d = partial_derivative_scalar(&sin_field(grid), 0).unwrap();
            let exact = ScalarField::from_fn(grid, |x| x[0].cos());
            d.values().iter().zip(exact.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (e16, e32) = (err(16), err(32));
        assert!(e32 < 1e-4, "{e32}");
        let ratio = e16 / e32;
        assert!((ratio - 16.0).abs() < 0.2 * 16.0, "ratio {ratio}");
    }

    #[test]
    fn quadrature_values() {
        let grid = Grid::cubic(3, 16).unwrap();
        let vol = TAU.powi(3);
        assert!((integrate(&ScalarField::constant(grid, 1.0)) - vol).abs() < 1e-10);
        let s2 = ScalarField::from_fn(grid, |x| x[0].sin().powi(2));
        assert!((integrate(&s2) - vol / 2.0).abs() < 1e-10);
        let coarse = integrate(&ScalarField::from_fn(grid, |x| x[0].sin().exp()));
        let fine = integrate(&ScalarField::from_fn(Grid::cubic(3, 48).unwrap(), |x| x[0].sin().exp()));
        assert!(((coarse - fine) / fine).abs() < 1e-10);
    }

    #[test]
    fn integral_of_derivative_vanishes() {
        let grid = Grid::new(&[8, 10, 12], &[1.0, 2.0, 3.0]).unwrap();
        let f = ScalarField::from_fn(grid, |x| (x[0] * 3.0 + x[1]).sin() * x[2].cos().exp());
        for a in 0..3 {
            let d = partial_derivative_scalar(&f, a).unwrap();
            assert!(integrate(&d).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_two_form_inner_product() {
        let grid = Grid::cubic(3, 8).unwrap();
        let g = MetricField::flat(grid);
        let a = TensorField::from_fn(grid, TensorKind::Antisymmetric(2), |_, c| {
            c[1] = 1.0;
            c[3] = -1.0;
        });
        let one = ScalarField::constant(grid, 1.0);
        let v = weighted_inner(&a, &a, &g, &one).unwrap();
        assert!((v - 2.0 * TAU.powi(3)).abs() < 1e-10);
        let zero = TensorField::zeros(grid, TensorKind::Symmetric2);
        assert_eq!(weighted_inner(&zero, &zero, &g, &one).unwrap(), 0.0);
        assert!(weighted_inner(&a, &ScalarField::constant(grid, 1.0).into_tensor(), &g, &one).is_err());
    }

    #[test]
    fn antisymmetrize_is_exact() {
        let grid = Grid::cubic(3, 8).unwrap();
        let h = TensorField::from_fn(grid, TensorKind::Antisymmetric(3), |x, c| {
            c[5] = x[0].sin() + 0.3;
            c[7] = x[1].cos();
        });
        assert!(h.symmetry_holds());
        assert!(TensorField::new(grid, TensorKind::Antisymmetric(3), h.data().to_vec()).is_ok());
        let mut bad = h.data().to_vec();
        bad[5 * grid.len()] += 1.0;
        assert!(TensorField::new(grid, TensorKind::Antisymmetric(3), bad).is_err());
    }

    fn random_field(grid: Grid, seed: u64, ncomp: usize) -> Vec<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..grid.len() * ncomp)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn derivative_is_skew_adjoint(seed in 0u64..1000, axis in 0usize..3) {
            let grid = Grid::new(&[8, 10, 12], &[TAU, 1.5, 2.0]).unwrap();
            let u = random_field(grid, seed, 1);
            let v = random_field(grid, seed + 7, 1);
            let du = diff(&grid, axis, &u);
            let dv = diff(&grid, axis, &v);
            let lhs = dot(&du, &v);
            let rhs = -dot(&u, &dv);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }

        #[test]
        fn derivative_commutes_with_shift(seed in 0u64..1000, axis in 0usize..3, s0 in -3isize..3, s1 in -3isize..3) {
            let grid = Grid::cubic(3, 8).unwrap();
            let f = TensorField::new(grid, TensorKind::General(1), random_field(grid, seed, 3)).unwrap();
            let a = partial_derivative(&f.shifted(&[s0, s1, 1]), axis).unwrap();
            let b = partial_derivative(&f, axis).unwrap().shifted(&[s0, s1, 1]);
            prop_assert_eq!(a.data(), b.data());
            let s = ScalarField::new(grid, random_field(grid, seed, 1)).unwrap();
            let shifted = s.shifted(&[s0, s1, 0]);
            prop_assert!((integrate(&s) - integrate(&shifted)).abs() < 1e-12);
        }

        #[test]
        fn snapshot_round_trip_is_bit_exact(seed in 0u64..1000) {
            let grid = Grid::new(&[8, 8, 10], &[1.0, 2.0, 3.0]).unwrap();
            let raw = TensorField::new(grid, TensorKind::General(2), random_field(grid, seed, 9)).unwrap();
            let sym = raw.clone().symmetrized().with_kind(TensorKind::Symmetric2).unwrap();
            let s = ScalarField::new(grid, random_field(grid, seed + 1, 1)).unwrap().into_tensor();
            let fields = vec![("g".to_string(), sym), ("f".to_string(), s)];
            let mut buf = Vec::new();
            write_snapshot(&mut buf, &fields).unwrap();
            let back = read_snapshot(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 2);
            for ((n0, f0), (n1, f1)) in fields.iter().zip(&back) {
                prop_assert_eq!(n0, n1);
                prop_assert_eq!(f0.kind(), f1.kind());
                let same = f0.data().iter().zip(f1.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same);
            }
        }
    }

    #[test]
    fn snapshot_negative_cases() {
        let grid = Grid::cubic(2, 8).unwrap();
        let fields = vec![("u".to_string(), sin_field(grid).into_tensor())];
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &fields).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        let err = read_snapshot(&mut bad.as_slice()).unwrap_err();
        assert_eq!(err.to_string(), "bad magic");

        let mut short = buf.clone();
        short.truncate(buf.len() - 8);
        let err = read_snapshot(&mut short.as_slice()).unwrap_err();
        assert!(err.to_string().starts_with("payload mismatch"), "{err}");

        // header declares a vector field but only scalar data follows
        let header = read_snapshot_header(&mut buf.as_slice()).unwrap();
        let mut h2 = header.clone();
        h2.fields[0].rank = 1;
        h2.fields[0].symmetry = "covector".into();
        h2.fields[0].component_count = 2;
        let json = serde_json::to_vec(&h2).unwrap();
        let payload_start = 16 + serde_json::to_vec(&header).unwrap().len();
        let mut forged = Vec::new();
        forged.extend_from_slice(SNAPSHOT_MAGIC);
        forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&buf[payload_start..]);
        let err = read_snapshot(&mut forged.as_slice()).unwrap_err();
        assert!(err.to_string().starts_with("payload mismatch"), "{err}");
    }
}
