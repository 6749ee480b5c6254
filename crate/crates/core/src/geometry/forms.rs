//! Exterior calculus on lattice forms.
//!
//! A k-form is a fully antisymmetric rank-k tensor in the full index layout.
//! `d` acts by (dω)_{i₀…i_k} = Σ_r (−1)^r ∂_{i_r} ω_{i₀…î_r…i_k}. The
//! codifferential is (d*β)^J = −(1/√g) ∂_i(√g β^{iJ}); with the fully
//! contracted inner product this satisfies ⟨dα, β⟩ = (k+1)⟨α, d*β⟩ exactly
//! on the lattice for a k-form α, and Δ = −(dd* + d*d) is the usual
//! nonpositive Hodge Laplacian (componentwise Laplacian on a flat metric).

use super::{GeometryError, MetricField, Result};
use crate::lattice::{
    component_indices, component_number, diff_axis, permutation_sign, Grid, ScalarField, TensorField,
    TensorKind, MAX_DIMS,
};

/// Degree of a field read as a differential form.
pub fn form_degree(kind: TensorKind) -> Option<usize> {
    match kind {
        TensorKind::Scalar => Some(0),
        TensorKind::Covector => Some(1),
        TensorKind::Antisymmetric(k) => Some(k),
        _ => None,
    }
}

pub fn form_kind(degree: usize) -> TensorKind {
    match degree {
        0 => TensorKind::Scalar,
        1 => TensorKind::Covector,
        k => TensorKind::Antisymmetric(k),
    }
}

fn degree_of(omega: &TensorField) -> Result<usize> {
    let k = form_degree(omega.kind()).ok_or(GeometryError::NotAForm(omega.kind()))?;
    let n = omega.grid().dims();
    if k > n {
        return Err(GeometryError::Degree { degree: k, dims: n });
    }
    Ok(k)
}

/// Strictly increasing index tuples of length k.
fn increasing(n: usize, k: usize) -> Vec<[usize; MAX_DIMS]> {
    let mut out = Vec::new();
    let mut cur = [0usize; MAX_DIMS];
    fn rec(n: usize, k: usize, start: usize, depth: usize, cur: &mut [usize; MAX_DIMS], out: &mut Vec<[usize; MAX_DIMS]>) {
        if depth == k {
            out.push(*cur);
            return;
        }
        for i in start..n {
            cur[depth] = i;
            rec(n, k, i + 1, depth + 1, cur, out);
        }
    }
    rec(n, k, 0, 0, &mut cur, &mut out);
    out
}

/// Fill every component of a form from its increasing-index components.
fn fill_antisymmetric(grid: &Grid, k: usize, data: &mut [f64]) {
    let n = grid.dims();
    let npts = grid.len();
    for c in 0..n.pow(k as u32) {
        let idx = component_indices(n, k, c);
        let sign = permutation_sign(&idx[..k]);
        let mut sorted = idx;
        sorted[..k].sort_unstable();
        let canon = component_number(n, &sorted[..k]);
        if canon == c {
            continue;
        }
        match sign {
            0 => data[c * npts..(c + 1) * npts].iter_mut().for_each(|v| *v = 0.0),
            s => {
                for p in 0..npts {
                    data[c * npts + p] = s as f64 * data[canon * npts + p];
                }
            }
        }
    }
}

pub fn exterior_derivative(omega: &TensorField) -> Result<TensorField> {
    let k = degree_of(omega)?;
    let grid = *omega.grid();
    let n = grid.dims();
    if k == n {
        return Err(GeometryError::Degree { degree: k + 1, dims: n });
    }
    let npts = grid.len();
    let mut out = vec![0.0; n.pow(k as u32 + 1) * npts];
    let mut buf = vec![0.0; npts];
    for idx in increasing(n, k + 1) {
        let o = component_number(n, &idx[..k + 1]) * npts;
        for r in 0..=k {
            let mut rest = [0; MAX_DIMS];
            let mut q = 0;
            for (s, &i) in idx[..k + 1].iter().enumerate() {
                if s != r {
                    rest[q] = i;
                    q += 1;
                }
            }
            let c = component_number(n, &rest[..k]);
            diff_axis(&grid, idx[r], &omega.data()[c * npts..(c + 1) * npts], &mut buf);
            let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
            for p in 0..npts {
                out[o + p] += sign * buf[p];
            }
        }
    }
    fill_antisymmetric(&grid, k + 1, &mut out);
    Ok(TensorField::from_vec(grid, form_kind(k + 1), out))
}

pub fn codifferential(g: &MetricField, beta: &TensorField) -> Result<TensorField> {
    let k = degree_of(beta)?;
    let grid = *beta.grid();
    if *g.grid() != grid {
        return Err(GeometryError::Lattice(crate::lattice::LatticeError::GridMismatch));
    }
    let n = grid.dims();
    if k == 0 {
        return Err(GeometryError::Degree { degree: 0, dims: n });
    }
    let npts = grid.len();
    let sg = g.sqrt_det();
    let mut up = g.raise_all(beta);
    for c in 0..n.pow(k as u32) {
        for p in 0..npts {
            up[c * npts + p] *= sg[p];
        }
    }
    let mut contra = vec![0.0; n.pow(k as u32 - 1) * npts];
    let mut buf = vec![0.0; npts];
    for idx in increasing(n, k - 1) {
        let o = component_number(n, &idx[..k - 1]) * npts;
        for i in 0..n {
            let mut full = [0; MAX_DIMS];
            full[0] = i;
            full[1..k].copy_from_slice(&idx[..k - 1]);
            if permutation_sign(&full[..k]) == 0 {
                continue;
            }
            let c = component_number(n, &full[..k]);
            diff_axis(&grid, i, &up[c * npts..(c + 1) * npts], &mut buf);
            for p in 0..npts {
                contra[o + p] -= buf[p];
            }
        }
        for p in 0..npts {
            contra[o + p] /= sg[p];
        }
    }
    if k > 2 {
        fill_antisymmetric(&grid, k - 1, &mut contra);
    }
    let kind = form_kind(k - 1);
    let raised = TensorField::from_vec(grid, if k == 1 { TensorKind::Scalar } else { TensorKind::General(k - 1) }, contra);
    if k == 1 {
        return Ok(raised.with_kind(kind)?);
    }
    let mut lowered = g.lower_all(&raised);
    // Lowering mixes the canonical components; restore exact antisymmetry.
    if k > 2 {
        fill_antisymmetric(&grid, k - 1, &mut lowered);
    }
    Ok(TensorField::from_vec(grid, kind, lowered))
}

pub fn hodge_laplacian(g: &MetricField, omega: &TensorField) -> Result<TensorField> {
    let k = degree_of(omega)?;
    let n = omega.grid().dims();
    let mut out = TensorField::zeros(*omega.grid(), omega.kind());
    if k > 0 {
        let dd = exterior_derivative(&codifferential(g, omega)?)?;
        out = out.axpy(-1.0, &dd)?;
    }
    if k < n {
        let dd = codifferential(g, &exterior_derivative(omega)?)?;
        out = out.axpy(-1.0, &dd)?;
    }
    Ok(out)
}

/// Laplace–Beltrami operator (1/√g) ∂_b(√g g^{ab} ∂_a u).
pub fn laplace_beltrami(g: &MetricField, u: &ScalarField) -> Result<ScalarField> {
    let v = hodge_laplacian(g, &u.clone().into_tensor())?;
    Ok(ScalarField::from_vec(*u.grid(), v.into_data()))
}

/// (X⌟ω)_J = X^i ω_{iJ}.
pub fn interior(x: &TensorField, omega: &TensorField) -> Result<TensorField> {
    let k = degree_of(omega)?;
    if x.kind() != TensorKind::Vector {
        return Err(GeometryError::Lattice(crate::lattice::LatticeError::RankMismatch(1, x.rank())));
    }
    if k == 0 {
        return Err(GeometryError::Degree { degree: 0, dims: omega.grid().dims() });
    }
    let grid = *omega.grid();
    let n = grid.dims();
    let npts = grid.len();
    let m = n.pow(k as u32 - 1);
    let mut out = vec![0.0; m * npts];
    for c in 0..m {
        for i in 0..n {
            let src = (i * m + c) * npts;
            let xi = x.component(i);
            for p in 0..npts {
                out[c * npts + p] += xi[p] * omega.data()[src + p];
            }
        }
    }
    Ok(TensorField::from_vec(grid, form_kind(k - 1), out))
}

/// (H²)_{ij} = H_{iA} H_j^{A}, summing over all index tuples A.
pub fn h_squared(g: &MetricField, h: &TensorField) -> Result<TensorField> {
    let k = degree_of(h)?;
    let grid = *h.grid();
    let n = grid.dims();
    let npts = grid.len();
    if k == 0 {
        return Err(GeometryError::Degree { degree: 0, dims: n });
    }
    let mut raised = h.data().to_vec();
    for slot in 1..k {
        raised = super::apply_slot(&grid, k, &raised, slot, g.inverse());
    }
    let m = n.pow(k as u32 - 1);
    let mut out = vec![0.0; n * n * npts];
    for i in 0..n {
        for j in i..n {
            let o = (i * n + j) * npts;
            for a in 0..m {
                let (hi, hj) = ((i * m + a) * npts, (j * m + a) * npts);
                for p in 0..npts {
                    out[o + p] += h.data()[hi + p] * raised[hj + p];
                }
            }
            if i != j {
                out.copy_within(o..o + npts, (j * n + i) * npts);
            }
        }
    }
    Ok(TensorField::from_vec(grid, TensorKind::Symmetric2, out))
}

/// |H|² = H_{I} H^{I}, full contraction.
pub fn form_norm_sq(g: &MetricField, h: &TensorField) -> Result<ScalarField> {
    degree_of(h)?;
    let raised = g.raise_all(h);
    let npts = h.grid().len();
    let mut out = vec![0.0; npts];
    for (c, hc) in h.data().chunks(npts).enumerate() {
        for p in 0..npts {
            out[p] += hc[p] * raised[c * npts + p];
        }
    }
    Ok(ScalarField::from_vec(*h.grid(), out))
}
