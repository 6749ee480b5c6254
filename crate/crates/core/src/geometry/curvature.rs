//! Levi-Civita connection, curvature and the second-order operators built
//! from it.
//!
//! Everything is assembled from the fourth-order lattice derivative:
//! Christoffel symbols from ∂g, Ricci by differentiating Γ. The contracted
//! term ∂_iΓ^k_{kj} is taken as ∂_i∂_j log √det g, which is equal in the
//! continuum and keeps the discrete Ricci tensor exactly symmetric.

use super::{GeometryError, MetricField, Result};
use crate::lattice::{diff, diff_axis, gradient_data, Grid, ScalarField, TensorField, TensorKind};

/// Γ^k_{ij}, stored as `data[((k*n + i)*n + j)*len + p]`.
#[derive(Clone, Debug)]
pub struct ChristoffelField {
    grid: Grid,
    data: Vec<f64>,
}

impl ChristoffelField {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> &[f64] {
        let n = self.grid.dims();
        let npts = self.grid.len();
        let c = (k * n + i) * n + j;
        &self.data[c * npts..(c + 1) * npts]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        crate::lattice::max_abs(&self.data)
    }
}

pub fn christoffel(g: &MetricField) -> ChristoffelField {
    let dg = gradient_data(g.grid(), g.components());
    ChristoffelField { grid: *g.grid(), data: christoffel_from(g, &dg) }
}

fn christoffel_from(g: &MetricField, dg: &[f64]) -> Vec<f64> {
    let n = g.dims();
    let npts = g.grid().len();
    let ginv = g.inverse();
    let d = |a: usize, i: usize, j: usize| &dg[((a * n + i) * n + j) * npts..((a * n + i) * n + j + 1) * npts];
    let mut out = vec![0.0; n * n * n * npts];
    let mut s = vec![0.0; npts];
    for i in 0..n {
        for j in i..n {
            for l in 0..n {
                let (a, b, c) = (d(i, j, l), d(j, i, l), d(l, i, j));
                for p in 0..npts {
                    s[p] = 0.5 * (a[p] + b[p] - c[p]);
                }
                for k in 0..n {
                    let gk = &ginv[(k * n + l) * npts..(k * n + l + 1) * npts];
                    let o = ((k * n + i) * n + j) * npts;
                    for p in 0..npts {
                        out[o + p] += gk[p] * s[p];
                    }
                }
            }
            if i != j {
                for k in 0..n {
                    let src = ((k * n + i) * n + j) * npts;
                    let dst = ((k * n + j) * n + i) * npts;
                    out.copy_within(src..src + npts, dst);
                }
            }
        }
    }
    out
}

/// Forward curvature intermediates, kept for the reverse-mode pass used by
/// the exact discrete gradient of the eigenvalue.
pub(crate) struct Curvature<'a> {
    pub g: &'a MetricField,
    pub dg: Vec<f64>,
    pub gamma: Vec<f64>,
    /// τ_j = ∂_j log √det g.
    pub tau: Vec<f64>,
    pub ric: Vec<f64>,
    pub scalar: Vec<f64>,
}

impl<'a> Curvature<'a> {
    pub fn new(g: &'a MetricField) -> Self {
        let grid = *g.grid();
        let n = grid.dims();
        let npts = grid.len();
        let dg = gradient_data(&grid, g.components());
        let gamma = christoffel_from(g, &dg);
        let lnsg: Vec<f64> = g.sqrt_det().iter().map(|v| v.ln()).collect();
        let tau = gradient_data(&grid, &lnsg);
        let gm = |k: usize, i: usize, j: usize| ((k * n + i) * n + j) * npts;
        let mut ric = vec![0.0; n * n * npts];
        let mut buf = vec![0.0; npts];
        for i in 0..n {
            for j in i..n {
                let o = (i * n + j) * npts;
                for k in 0..n {
                    diff_axis(&grid, k, &gamma[gm(k, i, j)..gm(k, i, j) + npts], &mut buf);
                    for p in 0..npts {
                        ric[o + p] += buf[p];
                    }
                }
                diff_axis(&grid, i, &tau[j * npts..(j + 1) * npts], &mut buf);
                for p in 0..npts {
                    ric[o + p] -= buf[p];
                }
                for l in 0..n {
                    let t = &tau[l * npts..(l + 1) * npts];
                    let gl = gm(l, i, j);
                    for p in 0..npts {
                        ric[o + p] += t[p] * gamma[gl + p];
                    }
                    for k in 0..n {
                        let (a, b) = (gm(k, i, l), gm(l, k, j));
                        for p in 0..npts {
                            ric[o + p] -= gamma[a + p] * gamma[b + p];
                        }
                    }
                }
                if i != j {
                    ric.copy_within(o..o + npts, (j * n + i) * npts);
                }
            }
        }
        let ginv = g.inverse();
        let mut scalar = vec![0.0; npts];
        for c in 0..n * n {
            for p in 0..npts {
                scalar[p] += ginv[c * npts + p] * ric[c * npts + p];
            }
        }
        Self { g, dg, gamma, tau, ric, scalar }
    }

    pub fn ricci_tensor(&self) -> TensorField {
        TensorField::from_vec(*self.g.grid(), TensorKind::Symmetric2, self.ric.clone())
    }

    /// Reverse-mode derivative of `Σ_p rbar_p R_p + Σ ginv_bar·g⁻¹ + Σ lnsg_bar·log√det g`
    /// with respect to the metric components, each of the n² component arrays
    /// treated as independent. Callers symmetrize.
    pub fn metric_vjp(&self, rbar: &[f64], mut ginv_bar: Vec<f64>, mut lnsg_bar: Vec<f64>) -> Vec<f64> {
        let grid = *self.g.grid();
        let n = grid.dims();
        let npts = grid.len();
        let ginv = self.g.inverse();
        let gm = |k: usize, i: usize, j: usize| ((k * n + i) * n + j) * npts;
        let mm = |i: usize, j: usize| (i * n + j) * npts;

        // R = G^{ij} Ric_ij
        let mut ric_bar = vec![0.0; n * n * npts];
        for c in 0..n * n {
            for p in 0..npts {
                ginv_bar[c * npts + p] += rbar[p] * self.ric[c * npts + p];
                ric_bar[c * npts + p] = rbar[p] * ginv[c * npts + p];
            }
        }

        // Ric_ij = Σ_k ∂_kΓ^k_ij − ∂_iτ_j + τ_lΓ^l_ij − Γ^k_il Γ^l_kj
        let mut gamma_bar = vec![0.0; n * n * n * npts];
        let mut tau_bar = vec![0.0; n * npts];
        let mut buf = vec![0.0; npts];
        for i in 0..n {
            for j in 0..n {
                let rb = &ric_bar[mm(i, j)..mm(i, j) + npts];
                for k in 0..n {
                    diff_axis(&grid, k, rb, &mut buf);
                    let o = gm(k, i, j);
                    let t = &self.tau[k * npts..(k + 1) * npts];
                    for p in 0..npts {
                        gamma_bar[o + p] += -buf[p] + rb[p] * t[p];
                        tau_bar[k * npts + p] += rb[p] * self.gamma[o + p];
                    }
                }
                diff_axis(&grid, i, rb, &mut buf);
                for p in 0..npts {
                    tau_bar[j * npts + p] += buf[p];
                }
            }
        }
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let o = gm(a, b, c);
                    for m in 0..n {
                        let (rb1, g1) = (mm(b, m), gm(c, a, m));
                        let (rb2, g2) = (mm(m, c), gm(b, m, a));
                        for p in 0..npts {
                            gamma_bar[o + p] -= ric_bar[rb1 + p] * self.gamma[g1 + p]
                                + ric_bar[rb2 + p] * self.gamma[g2 + p];
                        }
                    }
                }
            }
        }

        // τ_j = ∂_j log√det g
        for j in 0..n {
            diff_axis(&grid, j, &tau_bar[j * npts..(j + 1) * npts], &mut buf);
            for p in 0..npts {
                lnsg_bar[p] -= buf[p];
            }
        }

        // Γ^k_ij = ½ G^{kl} S_lij, S_lij = ∂_i g_jl + ∂_j g_il − ∂_l g_ij
        let mut dg_bar = vec![0.0; n * n * n * npts];
        let mut sbar = vec![0.0; npts];
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    let (a, b, c) = (gm(i, j, l), gm(j, i, l), gm(l, i, j));
                    sbar.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..n {
                        let gb = gm(k, i, j);
                        let gkl = mm(k, l);
                        for p in 0..npts {
                            let s = self.dg[a + p] + self.dg[b + p] - self.dg[c + p];
                            ginv_bar[gkl + p] += 0.5 * gamma_bar[gb + p] * s;
                            sbar[p] += 0.5 * ginv[gkl + p] * gamma_bar[gb + p];
                        }
                    }
                    for p in 0..npts {
                        dg_bar[a + p] += sbar[p];
                        dg_bar[b + p] += sbar[p];
                        dg_bar[c + p] -= sbar[p];
                    }
                }
            }
        }

        let mut gbar = vec![0.0; n * n * npts];
        for a in 0..n {
            for c in 0..n * n {
                let o = (a * n * n + c) * npts;
                diff_axis(&grid, a, &dg_bar[o..o + npts], &mut buf);
                for p in 0..npts {
                    gbar[c * npts + p] -= buf[p];
                }
            }
        }

        // δ log√det g = ½ G^{ab} δg_ab, δG = −G δg G
        let mut m = [0.0; 16];
        let mut gi = [0.0; 16];
        for p in 0..npts {
            super::gather(&ginv_bar, n, npts, p, &mut m);
            super::gather(ginv, n, npts, p, &mut gi);
            for a in 0..n {
                for b in 0..n {
                    let mut s = 0.5 * lnsg_bar[p] * gi[a * n + b];
                    for i in 0..n {
                        for j in 0..n {
                            s -= gi[a * n + i] * m[i * n + j] * gi[j * n + b];
                        }
                    }
                    gbar[(a * n + b) * npts + p] += s;
                }
            }
        }
        gbar
    }
}

pub fn ricci(g: &MetricField) -> TensorField {
    Curvature::new(g).ricci_tensor()
}

pub fn scalar_curvature(g: &MetricField) -> ScalarField {
    ScalarField::from_vec(*g.grid(), Curvature::new(g).scalar)
}

/// Ricci tensor and scalar curvature from one pass.
pub fn ricci_and_scalar(g: &MetricField) -> (TensorField, ScalarField) {
    let c = Curvature::new(g);
    (c.ricci_tensor(), ScalarField::from_vec(*g.grid(), c.scalar))
}

fn check_grid(g: &MetricField, grid: &Grid) -> Result<()> {
    if g.grid() != grid {
        return Err(GeometryError::Lattice(crate::lattice::LatticeError::GridMismatch));
    }
    Ok(())
}

pub fn hessian(g: &MetricField, f: &ScalarField) -> Result<TensorField> {
    check_grid(g, f.grid())?;
    let gamma = christoffel(g);
    Ok(hessian_with(g, &gamma, f.values()))
}

pub(crate) fn hessian_with(g: &MetricField, gamma: &ChristoffelField, f: &[f64]) -> TensorField {
    let grid = *g.grid();
    let n = grid.dims();
    let npts = grid.len();
    let df: Vec<Vec<f64>> = (0..n).map(|a| diff(&grid, a, f)).collect();
    let mut out = vec![0.0; n * n * npts];
    let mut buf = vec![0.0; npts];
    for i in 0..n {
        for j in i..n {
            let o = (i * n + j) * npts;
            diff_axis(&grid, i, &df[j], &mut buf);
            out[o..o + npts].copy_from_slice(&buf);
            for k in 0..n {
                let gk = gamma.get(k, i, j);
                for p in 0..npts {
                    out[o + p] -= gk[p] * df[k][p];
                }
            }
            if i != j {
                out.copy_within(o..o + npts, (j * n + i) * npts);
            }
        }
    }
    TensorField::from_vec(grid, TensorKind::Symmetric2, out)
}

/// (div h)_j = g^{ik} ∇_i h_{kj}.
pub fn divergence(g: &MetricField, h: &TensorField) -> Result<TensorField> {
    check_grid(g, h.grid())?;
    if h.rank() != 2 {
        return Err(GeometryError::NotSymmetric(h.kind()));
    }
    let gamma = christoffel(g);
    let grid = *g.grid();
    let n = grid.dims();
    let npts = grid.len();
    let dh = gradient_data(&grid, h.data());
    let hc = |i: usize, j: usize| &h.data()[(i * n + j) * npts..(i * n + j + 1) * npts];
    let ginv = g.inverse();
    let mut out = vec![0.0; n * npts];
    let mut t = vec![0.0; npts];
    for j in 0..n {
        for i in 0..n {
            for k in 0..n {
                let o = ((i * n + k) * n + j) * npts;
                t.copy_from_slice(&dh[o..o + npts]);
                for l in 0..n {
                    let (g1, h1) = (gamma.get(l, i, k), hc(l, j));
                    let (g2, h2) = (gamma.get(l, i, j), hc(k, l));
                    for p in 0..npts {
                        t[p] -= g1[p] * h1[p] + g2[p] * h2[p];
                    }
                }
                let gik = &ginv[(i * n + k) * npts..(i * n + k + 1) * npts];
                for p in 0..npts {
                    out[j * npts + p] += gik[p] * t[p];
                }
            }
        }
    }
    Ok(TensorField::from_vec(grid, TensorKind::Covector, out))
}

/// ℒ_X g in coordinates: X^k ∂_k g_ij + g_kj ∂_i X^k + g_ik ∂_j X^k.
pub fn lie_derivative_metric(g: &MetricField, x: &TensorField) -> Result<TensorField> {
    check_grid(g, x.grid())?;
    if x.rank() != 1 {
        return Err(GeometryError::Lattice(crate::lattice::LatticeError::RankMismatch(1, x.rank())));
    }
    let grid = *g.grid();
    let n = grid.dims();
    let npts = grid.len();
    let dg = gradient_data(&grid, g.components());
    let dx = gradient_data(&grid, x.data());
    let gc = g.components();
    let xv = x.data();
    let mut out = vec![0.0; n * n * npts];
    for i in 0..n {
        for j in i..n {
            let o = (i * n + j) * npts;
            for k in 0..n {
                let dgk = &dg[((k * n + i) * n + j) * npts..];
                let dix = &dx[(i * n + k) * npts..];
                let djx = &dx[(j * n + k) * npts..];
                let gkj = &gc[(k * n + j) * npts..];
                let gik = &gc[(i * n + k) * npts..];
                let xk = &xv[k * npts..];
                for p in 0..npts {
                    out[o + p] += xk[p] * dgk[p] + gkj[p] * dix[p] + gik[p] * djx[p];
                }
            }
            if i != j {
                out.copy_within(o..o + npts, (j * n + i) * npts);
            }
        }
    }
    Ok(TensorField::from_vec(grid, TensorKind::Symmetric2, out))
}

/// X^k = g^{ij}(Γ(g)^k_ij − Γ(ḡ)^k_ij).
pub fn deturck_vector(g: &MetricField, background: &MetricField) -> Result<TensorField> {
    check_grid(g, background.grid())?;
    let a = christoffel(g);
    let b = christoffel(background);
    Ok(deturck_with(g, &a, &b))
}

pub(crate) fn deturck_with(g: &MetricField, a: &ChristoffelField, b: &ChristoffelField) -> TensorField {
    let grid = *g.grid();
    let n = grid.dims();
    let npts = grid.len();
    let ginv = g.inverse();
    let mut out = vec![0.0; n * npts];
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let (ga, gb) = (a.get(k, i, j), b.get(k, i, j));
                let gij = &ginv[(i * n + j) * npts..];
                for p in 0..npts {
                    out[k * npts + p] += gij[p] * (ga[p] - gb[p]);
                }
            }
        }
    }
    TensorField::from_vec(grid, TensorKind::Vector, out)
}

/// R^l_{ijk} = ∂_iΓ^l_jk − ∂_jΓ^l_ik + Γ^l_im Γ^m_jk − Γ^l_jm Γ^m_ik,
/// stored as `((l*n + i)*n + j)*n + k`.
fn riemann(grid: &Grid, gamma: &ChristoffelField) -> Vec<f64> {
    let n = grid.dims();
    let npts = grid.len();
    let dgam = gradient_data(grid, gamma.data());
    let dg = |a: usize, l: usize, j: usize, k: usize| {
        let c = a * n * n * n + (l * n + j) * n + k;
        &dgam[c * npts..(c + 1) * npts]
    };
    let mut out = vec![0.0; n.pow(4) * npts];
    for l in 0..n {
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let o = (((l * n + i) * n + j) * n + k) * npts;
                    let (a, b) = (dg(i, l, j, k), dg(j, l, i, k));
                    for p in 0..npts {
                        out[o + p] = a[p] - b[p];
                    }
                    for m in 0..n {
                        let (g1, g2) = (gamma.get(l, i, m), gamma.get(m, j, k));
                        let (g3, g4) = (gamma.get(l, j, m), gamma.get(m, i, k));
                        for p in 0..npts {
                            out[o + p] += g1[p] * g2[p] - g3[p] * g4[p];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Rough Laplacian g^{kl}∇_k∇_l h of a symmetric 2-tensor.
pub fn connection_laplacian(g: &MetricField, h: &TensorField) -> Result<TensorField> {
    check_grid(g, h.grid())?;
    let gamma = christoffel(g);
    Ok(rough_laplacian_with(g, &gamma, h))
}

fn rough_laplacian_with(g: &MetricField, gamma: &ChristoffelField, h: &TensorField) -> TensorField {
    let grid = *g.grid();
    let n = grid.dims();
    let npts = grid.len();
    let hd = h.data();
    let hc = |i: usize, j: usize| &hd[(i * n + j) * npts..(i * n + j + 1) * npts];
    // (∇h)_{lij}
    let dh = gradient_data(&grid, hd);
    let mut nh = dh;
    for l in 0..n {
        for i in 0..n {
            for j in 0..n {
                let o = (l * n * n + i * n + j) * npts;
                for m in 0..n {
                    let (g1, h1) = (gamma.get(m, l, i), hc(m, j));
                    let (g2, h2) = (gamma.get(m, l, j), hc(i, m));
                    for p in 0..npts {
                        nh[o + p] -= g1[p] * h1[p] + g2[p] * h2[p];
                    }
                }
            }
        }
    }
    let nhc = |l: usize, i: usize, j: usize| &nh[(l * n * n + i * n + j) * npts..(l * n * n + i * n + j + 1) * npts];
    let ginv = g.inverse();
    let mut out = vec![0.0; n * n * npts];
    let mut t = vec![0.0; npts];
    for i in 0..n {
        for j in i..n {
            let o = (i * n + j) * npts;
            for k in 0..n {
                for l in 0..n {
                    diff_axis(&grid, k, nhc(l, i, j), &mut t);
                    for m in 0..n {
                        let (g1, n1) = (gamma.get(m, k, l), nhc(m, i, j));
                        let (g2, n2) = (gamma.get(m, k, i), nhc(l, m, j));
                        let (g3, n3) = (gamma.get(m, k, j), nhc(l, i, m));
                        for p in 0..npts {
                            t[p] -= g1[p] * n1[p] + g2[p] * n2[p] + g3[p] * n3[p];
                        }
                    }
                    let gkl = &ginv[(k * n + l) * npts..];
                    for p in 0..npts {
                        out[o + p] += gkl[p] * t[p];
                    }
                }
            }
            if i != j {
                out.copy_within(o..o + npts, (j * n + i) * npts);
            }
        }
    }
    TensorField::from_vec(grid, TensorKind::Symmetric2, out)
}

/// Δ^L h = Δ_c h + 2 Riem(h) − Ric·h − h·Ric, in the nonpositive sign
/// convention (reduces to the componentwise Laplacian on a flat metric).
pub fn lichnerowicz(g: &MetricField, h: &TensorField) -> Result<TensorField> {
    check_grid(g, h.grid())?;
    if h.kind() != TensorKind::Symmetric2 {
        return Err(GeometryError::NotSymmetric(h.kind()));
    }
    let grid = *g.grid();
    let n = grid.dims();
    let npts = grid.len();
    let gamma = christoffel(g);
    let rough = rough_laplacian_with(g, &gamma, h);
    let riem = riemann(&grid, &gamma);
    let ginv = g.inverse();
    let hd = h.data();
    let rc = |l: usize, i: usize, j: usize, k: usize| (((l * n + i) * n + j) * n + k) * npts;
    let mut out = rough.into_data();
    let mut m = [0.0; 16];
    let mut gi = [0.0; 16];
    let mut hm = [0.0; 16];
    let mut ricr = [0.0; 16];
    let mut mix = [0.0; 16];
    for p in 0..npts {
        super::gather(ginv, n, npts, p, &mut gi);
        super::gather(hd, n, npts, p, &mut m);
        // mix^k_m = G^{ka} h_am
        for k in 0..n {
            for mm in 0..n {
                mix[k * n + mm] = (0..n).map(|a| gi[k * n + a] * m[a * n + mm]).sum();
            }
        }
        for i in 0..n {
            for j in 0..n {
                ricr[i * n + j] = (0..n).map(|k| riem[rc(k, k, i, j) + p]).sum();
                hm[i * n + j] = (0..n)
                    .flat_map(|k| (0..n).map(move |mm| (k, mm)))
                    .map(|(k, mm)| mix[k * n + mm] * riem[rc(mm, k, i, j) + p])
                    .sum();
            }
        }
        for i in 0..n {
            for j in 0..n {
                let mut lhs = hm[i * n + j] + hm[j * n + i];
                for k in 0..n {
                    for a in 0..n {
                        lhs -= 0.5 * (ricr[i * n + a] + ricr[a * n + i]) * gi[a * n + k] * m[k * n + j];
                        lhs -= 0.5 * m[i * n + k] * gi[k * n + a] * (ricr[a * n + j] + ricr[j * n + a]);
                    }
                }
                out[(i * n + j) * npts + p] += lhs;
            }
        }
    }
    // Average the two triangles; they agree up to round-off.
    for i in 0..n {
        for j in i + 1..n {
            let (src, dst) = ((i * n + j) * npts, (j * n + i) * npts);
            for p in 0..npts {
                let v = 0.5 * (out[src + p] + out[dst + p]);
                out[src + p] = v;
                out[dst + p] = v;
            }
        }
    }
    Ok(TensorField::from_vec(grid, TensorKind::Symmetric2, out))
}
