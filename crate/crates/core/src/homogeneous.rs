//! Left-invariant data on three-dimensional Lie groups.
//!
//! A basis e_i of the Lie algebra with [e_i, e_j] = c^k_ij e_k, an inner
//! product g_ij = ⟨e_i, e_j⟩ and H = h3·e¹∧e²∧e³. Curvature is computed in a
//! g-orthonormal frame E = e·M (Mᵀ g M = 1) from the Koszul formula
//! Γ_abc = ½(C_abc − C_bca + C_cab), C_abc = ⟨[E_a, E_b], E_c⟩, then mapped
//! back to the e basis. No discretization is involved.

use nalgebra::{Matrix3, SMatrix, SVector};

pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, thiserror::Error)]
pub enum HomogeneousError {
    #[error("structure constants violate the Jacobi identity (residual {residual:.3e})")]
    Jacobi { residual: f64 },
    #[error("structure constants are not antisymmetric in the lower indices")]
    NotAntisymmetric,
    #[error("metric is not symmetric positive definite")]
    NotPositive,
    #[error("Newton iteration failed after {iterations} iterations (residual {residual:.3e})")]
    NewtonDiverged { iterations: usize, residual: f64 },
}

pub type Result<T, E = HomogeneousError> = std::result::Result<T, E>;

pub const JACOBI_TOL: f64 = 1e-12;

/// c[k][i][j] = c^k_ij.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StructureConstants(pub [[[f64; 3]; 3]; 3]);

fn eps(i: usize, j: usize, k: usize) -> f64 {
    crate::lattice::permutation_sign(&[i, j, k]) as f64
}

impl StructureConstants {
    pub fn abelian() -> Self {
        Self([[[0.0; 3]; 3]; 3])
    }

    /// [e_i, e_j] = ε_ijk e_k.
    pub fn su2() -> Self {
        Self::from_milnor(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// [e_1, e_2] = e_3.
    pub fn heisenberg() -> Self {
        Self::from_milnor(&[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Unimodular algebra [e_i, e_j] = ε_ijm N_mk e_k for symmetric N;
    /// Jacobi holds for every symmetric N.
    pub fn from_milnor(n: &Mat3) -> Self {
        let mut c = [[[0.0; 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    c[k][i][j] = (0..3).map(|m| eps(i, j, m) * n[m][k]).sum();
                }
            }
        }
        Self(c)
    }

    /// [e_3, e_1] = e_1, [e_3, e_2] = e_2: the solvable algebra of hyperbolic space.
    pub fn hyperbolic() -> Self {
        let mut c = [[[0.0; 3]; 3]; 3];
        c[0][2][0] = 1.0;
        c[0][0][2] = -1.0;
        c[1][2][1] = 1.0;
        c[1][1][2] = -1.0;
        Self(c)
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.0[k][i][j]
    }

    pub fn is_antisymmetric(&self) -> bool {
        (0..3).all(|k| (0..3).all(|i| (0..3).all(|j| self.0[k][i][j] == -self.0[k][j][i])))
    }

    /// max over (i, j, l, n) of |Σ_cyclic c^m_ij c^n_ml|.
    pub fn jacobi_residual(&self) -> f64 {
        let c = &self.0;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                for l in 0..3 {
                    for n in 0..3 {
                        let s: f64 = (0..3)
                            .map(|m| c[m][i][j] * c[n][m][l] + c[m][j][l] * c[n][m][i] + c[m][l][i] * c[n][m][j])
                            .sum();
                        worst = worst.max(s.abs());
                    }
                }
            }
        }
        worst
    }

    /// c^k_ik = 0 for all i.
    pub fn is_unimodular(&self) -> bool {
        (0..3).all(|i| (0..3).map(|k| self.0[k][i][k]).sum::<f64>().abs() < JACOBI_TOL)
    }

    /// Structure constants in the basis e'_i = s·e_i.
    pub fn rescaled(&self, s: f64) -> Self {
        let mut c = self.0;
        c.iter_mut().flatten().flatten().for_each(|v| *v *= s);
        Self(c)
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct LieData {
    pub c: StructureConstants,
    pub g: Mat3,
    pub h3: f64,
    pub unimodular: bool,
}

fn to_na(m: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

fn from_na(m: &Matrix3<f64>) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[(i, j)];
        }
    }
    out
}

impl LieData {
    pub fn new(c: StructureConstants, g: Mat3, h3: f64) -> Result<Self> {
        if !c.is_antisymmetric() {
            return Err(HomogeneousError::NotAntisymmetric);
        }
        let residual = c.jacobi_residual();
        if residual > JACOBI_TOL {
            return Err(HomogeneousError::Jacobi { residual });
        }
        check_spd(&g)?;
        Ok(Self { unimodular: c.is_unimodular(), c, g, h3 })
    }

    pub fn with_metric(&self, g: Mat3) -> Result<Self> {
        check_spd(&g)?;
        Ok(Self { g, ..self.clone() })
    }

    /// (c, g, h3) in the basis e'_i = s·e_i.
    pub fn rescaled(&self, s: f64) -> Self {
        let mut g = self.g;
        g.iter_mut().flatten().for_each(|v| *v *= s * s);
        Self { c: self.c.rescaled(s), g, h3: self.h3 * s * s * s, unimodular: self.unimodular }
    }
}

fn check_spd(g: &Mat3) -> Result<()> {
    let sym = (0..3).all(|i| (0..3).all(|j| g[i][j] == g[j][i]));
    if !sym || g.iter().flatten().any(|v| !v.is_finite()) || to_na(g).cholesky().is_none() {
        return Err(HomogeneousError::NotPositive);
    }
    Ok(())
}

/// Orthonormal frame data: M with E_a = Σ_i M_ia e_i, and C_abc.
struct Frame {
    m: Matrix3<f64>,
    minv: Matrix3<f64>,
    /// c[a][b][e] = ⟨[E_a, E_b], E_e⟩
    c: [[[f64; 3]; 3]; 3],
    /// gamma[a][b][e] = ⟨∇_{E_a} E_b, E_e⟩
    gamma: [[[f64; 3]; 3]; 3],
}

impl Frame {
    fn new(data: &LieData) -> Result<Self> {
        let l = to_na(&data.g).cholesky().ok_or(HomogeneousError::NotPositive)?.l();
        let m = l.transpose().try_inverse().ok_or(HomogeneousError::NotPositive)?;
        let minv = l.transpose();
        let mut c = [[[0.0; 3]; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                for e in 0..3 {
                    let mut s = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            for k in 0..3 {
                                s += m[(i, a)] * m[(j, b)] * data.c.0[k][i][j] * minv[(e, k)];
                            }
                        }
                    }
                    c[a][b][e] = s;
                }
            }
        }
        let mut gamma = [[[0.0; 3]; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                for e in 0..3 {
                    gamma[a][b][e] = 0.5 * (c[a][b][e] - c[b][e][a] + c[e][a][b]);
                }
            }
        }
        Ok(Self { m, minv, c, gamma })
    }

    /// Ric(E_b, E_c) = Σ_a ⟨R(E_a, E_b)E_c, E_a⟩.
    fn ricci(&self) -> Matrix3<f64> {
        let (g, c) = (&self.gamma, &self.c);
        Matrix3::from_fn(|b, cc| {
            let mut s = 0.0;
            for a in 0..3 {
                for e in 0..3 {
                    s += g[b][cc][e] * g[a][e][a] - g[a][cc][e] * g[b][e][a] - c[a][b][e] * g[e][cc][a];
                }
            }
            s
        })
    }

    /// Back to the e basis: T_ij = Σ Minv_ai Minv_bj T_ab.
    fn to_basis(&self, t: &Matrix3<f64>) -> Matrix3<f64> {
        self.minv.transpose() * t * self.minv
    }
}

pub fn invariant_ricci(data: &LieData) -> Result<Mat3> {
    let frame = Frame::new(data)?;
    let r = frame.to_basis(&frame.ricci());
    // exact symmetry for downstream consumers
    Ok(from_na(&((r + r.transpose()) * 0.5)))
}

pub fn invariant_scalar(data: &LieData) -> Result<f64> {
    let frame = Frame::new(data)?;
    Ok(frame.ricci().trace())
}

/// (H²)_ij = H_ikl H_jmn g^km g^ln by index summation.
pub fn invariant_h_squared(data: &LieData) -> Result<Mat3> {
    let ginv = to_na(&data.g).try_inverse().ok_or(HomogeneousError::NotPositive)?;
    let h = |i: usize, j: usize, k: usize| data.h3 * eps(i, j, k);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    for m in 0..3 {
                        for n in 0..3 {
                            s += h(i, k, l) * h(j, m, n) * ginv[(k, m)] * ginv[(l, n)];
                        }
                    }
                }
            }
            out[i][j] = s;
        }
    }
    Ok(out)
}

/// |H|² with full contraction.
pub fn invariant_norm_sq(data: &LieData) -> Result<f64> {
    let ginv = to_na(&data.g).try_inverse().ok_or(HomogeneousError::NotPositive)?;
    let h2 = to_na(&invariant_h_squared(data)?);
    Ok((ginv * h2).trace())
}

/// ∂h3 from ΔH = −d d*H, with d* = −tr∇ and the Chevalley–Eilenberg d.
pub fn invariant_h_evolution(data: &LieData) -> Result<f64> {
    let fr = Frame::new(data)?;
    let eta = data.h3 * fr.m.determinant();
    let hf = |a: usize, b: usize, c: usize| eta * eps(a, b, c);
    let g = &fr.gamma;
    // (d*H)(c, d) = Σ_a Σ_e [Γ_aae H(e,c,d) + Γ_ace H(a,e,d) + Γ_ade H(a,c,e)]
    let mut ds = [[0.0; 3]; 3];
    for c in 0..3 {
        for d in 0..3 {
            let mut s = 0.0;
            for a in 0..3 {
                for e in 0..3 {
                    s += g[a][a][e] * hf(e, c, d) + g[a][c][e] * hf(a, e, d) + g[a][d][e] * hf(a, c, e);
                }
            }
            ds[c][d] = s;
        }
    }
    // dω(X,Y,Z) = −ω([X,Y],Z) + ω([X,Z],Y) − ω([Y,Z],X)
    let br = |x: usize, y: usize, e: usize| fr.c[x][y][e];
    let dw = |x: usize, y: usize, z: usize| -> f64 {
        (0..3)
            .map(|e| -br(x, y, e) * ds[e][z] + br(x, z, e) * ds[e][y] - br(y, z, e) * ds[e][x])
            .sum()
    };
    let lap = -dw(0, 1, 2);
    Ok(lap / fr.m.determinant())
}

/// ∂g = −2Ric + ½H² and ∂h3.
pub fn invariant_grf_rhs(data: &LieData) -> Result<(Mat3, f64)> {
    let ric = to_na(&invariant_ricci(data)?);
    let h2 = to_na(&invariant_h_squared(data)?);
    let dg = ric * -2.0 + h2 * 0.5;
    let dg = (dg + dg.transpose()) * 0.5;
    Ok((from_na(&dg), invariant_h_evolution(data)?))
}

/// Ric − ¼H².
pub fn stationarity_residual(data: &LieData) -> Result<Mat3> {
    let ric = to_na(&invariant_ricci(data)?);
    let h2 = to_na(&invariant_h_squared(data)?);
    Ok(from_na(&(ric - h2 * 0.25)))
}

fn max_entry(m: &Mat3) -> f64 {
    m.iter().flatten().fold(0.0, |a, v| a.max(v.abs()))
}

const UPPER: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

fn pack(m: &Mat3) -> SVector<f64, 6> {
    SVector::from_fn(|r, _| m[UPPER[r].0][UPPER[r].1])
}

fn unpack(v: &SVector<f64, 6>) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for (r, &(i, j)) in UPPER.iter().enumerate() {
        m[i][j] = v[r];
        m[j][i] = v[r];
    }
    m
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Step length of the first iteration.
    pub initial_damping: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 100, initial_damping: 0.5 }
    }
}

/// Newton on the six metric entries (h3 held fixed) for Ric = ¼H², with
/// backtracking line search and a pseudo-inverse step: automorphisms of
/// the algebra make the Jacobian singular along their orbit.
///
/// Convergence is judged relative to max(|Ric|, |¼H²|): with flux on an
/// abelian algebra both sides decay as g grows, and a runaway metric must not
/// count as a solution.
pub fn find_stationary(data0: &LieData, opts: &NewtonOptions) -> Result<(LieData, usize)> {
    let residual = |x: &SVector<f64, 6>| -> Option<SVector<f64, 6>> {
        let d = data0.with_metric(unpack(x)).ok()?;
        stationarity_residual(&d).ok().map(|r| pack(&r))
    };
    let converged = |x: &SVector<f64, 6>, r: &SVector<f64, 6>| -> bool {
        let Ok(d) = data0.with_metric(unpack(x)) else { return false };
        let (Ok(ric), Ok(h2)) = (invariant_ricci(&d), invariant_h_squared(&d)) else { return false };
        let size = max_entry(&ric).max(0.25 * max_entry(&h2));
        r.amax() == 0.0 || r.amax() <= opts.tol * size
    };
    let mut x = pack(&data0.g);
    let mut r = residual(&x).ok_or(HomogeneousError::NotPositive)?;
    for it in 0..opts.max_iter {
        if converged(&x, &r) {
            return Ok((data0.with_metric(unpack(&x))?, it));
        }
        let scale = x.amax().max(1.0);
        let h = 1e-6 * scale;
        let mut jac = SMatrix::<f64, 6, 6>::zeros();
        for col in 0..6 {
            let mut xp = x;
            let mut xm = x;
            xp[col] += h;
            xm[col] -= h;
            let (rp, rm) = match (residual(&xp), residual(&xm)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(HomogeneousError::NewtonDiverged { iterations: it, residual: r.amax() }),
            };
            jac.set_column(col, &((rp - rm) / (2.0 * h)));
        }
        let svd = jac.svd(true, true);
        let cutoff = 1e-9 * svd.singular_values.max();
        let dx = svd
            .solve(&(-r), cutoff)
            .map_err(|_| HomogeneousError::NewtonDiverged { iterations: it, residual: r.amax() })?;
        let mut alpha = if it == 0 { opts.initial_damping } else { 1.0 };
        let mut accepted = None;
        for _ in 0..30 {
            let trial = x + dx * alpha;
            if let Some(rt) = residual(&trial) {
                if rt.norm() < r.norm() {
                    accepted = Some((trial, rt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((xn, rn)) => {
                x = xn;
                r = rn;
            }
            None => return Err(HomogeneousError::NewtonDiverged { iterations: it, residual: r.amax() }),
        }
    }
    if converged(&x, &r) {
        return Ok((data0.with_metric(unpack(&x))?, opts.max_iter));
    }
    Err(HomogeneousError::NewtonDiverged { iterations: opts.max_iter, residual: r.amax() })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct StationarityReport {
    pub g: Mat3,
    pub h3: f64,
    /// max |Ric − ¼H²|.
    pub residual: f64,
    /// |R − ¼|H|²|, the trace of the stationary equation.
    pub trace_gap: f64,
    /// |R − |H|²/12|: how far from generalized scalar-flat.
    pub scalar_flat_gap: f64,
    pub h_evolution: f64,
    pub rhs_max: f64,
    pub unimodular: bool,
    pub jacobi_residual: f64,
}

pub fn stationarity_report(data: &LieData) -> Result<StationarityReport> {
    let r = invariant_scalar(data)?;
    let hn = invariant_norm_sq(data)?;
    let (dg, dh) = invariant_grf_rhs(data)?;
    Ok(StationarityReport {
        g: data.g,
        h3: data.h3,
        residual: max_entry(&stationarity_residual(data)?),
        trace_gap: (r - 0.25 * hn).abs(),
        scalar_flat_gap: (r - hn / 12.0).abs(),
        h_evolution: dh,
        rhs_max: max_entry(&dg).max(dh.abs()),
        unimodular: data.unimodular,
        jacobi_residual: data.c.jacobi_residual(),
    })
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct OdeSample {
    pub t: f64,
    pub g: Mat3,
    pub h3: f64,
    pub ricci_max: f64,
    pub dt: f64,
}

pub const ODE_COLUMNS: [&str; 14] =
    ["t", "g00", "g01", "g02", "g10", "g11", "g12", "g20", "g21", "g22", "h3", "h_norm_sq", "ricci_max", "dt"];

/// RK4 integration of the matrix ODE with a fixed step.
pub fn integrate(data: &LieData, dt: f64, steps: usize) -> Result<Vec<OdeSample>> {
    let mut cur = data.clone();
    let mut out = Vec::with_capacity(steps + 1);
    let sample = |d: &LieData, t: f64, dt: f64| -> Result<OdeSample> {
        Ok(OdeSample { t, g: d.g, h3: d.h3, ricci_max: max_entry(&invariant_ricci(d)?), dt })
    };
    out.push(sample(&cur, 0.0, 0.0)?);
    let shift = |d: &LieData, k: &(Mat3, f64), s: f64| -> Result<LieData> {
        let mut g = d.g;
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] += s * k.0[i][j];
            }
        }
        for i in 0..3 {
            for j in 0..i {
                g[i][j] = g[j][i];
            }
        }
        Ok(LieData { g, h3: d.h3 + s * k.1, ..d.clone() }).and_then(|n| {
            check_spd(&n.g)?;
            Ok(n)
        })
    };
    for n in 1..=steps {
        let k1 = invariant_grf_rhs(&cur)?;
        let k2 = invariant_grf_rhs(&shift(&cur, &k1, 0.5 * dt)?)?;
        let k3 = invariant_grf_rhs(&shift(&cur, &k2, 0.5 * dt)?)?;
        let k4 = invariant_grf_rhs(&shift(&cur, &k3, dt)?)?;
        let mut k = ([[0.0; 3]; 3], 0.0);
        for i in 0..3 {
            for j in 0..3 {
                k.0[i][j] = (k1.0[i][j] + 2.0 * k2.0[i][j] + 2.0 * k3.0[i][j] + k4.0[i][j]) / 6.0;
            }
        }
        k.1 = (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1) / 6.0;
        cur = shift(&cur, &k, dt)?;
        out.push(sample(&cur, n as f64 * dt, dt)?);
    }
    Ok(out)
}

pub fn ode_csv(samples: &[OdeSample], data: &LieData) -> String {
    use std::fmt::Write as _;
    let mut s = ODE_COLUMNS.join(",");
    s.push('\n');
    for row in samples {
        let d = LieData { g: row.g, h3: row.h3, ..data.clone() };
        let hn = invariant_norm_sq(&d).unwrap_or(f64::NAN);
        let mut cells = vec![row.t];
        cells.extend(row.g.iter().flatten());
        cells.extend([row.h3, hn, row.ricci_max, row.dt]);
        let cells: Vec<String> = cells.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ID: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() <= tol))
    }

    /// Milnor: for [E2,E3] = l1 E1, [E3,E1] = l2 E2, [E1,E2] = l3 E3 in an
    /// orthonormal frame, Ric is diagonal with entries 2μ_jμ_k,
    /// μ_i = ½(l1 + l2 + l3) − l_i.
    fn milnor_ricci(l: [f64; 3]) -> [f64; 3] {
        let half = 0.5 * (l[0] + l[1] + l[2]);
        let mu = [half - l[0], half - l[1], half - l[2]];
        [2.0 * mu[1] * mu[2], 2.0 * mu[0] * mu[2], 2.0 * mu[0] * mu[1]]
    }

    /// Ric(X,X) = −½Σ|[X,E_i]|² − ½B(X,X) + ¼Σ_ij⟨[E_i,E_j],X⟩² − ⟨[Z,X],X⟩,
    /// Z = Σ ad*_{E_i}E_i, evaluated by brute force in the e basis.
    fn besse_ricci(data: &LieData) -> Mat3 {
        let g = to_na(&data.g);
        let l = g.cholesky().unwrap().l();
        let m = l.transpose().try_inverse().unwrap();
        let frame: Vec<[f64; 3]> = (0..3).map(|a| [m[(0, a)], m[(1, a)], m[(2, a)]]).collect();
        let br = |x: &[f64; 3], y: &[f64; 3]| -> [f64; 3] {
            let mut z = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        z[k] += x[i] * y[j] * data.c.0[k][i][j];
                    }
                }
            }
            z
        };
        let ip = |x: &[f64; 3], y: &[f64; 3]| -> f64 {
            (0..3).map(|i| (0..3).map(|j| x[i] * g[(i, j)] * y[j]).sum::<f64>()).sum()
        };
        // ad_X as a matrix, trace(ad_X ad_Y)
        let ad = |x: &[f64; 3]| Matrix3::from_fn(|k, j| (0..3).map(|i| x[i] * data.c.0[k][i][j]).sum::<f64>());
        let killing = |x: &[f64; 3], y: &[f64; 3]| (ad(x) * ad(y)).trace();
        // Z with ⟨Z, X⟩ = tr ad_X
        let ginv = g.try_inverse().unwrap();
        let tr: Vec<f64> = (0..3).map(|i| ad(&[(i == 0) as u8 as f64, (i == 1) as u8 as f64, (i == 2) as u8 as f64]).trace()).collect();
        let z: [f64; 3] = [0, 1, 2].map(|k| (0..3).map(|i| ginv[(k, i)] * tr[i]).sum());
        let quad = |x: &[f64; 3]| -> f64 {
            let mut s = 0.0;
            for e in &frame {
                let b = br(x, e);
                s -= 0.5 * ip(&b, &b);
            }
            s -= 0.5 * killing(x, x);
            for ei in &frame {
                for ej in &frame {
                    s += 0.25 * ip(&br(ei, ej), x).powi(2);
                }
            }
            s - ip(&br(&z, x), x)
        };
        let unit = |i: usize| [(i == 0) as u8 as f64, (i == 1) as u8 as f64, (i == 2) as u8 as f64];
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = (unit(i), unit(j));
                let sum = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
                let dif = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                out[i][j] = 0.25 * (quad(&sum) - quad(&dif));
            }
        }
        out
    }

    #[test]
    fn closed_form_ricci_examples() {
        let abelian = LieData::new(StructureConstants::abelian(), [[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 0.7]], 0.0).unwrap();
        assert!(max_entry(&invariant_ricci(&abelian).unwrap()) == 0.0);
        let su2 = LieData::new(StructureConstants::su2(), ID, 0.0).unwrap();
        let half = [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]];
        assert!(close(&invariant_ricci(&su2).unwrap(), &half, 1e-14));
        let heis = LieData::new(StructureConstants::heisenberg(), ID, 0.0).unwrap();
        let want = [[-0.5, 0.0, 0.0], [0.0, -0.5, 0.0], [0.0, 0.0, 0.5]];
        assert!(close(&invariant_ricci(&heis).unwrap(), &want, 1e-14));
        // constant curvature −1 in dimension 3
        let hyp = LieData::new(StructureConstants::hyperbolic(), ID, 0.0).unwrap();
        let want = [[-2.0, 0.0, 0.0], [0.0, -2.0, 0.0], [0.0, 0.0, -2.0]];
        assert!(close(&invariant_ricci(&hyp).unwrap(), &want, 1e-14));
        assert!(!hyp.unimodular && su2.unimodular && heis.unimodular);
    }

    #[test]
    fn round_sphere_scaling() {
        // g = r²/4·δ on su(2) with [e_i,e_j] = ε e_k is the round sphere of
        // radius r: Ric = (2/r²) g = ½δ for every r
        for r in [0.5, 1.0, 3.0] {
            let s = r * r / 4.0;
            let d = LieData::new(StructureConstants::su2(), [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]], 0.0).unwrap();
            let ric = invariant_ricci(&d).unwrap();
            for i in 0..3 {
                assert!((ric[i][i] - 2.0 / (r * r) * s).abs() < 1e-13);
            }
            assert!((invariant_scalar(&d).unwrap() - 6.0 / (r * r)).abs() < 1e-12);
        }
    }

    #[test]
    fn milnor_frames_with_diagonal_metrics() {
        for (n, g) in [([1.0, 2.0, -0.5], [1.3, 0.4, 2.2]), ([0.0, 1.0, 1.0], [0.7, 1.1, 0.9]), ([1.0, -1.0, 0.0], [2.0, 1.0, 0.5])] {
            let nm = [[n[0], 0.0, 0.0], [0.0, n[1], 0.0], [0.0, 0.0, n[2]]];
            let gm = [[g[0], 0.0, 0.0], [0.0, g[1], 0.0], [0.0, 0.0, g[2]]];
            let d = LieData::new(StructureConstants::from_milnor(&nm), gm, 0.0).unwrap();
            // E_i = e_i/√g_i: [E_j,E_k] = n_i √g_i/(√g_j √g_k) E_i
            let s = [g[0].sqrt(), g[1].sqrt(), g[2].sqrt()];
            let l = [n[0] * s[0] / (s[1] * s[2]), n[1] * s[1] / (s[2] * s[0]), n[2] * s[2] / (s[0] * s[1])];
            let want = milnor_ricci(l);
            let ric = invariant_ricci(&d).unwrap();
            for i in 0..3 {
                assert!((ric[i][i] - want[i] * g[i]).abs() < 1e-13, "{i}: {} vs {}", ric[i][i], want[i] * g[i]);
                for j in 0..3 {
                    if i != j {
                        assert!(ric[i][j].abs() < 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn h_squared_examples() {
        let d = LieData::new(StructureConstants::su2(), ID, 1.0).unwrap();
        let h2 = invariant_h_squared(&d).unwrap();
        assert!(close(&h2, &[[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]], 1e-14));
        assert!((invariant_norm_sq(&d).unwrap() - 6.0).abs() < 1e-14);
        let z = LieData::new(StructureConstants::su2(), ID, 0.0).unwrap();
        assert_eq!(max_entry(&invariant_h_squared(&z).unwrap()), 0.0);
        assert_eq!(invariant_norm_sq(&z).unwrap(), 0.0);
    }

    #[test]
    fn su2_stationary_point_and_newton() {
        let d = LieData::new(StructureConstants::su2(), ID, 1.0).unwrap();
        let (dg, dh) = invariant_grf_rhs(&d).unwrap();
        assert!(max_entry(&dg) < 1e-14 && dh.abs() < 1e-14);
        let start = d.with_metric([[1.2, 0.05, 0.0], [0.05, 0.9, -0.03], [0.0, -0.03, 1.05]]).unwrap();
        let (found, _) = find_stationary(&start, &NewtonOptions::default()).unwrap();
        let rep = stationarity_report(&found).unwrap();
        assert!(rep.residual <= 1e-12 && rep.trace_gap < 1e-11, "{rep:?}");
        assert!(close(&found.g, &ID, 1e-9), "{:?}", found.g);
        // a unit round sphere, Ric = 2g, needs h3 = 2
        // H = 2·vol_g and vol_g = (det g)^{1/2} e¹²³ = e¹²³/8
        let q = [[0.25, 0.0, 0.0], [0.0, 0.25, 0.0], [0.0, 0.0, 0.25]];
        let round = LieData::new(StructureConstants::su2(), q, 2.0 / 8.0).unwrap();
        assert!(stationarity_report(&round).unwrap().residual < 1e-14);
    }

    #[test]
    fn abelian_with_flux_is_not_stationary() {
        let d = LieData::new(StructureConstants::abelian(), ID, 0.8).unwrap();
        let (dg, _) = invariant_grf_rhs(&d).unwrap();
        assert!(max_entry(&dg) > 0.1);
        let rep = stationarity_report(&d).unwrap();
        let hn = invariant_norm_sq(&d).unwrap();
        assert!((rep.scalar_flat_gap - hn / 12.0).abs() < 1e-14);
        assert!(find_stationary(&d, &NewtonOptions::default()).is_err());
        let flat = LieData { h3: 0.0, ..d };
        assert_eq!(invariant_grf_rhs(&flat).unwrap().0, [[0.0; 3]; 3]);
    }

    #[test]
    fn jacobi_violation_is_rejected() {
        // [e0,e1] = e1, [e1,e2] = e0: the Jacobi sum on (e0,e1,e2) is −e0
        let mut c = StructureConstants::abelian();
        c.0[1][0][1] = 1.0;
        c.0[1][1][0] = -1.0;
        c.0[0][1][2] = 1.0;
        c.0[0][2][1] = -1.0;
        assert!(matches!(LieData::new(c, ID, 0.0), Err(HomogeneousError::Jacobi { .. })));
        let mut c = StructureConstants::su2();
        c.0[2][0][1] = 2.0;
        assert!(matches!(LieData::new(c, ID, 0.0), Err(HomogeneousError::NotAntisymmetric)));
        assert!(matches!(LieData::new(StructureConstants::su2(), [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]], 0.0), Err(HomogeneousError::NotPositive)));
    }

    #[test]
    fn hyperbolic_h_evolution_is_computed_not_assumed() {
        // on non-unimodular groups the invariant volume form need not be harmonic
        let d = LieData::new(StructureConstants::hyperbolic(), ID, 1.0).unwrap();
        assert!(invariant_h_evolution(&d).unwrap().is_finite());
    }

    #[test]
    fn ode_and_csv() {
        let d = LieData::new(StructureConstants::heisenberg(), ID, 0.3).unwrap();
        let samples = integrate(&d, 0.01, 20).unwrap();
        assert_eq!(samples.len(), 21);
        let csv = ode_csv(&samples, &d);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), ODE_COLUMNS.len());
        assert_eq!(lines.count(), 21);
        // h3 frozen on a unimodular algebra
        assert!(samples.iter().all(|s| (s.h3 - 0.3).abs() < 1e-14));
    }

    fn spd() -> impl Strategy<Value = Mat3> {
        prop::array::uniform9(-0.5f64..0.5).prop_map(|a| {
            let mut g = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    g[i][j] = (0..3).map(|k| a[i * 3 + k] * a[j * 3 + k]).sum::<f64>() + if i == j { 0.6 } else { 0.0 };
                }
            }
            g
        })
    }

    fn milnor() -> impl Strategy<Value = StructureConstants> {
        prop::array::uniform6(-1.5f64..1.5).prop_map(|v| {
            StructureConstants::from_milnor(&[[v[0], v[1], v[2]], [v[1], v[3], v[4]], [v[2], v[4], v[5]]])
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn koszul_ricci_matches_besse_formula(c in milnor(), g in spd()) {
            let d = LieData::new(c, g, 0.0).unwrap();
            let a = invariant_ricci(&d).unwrap();
            let b = besse_ricci(&d);
            prop_assert!(close(&a, &b, 1e-10 * (1.0 + max_entry(&b))));
        }

        #[test]
        fn trace_identity_and_closed_form(g in spd(), h3 in -2.0f64..2.0) {
            let d = LieData::new(StructureConstants::abelian(), g, h3).unwrap();
            let h2 = to_na(&invariant_h_squared(&d).unwrap());
            let ginv = to_na(&g).try_inverse().unwrap();
            let n = invariant_norm_sq(&d).unwrap();
            prop_assert!(((ginv * h2).trace() - n).abs() < 1e-12 * (1.0 + n));
            // H² = 2h3²/det g · g
            let det = to_na(&g).determinant();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((h2[(i, j)] - 2.0 * h3 * h3 / det * g[i][j]).abs() < 1e-10 * (1.0 + n));
                }
            }
        }

        #[test]
        fn unimodular_volume_form_is_harmonic(c in milnor(), g in spd(), h3 in -2.0f64..2.0) {
            let d = LieData::new(c, g, h3).unwrap();
            prop_assert!(invariant_h_evolution(&d).unwrap().abs() < 1e-11);
        }

        #[test]
        fn rhs_equivariant_under_basis_rescaling(c in milnor(), g in spd(), h3 in -1.0f64..1.0, s in 0.5f64..2.0) {
            let d = LieData::new(c, g, h3).unwrap();
            let (dg, _) = invariant_grf_rhs(&d).unwrap();
            let (dgs, _) = invariant_grf_rhs(&d.rescaled(s)).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((dgs[i][j] - s * s * dg[i][j]).abs() < 1e-10 * (1.0 + max_entry(&dg)) * s * s);
                }
            }
        }
    }
}
