//! Recovering the ungauged flow from a DeTurck trajectory.
//!
//! If g̃ solves the DeTurck-modified flow with field X, and ψ_t solves
//! ∂_t ψ = −X(t) ∘ ψ with ψ_0 = id, then ψ_t* g̃_t solves the flow itself.
//! ψ is stored as a periodic displacement ψ(x) = x + u(x) at lattice points;
//! X is sampled off-lattice by tensor-product cubic Lagrange interpolation.

use super::{run_flow, FlowConfig, FlowError, FlowState, Gauge, Result};
use crate::geometry::{self, MetricField};
use crate::lattice::{diff, Grid, TensorField, TensorKind};

/// Periodic cubic interpolation weights and base indices at a point.
struct Stencil {
    base: Vec<isize>,
    weights: Vec<[f64; 4]>,
}

fn lagrange4(t: f64) -> [f64; 4] {
    [
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    ]
}

impl Stencil {
    fn at(grid: &Grid, x: &[f64]) -> Self {
        let n = grid.dims();
        let mut base = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for a in 0..n {
            let s = x[a] / grid.spacing(a);
            let i0 = s.floor();
            base.push(i0 as isize);
            weights.push(lagrange4(s - i0));
        }
        Self { base, weights }
    }

    fn eval(&self, grid: &Grid, values: &[f64]) -> f64 {
        let n = grid.dims();
        let total = 4usize.pow(n as u32);
        let mut acc = 0.0;
        let mut idx = vec![0usize; n];
        for m in 0..total {
            let mut w = 1.0;
            let mut r = m;
            for a in 0..n {
                let o = r % 4;
                r /= 4;
                w *= self.weights[a][o];
                let res = grid.resolution(a) as isize;
                idx[a] = (self.base[a] + o as isize - 1).rem_euclid(res) as usize;
            }
            acc += w * values[grid.linear_index(&idx)];
        }
        acc
    }
}

/// Periodic cubic interpolation of every component of `t` at the points
/// x_p + u(x_p).
pub fn interpolate_displaced(t: &TensorField, u: &[f64]) -> Result<TensorField> {
    let grid = *t.grid();
    let n = grid.dims();
    let npts = grid.len();
    if u.len() != n * npts {
        return Err(FlowError::Config("displacement length mismatch".into()));
    }
    let ncomp = t.ncomp();
    let mut out = vec![0.0; t.data().len()];
    let mut x = vec![0.0; n];
    for p in 0..npts {
        let c = grid.coords(p);
        for a in 0..n {
            x[a] = c[a] + u[a * npts + p];
        }
        let st = Stencil::at(&grid, &x);
        for k in 0..ncomp {
            out[k * npts + p] = st.eval(&grid, t.component(k));
        }
    }
    Ok(TensorField::new(grid, t.kind(), out)?)
}

/// ψ = id + u on the lattice.
#[derive(Clone, Debug)]
pub struct Diffeo {
    grid: Grid,
    t: f64,
    /// Layout (a·len + p).
    u: Vec<f64>,
}

impl Diffeo {
    pub fn identity(grid: Grid) -> Self {
        Self { grid, t: 0.0, u: vec![0.0; grid.dims() * grid.len()] }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn displacement(&self) -> &[f64] {
        &self.u
    }

    /// J^a_i = δ^a_i + ∂_i u^a, layout ((a·n + i)·len + p).
    pub fn jacobian(&self) -> Vec<f64> {
        let n = self.grid.dims();
        let npts = self.grid.len();
        let mut j = vec![0.0; n * n * npts];
        for a in 0..n {
            for i in 0..n {
                let d = diff(&self.grid, i, &self.u[a * npts..(a + 1) * npts]);
                let dst = &mut j[(a * n + i) * npts..(a * n + i + 1) * npts];
                for p in 0..npts {
                    dst[p] = d[p] + if a == i { 1.0 } else { 0.0 };
                }
            }
        }
        j
    }

    pub fn min_jacobian_det(&self) -> f64 {
        let n = self.grid.dims();
        let npts = self.grid.len();
        let j = self.jacobian();
        let mut worst = f64::INFINITY;
        let mut m = [0.0; 16];
        for p in 0..npts {
            geometry::gather(&j, n, npts, p, &mut m);
            worst = worst.min(det(&m[..n * n], n));
        }
        worst
    }

    /// ψ*T for a covariant tensor T: J^{a_1}_{i_1}⋯J^{a_k}_{i_k} T_{a_1…a_k}(ψ(x)).
    pub fn pullback(&self, t: &TensorField) -> Result<TensorField> {
        if !t.kind().is_covariant() && t.rank() > 0 {
            return Err(FlowError::Config(format!("pullback needs a covariant tensor, got {:?}", t.kind())));
        }
        let grid = self.grid;
        let n = grid.dims();
        let npts = grid.len();
        let moved = interpolate_displaced(t, &self.u)?;
        let k = t.rank();
        if k == 0 {
            return Ok(moved);
        }
        let jac = self.jacobian();
        let ncomp = t.ncomp();
        // contract one slot at a time: slot s goes from the a-index to the i-index
        let mut cur = moved.into_data();
        for slot in 0..k {
            let stride = n.pow((k - 1 - slot) as u32);
            let mut next = vec![0.0; ncomp * npts];
            for c in 0..ncomp {
                let i = (c / stride) % n;
                for a in 0..n {
                    let src = c - i * stride + a * stride;
                    let jrow = &jac[(a * n + i) * npts..(a * n + i + 1) * npts];
                    let s = &cur[src * npts..(src + 1) * npts];
                    let d = &mut next[c * npts..(c + 1) * npts];
                    for p in 0..npts {
                        d[p] += jrow[p] * s[p];
                    }
                }
            }
            cur = next;
        }
        // slot-wise contraction reorders sums; restore the exact symmetry
        let out = TensorField::from_vec(grid, t.kind(), cur);
        Ok(match t.kind() {
            TensorKind::Symmetric2 => out.symmetrized(),
            TensorKind::Antisymmetric(k) if k >= 2 => out.antisymmetrized(),
            _ => out,
        })
    }
}

fn det(m: &[f64], n: usize) -> f64 {
    match n {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => {
            let mut a = m.to_vec();
            let mut d = 1.0;
            for c in 0..n {
                let piv = (c..n).max_by(|&x, &y| a[x * n + c].abs().total_cmp(&a[y * n + c].abs())).unwrap();
                if a[piv * n + c] == 0.0 {
                    return 0.0;
                }
                if piv != c {
                    for k in 0..n {
                        a.swap(c * n + k, piv * n + k);
                    }
                    d = -d;
                }
                d *= a[c * n + c];
                for r in c + 1..n {
                    let f = a[r * n + c] / a[c * n + c];
                    for k in c..n {
                        a[r * n + k] -= f * a[c * n + k];
                    }
                }
            }
            d
        }
    }
}

/// Integrates ∂_t ψ = −X(t) ∘ ψ from samples of X at uniform times
/// t_0, t_0 + τ, …; RK4 with step 2τ uses the odd samples as midpoints.
/// Returns ψ at t_0, t_2, t_4, ….
pub fn diffeo_flow(grid: Grid, fields: &[(f64, TensorField)]) -> Result<Vec<Diffeo>> {
    if fields.is_empty() {
        return Err(FlowError::Config("no vector field samples".into()));
    }
    if fields.len().is_multiple_of(2) {
        return Err(FlowError::Config("need an even number of intervals (odd number of samples)".into()));
    }
    if let Some((_, x)) = fields.iter().find(|(_, x)| x.kind() != TensorKind::Vector || x.grid() != &grid) {
        return Err(FlowError::Config(format!("expected vector fields on the grid, got {:?}", x.kind())));
    }
    let tau = if fields.len() > 1 { fields[1].0 - fields[0].0 } else { 0.0 };
    for w in fields.windows(2) {
        if ((w[1].0 - w[0].0) - tau).abs() > 1e-9 * tau.abs().max(1e-300) {
            return Err(FlowError::Config("vector field samples must be uniformly spaced".into()));
        }
    }
    let npts = grid.len();
    let mut psi = Diffeo { t: fields[0].0, ..Diffeo::identity(grid) };
    let mut out = vec![psi.clone()];
    let vel = |x: &TensorField, u: &[f64]| -> Result<Vec<f64>> {
        Ok(interpolate_displaced(x, u)?.into_data().into_iter().map(|v| -v).collect())
    };
    let axpy = |u: &[f64], s: f64, k: &[f64]| -> Vec<f64> { u.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    for pair in fields.windows(3).step_by(2) {
        let (x0, x1, x2) = (&pair[0].1, &pair[1].1, &pair[2].1);
        let h = 2.0 * tau;
        let k1 = vel(x0, &psi.u)?;
        let k2 = vel(x1, &axpy(&psi.u, 0.5 * h, &k1))?;
        let k3 = vel(x1, &axpy(&psi.u, 0.5 * h, &k2))?;
        let k4 = vel(x2, &axpy(&psi.u, h, &k3))?;
        for i in 0..psi.u.len() {
            psi.u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        psi.t = pair[2].0;
        let d = psi.min_jacobian_det();
        if !(d > 0.0) {
            return Err(FlowError::Jacobian { time: psi.t, det: d });
        }
        debug_assert_eq!(psi.u.len(), grid.dims() * npts);
        out.push(psi.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct DiffeoRecovery {
    pub end_time: f64,
    pub dt: f64,
    /// sup |ψ*g̃ − g|.
    pub metric_gap: f64,
    /// sup |ψ*H̃ − H|.
    pub h_gap: f64,
    pub min_jacobian_det: f64,
    pub max_displacement: f64,
}

/// Runs the DeTurck and ungauged flows from the same data with a fixed
/// step and compares ψ*g̃ against g at the end time.
pub fn diffeo_recovery(initial: &FlowState, end_time: f64, dt: f64, background: Option<&MetricField>) -> Result<DiffeoRecovery> {
    let steps = (end_time / dt).round() as usize;
    if steps == 0 || (steps as f64 * dt - end_time).abs() > 1e-9 * end_time || steps % 2 == 1 {
        return Err(FlowError::Config("end_time must be an even multiple of dt".into()));
    }
    let base = FlowConfig {
        end_time,
        fixed_dt: Some(dt),
        stop_tol: 0.0,
        sample_every: steps,
        background_metric: background.cloned(),
        ..Default::default()
    };
    let gauged = run_flow(initial.clone(), &FlowConfig { gauge: Gauge::DeTurck, record_vector_field: true, ..base.clone() })?;
    let plain = run_flow(initial.clone(), &FlowConfig { gauge: Gauge::Grf, ..base })?;
    let flat = MetricField::flat(*initial.grid());
    let mut fields = gauged.vector_fields.clone();
    let last = &gauged.final_state;
    fields.push((last.t, geometry::deturck_vector(&last.g, background.unwrap_or(&flat))?));
    let psi = diffeo_flow(*initial.grid(), &fields)?.pop().expect("at least one diffeo");
    let g_back = psi.pullback(last.g.tensor())?;
    let h_back = psi.pullback(&last.h()?)?;
    let metric_gap = g_back.axpy(-1.0, plain.final_state.g.tensor())?.max_abs();
    let h_gap = h_back.axpy(-1.0, &plain.final_state.h()?)?.max_abs();
    Ok(DiffeoRecovery {
        end_time,
        dt,
        metric_gap,
        h_gap,
        min_jacobian_det: psi.min_jacobian_det(),
        max_displacement: crate::lattice::max_abs(psi.displacement()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowState;

    #[test]
    fn cubic_interpolation_reproduces_cubics_and_lattice_values() {
        for t in [0.0, 0.3, 0.5, 0.99] {
            let w = lagrange4(t);
            for deg in 0..4 {
                let exact = t.powi(deg);
                let approx: f64 = (0..4).map(|o| w[o] * ((o as f64 - 1.0).powi(deg))).sum();
                assert!((approx - exact).abs() < 1e-14);
            }
        }
        let grid = Grid::cubic(3, 8).unwrap();
        let t = TensorField::from_fn(grid, TensorKind::Covector, |x, c| {
            c[0] = x[0].sin() + x[2].cos();
            c[1] = (x[1] + x[2]).sin();
            c[2] = 1.0;
        });
        let same = interpolate_displaced(&t, &vec![0.0; 3 * grid.len()]).unwrap();
        assert!(same.axpy(-1.0, &t).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn interpolation_converges_at_fourth_order() {
        let err = |n: usize| {
            let grid = Grid::cubic(3, n).unwrap();
            let t = TensorField::from_fn(grid, TensorKind::Scalar, |x, c| c[0] = (x[0] + 2.0 * x[1]).sin());
            let shift = 0.37 * grid.spacing(0);
            let u: Vec<f64> = (0..3 * grid.len()).map(|i| if i < grid.len() { shift } else { 0.0 }).collect();
            let got = interpolate_displaced(&t, &u).unwrap();
            let want = TensorField::from_fn(grid, TensorKind::Scalar, |x, c| c[0] = (x[0] + shift + 2.0 * x[1]).sin());
            got.axpy(-1.0, &want).unwrap().max_abs()
        };
        let ratio = err(16) / err(32);
        assert!((13.0..=19.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn translation_pullback_and_constant_field_flow() {
        let grid = Grid::cubic(3, 8).unwrap();
        // constant X = (c, 0, 0) gives ψ(x) = x − c t e₁
        let c = 0.3;
        let x = TensorField::from_fn(grid, TensorKind::Vector, |_, v| v[0] = c);
        let fields: Vec<(f64, TensorField)> = (0..5).map(|i| (0.1 * i as f64, x.clone())).collect();
        let psi = diffeo_flow(grid, &fields).unwrap();
        assert_eq!(psi.len(), 3);
        let last = psi.last().unwrap();
        assert!((last.time() - 0.4).abs() < 1e-15);
        let npts = grid.len();
        for p in 0..npts {
            assert!((last.displacement()[p] + c * 0.4).abs() < 1e-14);
            assert!(last.displacement()[npts + p].abs() < 1e-15);
        }
        assert!((last.min_jacobian_det() - 1.0).abs() < 1e-13);
        // pullback of a covector by a translation is a composition
        let shift = grid.spacing(0);
        let u: Vec<f64> = (0..3 * npts).map(|i| if i < npts { shift } else { 0.0 }).collect();
        let psi = Diffeo { grid, t: 0.0, u };
        let form = TensorField::from_fn(grid, TensorKind::Antisymmetric(2), |x, v| {
            v[1] = x[0].sin();
            v[3] = -x[0].sin();
        });
        let back = psi.pullback(&form).unwrap();
        assert!(back.axpy(-1.0, &form.shifted(&[-1, 0, 0])).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn linear_map_pullback_of_metric() {
        // ψ(x) = x + ε sin(x¹) e₂ has J = [[1,0,0],[ε cos x¹,1,0],[0,0,1]]
        let grid = Grid::cubic(3, 16).unwrap();
        let npts = grid.len();
        let eps = 0.1;
        let mut u = vec![0.0; 3 * npts];
        for p in 0..npts {
            u[npts + p] = eps * grid.coords(p)[0].sin();
        }
        let psi = Diffeo { grid, t: 0.0, u };
        let g = MetricField::flat(grid);
        let back = psi.pullback(g.tensor()).unwrap();
        let mut worst: f64 = 0.0;
        for p in 0..npts {
            let cs = eps * grid.coords(p)[0].cos();
            worst = worst.max((back.at(&[0, 0], p) - (1.0 + cs * cs)).abs());
            worst = worst.max((back.at(&[0, 1], p) - cs).abs());
            worst = worst.max((back.at(&[1, 1], p) - 1.0).abs());
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn recovery_on_conformal_data_is_small() {
        let grid = Grid::cubic(3, 8).unwrap();
        let s = FlowState::perturbed_flat(grid, 9, 0.02, 1).unwrap();
        let r = diffeo_recovery(&s, 0.04, 0.01, None).unwrap();
        assert!(r.metric_gap < 1e-4 && r.h_gap < 1e-4, "{r:?}");
        assert!(diffeo_recovery(&s, 0.03, 0.01, None).is_err());
    }
}
