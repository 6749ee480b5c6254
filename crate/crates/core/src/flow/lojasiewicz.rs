//! Log-log estimation of the exponent in ‖∇μ‖ ≥ |λ|^{1−θ}.

use super::{FlowError, Result, Sample};

/// Below this |λ| the eigenvalue is at round-off level and carries no slope
/// information.
pub const LAMBDA_FLOOR: f64 = 1e-13;

pub const MIN_FIT_SAMPLES: usize = 10;

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    /// Use only the trailing fraction of the (time-ordered) samples.
    pub window_fraction: f64,
    pub lambda_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { window_fraction: 1.0, lambda_floor: LAMBDA_FLOOR }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct LojasiewiczFit {
    pub theta_hat: f64,
    /// Interpolation exponent, when C⁰-proxy data were supplied.
    pub eta: Option<f64>,
    /// Fitted constant C in C⁰ ≤ C·L²^{1−η}.
    pub eta_constant: Option<f64>,
    /// θ̂ − η + θ̂η.
    pub sigma_hat: Option<f64>,
    pub window: (f64, f64),
    pub samples_used: usize,
    /// Samples in the window dropped for λ ≥ 0 or |λ| below the floor.
    pub excluded: usize,
    /// RMS residual of the log-log fit.
    pub residual: f64,
    /// Whether ‖∇μ‖ ≥ |λ|^{1−θ̂} at every used sample.
    pub inequality_holds: bool,
    /// Largest θ ≤ ½ for which the inequality holds at every used sample.
    pub theta_max: Option<f64>,
}

/// Least squares y ≈ a + s x; returns (a, s, rms residual).
fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let s = sxy / sxx;
    let a = my - s * mx;
    let rms = (x.iter().zip(y).map(|(u, v)| (v - a - s * u).powi(2)).sum::<f64>() / n).sqrt();
    (a, s, rms)
}

/// Fit from raw series: time, λ, ‖∇μ‖, and optionally (‖∂_t‖_{C⁰}, ‖∂_t‖_{L²}).
pub fn fit_series(
    t: &[f64],
    lambda: &[f64],
    grad_norm: &[f64],
    interpolation: Option<(&[f64], &[f64])>,
    opts: &FitOptions,
) -> Result<LojasiewiczFit> {
    let n = t.len();
    if lambda.len() != n || grad_norm.len() != n {
        return Err(FlowError::Fit("series lengths differ".into()));
    }
    if !(opts.window_fraction > 0.0 && opts.window_fraction <= 1.0) {
        return Err(FlowError::Fit("window fraction must lie in (0, 1]".into()));
    }
    let start = n - ((n as f64 * opts.window_fraction).ceil() as usize).min(n);
    let window: Vec<usize> = (start..n).collect();
    let used: Vec<usize> = window
        .iter()
        .copied()
        .filter(|&i| lambda[i] < 0.0 && -lambda[i] >= opts.lambda_floor && lambda[i] > -1.0 && grad_norm[i] > 0.0)
        .collect();
    if used.len() < MIN_FIT_SAMPLES {
        return Err(FlowError::Fit(format!(
            "window too short: {} usable samples of {} (need {MIN_FIT_SAMPLES})",
            used.len(),
            window.len()
        )));
    }
    let x: Vec<f64> = used.iter().map(|&i| (-lambda[i]).ln()).collect();
    let y: Vec<f64> = used.iter().map(|&i| grad_norm[i].ln()).collect();
    let (_, slope, residual) = line_fit(&x, &y);
    let theta_hat = 1.0 - slope;
    // y ≥ (1−θ)x with x < 0  ⇔  1−θ ≥ y/x
    let need = used.iter().zip(x.iter().zip(&y)).map(|(_, (x, y))| y / x).fold(f64::NEG_INFINITY, f64::max);
    // a fitted slope carries round-off, so exact equality gets a few ulps
    let inequality_holds = x.iter().zip(&y).all(|(x, y)| *y >= (1.0 - theta_hat) * x - 1e-12 * x.abs());
    let theta_max = {
        let th = (1.0 - need).min(0.5);
        (th > 0.0).then_some(th)
    };
    let (eta, eta_constant) = match interpolation {
        Some((c0, l2)) => {
            if c0.len() != n || l2.len() != n {
                return Err(FlowError::Fit("interpolation series lengths differ".into()));
            }
            let pts: Vec<usize> = used.iter().copied().filter(|&i| c0[i] > 0.0 && l2[i] > 0.0).collect();
            if pts.len() >= 2 {
                let lx: Vec<f64> = pts.iter().map(|&i| l2[i].ln()).collect();
                let ly: Vec<f64> = pts.iter().map(|&i| c0[i].ln()).collect();
                let (a, s, _) = line_fit(&lx, &ly);
                (Some(1.0 - s), Some(a.exp()))
            } else {
                (None, None)
            }
        }
        None => (None, None),
    };
    Ok(LojasiewiczFit {
        theta_hat,
        eta,
        eta_constant,
        sigma_hat: eta.map(|e| theta_hat - e + theta_hat * e),
        window: (t[start], t[n - 1]),
        samples_used: used.len(),
        excluded: window.len() - used.len(),
        residual,
        inequality_holds,
        theta_max,
    })
}

/// Fit on a mu_gradient trajectory, where rhs_l2 = ‖∇μ‖.
pub fn lojasiewicz_estimate(samples: &[Sample], opts: &FitOptions) -> Result<LojasiewiczFit> {
    let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let lambda: Vec<f64> = samples.iter().map(|s| s.lambda).collect();
    let grad: Vec<f64> = samples.iter().map(|s| s.rhs_l2).collect();
    let c0: Vec<f64> = samples.iter().map(|s| s.c0_proxy).collect();
    fit_series(&t, &lambda, &grad, Some((&c0, &grad)), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(power: f64, scale: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let t: Vec<f64> = (0..40).map(|i| i as f64 * 0.5).collect();
        let lambda: Vec<f64> = t.iter().map(|t| -0.1 * (-t).exp()).collect();
        let grad = lambda.iter().map(|l| scale * (-l).powf(power)).collect();
        (t, lambda, grad)
    }

    #[test]
    fn planted_exponents_are_recovered() {
        for (power, theta) in [(0.5, 0.5), (0.75, 0.25)] {
            let (t, l, g) = synthetic(power, 1.0);
            let fit = fit_series(&t, &l, &g, None, &FitOptions::default()).unwrap();
            assert!((fit.theta_hat - theta).abs() < 1e-6, "{}", fit.theta_hat);
            assert!(fit.residual < 1e-12);
            assert!(fit.inequality_holds);
            assert_eq!(fit.samples_used, 40);
        }
    }

    #[test]
    fn theta_max_is_the_tight_exponent() {
        // ‖∇μ‖ = 2|λ|^{0.6}: holds for 1−θ ≥ 0.6 + ln2/ln|λ|
        let (t, l, g) = synthetic(0.6, 2.0);
        let fit = fit_series(&t, &l, &g, None, &FitOptions::default()).unwrap();
        assert!((fit.theta_hat - 0.4).abs() < 1e-9);
        let th = fit.theta_max.unwrap();
        for (li, gi) in l.iter().zip(&g) {
            assert!(*gi >= (-li).powf(1.0 - th) * (1.0 - 1e-12));
        }
        // a constant below one breaks the inequality at θ̂
        let (t, l, g) = synthetic(0.5, 0.9);
        let fit = fit_series(&t, &l, &g, None, &FitOptions::default()).unwrap();
        assert!(!fit.inequality_holds);
        assert!(fit.theta_max.unwrap() < 0.5);
    }

    #[test]
    fn nonnegative_and_floor_samples_are_excluded() {
        let (t, mut l, g) = synthetic(0.5, 1.0);
        l[3] = 0.0;
        l[4] = 1e-3;
        l[5] = -1e-20;
        let fit = fit_series(&t, &l, &g, None, &FitOptions::default()).unwrap();
        assert_eq!(fit.excluded, 3);
        assert!((fit.theta_hat - 0.5).abs() < 1e-6);
        let short = fit_series(&t[..9], &l[..9], &g[..9], None, &FitOptions::default());
        assert!(matches!(short, Err(FlowError::Fit(_))));
    }

    #[test]
    fn interpolation_exponent_and_sigma() {
        let (t, l, g) = synthetic(0.5, 1.0);
        let l2 = g.clone();
        let c0: Vec<f64> = l2.iter().map(|v| 3.0 * v.powf(0.8)).collect();
        let fit = fit_series(&t, &l, &g, Some((&c0, &l2)), &FitOptions::default()).unwrap();
        let eta = fit.eta.unwrap();
        assert!((eta - 0.2).abs() < 1e-9);
        assert!((fit.eta_constant.unwrap() - 3.0).abs() < 1e-9);
        assert!((fit.sigma_hat.unwrap() - (0.5 - 0.2 + 0.1)).abs() < 1e-9);
    }

    #[test]
    fn window_fraction_uses_the_tail() {
        let (t, l, g) = synthetic(0.5, 1.0);
        let fit = fit_series(&t, &l, &g, None, &FitOptions { window_fraction: 0.5, ..Default::default() }).unwrap();
        assert_eq!(fit.samples_used, 20);
        assert_eq!(fit.window, (t[20], t[39]));
    }
}
