//! Seeded low-frequency perturbations.
//!
//! Each independent component is a trigonometric polynomial
//! Σ_k a_k cos(k·x) + b_k sin(k·x) over nonzero integer wave vectors with
//! max_a |k_a| ≤ cutoff (one representative of each ±k pair), coefficients
//! drawn uniformly from [−1, 1] by ChaCha8 seeded with `seed_from_u64`.
//! The field is then rescaled so its sup-norm equals the amplitude.
//! Symmetric and antisymmetric families use separate ChaCha streams, so the
//! same seed gives independent h and β.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lattice::{Grid, TensorField, TensorKind};

fn wave_vectors(dims: usize, cutoff: usize) -> Vec<[i64; 4]> {
    let c = cutoff as i64;
    let side = 2 * c + 1;
    let total = side.pow(dims as u32);
    let mut out = Vec::new();
    for m in 0..total {
        let mut k = [0i64; 4];
        let mut r = m;
        for a in (0..dims).rev() {
            k[a] = r % side - c;
            r /= side;
        }
        // keep the representative whose first nonzero entry is positive
        match k[..dims].iter().find(|&&v| v != 0) {
            Some(&v) if v > 0 => out.push(k),
            _ => {}
        }
    }
    out
}

fn trig_poly(grid: &Grid, rng: &mut ChaCha8Rng, waves: &[[i64; 4]], out: &mut [f64]) {
    let n = grid.dims();
    for k in waves {
        let a: f64 = rng.random_range(-1.0..=1.0);
        let b: f64 = rng.random_range(-1.0..=1.0);
        for (p, v) in out.iter_mut().enumerate() {
            let x = grid.coords(p);
            let phase: f64 = (0..n).map(|d| k[d] as f64 * TAU / grid.period(d) * x[d]).sum();
            *v += a * phase.cos() + b * phase.sin();
        }
    }
}

fn generate(grid: Grid, seed: u64, stream: u64, amplitude: f64, cutoff: usize, antisym: bool) -> TensorField {
    let n = grid.dims();
    let npts = grid.len();
    let kind = if antisym { TensorKind::Antisymmetric(2) } else { TensorKind::Symmetric2 };
    let mut data = vec![0.0; n * n * npts];
    if amplitude > 0.0 && cutoff > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let waves = wave_vectors(n, cutoff);
        for i in 0..n {
            for j in i..n {
                if antisym && i == j {
                    continue;
                }
                let o = (i * n + j) * npts;
                trig_poly(&grid, &mut rng, &waves, &mut data[o..o + npts]);
                let sign = if antisym { -1.0 } else { 1.0 };
                for p in 0..npts {
                    data[(j * n + i) * npts + p] = sign * data[o + p];
                }
            }
        }
        let sup = crate::lattice::max_abs(&data);
        if sup > 0.0 {
            let s = amplitude / sup;
            data.iter_mut().for_each(|v| *v *= s);
        }
    }
    TensorField::from_vec(grid, kind, data)
}

/// Random symmetric 2-tensor with sup-norm `amplitude`.
pub fn perturbation_symmetric(grid: Grid, seed: u64, amplitude: f64, cutoff: usize) -> TensorField {
    generate(grid, seed, 0, amplitude, cutoff, false)
}

/// Random 2-form with sup-norm `amplitude`.
pub fn perturbation_antisymmetric(grid: Grid, seed: u64, amplitude: f64, cutoff: usize) -> TensorField {
    generate(grid, seed, 1, amplitude, cutoff, true)
}
