//! Reproducible scalar Wiener paths and Monte Carlo statistics.
//!
//! Increments come from a counter-based generator: ChaCha20 keyed by the
//! experiment seed, with the path index selecting the stream and the step
//! index selecting the position inside it (two 32-bit words per increment).
//! Any increment can therefore be regenerated in isolation, and paths are
//! independent of how work is scheduled across threads.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::Serialize;

use crate::error::{Result, SacError};

/// Inverse of the standard normal CDF (Wichura's AS 241, PPND16).
///
/// Rational approximations in three regions; relative accuracy about 1e-16,
/// far inside the 1e-9 absolute error budget.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.3871328727963666080e0,
        1.3314166789178437745e+2,
        1.9715909503065514427e+3,
        1.3731693765509461125e+4,
        4.5921953931549871457e+4,
        6.7265770927008700853e+4,
        3.3430575583588128105e+4,
        2.5090809287301226727e+3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.2313330701600911252e+1,
        6.8718700749205790830e+2,
        5.3941960214247511077e+3,
        2.1213794301586595867e+4,
        3.9307895800092710610e+4,
        2.8729085735721942674e+4,
        5.2264952788528545610e+3,
    ];
    const C: [f64; 8] = [
        1.42343711074968357734e0,
        4.63033784615654529590e0,
        5.76949722146069140550e0,
        3.64784832476320460504e0,
        1.27045825245236838258e0,
        2.41780725177450611770e-1,
        2.27238449892691845833e-2,
        7.74545014278341407640e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.05319162663775882187e0,
        1.67638483018380384940e0,
        6.89767334985100004550e-1,
        1.48103976427480074590e-1,
        1.51986665636164571966e-2,
        5.47593808499534494600e-4,
        1.05075007164441684324e-9,
    ];
    const E: [f64; 8] = [
        6.65790464350110377720e0,
        5.46378491116411436990e0,
        1.78482653991729133580e0,
        2.96560571828504891230e-1,
        2.65321895265761230930e-2,
        1.24266094738807843860e-3,
        2.71155556874348757815e-5,
        2.01033439929228813265e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.99832206555887937690e-1,
        1.36929880922735805310e-1,
        1.48753612908506148525e-2,
        7.86869131145613259100e-4,
        1.84631831751005468180e-5,
        1.42151175831644588870e-7,
        2.04426310338993978564e-15,
    ];
    fn poly(c: &[f64; 8], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Maps a 64-bit word to the open interval (0, 1).
#[inline]
pub fn open_unit(word: u64) -> f64 {
    ((word >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Generator of one path: the experiment seed selects the key, the path
/// index the stream.
pub fn stream_rng(seed: u64, path_index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Standard normal variate for `(seed, path_index, step)`.
pub fn standard_normal_at(seed: u64, path_index: u64, step: u64) -> f64 {
    let mut rng = stream_rng(seed, path_index);
    rng.set_word_pos(2 * step as u128);
    inverse_normal_cdf(open_unit(rng.next_u64()))
}

/// Brownian increments of one path on the finest temporal grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    pub seed: u64,
    pub path_index: u64,
    pub horizon: f64,
    pub increments: Vec<f64>,
}

impl WienerPath {
    pub fn j_fine(&self) -> usize {
        self.increments.len()
    }

    pub fn k_fine(&self) -> f64 {
        self.horizon / self.increments.len() as f64
    }

    /// Increments on the grid with `j_coarse` steps.
    pub fn at_level(&self, j_coarse: usize) -> Result<Vec<f64>> {
        if j_coarse == 0 || self.j_fine() % j_coarse != 0 {
            return Err(SacError::Config(format!(
                "level J={j_coarse} does not divide J_fine={}",
                self.j_fine()
            )));
        }
        coarsen(&self.increments, self.j_fine() / j_coarse)
    }
}

/// Draws the path `path_index` of experiment `seed`: `j_fine` increments,
/// each `N(0, horizon / j_fine)`.
pub fn sample_path(seed: u64, path_index: u64, horizon: f64, j_fine: usize) -> Result<WienerPath> {
    if j_fine == 0 {
        return Err(SacError::Config("j_fine must be at least 1".into()));
    }
    if !(horizon > 0.0) {
        return Err(SacError::Config(format!("T must be positive (got {horizon})")));
    }
    let sd = (horizon / j_fine as f64).sqrt();
    let mut rng = stream_rng(seed, path_index);
    let increments = (0..j_fine)
        .map(|_| sd * inverse_normal_cdf(open_unit(rng.next_u64())))
        .collect();
    Ok(WienerPath {
        seed,
        path_index,
        horizon,
        increments,
    })
}

/// Sums blocks of `factor` consecutive increments. `factor` must be a power
/// of two; blocks are summed by repeated pairwise halving so that
/// coarsening by `a` then `b` equals coarsening by `ab` bit for bit.
pub fn coarsen(increments: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(SacError::Config(format!(
            "coarsening factor {factor} is not a power of two"
        )));
    }
    if increments.len() % factor != 0 {
        return Err(SacError::Config(format!(
            "coarsening factor {factor} does not divide {} increments",
            increments.len()
        )));
    }
    let mut current = increments.to_vec();
    let mut f = factor;
    while f > 1 {
        current = current.chunks_exact(2).map(|p| p[0] + p[1]).collect();
        f /= 2;
    }
    Ok(current)
}

/// Total of a path summed in the same tree order as [`coarsen`]: pairwise
/// halving while the length is even, then left to right.
pub fn path_total(increments: &[f64]) -> f64 {
    let mut current = increments.to_vec();
    while current.len() > 1 && current.len() % 2 == 0 {
        current = current.chunks_exact(2).map(|p| p[0] + p[1]).collect();
    }
    current.iter().fold(0.0, |acc, x| acc + x)
}

/// Summary statistics of a Monte Carlo sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McStats {
    pub n_samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub standard_error: f64,
    pub confidence_interval_95: [f64; 2],
}

/// Welford accumulator; partial accumulators merge with Chan's formula.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct McAccumulator {
    n: usize,
    mean: f64,
    m2: f64,
}

/// Two-sided 95% normal quantile.
const Z_95: f64 = 1.959_963_984_540_054;

impl McAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &McAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> Result<McStats> {
        if self.n < 2 {
            return Err(SacError::InsufficientData(format!(
                "need at least 2 samples, got {}",
                self.n
            )));
        }
        let variance = self.m2 / (self.n - 1) as f64;
        let standard_error = (variance / self.n as f64).sqrt();
        Ok(McStats {
            n_samples: self.n,
            mean: self.mean,
            variance,
            standard_error,
            confidence_interval_95: [
                self.mean - Z_95 * standard_error,
                self.mean + Z_95 * standard_error,
            ],
        })
    }
}

pub fn mc_accumulate(samples: impl IntoIterator<Item = f64>) -> Result<McStats> {
    let mut acc = McAccumulator::new();
    for x in samples {
        acc.push(x);
    }
    acc.finish()
}
