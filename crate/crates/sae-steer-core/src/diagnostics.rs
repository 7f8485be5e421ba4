//! Quality metrics for a trained model: reconstruction R², mean L0 of the
//! codes, dead-feature fraction, and the stable rank of the decoder
//! dictionary.
//!
//! Stable rank is `||W||_F^2 / ||W||_2^2`. The Frobenius norm is a direct
//! f64 sum; the spectral norm comes from power iteration on `W^T W` with a
//! fixed all-ones start vector, so the result is deterministic and never
//! needs a full SVD even for very large dictionaries.

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::sae::{self, InferenceMode, SaeModel};
use crate::store::{self, EmbeddingDataset};
use crate::{Error, Result};

/// Report produced by [`evaluate`] and serialized by the `diag` command.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub r2: f64,
    pub mean_l0: f64,
    pub dead_fraction: f64,
    pub stable_rank: f64,
    pub frob_norm_sq: f64,
    pub spectral_norm: f64,
}

/// Stable-rank decomposition of one matrix.
#[derive(Debug, Clone, Copy)]
pub struct StableRank {
    pub stable_rank: f64,
    pub frob_norm_sq: f64,
    pub spectral_norm: f64,
}

/// Reconstruction R²: `1 - sum ||x - x_hat||^2 / sum ||x - mean||^2`,
/// accumulated in f64. The mean must come from the same dataset (see
/// [`store::compute_stats`]); a constant dataset has no variance to explain
/// and is an error.
pub fn r2(x: ArrayView2<f32>, x_hat: ArrayView2<f32>, mean: ArrayView1<f64>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::invalid("reconstruction shape mismatch"));
    }
    if mean.len() != x.ncols() {
        return Err(Error::invalid("mean length mismatch"));
    }
    let mut rss = 0.0f64;
    let mut tss = 0.0f64;
    for (xr, hr) in x.axis_iter(Axis(0)).zip(x_hat.axis_iter(Axis(0))) {
        for ((&a, &p), &m) in xr.iter().zip(hr.iter()).zip(mean.iter()) {
            let r = a as f64 - p as f64;
            rss += r * r;
            let t = a as f64 - m;
            tss += t * t;
        }
    }
    if tss == 0.0 {
        return Err(Error::invalid("zero variance"));
    }
    Ok(1.0 - rss / tss)
}

/// Mean number of strictly nonzero entries per code row.
pub fn mean_l0(codes: ArrayView2<f32>) -> f64 {
    let n = codes.nrows();
    if n == 0 {
        return 0.0;
    }
    let nonzero = codes.iter().filter(|&&v| v != 0.0).count();
    nonzero as f64 / n as f64
}

/// Fraction of concepts whose activation count is zero. An empty count
/// vector has no concepts to be dead and reports 0.
pub fn dead_fraction(activation_counts: &[u64]) -> f64 {
    if activation_counts.is_empty() {
        return 0.0;
    }
    let dead = activation_counts.iter().filter(|&&c| c == 0).count();
    dead as f64 / activation_counts.len() as f64
}

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// Stable rank of a nonzero matrix via deterministic power iteration.
///
/// Starts from the normalized all-ones vector; each iteration maps
/// `v -> W^T (W v)` (renormalized) and tracks the Rayleigh quotient
/// `||W v||^2`, stopping at 1e-10 relative change or 10,000 iterations. If an
/// iterate lands exactly in the null space the iteration restarts from the
/// next standard basis vector with a nonzero column, which can happen at most
/// once with a nonzero matrix.
pub fn stable_rank(w: ArrayView2<f32>) -> Result<StableRank> {
    let (m, d) = w.dim();
    if m == 0 || d == 0 {
        return Err(Error::invalid("undefined stable rank: empty matrix"));
    }
    let mut frob_sq = 0.0f64;
    for &v in w.iter() {
        frob_sq += v as f64 * v as f64;
    }
    if frob_sq == 0.0 {
        return Err(Error::invalid("undefined stable rank: zero matrix"));
    }

    let mut v = vec![1.0f64 / (d as f64).sqrt(); d];
    let mut u = vec![0.0f64; m];
    let mut lambda_prev = f64::NAN;
    let mut lambda = 0.0f64;
    let mut restart_col = 0usize;

    for _ in 0..POWER_MAX_ITERS {
        // u = W v
        for (i, slot) in u.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (j, &vj) in v.iter().enumerate() {
                acc += w[[i, j]] as f64 * vj;
            }
            *slot = acc;
        }
        lambda = u.iter().map(|x| x * x).sum();

        // s = W^T u, then normalize into v.
        let mut norm_sq = 0.0f64;
        let mut s = vec![0.0f64; d];
        for (i, &ui) in u.iter().enumerate() {
            for (j, slot) in s.iter_mut().enumerate() {
                *slot += w[[i, j]] as f64 * ui;
            }
        }
        for &x in &s {
            norm_sq += x * x;
        }
        if norm_sq == 0.0 {
            // Start vector was annihilated; restart from a basis vector
            // aligned with a nonzero column.
            while restart_col < d {
                let col_sq: f64 = (0..m)
                    .map(|i| {
                        let x = w[[i, restart_col]] as f64;
                        x * x
                    })
                    .sum();
                if col_sq > 0.0 {
                    break;
                }
                restart_col += 1;
            }
            v.iter_mut().for_each(|x| *x = 0.0);
            v[restart_col.min(d - 1)] = 1.0;
            lambda_prev = f64::NAN;
            continue;
        }
        let norm = norm_sq.sqrt();
        for (slot, &x) in v.iter_mut().zip(&s) {
            *slot = x / norm;
        }

        if !lambda_prev.is_nan() && (lambda - lambda_prev).abs() <= POWER_TOL * lambda.abs() {
            break;
        }
        lambda_prev = lambda;
    }

    Ok(StableRank {
        stable_rank: frob_sq / lambda,
        frob_norm_sq: frob_sq,
        spectral_norm: lambda.sqrt(),
    })
}

/// Full diagnostic pass of a model over a dataset: encodes with the given
/// inference mode, decodes, and assembles every report field. Dead fraction
/// here counts concepts never active on this dataset.
pub fn evaluate(
    model: &SaeModel,
    dataset: &EmbeddingDataset,
    mode: InferenceMode,
) -> Result<DiagnosticsReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let stats = store::compute_stats(dataset)?;
    let codes = sae::encode_codes(model, dataset.data(), mode)?;
    let x_hat = sae::decode(model, codes.view())?;
    let r2 = r2(dataset.data(), x_hat.view(), stats.mean.view())?;

    let mut counts = vec![0u64; model.dict_size];
    for row in codes.axis_iter(Axis(0)) {
        for (c, &v) in counts.iter_mut().zip(row.iter()) {
            if v != 0.0 {
                *c += 1;
            }
        }
    }
    let sr = stable_rank(model.w_dec.view())?;
    Ok(DiagnosticsReport {
        r2,
        mean_l0: mean_l0(codes.view()),
        dead_fraction: dead_fraction(&counts),
        stable_rank: sr.stable_rank,
        frob_norm_sq: sr.frob_norm_sq,
        spectral_norm: sr.spectral_norm,
    })
}
