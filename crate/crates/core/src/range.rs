//! Clipping-range observers: MinMax, Percentile and MSE grid search.
//!
//! The histogram-based unilateral search lives in [`crate::histogram`].

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::histogram::{HISTOGRAM_BINS, SILU_LOWER_BOUND};
use crate::quant::{fake_quantize_slice, make_qparams, mse, ClipRange};

/// Observers evaluate at most this many elements when scoring candidates.
pub const MSE_SUBSAMPLE_LIMIT: usize = 1 << 16;
const MSE_SUBSAMPLE_SEED: u64 = 0x5e_ed0f_c11b;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[serde(rename = "minmax")]
    MinMax,
    Percentile,
    Mse,
    Uh,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::MinMax, Scheme::Percentile, Scheme::Mse, Scheme::Uh];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::MinMax => "minmax",
            Scheme::Percentile => "percentile",
            Scheme::Mse => "mse",
            Scheme::Uh => "uh",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| QuantError::InvalidConfig(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverConfig {
    pub scheme: Scheme,
    /// Central mass kept by the percentile observer.
    pub percentile_keep: f64,
    pub mse_grid_steps: usize,
    /// Fixed lower truncation of the unilateral histogram search.
    pub uh_fixed_lower: f32,
    /// Number of merged levels the candidate distribution is squeezed into.
    pub uh_levels: usize,
    /// First histogram prefix length considered by the search.
    pub uh_start_index: usize,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Uh,
            percentile_keep: 0.9999,
            mse_grid_steps: 100,
            uh_fixed_lower: SILU_LOWER_BOUND,
            uh_levels: 128,
            uh_start_index: 128,
        }
    }
}

impl ObserverConfig {
    pub fn with_scheme(scheme: Scheme) -> Self {
        Self { scheme, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QuantError::InvalidConfig(m));
        if !(self.percentile_keep > 0.0 && self.percentile_keep <= 1.0) {
            return Err(QuantError::InvalidKeep(self.percentile_keep));
        }
        if self.mse_grid_steps < 2 {
            return Err(QuantError::InvalidGridSteps(self.mse_grid_steps));
        }
        if !self.uh_fixed_lower.is_finite() {
            return bad("uh_fixed_lower must be finite".into());
        }
        if self.uh_levels == 0 || self.uh_levels > self.uh_start_index {
            return bad(format!(
                "uh_levels ({}) must be in 1..=uh_start_index ({})",
                self.uh_levels, self.uh_start_index
            ));
        }
        if self.uh_start_index >= HISTOGRAM_BINS {
            return bad(format!("uh_start_index must be below {HISTOGRAM_BINS}"));
        }
        Ok(())
    }
}

/// Widening applied when every observed value is identical.
pub fn degenerate_margin(v: f32) -> f32 {
    v.abs().max(1.0) * (2.0f32).powi(-20)
}

pub fn observe_minmax(x: &[f32]) -> Result<ClipRange> {
    let (&first, rest) = x.split_first().ok_or(QuantError::EmptyTensor)?;
    let (lo, hi) = rest.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    widen_if_degenerate(lo, hi)
}

fn widen_if_degenerate(lo: f32, hi: f32) -> Result<ClipRange> {
    if lo == hi {
        let d = degenerate_margin(lo);
        ClipRange::new(lo - d, hi + d)
    } else {
        ClipRange::new(lo, hi)
    }
}

/// Nearest-rank index for quantile `q` of `n` sorted values.
fn quantile_index(q: f64, n: usize) -> usize {
    ((q * (n - 1) as f64).round_ties_even() as usize).min(n - 1)
}

/// Empirical quantiles at `(1 - keep) / 2` and `1 - (1 - keep) / 2`.
pub fn observe_percentile(x: &[f32], keep: f64) -> Result<ClipRange> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(QuantError::InvalidKeep(keep));
    }
    if x.is_empty() {
        return Err(QuantError::EmptyTensor);
    }
    let mut sorted = x.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let tail = (1.0 - keep) / 2.0;
    let lo = sorted[quantile_index(tail, sorted.len())];
    let hi = sorted[quantile_index(1.0 - tail, sorted.len())];
    widen_if_degenerate(lo, hi)
}

/// The joint shrink candidates `(a * min, a * max)` for
/// `a = 1/steps, 2/steps, ..., 1`, smallest `a` first.
pub fn mse_candidates(x: &[f32], grid_steps: usize) -> Result<Vec<ClipRange>> {
    if grid_steps < 2 {
        return Err(QuantError::InvalidGridSteps(grid_steps));
    }
    let base = observe_minmax(x)?;
    Ok((1..=grid_steps)
        .map(|k| {
            let alpha = k as f64 / grid_steps as f64;
            ClipRange {
                lower: (base.lower as f64 * alpha) as f32,
                upper: (base.upper as f64 * alpha) as f32,
            }
        })
        .collect())
}

/// Deterministic stride subsample used to bound candidate scoring cost.
pub fn mse_eval_subsample(x: &[f32]) -> Cow<'_, [f32]> {
    if x.len() <= MSE_SUBSAMPLE_LIMIT {
        return Cow::Borrowed(x);
    }
    let stride = x.len().div_ceil(MSE_SUBSAMPLE_LIMIT);
    let offset = ChaCha8Rng::seed_from_u64(MSE_SUBSAMPLE_SEED).random_range(0..stride);
    Cow::Owned(x.iter().skip(offset).step_by(stride).copied().collect())
}

/// Grid search for the range minimizing fake-quantization MSE. Ties go to
/// the wider candidate.
pub fn observe_mse(
    x: &[f32],
    bits: u32,
    signed: bool,
    symmetric: bool,
    grid_steps: usize,
) -> Result<ClipRange> {
    let candidates = mse_candidates(x, grid_steps)?;
    let eval = mse_eval_subsample(x);
    let mut best: Option<(f64, ClipRange)> = None;
    for cand in candidates.into_iter().rev() {
        let qp = match make_qparams(cand, bits, signed, symmetric) {
            Ok(qp) => qp,
            // Heavily shrunk candidates of a tiny range can collapse.
            Err(QuantError::DegenerateRange { .. } | QuantError::NonPositiveRange { .. }) => continue,
            Err(e) => return Err(e),
        };
        let err = mse(&eval, &fake_quantize_slice(&eval, &qp));
        if best.is_none_or(|(b, _)| err < b) {
            best = Some((err, cand));
        }
    }
    best.map(|(_, r)| r).ok_or(QuantError::EmptyTensor)
}
