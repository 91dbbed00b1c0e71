//! Unilateral histogram-based activation range search.
//!
//! Activations are binned into a fixed 2048-bin histogram whose left edge is
//! the fixed lower truncation. For every prefix length `i` the search compares
//! the reference distribution (prefix with the tail mass folded into its last
//! bin) against the prefix squeezed into `uh_levels` groups and expanded back,
//! and keeps the prefix with the smallest distribution MSE. The upper clip
//! value is the right edge of the last kept bin.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::quant::ClipRange;
use crate::range::ObserverConfig;
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 2048;

/// Fixed lower truncation for SiLU activations.
pub const SILU_LOWER_BOUND: f32 = -0.2785;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationHistogram {
    domain_lower: f32,
    domain_upper: f32,
    counts: Vec<u64>,
    /// Observations below `domain_lower`; folded into bin 0 by the search.
    clamped_low: u64,
    total: u64,
}

impl ActivationHistogram {
    pub fn new(domain: ClipRange) -> Result<Self> {
        let invalid = || QuantError::InvalidDomain { lower: domain.lower, upper: domain.upper };
        domain.validate().map_err(|_| invalid())?;
        if !(bin_width(domain.lower, domain.upper) > 0.0) {
            return Err(invalid());
        }
        Ok(Self {
            domain_lower: domain.lower,
            domain_upper: domain.upper,
            counts: vec![0; HISTOGRAM_BINS],
            clamped_low: 0,
            total: 0,
        })
    }

    /// Rebuilds a histogram from raw counts, as found in an inspection dump.
    pub fn from_counts(domain: ClipRange, counts: Vec<u64>, clamped_low: u64) -> Result<Self> {
        let mut h = Self::new(domain)?;
        if counts.len() != HISTOGRAM_BINS {
            return Err(QuantError::ShapeMismatch(format!(
                "histogram needs {HISTOGRAM_BINS} bins, got {}",
                counts.len()
            )));
        }
        h.total = counts.iter().sum::<u64>() + clamped_low;
        h.counts = counts;
        h.clamped_low = clamped_low;
        Ok(h)
    }

    pub fn domain(&self) -> ClipRange {
        ClipRange { lower: self.domain_lower, upper: self.domain_upper }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn clamped_low(&self) -> u64 {
        self.clamped_low
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bin_width(&self) -> f64 {
        bin_width(self.domain_lower, self.domain_upper)
    }

    pub fn left_edge(&self, bin: usize) -> f64 {
        self.domain_lower as f64 + bin as f64 * self.bin_width()
    }

    pub fn bin_index(&self, v: f32) -> Option<usize> {
        let lower = self.domain_lower as f64;
        let v = v as f64;
        if v < lower {
            return None;
        }
        let idx = ((v - lower) / self.bin_width()).floor();
        Some((idx as usize).min(HISTOGRAM_BINS - 1))
    }

    pub fn observe(&mut self, values: &[f32]) {
        for &v in values {
            match self.bin_index(v) {
                Some(b) => self.counts[b] += 1,
                None => self.clamped_low += 1,
            }
        }
        self.total += values.len() as u64;
    }

    /// Bin-wise addition of a histogram accumulated over the same domain.
    pub fn merge(&mut self, other: &ActivationHistogram) -> Result<()> {
        if self.domain_lower != other.domain_lower || self.domain_upper != other.domain_upper {
            return Err(QuantError::InvalidDomain { lower: other.domain_lower, upper: other.domain_upper });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.clamped_low += other.clamped_low;
        self.total += other.total;
        Ok(())
    }

    /// Counts with the below-domain observations folded into bin 0.
    pub fn effective_counts(&self) -> Vec<u64> {
        let mut c = self.counts.clone();
        c[0] += self.clamped_low;
        c
    }
}

fn bin_width(lower: f32, upper: f32) -> f64 {
    (upper as f64 - lower as f64) / HISTOGRAM_BINS as f64
}

pub fn build_histogram<'a, I>(samples: I, domain: ClipRange) -> Result<ActivationHistogram>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut h = ActivationHistogram::new(domain)?;
    let mut seen = false;
    for t in samples {
        h.observe(t.data());
        seen = true;
    }
    if !seen {
        return Err(QuantError::EmptyCalibrationSet);
    }
    Ok(h)
}

/// Per-candidate errors and the chosen truncation of one search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UhSearchTrace {
    /// Prefix length of `mse_by_index[0]`.
    pub start_index: usize,
    /// Distribution MSE per candidate prefix; `null` in JSON stands for an
    /// unusable (empty) prefix.
    #[serde(with = "inf_as_null")]
    pub mse_by_index: Vec<f64>,
    pub best_index: usize,
    pub best_upper: f32,
}

impl UhSearchTrace {
    pub fn mse_at(&self, i: usize) -> f64 {
        self.mse_by_index[i - self.start_index]
    }
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| x.is_finite().then_some(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

/// Group boundaries `[floor(j*i/L), floor((j+1)*i/L))` for `j in 0..L`.
pub fn merge_bounds(prefix_len: usize, levels: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..levels).map(move |j| (j * prefix_len / levels, (j + 1) * prefix_len / levels))
}

/// Groups of one merge step: `(start, end, mass, nonzero_bins)`.
pub fn merge_groups(counts: &[u64], levels: usize) -> Vec<(usize, usize, u64, u64)> {
    merge_bounds(counts.len(), levels)
        .map(|(a, b)| {
            let slice = &counts[a..b];
            (a, b, slice.iter().sum(), slice.iter().filter(|&&c| c > 0).count() as u64)
        })
        .collect()
}

/// Expands merged groups back to one value per bin: each group's mass is
/// shared equally by the bins that were nonzero before merging.
pub fn expand_groups(counts: &[u64], groups: &[(usize, usize, u64, u64)]) -> Vec<f64> {
    let mut out = vec![0.0; counts.len()];
    for &(a, b, mass, nnz) in groups {
        if nnz == 0 {
            continue;
        }
        let share = mass as f64 / nnz as f64;
        for j in a..b {
            if counts[j] > 0 {
                out[j] = share;
            }
        }
    }
    out
}

pub fn uh_search(hist: &ActivationHistogram, cfg: &ObserverConfig) -> Result<UhSearchTrace> {
    cfg.validate()?;
    if hist.total == 0 {
        return Err(QuantError::DegenerateHistogram);
    }
    let counts = hist.effective_counts();
    let levels = cfg.uh_levels;
    let start = cfg.uh_start_index;
    let total = hist.total as f64;

    let mut prefix = vec![0u64; HISTOGRAM_BINS + 1];
    let mut nonzero = vec![0u64; HISTOGRAM_BINS + 1];
    for (j, &c) in counts.iter().enumerate() {
        prefix[j + 1] = prefix[j] + c;
        nonzero[j + 1] = nonzero[j] + u64::from(c > 0);
    }

    let mut mse_by_index = Vec::with_capacity(HISTOGRAM_BINS - start);
    for i in start..HISTOGRAM_BINS {
        let kept = prefix[i];
        if kept == 0 {
            mse_by_index.push(f64::INFINITY);
            continue;
        }
        let outliers = hist.total - kept;
        let kept_f = kept as f64;
        let mut sum_sq = 0.0f64;
        for (a, b) in merge_bounds(i, levels) {
            let mass = prefix[b] - prefix[a];
            let nnz = nonzero[b] - nonzero[a];
            let q_bin = if nnz == 0 { 0.0 } else { mass as f64 / nnz as f64 / kept_f };
            for j in a..b {
                let c = if j == i - 1 { counts[j] + outliers } else { counts[j] };
                let p = c as f64 / total;
                let q = if counts[j] > 0 { q_bin } else { 0.0 };
                let d = p - q;
                sum_sq += d * d;
            }
        }
        mse_by_index.push(sum_sq / i as f64);
    }

    let (offset, _) = mse_by_index
        .iter()
        .enumerate()
        .fold((0usize, f64::INFINITY), |(bi, bv), (k, &v)| if v < bv { (k, v) } else { (bi, bv) });
    let best_index = start + offset;
    let best_upper = (hist.domain_lower as f64 + best_index as f64 * hist.bin_width()) as f32;
    Ok(UhSearchTrace { start_index: start, mse_by_index, best_index, best_upper })
}

/// Range chosen by the unilateral search, with its trace.
#[derive(Debug, Clone, PartialEq)]
pub struct UhObservation {
    pub range: ClipRange,
    pub trace: UhSearchTrace,
    pub histogram: ActivationHistogram,
}

pub fn observe_uh_traced<'a, I>(samples: I, cfg: &ObserverConfig, observed_max: f32) -> Result<UhObservation>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let domain = ClipRange { lower: cfg.uh_fixed_lower, upper: observed_max };
    let histogram = build_histogram(samples, domain)?;
    let trace = uh_search(&histogram, cfg)?;
    let range = ClipRange::new(cfg.uh_fixed_lower, trace.best_upper)?;
    Ok(UhObservation { range, trace, histogram })
}

/// `(uh_fixed_lower, searched upper)` over the histogram of `samples`
/// spanning `(uh_fixed_lower, observed_max)`.
pub fn observe_uh<'a, I>(samples: I, cfg: &ObserverConfig, observed_max: f32) -> Result<ClipRange>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    observe_uh_traced(samples, cfg, observed_max).map(|o| o.range)
}

pub fn silu_f64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Location and value of the global minimum of `x * sigmoid(x)`.
pub fn silu_minimum() -> (f64, f64) {
    const LO: f64 = -10.0;
    const STEPS: usize = 100_000;
    let step = -LO / STEPS as f64;
    let best = (0..=STEPS)
        .map(|k| LO + k as f64 * step)
        .min_by(|a, b| silu_f64(*a).total_cmp(&silu_f64(*b)))
        .expect("non-empty scan");

    // golden-section refinement on the bracketing cells
    let (mut a, mut b) = (best - step, best + step);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    while (b - a).abs() > 1e-12 {
        if silu_f64(c) < silu_f64(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - inv_phi * (b - a);
        d = a + inv_phi * (b - a);
    }
    let x = (a + b) / 2.0;
    (x, silu_f64(x))
}

pub fn silu_min() -> f64 {
    silu_minimum().1
}
