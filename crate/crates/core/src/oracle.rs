//! Slow, obvious reference implementations used to cross-check the main code
//! paths. Nothing here calls into the quantizer, the histogram search or the
//! executor kernels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::histogram::ActivationHistogram;
use crate::quant::ClipRange;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionKind {
    /// SiLU applied to Gaussian draws: dense just above -0.2785, thin right tail.
    SiluGaussian { mu: f64, sigma: f64 },
    Gaussian { mu: f64, sigma: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Student-t with `df` degrees of freedom.
    LongTail { df: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDistribution {
    pub kind: DistributionKind,
    pub count: usize,
    pub seed: u64,
}

impl SyntheticDistribution {
    pub fn new(kind: DistributionKind, count: usize, seed: u64) -> Self {
        Self { kind, count, seed }
    }

    pub fn generate(&self) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.count;
        match self.kind {
            DistributionKind::SiluGaussian { mu, sigma } => {
                let d = Normal::new(mu, sigma).expect("valid sigma");
                (0..n)
                    .map(|_| {
                        let x: f64 = d.sample(&mut rng);
                        (x / (1.0 + (-x).exp())) as f32
                    })
                    .collect()
            }
            DistributionKind::Gaussian { mu, sigma } => {
                let d = Normal::new(mu, sigma).expect("valid sigma");
                (0..n).map(|_| d.sample(&mut rng) as f32).collect()
            }
            DistributionKind::Uniform { lo, hi } => {
                let d = Uniform::new(lo, hi).expect("lo < hi");
                (0..n).map(|_| d.sample(&mut rng) as f32).collect()
            }
            DistributionKind::LongTail { df } => {
                let d = StudentT::new(df).expect("df > 0");
                (0..n).map(|_| d.sample(&mut rng) as f32).collect()
            }
        }
    }
}

/// Literal transcription of the unilateral histogram search: returns the
/// prefix length with the smallest distribution MSE (earliest on ties).
pub fn oracle_uh(hist: &ActivationHistogram, levels: usize, start: usize) -> Result<usize> {
    let mut h: Vec<f64> = hist.counts().iter().map(|&c| c as f64).collect();
    h[0] += hist.clamped_low() as f64;
    if h.iter().sum::<f64>() == 0.0 {
        return Err(QuantError::DegenerateHistogram);
    }
    let bins = h.len();

    let mut best_i = start;
    let mut best_mse = f64::INFINITY;
    for i in start..bins {
        // reference distribution with the tail folded into the last kept bin
        let mut p: Vec<f64> = h[0..i].to_vec();
        let mut outliers = 0.0;
        for v in &h[i..bins] {
            outliers += v;
        }
        p[i - 1] += outliers;
        let mut p_sum = 0.0;
        for v in &p {
            p_sum += v;
        }
        for v in p.iter_mut() {
            *v /= p_sum;
        }

        // squeeze into `levels` groups, then spread back over nonzero bins
        let mut c = vec![0.0f64; i];
        for j in 0..levels {
            let a = j * i / levels;
            let b = (j + 1) * i / levels;
            let mut group = 0.0;
            let mut nonzero = 0usize;
            for k in a..b {
                group += h[k];
                if h[k] != 0.0 {
                    nonzero += 1;
                }
            }
            for k in a..b {
                if h[k] != 0.0 {
                    c[k] = group / nonzero as f64;
                }
            }
        }
        let mut c_sum = 0.0;
        for v in &c {
            c_sum += v;
        }
        let mse = if c_sum == 0.0 {
            f64::INFINITY
        } else {
            let mut acc = 0.0;
            for k in 0..i {
                let d = p[k] - c[k] / c_sum;
                acc += d * d;
            }
            acc / i as f64
        };
        if mse < best_mse {
            best_mse = mse;
            best_i = i;
        }
    }
    Ok(best_i)
}

fn round_half_even(v: f64) -> f64 {
    let r = v.round();
    if (v - v.trunc()).abs() == 0.5 {
        2.0 * (v / 2.0).round()
    } else {
        r
    }
}

/// Fake-quantization MSE of `x` on the grid spanned by `cand`, or `None`
/// when the candidate yields no usable scale.
fn candidate_mse(x: &[f32], cand: &ClipRange, bits: u32, signed: bool, symmetric: bool) -> Option<f64> {
    let levels = (2f64).powi(bits as i32) - 1.0;
    let (qmin, qmax) = if signed {
        (-(2f64).powi(bits as i32 - 1), (2f64).powi(bits as i32 - 1) - 1.0)
    } else {
        (0.0, levels)
    };
    let (l, u) = (cand.lower as f64, cand.upper as f64);
    if !(u > l) {
        return None;
    }
    let (scale, zp) = if symmetric {
        let a = l.abs().max(u.abs());
        let s = 2.0 * a / levels;
        (s, if signed { 0.0 } else { (2f64).powi(bits as i32 - 1) })
    } else {
        let s = (u - l) / levels;
        let zp = (qmin + round_half_even(-l / s)).max(qmin).min(qmax);
        (s, zp)
    };
    if !(scale > 0.0 && scale.is_finite()) {
        return None;
    }
    let mut err = 0.0;
    for &v in x {
        let q = (round_half_even(v as f64 / scale) + zp).max(qmin).min(qmax);
        let back = ((q - zp) * scale) as f32;
        let d = v as f64 - back as f64;
        err += d * d;
    }
    Some(err / x.len() as f64)
}

/// Exhaustive argmin of fake-quantization MSE over `candidates`; ties go to
/// the later candidate.
pub fn oracle_best_range(
    x: &[f32],
    bits: u32,
    signed: bool,
    symmetric: bool,
    candidates: &[ClipRange],
) -> Option<ClipRange> {
    let mut best: Option<(f64, ClipRange)> = None;
    for cand in candidates {
        if let Some(e) = candidate_mse(x, cand, bits, signed, symmetric) {
            if best.is_none_or(|(b, _)| e <= b) {
                best = Some((e, *cand));
            }
        }
    }
    best.map(|(_, r)| r)
}

/// Direct nested-loop convolution with f64 accumulation.
pub fn oracle_conv(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 4 || ks.len() != 4 || xs[0] != 1 || xs[1] != ks[1] || bias.shape() != [ks[0]] || stride == 0 {
        return Err(QuantError::ShapeMismatch(format!("oracle conv of {xs:?} with {ks:?}")));
    }
    let (c, h, w) = (xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ks[0], ks[2], ks[3]);
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(QuantError::ShapeMismatch("kernel larger than padded input".into()));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0f32; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.data()[oc] as f64;
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as i64 - padding as i64;
                            let ix = (ox * stride + kx) as i64 - padding as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            let xv = x.data()[(ic * h + iy as usize) * w + ix as usize] as f64;
                            let kv = kernel.data()[((oc * c + ic) * kh + ky) * kw + kx] as f64;
                            acc += xv * kv;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![1, o, oh, ow], out)
}
