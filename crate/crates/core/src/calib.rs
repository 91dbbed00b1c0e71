//! End-to-end post-training calibration and evaluation.
//!
//! Weights get symmetric per-channel MinMax parameters on the out-channel
//! axis; activations get per-tensor parameters from the configured observer,
//! unsigned-asymmetric by default. Statistics come from full-precision
//! forward passes: pass 1 records min/max (and raw values for the percentile
//! and MSE observers), pass 2 fills histograms for the unilateral search.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::exec::execute_all;
use crate::graph::{GraphModel, QuantAssignment, WeightBundle};
use crate::histogram::{uh_search, ActivationHistogram, UhSearchTrace};
use crate::quant::{fake_quantize, is_valid_bits, make_qparams, mse, ClipRange, QuantParams, FULL_PRECISION_BITS};
use crate::range::{observe_minmax, observe_mse, observe_percentile, ObserverConfig, Scheme};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    WeightsOnly,
    ActivationOnly,
    Both,
}

impl QuantMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuantMode::WeightsOnly => "weights-only",
            QuantMode::ActivationOnly => "activation-only",
            QuantMode::Both => "both",
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantMode {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self> {
        [QuantMode::WeightsOnly, QuantMode::ActivationOnly, QuantMode::Both]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| QuantError::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub act_observer: ObserverConfig,
    /// Signed symmetric activation codes instead of unsigned asymmetric.
    pub act_symmetric: bool,
    pub mode: QuantMode,
    /// Keep the first and the last conv in full precision.
    pub skip_first_last: bool,
    pub calib_sample_limit: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            weight_bits: 8,
            act_bits: 8,
            act_observer: ObserverConfig::default(),
            act_symmetric: false,
            mode: QuantMode::Both,
            skip_first_last: true,
            calib_sample_limit: 1500,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        for bits in [self.weight_bits, self.act_bits] {
            if !is_valid_bits(bits) {
                return Err(QuantError::InvalidBits(bits));
            }
        }
        if self.calib_sample_limit == 0 {
            return Err(QuantError::InvalidConfig("calib_sample_limit must be at least 1".into()));
        }
        self.act_observer.validate()
    }

    pub fn quantizes_weights(&self) -> bool {
        self.mode != QuantMode::ActivationOnly && self.weight_bits != FULL_PRECISION_BITS
    }

    pub fn quantizes_activations(&self) -> bool {
        self.mode != QuantMode::WeightsOnly && self.act_bits != FULL_PRECISION_BITS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node_id: String,
    pub op: String,
    /// Activation range picked by the observer (before any symmetrization).
    pub range_lower: Option<f32>,
    pub range_upper: Option<f32>,
    pub scale: Option<f64>,
    pub zero_point: Option<i32>,
    /// Activation bit-width; 32 when the output stays in full precision.
    pub bits: u32,
    pub weight_bits: Option<u32>,
    pub weight_scales: Option<Vec<f64>>,
    pub weight_mse: Option<f64>,
    pub act_mse: Option<f64>,
    /// `null` when the output is noiseless or carries no signal.
    pub sqnr_db: Option<f64>,
    pub uh_trace: Option<UhSearchTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub seed: Option<u64>,
    pub config: CalibConfig,
    pub calib_samples: usize,
    pub skip: Vec<String>,
    pub nodes: Vec<NodeReport>,
    pub output_cosine: f64,
    pub output_mse: f64,
    pub mean_sqnr_db: Option<f64>,
    pub wall_time_ms: Option<f64>,
}

impl CalibrationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn node(&self, id: &str) -> Option<&NodeReport> {
        self.nodes.iter().find(|n| n.node_id == id)
    }
}

/// Statistics gathered for one activation point.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeObservation {
    pub min: f32,
    pub max: f32,
    /// Every observed value; only kept for the percentile and MSE observers.
    pub values: Vec<f32>,
    pub histogram: Option<ActivationHistogram>,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub assignment: QuantAssignment,
    pub report: CalibrationReport,
    pub observations: BTreeMap<String, NodeObservation>,
}

/// First and last conv in evaluation order.
pub fn first_last_convs(model: &GraphModel) -> BTreeSet<String> {
    let convs = model.conv_ids();
    convs.first().iter().chain(convs.last().iter()).map(|s| s.to_string()).collect()
}

/// Symmetric signed per-channel MinMax parameters along the out-channel axis.
pub fn weight_qparams(kernel: &Tensor, bits: u32) -> Result<QuantParams> {
    let out_ch = kernel.shape()[0];
    let per = kernel.len() / out_ch;
    let ranges = kernel
        .data()
        .chunks_exact(per)
        .map(observe_minmax)
        .collect::<Result<Vec<ClipRange>>>()?;
    QuantParams::per_channel(&ranges, bits, true, true, 0)
}

/// Maps `f` over contiguous shards of `data` on scoped threads; results come
/// back in shard order.
fn sharded<T, R, F>(data: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> Result<R> + Sync,
{
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(data.len()).max(1);
    let chunk = data.len().div_ceil(workers);
    if workers == 1 {
        return Ok(vec![f(data)?]);
    }
    thread::scope(|s| {
        let handles: Vec<_> = data.chunks(chunk).map(|c| s.spawn(|| f(c))).collect();
        handles.into_iter().map(|h| h.join().expect("calibration worker panicked")).collect()
    })
}

fn collect_stats(
    model: &GraphModel,
    weights: &WeightBundle,
    data: &[Tensor],
    act_idx: &[usize],
    keep_values: bool,
) -> Result<Vec<NodeObservation>> {
    let partials = sharded(data, |shard| {
        let mut obs: Vec<NodeObservation> = act_idx
            .iter()
            .map(|_| NodeObservation { min: f32::INFINITY, max: f32::NEG_INFINITY, values: Vec::new(), histogram: None })
            .collect();
        for x in shard {
            let acts = execute_all(model, weights, x, None)?;
            for (o, &idx) in obs.iter_mut().zip(act_idx) {
                let v = acts.get(idx).data();
                for &e in v {
                    o.min = o.min.min(e);
                    o.max = o.max.max(e);
                }
                if keep_values {
                    o.values.extend_from_slice(v);
                }
            }
        }
        Ok(obs)
    })?;
    let mut iter = partials.into_iter();
    let mut merged = iter.next().expect("at least one shard");
    for part in iter {
        for (m, p) in merged.iter_mut().zip(part) {
            m.min = m.min.min(p.min);
            m.max = m.max.max(p.max);
            m.values.extend(p.values);
        }
    }
    Ok(merged)
}

fn fill_histograms(
    model: &GraphModel,
    weights: &WeightBundle,
    data: &[Tensor],
    act_idx: &[usize],
    domains: &[ClipRange],
) -> Result<Vec<ActivationHistogram>> {
    let partials = sharded(data, |shard| {
        let mut hists = domains.iter().map(|d| ActivationHistogram::new(*d)).collect::<Result<Vec<_>>>()?;
        for x in shard {
            let acts = execute_all(model, weights, x, None)?;
            for (h, &idx) in hists.iter_mut().zip(act_idx) {
                h.observe(acts.get(idx).data());
            }
        }
        Ok(hists)
    })?;
    let mut iter = partials.into_iter();
    let mut merged = iter.next().expect("at least one shard");
    for part in iter {
        for (m, p) in merged.iter_mut().zip(&part) {
            m.merge(p)?;
        }
    }
    Ok(merged)
}

struct ActChoice {
    range: ClipRange,
    trace: Option<UhSearchTrace>,
}

fn choose_activation_range(obs: &NodeObservation, cfg: &CalibConfig) -> Result<ActChoice> {
    let oc = &cfg.act_observer;
    let plain = |range| Ok(ActChoice { range, trace: None });
    match oc.scheme {
        Scheme::MinMax => plain(observe_minmax(&[obs.min, obs.max])?),
        Scheme::Percentile => plain(observe_percentile(&obs.values, oc.percentile_keep)?),
        Scheme::Mse => plain(observe_mse(&obs.values, cfg.act_bits, cfg.act_symmetric, cfg.act_symmetric, oc.mse_grid_steps)?),
        Scheme::Uh => {
            let hist = obs.histogram.as_ref().expect("histogram filled for uh");
            let trace = uh_search(hist, oc)?;
            let range = ClipRange::new(oc.uh_fixed_lower, trace.best_upper)?;
            Ok(ActChoice { range, trace: Some(trace) })
        }
    }
}

pub fn calibrate(
    model: &GraphModel,
    weights: &WeightBundle,
    calib_data: &[Tensor],
    cfg: &CalibConfig,
) -> Result<Calibration> {
    let started = Instant::now();
    cfg.validate()?;
    weights.validate(model)?;
    let data = &calib_data[..calib_data.len().min(cfg.calib_sample_limit)];
    if data.is_empty() {
        return Err(QuantError::EmptyCalibrationSet);
    }

    let skip = if cfg.skip_first_last { first_last_convs(model) } else { BTreeSet::new() };
    let mut assignment = QuantAssignment { nodes: BTreeMap::new(), skip: skip.clone() };
    let mut reports: BTreeMap<String, NodeReport> = BTreeMap::new();
    let blank = |id: &str| NodeReport {
        node_id: id.to_string(),
        op: model.node(id).expect("known node").op.name().to_string(),
        range_lower: None,
        range_upper: None,
        scale: None,
        zero_point: None,
        bits: FULL_PRECISION_BITS,
        weight_bits: None,
        weight_scales: None,
        weight_mse: None,
        act_mse: None,
        sqnr_db: None,
        uh_trace: None,
    };

    for id in model.conv_ids().into_iter().filter(|id| !skip.contains(*id)) {
        let w = weights.get(id)?;
        let rep = reports.entry(id.to_string()).or_insert_with(|| blank(id));
        let qp = if cfg.quantizes_weights() {
            let qp = weight_qparams(&w.kernel, cfg.weight_bits)?;
            rep.weight_mse = Some(mse(w.kernel.data(), fake_quantize(&w.kernel, &qp)?.data()));
            rep.weight_scales = Some(qp.scales().to_vec());
            qp
        } else {
            QuantParams::identity()
        };
        rep.weight_bits = Some(qp.bits());
        assignment.nodes.entry(id.to_string()).or_default().weight_qp = Some(qp);
    }

    let act_ids: Vec<String> = model
        .activation_points()
        .into_iter()
        .filter(|id| !skip.contains(*id))
        .map(str::to_string)
        .collect();
    let act_idx: Vec<usize> = act_ids.iter().map(|id| model.index_of(id).expect("known node")).collect();
    let mut observations = BTreeMap::new();

    if cfg.quantizes_activations() && !act_ids.is_empty() {
        let scheme = cfg.act_observer.scheme;
        let keep_values = matches!(scheme, Scheme::Percentile | Scheme::Mse);
        let mut obs = collect_stats(model, weights, data, &act_idx, keep_values)?;
        if scheme == Scheme::Uh {
            let lower = cfg.act_observer.uh_fixed_lower;
            let domains = obs
                .iter()
                .map(|o| {
                    ClipRange::new(lower, o.max).map_err(|_| QuantError::InvalidDomain { lower, upper: o.max })
                })
                .collect::<Result<Vec<_>>>()?;
            let hists = fill_histograms(model, weights, data, &act_idx, &domains)?;
            for (o, h) in obs.iter_mut().zip(hists) {
                o.histogram = Some(h);
            }
        }

        let mut err_sum = vec![0.0f64; act_ids.len()];
        let mut err_count = vec![0usize; act_ids.len()];
        let mut qps = Vec::with_capacity(act_ids.len());
        for (id, o) in act_ids.iter().zip(&obs) {
            let choice = choose_activation_range(o, cfg)?;
            let qp = make_qparams(choice.range, cfg.act_bits, cfg.act_symmetric, cfg.act_symmetric)?;
            let rep = reports.entry(id.clone()).or_insert_with(|| blank(id));
            rep.range_lower = Some(choice.range.lower);
            rep.range_upper = Some(choice.range.upper);
            rep.scale = Some(qp.scales()[0]);
            rep.zero_point = Some(qp.zero_points()[0]);
            rep.bits = qp.bits();
            rep.uh_trace = choice.trace;
            qps.push(qp);
        }
        for x in data {
            let acts = execute_all(model, weights, x, None)?;
            for (k, (&idx, qp)) in act_idx.iter().zip(&qps).enumerate() {
                let a = acts.get(idx);
                let fq = fake_quantize(a, qp)?;
                err_sum[k] += mse(a.data(), fq.data()) * a.len() as f64;
                err_count[k] += a.len();
            }
        }
        for (k, (id, qp)) in act_ids.iter().zip(qps).enumerate() {
            reports.get_mut(id).expect("inserted above").act_mse = Some(err_sum[k] / err_count[k] as f64);
            assignment.nodes.entry(id.clone()).or_default().act_qp = Some(qp);
        }
        for (id, o) in act_ids.iter().zip(obs) {
            observations.insert(id.clone(), o);
        }
    } else {
        for id in &act_ids {
            reports.entry(id.clone()).or_insert_with(|| blank(id));
            assignment.nodes.entry(id.clone()).or_default().act_qp = Some(QuantParams::identity());
        }
    }

    let metrics = evaluate(model, weights, &assignment, data)?;
    for layer in &metrics.layers {
        if let Some(rep) = reports.get_mut(&layer.node_id) {
            rep.sqnr_db = layer.sqnr_db;
        }
    }
    let nodes = model
        .order()
        .iter()
        .filter_map(|&i| reports.remove(&model.nodes()[i].id))
        .collect();
    let report = CalibrationReport {
        seed: None,
        config: cfg.clone(),
        calib_samples: data.len(),
        skip: skip.into_iter().collect(),
        nodes,
        output_cosine: metrics.output_cosine,
        output_mse: metrics.output_mse,
        mean_sqnr_db: metrics.mean_sqnr_db,
        wall_time_ms: Some(started.elapsed().as_secs_f64() * 1e3),
    };
    Ok(Calibration { assignment, report, observations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSqnr {
    pub node_id: String,
    pub sqnr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    /// Mean over samples of the output MSE against full precision.
    pub output_mse: f64,
    pub output_cosine: f64,
    /// Mean of the finite per-layer SQNR values.
    pub mean_sqnr_db: Option<f64>,
    pub layers: Vec<LayerSqnr>,
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// `10 log10(signal / noise)`; `None` when either side is zero.
pub fn sqnr_db(signal: f64, noise: f64) -> Option<f64> {
    (signal > 0.0 && noise > 0.0).then(|| 10.0 * (signal / noise).log10())
}

/// Runs full-precision and fake-quantized inference side by side.
pub fn evaluate(
    model: &GraphModel,
    weights: &WeightBundle,
    qa: &QuantAssignment,
    eval_data: &[Tensor],
) -> Result<EvalMetrics> {
    qa.validate(model)?;
    if eval_data.is_empty() {
        return Err(QuantError::EmptyEvaluationSet);
    }
    let layer_idx: Vec<usize> =
        model.order().iter().copied().filter(|&i| i != model.input_index()).collect();
    let out = model.output_index();

    struct Sample {
        mse: f64,
        cosine: f64,
        signal: Vec<f64>,
        noise: Vec<f64>,
    }
    // Per-sample results summed in sample order keep the metrics independent
    // of the worker count.
    let shards = sharded(eval_data, |shard| {
        shard
            .iter()
            .map(|x| {
                let fp = execute_all(model, weights, x, None)?;
                let q = execute_all(model, weights, x, Some(qa))?;
                let mut s = Sample {
                    mse: mse(fp.get(out).data(), q.get(out).data()),
                    cosine: cosine_similarity(fp.get(out).data(), q.get(out).data()),
                    signal: vec![0.0; layer_idx.len()],
                    noise: vec![0.0; layer_idx.len()],
                };
                for (k, &i) in layer_idx.iter().enumerate() {
                    for (&a, &b) in fp.get(i).data().iter().zip(q.get(i).data()) {
                        let (a, d) = (a as f64, a as f64 - b as f64);
                        s.signal[k] += a * a;
                        s.noise[k] += d * d;
                    }
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut total = Sample { mse: 0.0, cosine: 0.0, signal: vec![0.0; layer_idx.len()], noise: vec![0.0; layer_idx.len()] };
    for p in shards.into_iter().flatten() {
        total.mse += p.mse;
        total.cosine += p.cosine;
        for k in 0..layer_idx.len() {
            total.signal[k] += p.signal[k];
            total.noise[k] += p.noise[k];
        }
    }
    let n = eval_data.len() as f64;
    let layers: Vec<LayerSqnr> = layer_idx
        .iter()
        .enumerate()
        .map(|(k, &i)| LayerSqnr {
            node_id: model.nodes()[i].id.clone(),
            sqnr_db: sqnr_db(total.signal[k], total.noise[k]),
        })
        .collect();
    let finite: Vec<f64> = layers.iter().filter_map(|l| l.sqnr_db).collect();
    Ok(EvalMetrics {
        samples: eval_data.len(),
        output_mse: total.mse / n,
        output_cosine: total.cosine / n,
        mean_sqnr_db: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        layers,
    })
}
