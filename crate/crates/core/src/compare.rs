//! Scheme-by-bit-width comparison table, with an optional oracle audit.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calib::{calibrate, evaluate, CalibConfig};
use crate::error::Result;
use crate::exec::{conv2d, execute_all};
use crate::graph::{GraphModel, OpKind, WeightBundle};
use crate::oracle::{oracle_best_range, oracle_conv, oracle_uh};
use crate::quant::ClipRange;
use crate::range::{mse_candidates, mse_eval_subsample, observe_mse, Scheme};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub scheme: Scheme,
    pub bits: u32,
    pub output_mse: f64,
    pub output_cosine: f64,
    pub mean_sqnr_db: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub uh_checked: usize,
    pub uh_mismatches: Vec<String>,
    pub mse_checked: usize,
    pub mse_mismatches: Vec<String>,
    pub conv_checked: usize,
    pub conv_mismatches: Vec<String>,
}

impl AuditSummary {
    pub fn passed(&self) -> bool {
        self.uh_mismatches.is_empty() && self.mse_mismatches.is_empty() && self.conv_mismatches.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: Option<u64>,
    pub config: CalibConfig,
    pub rows: Vec<CompareRow>,
    pub audit: Option<AuditSummary>,
}

impl Comparison {
    pub fn row(&self, scheme: Scheme, bits: u32) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.scheme == scheme && r.bits == bits)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,bits,output_mse,output_cosine,mean_sqnr_db\n");
        for r in &self.rows {
            let sqnr = r.mean_sqnr_db.map_or_else(|| "inf".to_string(), |v| v.to_string());
            writeln!(out, "{},{},{},{},{}", r.scheme, r.bits, r.output_mse, r.output_cosine, sqnr)
                .expect("write to String");
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("comparison serializes");
        s.push('\n');
        s
    }
}

/// Relative tolerance of the convolution audit.
pub const CONV_AUDIT_RTOL: f64 = 1e-5;

/// Calibrates every scheme at every bit-width (weights and activations share
/// the width) and evaluates each on `eval_data`.
pub fn compare_schemes(
    model: &GraphModel,
    weights: &WeightBundle,
    calib_data: &[Tensor],
    eval_data: &[Tensor],
    bits: &[u32],
    base: &CalibConfig,
    audit: bool,
) -> Result<Comparison> {
    let mut rows = Vec::new();
    let mut summary = audit.then(AuditSummary::default);
    for &b in bits {
        for scheme in Scheme::ALL {
            let mut cfg = base.clone();
            cfg.weight_bits = b;
            cfg.act_bits = b;
            cfg.act_observer.scheme = scheme;
            let cal = calibrate(model, weights, calib_data, &cfg)?;
            if let Some(s) = summary.as_mut() {
                audit_calibration(&cal.observations, &cfg, s)?;
            }
            let m = evaluate(model, weights, &cal.assignment, eval_data)?;
            rows.push(CompareRow {
                scheme,
                bits: b,
                output_mse: m.output_mse,
                output_cosine: m.output_cosine,
                mean_sqnr_db: m.mean_sqnr_db,
            });
        }
    }
    if let Some(s) = summary.as_mut() {
        if let Some(x) = calib_data.first() {
            audit_convs(model, weights, x, s)?;
        }
    }
    Ok(Comparison { seed: None, config: base.clone(), rows, audit: summary })
}

fn audit_calibration(
    observations: &std::collections::BTreeMap<String, crate::calib::NodeObservation>,
    cfg: &CalibConfig,
    s: &mut AuditSummary,
) -> Result<()> {
    let oc = &cfg.act_observer;
    for (id, obs) in observations {
        match oc.scheme {
            Scheme::Uh => {
                let Some(h) = &obs.histogram else { continue };
                let fast = crate::histogram::uh_search(h, oc)?.best_index;
                let slow = oracle_uh(h, oc.uh_levels, oc.uh_start_index)?;
                s.uh_checked += 1;
                if fast != slow {
                    s.uh_mismatches.push(format!("{id}@{}b: search {fast} vs oracle {slow}", cfg.act_bits));
                }
            }
            Scheme::Mse => {
                let chosen = observe_mse(&obs.values, cfg.act_bits, cfg.act_symmetric, cfg.act_symmetric, oc.mse_grid_steps)?;
                let grid = mse_candidates(&obs.values, oc.mse_grid_steps)?;
                let eval = mse_eval_subsample(&obs.values);
                let reference: Option<ClipRange> =
                    oracle_best_range(&eval, cfg.act_bits, cfg.act_symmetric, cfg.act_symmetric, &grid);
                s.mse_checked += 1;
                if reference != Some(chosen) {
                    s.mse_mismatches.push(format!("{id}@{}b: {chosen:?} vs oracle {reference:?}", cfg.act_bits));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn audit_convs(model: &GraphModel, weights: &WeightBundle, x: &Tensor, s: &mut AuditSummary) -> Result<()> {
    let acts = execute_all(model, weights, x, None)?;
    for &i in model.order() {
        let node = &model.nodes()[i];
        let OpKind::Conv2d { stride, padding, .. } = node.op else { continue };
        let w = weights.get(&node.id)?;
        let input = acts.get(model.inputs_of(i)[0]);
        let fast = conv2d(input, &w.kernel, &w.bias, stride, padding)?;
        let slow = oracle_conv(input, &w.kernel, &w.bias, stride, padding)?;
        s.conv_checked += 1;
        let worst = fast
            .data()
            .iter()
            .zip(slow.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs() / (b as f64).abs().max(1.0))
            .fold(0.0, f64::max);
        if worst > CONV_AUDIT_RTOL {
            s.conv_mismatches.push(format!("{}: relative error {worst:e}", node.id));
        }
    }
    Ok(())
}
