//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p ptq-core --test acceptance`. The process exits
//! non-zero on any failure that is not listed in `KNOWN_UNMET` together with
//! a check that it still fails in its analysed way.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptq_core::calib::{calibrate, evaluate, CalibConfig, EvalMetrics, QuantMode};
use ptq_core::compare::compare_schemes;
use ptq_core::histogram::{
    build_histogram, expand_groups, merge_groups, silu_min, uh_search, ActivationHistogram, HISTOGRAM_BINS,
    SILU_LOWER_BOUND,
};
use ptq_core::oracle::{oracle_uh, DistributionKind, SyntheticDistribution};
use ptq_core::quant::{dequantize, make_qparams, quantize, ClipRange};
use ptq_core::range::{ObserverConfig, Scheme};
use ptq_core::toy::{generate_toy, ToyBundle};
use ptq_core::Tensor;

const SEED: u64 = 42;

const QPARAM_CASES: usize = 10_000;
const QPARAM_VALUES_PER_CASE: usize = 32;
const QPARAM_BUDGET: Duration = Duration::from_secs(5);
const SCALE_ULPS: u64 = 1;

const UH_ORACLE_CASES: usize = 200;
const UH_ORACLE_BUDGET: Duration = Duration::from_secs(30);

const SILU_MIN_WINDOW: (f64, f64) = (-0.27847, -0.27845);
const SILU_CONSTANT_GAP: f64 = 1e-3;
const SILU_BUDGET: Duration = Duration::from_secs(1);

const ORDERING_BUDGET: Duration = Duration::from_secs(60);
const COSINE_FLOOR_8BIT: f64 = 0.99;

const CONSERVATION_CASES: usize = 1_000;
/// Relative slack for the real-valued expansion sum; the integer sums are exact.
const EXPANSION_RTOL: f64 = 1e-12;

const THROUGHPUT_BUDGET: Duration = Duration::from_secs(10);

/// Criteria expected to fail, with the check that pins how they fail.
const KNOWN_UNMET: &[u32] = &[6];

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    /// For a failure listed in `KNOWN_UNMET`: whether it still matches its
    /// recorded analysis.
    expected_failure: bool,
}

fn outcome(id: u32, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass, detail, expected_failure: false }
}

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn quantizer_exactness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut scale_misses = 0usize;
    let mut round_trip_violations = 0usize;
    let mut checked_values = 0usize;
    for _ in 0..QPARAM_CASES {
        let magnitude = 10f32.powf(rng.random_range(-3.0..3.0));
        let l = rng.random_range(-1.0f32..1.0) * magnitude;
        let u = l + rng.random_range(1e-3f32..2.0) * magnitude;
        let bits = rng.random_range(2u32..=8);
        let signed = rng.random_bool(0.5);
        let symmetric = rng.random_bool(0.5);
        let qp = make_qparams(ClipRange { lower: l, upper: u }, bits, signed, symmetric).expect("valid range");

        let levels = ((1u64 << bits) - 1) as f64;
        let expected = if symmetric {
            2.0 * (l.abs().max(u.abs()) as f64) / levels
        } else {
            (u as f64 - l as f64) / levels
        };
        let s = qp.scales()[0];
        if ulps(s, expected) > SCALE_ULPS {
            scale_misses += 1;
        }

        let spread = (u - l).abs().max(l.abs()).max(u.abs()) * 1.5;
        let xs: Vec<f32> = (0..QPARAM_VALUES_PER_CASE).map(|_| rng.random_range(-spread..spread)).collect();
        let x = Tensor::new(vec![xs.len()], xs.clone()).expect("finite");
        let back = dequantize(&quantize(&x, &qp).expect("quantize"), &qp).expect("dequantize");
        let (lo, hi) = qp.representable(0);
        for (&v, &r) in xs.iter().zip(back.data()) {
            let clamped = (v as f64).clamp(lo, hi);
            // the dequantized value is stored as f32
            let slack = f32::EPSILON as f64 * clamped.abs().max(r.abs() as f64);
            if (r as f64 - clamped).abs() > s / 2.0 + slack {
                round_trip_violations += 1;
            }
            checked_values += 1;
        }
    }
    let elapsed = started.elapsed();
    outcome(
        1,
        "quantizer exactness",
        scale_misses == 0 && round_trip_violations == 0 && elapsed < QPARAM_BUDGET,
        format!(
            "{QPARAM_CASES} configs, scale misses {scale_misses}, round-trip violations {round_trip_violations}/{checked_values}, {elapsed:.2?}"
        ),
    )
}

/// Mixed histograms: sampled distributions plus hand-shaped count vectors.
fn random_histogram(k: usize, rng: &mut ChaCha8Rng) -> ActivationHistogram {
    let from_samples = |x: Vec<f32>| {
        let max = x.iter().copied().fold(f32::MIN, f32::max).max(SILU_LOWER_BOUND + 1e-3);
        let t = Tensor::new(vec![x.len()], x).expect("finite");
        build_histogram([&t], ClipRange { lower: SILU_LOWER_BOUND, upper: max }).expect("valid domain")
    };
    let domain = ClipRange { lower: SILU_LOWER_BOUND, upper: rng.random_range(1.0f32..20.0) };
    let n = rng.random_range(1_000..50_000);
    let seed = rng.random();
    match k % 10 {
        0 => from_samples(
            SyntheticDistribution::new(
                DistributionKind::SiluGaussian { mu: rng.random_range(-2.0..1.0), sigma: rng.random_range(0.2..3.0) },
                n,
                seed,
            )
            .generate(),
        ),
        1 => from_samples(
            SyntheticDistribution::new(DistributionKind::Gaussian { mu: 0.5, sigma: rng.random_range(0.1..2.0) }, n, seed)
                .generate(),
        ),
        2 => from_samples(
            SyntheticDistribution::new(DistributionKind::Uniform { lo: -1.0, hi: rng.random_range(0.5..5.0) }, n, seed)
                .generate(),
        ),
        3 => from_samples(
            SyntheticDistribution::new(DistributionKind::LongTail { df: rng.random_range(1.5..6.0) }, n, seed)
                .generate(),
        ),
        4 => {
            // all mass inside the shortest candidate prefix
            let counts = (0..HISTOGRAM_BINS).map(|j| if j < 128 { rng.random_range(0..500) + 1 } else { 0 }).collect();
            ActivationHistogram::from_counts(domain, counts, 0).expect("valid")
        }
        5 => {
            // prefix mass with holes, plus a few far outliers
            let counts = (0..HISTOGRAM_BINS)
                .map(|j| match j {
                    _ if j < 128 && j % 3 != 0 => rng.random_range(1..1000),
                    _ if j > 1900 && rng.random_bool(0.01) => 1,
                    _ => 0,
                })
                .collect();
            ActivationHistogram::from_counts(domain, counts, 0).expect("valid")
        }
        6 => {
            let mut counts = vec![0; HISTOGRAM_BINS];
            counts[rng.random_range(0..HISTOGRAM_BINS)] = rng.random_range(1..100_000);
            ActivationHistogram::from_counts(domain, counts, 0).expect("valid")
        }
        7 => ActivationHistogram::from_counts(domain, vec![0; HISTOGRAM_BINS], rng.random_range(1..1000)).expect("valid"),
        8 => {
            let density = rng.random_range(0.001..1.0);
            let counts =
                (0..HISTOGRAM_BINS).map(|_| if rng.random_bool(density) { rng.random_range(1..10_000) } else { 0 }).collect();
            ActivationHistogram::from_counts(domain, counts, rng.random_range(0..100)).expect("valid")
        }
        _ => ActivationHistogram::from_counts(domain, vec![rng.random_range(1..50); HISTOGRAM_BINS], 0).expect("valid"),
    }
}

fn uh_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let cfg = ObserverConfig::default();
    let mut agree = 0usize;
    let mut first_mismatch = None;
    for k in 0..UH_ORACLE_CASES {
        let mut h = random_histogram(k, &mut rng);
        if h.total() == 0 {
            h = ActivationHistogram::from_counts(h.domain(), vec![1; HISTOGRAM_BINS], 0).expect("valid");
        }
        let fast = uh_search(&h, &cfg).expect("nonempty").best_index;
        let slow = oracle_uh(&h, cfg.uh_levels, cfg.uh_start_index).expect("nonempty");
        if fast == slow {
            agree += 1;
        } else if first_mismatch.is_none() {
            first_mismatch = Some((k, fast, slow));
        }
    }
    let elapsed = started.elapsed();
    let mut detail = format!("{agree}/{UH_ORACLE_CASES} equal, {elapsed:.2?}");
    if let Some((k, f, s)) = first_mismatch {
        detail += &format!(", first mismatch case {k}: search {f} vs oracle {s}");
    }
    outcome(2, "uh oracle equivalence", agree == UH_ORACLE_CASES && elapsed < UH_ORACLE_BUDGET, detail)
}

fn uh_fixed_lower(toy: &ToyBundle) -> Outcome {
    let mut checked = 0usize;
    let mut off = Vec::new();
    for bits in [4, 6, 8] {
        let mut cfg = CalibConfig { weight_bits: bits, act_bits: bits, ..CalibConfig::default() };
        cfg.act_observer.scheme = Scheme::Uh;
        let cal = calibrate(&toy.model, &toy.weights, &toy.calib, &cfg).expect("calibration");
        for n in cal.report.nodes.iter().filter(|n| n.bits < 32) {
            checked += 1;
            if n.range_lower != Some(SILU_LOWER_BOUND) {
                off.push(format!("{}@{bits}: {:?}", n.node_id, n.range_lower));
            }
        }
    }
    outcome(
        3,
        "uh fixed lower bound",
        checked > 0 && off.is_empty(),
        format!("{checked} activation ranges checked, {} off the floor {off:?}", off.len()),
    )
}

fn silu_constant() -> Outcome {
    let started = Instant::now();
    let m = silu_min();
    let elapsed = started.elapsed();
    let gap = (SILU_LOWER_BOUND as f64 - m).abs();
    outcome(
        4,
        "silu minimum constant",
        (SILU_MIN_WINDOW.0..=SILU_MIN_WINDOW.1).contains(&m) && gap < SILU_CONSTANT_GAP && elapsed < SILU_BUDGET,
        format!("silu_min {m:.7}, gap to floor {gap:.2e}, {elapsed:.2?}"),
    )
}

fn run(toy: &ToyBundle, scheme: Scheme, wbits: u32, abits: u32, symmetric: bool, mode: QuantMode) -> EvalMetrics {
    let mut cfg = CalibConfig { weight_bits: wbits, act_bits: abits, act_symmetric: symmetric, mode, ..CalibConfig::default() };
    cfg.act_observer.scheme = scheme;
    let cal = calibrate(&toy.model, &toy.weights, &toy.calib, &cfg).expect("calibration");
    evaluate(&toy.model, &toy.weights, &cal.assignment, &toy.eval).expect("evaluation")
}

fn scheme_ordering(toy: &ToyBundle) -> Outcome {
    let started = Instant::now();
    let e = |s| run(toy, s, 4, 4, false, QuantMode::Both).output_mse;
    let (uh, pct, mm) = (e(Scheme::Uh), e(Scheme::Percentile), e(Scheme::MinMax));
    let elapsed = started.elapsed();
    outcome(
        5,
        "4-bit scheme ordering",
        uh < pct && uh < mm && elapsed < ORDERING_BUDGET,
        format!("output mse uh {uh:.6e}, percentile {pct:.6e}, minmax {mm:.6e}, {elapsed:.2?}"),
    )
}

fn near_lossless_8bit(toy: &ToyBundle) -> Outcome {
    let mut cfg = CalibConfig::default();
    cfg.act_observer.scheme = Scheme::Uh;
    let cal = calibrate(&toy.model, &toy.weights, &toy.calib, &cfg).expect("calibration");
    let m = evaluate(&toy.model, &toy.weights, &cal.assignment, &toy.eval).expect("evaluation");
    let pass = m.output_cosine >= COSINE_FLOOR_8BIT;
    let narrow: Vec<String> = cal
        .report
        .nodes
        .iter()
        .filter_map(|n| n.uh_trace.as_ref().filter(|t| t.best_index < 256).map(|t| format!("{}:{}", n.node_id, t.best_index)))
        .collect();
    let mut o = outcome(
        6,
        "8-bit uh near-lossless",
        pass,
        format!("cosine {:.6} (floor {COSINE_FLOOR_8BIT}), searches stopping below bin 256: {narrow:?}", m.output_cosine),
    );
    // The recorded failure: the search locks onto i = 255 at res.act1, the
    // largest prefix whose first merge group is bin 0 alone.
    o.expected_failure = !pass && (0.98..COSINE_FLOOR_8BIT).contains(&m.output_cosine) && narrow == ["res.act1:255"];
    o
}

fn asymmetric_beats_symmetric(toy: &ToyBundle) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for bits in [4, 6] {
        let asym = run(toy, Scheme::Uh, bits, bits, false, QuantMode::Both).output_mse;
        let sym = run(toy, Scheme::Uh, bits, bits, true, QuantMode::Both).output_mse;
        pass &= asym < sym;
        parts.push(format!("{bits}-{bits}: asym {asym:.6e} vs sym {sym:.6e}"));
    }
    outcome(7, "asymmetric beats symmetric", pass, parts.join(", "))
}

fn mode_ablation(toy: &ToyBundle) -> Outcome {
    let e = |mode| run(toy, Scheme::Uh, 4, 4, false, mode).output_mse;
    let (w, a, both) = (e(QuantMode::WeightsOnly), e(QuantMode::ActivationOnly), e(QuantMode::Both));
    outcome(
        8,
        "4-bit mode ablation",
        w < both && a < both,
        format!("weights-only {w:.6e}, activation-only {a:.6e}, both {both:.6e}"),
    )
}

fn mass_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut failures = 0usize;
    for case in 0..CONSERVATION_CASES {
        let n = rng.random_range(1..5_000);
        let upper = rng.random_range(0.5f32..20.0);
        let values: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..upper * 1.2)).collect();
        let t = Tensor::new(vec![n], values).expect("finite");
        let h = build_histogram([&t], ClipRange { lower: SILU_LOWER_BOUND, upper }).expect("valid domain");
        let counts = h.effective_counts();
        let mut ok = h.counts().iter().sum::<u64>() + h.clamped_low() == n as u64
            && counts.iter().sum::<u64>() == h.total();

        let i = rng.random_range(128..HISTOGRAM_BINS);
        let levels = if case % 2 == 0 { 128 } else { rng.random_range(1..=128) };
        let prefix = &counts[..i];
        let kept: u64 = prefix.iter().sum();
        let tail: u64 = counts[i..].iter().sum();
        ok &= kept + tail == h.total();
        let groups = merge_groups(prefix, levels);
        ok &= groups.iter().map(|g| g.2).sum::<u64>() == kept;
        let expanded: f64 = expand_groups(prefix, &groups).iter().sum();
        ok &= (expanded - kept as f64).abs() <= EXPANSION_RTOL * (kept as f64).max(1.0);
        if !ok {
            failures += 1;
        }
    }
    outcome(
        9,
        "histogram mass conservation",
        failures == 0,
        format!("{CONSERVATION_CASES} cases, {failures} failures"),
    )
}

fn compare_determinism(toy: &ToyBundle) -> Outcome {
    let once = || {
        let mut c = compare_schemes(&toy.model, &toy.weights, &toy.calib, &toy.eval, &[4, 8], &CalibConfig::default(), false)
            .expect("compare");
        c.seed = Some(SEED);
        (c.to_csv(), c.to_json())
    };
    let (a, b) = (once(), once());
    outcome(
        10,
        "compare determinism",
        a == b,
        format!("csv {} bytes, json {} bytes, identical: {}", a.0.len(), a.1.len(), a == b),
    )
}

fn calibration_throughput(toy: &ToyBundle) -> Outcome {
    let cfg = CalibConfig::default();
    let started = Instant::now();
    let cal = calibrate(&toy.model, &toy.weights, &toy.calib, &cfg).expect("calibration");
    let elapsed = started.elapsed();
    let searches = cal.report.nodes.iter().filter(|n| n.uh_trace.is_some()).count();
    outcome(
        11,
        "uh calibration throughput",
        cal.report.calib_samples == 64 && elapsed < THROUGHPUT_BUDGET,
        format!("{} tensors, {searches} histogram searches, {elapsed:.2?}", cal.report.calib_samples),
    )
}

fn main() -> ExitCode {
    let toy = generate_toy(SEED);
    let outcomes = vec![
        quantizer_exactness(),
        uh_oracle_equivalence(),
        uh_fixed_lower(&toy),
        silu_constant(),
        scheme_ordering(&toy),
        near_lossless_8bit(&toy),
        asymmetric_beats_symmetric(&toy),
        mode_ablation(&toy),
        mass_conservation(),
        compare_determinism(&toy),
        calibration_throughput(&toy),
    ];
    let mut unexpected = 0;
    for o in &outcomes {
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {:<30} {status}  {}", o.id, o.name, o.detail);
        let known = KNOWN_UNMET.contains(&o.id);
        if o.pass == known || (known && !o.expected_failure) {
            unexpected += 1;
        }
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass; known unmet: {KNOWN_UNMET:?}", outcomes.len());
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {unexpected} outcome(s) differ from the recorded expectation");
        ExitCode::FAILURE
    }
}
