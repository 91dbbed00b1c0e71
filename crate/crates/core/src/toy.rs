//! Seeded toy detector: a small conv/SiLU backbone with a residual add, a
//! pooled branch that is upsampled and concatenated back, and a 1x1 head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StudentT};

use crate::exec::{conv2d, execute_all};
use crate::graph::{ConvWeights, GraphModel, NodeSpec, OpKind, WeightBundle};
use crate::tensor::Tensor;

pub const TOY_INPUT_SHAPE: [usize; 4] = [1, 3, 32, 32];
pub const TOY_CALIB_SAMPLES: usize = 64;
pub const TOY_EVAL_SAMPLES: usize = 16;

const CALIB_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const REFERENCE_STREAM: u64 = 3;
const REFERENCE_SAMPLES: usize = 8;

fn conv(out_channels: usize, k: usize, stride: usize) -> OpKind {
    OpKind::Conv2d { out_channels, kernel_h: k, kernel_w: k, stride, padding: k / 2 }
}

pub fn toy_model() -> GraphModel {
    let nodes = vec![
        NodeSpec::new("input", OpKind::Input { shape: TOY_INPUT_SHAPE.to_vec() }, &[]),
        NodeSpec::new("stem.conv", conv(8, 3, 1), &["input"]),
        NodeSpec::new("stem.act", OpKind::Silu, &["stem.conv"]),
        NodeSpec::new("down.conv", conv(16, 3, 2), &["stem.act"]),
        NodeSpec::new("down.act", OpKind::Silu, &["down.conv"]),
        NodeSpec::new("res.conv1", conv(16, 1, 1), &["down.act"]),
        NodeSpec::new("res.act1", OpKind::Silu, &["res.conv1"]),
        NodeSpec::new("res.conv2", conv(16, 3, 1), &["res.act1"]),
        NodeSpec::new("res.act2", OpKind::Silu, &["res.conv2"]),
        NodeSpec::new("res.add", OpKind::Add, &["down.act", "res.act2"]),
        NodeSpec::new("pool", OpKind::MaxPool { kernel: 2, stride: 2 }, &["res.add"]),
        NodeSpec::new("deep.conv", conv(32, 3, 1), &["pool"]),
        NodeSpec::new("deep.act", OpKind::Silu, &["deep.conv"]),
        NodeSpec::new("up", OpKind::UpsampleNearest { factor: 2 }, &["deep.act"]),
        NodeSpec::new("neck.cat", OpKind::Concat { axis: 1 }, &["up", "res.add"]),
        NodeSpec::new("neck.conv", conv(16, 1, 1), &["neck.cat"]),
        NodeSpec::new("neck.act", OpKind::Silu, &["neck.conv"]),
        NodeSpec::new("head.conv", conv(8, 1, 1), &["neck.act"]),
        NodeSpec::new("output", OpKind::Output, &["head.conv"]),
    ];
    GraphModel::new(nodes).expect("toy graph is valid")
}

/// Heavy-tailed kernels with a batch-norm affine folded into every conv.
///
/// Each output channel is rescaled so that, on a reference batch drawn from
/// its own stream, its pre-activation has mean `beta` and standard deviation
/// `gamma`, with `gamma ~ LogNormal(0, 0.5)` and `beta ~ N(-0.5, 1)`.
pub fn toy_weights(model: &GraphModel, seed: u64) -> WeightBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tails = StudentT::new(4.0).expect("df > 0");
    let gamma_dist = LogNormal::new(0.0, 0.5).expect("valid sigma");
    let beta_dist = Normal::new(-0.5, 1.0).expect("valid sigma");
    let mut bundle = WeightBundle::default();
    let mut affine = Vec::new();
    for &i in model.order() {
        let node = &model.nodes()[i];
        let OpKind::Conv2d { out_channels, kernel_h, kernel_w, .. } = node.op else { continue };
        let in_ch = model.shape_of(model.inputs_of(i)[0])[1];
        let fan_in = in_ch * kernel_h * kernel_w;
        let std = (1.0 / fan_in as f64).sqrt();
        let kernel: Vec<f32> = (0..out_channels * fan_in)
            .map(|_| (tails.sample(&mut rng) * std) as f32)
            .collect();
        let gamma: Vec<f64> = (0..out_channels).map(|_| gamma_dist.sample(&mut rng)).collect();
        let beta: Vec<f64> = (0..out_channels).map(|_| beta_dist.sample(&mut rng)).collect();
        affine.push((i, gamma, beta));
        bundle.convs.insert(
            node.id.clone(),
            ConvWeights {
                kernel: Tensor::new(vec![out_channels, in_ch, kernel_h, kernel_w], kernel).expect("finite"),
                bias: Tensor::zeros(vec![out_channels]).expect("nonempty"),
            },
        );
    }

    let reference = synthetic_inputs(model.input_shape(), seed, REFERENCE_STREAM, REFERENCE_SAMPLES);
    // Convs are folded in evaluation order, so each one sees inputs produced
    // by already-folded predecessors.
    for (i, gamma, beta) in affine {
        let node = &model.nodes()[i];
        let OpKind::Conv2d { stride, padding, .. } = node.op else { unreachable!() };
        let w = bundle.convs[&node.id].clone();
        let channels = gamma.len();
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut per_channel = 0usize;
        for x in &reference {
            let acts = execute_all(model, &bundle, x, None).expect("toy graph executes");
            let y = conv2d(acts.get(model.inputs_of(i)[0]), &w.kernel, &w.bias, stride, padding).expect("shapes agree");
            let plane = y.len() / channels;
            per_channel += plane;
            for (c, chunk) in y.data().chunks(plane).enumerate() {
                for &v in chunk {
                    sum[c] += v as f64;
                    sq[c] += v as f64 * v as f64;
                }
            }
        }
        let n = per_channel as f64;
        let fan = w.kernel.len() / channels;
        let mut kernel = w.kernel.data().to_vec();
        let mut bias = vec![0.0f32; channels];
        for c in 0..channels {
            let mean = sum[c] / n;
            let sd = (sq[c] / n - mean * mean).max(0.0).sqrt().max(1e-6);
            let k = gamma[c] / sd;
            for v in &mut kernel[c * fan..(c + 1) * fan] {
                *v = (*v as f64 * k) as f32;
            }
            bias[c] = (beta[c] - mean * k) as f32;
        }
        bundle.convs.insert(
            node.id.clone(),
            ConvWeights {
                kernel: Tensor::new(w.kernel.shape().to_vec(), kernel).expect("finite"),
                bias: Tensor::new(vec![channels], bias).expect("finite"),
            },
        );
    }
    bundle
}

/// Standard-Gaussian inputs of the model's input shape.
pub fn synthetic_inputs(shape: &[usize], seed: u64, stream: u64, count: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0f32, 1.0).expect("valid sigma");
    (0..count)
        .map(|_| {
            // per-sample contrast so the calibration set spans a range of
            // activation magnitudes
            let gain: f32 = rng.random_range(0.5..1.5);
            let data = (0..n).map(|_| normal.sample(&mut rng) * gain).collect();
            Tensor::new(shape.to_vec(), data).expect("finite")
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ToyBundle {
    pub model: GraphModel,
    pub weights: WeightBundle,
    pub calib: Vec<Tensor>,
    pub eval: Vec<Tensor>,
}

pub fn generate_toy(seed: u64) -> ToyBundle {
    let model = toy_model();
    let weights = toy_weights(&model, seed);
    let calib = synthetic_inputs(&TOY_INPUT_SHAPE, seed, CALIB_STREAM, TOY_CALIB_SAMPLES);
    let eval = synthetic_inputs(&TOY_INPUT_SHAPE, seed, EVAL_STREAM, TOY_EVAL_SAMPLES);
    ToyBundle { model, weights, calib, eval }
}
