//! Reference executor with optional fake quantization.

use crate::error::{QuantError, Result};
use crate::graph::{conv_output_dim, GraphModel, OpKind, QuantAssignment, WeightBundle};
use crate::quant::fake_quantize;
use crate::tensor::Tensor;

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v / (1.0 + (-v).exp()))
}

pub fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Cross-correlation of a `[1, C, H, W]` input with an `[O, C, kh, kw]`
/// kernel, zero padding on every side.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let mismatch = |m: String| QuantError::ShapeMismatch(format!("conv2d: {m}"));
    let &[1, c, h, w] = x.shape() else {
        return Err(mismatch(format!("input shape {:?} is not [1, C, H, W]", x.shape())));
    };
    let &[o, kc, kh, kw] = kernel.shape() else {
        return Err(mismatch(format!("kernel shape {:?} is not 4-D", kernel.shape())));
    };
    if kc != c {
        return Err(mismatch(format!("kernel expects {kc} input channels, input has {c}")));
    }
    if bias.shape() != [o] {
        return Err(mismatch(format!("bias shape {:?}, expected [{o}]", bias.shape())));
    }
    if stride == 0 {
        return Err(mismatch("stride must be at least 1".into()));
    }
    let (Some(oh), Some(ow)) = (conv_output_dim(h, kh, stride, padding), conv_output_dim(w, kw, stride, padding)) else {
        return Err(mismatch("kernel larger than padded input".into()));
    };

    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0f32; o * oh * ow];
    for (oc, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
        plane.fill(bias.data()[oc]);
        for ic in 0..c {
            let input = &xd[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = kd[((oc * c + ic) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &input[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![1, o, oh, ow], out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(QuantError::ShapeMismatch(format!("add of {:?} and {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| QuantError::ShapeMismatch("concat of nothing".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(QuantError::ShapeMismatch(format!("concat axis {axis} exceeds rank {rank}")));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == rank
            && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(QuantError::ShapeMismatch(format!(
                "cannot concat {:?} with {:?} on axis {axis}",
                first.shape(),
                p.shape()
            )));
        }
        shape[axis] += p.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk: usize = p.shape()[axis..].iter().product();
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

pub fn maxpool(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let &[1, c, h, w] = x.shape() else {
        return Err(QuantError::ShapeMismatch(format!("maxpool input {:?}", x.shape())));
    };
    let (Some(oh), Some(ow)) = (conv_output_dim(h, kernel, stride, 0), conv_output_dim(w, kernel, stride, 0)) else {
        return Err(QuantError::ShapeMismatch("pool window larger than input".into()));
    };
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        m = m.max(plane[(oy * stride + ky) * w + ox * stride + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    Ok(Tensor::from_parts(vec![1, c, oh, ow], out))
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let &[1, c, h, w] = x.shape() else {
        return Err(QuantError::ShapeMismatch(format!("upsample input {:?}", x.shape())));
    };
    if factor == 0 {
        return Err(QuantError::ShapeMismatch("upsample factor must be positive".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            let row = &xd[(ch * h + oy / factor) * w..(ch * h + oy / factor + 1) * w];
            out.extend((0..ow).map(|ox| row[ox / factor]));
        }
    }
    Ok(Tensor::from_parts(vec![1, c, oh, ow], out))
}

/// Every node's output from one forward pass, indexed like
/// [`GraphModel::nodes`].
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    values: Vec<Tensor>,
}

impl Activations {
    pub fn get(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn by_id<'a>(&'a self, model: &GraphModel, id: &str) -> Option<&'a Tensor> {
        model.index_of(id).map(|i| &self.values[i])
    }
}

/// Runs the graph and keeps every node's output.
pub fn execute_all(
    model: &GraphModel,
    weights: &WeightBundle,
    input: &Tensor,
    qa: Option<&QuantAssignment>,
) -> Result<Activations> {
    if input.shape() != model.input_shape() {
        return Err(QuantError::ShapeMismatch(format!(
            "input shape {:?}, model expects {:?}",
            input.shape(),
            model.input_shape()
        )));
    }
    let mut values: Vec<Option<Tensor>> = vec![None; model.nodes().len()];
    for &i in model.order() {
        let node = &model.nodes()[i];
        let ins: Vec<&Tensor> = model
            .inputs_of(i)
            .iter()
            .map(|&j| values[j].as_ref().expect("inputs evaluated first"))
            .collect();
        let mut out = match &node.op {
            OpKind::Input { .. } => input.clone(),
            OpKind::Conv2d { stride, padding, .. } => {
                let w = weights.get(&node.id)?;
                match qa.and_then(|qa| qa.weight_qp(&node.id)) {
                    Some(wqp) => {
                        let kernel = fake_quantize(&w.kernel, wqp)?;
                        conv2d(ins[0], &kernel, &w.bias, *stride, *padding)?
                    }
                    None => conv2d(ins[0], &w.kernel, &w.bias, *stride, *padding)?,
                }
            }
            OpKind::Silu => silu(ins[0]),
            OpKind::LeakyRelu { negative_slope } => leaky_relu(ins[0], *negative_slope),
            OpKind::Add => add(ins[0], ins[1])?,
            OpKind::Concat { axis } => concat(&ins, *axis)?,
            OpKind::MaxPool { kernel, stride } => maxpool(ins[0], *kernel, *stride)?,
            OpKind::UpsampleNearest { factor } => upsample_nearest(ins[0], *factor)?,
            OpKind::Output => ins[0].clone(),
        };
        if let Some(aqp) = qa.and_then(|qa| qa.act_qp(&node.id)) {
            out = fake_quantize(&out, aqp)?;
        }
        values[i] = Some(out);
    }
    Ok(Activations { values: values.into_iter().map(|v| v.expect("every node evaluated")).collect() })
}

/// Runs the graph and returns the output node's tensor.
pub fn execute(
    model: &GraphModel,
    weights: &WeightBundle,
    input: &Tensor,
    qa: Option<&QuantAssignment>,
) -> Result<Tensor> {
    let mut acts = execute_all(model, weights, input, qa)?;
    Ok(acts.values.swap_remove(model.output_index()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ConvWeights, NodeQuant, NodeSpec};
    use crate::quant::QuantParams;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_doubles_with_scalar_kernel() {
        let x = t(&[1, 1, 2, 2], &[1.0, -2.0, 3.5, 0.25]);
        let y = conv2d(&x, &t(&[1, 1, 1, 1], &[2.0]), &t(&[1], &[0.0]), 1, 0).unwrap();
        assert_eq!(y.data(), &[2.0, -4.0, 7.0, 0.5]);
    }

    #[test]
    fn conv_ones_kernel_sums_window() {
        let x = Tensor::full(vec![1, 1, 5, 5], 1.0).unwrap();
        let y = conv2d(&x, &Tensor::full(vec![1, 1, 3, 3], 1.0).unwrap(), &t(&[1], &[0.0]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
        let y = conv2d(&x, &Tensor::full(vec![1, 1, 3, 3], 1.0).unwrap(), &t(&[1], &[0.0]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[4], 9.0);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(vec![1, 2, 3, 3]).unwrap();
        let k = Tensor::zeros(vec![1, 3, 1, 1]).unwrap();
        assert!(matches!(conv2d(&x, &k, &t(&[1], &[0.0]), 1, 0), Err(QuantError::ShapeMismatch(_))));
        let k = Tensor::zeros(vec![1, 2, 5, 5]).unwrap();
        assert!(conv2d(&x, &k, &t(&[1], &[0.0]), 1, 0).is_err());
    }

    #[test]
    fn silu_values() {
        let y = silu(&t(&[3], &[0.0, 30.0, -1.2785]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 30.0).abs() < 1e-5);
        assert!((y.data()[2] + 0.27846).abs() < 1e-5);
    }

    #[test]
    fn structural_ops() {
        let a = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2, 2]);
        assert_eq!(&c.data()[..6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = concat(&[&a, &a], 3).unwrap();
        assert_eq!(w.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        assert_eq!(maxpool(&a, 2, 2).unwrap().data(), &[4.0]);
        let u = upsample_nearest(&a, 2).unwrap();
        assert_eq!(&u.data()[..8], &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(leaky_relu(&t(&[2], &[-2.0, 3.0]), 0.1).data(), &[-0.2, 3.0]);
        assert!(add(&a, &b).is_err());
    }

    fn identity_net() -> (GraphModel, WeightBundle) {
        let model = GraphModel::new(vec![
            NodeSpec::new("in", OpKind::Input { shape: vec![1, 2, 3, 3] }, &[]),
            NodeSpec::new(
                "c",
                OpKind::Conv2d { out_channels: 2, kernel_h: 1, kernel_w: 1, stride: 1, padding: 0 },
                &["in"],
            ),
            NodeSpec::new("out", OpKind::Output, &["c"]),
        ])
        .unwrap();
        let mut weights = WeightBundle::default();
        weights.convs.insert(
            "c".into(),
            ConvWeights { kernel: t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]), bias: t(&[2], &[0.0, 0.0]) },
        );
        (model, weights)
    }

    #[test]
    fn identity_conv_passes_input_through() {
        let (model, weights) = identity_net();
        let x = Tensor::new(vec![1, 2, 3, 3], (0..18).map(|v| v as f32 * 0.37 - 2.0).collect()).unwrap();
        assert_eq!(execute(&model, &weights, &x, None).unwrap(), x);
        assert!(execute(&model, &weights, &Tensor::zeros(vec![1, 2, 2, 2]).unwrap(), None).is_err());
        let mut missing = weights.clone();
        missing.convs.clear();
        assert!(matches!(execute(&model, &missing, &x, None), Err(QuantError::MissingWeight(_))));
    }

    #[test]
    fn sentinel_assignment_is_bit_identical() {
        let (model, weights) = identity_net();
        let x = Tensor::new(vec![1, 2, 3, 3], (0..18).map(|v| (v as f32).sin()).collect()).unwrap();
        let mut qa = QuantAssignment::default();
        qa.nodes.insert(
            "c".into(),
            NodeQuant { weight_qp: Some(QuantParams::identity()), act_qp: Some(QuantParams::identity()) },
        );
        assert_eq!(execute(&model, &weights, &x, Some(&qa)).unwrap(), execute(&model, &weights, &x, None).unwrap());
    }

    #[test]
    fn silu_graph_on_constants() {
        let model = GraphModel::new(vec![
            NodeSpec::new("in", OpKind::Input { shape: vec![1, 1, 1, 2] }, &[]),
            NodeSpec::new("s", OpKind::Silu, &["in"]),
            NodeSpec::new("out", OpKind::Output, &["s"]),
        ])
        .unwrap();
        let y = execute(&model, &WeightBundle::default(), &t(&[1, 1, 1, 2], &[0.0, -1.2785]), None).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] as f64 - crate::histogram::silu_min()).abs() < 1e-6);
    }
}
