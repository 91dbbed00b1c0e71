//! Compute-graph representation for small detector-style networks.
//!
//! Tensors flowing through a graph use the `[1, C, H, W]` layout.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::quant::{Granularity, QuantParams};
use crate::tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.1;

fn default_slope() -> f32 {
    DEFAULT_LEAKY_SLOPE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpKind {
    Input {
        shape: Vec<usize>,
    },
    Conv2d {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Silu,
    LeakyRelu {
        #[serde(default = "default_slope")]
        negative_slope: f32,
    },
    Add,
    Concat {
        axis: usize,
    },
    #[serde(rename = "maxpool")]
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    UpsampleNearest {
        factor: usize,
    },
    Output,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "input",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Silu => "silu",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Add => "add",
            OpKind::Concat { .. } => "concat",
            OpKind::MaxPool { .. } => "maxpool",
            OpKind::UpsampleNearest { .. } => "upsample_nearest",
            OpKind::Output => "output",
        }
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, OpKind::Silu | OpKind::LeakyRelu { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    #[serde(flatten)]
    pub op: OpKind,
    #[serde(default)]
    pub inputs: Vec<String>,
}

impl NodeSpec {
    pub fn new(id: &str, op: OpKind, inputs: &[&str]) -> Self {
        Self { id: id.to_string(), op, inputs: inputs.iter().map(|s| s.to_string()).collect() }
    }
}

/// A validated, acyclic graph with one input and one output node.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphModel {
    nodes: Vec<NodeSpec>,
    index: HashMap<String, usize>,
    /// Node indices in evaluation order.
    order: Vec<usize>,
    /// Resolved input indices per node.
    edges: Vec<Vec<usize>>,
    shapes: Vec<Vec<usize>>,
    input: usize,
    output: usize,
}

impl GraphModel {
    pub fn new(nodes: Vec<NodeSpec>) -> Result<Self> {
        let invalid = |m: String| QuantError::InvalidGraph(m);
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(invalid(format!("duplicate node id {:?}", n.id)));
            }
        }
        let mut edges = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let ins = n
                .inputs
                .iter()
                .map(|id| index.get(id).copied().ok_or_else(|| invalid(format!("{:?} reads unknown node {id:?}", n.id))))
                .collect::<Result<Vec<_>>>()?;
            check_arity(n, ins.len())?;
            edges.push(ins);
        }
        let single = |pred: fn(&OpKind) -> bool, what: &str| -> Result<usize> {
            let found: Vec<usize> = (0..nodes.len()).filter(|&i| pred(&nodes[i].op)).collect();
            match found.as_slice() {
                [one] => Ok(*one),
                _ => Err(invalid(format!("expected exactly one {what} node, found {}", found.len()))),
            }
        };
        let input = single(|o| matches!(o, OpKind::Input { .. }), "input")?;
        let output = single(|o| matches!(o, OpKind::Output), "output")?;
        let order = topological_order(&edges)?;

        let mut model = Self { nodes, index, order, edges, shapes: Vec::new(), input, output };
        model.shapes = model.infer_shapes()?;
        Ok(model)
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn inputs_of(&self, idx: usize) -> &[usize] {
        &self.edges[idx]
    }

    pub fn shape_of(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    pub fn input_index(&self) -> usize {
        self.input
    }

    pub fn output_index(&self) -> usize {
        self.output
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[self.input]
    }

    /// Indices of nodes consuming `idx`.
    pub fn consumers(&self, idx: usize) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&j| self.edges[j].contains(&idx)).collect()
    }

    /// Conv node ids in evaluation order.
    pub fn conv_ids(&self) -> Vec<&str> {
        self.order
            .iter()
            .filter(|&&i| matches!(self.nodes[i].op, OpKind::Conv2d { .. }))
            .map(|&i| self.nodes[i].id.as_str())
            .collect()
    }

    /// Nodes whose outputs are quantized as activations, in evaluation order.
    ///
    /// These are the activation-function outputs, plus any conv whose result
    /// reaches something other than an activation function. Structural ops
    /// (add, concat, pooling, upsampling) pass quantized values through.
    pub fn activation_points(&self) -> Vec<&str> {
        self.order
            .iter()
            .filter(|&&i| match self.nodes[i].op {
                OpKind::Silu | OpKind::LeakyRelu { .. } => true,
                OpKind::Conv2d { .. } => {
                    let consumers = self.consumers(i);
                    consumers.is_empty() || !consumers.iter().all(|&c| self.nodes[c].op.is_activation())
                }
                _ => false,
            })
            .map(|&i| self.nodes[i].id.as_str())
            .collect()
    }

    fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for &i in &self.order {
            let node = &self.nodes[i];
            let ins: Vec<&[usize]> = self.edges[i].iter().map(|&j| shapes[j].as_slice()).collect();
            shapes[i] = infer_shape(node, &ins)?;
        }
        Ok(shapes)
    }
}

fn check_arity(n: &NodeSpec, got: usize) -> Result<()> {
    let ok = match n.op {
        OpKind::Input { .. } => got == 0,
        OpKind::Add => got == 2,
        OpKind::Concat { .. } => got >= 2,
        _ => got == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(QuantError::InvalidGraph(format!("{} node {:?} has {got} inputs", n.op.name(), n.id)))
    }
}

/// Kahn's algorithm, always taking the lowest-index ready node.
fn topological_order(edges: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = edges.len();
    let mut indegree: Vec<usize> = edges.iter().map(Vec::len).collect();
    let mut consumers = vec![Vec::new(); n];
    for (i, ins) in edges.iter().enumerate() {
        for &j in ins {
            consumers[j].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != n {
        return Err(QuantError::CyclicGraph);
    }
    Ok(order)
}

pub fn conv_output_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

fn infer_shape(node: &NodeSpec, ins: &[&[usize]]) -> Result<Vec<usize>> {
    let mismatch = |m: String| QuantError::ShapeMismatch(format!("node {:?}: {m}", node.id));
    let nchw = |s: &[usize]| -> Result<[usize; 4]> {
        match *s {
            [1, c, h, w] => Ok([1, c, h, w]),
            _ => Err(mismatch(format!("expected [1, C, H, W], got {s:?}"))),
        }
    };
    match &node.op {
        OpKind::Input { shape } => {
            nchw(shape)?;
            if shape.contains(&0) {
                return Err(mismatch("zero dimension".into()));
            }
            Ok(shape.clone())
        }
        OpKind::Conv2d { out_channels, kernel_h, kernel_w, stride, padding } => {
            let [_, _, h, w] = nchw(ins[0])?;
            if *out_channels == 0 || *kernel_h == 0 || *kernel_w == 0 || *stride == 0 {
                return Err(mismatch("conv attributes must be positive".into()));
            }
            let oh = conv_output_dim(h, *kernel_h, *stride, *padding);
            let ow = conv_output_dim(w, *kernel_w, *stride, *padding);
            match (oh, ow) {
                (Some(oh), Some(ow)) => Ok(vec![1, *out_channels, oh, ow]),
                _ => Err(mismatch("kernel larger than padded input".into())),
            }
        }
        OpKind::Silu | OpKind::LeakyRelu { .. } | OpKind::Output => Ok(ins[0].to_vec()),
        OpKind::Add => {
            if ins[0] != ins[1] {
                return Err(mismatch(format!("add of {:?} and {:?}", ins[0], ins[1])));
            }
            Ok(ins[0].to_vec())
        }
        OpKind::Concat { axis } => {
            let first = ins[0];
            if *axis >= first.len() {
                return Err(mismatch(format!("concat axis {axis} exceeds rank {}", first.len())));
            }
            let mut out = first.to_vec();
            for s in &ins[1..] {
                let compatible = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == *axis || a == b);
                if !compatible {
                    return Err(mismatch(format!("cannot concat {first:?} with {s:?} on axis {axis}")));
                }
                out[*axis] += s[*axis];
            }
            Ok(out)
        }
        OpKind::MaxPool { kernel, stride } => {
            let [_, c, h, w] = nchw(ins[0])?;
            if *kernel == 0 || *stride == 0 {
                return Err(mismatch("pool attributes must be positive".into()));
            }
            match (conv_output_dim(h, *kernel, *stride, 0), conv_output_dim(w, *kernel, *stride, 0)) {
                (Some(oh), Some(ow)) => Ok(vec![1, c, oh, ow]),
                _ => Err(mismatch("pool window larger than input".into())),
            }
        }
        OpKind::UpsampleNearest { factor } => {
            let [_, c, h, w] = nchw(ins[0])?;
            if *factor == 0 {
                return Err(mismatch("upsample factor must be positive".into()));
            }
            Ok(vec![1, c, h * factor, w * factor])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    /// `[out_ch, in_ch, kh, kw]`
    pub kernel: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightBundle {
    pub convs: BTreeMap<String, ConvWeights>,
}

impl WeightBundle {
    pub fn get(&self, id: &str) -> Result<&ConvWeights> {
        self.convs.get(id).ok_or_else(|| QuantError::MissingWeight(id.to_string()))
    }

    /// Checks that every conv has weights of the declared shape.
    pub fn validate(&self, model: &GraphModel) -> Result<()> {
        for &i in model.order() {
            let node = &model.nodes()[i];
            if let OpKind::Conv2d { out_channels, kernel_h, kernel_w, .. } = node.op {
                let w = self.get(&node.id)?;
                let in_ch = model.shape_of(model.inputs_of(i)[0])[1];
                let expected = [out_channels, in_ch, kernel_h, kernel_w];
                if w.kernel.shape() != expected || w.bias.shape() != [out_channels] {
                    return Err(QuantError::ShapeMismatch(format!(
                        "weights of {:?}: kernel {:?} bias {:?}, expected {expected:?} and [{out_channels}]",
                        node.id,
                        w.kernel.shape(),
                        w.bias.shape()
                    )));
                }
            }
        }
        if let Some(extra) = self.convs.keys().find(|k| !matches!(model.node(k).map(|n| &n.op), Some(OpKind::Conv2d { .. }))) {
            return Err(QuantError::InvalidGraph(format!("weights supplied for non-conv node {extra:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeQuant {
    #[serde(default)]
    pub weight_qp: Option<QuantParams>,
    #[serde(default)]
    pub act_qp: Option<QuantParams>,
}

/// Which nodes run with fake-quantized weights and outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantAssignment {
    pub nodes: BTreeMap<String, NodeQuant>,
    /// Nodes kept in full precision regardless of `nodes`.
    pub skip: BTreeSet<String>,
}

impl QuantAssignment {
    pub fn is_skipped(&self, id: &str) -> bool {
        self.skip.contains(id)
    }

    pub fn weight_qp(&self, id: &str) -> Option<&QuantParams> {
        if self.is_skipped(id) {
            return None;
        }
        self.nodes.get(id).and_then(|q| q.weight_qp.as_ref()).filter(|qp| !qp.is_full_precision())
    }

    pub fn act_qp(&self, id: &str) -> Option<&QuantParams> {
        if self.is_skipped(id) {
            return None;
        }
        self.nodes.get(id).and_then(|q| q.act_qp.as_ref()).filter(|qp| !qp.is_full_precision())
    }

    pub fn validate(&self, model: &GraphModel) -> Result<()> {
        for id in self.skip.iter().chain(self.nodes.keys()) {
            if model.node(id).is_none() {
                return Err(QuantError::InvalidGraph(format!("assignment names unknown node {id:?}")));
            }
        }
        for (id, q) in &self.nodes {
            let node = model.node(id).expect("checked above");
            let Some(wqp) = &q.weight_qp else { continue };
            let OpKind::Conv2d { out_channels, .. } = node.op else {
                return Err(QuantError::InvalidGraph(format!("weight parameters on non-conv node {id:?}")));
            };
            if let Granularity::PerChannel { axis } = wqp.granularity() {
                if axis != 0 || wqp.scales().len() != out_channels {
                    return Err(QuantError::ShapeMismatch(format!(
                        "weight parameters of {id:?} hold {} channels on axis {axis}, conv has {out_channels} outputs",
                        wqp.scales().len()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(out: usize, k: usize) -> OpKind {
        OpKind::Conv2d { out_channels: out, kernel_h: k, kernel_w: k, stride: 1, padding: k / 2 }
    }

    fn tiny() -> Vec<NodeSpec> {
        vec![
            NodeSpec::new("in", OpKind::Input { shape: vec![1, 2, 4, 4] }, &[]),
            NodeSpec::new("c1", conv(3, 3), &["in"]),
            NodeSpec::new("s1", OpKind::Silu, &["c1"]),
            NodeSpec::new("out", OpKind::Output, &["s1"]),
        ]
    }

    #[test]
    fn validates_and_orders() {
        let mut nodes = tiny();
        nodes.reverse();
        let g = GraphModel::new(nodes).unwrap();
        let ids: Vec<_> = g.order().iter().map(|&i| g.nodes()[i].id.as_str()).collect();
        assert_eq!(ids, ["in", "c1", "s1", "out"]);
        assert_eq!(g.shape_of(g.index_of("s1").unwrap()), &[1, 3, 4, 4]);
        assert_eq!(g.activation_points(), ["s1"]);
    }

    #[test]
    fn rejects_cycles_and_dangling_edges() {
        let mut nodes = tiny();
        nodes[1].inputs = vec!["s1".into()];
        assert!(matches!(GraphModel::new(nodes), Err(QuantError::CyclicGraph)));
        let mut nodes = tiny();
        nodes[2].inputs = vec!["nope".into()];
        assert!(matches!(GraphModel::new(nodes), Err(QuantError::InvalidGraph(_))));
        let mut nodes = tiny();
        nodes.push(NodeSpec::new("out2", OpKind::Output, &["s1"]));
        assert!(GraphModel::new(nodes).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let nodes = vec![
            NodeSpec::new("in", OpKind::Input { shape: vec![1, 2, 4, 4] }, &[]),
            NodeSpec::new("p", OpKind::MaxPool { kernel: 2, stride: 2 }, &["in"]),
            NodeSpec::new("a", OpKind::Add, &["in", "p"]),
            NodeSpec::new("out", OpKind::Output, &["a"]),
        ];
        assert!(matches!(GraphModel::new(nodes), Err(QuantError::ShapeMismatch(_))));
    }

    #[test]
    fn node_json_shape() {
        let n = NodeSpec::new("c", conv(4, 3), &["x"]);
        let json = serde_json::to_string(&n).unwrap();
        assert_eq!(
            json,
            r#"{"id":"c","op":"conv2d","out_channels":4,"kernel_h":3,"kernel_w":3,"stride":1,"padding":1,"inputs":["x"]}"#
        );
        let leaky: NodeSpec = serde_json::from_str(r#"{"id":"l","op":"leaky_relu","inputs":["x"]}"#).unwrap();
        assert_eq!(leaky.op, OpKind::LeakyRelu { negative_slope: 0.1 });
    }

    #[test]
    fn assignment_rejects_wrong_channel_count() {
        use crate::quant::ClipRange;
        let g = GraphModel::new(tiny()).unwrap();
        let r = ClipRange::new(-1.0, 1.0).unwrap();
        let mut qa = QuantAssignment::default();
        qa.nodes.insert(
            "c1".into(),
            NodeQuant { weight_qp: Some(QuantParams::per_channel(&[r, r], 8, true, true, 0).unwrap()), act_qp: None },
        );
        assert!(qa.validate(&g).is_err());
        qa.nodes.get_mut("c1").unwrap().weight_qp = Some(QuantParams::per_channel(&[r; 3], 8, true, true, 0).unwrap());
        assert!(qa.validate(&g).is_ok());
        qa.skip.insert("ghost".into());
        assert!(qa.validate(&g).is_err());
    }
}
