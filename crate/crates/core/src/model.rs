//! Sequential CNN models and the teacher architectures.
//!
//! Layers carry a 1-based *index*. Convolution and fully-connected layers each
//! open a new index; a pooling layer shares the index of the layer before it,
//! so the Digit teacher has four indexed layers:
//!
//! | index | layers             |
//! |-------|--------------------|
//! | 1     | conv 16×5×5 + pool |
//! | 2     | conv 32×5×5 + pool |
//! | 3     | fc 512             |
//! | 4     | fc 5 (softmax)     |
//!
//! "Output of layer k" always means the post-activation output of the last
//! layer carrying index k, so it includes a shared-index pool.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples per forward chunk during inference.
pub const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    FullyConnected {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        !matches!(self, LayerKind::MaxPool2d { .. })
    }

    /// Weight and bias shapes for parametrized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            LayerKind::FullyConnected {
                inputs, outputs, ..
            } => Some((vec![outputs, inputs], vec![outputs])),
            LayerKind::MaxPool2d { .. } => None,
        }
    }

    /// Number of output units (channels or neurons).
    pub fn units(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
            LayerKind::FullyConnected { outputs, .. } => Some(outputs),
            LayerKind::MaxPool2d { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub frozen: bool,
    /// Output units forced to zero (sorted, unique).
    pub pruned: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    Weight,
    Bias,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::Weight => "weight",
            Slot::Bias => "bias",
        }
    }
}

/// Identifies one parameter tensor by layer position and slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamKey {
    pub layer: usize,
    pub slot: Slot,
}

pub type ParamGrads = BTreeMap<ParamKey, Tensor>;

/// The final classification layer, kept so it can be restored later.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSnapshot {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
}

/// Tape handles for a model's parameters, created by [`ModelGraph::bind`].
#[derive(Debug)]
pub struct BoundParams {
    vars: Vec<Option<(Var, Var)>>,
    trainable: Vec<bool>,
}

impl BoundParams {
    /// Collects gradients for every trainable parameter.
    pub fn param_grads(&self, grads: &mut Gradients) -> ParamGrads {
        let mut out = ParamGrads::new();
        for (layer, entry) in self.vars.iter().enumerate() {
            if let (Some((w, b)), true) = (entry, self.trainable[layer]) {
                if let Some(g) = grads.take(*w) {
                    out.insert(
                        ParamKey {
                            layer,
                            slot: Slot::Weight,
                        },
                        g,
                    );
                }
                if let Some(g) = grads.take(*b) {
                    out.insert(
                        ParamKey {
                            layer,
                            slot: Slot::Bias,
                        },
                        g,
                    );
                }
            }
        }
        out
    }
}

/// Glorot-uniform initialization bound `sqrt(6 / (fan_in + fan_out))`.
fn glorot_bound(kind: &LayerKind) -> f64 {
    let (fan_in, fan_out) = match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => (
            in_channels * kernel * kernel,
            out_channels * kernel * kernel,
        ),
        LayerKind::FullyConnected {
            inputs, outputs, ..
        } => (inputs, outputs),
        LayerKind::MaxPool2d { .. } => return 0.0,
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_params(kind: &LayerKind, rng: &mut ChaCha8Rng) -> Option<LayerParams> {
    let (ws, bs) = kind.param_shapes()?;
    let s = glorot_bound(kind);
    Some(LayerParams {
        weight: Tensor::uniform(&ws, -s, s, rng),
        bias: Tensor::zeros(&bs),
    })
}

/// Incremental builder that assigns layer indices and infers input sizes.
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    input_shape: Vec<usize>,
    current: Vec<usize>,
    layers: Vec<LayerSpec>,
    next_index: usize,
}

impl ModelBuilder {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ModelBuilder {
            input_shape: vec![channels, height, width],
            current: vec![channels, height, width],
            layers: Vec::new(),
            next_index: 1,
        }
    }

    /// Unpadded convolution.
    pub fn conv(self, out_channels: usize, kernel: usize, stride: usize) -> Self {
        self.conv_padded(out_channels, kernel, stride, 0)
    }

    /// Stride-1 convolution padded to keep the spatial size (odd kernels).
    pub fn conv_same(self, out_channels: usize, kernel: usize) -> Self {
        self.conv_padded(out_channels, kernel, 1, (kernel - 1) / 2)
    }

    pub fn conv_padded(
        mut self,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let [c, h, w] = self.current[..] else {
            panic!("convolution after a fully-connected layer");
        };
        assert!(
            h + 2 * padding >= kernel && w + 2 * padding >= kernel,
            "kernel larger than feature map"
        );
        self.layers.push(LayerSpec {
            index: self.next_index,
            kind: LayerKind::Conv2d {
                in_channels: c,
                out_channels,
                kernel,
                stride,
                padding,
                activation: Activation::Relu,
            },
            frozen: false,
            pruned: Vec::new(),
        });
        self.next_index += 1;
        self.current = vec![
            out_channels,
            (h + 2 * padding - kernel) / stride + 1,
            (w + 2 * padding - kernel) / stride + 1,
        ];
        self
    }

    pub fn pool(mut self, size: usize, stride: usize) -> Self {
        let [c, h, w] = self.current[..] else {
            panic!("pooling after a fully-connected layer");
        };
        assert!(self.next_index > 1, "pooling must follow a layer");
        self.layers.push(LayerSpec {
            index: self.next_index - 1,
            kind: LayerKind::MaxPool2d { size, stride },
            frozen: false,
            pruned: Vec::new(),
        });
        self.current = vec![c, (h - size) / stride + 1, (w - size) / stride + 1];
        self
    }

    fn dense(mut self, outputs: usize, activation: Activation) -> Self {
        let inputs = self.current.iter().product();
        self.layers.push(LayerSpec {
            index: self.next_index,
            kind: LayerKind::FullyConnected {
                inputs,
                outputs,
                activation,
            },
            frozen: false,
            pruned: Vec::new(),
        });
        self.next_index += 1;
        self.current = vec![outputs];
        self
    }

    pub fn fc(self, outputs: usize) -> Self {
        self.dense(outputs, Activation::Relu)
    }

    pub fn softmax_head(self, classes: usize) -> Self {
        self.dense(classes, Activation::Softmax)
    }

    pub fn build(self, seed: u64) -> ModelGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = self
            .layers
            .iter()
            .map(|l| init_params(&l.kind, &mut rng))
            .collect();
        ModelGraph {
            input_shape: self.input_shape,
            layers: self.layers,
            params,
        }
    }
}

/// The Digit teacher: two conv+pool blocks, FC 512, FC 5 softmax, on 1×28×28.
pub fn build_digit_teacher(seed: u64) -> ModelGraph {
    ModelBuilder::new(1, 28, 28)
        .conv(16, 5, 1)
        .pool(2, 2)
        .conv(32, 5, 1)
        .pool(2, 2)
        .fc(512)
        .softmax_head(5)
        .build(seed)
}

/// Medium teacher: six size-preserving 3×3 convolutions in pairs with
/// pooling, FC 512 and a softmax head, on 3×32×32. The last pool emits a
/// 128×4×4 map.
pub fn build_traffic_sign_teacher(classes: usize, seed: u64) -> ModelGraph {
    ModelBuilder::new(3, 32, 32)
        .conv_same(32, 3)
        .conv_same(32, 3)
        .pool(2, 2)
        .conv_same(64, 3)
        .conv_same(64, 3)
        .pool(2, 2)
        .conv_same(128, 3)
        .conv_same(128, 3)
        .pool(2, 2)
        .fc(512)
        .softmax_head(classes)
        .build(seed)
}

impl ModelGraph {
    /// Assembles a model from parts, validating parameter shapes and indices.
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Option<LayerParams>>,
    ) -> Result<Self> {
        if layers.len() != params.len() || layers.is_empty() {
            return Err(Error::Malformed(
                "layer and parameter tables disagree".into(),
            ));
        }
        let mut expected_index = 0;
        for (spec, p) in layers.iter().zip(&params) {
            let next = if spec.kind.has_params() {
                expected_index + 1
            } else {
                expected_index
            };
            if spec.index != next || spec.index == 0 {
                return Err(Error::Malformed(format!(
                    "layer index {} out of sequence",
                    spec.index
                )));
            }
            expected_index = next;
            match (spec.kind.param_shapes(), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) if p.weight.shape() == ws && p.bias.shape() == bs => {}
                _ => {
                    return Err(Error::Malformed(format!(
                        "parameters of layer {} do not match its spec",
                        spec.index
                    )))
                }
            }
        }
        let model = ModelGraph {
            input_shape,
            layers,
            params,
        };
        model.output_shape_of(0..model.layers.len())?;
        Ok(model)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn layer_params(&self, pos: usize) -> Option<&LayerParams> {
        self.params[pos].as_ref()
    }

    pub(crate) fn layer_params_mut(&mut self, pos: usize) -> Option<&mut LayerParams> {
        self.params[pos].as_mut()
    }

    /// N: the number of indexed layers.
    pub fn depth(&self) -> usize {
        self.layers.last().map_or(0, |l| l.index)
    }

    pub fn class_count(&self) -> usize {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::FullyConnected { outputs, .. }) => *outputs,
            _ => 0,
        }
    }

    /// Position one past the last layer carrying index `k`.
    pub fn end_position(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.depth() {
            return Err(Error::IndexOutOfRange {
                index: k,
                max: self.depth(),
            });
        }
        Ok(self.layers.iter().rposition(|l| l.index == k).unwrap() + 1)
    }

    /// Positions of all layers carrying index `k`.
    pub fn positions_of(&self, k: usize) -> Result<Range<usize>> {
        let end = self.end_position(k)?;
        let start = self.layers.iter().position(|l| l.index == k).unwrap();
        Ok(start..end)
    }

    /// Position of the parametrized layer carrying index `k`.
    pub fn param_position(&self, k: usize) -> Result<usize> {
        let range = self.positions_of(k)?;
        Ok(range
            .clone()
            .find(|&p| self.layers[p].kind.has_params())
            .unwrap_or(range.start))
    }

    /// Marks layers with index `<= k` frozen and the rest trainable.
    pub fn freeze_through(&mut self, k: usize) {
        for l in &mut self.layers {
            l.frozen = l.index <= k;
        }
    }

    pub fn frozen_count(&self) -> usize {
        self.layers
            .iter()
            .take_while(|l| l.frozen)
            .map(|l| l.index)
            .last()
            .unwrap_or(0)
    }

    /// Per-sample output shape after running layers in `range`.
    pub fn output_shape_of(&self, range: Range<usize>) -> Result<Vec<usize>> {
        let mut shape = if range.start == 0 {
            self.input_shape.clone()
        } else {
            self.output_shape_of(0..range.start)?
        };
        for spec in &self.layers[range] {
            shape = match (&spec.kind, &shape[..]) {
                (
                    LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    &[c, h, w],
                ) if c == *in_channels
                    && h + 2 * padding >= *kernel
                    && w + 2 * padding >= *kernel =>
                {
                    vec![
                        *out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ]
                }
                (LayerKind::MaxPool2d { size, stride }, &[c, h, w]) if h >= *size && w >= *size => {
                    vec![c, (h - size) / stride + 1, (w - size) / stride + 1]
                }
                (
                    LayerKind::FullyConnected {
                        inputs, outputs, ..
                    },
                    s,
                ) if s.iter().product::<usize>() == *inputs => {
                    vec![*outputs]
                }
                _ => {
                    return Err(Error::ShapeMismatch {
                        op: "layer chain",
                        expected: vec![],
                        actual: shape,
                    })
                }
            };
        }
        Ok(shape)
    }

    /// Puts every parameter on the tape. Frozen layers become constants.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut vars = Vec::with_capacity(self.layers.len());
        let mut trainable = Vec::with_capacity(self.layers.len());
        for (spec, p) in self.layers.iter().zip(&self.params) {
            let train = !spec.frozen;
            trainable.push(train && p.is_some());
            vars.push(p.as_ref().map(|p| {
                if train {
                    (
                        tape.variable(p.weight.clone()),
                        tape.variable(p.bias.clone()),
                    )
                } else {
                    (
                        tape.constant(p.weight.clone()),
                        tape.constant(p.bias.clone()),
                    )
                }
            }));
        }
        BoundParams { vars, trainable }
    }

    /// Records layers `range` on the tape, starting from `x`. The final
    /// softmax is not applied: a softmax layer yields logits here.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        range: Range<usize>,
    ) -> Result<Var> {
        let mut h = x;
        for pos in range {
            let spec = &self.layers[pos];
            h = match spec.kind {
                LayerKind::Conv2d {
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let (w, b) = bound.vars[pos].unwrap();
                    let z = tape.conv2d(h, w, b, stride, padding)?;
                    activate(tape, z, activation)
                }
                LayerKind::MaxPool2d { size, stride } => tape.max_pool2d(h, size, stride)?,
                LayerKind::FullyConnected { activation, .. } => {
                    let (w, b) = bound.vars[pos].unwrap();
                    let z = tape.fully_connected(h, w, b)?;
                    activate(tape, z, activation)
                }
            };
        }
        Ok(h)
    }

    fn check_input(&self, x: &Tensor, range_start: usize) -> Result<()> {
        let expected = if range_start == 0 {
            self.input_shape.clone()
        } else {
            self.output_shape_of(0..range_start)?
        };
        if x.shape().len() < 2 || x.shape()[1..] != expected[..] {
            let mut full = vec![x.shape().first().copied().unwrap_or(1)];
            full.extend(expected);
            return Err(Error::ShapeMismatch {
                op: "forward",
                expected: full,
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Inference over layer positions `range` in fixed-size chunks. A final
    /// softmax layer in the range is applied.
    pub fn forward_range(&self, x: &Tensor, range: Range<usize>) -> Result<Tensor> {
        self.check_input(x, range.start)?;
        let ends_in_softmax = range.end == self.layers.len()
            && matches!(
                self.layers.last().map(|l| &l.kind),
                Some(LayerKind::FullyConnected {
                    activation: Activation::Softmax,
                    ..
                })
            );
        let n = x.batch();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + INFERENCE_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let bound = self.bind_constants(&mut tape);
            let input = tape.constant(x.select(&idx));
            let out = self.forward_on_tape(&mut tape, &bound, input, range.clone())?;
            let mut value = tape.value(out).clone();
            if ends_in_softmax {
                let probs = softmax_rows(&value);
                value = Tensor::from_parts(value.shape().to_vec(), probs);
            }
            parts.push(value);
            start = end;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs)
    }

    fn bind_constants(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| {
                    (
                        tape.constant(p.weight.clone()),
                        tape.constant(p.bias.clone()),
                    )
                })
            })
            .collect();
        BoundParams {
            trainable: vec![false; self.layers.len()],
            vars,
        }
    }

    /// Class probabilities for a batch `[n, c, h, w]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_range(x, 0..self.layers.len())
    }

    /// Output of indexed layer `k` (post-activation, after any shared-index
    /// pooling). `k = N` returns class probabilities.
    pub fn feature_at(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        let end = self.end_position(k)?;
        self.forward_range(x, 0..end)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward(x)?.argmax_rows())
    }

    pub fn head_snapshot(&self) -> Result<HeadSnapshot> {
        let pos = self.head_position()?;
        Ok(HeadSnapshot {
            spec: self.layers[pos].clone(),
            params: self.params[pos].clone().unwrap(),
        })
    }

    fn head_position(&self) -> Result<usize> {
        match self.layers.last() {
            Some(LayerSpec {
                kind: LayerKind::FullyConnected { .. },
                ..
            }) => Ok(self.layers.len() - 1),
            _ => Err(Error::NoClassificationHead),
        }
    }

    /// Copy of this model whose last layer is a freshly initialized
    /// fully-connected softmax layer with `classes` outputs.
    pub fn replace_classification_layer(&self, classes: usize, seed: u64) -> Result<ModelGraph> {
        if classes == 0 {
            return Err(Error::InvalidArgument(
                "class count must be positive".into(),
            ));
        }
        let pos = self.head_position()?;
        let inputs = match self.layers[pos].kind {
            LayerKind::FullyConnected { inputs, .. } => inputs,
            _ => unreachable!(),
        };
        let kind = LayerKind::FullyConnected {
            inputs,
            outputs: classes,
            activation: Activation::Softmax,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        out.params[pos] = init_params(&kind, &mut rng);
        out.layers[pos] = LayerSpec {
            index: self.layers[pos].index,
            kind,
            frozen: false,
            pruned: Vec::new(),
        };
        Ok(out)
    }

    /// Copy of this model with the last layer taken from `snapshot`.
    pub fn restore_head(&self, snapshot: &HeadSnapshot) -> Result<ModelGraph> {
        let pos = self.head_position()?;
        let (have, want) = match (&self.layers[pos].kind, &snapshot.spec.kind) {
            (
                LayerKind::FullyConnected { inputs: have, .. },
                LayerKind::FullyConnected { inputs: want, .. },
            ) => (*have, *want),
            _ => return Err(Error::NoClassificationHead),
        };
        if have != want || snapshot.spec.index != self.layers[pos].index {
            return Err(Error::SnapshotShapeMismatch {
                expected: want,
                actual: have,
            });
        }
        let mut out = self.clone();
        out.layers[pos] = snapshot.spec.clone();
        out.params[pos] = Some(snapshot.params.clone());
        Ok(out)
    }

    /// Records pruned units on the layer at `pos` and zeroes their weights.
    pub fn prune_units(&mut self, pos: usize, units: &[usize]) -> Result<()> {
        let total = self.layers[pos]
            .kind
            .units()
            .ok_or_else(|| Error::InvalidArgument("layer has no units to prune".into()))?;
        if let Some(&bad) = units.iter().find(|&&u| u >= total) {
            return Err(Error::InvalidArgument(format!(
                "unit {bad} out of range for {total} units"
            )));
        }
        let spec = &mut self.layers[pos];
        spec.pruned.extend_from_slice(units);
        spec.pruned.sort_unstable();
        spec.pruned.dedup();
        self.enforce_pruning();
        Ok(())
    }

    /// Zeroes weights and biases of every pruned unit.
    pub fn enforce_pruning(&mut self) {
        for (spec, p) in self.layers.iter().zip(self.params.iter_mut()) {
            let Some(p) = p else { continue };
            if spec.pruned.is_empty() {
                continue;
            }
            let row = p.weight.sample_len();
            for &u in &spec.pruned {
                p.weight.data_mut()[u * row..(u + 1) * row].fill(0.0);
                p.bias.data_mut()[u] = 0.0;
            }
        }
    }

    /// Whether every pruned unit at `pos` has exactly zero weights and bias.
    pub fn pruned_units_zero(&self, pos: usize) -> bool {
        let (Some(spec), Some(Some(p))) = (self.layers.get(pos), self.params.get(pos)) else {
            return true;
        };
        let row = p.weight.sample_len();
        spec.pruned.iter().all(|&u| {
            p.bias.data()[u].to_bits() == 0
                && p.weight.data()[u * row..(u + 1) * row]
                    .iter()
                    .all(|w| w.to_bits() == 0)
        })
    }

    /// Little-endian bytes of the parameters at layer position `pos`.
    pub fn layer_bytes(&self, pos: usize) -> Vec<u8> {
        let mut out = Vec::new();
        if let Some(p) = &self.params[pos] {
            for v in p.weight.data().iter().chain(p.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Layer indices whose parameter bytes differ between two models of
    /// identical structure (any index, if the structures differ).
    pub fn differing_indices(&self, other: &ModelGraph) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        let n = self.layers.len().max(other.layers.len());
        for pos in 0..n {
            let differs = match (self.layers.get(pos), other.layers.get(pos)) {
                (Some(a), Some(b)) => {
                    a.kind != b.kind || self.layer_bytes(pos) != other.layer_bytes(pos)
                }
                _ => true,
            };
            if differs {
                let idx = self
                    .layers
                    .get(pos)
                    .or_else(|| other.layers.get(pos))
                    .unwrap()
                    .index;
                if out.last() != Some(&idx) {
                    out.push(idx);
                }
            }
        }
        out
    }

    /// Whether layers with index `1..=k` carry bit-identical parameters.
    pub fn prefix_identical(&self, other: &ModelGraph, k: usize) -> bool {
        self.differing_indices(other).iter().all(|&i| i > k)
    }
}

fn activate(tape: &mut Tape, z: Var, activation: Activation) -> Var {
    match activation {
        Activation::Relu => tape.relu(z),
        Activation::Identity | Activation::Softmax => z,
    }
}
