//! Expands a declarative layer list into the ordered GEMM tasks and vector
//! operations of one training step, and derives the static memory footprint
//! per algorithm.
//!
//! Convolutions are lowered through im2col, so every task is a plain
//! (M, K, N) GEMM. LSTM cells lower to their gate GEMMs with the recurrence
//! serialized; attention layers lower to their Q/K/V/output projections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_out_extent;

/// Training-step variant being modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    DpSgd,
    DpSgdR,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::DpSgd => "dpsgd",
            Algorithm::DpSgdR => "dpsgdr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Algorithm::Sgd),
            "dpsgd" => Ok(Algorithm::DpSgd),
            "dpsgdr" => Ok(Algorithm::DpSgdR),
            other => Err(Error::Config(format!(
                "unknown algorithm '{other}' (expected sgd, dpsgd, or dpsgdr)"
            ))),
        }
    }
}

fn default_bpe() -> u64 {
    2
}
fn default_tokens() -> u64 {
    1
}
fn default_stride() -> u64 {
    1
}

/// One layer of the declarative model description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Storage bytes per operand element: 2 (BF16) or 4 (FP32).
    #[serde(default = "default_bpe")]
    pub bytes_per_element: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    FullyConnected {
        fan_in: u64,
        fan_out: u64,
        /// Positions per example sharing this weight (sequence length for
        /// token-wise projections; 1 for a plain FC layer).
        #[serde(default = "default_tokens")]
        tokens: u64,
    },
    Conv2d {
        c_in: u64,
        c_out: u64,
        kernel: u64,
        #[serde(default = "default_stride")]
        stride: u64,
        #[serde(default)]
        padding: u64,
        in_h: u64,
        in_w: u64,
    },
    LstmCell {
        input_dim: u64,
        hidden: u64,
        seq_len: u64,
    },
    AttentionProjection {
        d_model: u64,
        heads: u64,
        seq_len: u64,
    },
}

impl LayerSpec {
    pub fn validate(&self, index: usize) -> Result<()> {
        if self.bytes_per_element != 2 && self.bytes_per_element != 4 {
            return Err(Error::Config(format!(
                "layer {index}: bytes_per_element must be 2 or 4"
            )));
        }
        let ok = match &self.kind {
            LayerKind::FullyConnected { fan_in, fan_out, tokens } => {
                *fan_in >= 1 && *fan_out >= 1 && *tokens >= 1
            }
            LayerKind::Conv2d { c_in, c_out, kernel, stride, in_h, in_w, padding } => {
                let spatial = conv_out_extent(*in_h as usize, *kernel as usize, *stride as usize, *padding as usize)
                    .and_then(|_| {
                        conv_out_extent(*in_w as usize, *kernel as usize, *stride as usize, *padding as usize)
                    })
                    .is_ok();
                *c_in >= 1 && *c_out >= 1 && spatial
            }
            LayerKind::LstmCell { input_dim, hidden, seq_len } => {
                *input_dim >= 1 && *hidden >= 1 && *seq_len >= 1
            }
            LayerKind::AttentionProjection { d_model, heads, seq_len } => {
                *d_model >= 1 && *heads >= 1 && *seq_len >= 1
            }
        };
        if !ok {
            return Err(Error::Config(format!("layer {index}: all extents must be >= 1")));
        }
        Ok(())
    }

    /// Weight elements held by this layer (all gate/projection matrices).
    pub fn weight_elems(&self) -> u64 {
        match &self.kind {
            LayerKind::FullyConnected { fan_in, fan_out, .. } => fan_in * fan_out,
            LayerKind::Conv2d { c_in, c_out, kernel, .. } => c_in * kernel * kernel * c_out,
            LayerKind::LstmCell { input_dim, hidden, .. } => (input_dim + hidden) * 4 * hidden,
            LayerKind::AttentionProjection { d_model, .. } => 4 * d_model * d_model,
        }
    }

    /// Per-example contraction extent `s` of the per-example weight-gradient
    /// GEMM: conv output spatial size, sequence length, or FC token count.
    pub fn per_example_contraction(&self) -> u64 {
        match &self.kind {
            LayerKind::FullyConnected { tokens, .. } => *tokens,
            LayerKind::Conv2d { kernel, stride, padding, in_h, in_w, .. } => {
                let oh = conv_out_extent(*in_h as usize, *kernel as usize, *stride as usize, *padding as usize)
                    .unwrap_or(1) as u64;
                let ow = conv_out_extent(*in_w as usize, *kernel as usize, *stride as usize, *padding as usize)
                    .unwrap_or(1) as u64;
                oh * ow
            }
            LayerKind::LstmCell { seq_len, .. } => *seq_len,
            LayerKind::AttentionProjection { seq_len, .. } => *seq_len,
        }
    }

    /// Elements the forward GEMMs read per example (raw input, before any
    /// im2col expansion).
    pub fn operand_input_elems(&self) -> u64 {
        match &self.kind {
            LayerKind::FullyConnected { fan_in, tokens, .. } => tokens * fan_in,
            LayerKind::Conv2d { c_in, in_h, in_w, .. } => c_in * in_h * in_w,
            LayerKind::LstmCell { input_dim, hidden, seq_len } => seq_len * (input_dim + hidden),
            LayerKind::AttentionProjection { d_model, seq_len, .. } => seq_len * d_model,
        }
    }

    /// Elements stashed per example for backprop (inputs plus recurrent
    /// state trajectories / intermediate projections where applicable).
    pub fn stashed_act_elems(&self) -> u64 {
        match &self.kind {
            LayerKind::FullyConnected { fan_in, tokens, .. } => tokens * fan_in,
            LayerKind::Conv2d { c_in, in_h, in_w, .. } => c_in * in_h * in_w,
            LayerKind::LstmCell { input_dim, hidden, seq_len } => {
                // Inputs plus the h and c trajectories.
                seq_len * (input_dim + 2 * hidden)
            }
            LayerKind::AttentionProjection { d_model, seq_len, .. } => {
                // Input plus stashed Q, K, V.
                4 * seq_len * d_model
            }
        }
    }

    /// Layer output elements per example.
    pub fn output_elems(&self) -> u64 {
        match &self.kind {
            LayerKind::FullyConnected { fan_out, tokens, .. } => tokens * fan_out,
            LayerKind::Conv2d { c_out, .. } => self.per_example_contraction() * c_out,
            LayerKind::LstmCell { hidden, seq_len, .. } => seq_len * hidden,
            LayerKind::AttentionProjection { d_model, seq_len, .. } => seq_len * d_model,
        }
    }

    /// Gradient elements flowing out of the loss side of this layer's
    /// weight-gradient GEMM, per example (`dz` operand).
    fn dz_elems(&self) -> u64 {
        match &self.kind {
            LayerKind::FullyConnected { fan_out, tokens, .. } => tokens * fan_out,
            LayerKind::Conv2d { c_out, .. } => self.per_example_contraction() * c_out,
            LayerKind::LstmCell { hidden, seq_len, .. } => seq_len * 4 * hidden,
            LayerKind::AttentionProjection { d_model, seq_len, .. } => seq_len * d_model,
        }
    }

    /// im2col workspace for one batch, in elements; zero for non-conv layers.
    fn im2col_workspace_elems(&self, batch: u64) -> u64 {
        match &self.kind {
            LayerKind::Conv2d { c_in, kernel, .. } => {
                batch * self.per_example_contraction() * c_in * kernel * kernel
            }
            _ => 0,
        }
    }
}

/// A declarative model description, loaded from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub schema: u32,
    pub name: String,
    /// Informal grouping used by reports and benchmark selection
    /// (e.g. "cnn", "sequence").
    #[serde(default)]
    pub family: String,
    pub default_batch: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != 1 {
            return Err(Error::Config(format!(
                "unsupported model schema version {} (expected 1)",
                self.schema
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        if self.default_batch == 0 {
            return Err(Error::Config("default_batch must be >= 1".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i)?;
        }
        Ok(())
    }

    pub fn weight_elems(&self) -> u64 {
        self.layers.iter().map(|l| l.weight_elems()).sum()
    }
}

/// Role of a GEMM within one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GemmRole {
    Forward,
    InputGrad,
    PerBatchWeightGrad,
    PerExampleWeightGrad,
}

/// One (M, K, N) GEMM with an instance count: `instances` independent GEMMs
/// of identical shape (B of them for per-example weight gradients).
#[derive(Debug, Clone, Serialize)]
pub struct GemmTask {
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub instances: u64,
    pub role: GemmRole,
    pub layer_id: usize,
}

impl GemmTask {
    pub fn macs(&self) -> u64 {
        self.instances * self.m * self.k * self.n
    }
}

/// Execution phase a step operation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    InputGrad,
    PerBatchDw,
    PerExampleDw,
    Norm,
    ClipReduceNoise,
    SecondBackprop,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::Forward,
        Phase::InputGrad,
        Phase::PerBatchDw,
        Phase::PerExampleDw,
        Phase::Norm,
        Phase::ClipReduceNoise,
        Phase::SecondBackprop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::InputGrad => "input_grad",
            Phase::PerBatchDw => "per_batch_dw",
            Phase::PerExampleDw => "per_example_dw",
            Phase::Norm => "norm",
            Phase::ClipReduceNoise => "clip_reduce_noise",
            Phase::SecondBackprop => "second_backprop",
        }
    }
}

/// Non-GEMM work: norm derivation, clip/scale, reduction, noise addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorOpKind {
    NormSquareReduce,
    ClipScale,
    Reduce,
    NoiseAdd,
}

#[derive(Debug, Clone, Serialize)]
pub struct VectorOp {
    pub kind: VectorOpKind,
    pub phase: Phase,
    pub layer_id: usize,
    /// FP32 elements streamed through the op.
    pub elements: u64,
}

/// A GEMM plus its phase tag and minimum off-chip traffic (operands read
/// once, outputs written once; conv operands counted at their raw,
/// pre-im2col size since the transform runs on-chip).
#[derive(Debug, Clone, Serialize)]
pub struct GemmOp {
    pub task: GemmTask,
    pub phase: Phase,
    pub dram_read_bytes: u64,
    pub dram_write_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub enum StepOp {
    Gemm(GemmOp),
    Vector(VectorOp),
}

/// Static memory footprint of one training step, in bytes.
///
/// Activation bytes include the largest single im2col workspace (a
/// transient, not accumulated across layers). Gradients and optimizer state
/// are held in 4-byte accumulator precision.
#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
pub struct MemoryFootprint {
    pub weights_bytes: u64,
    pub activations_bytes: u64,
    pub per_batch_grad_bytes: u64,
    pub per_example_grad_bytes: u64,
    pub optimizer_state_bytes: u64,
}

impl MemoryFootprint {
    pub fn total_bytes(&self) -> u64 {
        self.weights_bytes
            + self.activations_bytes
            + self.per_batch_grad_bytes
            + self.per_example_grad_bytes
            + self.optimizer_state_bytes
    }
}

const GRAD_BYTES: u64 = 4;

fn shape_for(layer: &LayerSpec, role: GemmRole, batch: u64) -> (u64, u64, u64, u64) {
    let s = layer.per_example_contraction();
    match (&layer.kind, role) {
        (LayerKind::FullyConnected { fan_in, fan_out, .. }, GemmRole::Forward) => {
            (batch * s, *fan_in, *fan_out, 1)
        }
        (LayerKind::FullyConnected { fan_in, fan_out, .. }, GemmRole::InputGrad) => {
            (batch * s, *fan_out, *fan_in, 1)
        }
        (LayerKind::FullyConnected { fan_in, fan_out, .. }, GemmRole::PerBatchWeightGrad) => {
            (*fan_in, batch * s, *fan_out, 1)
        }
        (LayerKind::FullyConnected { fan_in, fan_out, .. }, GemmRole::PerExampleWeightGrad) => {
            (*fan_in, s, *fan_out, batch)
        }
        (LayerKind::Conv2d { c_in, c_out, kernel, .. }, role) => {
            let kdim = c_in * kernel * kernel;
            match role {
                GemmRole::Forward => (batch * s, kdim, *c_out, 1),
                GemmRole::InputGrad => (batch * s, *c_out, kdim, 1),
                GemmRole::PerBatchWeightGrad => (kdim, batch * s, *c_out, 1),
                GemmRole::PerExampleWeightGrad => (kdim, s, *c_out, batch),
            }
        }
        (LayerKind::LstmCell { input_dim, hidden, seq_len }, role) => {
            let gfi = input_dim + hidden;
            let gfo = 4 * hidden;
            match role {
                // The recurrence serializes: one gate GEMM per timestep.
                GemmRole::Forward => (batch, gfi, gfo, *seq_len),
                GemmRole::InputGrad => (batch, gfo, gfi, *seq_len),
                GemmRole::PerBatchWeightGrad => (gfi, batch * seq_len, gfo, 1),
                GemmRole::PerExampleWeightGrad => (gfi, *seq_len, gfo, batch),
            }
        }
        (LayerKind::AttentionProjection { d_model, seq_len, .. }, role) => match role {
            // Shape of ONE projection; the caller emits four of these.
            GemmRole::Forward => (batch * seq_len, *d_model, *d_model, 1),
            GemmRole::InputGrad => (batch * seq_len, *d_model, *d_model, 1),
            GemmRole::PerBatchWeightGrad => (*d_model, batch * seq_len, *d_model, 1),
            GemmRole::PerExampleWeightGrad => (*d_model, *seq_len, *d_model, batch),
        },
    }
}

fn projections(layer: &LayerSpec) -> u64 {
    match layer.kind {
        LayerKind::AttentionProjection { .. } => 4,
        _ => 1,
    }
}

/// Off-chip traffic for one role of one layer (all projections, all
/// instances). Reads at operand precision; gradient outputs at 4 bytes;
/// activations at operand precision.
fn gemm_traffic(
    layer: &LayerSpec,
    role: GemmRole,
    batch: u64,
    algo: Algorithm,
) -> (u64, u64) {
    let bpe = layer.bytes_per_element;
    let w = layer.weight_elems();
    let x = layer.operand_input_elems() * batch;
    let dz = layer.dz_elems() * batch;
    match role {
        GemmRole::Forward => ((x + w) * bpe, layer.output_elems() * batch * bpe),
        GemmRole::InputGrad => ((dz + w) * bpe, x * GRAD_BYTES),
        GemmRole::PerBatchWeightGrad => ((x + dz) * bpe, w * GRAD_BYTES),
        GemmRole::PerExampleWeightGrad => {
            let write = match algo {
                // Persisted: clipping and reduction read them back later.
                Algorithm::DpSgd => batch * w * GRAD_BYTES,
                // Transient: only the per-example/per-layer norm values
                // leave the datapath; any spill is charged to the norm
                // policy, not the GEMM.
                Algorithm::DpSgdR => batch * GRAD_BYTES,
                Algorithm::Sgd => 0,
            };
            ((x + dz) * bpe, write)
        }
    }
}

fn push_gemm(
    ops: &mut Vec<StepOp>,
    layer: &LayerSpec,
    layer_id: usize,
    role: GemmRole,
    phase: Phase,
    batch: u64,
    algo: Algorithm,
) {
    let (m, k, n, instances) = shape_for(layer, role, batch);
    let projs = projections(layer);
    let (read, write) = gemm_traffic(layer, role, batch, algo);
    for _ in 0..projs {
        ops.push(StepOp::Gemm(GemmOp {
            task: GemmTask { m, k, n, instances, role, layer_id },
            phase,
            dram_read_bytes: read / projs,
            dram_write_bytes: write / projs,
        }));
    }
}

/// Lowers one training step into its ordered GEMM tasks and vector ops.
///
/// Emission order is program order: forward over layers first-to-last, then
/// backprop last-to-first (input gradient before the weight gradient that
/// consumes the same upstream), then post-processing, then (for the
/// reweighted variant) the second backprop pass and noise addition.
pub fn lower_to_gemms(model: &ModelSpec, batch: usize, algo: Algorithm) -> Result<Vec<StepOp>> {
    model.validate()?;
    if batch == 0 {
        return Err(Error::Config("batch must be >= 1".into()));
    }
    let b = batch as u64;
    let layers = &model.layers;
    let mut ops = Vec::new();

    for (id, layer) in layers.iter().enumerate() {
        push_gemm(&mut ops, layer, id, GemmRole::Forward, Phase::Forward, b, algo);
    }

    for (id, layer) in layers.iter().enumerate().rev() {
        if id > 0 {
            push_gemm(&mut ops, layer, id, GemmRole::InputGrad, Phase::InputGrad, b, algo);
        }
        match algo {
            Algorithm::Sgd => {
                push_gemm(&mut ops, layer, id, GemmRole::PerBatchWeightGrad, Phase::PerBatchDw, b, algo);
            }
            Algorithm::DpSgd | Algorithm::DpSgdR => {
                push_gemm(&mut ops, layer, id, GemmRole::PerExampleWeightGrad, Phase::PerExampleDw, b, algo);
                ops.push(StepOp::Vector(VectorOp {
                    kind: VectorOpKind::NormSquareReduce,
                    phase: Phase::Norm,
                    layer_id: id,
                    elements: b * layer.weight_elems(),
                }));
            }
        }
    }

    match algo {
        Algorithm::Sgd => {}
        Algorithm::DpSgd => {
            for (id, layer) in layers.iter().enumerate().rev() {
                ops.push(StepOp::Vector(VectorOp {
                    kind: VectorOpKind::ClipScale,
                    phase: Phase::ClipReduceNoise,
                    layer_id: id,
                    elements: b * layer.weight_elems(),
                }));
                ops.push(StepOp::Vector(VectorOp {
                    kind: VectorOpKind::Reduce,
                    phase: Phase::ClipReduceNoise,
                    layer_id: id,
                    elements: b * layer.weight_elems(),
                }));
                ops.push(StepOp::Vector(VectorOp {
                    kind: VectorOpKind::NoiseAdd,
                    phase: Phase::ClipReduceNoise,
                    layer_id: id,
                    elements: layer.weight_elems(),
                }));
            }
        }
        Algorithm::DpSgdR => {
            // Second backprop: clipping/reduction are fused into the
            // reweighted per-batch weight-gradient GEMMs.
            for (id, layer) in layers.iter().enumerate().rev() {
                if id > 0 {
                    push_gemm(&mut ops, layer, id, GemmRole::InputGrad, Phase::SecondBackprop, b, algo);
                }
                push_gemm(&mut ops, layer, id, GemmRole::PerBatchWeightGrad, Phase::SecondBackprop, b, algo);
            }
            for (id, layer) in layers.iter().enumerate().rev() {
                ops.push(StepOp::Vector(VectorOp {
                    kind: VectorOpKind::NoiseAdd,
                    phase: Phase::ClipReduceNoise,
                    layer_id: id,
                    elements: layer.weight_elems(),
                }));
            }
        }
    }
    Ok(ops)
}

/// Total MACs over every GEMM in the program.
pub fn total_macs(ops: &[StepOp]) -> u64 {
    ops.iter()
        .map(|op| match op {
            StepOp::Gemm(g) => g.task.macs(),
            StepOp::Vector(_) => 0,
        })
        .sum()
}

/// Static footprint of one training step under the given algorithm.
pub fn footprint(model: &ModelSpec, batch: usize, algo: Algorithm) -> Result<MemoryFootprint> {
    model.validate()?;
    if batch == 0 {
        return Err(Error::Config("batch must be >= 1".into()));
    }
    let b = batch as u64;
    let layers = &model.layers;

    let weights_bytes: u64 = layers.iter().map(|l| l.weight_elems() * l.bytes_per_element).sum();
    let stash: u64 = layers.iter().map(|l| l.stashed_act_elems() * l.bytes_per_element).sum();
    let last = layers.last().unwrap();
    let im2col_ws: u64 = layers
        .iter()
        .map(|l| l.im2col_workspace_elems(b) * l.bytes_per_element)
        .max()
        .unwrap_or(0);
    let activations_bytes = b * (stash + last.output_elems() * last.bytes_per_element) + im2col_ws;

    let per_batch_grad_bytes: u64 = layers.iter().map(|l| l.weight_elems()).sum::<u64>() * GRAD_BYTES;
    let per_example_grad_bytes = match algo {
        Algorithm::Sgd => 0,
        Algorithm::DpSgd => b * per_batch_grad_bytes,
        // Only the largest single-layer transient is ever live.
        Algorithm::DpSgdR => {
            b * layers.iter().map(|l| l.weight_elems()).max().unwrap_or(0) * GRAD_BYTES
        }
    };
    // FP32 master copy of the weights.
    let optimizer_state_bytes: u64 = layers.iter().map(|l| l.weight_elems()).sum::<u64>() * 4;

    Ok(MemoryFootprint {
        weights_bytes,
        activations_bytes,
        per_batch_grad_bytes,
        per_example_grad_bytes,
        optimizer_state_bytes,
    })
}

/// Largest batch whose footprint fits in `device_memory_bytes`.
///
/// The footprint is monotone in B, so a doubling search followed by a
/// bisection is exact.
pub fn max_feasible_batch(
    model: &ModelSpec,
    algo: Algorithm,
    device_memory_bytes: u64,
) -> Result<usize> {
    let fits = |b: usize| -> Result<bool> {
        Ok(footprint(model, b, algo)?.total_bytes() <= device_memory_bytes)
    };
    if !fits(1)? {
        let needed = footprint(model, 1, algo)?.total_bytes();
        return Err(Error::ModelTooLarge {
            needed,
            available: device_memory_bytes,
        });
    }
    let mut lo = 1usize;
    let mut hi = 2usize;
    while fits(hi)? {
        lo = hi;
        hi = hi.saturating_mul(2);
        if hi > (1 << 40) {
            return Ok(lo); // unbounded in practice; stop at an absurd size
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
