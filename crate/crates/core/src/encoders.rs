//! Desk-scale text and video encoders.
//!
//! Both towers are stacks of residual self-attention layers whose base
//! projections are frozen. The text tower adapts every frozen projection
//! with a top-k gated mixture of low-rank experts; the video tower adds
//! low-rank updates to the query and value projections only. Modality
//! projection heads map token and frame features into the prototype space.

use std::ops::Range;

use crate::diffmath::{topk_softmax_rows_of, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Named tensor owned by a model component.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    fn frozen(name: String, value: Tensor) -> Self {
        Self {
            name,
            value,
            trainable: false,
        }
    }

    fn trainable(name: String, value: Tensor) -> Self {
        Self {
            name,
            value,
            trainable: true,
        }
    }

    /// Records the tensor on `tape`: trainable tensors become parameters,
    /// frozen ones constants.
    pub fn bind(&self, tape: &mut Tape) -> Var {
        if self.trainable {
            tape.param(&self.name, &self.value)
        } else {
            tape.constant(self.value.clone())
        }
    }
}

/// Visits every tensor of a component in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, rng::normal_vec(rng, rows * cols, std))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    /// Token and frame width `D`.
    pub width: usize,
    /// Prototype-space dimension `d`.
    pub proto_dim: usize,
    pub head_hidden: usize,
    pub max_tokens: usize,
    pub max_frames: usize,
    pub experts: usize,
    pub active_experts: usize,
    pub expert_rank: usize,
    pub lora_rank: usize,
    /// Standard deviation of frozen weights, times `1/sqrt(D)`.
    pub base_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 32,
            proto_dim: 16,
            head_hidden: 32,
            max_tokens: 8,
            max_frames: 4,
            experts: 4,
            active_experts: 2,
            expert_rank: 4,
            lora_rank: 4,
            base_scale: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.width == 0 || self.proto_dim == 0 || self.head_hidden == 0 {
            return bad("layers, width, proto_dim and head_hidden must be positive");
        }
        if self.experts == 0 {
            return bad("experts must be positive");
        }
        if self.active_experts == 0 {
            return bad("k_e must be at least 1");
        }
        if self.active_experts > self.experts {
            return Err(Error::KTooLarge {
                k: self.active_experts,
                experts: self.experts,
            });
        }
        if self.lora_rank == 0 || 2 * self.lora_rank > self.width {
            return bad("lora_rank must be in [1, D/2]");
        }
        if self.expert_rank == 0 || self.expert_rank > self.width {
            return bad("expert_rank must be in [1, D]");
        }
        if self.max_tokens == 0 || self.max_frames == 0 {
            return bad("sequence limits must be positive");
        }
        Ok(())
    }
}

/// Variable-length sequences stacked row-wise into one matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequences {
    pub data: Tensor,
    pub segments: Vec<Range<usize>>,
}

impl Sequences {
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let width = items.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut segments = Vec::with_capacity(items.len());
        let mut start = 0;
        for t in items {
            if t.rows() == 0 || t.is_empty() {
                return Err(Error::EmptySequence);
            }
            if t.cols() != width {
                return Err(Error::ShapeMismatch(format!(
                    "sequence width {} vs {width}",
                    t.cols()
                )));
            }
            data.extend_from_slice(t.data());
            segments.push(start..start + t.rows());
            start += t.rows();
        }
        Ok(Self {
            data: Tensor::matrix(start, width, data),
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    fn max_len(&self) -> usize {
        self.segments.iter().map(|s| s.len()).max().unwrap_or(0)
    }
}

/// Router plus `I` low-rank experts attached to one frozen linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeAdapter {
    pub router: Param,
    pub experts: Vec<(Param, Param)>,
    pub active: usize,
}

/// Gate weights and adapted output for a single token.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeOutput {
    pub gates: Vec<f64>,
    pub output: Vec<f64>,
}

impl MoeAdapter {
    fn new(prefix: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = cfg.width;
        let std = 1.0 / (d as f64).sqrt();
        let router = Param::trainable(format!("{prefix}.router"), gaussian(rng, d, cfg.experts, std));
        let experts = (0..cfg.experts)
            .map(|i| {
                (
                    Param::trainable(format!("{prefix}.e{i}.a"), gaussian(rng, d, cfg.expert_rank, std)),
                    Param::trainable(
                        format!("{prefix}.e{i}.b"),
                        Tensor::zeros(&[cfg.expert_rank, d]),
                    ),
                )
            })
            .collect();
        Self {
            router,
            experts,
            active: cfg.active_experts,
        }
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    fn check(&self) -> Result<()> {
        if self.active == 0 || self.active > self.experts.len() {
            return Err(Error::KTooLarge {
                k: self.active,
                experts: self.experts.len(),
            });
        }
        Ok(())
    }

    /// Gate weights for one token: softmax over the top-`k_e` router logits.
    pub fn gates(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check()?;
        let logits = Tensor::matrix(1, x.len(), x.to_vec()).matmul(&self.router.value);
        Ok(topk_softmax_rows_of(&logits, self.active).into_data())
    }

    /// `x W + sum_i G_i(x) x A_i B_i` for every row of `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var, frozen: &Param) -> Result<Var> {
        self.check()?;
        let w = frozen.bind(tape);
        let base = tape.matmul(x, w);
        let router = self.router.bind(tape);
        let logits = tape.matmul(x, router);
        let gates = tape.topk_softmax_rows(logits, self.active);
        let mut out = base;
        for (i, (a, b)) in self.experts.iter().enumerate() {
            let av = a.bind(tape);
            let bv = b.bind(tape);
            let xa = tape.matmul(x, av);
            let delta = tape.matmul(xa, bv);
            let g = tape.slice_cols(gates, i, 1);
            let weighted = tape.mul_col(delta, g);
            out = tape.add(out, weighted);
        }
        Ok(out)
    }
}

/// Adapts a single token through one frozen linear layer.
pub fn moe_forward(x: &[f64], frozen: &Param, adapter: &MoeAdapter) -> Result<MoeOutput> {
    if x.len() != frozen.value.rows() {
        return Err(Error::ShapeMismatch(format!(
            "token width {} vs layer width {}",
            x.len(),
            frozen.value.rows()
        )));
    }
    let gates = adapter.gates(x)?;
    let mut tape = Tape::no_grad();
    let xv = tape.constant(Tensor::matrix(1, x.len(), x.to_vec()));
    let out = adapter.forward(&mut tape, xv, frozen)?;
    Ok(MoeOutput {
        gates,
        output: tape.value(out).data().to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextLayer {
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    pub moe_q: MoeAdapter,
    pub moe_k: MoeAdapter,
    pub moe_v: MoeAdapter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderState {
    pub layers: Vec<TextLayer>,
    pub width: usize,
    pub max_tokens: usize,
}

fn frozen_square(name: String, cfg: &EncoderConfig, rng: &mut Rng) -> Param {
    let std = cfg.base_scale / (cfg.width as f64).sqrt();
    Param::frozen(name, gaussian(rng, cfg.width, cfg.width, std))
}

impl TextEncoderState {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut base_rng = rng::seeded(rng::derive(seed, 11));
        let mut adapter_rng = rng::seeded(rng::derive(seed, 12));
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("text.l{l}");
                TextLayer {
                    w_q: frozen_square(format!("{p}.w_q"), cfg, &mut base_rng),
                    w_k: frozen_square(format!("{p}.w_k"), cfg, &mut base_rng),
                    w_v: frozen_square(format!("{p}.w_v"), cfg, &mut base_rng),
                    moe_q: MoeAdapter::new(&format!("{p}.moe_q"), cfg, &mut adapter_rng),
                    moe_k: MoeAdapter::new(&format!("{p}.moe_k"), cfg, &mut adapter_rng),
                    moe_v: MoeAdapter::new(&format!("{p}.moe_v"), cfg, &mut adapter_rng),
                }
            })
            .collect();
        Ok(Self {
            layers,
            width: cfg.width,
            max_tokens: cfg.max_tokens,
        })
    }

    /// Word features for every stacked sequence, `(total tokens) x D`.
    pub fn forward(&self, tape: &mut Tape, tokens: &Sequences) -> Result<Var> {
        check_sequences(tokens, self.width, self.max_tokens)?;
        let scale = 1.0 / (self.width as f64).sqrt();
        let mut h = tape.constant(tokens.data.clone());
        for layer in &self.layers {
            let q = layer.moe_q.forward(tape, h, &layer.w_q)?;
            let k = layer.moe_k.forward(tape, h, &layer.w_k)?;
            let v = layer.moe_v.forward(tape, h, &layer.w_v)?;
            let att = tape.block_attention(q, k, v, &tokens.segments, scale);
            h = tape.add(h, att);
        }
        Ok(h)
    }
}

fn check_sequences(seqs: &Sequences, width: usize, max_len: usize) -> Result<()> {
    if seqs.is_empty() || seqs.segments.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptySequence);
    }
    if seqs.data.cols() != width {
        return Err(Error::ShapeMismatch(format!(
            "input width {} vs encoder width {width}",
            seqs.data.cols()
        )));
    }
    if seqs.max_len() > max_len {
        return Err(Error::SequenceTooLong {
            len: seqs.max_len(),
            max: max_len,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoLayer {
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    pub a_q: Param,
    pub b_q: Param,
    pub a_v: Param,
    pub b_v: Param,
}

impl VideoLayer {
    /// `x (W + A B)`; with zero factors this reduces bit-exactly to `x W`.
    fn adapted(tape: &mut Tape, x: Var, w: &Param, a: &Param, b: &Param) -> Var {
        let wv = w.bind(tape);
        let av = a.bind(tape);
        let bv = b.bind(tape);
        let delta = tape.matmul(av, bv);
        let eff = tape.add(wv, delta);
        tape.matmul(x, eff)
    }

    /// One residual self-attention step with low-rank query/value updates.
    pub fn forward(&self, tape: &mut Tape, x: Var, segments: &[Range<usize>]) -> Var {
        let width = tape.value(x).cols();
        let q = Self::adapted(tape, x, &self.w_q, &self.a_q, &self.b_q);
        let wk = self.w_k.bind(tape);
        let k = tape.matmul(x, wk);
        let v = Self::adapted(tape, x, &self.w_v, &self.a_v, &self.b_v);
        let att = tape.block_attention(q, k, v, segments, 1.0 / (width as f64).sqrt());
        tape.add(x, att)
    }

    /// `ΔW_Q = A_Q B_Q`.
    pub fn delta_q(&self) -> Tensor {
        self.a_q.value.matmul(&self.b_q.value)
    }
}

/// Self-attention over one sequence through a single adapted layer.
pub fn lora_attention(x: &Tensor, layer: &VideoLayer) -> Result<Tensor> {
    if x.cols() != layer.w_q.value.rows() {
        return Err(Error::ShapeMismatch(format!(
            "sequence width {} vs layer width {}",
            x.cols(),
            layer.w_q.value.rows()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let out = layer.forward(&mut tape, xv, &[0..x.rows()]);
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEncoderState {
    pub layers: Vec<VideoLayer>,
    pub width: usize,
    pub rank: usize,
    pub max_frames: usize,
}

impl VideoEncoderState {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut base_rng = rng::seeded(rng::derive(seed, 21));
        let mut adapter_rng = rng::seeded(rng::derive(seed, 22));
        let (d, r) = (cfg.width, cfg.lora_rank);
        let std = 1.0 / (d as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("video.l{l}");
                VideoLayer {
                    w_q: frozen_square(format!("{p}.w_q"), cfg, &mut base_rng),
                    w_k: frozen_square(format!("{p}.w_k"), cfg, &mut base_rng),
                    w_v: frozen_square(format!("{p}.w_v"), cfg, &mut base_rng),
                    a_q: Param::trainable(format!("{p}.a_q"), gaussian(&mut adapter_rng, d, r, std)),
                    b_q: Param::trainable(format!("{p}.b_q"), Tensor::zeros(&[r, d])),
                    a_v: Param::trainable(format!("{p}.a_v"), gaussian(&mut adapter_rng, d, r, std)),
                    b_v: Param::trainable(format!("{p}.b_v"), Tensor::zeros(&[r, d])),
                }
            })
            .collect();
        Ok(Self {
            layers,
            width: d,
            rank: r,
            max_frames: cfg.max_frames,
        })
    }

    /// Frame features for every stacked sequence, `(total frames) x D`.
    pub fn forward(&self, tape: &mut Tape, frames: &Sequences) -> Result<Var> {
        check_sequences(frames, self.width, self.max_frames)?;
        let mut h = tape.constant(frames.data.clone());
        for layer in &self.layers {
            h = layer.forward(tape, h, &frames.segments);
        }
        Ok(h)
    }
}

/// Elementwise nonlinearity between the two head layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// Two-layer map `D -> d`: `act(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub activation: Activation,
}

impl ProjectionHead {
    pub fn new(prefix: &str, input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            w1: Param::trainable(
                format!("{prefix}.w1"),
                gaussian(rng, input, hidden, 1.0 / (input as f64).sqrt()),
            ),
            b1: Param::trainable(format!("{prefix}.b1"), Tensor::zeros(&[1, hidden])),
            w2: Param::trainable(
                format!("{prefix}.w2"),
                gaussian(rng, hidden, output, 1.0 / (hidden as f64).sqrt()),
            ),
            b2: Param::trainable(format!("{prefix}.b2"), Tensor::zeros(&[1, output])),
            activation: Activation::Tanh,
        }
    }

    /// Identity weights with a linear activation: the head passes input through.
    pub fn identity(prefix: &str, dim: usize) -> Self {
        Self {
            w1: Param::trainable(format!("{prefix}.w1"), Tensor::identity(dim)),
            b1: Param::trainable(format!("{prefix}.b1"), Tensor::zeros(&[1, dim])),
            w2: Param::trainable(format!("{prefix}.w2"), Tensor::identity(dim)),
            b2: Param::trainable(format!("{prefix}.b2"), Tensor::zeros(&[1, dim])),
            activation: Activation::Identity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.value.cols()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "head input width {} vs {}",
                tape.value(x).cols(),
                self.input_dim()
            )));
        }
        let w1 = self.w1.bind(tape);
        let b1 = self.b1.bind(tape);
        let w2 = self.w2.bind(tape);
        let b2 = self.b2.bind(tape);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = match self.activation {
            Activation::Tanh => tape.tanh(h),
            Activation::Identity => h,
        };
        let o = tape.matmul(h, w2);
        Ok(tape.add_row(o, b2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    pub text: ProjectionHead,
    pub video: ProjectionHead,
}

impl ProjectionHeads {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut r = rng::seeded(rng::derive(seed, 31));
        Self {
            text: ProjectionHead::new("head.text", cfg.width, cfg.head_hidden, cfg.proto_dim, &mut r),
            video: ProjectionHead::new("head.video", cfg.width, cfg.head_hidden, cfg.proto_dim, &mut r),
        }
    }
}

/// Projects each row of `features` into the prototype space.
pub fn project_to_prototype_space(features: &Tensor, head: &ProjectionHead) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(features.clone());
    let out = head.forward(&mut tape, x)?;
    Ok(tape.value(out).clone())
}

/// Word features for one token sequence.
pub fn encode_text(tokens: &Tensor, state: &TextEncoderState) -> Result<Tensor> {
    let seqs = Sequences::stack(&[tokens])?;
    let mut tape = Tape::no_grad();
    let out = state.forward(&mut tape, &seqs)?;
    Ok(tape.value(out).clone())
}

/// Frame features for one frame sequence.
pub fn encode_video(frames: &Tensor, state: &VideoEncoderState) -> Result<Tensor> {
    let seqs = Sequences::stack(&[frames])?;
    let mut tape = Tape::no_grad();
    let out = state.forward(&mut tape, &seqs)?;
    Ok(tape.value(out).clone())
}

impl Parameterized for MoeAdapter {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.router];
        for (a, b) in &self.experts {
            v.push(a);
            v.push(b);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.router];
        for (a, b) in &mut self.experts {
            v.push(a);
            v.push(b);
        }
        v
    }
}

impl Parameterized for TextEncoderState {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend([&l.w_q, &l.w_k, &l.w_v]);
            v.extend(l.moe_q.params());
            v.extend(l.moe_k.params());
            v.extend(l.moe_v.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend([&mut l.w_q, &mut l.w_k, &mut l.w_v]);
            v.extend(l.moe_q.params_mut());
            v.extend(l.moe_k.params_mut());
            v.extend(l.moe_v.params_mut());
        }
        v
    }
}

impl Parameterized for VideoEncoderState {
    fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| [&l.w_q, &l.w_k, &l.w_v, &l.a_q, &l.b_q, &l.a_v, &l.b_v])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    &mut l.w_q, &mut l.w_k, &mut l.w_v, &mut l.a_q, &mut l.b_q, &mut l.a_v,
                    &mut l.b_v,
                ]
            })
            .collect()
    }
}

impl Parameterized for ProjectionHead {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl Parameterized for ProjectionHeads {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.text.params();
        v.extend(self.video.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.text.params_mut();
        v.extend(self.video.params_mut());
        v
    }
}
