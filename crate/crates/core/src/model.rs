//! The desk-scale vision-language survival model.
//!
//! Topology: a frozen strided-convolution volume encoder produces `P`
//! visual tokens, a trainable projection lifts them into the word-embedding
//! space, and a small causal transformer decodes packed
//! `[Clinical][Image][Question][Answer]` sequences. A residual adaptor and
//! one of two survival heads (continuous risk or discrete hazard bins) hang
//! off the final hidden state.
//!
//! Parameters live in five flat groups (encoder, projection, decoder,
//! adaptor, head) so the optimizer, freeze policy, and checkpoint format
//! all share one layout authority.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Grads, Tape, Tensor};
use crate::losses::TimeGrid;
use crate::rng::Rng;

pub const UNK: &str = "<unk>";
pub const BOA: &str = "<boa>";
pub const EOA: &str = "<eoa>";
pub const UNK_ID: usize = 0;
pub const BOA_ID: usize = 1;
pub const EOA_ID: usize = 2;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SVTN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("volume has {got} voxels but dims {dims:?} imply {want}")]
    VolumeSize {
        got: usize,
        want: usize,
        dims: [usize; 3],
    },
    #[error("dim {axis} of size {size} not divisible by stride {stride}")]
    ShapeNotDivisible {
        axis: usize,
        size: usize,
        stride: usize,
    },
    #[error("projection expects [{want_rows} × {want_cols}], got [{rows} × {cols}]")]
    ProjectionShape {
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("sequence length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("ensemble expects {want} questions, got {got}")]
    QuestionCount { got: usize, want: usize },
    #[error("checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

// ── tokenizer ──────────────────────────────────────────────────────────────

/// Lowercase word-level tokenizer. Text splits on every non-alphanumeric
/// character; the vocabulary is corpus words ordered by descending
/// frequency, ties broken lexicographically, after the three specials.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

/// Splits into lowercase alphanumeric runs.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl Tokenizer {
    /// Builds a vocabulary from a corpus, keeping at most `max_vocab`
    /// entries including the specials.
    pub fn from_corpus<S: AsRef<str>>(texts: &[S], max_vocab: usize) -> Self {
        assert!(max_vocab > 3, "vocabulary must fit the specials");
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text.as_ref()) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = vec![UNK.to_string(), BOA.to_string(), EOA.to_string()];
        vocab.extend(
            words
                .into_iter()
                .take(max_vocab - 3)
                .map(|(w, _)| w),
        );
        Self::from_vocab(vocab)
    }

    /// Restores a tokenizer from an explicit vocabulary (checkpoint path).
    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Tokenizer { vocab, index }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .iter()
            .map(|w| *self.index.get(w).unwrap_or(&UNK_ID))
            .collect()
    }

    /// Joins tokens with spaces, skipping the specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id > EOA_ID && id < self.vocab.len())
            .map(|&id| self.vocab[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ── configuration and parameters ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Continuous,
    Discrete { bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_text: usize,
    pub d_vis: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// First conv layer: output channels and kernel (= stride) per axis.
    pub conv1_channels: usize,
    pub conv1_kernel: [usize; 3],
    /// Second conv layer outputs `d_vis` channels.
    pub conv2_kernel: [usize; 3],
    pub adaptor_bottleneck: usize,
    pub head: HeadKind,
    pub tied_output: bool,
    pub ensemble_size: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: a 24×24×16 volume becomes 9 visual tokens.
    pub fn desk(vocab: usize, head: HeadKind) -> Self {
        ModelConfig {
            d_text: 64,
            d_vis: 32,
            n_layers: 2,
            n_heads: 4,
            vocab,
            max_len: 128,
            conv1_channels: 16,
            conv1_kernel: [4, 4, 2],
            conv2_kernel: [2, 2, 2],
            adaptor_bottleneck: 16,
            head,
            tied_output: true,
            ensemble_size: 6,
        }
    }

    pub fn validate(&self) {
        assert!(self.d_text.is_multiple_of(self.n_heads), "d_text must split across heads");
        assert!(self.vocab > 3, "vocabulary must fit the specials");
        assert!(self.adaptor_bottleneck >= 1);
        if let HeadKind::Discrete { bins } = self.head {
            assert!(bins >= 2, "discrete head needs at least two bins");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub encoder: bool,
    pub projection: bool,
    pub decoder: bool,
    pub adaptor: bool,
    pub head: bool,
}

impl FreezeFlags {
    pub fn all_frozen() -> Self {
        FreezeFlags {
            encoder: true,
            projection: true,
            decoder: true,
            adaptor: true,
            head: true,
        }
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Projection => self.projection,
            ParamGroup::Decoder => self.decoder,
            ParamGroup::Adaptor => self.adaptor,
            ParamGroup::Head => self.head,
        }
    }
}

/// The five parameter groups, in checkpoint payload order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Projection,
    Decoder,
    Adaptor,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::Projection,
        ParamGroup::Decoder,
        ParamGroup::Adaptor,
        ParamGroup::Head,
    ];
}

/// One named parameter block inside a group's flat buffer.
#[derive(Debug, Clone)]
pub struct Slot {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layout of every group for a given config. All parameter consumers
/// (init, binding, optimizer, checkpoints) derive offsets from here.
pub fn group_layout(cfg: &ModelConfig, group: ParamGroup) -> Vec<Slot> {
    let d = cfg.d_text;
    let mut slots = Vec::new();
    let mut offset = 0;
    let mut push = |name: &'static str, shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        slots.push(Slot {
            name,
            shape,
            offset,
        });
        offset += len;
    };
    match group {
        ParamGroup::Encoder => {
            let k1 = cfg.conv1_kernel.iter().product::<usize>();
            let k2 = cfg.conv2_kernel.iter().product::<usize>() * cfg.conv1_channels;
            push("conv1_w", vec![cfg.conv1_channels, k1]);
            push("conv1_b", vec![cfg.conv1_channels]);
            push("conv2_w", vec![cfg.d_vis, k2]);
            push("conv2_b", vec![cfg.d_vis]);
        }
        ParamGroup::Projection => {
            push("w", vec![d, cfg.d_vis]);
        }
        ParamGroup::Decoder => {
            push("emb", vec![cfg.vocab, d]);
            push("pos", vec![cfg.max_len, d]);
            for _ in 0..cfg.n_layers {
                push("ln1_g", vec![d]);
                push("ln1_b", vec![d]);
                push("wq", vec![d, d]);
                push("wk", vec![d, d]);
                push("wv", vec![d, d]);
                push("wo", vec![d, d]);
                push("ln2_g", vec![d]);
                push("ln2_b", vec![d]);
                push("mlp_w1", vec![4 * d, d]);
                push("mlp_b1", vec![4 * d]);
                push("mlp_w2", vec![d, 4 * d]);
                push("mlp_b2", vec![d]);
            }
            push("lnf_g", vec![d]);
            push("lnf_b", vec![d]);
            if !cfg.tied_output {
                push("w_out", vec![cfg.vocab, d]);
            }
        }
        ParamGroup::Adaptor => {
            push("down", vec![cfg.adaptor_bottleneck, d]);
            push("up", vec![d, cfg.adaptor_bottleneck]);
        }
        ParamGroup::Head => match cfg.head {
            HeadKind::Continuous => {
                push("w", vec![d]);
                push("b", vec![1]);
            }
            HeadKind::Discrete { bins } => {
                push("w", vec![bins, d]);
                push("b", vec![bins]);
            }
        },
    }
    slots
}

pub fn group_len(cfg: &ModelConfig, group: ParamGroup) -> usize {
    group_layout(cfg, group)
        .iter()
        .map(|s| s.len())
        .sum()
}

/// All learnable state: one flat f64 buffer per group plus freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<f64>,
    pub projection: Vec<f64>,
    pub decoder: Vec<f64>,
    pub adaptor: Vec<f64>,
    pub head: Vec<f64>,
    pub freeze: FreezeFlags,
}

impl ModelParams {
    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::Encoder => &self.encoder,
            ParamGroup::Projection => &self.projection,
            ParamGroup::Decoder => &self.decoder,
            ParamGroup::Adaptor => &self.adaptor,
            ParamGroup::Head => &self.head,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Vec<f64> {
        match g {
            ParamGroup::Encoder => &mut self.encoder,
            ParamGroup::Projection => &mut self.projection,
            ParamGroup::Decoder => &mut self.decoder,
            ParamGroup::Adaptor => &mut self.adaptor,
            ParamGroup::Head => &mut self.head,
        }
    }

    /// Borrow of one named slot within a group.
    pub fn slot(&self, group: ParamGroup, name: &str) -> &[f64] {
        let layout = group_layout(&self.config, group);
        let slot = layout
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no slot `{name}` in {group:?}"));
        &self.group(group)[slot.offset..slot.offset + slot.len()]
    }

    pub fn slot_mut(&mut self, group: ParamGroup, name: &str) -> &mut [f64] {
        let layout = group_layout(&self.config, group);
        let slot = layout
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no slot `{name}` in {group:?}"))
            .clone();
        &mut self.group_mut(group)[slot.offset..slot.offset + slot.len()]
    }

    pub fn total_len(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.group(g).len()).sum()
    }
}

/// Deterministic initialization from a seed. Weight matrices draw normals
/// scaled by 1/√fan_in; biases, layer-norm shifts, and the adaptor's Up
/// matrix start at zero so the adaptor is the identity and a zero volume
/// encodes to zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    cfg.validate();
    let mut params = ModelParams {
        config: cfg.clone(),
        encoder: Vec::new(),
        projection: Vec::new(),
        decoder: Vec::new(),
        adaptor: Vec::new(),
        head: Vec::new(),
        freeze: FreezeFlags::all_frozen(),
    };
    for (gi, &group) in ParamGroup::ALL.iter().enumerate() {
        let mut rng = Rng::new(seed, 100 + gi as u64);
        let mut buf = Vec::with_capacity(group_len(cfg, group));
        for slot in group_layout(cfg, group) {
            let n = slot.len();
            let fan_in = *slot.shape.last().unwrap();
            let fill: Box<dyn Fn(&mut Rng) -> f64> = match slot.name {
                // Zeros: every bias, layer-norm shift, and the Up matrix.
                "conv1_b" | "conv2_b" | "ln1_b" | "ln2_b" | "mlp_b1" | "mlp_b2" | "lnf_b"
                | "up" | "b" => Box::new(|_| 0.0),
                // Layer-norm scales start at one.
                "ln1_g" | "ln2_g" | "lnf_g" => Box::new(|_| 1.0),
                _ => {
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    Box::new(move |r: &mut Rng| scale * r.normal())
                }
            };
            for _ in 0..n {
                buf.push(fill(&mut rng));
            }
        }
        *params.group_mut(group) = buf;
    }
    params
}

// ── volume encoder ─────────────────────────────────────────────────────────

/// One strided (kernel = stride) 3D convolution: non-overlapping patches
/// flattened and multiplied by `[c_out × patch]` weights. Input layout is
/// x-fastest with channels innermost.
fn conv_block(
    input: &[f64],
    dims: [usize; 3],
    c_in: usize,
    kernel: [usize; 3],
    w: &[f64],
    b: &[f64],
    c_out: usize,
) -> Result<(Vec<f64>, [usize; 3]), ModelError> {
    let mut out_dims = [0usize; 3];
    for axis in 0..3 {
        if !dims[axis].is_multiple_of(kernel[axis]) {
            return Err(ModelError::ShapeNotDivisible {
                axis,
                size: dims[axis],
                stride: kernel[axis],
            });
        }
        out_dims[axis] = dims[axis] / kernel[axis];
    }
    let [nx, ny, _] = dims;
    let [ox, oy, oz] = out_dims;
    let patch = kernel[0] * kernel[1] * kernel[2] * c_in;
    let mut out = vec![0.0; ox * oy * oz * c_out];
    for bz in 0..oz {
        for by in 0..oy {
            for bx in 0..ox {
                // Flatten the patch in (dz, dy, dx, channel) order.
                let mut patch_buf = Vec::with_capacity(patch);
                for dz in 0..kernel[2] {
                    for dy in 0..kernel[1] {
                        for dx in 0..kernel[0] {
                            let x = bx * kernel[0] + dx;
                            let y = by * kernel[1] + dy;
                            let z = bz * kernel[2] + dz;
                            let base = ((z * ny + y) * nx + x) * c_in;
                            patch_buf.extend_from_slice(&input[base..base + c_in]);
                        }
                    }
                }
                let cell = ((bz * oy + by) * ox + bx) * c_out;
                for ch in 0..c_out {
                    let row = &w[ch * patch..(ch + 1) * patch];
                    let mut acc = b[ch];
                    for (pv, wv) in patch_buf.iter().zip(row) {
                        acc += pv * wv;
                    }
                    out[cell + ch] = gelu_scalar(acc);
                }
            }
        }
    }
    Ok((out, out_dims))
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
}

/// Encodes a preprocessed volume into `P = px·py` visual tokens of width
/// `d_vis` by two strided convolutions and a mean over the out-of-plane
/// axis. Returns row-major `[P × d_vis]` plain values: the encoder is
/// frozen in both stages, so its output enters the tape as a constant.
/// Half-width of the clipped Hounsfield range: voxels are scaled by
/// `1/HU_SCALE` so the convolutions see values near ±1 instead of ±1000,
/// keeping their pre-activations out of the GELU saturation zone.
const HU_SCALE: f64 = 1000.0;

pub fn encode_volume(
    params: &ModelParams,
    volume: &[f64],
    dims: [usize; 3],
) -> Result<Vec<f64>, ModelError> {
    let cfg = &params.config;
    let want = dims[0] * dims[1] * dims[2];
    if volume.len() != want {
        return Err(ModelError::VolumeSize {
            got: volume.len(),
            want,
            dims,
        });
    }
    let scaled: Vec<f64> = volume.iter().map(|&v| v / HU_SCALE).collect();
    let (h1, d1) = conv_block(
        &scaled,
        dims,
        1,
        cfg.conv1_kernel,
        params.slot(ParamGroup::Encoder, "conv1_w"),
        params.slot(ParamGroup::Encoder, "conv1_b"),
        cfg.conv1_channels,
    )?;
    let (h2, d2) = conv_block(
        &h1,
        d1,
        cfg.conv1_channels,
        cfg.conv2_kernel,
        params.slot(ParamGroup::Encoder, "conv2_w"),
        params.slot(ParamGroup::Encoder, "conv2_b"),
        cfg.d_vis,
    )?;
    // Average over the out-of-plane (z) axis; tokens raster over (y, x).
    let [px, py, q] = d2;
    let dv = cfg.d_vis;
    let mut tokens = vec![0.0; px * py * dv];
    for z in 0..q {
        for y in 0..py {
            for x in 0..px {
                let cell = ((z * py + y) * px + x) * dv;
                let tok = (y * px + x) * dv;
                for ch in 0..dv {
                    tokens[tok + ch] += h2[cell + ch];
                }
            }
        }
    }
    for v in &mut tokens {
        *v /= q as f64;
    }
    Ok(tokens)
}

// ── tape binding ───────────────────────────────────────────────────────────

/// Per-layer tensors of the bound decoder.
#[derive(Debug)]
pub struct BoundLayer {
    pub ln1: (Tensor, Tensor),
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2: (Tensor, Tensor),
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

#[derive(Debug)]
pub enum BoundHead {
    Continuous { w: Tensor, b: Tensor },
    Discrete { w: Tensor, b: Tensor },
}

/// Model parameters pushed onto a tape as leaves, one tensor per slot,
/// remembering each slot's group and offset so gradients can be flattened
/// back into group buffers.
#[derive(Debug)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub projection: Tensor,
    pub emb: Tensor,
    pub pos: Tensor,
    pub layers: Vec<BoundLayer>,
    pub lnf: (Tensor, Tensor),
    pub w_out: Option<Tensor>,
    pub adaptor_down: Tensor,
    pub adaptor_up: Tensor,
    pub head: BoundHead,
    slots: Vec<(ParamGroup, usize, usize, Tensor)>,
}

/// Pushes every non-encoder parameter slot onto the tape. The encoder is
/// permanently frozen and runs off-tape.
pub fn bind(tape: &mut Tape, params: &ModelParams) -> BoundModel {
    let cfg = &params.config;
    let mut slots = Vec::new();
    let mut by_name: HashMap<(ParamGroup, &'static str, usize), Tensor> = HashMap::new();
    for &group in &[
        ParamGroup::Projection,
        ParamGroup::Decoder,
        ParamGroup::Adaptor,
        ParamGroup::Head,
    ] {
        let buf = params.group(group);
        let mut seen: HashMap<&'static str, usize> = HashMap::new();
        for slot in group_layout(cfg, group) {
            let occurrence = seen.entry(slot.name).or_insert(0);
            let t = tape.param(
                slot.shape.clone(),
                buf[slot.offset..slot.offset + slot.len()].to_vec(),
            );
            slots.push((group, slot.offset, slot.len(), t));
            by_name.insert((group, slot.name, *occurrence), t);
            *occurrence += 1;
        }
    }
    let get = |group, name, occ| by_name[&(group, name, occ)];
    let layers = (0..cfg.n_layers)
        .map(|l| BoundLayer {
            ln1: (get(ParamGroup::Decoder, "ln1_g", l), get(ParamGroup::Decoder, "ln1_b", l)),
            wq: get(ParamGroup::Decoder, "wq", l),
            wk: get(ParamGroup::Decoder, "wk", l),
            wv: get(ParamGroup::Decoder, "wv", l),
            wo: get(ParamGroup::Decoder, "wo", l),
            ln2: (get(ParamGroup::Decoder, "ln2_g", l), get(ParamGroup::Decoder, "ln2_b", l)),
            mlp_w1: get(ParamGroup::Decoder, "mlp_w1", l),
            mlp_b1: get(ParamGroup::Decoder, "mlp_b1", l),
            mlp_w2: get(ParamGroup::Decoder, "mlp_w2", l),
            mlp_b2: get(ParamGroup::Decoder, "mlp_b2", l),
        })
        .collect();
    BoundModel {
        config: cfg.clone(),
        projection: get(ParamGroup::Projection, "w", 0),
        emb: get(ParamGroup::Decoder, "emb", 0),
        pos: get(ParamGroup::Decoder, "pos", 0),
        layers,
        lnf: (get(ParamGroup::Decoder, "lnf_g", 0), get(ParamGroup::Decoder, "lnf_b", 0)),
        w_out: (!cfg.tied_output).then(|| get(ParamGroup::Decoder, "w_out", 0)),
        adaptor_down: get(ParamGroup::Adaptor, "down", 0),
        adaptor_up: get(ParamGroup::Adaptor, "up", 0),
        head: match cfg.head {
            HeadKind::Continuous => BoundHead::Continuous {
                w: get(ParamGroup::Head, "w", 0),
                b: get(ParamGroup::Head, "b", 0),
            },
            HeadKind::Discrete { .. } => BoundHead::Discrete {
                w: get(ParamGroup::Head, "w", 0),
                b: get(ParamGroup::Head, "b", 0),
            },
        },
        slots,
    }
}

impl BoundModel {
    /// Flattens accumulated gradients back into a group-shaped buffer.
    /// Slots the loss never touched contribute zeros.
    pub fn group_grads(&self, grads: &Grads, group: ParamGroup, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for &(g, offset, slen, t) in &self.slots {
            if g != group {
                continue;
            }
            if let Some(gv) = grads.wrt(t) {
                out[offset..offset + slen].copy_from_slice(gv);
            }
        }
        out
    }
}

// ── forward pieces ─────────────────────────────────────────────────────────

/// `H_v = Z_v · Wᵀ`: projects visual tokens `[P × d_vis]` into the text
/// embedding space with `w: [d_text × d_vis]`.
pub fn project_visual(tape: &mut Tape, z_v: Tensor, w: Tensor) -> Result<Tensor, ModelError> {
    let zs = tape.shape(z_v).to_vec();
    let ws = tape.shape(w).to_vec();
    if zs.len() != 2 || ws.len() != 2 || zs[1] != ws[1] {
        return Err(ModelError::ProjectionShape {
            rows: *ws.first().unwrap_or(&0),
            cols: *ws.get(1).unwrap_or(&0),
            want_rows: *ws.first().unwrap_or(&0),
            want_cols: zs.get(1).copied().unwrap_or(0),
        });
    }
    Ok(tape.matmul_nt(z_v, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Clinical,
    Image,
    Question,
    Answer,
}

/// A packed instruction sequence on the tape. `ids` aligns with positions;
/// image positions hold `UNK_ID` placeholders (they are never supervised),
/// and `loss_mask` is true exactly on Answer positions.
#[derive(Debug)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub embeddings: Tensor,
    pub segments: Vec<Segment>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Packs `[Clinical][Image][Question][Answer]`. Word segments embed via the
/// decoder table; the image segment splices `h_v` directly. An empty
/// clinical list drops that segment; an empty answer means inference mode
/// (all-false mask). Callers append `<boa>`/`<eoa>` to the question and
/// answer ids themselves.
pub fn pack_sequence(
    tape: &mut Tape,
    bound: &BoundModel,
    clinical: &[usize],
    h_v: Tensor,
    question: &[usize],
    answer: &[usize],
) -> Result<TokenSequence, ModelError> {
    let cfg = &bound.config;
    let p = tape.shape(h_v)[0];
    let len = clinical.len() + p + question.len() + answer.len();
    if len > cfg.max_len {
        return Err(ModelError::SequenceTooLong {
            len,
            max: cfg.max_len,
        });
    }
    for &id in clinical.iter().chain(question).chain(answer) {
        if id >= cfg.vocab {
            return Err(ModelError::TokenOutOfVocab {
                id,
                vocab: cfg.vocab,
            });
        }
    }

    let mut ids = Vec::with_capacity(len);
    let mut segments = Vec::with_capacity(len);
    let mut parts = Vec::new();
    if !clinical.is_empty() {
        parts.push(tape.gather_rows(bound.emb, clinical));
        ids.extend_from_slice(clinical);
        segments.extend(std::iter::repeat_n(Segment::Clinical, clinical.len()));
    }
    parts.push(h_v);
    ids.extend(std::iter::repeat_n(UNK_ID, p));
    segments.extend(std::iter::repeat_n(Segment::Image, p));
    if !question.is_empty() {
        parts.push(tape.gather_rows(bound.emb, question));
        ids.extend_from_slice(question);
        segments.extend(std::iter::repeat_n(Segment::Question, question.len()));
    }
    if !answer.is_empty() {
        parts.push(tape.gather_rows(bound.emb, answer));
        ids.extend_from_slice(answer);
        segments.extend(std::iter::repeat_n(Segment::Answer, answer.len()));
    }
    let embeddings = tape.concat_rows(&parts);
    let loss_mask = segments.iter().map(|&s| s == Segment::Answer).collect();
    Ok(TokenSequence {
        ids,
        embeddings,
        segments,
        loss_mask,
    })
}

fn causal_mask(tape: &mut Tape, l: usize) -> Tensor {
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        for j in (i + 1)..l {
            data[i * l + j] = -1e30;
        }
    }
    tape.constant(vec![l, l], data)
}

/// Runs the causal decoder and returns the final hidden states `[L × d]`.
pub fn decode_hidden(tape: &mut Tape, bound: &BoundModel, seq: &TokenSequence) -> Tensor {
    let cfg = &bound.config;
    let l = seq.len();
    assert!(l >= 1, "decode needs at least one position");
    let d = cfg.d_text;
    let dh = d / cfg.n_heads;
    let positions: Vec<usize> = (0..l).collect();
    let pos = tape.gather_rows(bound.pos, &positions);
    let mut x = tape.add(seq.embeddings, pos);
    let mask = causal_mask(tape, l);
    let scale = 1.0 / (dh as f64).sqrt();

    for layer in &bound.layers {
        let a = tape.layer_norm(x, layer.ln1.0, layer.ln1.1, 1e-5);
        let q = tape.matmul_nt(a, layer.wq);
        let k = tape.matmul_nt(a, layer.wk);
        let v = tape.matmul_nt(a, layer.wv);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scaled = tape.scale(scores, scale);
            let masked = tape.add(scaled, mask);
            let attn = tape.softmax_rows(masked);
            heads.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat_cols(&heads);
        let attn_out = tape.matmul_nt(merged, layer.wo);
        x = tape.add(x, attn_out);

        let m = tape.layer_norm(x, layer.ln2.0, layer.ln2.1, 1e-5);
        let h1 = tape.matmul_nt(m, layer.mlp_w1);
        let h1 = tape.add_row(h1, layer.mlp_b1);
        let g = tape.gelu(h1);
        let h2 = tape.matmul_nt(g, layer.mlp_w2);
        let h2 = tape.add_row(h2, layer.mlp_b2);
        x = tape.add(x, h2);
    }
    tape.layer_norm(x, bound.lnf.0, bound.lnf.1, 1e-5)
}

/// Vocabulary logits from hidden states: tied to the embedding table by
/// default, or a separate output matrix when configured.
pub fn logits_from_hidden(tape: &mut Tape, bound: &BoundModel, hidden: Tensor) -> Tensor {
    let table = bound.w_out.unwrap_or(bound.emb);
    tape.matmul_nt(hidden, table)
}

/// Full decode: hidden states and vocabulary logits.
pub fn decode(tape: &mut Tape, bound: &BoundModel, seq: &TokenSequence) -> (Tensor, Tensor) {
    let hidden = decode_hidden(tape, bound, seq);
    let logits = logits_from_hidden(tape, bound, hidden);
    (hidden, logits)
}

/// Mean hidden state across all positions.
pub fn pool_hidden(tape: &mut Tape, hidden: Tensor) -> Tensor {
    tape.mean_rows(hidden)
}

/// Output of the active survival head.
#[derive(Debug, Clone, Copy)]
pub enum HeadOut {
    /// Scalar risk tensor `[1]`.
    Risk(Tensor),
    /// Probability vector `[K]` (softmax row).
    Probs(Tensor),
}

/// Residual adaptor plus the active head, fed by the final-position hidden
/// state: `z = h_L + Up(gelu(Down(h_L)))`.
pub fn survival_branch(
    tape: &mut Tape,
    bound: &BoundModel,
    hidden: Tensor,
) -> (Tensor, HeadOut) {
    let l = tape.shape(hidden)[0];
    let d = bound.config.d_text;
    let h_last = tape.pick_row(hidden, l - 1);
    let down = tape.matmul_nt(h_last, bound.adaptor_down);
    let act = tape.gelu(down);
    let up = tape.matmul_nt(act, bound.adaptor_up);
    let up_vec = tape.reshape(up, vec![d]);
    let z_surv = tape.add(h_last, up_vec);

    let out = match bound.head {
        BoundHead::Continuous { w, b } => {
            let prod = tape.mul(w, z_surv);
            let dot = tape.sum_all(prod);
            HeadOut::Risk(tape.add(dot, b))
        }
        BoundHead::Discrete { w, b } => {
            let logits = tape.matmul_nt(z_surv, w);
            let logits = tape.add_row(logits, b);
            let probs = tape.softmax_rows(logits);
            let bins = tape.shape(probs)[1];
            HeadOut::Probs(tape.reshape(probs, vec![bins]))
        }
    };
    (z_surv, out)
}

/// Scalar risk from a discrete probability row: the sum of the CDF over
/// bins. Earlier mass ⇒ larger score.
pub fn discrete_risk_score(probs: &[f64]) -> f64 {
    let mut cdf = 0.0;
    let mut score = 0.0;
    for &p in probs {
        cdf += p;
        score += cdf;
    }
    score
}

pub fn average_risks(risks: &[f64]) -> f64 {
    risks.iter().sum::<f64>() / risks.len() as f64
}

/// One forward pass to the active head, without gradients.
pub fn predict_head(
    params: &ModelParams,
    clinical: &[usize],
    z_v: &[f64],
    question: &[usize],
) -> Result<Vec<f64>, ModelError> {
    let cfg = &params.config;
    let mut tape = Tape::no_grad();
    let bound = bind(&mut tape, params);
    let p = z_v.len() / cfg.d_vis;
    let z = tape.constant(vec![p, cfg.d_vis], z_v.to_vec());
    let h_v = project_visual(&mut tape, z, bound.projection)?;
    let seq = pack_sequence(&mut tape, &bound, clinical, h_v, question, &[])?;
    let hidden = decode_hidden(&mut tape, &bound, &seq);
    let (_, head) = survival_branch(&mut tape, &bound, hidden);
    Ok(match head {
        HeadOut::Risk(r) => tape.value(r).to_vec(),
        HeadOut::Probs(p) => tape.value(p).to_vec(),
    })
}

/// Ensemble prediction over the fixed question set: runs a full forward
/// pass per question and averages scalar risks (continuous head) or
/// probability vectors before scoring (discrete head).
pub fn ensemble_predict(
    params: &ModelParams,
    clinical: &[usize],
    z_v: &[f64],
    questions: &[Vec<usize>],
) -> Result<f64, ModelError> {
    let cfg = &params.config;
    if questions.len() != cfg.ensemble_size {
        return Err(ModelError::QuestionCount {
            got: questions.len(),
            want: cfg.ensemble_size,
        });
    }
    let outputs: Vec<Vec<f64>> = questions
        .iter()
        .map(|q| predict_head(params, clinical, z_v, q))
        .collect::<Result<_, _>>()?;
    match cfg.head {
        HeadKind::Continuous => {
            let risks: Vec<f64> = outputs.iter().map(|o| o[0]).collect();
            Ok(average_risks(&risks))
        }
        HeadKind::Discrete { bins } => {
            let mut mean = vec![0.0; bins];
            for o in &outputs {
                for (m, &v) in mean.iter_mut().zip(o) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= outputs.len() as f64;
            }
            Ok(discrete_risk_score(&mean))
        }
    }
}

/// Greedy decoding: argmax token by token until `<eoa>` or `max_tokens`.
/// The returned ids exclude the terminator.
pub fn generate(
    params: &ModelParams,
    clinical: &[usize],
    z_v: &[f64],
    question: &[usize],
    max_tokens: usize,
) -> Result<Vec<usize>, ModelError> {
    let cfg = &params.config;
    let mut tape = Tape::no_grad();
    let bound = bind(&mut tape, params);
    let p = z_v.len() / cfg.d_vis;
    let z = tape.constant(vec![p, cfg.d_vis], z_v.to_vec());
    let h_v = project_visual(&mut tape, z, bound.projection)?;

    let mut answer: Vec<usize> = Vec::new();
    while answer.len() < max_tokens {
        let seq = pack_sequence(&mut tape, &bound, clinical, h_v, question, &answer)?;
        let l = seq.len();
        let hidden = decode_hidden(&mut tape, &bound, &seq);
        let last = tape.pick_row(hidden, l - 1);
        let table = bound.w_out.unwrap_or(bound.emb);
        let logits = tape.matmul_nt(last, table);
        let row = tape.value(logits);
        let next = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        if next == EOA_ID {
            break;
        }
        answer.push(next);
    }
    Ok(answer)
}

// ── checkpoints ────────────────────────────────────────────────────────────

/// Everything a checkpoint carries besides the parameter payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub freeze: FreezeFlags,
    pub vocab: Vec<String>,
    pub seed: u64,
    pub step: u64,
    pub time_grid: Option<TimeGrid>,
    pub sigma: Option<f64>,
    pub group_lens: Vec<usize>,
}

/// Writes `SVTN | version | header length | JSON header | f64 LE payload`,
/// payload in [`ParamGroup::ALL`] order. Byte-exact across round-trips.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    vocab: &[String],
    seed: u64,
    step: u64,
    time_grid: Option<&TimeGrid>,
    sigma: Option<f64>,
) -> Result<(), ModelError> {
    let meta = CheckpointMeta {
        config: params.config.clone(),
        freeze: params.freeze,
        vocab: vocab.to_vec(),
        seed,
        step,
        time_grid: time_grid.cloned(),
        sigma,
        group_lens: ParamGroup::ALL
            .iter()
            .map(|&g| params.group(g).len())
            .collect(),
    };
    let header = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for &group in &ParamGroup::ALL {
        for &v in params.group(group) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta), ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| ModelError::CheckpointFormat(msg.to_string());
    if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(fail("truncated header"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let total: usize = meta.group_lens.iter().sum();
    let payload = &bytes[16 + header_len..];
    if payload.len() != total * 8 {
        return Err(ModelError::CheckpointFormat(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    for (&g, &len) in ParamGroup::ALL.iter().zip(&meta.group_lens) {
        let want = group_len(&meta.config, g);
        if len != want {
            return Err(ModelError::CheckpointFormat(format!(
                "group {g:?} holds {len} values, config implies {want}"
            )));
        }
    }
    let mut cursor = 0;
    let mut read_group = |len: usize| -> Vec<f64> {
        let out = payload[cursor..cursor + len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += len * 8;
        out
    };
    let params = ModelParams {
        config: meta.config.clone(),
        encoder: read_group(meta.group_lens[0]),
        projection: read_group(meta.group_lens[1]),
        decoder: read_group(meta.group_lens[2]),
        adaptor: read_group(meta.group_lens[3]),
        head: read_group(meta.group_lens[4]),
        freeze: meta.freeze,
    };
    Ok((params, meta))
}
