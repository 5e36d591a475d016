//! Frozen GPT-style decoder used as the device-side backbone.
//!
//! Each layer is post-norm: `u = LN(MSA(b) + b)`, `b' = LN(FFN(u) + u)`, with
//! causal scaled dot-product attention and learned positional embeddings.
//! [`forward_collect`] runs the whole stack and records the activation after
//! every configured block cut.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::Rng;
use crate::tensor::{layer_norm, matmul, softmax_in_place, Activation, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MBWT";
pub const WEIGHTS_VERSION: u16 = 1;

pub const LN_EPS: f32 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
    /// Layer counts after which a tap is emitted; strictly ascending, last == `layers`.
    pub block_cuts: Vec<usize>,
    /// Emit the embedding output as an extra leading tap.
    pub tap_embedding: bool,
}

impl BackboneConfig {
    /// Config with `ffn_dim = 4 * hidden` and `blocks` uniform cuts.
    pub fn new(
        vocab_size: usize,
        hidden: usize,
        layers: usize,
        heads: usize,
        max_seq: usize,
        blocks: usize,
    ) -> Result<Self> {
        let cfg = Self {
            vocab_size,
            hidden,
            layers,
            heads,
            ffn_dim: 4 * hidden,
            max_seq,
            block_cuts: uniform_cuts(layers, blocks)?,
            tap_embedding: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.hidden == 0 || self.layers == 0 || self.max_seq == 0 {
            return bad("vocab, hidden, layers and max_seq must be positive".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive".into());
        }
        let m = self.block_cuts.len();
        if m == 0 || m > self.layers {
            return bad(format!("need 1..={} block cuts, got {m}", self.layers));
        }
        if self.block_cuts.windows(2).any(|w| w[0] >= w[1]) || self.block_cuts[0] == 0 {
            return bad(format!("block cuts must be strictly ascending and positive: {:?}", self.block_cuts));
        }
        if *self.block_cuts.last().unwrap() != self.layers {
            return bad(format!("last block cut must equal layer count {}", self.layers));
        }
        Ok(())
    }

    /// Number of blocks M (one adapter each).
    pub fn blocks(&self) -> usize {
        self.block_cuts.len()
    }

    /// Number of taps transmitted per iteration.
    pub fn gamma(&self) -> usize {
        self.blocks() + usize::from(self.tap_embedding)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn header_bytes(&self) -> Vec<u8> {
        let mut w = LeWriter::new(Vec::new());
        for v in [
            self.vocab_size,
            self.hidden,
            self.layers,
            self.heads,
            self.ffn_dim,
            self.max_seq,
            self.blocks(),
        ] {
            w.u32(v as u32).unwrap();
        }
        for &c in &self.block_cuts {
            w.u32(c as u32).unwrap();
        }
        w.u8(u8::from(self.tap_embedding)).unwrap();
        w.into_inner()
    }

    /// Stable 64-bit digest of the config, exchanged during the handshake.
    pub fn digest(&self) -> u64 {
        let hash = Sha256::digest(self.header_bytes());
        u64::from_le_bytes(hash[..8].try_into().unwrap())
    }
}

/// `blocks` cuts spreading `layers` as evenly as possible, larger groups first.
pub fn uniform_cuts(layers: usize, blocks: usize) -> Result<Vec<usize>> {
    if blocks == 0 || blocks > layers {
        return Err(Error::Config(format!(
            "cannot split {layers} layers into {blocks} blocks"
        )));
    }
    let (base, extra) = (layers / blocks, layers % blocks);
    let mut cuts = Vec::with_capacity(blocks);
    let mut at = 0;
    for i in 0..blocks {
        at += base + usize::from(i < extra);
        cuts.push(at);
    }
    Ok(cuts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Tensor<f32>,
    pub b_q: Tensor<f32>,
    pub w_k: Tensor<f32>,
    pub b_k: Tensor<f32>,
    pub w_v: Tensor<f32>,
    pub b_v: Tensor<f32>,
    pub w_o: Tensor<f32>,
    pub b_o: Tensor<f32>,
    pub ln1_gamma: Tensor<f32>,
    pub ln1_beta: Tensor<f32>,
    pub w_1: Tensor<f32>,
    pub b_1: Tensor<f32>,
    pub w_2: Tensor<f32>,
    pub b_2: Tensor<f32>,
    pub ln2_gamma: Tensor<f32>,
    pub ln2_beta: Tensor<f32>,
}

impl LayerWeights {
    fn init(h: usize, f: usize, rng: &mut Rng) -> Self {
        let w = |shape: &[usize], rng: &mut Rng| Tensor::randn(shape, INIT_STD, rng);
        Self {
            w_q: w(&[h, h], rng),
            b_q: Tensor::zeros(&[h]),
            w_k: w(&[h, h], rng),
            b_k: Tensor::zeros(&[h]),
            w_v: w(&[h, h], rng),
            b_v: Tensor::zeros(&[h]),
            w_o: w(&[h, h], rng),
            b_o: Tensor::zeros(&[h]),
            ln1_gamma: Tensor::full(&[h], 1.0),
            ln1_beta: Tensor::zeros(&[h]),
            w_1: w(&[h, f], rng),
            b_1: Tensor::zeros(&[f]),
            w_2: w(&[f, h], rng),
            b_2: Tensor::zeros(&[h]),
            ln2_gamma: Tensor::full(&[h], 1.0),
            ln2_beta: Tensor::zeros(&[h]),
        }
    }

    /// All tensors in the fixed serialization order.
    pub fn tensors(&self) -> [&Tensor<f32>; 16] {
        [
            &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v, &self.w_o,
            &self.b_o, &self.ln1_gamma, &self.ln1_beta, &self.w_1, &self.b_1, &self.w_2,
            &self.b_2, &self.ln2_gamma, &self.ln2_beta,
        ]
    }

    fn shapes(h: usize, f: usize) -> [Vec<usize>; 16] {
        [
            vec![h, h], vec![h], vec![h, h], vec![h], vec![h, h], vec![h], vec![h, h],
            vec![h], vec![h], vec![h], vec![h, f], vec![f], vec![f, h], vec![h], vec![h],
            vec![h],
        ]
    }

    fn from_tensors(mut t: Vec<Tensor<f32>>) -> Self {
        let mut next = || t.remove(0);
        Self {
            w_q: next(),
            b_q: next(),
            w_k: next(),
            b_k: next(),
            w_v: next(),
            b_v: next(),
            w_o: next(),
            b_o: next(),
            ln1_gamma: next(),
            ln1_beta: next(),
            w_1: next(),
            b_1: next(),
            w_2: next(),
            b_2: next(),
            ln2_gamma: next(),
            ln2_beta: next(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    config: BackboneConfig,
    pub token_embedding: Tensor<f32>,
    pub position_embedding: Tensor<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Tensor<f32>,
    pub final_beta: Tensor<f32>,
}

/// Gaussian(0, 0.02) matrices, zero biases and unit layer-norm gains.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneWeights> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let h = config.hidden;
    let token_embedding = Tensor::randn(&[config.vocab_size, h], INIT_STD, &mut rng);
    let position_embedding = Tensor::randn(&[config.max_seq, h], INIT_STD, &mut rng);
    let layers = (0..config.layers)
        .map(|_| LayerWeights::init(h, config.ffn_dim, &mut rng))
        .collect();
    Ok(BackboneWeights {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
        final_gamma: Tensor::full(&[h], 1.0),
        final_beta: Tensor::zeros(&[h]),
    })
}

impl BackboneWeights {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Same weights tapped at different cut points.
    pub fn with_cuts(mut self, block_cuts: Vec<usize>, tap_embedding: bool) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.block_cuts = block_cuts;
        cfg.tap_embedding = tap_embedding;
        cfg.validate()?;
        self.config = cfg;
        Ok(self)
    }

    fn tensors(&self) -> Vec<&Tensor<f32>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.push(&self.final_gamma);
        out.push(&self.final_beta);
        out
    }

    /// SHA-256 over every weight's bit pattern, truncated to 64 bits.
    pub fn checksum(&self) -> u64 {
        let mut hasher = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        u64::from_le_bytes(hasher.finalize()[..8].try_into().unwrap())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn write_to(&self, out: impl Write) -> Result<()> {
        let mut w = LeWriter::new(out);
        w.bytes(WEIGHTS_MAGIC)?;
        w.u16(WEIGHTS_VERSION)?;
        w.bytes(&self.config.header_bytes())?;
        for t in self.tensors() {
            w.tensor(t)?;
        }
        Ok(())
    }

    /// Load a weight file. When `expected` is given, the stored config must
    /// match it exactly.
    pub fn load(path: impl AsRef<Path>, expected: Option<&BackboneConfig>) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        Self::read_from(file, expected)
    }

    pub fn read_from(input: impl Read, expected: Option<&BackboneConfig>) -> Result<Self> {
        let mut r = LeReader::new(input);
        let magic: [u8; 4] = r.array()?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format(format!("bad weight magic {magic:02x?}")));
        }
        let version = r.u16()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weight version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let [vocab_size, hidden, layers, heads, ffn_dim, max_seq, m] = dims;
        if m > layers.max(1) * 2 + 64 {
            return Err(Error::Format(format!("implausible block count {m}")));
        }
        let block_cuts = (0..m)
            .map(|_| r.u32().map(|c| c as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let flags = r.u8()?;
        let config = BackboneConfig {
            vocab_size,
            hidden,
            layers,
            heads,
            ffn_dim,
            max_seq,
            block_cuts,
            tap_embedding: flags & 1 != 0,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("stored config invalid: {e}")))?;
        if let Some(want) = expected {
            if want != &config {
                return Err(Error::Shape(format!(
                    "weight file config {config:?} does not match expected {want:?}"
                )));
            }
        }
        let h = hidden;
        let token_embedding = r.tensor(&[vocab_size, h])?;
        let position_embedding = r.tensor(&[max_seq, h])?;
        let mut layer_weights = Vec::with_capacity(layers);
        for _ in 0..layers {
            let ts = LayerWeights::shapes(h, ffn_dim)
                .iter()
                .map(|s| r.tensor(s))
                .collect::<Result<Vec<_>>>()?;
            layer_weights.push(LayerWeights::from_tensors(ts));
        }
        let final_gamma = r.tensor(&[h])?;
        let final_beta = r.tensor(&[h])?;
        r.expect_end()?;
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers: layer_weights,
            final_gamma,
            final_beta,
        })
    }
}

/// A `[B, S]` block of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != batch * seq {
            return Err(Error::Input(format!(
                "{} token ids for a {batch}x{seq} batch",
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    /// Number of backbone layers applied (0 for the embedding tap).
    pub block_index: usize,
    pub activation: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapSet {
    pub taps: Vec<Tap>,
    /// Last layer output after the final layer norm.
    pub final_output: Tensor<f32>,
}

/// Token plus positional embedding: `[B, S, H]`.
pub fn embed(weights: &BackboneWeights, tokens: &TokenBatch) -> Result<Tensor<f32>> {
    let cfg = &weights.config;
    if tokens.seq > cfg.max_seq {
        return Err(Error::Config(format!(
            "sequence length {} exceeds max_seq {}",
            tokens.seq, cfg.max_seq
        )));
    }
    let h = cfg.hidden;
    let mut out = vec![0.0f32; tokens.ids.len() * h];
    for (i, &id) in tokens.ids.iter().enumerate() {
        let id = id as usize;
        if id >= cfg.vocab_size {
            return Err(Error::Input(format!(
                "token id {id} out of range for vocab {}",
                cfg.vocab_size
            )));
        }
        let pos = i % tokens.seq;
        let te = &weights.token_embedding.data()[id * h..(id + 1) * h];
        let pe = &weights.position_embedding.data()[pos * h..(pos + 1) * h];
        for (j, o) in out[i * h..(i + 1) * h].iter_mut().enumerate() {
            *o = te[j] + pe[j];
        }
    }
    Tensor::new(vec![tokens.batch, tokens.seq, h], out)
}

fn linear(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut y = matmul(x, w)?;
    y.add_row_bias(b)?;
    Ok(y)
}

/// Causal multi-head self-attention, output projection included.
pub fn self_attention(
    x: &Tensor<f32>,
    lw: &LayerWeights,
    heads: usize,
) -> Result<Tensor<f32>> {
    if x.rank() != 3 {
        return Err(Error::Dimension(format!("attention needs [B,S,H], got {:?}", x.shape())));
    }
    let (b, s, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if heads == 0 || h % heads != 0 {
        return Err(Error::Config(format!("hidden {h} not divisible by {heads} heads")));
    }
    let d = h / heads;
    let q = linear(x, &lw.w_q, &lw.b_q)?;
    let k = linear(x, &lw.w_k, &lw.b_k)?;
    let v = linear(x, &lw.w_v, &lw.b_v)?;
    let scale = 1.0 / (d as f32).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    // one [S, d] context block per (batch, head)
    let blocks = Exec::default().for_work(b * heads * s * s * d).map(b * heads, |bh| {
        let (bi, hi) = (bh / heads, bh % heads);
        let at = |t: usize| (bi * s + t) * h + hi * d;
        let mut ctx = vec![0.0f32; s * d];
        let mut scores = vec![0.0f32; s];
        for i in 0..s {
            let qi = &qd[at(i)..at(i) + d];
            for (j, sc) in scores[..=i].iter_mut().enumerate() {
                let kj = &kd[at(j)..at(j) + d];
                let mut dot = 0.0f32;
                for (&a, &c) in qi.iter().zip(kj) {
                    dot += a * c;
                }
                *sc = dot * scale;
            }
            softmax_in_place(&mut scores[..=i]);
            let out = &mut ctx[i * d..(i + 1) * d];
            for (j, &p) in scores[..=i].iter().enumerate() {
                let vj = &vd[at(j)..at(j) + d];
                for (o, &vv) in out.iter_mut().zip(vj) {
                    *o += p * vv;
                }
            }
        }
        ctx
    });

    let mut context = vec![0.0f32; b * s * h];
    for (bh, block) in blocks.iter().enumerate() {
        let (bi, hi) = (bh / heads, bh % heads);
        for t in 0..s {
            let dst = (bi * s + t) * h + hi * d;
            context[dst..dst + d].copy_from_slice(&block[t * d..(t + 1) * d]);
        }
    }
    let context = Tensor::new(vec![b, s, h], context)?;
    linear(&context, &lw.w_o, &lw.b_o)
}

/// `gelu(x W1 + b1) W2 + b2`.
pub fn feed_forward(x: &Tensor<f32>, lw: &LayerWeights) -> Result<Tensor<f32>> {
    let hidden = Activation::Gelu.forward(&linear(x, &lw.w_1, &lw.b_1)?);
    linear(&hidden, &lw.w_2, &lw.b_2)
}

/// One post-norm decoder layer:
/// `u = LN1(MSA(b) + b)`, `out = LN2(FFN(u) + u)`.
pub fn layer_forward(x: &Tensor<f32>, lw: &LayerWeights, heads: usize) -> Result<Tensor<f32>> {
    let attn = self_attention(x, lw, heads)?;
    let u = layer_norm(&attn.add(x)?, &lw.ln1_gamma, &lw.ln1_beta, LN_EPS)?;
    let ffn = feed_forward(&u, lw)?;
    layer_norm(&ffn.add(&u)?, &lw.ln2_gamma, &lw.ln2_beta, LN_EPS)
}

/// Run the full stack, recording the activation after every block cut.
pub fn forward_collect(weights: &BackboneWeights, tokens: &TokenBatch) -> Result<TapSet> {
    let cfg = &weights.config;
    let mut x = embed(weights, tokens)?;
    let mut taps = Vec::with_capacity(cfg.gamma());
    if cfg.tap_embedding {
        taps.push(Tap {
            block_index: 0,
            activation: x.clone(),
        });
    }
    let mut cuts = cfg.block_cuts.iter().peekable();
    for (l, lw) in weights.layers.iter().enumerate() {
        x = layer_forward(&x, lw, cfg.heads)?;
        if cuts.peek() == Some(&&(l + 1)) {
            cuts.next();
            taps.push(Tap {
                block_index: l + 1,
                activation: x.clone(),
            });
        }
    }
    let final_output = layer_norm(&x, &weights.final_gamma, &weights.final_beta, LN_EPS)?;
    Ok(TapSet { taps, final_output })
}
