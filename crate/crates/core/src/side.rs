//! The trainable side-network: a stack of parallel adapters fed by the
//! backbone taps, a gated combine with the backbone's final tap, mean pooling
//! and a linear head.
//!
//! For block `l` with dequantized tap `b̂`:
//!
//! ```text
//! x      = s_l + b̂
//! s_l+1  = LN_l( σ(x W_down) W_up + x )
//! z      = sigmoid(g) · b̂_last + (1 − sigmoid(g)) · s_M
//! logits = mean_S(z) W_head + b_head
//! ```
//!
//! `s_0` is the embedding tap when one is transmitted, zeros otherwise. Taps
//! are constants for the backward pass; no gradient leaves the side-network.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::{forward_collect, BackboneWeights, TokenBatch};
use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::quant::{dequantize, quantize, QuantScheme};
use crate::rng::Rng;
use crate::tensor::{
    layer_norm_backward, layer_norm_with_stats, matmul, matmul_nt, matmul_tn, mean_pool,
    Activation, NormStats, Scalar, Tensor,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MBSN";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const SIDE_LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct SideConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub blocks: usize,
    pub classes: usize,
    pub activation: Activation,
    pub init_std: f64,
    /// The first tap is the embedding output and seeds `s_0`.
    pub embedding_tap: bool,
}

impl SideConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.blocks == 0 || self.classes == 0 {
            return Err(Error::Config("hidden, blocks and classes must be positive".into()));
        }
        if self.bottleneck == 0 || self.bottleneck >= self.hidden {
            return Err(Error::Config(format!(
                "bottleneck {} must be in 1..{}",
                self.bottleneck, self.hidden
            )));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Config(format!("negative init std {}", self.init_std)));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.blocks + usize::from(self.embedding_tap)
    }

    /// Trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        let (h, m, c) = (self.hidden, self.bottleneck, self.classes);
        self.blocks * (2 * h * m + 2 * h) + h * c + c + 1
    }

    fn same_shapes(&self, other: &SideConfig) -> bool {
        self.hidden == other.hidden
            && self.bottleneck == other.bottleneck
            && self.blocks == other.blocks
            && self.classes == other.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T> {
    pub w_down: Tensor<T>,
    pub w_up: Tensor<T>,
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideParams<T> {
    config: SideConfig,
    pub adapters: Vec<AdapterParams<T>>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
    pub gate: T,
    /// Bumped on every optimizer step; caches from older versions are stale.
    version: u64,
}

/// Gradients share the parameter layout.
pub type SideGrads<T> = SideParams<T>;

/// W_down, W_up ~ Gaussian(0, init_std); unit LN gains, zero biases, zero
/// head and gate.
pub fn init_side<T: Scalar>(config: &SideConfig, seed: u64) -> Result<SideParams<T>> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let (h, m) = (config.hidden, config.bottleneck);
    let adapters = (0..config.blocks)
        .map(|_| AdapterParams {
            w_down: Tensor::randn(&[h, m], config.init_std, &mut rng),
            w_up: Tensor::randn(&[m, h], config.init_std, &mut rng),
            ln_gamma: Tensor::full(&[h], T::one()),
            ln_beta: Tensor::zeros(&[h]),
        })
        .collect();
    Ok(SideParams {
        config: config.clone(),
        adapters,
        head_weight: Tensor::zeros(&[h, config.classes]),
        head_bias: Tensor::zeros(&[config.classes]),
        gate: T::zero(),
        version: 0,
    })
}

impl<T: Scalar> SideParams<T> {
    pub fn config(&self) -> &SideConfig {
        &self.config
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn zeros_like(&self) -> SideGrads<T> {
        SideParams {
            config: self.config.clone(),
            adapters: self
                .adapters
                .iter()
                .map(|a| AdapterParams {
                    w_down: Tensor::zeros(a.w_down.shape()),
                    w_up: Tensor::zeros(a.w_up.shape()),
                    ln_gamma: Tensor::zeros(a.ln_gamma.shape()),
                    ln_beta: Tensor::zeros(a.ln_beta.shape()),
                })
                .collect(),
            head_weight: Tensor::zeros(self.head_weight.shape()),
            head_bias: Tensor::zeros(self.head_bias.shape()),
            gate: T::zero(),
            version: self.version,
        }
    }

    /// Every parameter slice in a fixed order: adapters (W_down, W_up,
    /// gamma, beta), head weight, head bias, gate.
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(self.adapters.len() * 4 + 3);
        for a in &self.adapters {
            out.extend([a.w_down.data(), a.w_up.data(), a.ln_gamma.data(), a.ln_beta.data()]);
        }
        out.push(self.head_weight.data());
        out.push(self.head_bias.data());
        out.push(std::slice::from_ref(&self.gate));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(self.adapters.len() * 4 + 3);
        for a in &mut self.adapters {
            out.push(a.w_down.data_mut());
            out.push(a.w_up.data_mut());
            out.push(a.ln_gamma.data_mut());
            out.push(a.ln_beta.data_mut());
        }
        out.push(self.head_weight.data_mut());
        out.push(self.head_bias.data_mut());
        out.push(std::slice::from_mut(&mut self.gate));
        out
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.slices().concat()
    }

    /// Overwrite all parameters from a flat vector in [`Self::slices`] order.
    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        let total: usize = self.slices().iter().map(|s| s.len()).sum();
        if flat.len() != total {
            return Err(Error::Dimension(format!(
                "flat vector of {} for {total} parameters",
                flat.len()
            )));
        }
        let mut at = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> SideParams<U> {
        SideParams {
            config: self.config.clone(),
            adapters: self
                .adapters
                .iter()
                .map(|a| AdapterParams {
                    w_down: a.w_down.cast(),
                    w_up: a.w_up.cast(),
                    ln_gamma: a.ln_gamma.cast(),
                    ln_beta: a.ln_beta.cast(),
                })
                .collect(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
            gate: U::of(self.gate.as_f64()),
            version: self.version,
        }
    }
}

/// `σ(h W_down) W_up`, the adapter without its residual.
pub fn adapter_core<T: Scalar>(
    h: &Tensor<T>,
    p: &AdapterParams<T>,
    activation: Activation,
) -> Result<Tensor<T>> {
    let pre = matmul(h, &p.w_down)?;
    matmul(&activation.forward(&pre), &p.w_up)
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    post: Tensor<T>,
    norm: NormStats<T>,
}

/// Intermediates saved by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BackwardCache<T> {
    version: u64,
    blocks: Vec<BlockCache<T>>,
    last_tap: Tensor<T>,
    side_out: Tensor<T>,
    gate: T,
    pooled: Tensor<T>,
    seq: usize,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Forward pass over dequantized taps. Returns `[B, C]` logits and, when
/// `training`, the cache needed by [`side_backward`].
pub fn side_forward<T: Scalar>(
    taps: &[Tensor<T>],
    params: &SideParams<T>,
    training: bool,
) -> Result<(Tensor<T>, Option<BackwardCache<T>>)> {
    let cfg = &params.config;
    if taps.len() != cfg.taps() {
        return Err(Error::Config(format!(
            "{} taps for a side-network expecting {}",
            taps.len(),
            cfg.taps()
        )));
    }
    let shape = taps[0].shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.hidden || taps.iter().any(|t| t.shape() != shape) {
        return Err(Error::Dimension(format!(
            "taps must all be [B, S, {}], got {:?}",
            cfg.hidden,
            taps.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
        )));
    }
    let (block_taps, mut s) = if cfg.embedding_tap {
        (&taps[1..], taps[0].clone())
    } else {
        (taps, Tensor::zeros(&shape))
    };

    let eps = T::of(SIDE_LN_EPS);
    let mut blocks = Vec::with_capacity(if training { cfg.blocks } else { 0 });
    for (tap, p) in block_taps.iter().zip(&params.adapters) {
        let x = s.add(tap)?;
        let pre = matmul(&x, &p.w_down)?;
        let post = cfg.activation.forward(&pre);
        let mut r = matmul(&post, &p.w_up)?;
        r.add_assign(&x)?;
        let (out, norm) = layer_norm_with_stats(&r, &p.ln_gamma, &p.ln_beta, eps)?;
        if training {
            blocks.push(BlockCache { input: x, pre, post, norm });
        }
        s = out;
    }

    let last_tap = &block_taps[block_taps.len() - 1];
    let alpha = sigmoid(params.gate);
    let z = last_tap.zip_map(&s, |b, sv| alpha * b + (T::one() - alpha) * sv)?;
    let pooled = mean_pool(&z)?;
    let mut logits = matmul(&pooled, &params.head_weight)?;
    logits.add_row_bias(&params.head_bias)?;

    let cache = training.then(|| BackwardCache {
        version: params.version,
        blocks,
        last_tap: last_tap.clone(),
        side_out: s,
        gate: params.gate,
        pooled,
        seq: shape[1],
    });
    Ok((logits, cache))
}

/// Reverse-mode gradients of all side parameters given `d_logits [B, C]`.
pub fn side_backward<T: Scalar>(
    cache: &BackwardCache<T>,
    d_logits: &Tensor<T>,
    params: &SideParams<T>,
) -> Result<SideGrads<T>> {
    let cfg = &params.config;
    if cache.version != params.version || cache.gate != params.gate {
        return Err(Error::State(format!(
            "cache from parameter version {} used with version {}",
            cache.version, params.version
        )));
    }
    if cache.blocks.len() != cfg.blocks {
        return Err(Error::State("cache does not match the adapter count".into()));
    }
    let batch = cache.pooled.shape()[0];
    if d_logits.shape() != [batch, cfg.classes] {
        return Err(Error::Dimension(format!(
            "d_logits {:?} for batch {batch} and {} classes",
            d_logits.shape(),
            cfg.classes
        )));
    }

    let mut grads = params.zeros_like();
    let (s_len, h) = (cache.seq, cfg.hidden);

    grads.head_bias = d_logits.column_sums();
    grads.head_weight = matmul_tn(&cache.pooled, d_logits)?;
    let d_pooled = matmul_nt(d_logits, &params.head_weight)?;

    // mean pooling spreads d_pooled evenly across positions
    let inv_s = T::one() / T::of(s_len as f64);
    let d_z = Tensor::from_fn(&[batch, s_len, h], |i| {
        let (b, j) = (i / (s_len * h), i % h);
        d_pooled.data()[b * h + j] * inv_s
    });

    let alpha = sigmoid(cache.gate);
    let mut d_gate = T::zero();
    for ((&dz, &b), &sv) in d_z.data().iter().zip(cache.last_tap.data()).zip(cache.side_out.data()) {
        d_gate = d_gate + dz * (b - sv);
    }
    grads.gate = d_gate * alpha * (T::one() - alpha);

    let mut d_s = d_z.scale(T::one() - alpha);
    for (l, (block, p)) in cache.blocks.iter().zip(&params.adapters).enumerate().rev() {
        let (d_r, d_gamma, d_beta) = layer_norm_backward(&d_s, &block.norm, &p.ln_gamma)?;
        let g = &mut grads.adapters[l];
        g.ln_gamma = d_gamma;
        g.ln_beta = d_beta;
        g.w_up = matmul_tn(&block.post, &d_r)?;
        let d_post = matmul_nt(&d_r, &p.w_up)?;
        let d_pre = d_post.zip_map(&block.pre, |d, a| d * cfg.activation.derivative(a))?;
        g.w_down = matmul_tn(&block.input, &d_pre)?;
        let mut d_x = matmul_nt(&d_pre, &p.w_down)?;
        d_x.add_assign(&d_r)?;
        // x = s_l + b̂ with b̂ constant
        d_s = d_x;
    }
    Ok(grads)
}

/// Device-side inference with a fetched side-network: backbone forward,
/// quantize/dequantize round trip under `scheme`, side forward.
pub fn combined_infer(
    backbone: &BackboneWeights,
    side: &SideParams<f32>,
    tokens: &TokenBatch,
    scheme: QuantScheme,
) -> Result<Tensor<f32>> {
    let bcfg = backbone.config();
    let scfg = side.config();
    if bcfg.hidden != scfg.hidden
        || bcfg.blocks() != scfg.blocks
        || bcfg.tap_embedding != scfg.embedding_tap
    {
        return Err(Error::Config(format!(
            "backbone (H={}, M={}, embedding tap {}) and side-network (H={}, M={}, embedding tap {}) disagree",
            bcfg.hidden, bcfg.blocks(), bcfg.tap_embedding, scfg.hidden, scfg.blocks, scfg.embedding_tap
        )));
    }
    let taps = forward_collect(backbone, tokens)?;
    let restored = taps
        .taps
        .iter()
        .map(|t| dequantize(&quantize(&t.activation, scheme)?))
        .collect::<Result<Vec<_>>>()?;
    side_forward(&restored, side, false).map(|(logits, _)| logits)
}

impl SideParams<f32> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    /// Checkpoint bytes: magic, version, config block, adapters in order,
    /// head weight, head bias; little-endian f32 throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = LeWriter::new(Vec::new());
        let write = |w: &mut LeWriter<Vec<u8>>| -> std::io::Result<()> {
            w.bytes(CHECKPOINT_MAGIC)?;
            w.u16(CHECKPOINT_VERSION)?;
            for v in [c.hidden, c.bottleneck, c.blocks, c.classes] {
                w.u32(v as u32)?;
            }
            w.u8(c.activation.to_u8())?;
            w.u8(u8::from(c.embedding_tap))?;
            w.f32(self.gate)?;
            for a in &self.adapters {
                w.tensor(&a.w_down)?;
                w.tensor(&a.w_up)?;
                w.tensor(&a.ln_gamma)?;
                w.tensor(&a.ln_beta)?;
            }
            w.tensor(&self.head_weight)?;
            w.tensor(&self.head_bias)
        };
        write(&mut w).expect("writing to a Vec cannot fail");
        w.into_inner()
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&SideConfig>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?), expected)
    }

    pub fn read_from(input: impl Read, expected: Option<&SideConfig>) -> Result<Self> {
        let mut r = LeReader::new(input);
        let magic: [u8; 4] = r.array()?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:02x?}")));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let (hidden, bottleneck, blocks, classes) = (
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        );
        let activation = Activation::from_u8(r.u8()?)
            .ok_or_else(|| Error::Format("unknown activation kind".into()))?;
        let embedding_tap = r.u8()? & 1 != 0;
        let gate = r.f32()?;
        let config = SideConfig {
            hidden,
            bottleneck,
            blocks,
            classes,
            activation,
            init_std: expected.map_or(0.0, |e| e.init_std),
            embedding_tap,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("stored config invalid: {e}")))?;
        if let Some(want) = expected {
            if !want.same_shapes(&config) {
                return Err(Error::Shape(format!(
                    "checkpoint has H={hidden} m={bottleneck} M={blocks} C={classes}, expected H={} m={} M={} C={}",
                    want.hidden, want.bottleneck, want.blocks, want.classes
                )));
            }
        }
        let (h, m) = (hidden, bottleneck);
        let mut adapters = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            adapters.push(AdapterParams {
                w_down: r.tensor(&[h, m])?,
                w_up: r.tensor(&[m, h])?,
                ln_gamma: r.tensor(&[h])?,
                ln_beta: r.tensor(&[h])?,
            });
        }
        let head_weight = r.tensor(&[h, classes])?;
        let head_bias = r.tensor(&[classes])?;
        r.expect_end()?;
        Ok(SideParams {
            config,
            adapters,
            head_weight,
            head_bias,
            gate,
            version: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneConfig};
    use crate::tensor::{finite_diff_grad, layer_norm};

    fn cfg(h: usize, m: usize, blocks: usize, c: usize, emb: bool) -> SideConfig {
        SideConfig {
            hidden: h,
            bottleneck: m,
            blocks,
            classes: c,
            activation: Activation::Gelu,
            init_std: 0.02,
            embedding_tap: emb,
        }
    }

    fn random_taps<T: Scalar>(n: usize, shape: &[usize], rng: &mut Rng) -> Vec<Tensor<T>> {
        (0..n).map(|_| Tensor::randn(shape, 1.0, rng)).collect()
    }

    /// Every parameter drawn at `std` so no gradient is structurally zero.
    fn randomized<T: Scalar>(c: &SideConfig, seed: u64, std: f64) -> SideParams<T> {
        let mut p = init_side::<T>(c, seed).unwrap();
        let mut rng = Rng::new(seed ^ 0xabcdef);
        let n = p.to_flat().len();
        let flat: Vec<T> = (0..n).map(|_| T::of(rng.gaussian(0.0, std))).collect();
        p.set_flat(&flat).unwrap();
        for a in &mut p.adapters {
            for g in a.ln_gamma.data_mut() {
                *g = *g + T::one();
            }
        }
        p
    }

    fn ce_loss(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
        let c = logits.last_dim();
        logits
            .data()
            .chunks(c)
            .zip(labels)
            .map(|(row, &y)| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .sum::<f64>()
            / labels.len() as f64
    }

    fn ce_grad(logits: &Tensor<f64>, labels: &[usize]) -> Tensor<f64> {
        let c = logits.last_dim();
        let b = labels.len() as f64;
        let mut d = logits.data().to_vec();
        for (row, &y) in d.chunks_mut(c).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((*v - m).exp() / z - if j == y { 1.0 } else { 0.0 }) / b;
            }
        }
        Tensor::new(logits.shape().to_vec(), d).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_well_formed() {
        let c = cfg(8, 4, 2, 2, false);
        let a = init_side::<f32>(&c, 1).unwrap();
        assert_eq!(a, init_side::<f32>(&c, 1).unwrap());
        assert_ne!(a, init_side::<f32>(&c, 2).unwrap());
        assert!(a.head_weight.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.gate, 0.0);
        assert_eq!(a.to_flat().len(), c.parameter_count());
        let mut bad = c.clone();
        bad.bottleneck = 8;
        assert!(init_side::<f32>(&bad, 1).is_err());
    }

    #[test]
    fn init_std_statistics() {
        let c = SideConfig { init_std: 0.05, ..cfg(256, 196, 1, 1, false) };
        let p = init_side::<f64>(&c, 3).unwrap();
        let draws: Vec<f64> = p.adapters[0].w_down.data().iter().chain(p.adapters[0].w_up.data()).copied().collect();
        assert!(draws.len() >= 100_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        assert!((std - 0.05).abs() < 0.05 * 0.05, "{std}");
    }

    #[test]
    fn zero_std_init_propagates_residual_stream() {
        let c = SideConfig { init_std: 0.0, ..cfg(6, 2, 3, 2, true) };
        let p = init_side::<f64>(&c, 4).unwrap();
        let mut rng = Rng::new(5);
        let taps = random_taps::<f64>(4, &[2, 3, 6], &mut rng);
        let (_, cache) = side_forward(&taps, &p, true).unwrap();
        let g = Tensor::full(&[6], 1.0);
        let b = Tensor::zeros(&[6]);
        let mut s = taps[0].clone();
        for tap in &taps[1..] {
            s = layer_norm(&s.add(tap).unwrap(), &g, &b, SIDE_LN_EPS).unwrap();
        }
        assert_eq!(cache.unwrap().side_out, s);
    }

    #[test]
    fn adapter_core_cases() {
        let mut rng = Rng::new(6);
        let h = Tensor::<f32>::randn(&[2, 3, 4], 1.0, &mut rng);
        let p = AdapterParams {
            w_down: Tensor::randn(&[4, 2], 1.0, &mut rng),
            w_up: Tensor::zeros(&[2, 4]),
            ln_gamma: Tensor::full(&[4], 1.0),
            ln_beta: Tensor::zeros(&[4]),
        };
        assert!(adapter_core(&h, &p, Activation::Gelu).unwrap().data().iter().all(|&v| v == 0.0));

        // identity-padded projections on the positive orthant with relu
        let hp = h.map(|v| v.abs());
        let eye = |r: usize, c: usize| Tensor::from_fn(&[r, c], |i| if i / c == i % c { 1.0f32 } else { 0.0 });
        let id = AdapterParams { w_down: eye(4, 4), w_up: eye(4, 4), ..p.clone() };
        assert_eq!(adapter_core(&hp, &id, Activation::Relu).unwrap(), hp);

        let p = AdapterParams { w_up: Tensor::randn(&[2, 4], 1.0, &mut rng), ..p };
        let want = matmul(&Activation::Gelu.forward(&matmul(&h, &p.w_down).unwrap()), &p.w_up).unwrap();
        assert_eq!(adapter_core(&h, &p, Activation::Gelu).unwrap(), want);
    }

    #[test]
    fn saturated_gate_uses_backbone_tap_only() {
        let c = cfg(8, 4, 2, 3, false);
        let mut p = randomized::<f64>(&c, 7, 0.3);
        for a in &mut p.adapters {
            a.w_up = Tensor::zeros(a.w_up.shape());
        }
        p.gate = 100.0;
        let mut rng = Rng::new(8);
        let taps = random_taps::<f64>(2, &[2, 4, 8], &mut rng);
        let (logits, cache) = side_forward(&taps, &p, false).unwrap();
        assert!(cache.is_none());
        let mut want = matmul(&mean_pool(&taps[1]).unwrap(), &p.head_weight).unwrap();
        want.add_row_bias(&p.head_bias).unwrap();
        for (a, b) in logits.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_traced_tiny_case() {
        // H=2, m=1, B=1, S=1, relu, single block, no embedding tap.
        let c = SideConfig { activation: Activation::Relu, ..cfg(2, 1, 1, 1, false) };
        let mut p = init_side::<f64>(&c, 0).unwrap();
        p.adapters[0].w_down = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        p.adapters[0].w_up = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        p.head_weight = Tensor::new(vec![2, 1], vec![2.0, 1.0]).unwrap();
        p.head_bias = Tensor::new(vec![1], vec![0.5]).unwrap();
        let tap = Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (logits, _) = side_forward(&[tap], &p, false).unwrap();
        // x = [1,3]; relu(x·[1,1]) = 4; core = [4,0]; r = [5,3]
        // LN([5,3]) = [1,-1] (eps negligible); z = 0.5·[1,3] + 0.5·[1,-1] = [1,1]
        // logits = 2·1 + 1·1 + 0.5 = 3.5
        let ln_scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        let z = [0.5 * 1.0 + 0.5 * ln_scale, 0.5 * 3.0 - 0.5 * ln_scale];
        let want = 2.0 * z[0] + z[1] + 0.5;
        assert!((logits.data()[0] - want).abs() < 1e-12);
        assert!((want - 3.5).abs() < 1e-4);
    }

    #[test]
    fn training_flag_only_controls_cache() {
        let c = cfg(8, 4, 2, 2, true);
        let p = randomized::<f32>(&c, 9, 0.2);
        let mut rng = Rng::new(10);
        let taps = random_taps::<f32>(3, &[2, 4, 8], &mut rng);
        let (a, ca) = side_forward(&taps, &p, true).unwrap();
        let (b, cb) = side_forward(&taps, &p, false).unwrap();
        assert_eq!(a, b);
        assert!(ca.is_some() && cb.is_none());
        assert!(matches!(side_forward(&taps[..2], &p, false), Err(Error::Config(_))));
    }

    #[test]
    fn backward_simple_rules() {
        let c = cfg(8, 4, 2, 2, false);
        let p = randomized::<f64>(&c, 11, 0.3);
        let mut rng = Rng::new(12);
        let taps = random_taps::<f64>(2, &[3, 4, 8], &mut rng);
        let (_, cache) = side_forward(&taps, &p, true).unwrap();
        let cache = cache.unwrap();
        let zero = side_backward(&cache, &Tensor::zeros(&[3, 2]), &p).unwrap();
        assert!(zero.to_flat().iter().all(|&v| v == 0.0));
        let d = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let g = side_backward(&cache, &d, &p).unwrap();
        assert_eq!(g.head_bias, d.column_sums());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let c = cfg(8, 4, 1, 2, false);
        let mut p = randomized::<f64>(&c, 13, 0.3);
        let mut rng = Rng::new(14);
        let taps = random_taps::<f64>(1, &[1, 2, 8], &mut rng);
        let (_, cache) = side_forward(&taps, &p, true).unwrap();
        p.bump_version();
        assert!(matches!(
            side_backward(&cache.unwrap(), &Tensor::zeros(&[1, 2]), &p),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (seed, emb, act) in [(1, false, Activation::Gelu), (2, true, Activation::Gelu), (3, true, Activation::Relu)] {
            let c = SideConfig { activation: act, ..cfg(8, 4, 2, 2, emb) };
            let p = randomized::<f64>(&c, seed, 0.4);
            let mut rng = Rng::new(seed + 100);
            let taps = random_taps::<f64>(c.taps(), &[2, 4, 8], &mut rng);
            let labels = [0usize, 1];
            let (logits, cache) = side_forward(&taps, &p, true).unwrap();
            let g = side_backward(&cache.unwrap(), &ce_grad(&logits, &labels), &p).unwrap();
            let theta = Tensor::new(vec![p.to_flat().len()], p.to_flat()).unwrap();
            let fd = finite_diff_grad(
                |t: &Tensor<f64>| {
                    let mut q = p.clone();
                    q.set_flat(t.data()).unwrap();
                    ce_loss(&side_forward(&taps, &q, false).unwrap().0, &labels)
                },
                &theta,
                1e-6,
            )
            .unwrap();
            for (a, n) in g.to_flat().iter().zip(fd.data()) {
                assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1e-3), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn combined_infer_untrained_is_zero() {
        let bc = BackboneConfig::new(10, 8, 2, 2, 6, 2).unwrap();
        let bb = init_backbone(&bc, 1).unwrap();
        let side = init_side::<f32>(&cfg(8, 4, 2, 2, false), 1).unwrap();
        let tokens = TokenBatch::new(2, 5, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 0]).unwrap();
        let logits = combined_infer(&bb, &side, &tokens, QuantScheme::Nf4).unwrap();
        assert_eq!(logits.shape(), &[2, 2]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let wrong = init_side::<f32>(&cfg(8, 4, 1, 2, false), 1).unwrap();
        assert!(matches!(combined_infer(&bb, &wrong, &tokens, QuantScheme::Nf4), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("side.ckpt");
        let c = cfg(16, 8, 2, 3, true);
        let p = randomized::<f32>(&c, 15, 0.1);
        p.save(&path).unwrap();
        let back = SideParams::<f32>::load(&path, Some(&c)).unwrap();
        assert_eq!(back.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back.config().embedding_tap, true);

        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(SideParams::<f32>::read_from(&bytes[..bytes.len() - 1], None), Err(Error::Io(_))));
        let mut other = c.clone();
        other.bottleneck = 12;
        let small = randomized::<f32>(&cfg(16, 8, 2, 3, true), 1, 0.1);
        small.save(&path).unwrap();
        assert!(matches!(SideParams::<f32>::load(&path, Some(&other)), Err(Error::Shape(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(SideParams::<f32>::read_from(&bad[..], None), Err(Error::Format(_))));
    }
}
