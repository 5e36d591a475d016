//! Activation quantizers for the shortcut taps.
//!
//! Every scheme normalizes by the per-tensor absolute maximum. Four-bit codes
//! are packed two per byte: element `i` sits in the low nibble of byte `i / 2`
//! when `i` is even and in the high nibble when it is odd.

use std::sync::OnceLock;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{to_f16, Tensor};

/// Bytes a tap occupies on the wire besides its codes and scale:
/// block index (u16), scheme (u8), shape (3 × u32), code length (u32).
pub const TAP_HEADER_BYTES: usize = 2 + 1 + 12 + 4;
/// Bytes of the little-endian f32 scale.
pub const SCALE_BYTES: usize = 4;

/// Codes are produced in chunks of this many bytes when running in parallel.
const CODE_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantScheme {
    /// Pass-through binary16.
    NoneFp16,
    /// Emulated FP8 E4M3 on absmax-normalized values.
    Fp8E4m3,
    /// Symmetric signed 4-bit grid, codes −7..=7 stored offset by 8.
    Fp4Grid,
    /// 4-bit normal-float codebook.
    Nf4,
}

impl QuantScheme {
    pub const ALL: [QuantScheme; 4] = [
        QuantScheme::NoneFp16,
        QuantScheme::Fp8E4m3,
        QuantScheme::Fp4Grid,
        QuantScheme::Nf4,
    ];

    pub fn bits(self) -> usize {
        match self {
            QuantScheme::NoneFp16 => 16,
            QuantScheme::Fp8E4m3 => 8,
            QuantScheme::Fp4Grid | QuantScheme::Nf4 => 4,
        }
    }

    pub fn to_u8(self) -> u8 {
        match self {
            QuantScheme::NoneFp16 => 0,
            QuantScheme::Fp8E4m3 => 1,
            QuantScheme::Fp4Grid => 2,
            QuantScheme::Nf4 => 3,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => QuantScheme::NoneFp16,
            1 => QuantScheme::Fp8E4m3,
            2 => QuantScheme::Fp4Grid,
            3 => QuantScheme::Nf4,
            other => return Err(Error::Format(format!("unknown quant scheme tag {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantScheme::NoneFp16 => "fp16",
            QuantScheme::Fp8E4m3 => "fp8",
            QuantScheme::Fp4Grid => "fp4",
            QuantScheme::Nf4 => "nf4",
        }
    }

    /// Code of an exact zero.
    fn zero_code(self) -> u8 {
        match self {
            QuantScheme::Fp4Grid => 8,
            QuantScheme::Nf4 => NF4_ZERO_INDEX,
            _ => 0,
        }
    }

    pub fn code_len(self, elements: usize) -> usize {
        (elements * self.bits()).div_ceil(8)
    }
}

impl std::str::FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp16" | "none" | "none_fp16" => Ok(QuantScheme::NoneFp16),
            "fp8" | "fp8_e4m3" => Ok(QuantScheme::Fp8E4m3),
            "fp4" | "fp4_grid" => Ok(QuantScheme::Fp4Grid),
            "nf4" => Ok(QuantScheme::Nf4),
            other => Err(Error::Config(format!("unknown scheme {other:?}"))),
        }
    }
}

impl std::fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Index of the exact 0.0 entry in [`nf4_codebook`].
pub const NF4_ZERO_INDEX: u8 = 7;

/// Quantile offset: the midpoint of `1 − 1/(2·15)` and `1 − 1/(2·16)`.
pub const NF4_OFFSET: f64 = (1.0 - 1.0 / 30.0 + 1.0 - 1.0 / 32.0) / 2.0;

/// The 16-entry normal-float codebook, ascending in [−1, 1].
///
/// Eight positive entries are standard-normal quantiles at probabilities
/// evenly spaced from [`NF4_OFFSET`] down to (excluding) 0.5, seven negative
/// entries mirror quantiles spaced over 7 steps, plus an exact zero. The
/// table is normalized by its maximum.
pub fn nf4_codebook() -> &'static [f32; 16] {
    static TABLE: OnceLock<[f32; 16]> = OnceLock::new();
    TABLE.get_or_init(build_nf4_codebook)
}

fn build_nf4_codebook() -> [f32; 16] {
    let normal = Normal::standard();
    let spaced = |n: usize| -> Vec<f64> {
        (0..n - 1)
            .map(|i| NF4_OFFSET + (0.5 - NF4_OFFSET) * i as f64 / (n - 1) as f64)
            .collect()
    };
    let mut values: Vec<f64> = spaced(9).iter().map(|&p| normal.inverse_cdf(p)).collect();
    values.push(0.0);
    values.extend(spaced(8).iter().map(|&p| -normal.inverse_cdf(p)));
    values.sort_by(f64::total_cmp);
    let max = values[values.len() - 1];
    let mut table = [0.0f32; 16];
    for (t, v) in table.iter_mut().zip(&values) {
        *t = (v / max) as f32;
    }
    table
}

/// Midpoints between consecutive codebook entries, in f64 (exact).
fn nf4_midpoints() -> &'static [f64; 15] {
    static MID: OnceLock<[f64; 15]> = OnceLock::new();
    MID.get_or_init(|| {
        let cb = nf4_codebook();
        let mut m = [0.0f64; 15];
        for (i, v) in m.iter_mut().enumerate() {
            *v = (cb[i] as f64 + cb[i + 1] as f64) / 2.0;
        }
        m
    })
}

/// Nearest codebook index of a normalized value; ties go to the smaller index.
pub fn nf4_index(v: f32) -> u8 {
    let v = v as f64;
    nf4_midpoints().partition_point(|&m| m < v) as u8
}

/// Largest finite E4M3 magnitude.
pub const E4M3_MAX: f32 = 448.0;

/// Value of an E4M3 byte (sign, 4 exponent bits with bias 7, 3 mantissa
/// bits; `S.1111.111` is NaN, there are no infinities).
pub fn e4m3_decode(code: u8) -> f32 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = ((code >> 3) & 0x0f) as i32;
    let m = (code & 0x07) as f32;
    if e == 0x0f && m == 7.0 {
        return f32::NAN;
    }
    let mag = if e == 0 {
        m / 8.0 * 2f32.powi(-6)
    } else {
        (1.0 + m / 8.0) * 2f32.powi(e - 7)
    };
    sign * mag
}

fn e4m3_positive_table() -> &'static [f32; 127] {
    static TABLE: OnceLock<[f32; 127]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0f32; 127];
        for (c, v) in t.iter_mut().enumerate() {
            *v = e4m3_decode(c as u8);
        }
        t
    })
}

/// Round to the nearest E4M3 value (ties to even code), saturating at ±448.
pub fn e4m3_encode(x: f32) -> u8 {
    let sign = if x.is_sign_negative() && x != 0.0 { 0x80 } else { 0 };
    let v = x.abs().min(E4M3_MAX);
    let table = e4m3_positive_table();
    let hi = table.partition_point(|&t| t < v).min(126);
    let code = if hi == 0 || table[hi] == v {
        hi
    } else {
        let lo = hi - 1;
        let (dl, dh) = (v - table[lo], table[hi] - v);
        if dl < dh || (dl == dh && lo % 2 == 0) {
            lo
        } else {
            hi
        }
    };
    sign | code as u8
}

/// Write 4-bit codes two per byte, low nibble first.
pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| (pair[0] & 0x0f) | (pair.get(1).copied().unwrap_or(0) & 0x0f) << 4)
        .collect()
}

/// Inverse of [`pack_nibbles`] for `count` codes.
pub fn unpack_nibbles(bytes: &[u8], count: usize) -> Vec<u8> {
    (0..count)
        .map(|i| {
            let b = bytes[i / 2];
            if i % 2 == 0 {
                b & 0x0f
            } else {
                b >> 4
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedActivation {
    pub scheme: QuantScheme,
    pub shape: [usize; 3],
    /// Absolute maximum of the source tensor (1.0 for an all-zero tensor).
    pub scale: f32,
    pub codes: Vec<u8>,
}

impl QuantizedActivation {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    /// Bytes this tap occupies inside an activation batch message.
    pub fn wire_bytes(&self) -> usize {
        self.codes.len() + SCALE_BYTES + TAP_HEADER_BYTES
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.scheme.code_len(self.elements());
        if self.codes.len() != want {
            return Err(Error::Format(format!(
                "{} code bytes for {} {} elements, expected {want}",
                self.codes.len(),
                self.elements(),
                self.scheme
            )));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::Format(format!("invalid scale {}", self.scale)));
        }
        Ok(())
    }
}

/// Wire size of one tap of `shape` under `scheme`: codes + scale + header.
pub fn payload_bytes(shape: [usize; 3], scheme: QuantScheme) -> usize {
    scheme.code_len(shape.iter().product()) + SCALE_BYTES + TAP_HEADER_BYTES
}

fn as_shape3(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [h] => Ok([1, 1, h]),
        [s, h] => Ok([1, s, h]),
        [b, s, h] => Ok([b, s, h]),
        _ => Err(Error::Dimension(format!(
            "activations must have rank 1..=3, got {shape:?}"
        ))),
    }
}

pub fn quantize(x: &Tensor<f32>, scheme: QuantScheme) -> Result<QuantizedActivation> {
    quantize_with(x, scheme, Exec::default())
}

pub fn quantize_with(x: &Tensor<f32>, scheme: QuantScheme, exec: Exec) -> Result<QuantizedActivation> {
    let shape = as_shape3(x.shape())?;
    if !x.all_finite() {
        return Err(Error::Input("cannot quantize NaN or infinite values".into()));
    }
    let absmax = x.max_abs();
    let zero_input = absmax == 0.0;
    let scale = if zero_input { 1.0 } else { absmax };
    let data = x.data();
    let n = data.len();
    let mut codes = vec![0u8; scheme.code_len(n)];
    let exec = exec.for_work(n * 16);

    if zero_input {
        let z = scheme.zero_code();
        match scheme.bits() {
            4 => codes = pack_nibbles(&vec![z; n]),
            _ => codes.fill(z),
        }
        return Ok(QuantizedActivation { scheme, shape, scale, codes });
    }

    match scheme {
        QuantScheme::NoneFp16 => exec.for_each_chunk(&mut codes, CODE_CHUNK, |ci, out| {
            let base = ci * CODE_CHUNK / 2;
            for (j, pair) in out.chunks_mut(2).enumerate() {
                pair.copy_from_slice(&to_f16(data[base + j]).to_le_bytes());
            }
        }),
        QuantScheme::Fp8E4m3 => exec.for_each_chunk(&mut codes, CODE_CHUNK, |ci, out| {
            let base = ci * CODE_CHUNK;
            for (j, c) in out.iter_mut().enumerate() {
                *c = e4m3_encode(data[base + j] / scale);
            }
        }),
        QuantScheme::Fp4Grid | QuantScheme::Nf4 => {
            let code_of = |v: f32| -> u8 {
                let normalized = v / scale;
                if scheme == QuantScheme::Nf4 {
                    nf4_index(normalized)
                } else {
                    ((normalized * 7.0).round().clamp(-7.0, 7.0) as i32 + 8) as u8
                }
            };
            exec.for_each_chunk(&mut codes, CODE_CHUNK, |ci, out| {
                let base = ci * CODE_CHUNK * 2;
                for (j, byte) in out.iter_mut().enumerate() {
                    let i = base + 2 * j;
                    let lo = code_of(data[i]);
                    let hi = if i + 1 < n { code_of(data[i + 1]) } else { 0 };
                    *byte = lo | (hi << 4);
                }
            });
        }
    }
    Ok(QuantizedActivation { scheme, shape, scale, codes })
}

pub fn dequantize(q: &QuantizedActivation) -> Result<Tensor<f32>> {
    dequantize_with(q, Exec::default())
}

pub fn dequantize_with(q: &QuantizedActivation, exec: Exec) -> Result<Tensor<f32>> {
    q.validate()?;
    let n = q.elements();
    let mut out = vec![0.0f32; n];
    let (scale, codes) = (q.scale, &q.codes);
    let exec = exec.for_work(n * 4);
    match q.scheme {
        QuantScheme::NoneFp16 => exec.for_each_chunk(&mut out, CODE_CHUNK, |ci, o| {
            let base = ci * CODE_CHUNK;
            for (j, v) in o.iter_mut().enumerate() {
                let i = 2 * (base + j);
                *v = half::f16::from_le_bytes([codes[i], codes[i + 1]]).to_f32();
            }
        }),
        QuantScheme::Fp8E4m3 => {
            let mut bad = false;
            for &c in codes.iter() {
                bad |= c & 0x7f == 0x7f;
            }
            if bad {
                return Err(Error::Format("NaN code in fp8 payload".into()));
            }
            exec.for_each_chunk(&mut out, CODE_CHUNK, |ci, o| {
                let base = ci * CODE_CHUNK;
                for (j, v) in o.iter_mut().enumerate() {
                    *v = e4m3_decode(codes[base + j]) * scale;
                }
            })
        }
        QuantScheme::Fp4Grid | QuantScheme::Nf4 => {
            let cb = nf4_codebook();
            let nf4 = q.scheme == QuantScheme::Nf4;
            if !nf4 && (0..n).any(|i| nibble(codes, i) == 0) {
                return Err(Error::Format("fp4 grid code 0 is outside −7..=7".into()));
            }
            exec.for_each_chunk(&mut out, CODE_CHUNK, |ci, o| {
                let base = ci * CODE_CHUNK;
                for (j, v) in o.iter_mut().enumerate() {
                    let c = nibble(codes, base + j);
                    *v = if nf4 {
                        cb[c as usize] * scale
                    } else {
                        (c as i32 - 8) as f32 / 7.0 * scale
                    };
                }
            })
        }
    }
    Tensor::new(q.shape.to_vec(), out)
}

fn nibble(codes: &[u8], i: usize) -> u8 {
    let b = codes[i / 2];
    if i % 2 == 0 {
        b & 0x0f
    } else {
        b >> 4
    }
}

/// Largest gap between consecutive codebook entries.
pub fn nf4_max_gap() -> f32 {
    nf4_codebook()
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f32::max)
}
