//! Blockwise 4-bit NormalFloat storage.
//!
//! Each block keeps its absolute maximum and one 4-bit index per element into a
//! 16-entry codebook of normal quantiles scaled to `[-1, 1]`. Codes are packed
//! two per byte, low nibble first.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};
use crate::tensor::Tensor;

/// Upper quantile used at both ends of the table.
pub const NF4_OFFSET: f64 = 0.9677083;
pub const DEFAULT_BLOCK_SIZE: usize = 64;
/// Absmax values per group when they are themselves quantized.
pub const DOUBLE_QUANT_GROUP: usize = 256;

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

/// Inverse standard-normal CDF by bisection.
pub fn normal_ppf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0, 1)");
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

/// The 16 code values, ascending, with `-1`, `0` and `1` exact.
pub fn nf4_codebook() -> [f64; 16] {
    let mut v = Vec::with_capacity(16);
    for p in &linspace(NF4_OFFSET, 0.5, 9)[..8] {
        v.push(normal_ppf(*p));
    }
    v.push(0.0);
    for p in &linspace(NF4_OFFSET, 0.5, 8)[..7] {
        v.push(-normal_ppf(*p));
    }
    let max = v.iter().copied().fold(0.0, f64::max);
    let mut out = [0.0; 16];
    for (o, x) in out.iter_mut().zip(&v) {
        *o = x / max;
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Index of the exact zero in [`nf4_codebook`].
pub const NF4_ZERO_CODE: u8 = 7;

/// Largest distance between adjacent code values.
pub fn max_codebook_gap(codebook: &[f64; 16]) -> f64 {
    codebook.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

/// Nearest code to `x` (already scaled to `[-1, 1]`); ties go to the lower code.
pub fn nearest_code(codebook: &[f64; 16], x: f64) -> u8 {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (i, c) in codebook.iter().enumerate() {
        let d = libm::fabs(x - c);
        if d < dist {
            dist = d;
            best = i;
        }
    }
    best as u8
}

pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|c| (c[0] & 0x0f) | (c.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

pub fn unpack_nibbles(packed: &[u8], len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let byte = packed[i / 2];
        out.push(if i % 2 == 0 { byte & 0x0f } else { byte >> 4 });
    }
    out
}

/// One quantized block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    packed: Vec<u8>,
    len: usize,
    pub absmax: f64,
}

impl QuantizedBlock {
    /// Builds a block from unpacked codes, rejecting any code `>= 16`.
    pub fn new(codes: &[u8], absmax: f64) -> Result<Self> {
        if let Some(&c) = codes.iter().find(|&&c| c >= 16) {
            return Err(Error::InvalidCode(c));
        }
        Ok(Self {
            packed: pack_nibbles(codes),
            len: codes.len(),
            absmax,
        })
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack_nibbles(&self.packed, self.len)
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn check_block_size(block_size: usize) -> Result<()> {
    if block_size == 0 {
        return Err(Error::InvalidArgument("block_size must be >= 1".into()));
    }
    Ok(())
}

fn quantize_codes(codebook: &[f64; 16], block: &[f64]) -> (Vec<u8>, f64) {
    let absmax = block.iter().map(|x| libm::fabs(*x)).fold(0.0, f64::max);
    let codes = if absmax == 0.0 {
        vec![NF4_ZERO_CODE; block.len()]
    } else {
        block.iter().map(|x| nearest_code(codebook, x / absmax)).collect()
    };
    (codes, absmax)
}

pub fn nf4_quantize(weights: &[f64], block_size: usize) -> Result<Vec<QuantizedBlock>> {
    check_block_size(block_size)?;
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let cb = nf4_codebook();
    weights
        .chunks(block_size)
        .map(|block| {
            let (codes, absmax) = quantize_codes(&cb, block);
            QuantizedBlock::new(&codes, absmax)
        })
        .collect()
}

pub fn nf4_dequantize(blocks: &[QuantizedBlock]) -> Vec<f64> {
    let cb = nf4_codebook();
    let mut out = Vec::with_capacity(blocks.iter().map(QuantizedBlock::len).sum());
    for b in blocks {
        out.extend(b.codes().into_iter().map(|c| cb[c as usize] * b.absmax));
    }
    out
}

/// All finite E4M3 values, ascending, one entry per distinct value.
pub fn fp8_e4m3_values() -> Vec<f64> {
    let mut v = Vec::with_capacity(256);
    for bits in 0u8..=0x7e {
        let exp = (bits >> 3) as i32;
        let man = (bits & 7) as f64;
        let mag = if exp == 0 {
            man / 8.0 * libm::exp2(-6.0)
        } else {
            (1.0 + man / 8.0) * libm::exp2((exp - 7) as f64)
        };
        v.push(mag);
        if mag != 0.0 {
            v.push(-mag);
        }
    }
    v.sort_by(f64::total_cmp);
    v
}

const FP8_MAX: f64 = 448.0;

fn nearest_index(table: &[f64], x: f64) -> u8 {
    let i = table.partition_point(|&t| t < x);
    let cand = if i == 0 {
        0
    } else if i == table.len() {
        table.len() - 1
    } else if x - table[i - 1] <= table[i] - x {
        i - 1
    } else {
        i
    };
    cand as u8
}

/// Per-block scales, either plain or second-level quantized to 8-bit floats
/// in groups (mean-centred, scaled so the group's extreme maps to ±448).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AbsmaxStore {
    Plain(Vec<f64>),
    Double {
        codes: Vec<u8>,
        group_size: usize,
        means: Vec<f64>,
        scales: Vec<f64>,
    },
}

impl AbsmaxStore {
    pub fn double_quantize(absmax: &[f64], group_size: usize) -> Result<Self> {
        check_block_size(group_size)?;
        let table = fp8_e4m3_values();
        let mut codes = Vec::with_capacity(absmax.len());
        let mut means = Vec::new();
        let mut scales = Vec::new();
        for group in absmax.chunks(group_size) {
            let mean = group.iter().sum::<f64>() / group.len() as f64;
            let spread = group.iter().map(|a| libm::fabs(a - mean)).fold(0.0, f64::max);
            let scale = if spread == 0.0 { 1.0 } else { spread / FP8_MAX };
            codes.extend(group.iter().map(|a| nearest_index(&table, (a - mean) / scale)));
            means.push(mean);
            scales.push(scale);
        }
        Ok(AbsmaxStore::Double {
            codes,
            group_size,
            means,
            scales,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            AbsmaxStore::Plain(v) => v.len(),
            AbsmaxStore::Double { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scales as used by dequantization.
    pub fn values(&self) -> Vec<f64> {
        match self {
            AbsmaxStore::Plain(v) => v.clone(),
            AbsmaxStore::Double {
                codes,
                group_size,
                means,
                scales,
            } => {
                let table = fp8_e4m3_values();
                codes
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let g = i / group_size;
                        // A dequantized scale is never negative.
                        (means[g] + table[c as usize] * scales[g]).max(0.0)
                    })
                    .collect()
            }
        }
    }

    /// Bytes needed to store the scales.
    pub fn bytes(&self) -> usize {
        match self {
            AbsmaxStore::Plain(v) => 8 * v.len(),
            AbsmaxStore::Double { codes, means, scales, .. } => codes.len() + 8 * (means.len() + scales.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantOptions {
    pub block_size: usize,
    #[serde(default)]
    pub double_quant: bool,
}

impl Default for QuantOptions {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            double_quant: false,
        }
    }
}

/// A whole tensor in NF4 form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    block_size: usize,
    packed: Vec<u8>,
    absmax: AbsmaxStore,
}

impl QuantizedTensor {
    pub fn quantize(t: &Tensor, opts: QuantOptions) -> Result<Self> {
        let blocks = nf4_quantize(t.data(), opts.block_size)?;
        let absmax: Vec<f64> = blocks.iter().map(|b| b.absmax).collect();
        let codes: Vec<u8> = blocks.iter().flat_map(QuantizedBlock::codes).collect();
        let absmax = if opts.double_quant {
            AbsmaxStore::double_quantize(&absmax, DOUBLE_QUANT_GROUP)?
        } else {
            AbsmaxStore::Plain(absmax)
        };
        Ok(Self {
            shape: t.shape().to_vec(),
            block_size: opts.block_size,
            packed: pack_nibbles(&codes),
            absmax,
        })
    }

    /// Reassembles a stored tensor, checking every length.
    pub fn from_parts(shape: Vec<usize>, block_size: usize, packed: Vec<u8>, absmax: AbsmaxStore) -> Result<Self> {
        check_block_size(block_size)?;
        let n = crate::tensor::numel(&shape);
        let blocks = n.div_ceil(block_size);
        if packed.len() != n.div_ceil(2) || absmax.len() != blocks {
            return Err(Error::InvalidArgument(alloc::format!(
                "nf4 tensor of {n} elements needs {} packed bytes and {blocks} scales, got {} and {}",
                n.div_ceil(2),
                packed.len(),
                absmax.len()
            )));
        }
        if let AbsmaxStore::Double {
            codes,
            group_size,
            means,
            scales,
        } = &absmax
        {
            let groups = codes.len().div_ceil((*group_size).max(1));
            let table = fp8_e4m3_values().len();
            if *group_size == 0 || means.len() != groups || scales.len() != groups {
                return Err(Error::InvalidArgument("inconsistent double-quantized scales".into()));
            }
            if let Some(&c) = codes.iter().find(|&&c| c as usize >= table) {
                return Err(Error::InvalidCode(c));
            }
        }
        Ok(Self {
            shape,
            block_size,
            packed,
            absmax,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        crate::tensor::numel(&self.shape)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn absmax(&self) -> &AbsmaxStore {
        &self.absmax
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack_nibbles(&self.packed, self.numel())
    }

    pub fn dequantize(&self) -> Tensor {
        let cb = nf4_codebook();
        let scales = self.absmax.values();
        let data = self
            .codes()
            .iter()
            .enumerate()
            .map(|(i, &c)| cb[c as usize] * scales[i / self.block_size])
            .collect();
        Tensor::new(self.shape.clone(), data).expect("shape checked at construction")
    }

    /// Packed codes plus scales.
    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + self.absmax.bytes()
    }
}

/// Byte accounting for a quantized parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub quantized_tensors: usize,
    pub quantized_elements: usize,
    /// float64 bytes of the tensors that were quantized.
    pub dense_bytes: usize,
    pub packed_bytes: usize,
    pub scale_bytes: usize,
    /// float64 bytes of everything left in full precision.
    pub unquantized_bytes: usize,
}

impl MemoryReport {
    /// Quantized storage over float64 storage, for the quantized tensors.
    pub fn ratio(&self) -> f64 {
        (self.packed_bytes + self.scale_bytes) as f64 / self.dense_bytes as f64
    }

    /// Same ratio over the whole parameter set.
    pub fn model_ratio(&self) -> f64 {
        (self.packed_bytes + self.scale_bytes + self.unquantized_bytes) as f64
            / (self.dense_bytes + self.unquantized_bytes) as f64
    }
}

/// Per-element ratio for plain scales when every block is full:
/// `(0.5 + 8 / block_size) / 8`.
pub fn expected_ratio(block_size: usize) -> f64 {
    (0.5 + 8.0 / block_size as f64) / 8.0
}

/// Replaces every frozen rank-2 dense parameter with its NF4 form.
pub fn quantize_store(store: &mut ParamStore, opts: QuantOptions) -> Result<MemoryReport> {
    check_block_size(opts.block_size)?;
    let mut report = MemoryReport {
        quantized_tensors: 0,
        quantized_elements: 0,
        dense_bytes: 0,
        packed_bytes: 0,
        scale_bytes: 0,
        unquantized_bytes: 0,
    };
    for (_, p) in store.iter_mut() {
        let replacement = match p {
            Param::Dense(t) if !t.requires_grad() && t.rank() == 2 => Some(QuantizedTensor::quantize(t, opts)?),
            Param::Dense(t) => {
                report.unquantized_bytes += 8 * t.numel();
                None
            }
            Param::Nf4(q) => {
                report.quantized_tensors += 1;
                report.quantized_elements += q.numel();
                report.dense_bytes += 8 * q.numel();
                report.packed_bytes += q.packed().len();
                report.scale_bytes += q.absmax().bytes();
                None
            }
        };
        if let Some(q) = replacement {
            report.quantized_tensors += 1;
            report.quantized_elements += q.numel();
            report.dense_bytes += 8 * q.numel();
            report.packed_bytes += q.packed().len();
            report.scale_bytes += q.absmax().bytes();
            *p = Param::Nf4(q);
        }
    }
    Ok(report)
}
