//! Uniform per-tensor weight quantization and storage accounting.

use serde::{Deserialize, Serialize};

use crate::bars::Dataset;
use crate::dan::{DanNetwork, ParamKey};
use crate::error::{DanError, Result};
use crate::tensor::Tensor;
use crate::train::evaluate;

/// Bit widths swept by default.
pub const SWEEP_BITS: [u32; 5] = [4, 6, 8, 16, 32];

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=32).contains(&bits) {
        return Err(DanError::InvalidArgument(format!("bit width {bits} outside 1..=32")));
    }
    Ok(())
}

/// Snaps every value to the nearest of `2^bits` evenly spaced levels
/// spanning `[min, max]` and returns the dequantized values. Values exactly
/// between two levels go to the lower one. 32 bits is the identity.
pub fn quantize_linear(t: &Tensor, bits: u32) -> Result<Tensor> {
    check_bits(bits)?;
    if bits == 32 || t.is_empty() {
        return Ok(t.clone());
    }
    let (lo, hi) = (t.min(), t.max());
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(DanError::InvalidArgument("cannot quantize non-finite values".into()));
    }
    if lo == hi {
        return Ok(t.clone());
    }
    let top = (1u64 << bits) - 1;
    let step = (hi - lo) / top as f64;
    Ok(t.map(|x| {
        let r = (x - lo) / step;
        let mut k = r.floor();
        if r - k > 0.5 {
            k += 1.0;
        }
        let k = (k.max(0.0) as u64).min(top);
        if k == top {
            hi
        } else {
            lo + k as f64 * step
        }
    }))
}

/// Largest distance any value can move: half a grid step. Grid levels that
/// are not representable round to the nearest double, so at widths above 16
/// on tensors whose offset dwarfs their range a value can move up to half an
/// ulp further.
pub fn error_bound(t: &Tensor, bits: u32) -> f64 {
    if bits >= 32 || t.is_empty() {
        return 0.0;
    }
    (t.max() - t.min()) / (2.0 * ((1u64 << bits) - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    /// Leave batch-norm coefficients and statistics at full precision.
    pub exclude_bn: bool,
}

impl QuantSpec {
    pub fn new(bits: u32) -> Self {
        Self { bits, exclude_bn: true }
    }

    pub fn quantizes(&self, key: ParamKey) -> bool {
        self.bits < 32 && !(self.exclude_bn && key.is_batch_norm())
    }
}

/// A quantized copy of `net`; `net` itself is untouched.
pub fn quantize_model(net: &DanNetwork, spec: QuantSpec) -> Result<DanNetwork> {
    check_bits(spec.bits)?;
    let mut out = net.clone();
    for key in net.keys() {
        if spec.quantizes(key) {
            let q = quantize_linear(net.tensor(key).expect("listed key"), spec.bits)?;
            *out.tensor_mut(key).expect("listed key") = q;
        }
    }
    Ok(out)
}

/// Stored size in bits: quantized values at `spec.bits`, everything else
/// at 32.
pub fn storage_bits(net: &DanNetwork, spec: QuantSpec) -> u64 {
    net.keys()
        .into_iter()
        .map(|k| {
            let n = net.tensor(k).map_or(0, Tensor::len) as u64;
            n * if spec.quantizes(k) { spec.bits as u64 } else { 32 }
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantRow {
    pub bits: u32,
    pub accuracy: f64,
    pub total_param_bits: u64,
}

/// Accuracy of task `task` after quantizing to each width, in order.
pub fn accuracy_vs_bits(net: &DanNetwork, data: &Dataset, task: usize, bits_list: &[u32]) -> Result<Vec<QuantRow>> {
    bits_list
        .iter()
        .map(|&bits| {
            let spec = QuantSpec::new(bits);
            let q = quantize_model(net, spec)?;
            Ok(QuantRow { bits, accuracy: evaluate(&q, data, task)?, total_param_bits: storage_bits(net, spec) })
        })
        .collect()
}
