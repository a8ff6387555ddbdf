//! Image-quality and watermark-detection metrics.

pub mod ssim;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::payload::WatermarkPayload;

pub const DEFAULT_THRESHOLDS: [f64; 9] = [0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55];

/// Fraction of positions where the two payloads agree.
pub fn bit_accuracy(a: &WatermarkPayload, b: &WatermarkPayload) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Parameter("empty payloads".into()));
    }
    let agree = a.bits().iter().zip(b.bits()).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.len() as f64)
}

/// `Σ_{i=k}^{n} C(n, i)` as an exact integer.
fn upper_tail_count(n: usize, k: usize) -> BigUint {
    let mut total = BigUint::zero();
    let mut c = BigUint::one(); // C(n, n)
    for i in (k..=n).rev() {
        total += &c;
        if i > 0 {
            // C(n, i-1) = C(n, i) * i / (n - i + 1)
            c = c * BigUint::from(i) / BigUint::from(n - i + 1);
        }
    }
    total
}

/// Exact binomial upper tail `P(X ≥ k)` for `X ~ Bin(n, 1/2)`.
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let count = upper_tail_count(n, k);
    let bits = count.bits() as i64;
    let shift = (bits - 60).max(0);
    let mantissa = (&count >> shift as usize).to_f64().unwrap_or(f64::INFINITY);
    mantissa * 2f64.powi((shift - n as i64) as i32)
}

/// Splits a finite positive `f64` into `(m, e)` with `x = m · 2^e` exactly.
fn dyadic(x: f64) -> (u64, i64) {
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp - 1075)
    }
}

/// Smallest number of matching bits `k` whose chance probability
/// `Σ_{i=k}^{n} C(n,i)/2^n` is at most `alpha`, or `None` when even `k = n`
/// is not significant. The comparison is exact.
pub fn min_detection_bits(n: usize, alpha: f64) -> Result<Option<usize>> {
    if !(1..=4096).contains(&n) {
        return Err(Error::Parameter(format!("payload length {n} outside 1..=4096")));
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::Parameter(format!("alpha {alpha} outside (0, 0.5)")));
    }
    // tail ≤ alpha  ⇔  count ≤ m · 2^(e + n)
    let (m, e) = dyadic(alpha);
    let shift = e + n as i64;
    let (bound, count_shift) = if shift >= 0 {
        (BigUint::from(m) << shift as usize, 0usize)
    } else {
        (BigUint::from(m), (-shift) as usize)
    };
    let mut answer = None;
    let mut count = BigUint::zero();
    let mut c = BigUint::one();
    for i in (0..=n).rev() {
        count += &c;
        if (&count << count_shift) > bound {
            break;
        }
        answer = Some(i);
        if i > 0 {
            c = c * BigUint::from(i) / BigUint::from(n - i + 1);
        }
    }
    Ok(answer)
}

/// Mean windowed SSIM over all channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w, c) = a.shape();
    let mut total = 0.0;
    for ch in 0..c {
        total += ssim::ssim_plane(&a.plane(ch).data, &b.plane(ch).data, h, w)?;
    }
    Ok(total / c as f64)
}

/// Peak signal-to-noise ratio with peak 1; identical images give `+∞`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Evasion,
    Forgery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionRule {
    pub thresholds: Vec<f64>,
    pub pvalue_alpha: f64,
}

impl Default for DetectionRule {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            pvalue_alpha: 0.05,
        }
    }
}

impl DetectionRule {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Parameter("no detection thresholds".into()));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.5 && **t <= 1.0)) {
            return Err(Error::Parameter(format!("threshold {t} outside (0.5, 1]")));
        }
        if !(self.pvalue_alpha > 0.0 && self.pvalue_alpha < 0.5) {
            return Err(Error::Parameter(format!("alpha {} outside (0, 0.5)", self.pvalue_alpha)));
        }
        Ok(())
    }
}

/// Quality and detection statistics for one attacked sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub bit_accuracy: f64,
    pub matching_bits: usize,
    pub payload_bits: usize,
    pub ssim: f64,
    /// `+∞` for identical images.
    #[serde(with = "extended_f64")]
    pub psnr: f64,
    /// One entry per rule threshold, in rule order.
    pub detected: Vec<bool>,
    pub pvalue_detected: bool,
}

impl MetricRecord {
    pub fn evaluate(
        rule: &DetectionRule,
        truth: &WatermarkPayload,
        extracted: &WatermarkPayload,
        reference: &ImageBuffer,
        attacked: &ImageBuffer,
    ) -> Result<Self> {
        rule.validate()?;
        let acc = bit_accuracy(truth, extracted)?;
        let n = truth.len();
        let matching = (acc * n as f64).round() as usize;
        let pvalue_detected = match min_detection_bits(n, rule.pvalue_alpha)? {
            Some(k) => matching >= k,
            None => false,
        };
        Ok(Self {
            bit_accuracy: acc,
            matching_bits: matching,
            payload_bits: n,
            ssim: ssim(reference, attacked)?,
            psnr: psnr(reference, attacked)?,
            detected: rule.thresholds.iter().map(|&t| acc >= t).collect(),
            pvalue_detected,
        })
    }
}

/// Serialises non-finite values as the strings `"inf"`, `"-inf"` and `"nan"`
/// so they survive JSON.
pub mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("invalid number {other:?}"))),
            },
        }
    }
}

/// Evasion counts `acc < threshold` as success; forgery counts `acc ≥ threshold`.
pub fn success_rate(accuracies: &[f64], mode: AttackMode, threshold: f64) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::Parameter("success rate of an empty record set".into()));
    }
    let hits = accuracies
        .iter()
        .filter(|&&a| match mode {
            AttackMode::Evasion => a < threshold,
            AttackMode::Forgery => a >= threshold,
        })
        .count();
    Ok(hits as f64 / accuracies.len() as f64)
}

/// [`success_rate`] over metric records.
pub fn records_success_rate(records: &[MetricRecord], mode: AttackMode, threshold: f64) -> Result<f64> {
    let acc: Vec<f64> = records.iter().map(|r| r.bit_accuracy).collect();
    success_rate(&acc, mode, threshold)
}
