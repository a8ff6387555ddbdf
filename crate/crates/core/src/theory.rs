//! Capacity and robustness/visibility tradeoff calculations.
//!
//! A watermark channel with signal `ε·W` and Gaussian distortion noise `σ`
//! carries `½·log₂(1 + ε²‖W‖²/σ²)` bits. Transmitting `H` bits therefore
//! needs `ε‖W‖ ≥ σ·√(2^{2H} − 1)`, while visual quality caps the signal at
//! `C(I)·‖I‖`, where `C(I)` is the largest watermark-to-image norm ratio a
//! codec can embed without dropping below a PSNR floor. `C(I)` is estimated
//! per codec, not over all possible perturbation subspaces.

use serde::{Deserialize, Serialize};

use crate::codecs::distortion::gaussian_noise_image;
use crate::codecs::WatermarkCodec;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::{bit_accuracy, psnr};
use crate::payload::WatermarkPayload;
use crate::rng::{stream, RandomSeedContext};

/// Visual floor accepted by [`embeddable_threshold_estimate`], in dB.
pub const VISUAL_FLOOR_RANGE: (f64, f64) = (20.0, 50.0);
/// Strength grid scanned by [`embeddable_threshold_estimate`].
pub const STRENGTH_GRID: (f64, f64, usize) = (1e-3, 1.0, 64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffInstance {
    pub embedding_strength: f64,
    /// `‖W‖₂` of the unit-strength watermark signal.
    pub signal_norm: f64,
    /// Standard deviation of the distortion noise.
    pub noise_std: f64,
    /// Message entropy in bits.
    pub message_entropy: f64,
    /// `‖I‖₂` of the cover image.
    pub image_norm: f64,
    /// Visual floor in dB.
    pub visual_floor: f64,
    pub bit_error_budget: f64,
    /// Embeddable threshold `C(I)` at `visual_floor`.
    pub embeddable_threshold: f64,
}

impl TradeoffInstance {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_strength", self.embedding_strength),
            ("signal_norm", self.signal_norm),
            ("noise_std", self.noise_std),
            ("image_norm", self.image_norm),
            ("visual_floor", self.visual_floor),
            ("bit_error_budget", self.bit_error_budget),
            ("embeddable_threshold", self.embeddable_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.message_entropy >= 0.0 && self.message_entropy.is_finite()) {
            return Err(Error::Parameter(format!(
                "message entropy must be non-negative, got {}",
                self.message_entropy
            )));
        }
        Ok(())
    }

    /// `C(I)·‖I‖`, the largest signal norm the visual floor permits.
    pub fn signal_budget(&self) -> f64 {
        self.embeddable_threshold * self.image_norm
    }
}

/// Capacity in bits, `½·log₂(1 + ε²‖W‖²/σ²)`.
pub fn channel_capacity(instance: &TradeoffInstance) -> Result<f64> {
    if !(instance.noise_std > 0.0) {
        return Err(Error::Parameter(format!(
            "noise std must be positive, got {}",
            instance.noise_std
        )));
    }
    let snr = (instance.embedding_strength * instance.signal_norm / instance.noise_std).powi(2);
    Ok(0.5 * snr.ln_1p() / std::f64::consts::LN_2)
}

/// Minimum `ε‖W‖` carrying `entropy` bits through noise `sigma`:
/// `σ·√(2^{2H} − 1)`.
pub fn min_signal_for_entropy(entropy: f64, sigma: f64) -> Result<f64> {
    if !(entropy >= 0.0) || !(sigma > 0.0) {
        return Err(Error::Parameter(format!(
            "need entropy >= 0 and sigma > 0, got {entropy} and {sigma}"
        )));
    }
    Ok(sigma * (2.0 * entropy * std::f64::consts::LN_2).exp_m1().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Feasible,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityVerdict {
    pub verdict: Verdict,
    /// `C(I)·‖I‖` minus the required signal; non-negative when feasible.
    pub slack: f64,
    pub required_signal: f64,
    pub signal_budget: f64,
}

/// Robustness and visual quality are jointly satisfiable iff the signal
/// needed for the message fits the visual budget (boundary inclusive).
pub fn feasibility_check(instance: &TradeoffInstance) -> Result<FeasibilityVerdict> {
    instance.validate()?;
    let required = min_signal_for_entropy(instance.message_entropy, instance.noise_std)?;
    let budget = instance.signal_budget();
    Ok(FeasibilityVerdict {
        verdict: if required <= budget { Verdict::Feasible } else { Verdict::Infeasible },
        slack: budget - required,
        required_signal: required,
        signal_budget: budget,
    })
}

/// Entropy at which the verdict flips: `½·log₂(1 + (C‖I‖/σ)²)`.
pub fn entropy_crossing(instance: &TradeoffInstance) -> Result<f64> {
    instance.validate()?;
    let r = instance.signal_budget() / instance.noise_std;
    Ok(0.5 * (r * r).ln_1p() / std::f64::consts::LN_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddableEstimate {
    /// `‖W‖₂/‖I‖₂` at the selected strength; 0 when unreachable.
    pub ratio: f64,
    pub strength: f64,
    pub psnr: f64,
    /// False when even the smallest scanned strength breaks the floor.
    pub reachable: bool,
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Scans a log-spaced strength grid and returns the largest watermark norm
/// ratio `‖embed(I) − I‖/‖I‖` among embeddings with `PSNR ≥ visual_floor`.
/// The payload is a fixed seeded draw of the codec's length.
pub fn embeddable_threshold_estimate(
    image: &ImageBuffer,
    visual_floor: f64,
    codec: &dyn WatermarkCodec,
) -> Result<EmbeddableEstimate> {
    let (lo, hi) = VISUAL_FLOOR_RANGE;
    if !(lo..=hi).contains(&visual_floor) {
        return Err(Error::Parameter(format!(
            "visual floor {visual_floor} dB outside [{lo}, {hi}]"
        )));
    }
    let payload = WatermarkPayload::random(
        codec.descriptor().payload_length,
        RandomSeedContext::new(0, stream::PAYLOAD),
    );
    let image_norm = l2(image.as_slice().iter().copied());
    if image_norm == 0.0 {
        return Err(Error::Parameter("image has zero norm".into()));
    }
    let mut best = EmbeddableEstimate {
        ratio: 0.0,
        strength: 0.0,
        psnr: f64::INFINITY,
        reachable: false,
    };
    for strength in strength_grid() {
        let marked = codec.embed_with_strength(image, &payload, strength)?;
        let p = psnr(image, &marked)?;
        if p < visual_floor {
            continue;
        }
        let ratio = l2(marked.as_slice().iter().zip(image.as_slice()).map(|(a, b)| a - b)) / image_norm;
        if !best.reachable || ratio > best.ratio {
            best = EmbeddableEstimate {
                ratio,
                strength,
                psnr: p,
                reachable: true,
            };
        }
    }
    Ok(best)
}

/// The log-spaced strength grid.
pub fn strength_grid() -> impl Iterator<Item = f64> {
    let (lo, hi, n) = STRENGTH_GRID;
    let step = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(move |i| lo * (step * i as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub strength: f64,
    /// Mean embed PSNR over the images.
    pub psnr: f64,
    /// Mean bit accuracy after Gaussian noise.
    pub robust_accuracy: f64,
}

/// Mean embed PSNR and noisy-channel bit accuracy for each strength. Image
/// `i` uses payload and noise streams `seed ⊕ i`.
pub fn strength_frontier(
    images: &[ImageBuffer],
    codec: &dyn WatermarkCodec,
    strengths: &[f64],
    noise_sigma: f64,
    ctx: RandomSeedContext,
) -> Result<Vec<FrontierPoint>> {
    if images.is_empty() {
        return Err(Error::Parameter("frontier needs at least one image".into()));
    }
    let n = codec.descriptor().payload_length;
    strengths
        .iter()
        .map(|&strength| {
            let (mut p, mut acc) = (0.0, 0.0);
            for (i, img) in images.iter().enumerate() {
                let item = ctx.for_item(i as u64);
                let payload = WatermarkPayload::random(n, item.with_stream(stream::PAYLOAD));
                let marked = codec.embed_with_strength(img, &payload, strength)?.quantize_8bit();
                p += psnr(img, &marked)?;
                let noisy = gaussian_noise_image(&marked, noise_sigma, item.with_stream(stream::NOISE))?;
                acc += bit_accuracy(&payload, &codec.extract_with_strength(&noisy.quantize_8bit(), strength)?)?;
            }
            let k = images.len() as f64;
            Ok(FrontierPoint {
                strength,
                psnr: p / k,
                robust_accuracy: acc / k,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance(entropy: f64) -> TradeoffInstance {
        TradeoffInstance {
            embedding_strength: 0.1,
            signal_norm: 10.0,
            noise_std: 0.5,
            message_entropy: entropy,
            image_norm: 40.0,
            visual_floor: 35.0,
            bit_error_budget: 0.05,
            embeddable_threshold: 0.02,
        }
    }

    #[test]
    fn capacity_of_known_ratios() {
        for (snr, bits) in [(3.0f64, 1.0), (0.0, 0.0), (15.0, 2.0)] {
            let inst = TradeoffInstance {
                embedding_strength: snr.sqrt(),
                signal_norm: 1.0,
                noise_std: 1.0,
                ..instance(1.0)
            };
            assert!((channel_capacity(&inst).unwrap() - bits).abs() < 1e-12);
        }
        let zero = TradeoffInstance {
            noise_std: 0.0,
            ..instance(1.0)
        };
        assert!(channel_capacity(&zero).is_err());
    }

    #[test]
    fn min_signal_examples() {
        assert!((min_signal_for_entropy(1.0, 1.0).unwrap() - 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(min_signal_for_entropy(0.0, 2.0).unwrap(), 0.0);
        assert!((min_signal_for_entropy(2.0, 0.5).unwrap() - 0.5 * 15f64.sqrt()).abs() < 1e-12);
        assert!(min_signal_for_entropy(-1.0, 1.0).is_err());
    }

    #[test]
    fn zero_entropy_is_feasible() {
        let v = feasibility_check(&instance(0.0)).unwrap();
        assert_eq!(v.verdict, Verdict::Feasible);
        assert!((v.slack - 0.8).abs() < 1e-12);
    }

    #[test]
    fn boundary_is_feasible() {
        // budget C·‖I‖ = σ·√3 exactly at H = 1
        let inst = TradeoffInstance {
            noise_std: 1.0,
            image_norm: 3f64.sqrt(),
            embeddable_threshold: 1.0,
            ..instance(1.0)
        };
        let v = feasibility_check(&inst).unwrap();
        assert_eq!(v.required_signal, v.signal_budget);
        assert_eq!(v.verdict, Verdict::Feasible);
    }

    #[test]
    fn crossing_separates_verdicts() {
        let base = instance(0.0);
        let h = entropy_crossing(&base).unwrap();
        let at = |e: f64| feasibility_check(&TradeoffInstance { message_entropy: e, ..base }).unwrap().verdict;
        assert_eq!(at(h * (1.0 - 1e-9)), Verdict::Feasible);
        assert_eq!(at(h * (1.0 + 1e-9)), Verdict::Infeasible);
    }

    #[test]
    fn invalid_instances_rejected() {
        assert!(feasibility_check(&TradeoffInstance {
            image_norm: 0.0,
            ..instance(1.0)
        })
        .is_err());
        assert!(feasibility_check(&instance(f64::NAN)).is_err());
    }

    #[test]
    fn strength_grid_spans_range() {
        let g: Vec<f64> = strength_grid().collect();
        assert_eq!(g.len(), STRENGTH_GRID.2);
        assert!((g[0] - STRENGTH_GRID.0).abs() < 1e-15);
        assert!((g[g.len() - 1] - STRENGTH_GRID.1).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }
}
