//! Masked feature-space distance `L(𝒲·F(a), 𝒲·F(b))` and its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ChannelWeights, FeatureStack};
use crate::metrics::ssim::{ssim_plane, ssim_plane_grad};
use crate::nn::Tensor;

/// Weights of the SSIM and L1 terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossMix {
    pub ssim_weight: f64,
    pub l1_weight: f64,
}

impl Default for LossMix {
    fn default() -> Self {
        Self {
            ssim_weight: 0.5,
            l1_weight: 0.5,
        }
    }
}

impl LossMix {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.ssim_weight) || !ok(self.l1_weight) || self.ssim_weight + self.l1_weight <= 0.0 {
            return Err(Error::Parameter(
                "loss weights must be non-negative with at least one positive".into(),
            ));
        }
        Ok(())
    }
}

fn check(a: &FeatureStack, b: &FeatureStack, weights: &ChannelWeights) -> Result<Vec<usize>> {
    a.ensure_same_shape(b)?;
    if weights.channels() != a.channels() {
        return Err(Error::LengthMismatch(weights.channels(), a.channels()));
    }
    let selected = weights.selected();
    if selected.is_empty() {
        return Err(Error::Parameter("no channels selected".into()));
    }
    Ok(selected)
}

/// `ssim_w·(1 − mean SSIM over selected channels) + l1_w·mean |a − b|` over
/// the selected channels.
pub fn feature_distance(a: &FeatureStack, b: &FeatureStack, weights: &ChannelWeights, mix: LossMix) -> Result<f64> {
    let selected = check(a, b, weights)?;
    let (h, w) = (a.maps.h, a.maps.w);
    let mut ssim = 0.0;
    let mut l1 = 0.0;
    for &c in &selected {
        let (pa, pb) = (a.maps.plane(c), b.maps.plane(c));
        if mix.ssim_weight > 0.0 {
            ssim += ssim_plane(pa, pb, h, w)?;
        }
        l1 += pa.iter().zip(pb).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    let k = selected.len() as f64;
    let ssim_term = if mix.ssim_weight > 0.0 { mix.ssim_weight * (1.0 - ssim / k) } else { 0.0 };
    Ok(ssim_term + mix.l1_weight * l1 / (k * (h * w) as f64))
}

/// Distance and its gradient with respect to the maps of `b`.
pub fn feature_distance_grad(
    a: &FeatureStack,
    b: &FeatureStack,
    weights: &ChannelWeights,
    mix: LossMix,
) -> Result<(f64, Tensor)> {
    let selected = check(a, b, weights)?;
    let (h, w) = (a.maps.h, a.maps.w);
    let k = selected.len() as f64;
    let l1_scale = mix.l1_weight / (k * (h * w) as f64);
    let mut grad = Tensor::zeros(b.maps.c, h, w);
    let mut ssim = 0.0;
    let mut l1 = 0.0;
    for &c in &selected {
        let (pa, pb) = (a.maps.plane(c), b.maps.plane(c));
        let g = grad.plane_mut(c);
        if mix.ssim_weight > 0.0 {
            let (s, gs) = ssim_plane_grad(pa, pb, h, w)?;
            ssim += s;
            for (o, v) in g.iter_mut().zip(gs) {
                *o -= mix.ssim_weight / k * v;
            }
        }
        for ((o, x), y) in g.iter_mut().zip(pa).zip(pb) {
            l1 += (x - y).abs();
            // subgradient 0 at equality
            *o += l1_scale * (y - x).signum() * f64::from(u8::from(x != y));
        }
    }
    let ssim_term = if mix.ssim_weight > 0.0 { mix.ssim_weight * (1.0 - ssim / k) } else { 0.0 };
    Ok((ssim_term + l1_scale * l1, grad))
}
