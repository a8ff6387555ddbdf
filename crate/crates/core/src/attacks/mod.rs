//! No-box evasion and forgery attacks on leakage channels, plus degradation
//! baselines.
//!
//! Attacks see only images and a feature extractor, never a codec. Evasion
//! pushes the selected channels of `F(I_wm + δ)` away from `F(I_wm)` under an
//! L∞ budget. Forgery reuses that optimisation (Stage I), transplants `−δ` onto
//! a clean image, and optionally aligns the remaining channels (Stage II).

mod baseline;
mod distance;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{locate_with, ChannelWeights, Extractor, FeatureStack, LayerTag, LocatorConfig};
use crate::image::ImageBuffer;
use crate::nn::{AdamW, Tensor};
use crate::perturbation::{apply_raw, linf_norm, project_in_place, Perturbation, Projection};
use crate::rng::{stream, RandomSeedContext};

pub use baseline::{baseline_attack, BaselineKind};
pub use distance::{feature_distance, feature_distance_grad, LossMix};

/// Update rule applied before each projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay using the config's rate and decay.
    AdamW,
    /// `δ ← δ ± step·sign(∇)`, classic PGD.
    SignedGradient { step: f64 },
}

/// Which channels enter the loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelSelection {
    /// Locator output `𝒲`.
    #[default]
    Located,
    /// Every channel (ablation without `𝒲`).
    All,
}

/// Space in which the distance is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSpace {
    #[default]
    Extractor,
    /// Raw RGB planes as three "channels" (ablation without `F`).
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// L∞ budget in the `[0, 1]` pixel domain.
    pub epsilon: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss_mix: LossMix,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub projection: Projection,
    pub channel_selection: ChannelSelection,
    pub feature_space: FeatureSpace,
    pub layer_tag: LayerTag,
    pub locator: LocatorConfig,
    /// Initial noise amplitude as a fraction of `epsilon`.
    pub init_fraction: f64,
}

/// Default L∞ budget.
pub const DEFAULT_EPSILON: f64 = 10.0 / 255.0;

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            steps: 100,
            learning_rate: 0.15,
            weight_decay: 1e-4,
            loss_mix: LossMix::default(),
            seed: 0,
            optimizer: OptimizerKind::AdamW,
            projection: Projection::GlobalRescale,
            channel_selection: ChannelSelection::Located,
            feature_space: FeatureSpace::Extractor,
            layer_tag: LayerTag::default(),
            locator: LocatorConfig::default(),
            init_fraction: 0.1,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter("learning rate must be positive and weight decay non-negative".into()));
        }
        if let OptimizerKind::SignedGradient { step } = self.optimizer {
            if !(step > 0.0) {
                return Err(Error::Parameter("signed-gradient step must be positive".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.init_fraction) {
            return Err(Error::Parameter("init fraction must lie in [0, 1]".into()));
        }
        self.loss_mix.validate()
    }

    fn ctx(&self, stream_id: u64) -> RandomSeedContext {
        RandomSeedContext::new(self.seed, stream_id)
    }

    fn locator_config(&self) -> LocatorConfig {
        LocatorConfig {
            seed: self.seed,
            ..self.locator
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageTag {
    Evasion,
    ForgeStage1,
    ForgeOnlyStage2,
    ForgeStage12,
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageTag::Evasion => "evasion",
            StageTag::ForgeStage1 => "forge-stage1",
            StageTag::ForgeOnlyStage2 => "forge-only-stage2",
            StageTag::ForgeStage12 => "forge-stage1+2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub attacked: ImageBuffer,
    pub delta: Perturbation,
    pub delta_s: Option<Perturbation>,
    /// Objective value after each Stage I step (evasion) or Stage II step.
    pub loss_trace: Vec<f64>,
    /// Stage I trace for two-stage forgeries.
    pub stage1_trace: Vec<f64>,
    /// `||attacked − source||∞` after clamping.
    pub achieved_linf: f64,
    pub stage: StageTag,
    pub weights: Option<ChannelWeights>,
}

/// Features in the configured space, with what the backward pass needs.
enum Forward {
    Extractor(crate::features::ForwardCache),
    Pixel,
}

fn features(
    extractor: &Extractor,
    config: &AttackConfig,
    pixels: &[f64],
    h: usize,
    w: usize,
) -> Result<(FeatureStack, Forward)> {
    match config.feature_space {
        FeatureSpace::Extractor => {
            let (stack, cache) = extractor.forward_pixels(pixels, h, w, config.layer_tag)?;
            Ok((stack, Forward::Extractor(cache)))
        }
        FeatureSpace::Pixel => {
            let mut maps = Tensor::zeros(3, h, w);
            for c in 0..3 {
                let plane = maps.plane_mut(c);
                for i in 0..h * w {
                    plane[i] = pixels[i * 3 + c];
                }
            }
            let stack = FeatureStack {
                maps,
                layer_tag: config.layer_tag,
                source_shape: (h, w),
            };
            Ok((stack, Forward::Pixel))
        }
    }
}

fn pixel_gradient(extractor: &Extractor, fwd: &Forward, grad: &Tensor) -> Vec<f64> {
    match fwd {
        Forward::Extractor(cache) => extractor.backward(cache, grad),
        Forward::Pixel => {
            let n = grad.h * grad.w;
            let mut out = vec![0.0; 3 * n];
            for c in 0..3 {
                for (i, v) in grad.plane(c).iter().enumerate() {
                    out[i * 3 + c] = *v;
                }
            }
            out
        }
    }
}

/// Channel weights for an attack on `image`'s features.
pub fn attack_weights(extractor: &Extractor, image: &ImageBuffer, config: &AttackConfig) -> Result<ChannelWeights> {
    let (h, w, _) = image.shape();
    let (stack, _) = features(extractor, config, image.as_slice(), h, w)?;
    select_channels(&stack, config)
}

fn select_channels(stack: &FeatureStack, config: &AttackConfig) -> Result<ChannelWeights> {
    match (config.feature_space, config.channel_selection) {
        (FeatureSpace::Extractor, ChannelSelection::Located) => locate_with(stack, &config.locator_config()),
        _ => Ok(ChannelWeights::all(stack.channels())),
    }
}

/// Value and pixel gradient of `L(𝒲·ref, 𝒲·F(base + δ))`.
pub fn objective_and_gradient(
    extractor: &Extractor,
    base: &ImageBuffer,
    delta: &[f64],
    reference: &FeatureStack,
    weights: &ChannelWeights,
    config: &AttackConfig,
) -> Result<(f64, Vec<f64>)> {
    let (h, w, c) = base.shape();
    if delta.len() != h * w * c {
        return Err(Error::LengthMismatch(delta.len(), h * w * c));
    }
    let x: Vec<f64> = base.as_slice().iter().zip(delta).map(|(p, d)| p + d).collect();
    let (stack, fwd) = features(extractor, config, &x, h, w)?;
    let (value, g_maps) = feature_distance_grad(reference, &stack, weights, config.loss_mix)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteFeatures);
    }
    Ok((value, pixel_gradient(extractor, &fwd, &g_maps)))
}

/// Direction of optimisation relative to the feature distance.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Goal {
    Maximise,
    Minimise,
}

/// The shared projected optimisation loop. `project` enforces the budget on
/// the iterate after every update (and once after initialisation).
#[allow(clippy::too_many_arguments)]
fn optimise(
    extractor: &Extractor,
    base: &ImageBuffer,
    reference: &FeatureStack,
    weights: &ChannelWeights,
    config: &AttackConfig,
    mut delta: Vec<f64>,
    goal: Goal,
    project: &dyn Fn(&mut [f64]),
) -> Result<(Vec<f64>, Vec<f64>)> {
    project(&mut delta);
    let mut adam = AdamW::new(config.learning_rate, config.weight_decay);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (value, mut grad) = objective_and_gradient(extractor, base, &delta, reference, weights, config)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.push(value);
        if goal == Goal::Maximise {
            grad.iter_mut().for_each(|g| *g = -*g);
        }
        match config.optimizer {
            OptimizerKind::AdamW => adam.step(&mut [&mut delta], &[&grad]),
            OptimizerKind::SignedGradient { step } => {
                for (d, g) in delta.iter_mut().zip(&grad) {
                    *d -= step * g.signum() * f64::from(u8::from(*g != 0.0));
                }
            }
        }
        project(&mut delta);
    }
    Ok((delta, trace))
}

/// Stage I result: `δ`, the channel selection it was optimised on, and the
/// objective trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOne {
    pub delta: Perturbation,
    pub weights: ChannelWeights,
    pub trace: Vec<f64>,
}

/// The evasion optimisation, shared verbatim by [`evade`] and
/// [`forge_stage1`].
pub fn stage_one(image_wm: &ImageBuffer, extractor: &Extractor, config: &AttackConfig) -> Result<StageOne> {
    config.validate()?;
    image_wm.ensure_attackable()?;
    let (h, w, c) = image_wm.shape();
    let (reference, _) = features(extractor, config, image_wm.as_slice(), h, w)?;
    let weights = select_channels(&reference, config)?;
    let init = Perturbation::uniform(
        (h, w, c),
        config.epsilon,
        config.epsilon * config.init_fraction,
        config.ctx(stream::DELTA_INIT),
    )?;
    let eps = config.epsilon;
    let mode = config.projection;
    let (delta, trace) = optimise(
        extractor,
        image_wm,
        &reference,
        &weights,
        config,
        init.delta,
        Goal::Maximise,
        &|d| project_in_place(d, eps, mode),
    )?;
    Ok(StageOne {
        delta: Perturbation::from_delta((h, w, c), delta, eps)?,
        weights,
        trace,
    })
}

/// Evasion: returns `clamp(I_wm + δ)`.
pub fn evade(image_wm: &ImageBuffer, extractor: &Extractor, config: &AttackConfig) -> Result<AttackOutcome> {
    let s1 = stage_one(image_wm, extractor, config)?;
    let attacked = apply_raw(image_wm, &s1.delta.delta, s1.delta.shape, 1.0)?;
    Ok(AttackOutcome {
        achieved_linf: attacked.linf_distance(image_wm)?,
        attacked,
        delta: s1.delta,
        delta_s: None,
        loss_trace: s1.trace,
        stage1_trace: Vec::new(),
        stage: StageTag::Evasion,
        weights: Some(s1.weights),
    })
}

/// Stage I of forgery: the evasion perturbation `δ` itself.
pub fn forge_stage1(image_wm: &ImageBuffer, extractor: &Extractor, config: &AttackConfig) -> Result<Perturbation> {
    Ok(stage_one(image_wm, extractor, config)?.delta)
}

/// Stage II: aligns the complement channels of `F(I' + δ_s)` with those of
/// `F(I_wm + δ)`, keeping `||−δ + δ_s||∞ ≤ ε`. Returns `δ_s` and its trace.
pub fn forge_stage2(
    image_wm: &ImageBuffer,
    delta: &Perturbation,
    clean: &ImageBuffer,
    weights: &ChannelWeights,
    extractor: &Extractor,
    config: &AttackConfig,
) -> Result<(Perturbation, Vec<f64>)> {
    config.validate()?;
    image_wm.ensure_same_shape(clean)?;
    clean.ensure_attackable()?;
    if delta.shape != clean.shape() {
        return Err(Error::ShapeMismatch {
            left: delta.shape,
            right: clean.shape(),
        });
    }
    let (h, w, c) = clean.shape();
    let shifted: Vec<f64> = image_wm.as_slice().iter().zip(&delta.delta).map(|(p, d)| p + d).collect();
    let (reference, _) = features(extractor, config, &shifted, h, w)?;
    let complement = weights.complement()?;
    let init = Perturbation::uniform(
        (h, w, c),
        config.epsilon,
        config.epsilon * config.init_fraction,
        config.ctx(stream::DELTA_S_INIT),
    )?;
    let eps = config.epsilon;
    let mode = config.projection;
    let d = delta.delta.clone();
    let (delta_s, trace) = optimise(
        extractor,
        clean,
        &reference,
        &complement,
        config,
        init.delta,
        Goal::Minimise,
        &move |ds: &mut [f64]| {
            // δ̂ = −δ + δ_s is what reaches the clean image; budget it, then
            // recover δ_s = δ̂ + δ
            let mut hat: Vec<f64> = ds.iter().zip(&d).map(|(s, x)| s - x).collect();
            project_in_place(&mut hat, eps, mode);
            for ((s, hv), x) in ds.iter_mut().zip(&hat).zip(&d) {
                *s = hv + x;
            }
        },
    )?;
    Ok((Perturbation::from_delta((h, w, c), delta_s, eps)?, trace))
}

/// Stage II without Stage I: aligns the complement channels of `F(I' + δ_s)`
/// with `F(I_wm)` under `||δ_s||∞ ≤ ε`.
pub fn forge_only_stage2(
    image_wm: &ImageBuffer,
    clean: &ImageBuffer,
    extractor: &Extractor,
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    config.validate()?;
    image_wm.ensure_same_shape(clean)?;
    image_wm.ensure_attackable()?;
    let (h, w, c) = clean.shape();
    let (reference, _) = features(extractor, config, image_wm.as_slice(), h, w)?;
    let weights = select_channels(&reference, config)?;
    let complement = weights.complement()?;
    let init = Perturbation::uniform(
        (h, w, c),
        config.epsilon,
        config.epsilon * config.init_fraction,
        config.ctx(stream::DELTA_S_INIT),
    )?;
    let eps = config.epsilon;
    let mode = config.projection;
    let (delta_s, trace) = optimise(
        extractor,
        clean,
        &reference,
        &complement,
        config,
        init.delta,
        Goal::Minimise,
        &|d| project_in_place(d, eps, mode),
    )?;
    let delta_s = Perturbation::from_delta((h, w, c), delta_s, eps)?;
    let attacked = apply_raw(clean, &delta_s.delta, delta_s.shape, 1.0)?;
    Ok(AttackOutcome {
        achieved_linf: attacked.linf_distance(clean)?,
        attacked,
        delta: Perturbation::zeros((h, w, c), eps)?,
        delta_s: Some(delta_s),
        loss_trace: trace,
        stage1_trace: Vec::new(),
        stage: StageTag::ForgeOnlyStage2,
        weights: Some(weights),
    })
}

/// Both forgery outputs for one (watermarked source, clean target) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgeryOutcome {
    /// `clamp(I' − δ)`.
    pub stage1: AttackOutcome,
    /// `clamp(I' − δ + δ_s)`.
    pub stage12: AttackOutcome,
}

/// Full two-stage forgery.
pub fn forge(
    image_wm: &ImageBuffer,
    clean: &ImageBuffer,
    extractor: &Extractor,
    config: &AttackConfig,
) -> Result<ForgeryOutcome> {
    image_wm.ensure_same_shape(clean)?;
    let s1 = stage_one(image_wm, extractor, config)?;
    let stage1_img = apply_raw(clean, &s1.delta.delta, s1.delta.shape, -1.0)?;
    let (delta_s, trace2) = forge_stage2(image_wm, &s1.delta, clean, &s1.weights, extractor, config)?;
    let combined: Vec<f64> = delta_s.delta.iter().zip(&s1.delta.delta).map(|(s, d)| s - d).collect();
    let stage12_img = apply_raw(clean, &combined, clean.shape(), 1.0)?;
    Ok(ForgeryOutcome {
        stage1: AttackOutcome {
            achieved_linf: stage1_img.linf_distance(clean)?,
            attacked: stage1_img,
            delta: s1.delta.clone(),
            delta_s: None,
            loss_trace: s1.trace.clone(),
            stage1_trace: Vec::new(),
            stage: StageTag::ForgeStage1,
            weights: Some(s1.weights.clone()),
        },
        stage12: AttackOutcome {
            achieved_linf: stage12_img.linf_distance(clean)?,
            attacked: stage12_img,
            delta: s1.delta,
            delta_s: Some(delta_s),
            loss_trace: trace2,
            stage1_trace: s1.trace,
            stage: StageTag::ForgeStage12,
            weights: Some(s1.weights),
        },
    })
}

/// `||−δ + δ_s||∞`, the budget actually spent on the clean image.
pub fn combined_linf(delta: &Perturbation, delta_s: &Perturbation) -> f64 {
    let v: Vec<f64> = delta_s.delta.iter().zip(&delta.delta).map(|(s, d)| s - d).collect();
    linf_norm(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn small_config(steps: usize) -> AttackConfig {
        AttackConfig {
            steps,
            seed: 3,
            ..AttackConfig::default()
        }
    }

    fn image(seed: u64) -> ImageBuffer {
        synth::natural_image(64, RandomSeedContext::new(seed, stream::SYNTHESIS))
    }

    #[test]
    fn zero_steps_leaves_only_initial_noise() {
        let img = image(1);
        let cfg = small_config(0);
        let out = evade(&img, &Extractor::builtin(), &cfg).unwrap();
        assert!(out.loss_trace.is_empty());
        assert!(out.achieved_linf <= cfg.epsilon / 10.0 + 1e-12);
    }

    #[test]
    fn evade_and_stage1_share_delta() {
        let img = image(2);
        let ex = Extractor::builtin();
        let cfg = small_config(3);
        assert_eq!(evade(&img, &ex, &cfg).unwrap().delta, forge_stage1(&img, &ex, &cfg).unwrap());
    }

    #[test]
    fn stage2_budget_holds_every_step() {
        let (wm, clean) = (image(3), image(4));
        let ex = Extractor::builtin();
        let cfg = small_config(2);
        let out = forge(&wm, &clean, &ex, &cfg).unwrap();
        let ds = out.stage12.delta_s.as_ref().unwrap();
        assert!(combined_linf(&out.stage12.delta, ds) <= cfg.epsilon + 1e-12);
        assert!(out.stage12.achieved_linf <= cfg.epsilon + 1e-12);
        assert!(out.stage1.achieved_linf <= cfg.epsilon + 1e-12);
        assert_eq!(out.stage12.loss_trace.len(), 2);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let ex = Extractor::builtin();
        let other = synth::natural_image(72, RandomSeedContext::new(5, stream::SYNTHESIS));
        assert!(matches!(
            forge(&image(1), &other, &ex, &small_config(1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn invalid_configs_rejected() {
        let img = image(1);
        let ex = Extractor::builtin();
        for cfg in [
            AttackConfig { epsilon: 0.0, ..small_config(1) },
            AttackConfig { loss_mix: LossMix { ssim_weight: 0.0, l1_weight: 0.0 }, ..small_config(1) },
            AttackConfig { optimizer: OptimizerKind::SignedGradient { step: 0.0 }, ..small_config(1) },
        ] {
            assert!(matches!(evade(&img, &ex, &cfg), Err(Error::Parameter(_))));
        }
    }
}
