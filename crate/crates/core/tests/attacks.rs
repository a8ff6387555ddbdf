use leakmark::attacks::{
    attack_weights, baseline_attack, combined_linf, evade, feature_distance, forge, forge_only_stage2, forge_stage1,
    forge_stage2, objective_and_gradient, AttackConfig, BaselineKind, LossMix, StageTag,
};
use leakmark::features::{ChannelWeights, Extractor, FeatureStack, LayerTag};
use leakmark::nn::Tensor;
use leakmark::rng::stream;
use leakmark::{synth, Error, ImageBuffer, RandomSeedContext};
use proptest::prelude::*;
use rand::Rng;

fn images(n: usize, size: usize, seed: u64) -> Vec<ImageBuffer> {
    synth::corpus(n, size, seed).into_iter().map(|i| i.quantize_8bit()).collect()
}

fn config(steps: usize, seed: u64) -> AttackConfig {
    AttackConfig {
        steps,
        seed,
        ..AttackConfig::default()
    }
}

/// Direct 2-D Gaussian-window SSIM over fully contained 11×11 windows.
fn reference_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut k = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut sum = 0.0;
    let mut count = 0.0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let at = |p: &[f64], i: usize, j: usize| p[(y + i) * w + x + j];
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    ma += k[i][j] / total * at(a, i, j);
                    mb += k[i][j] / total * at(b, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let g = k[i][j] / total;
                    va += g * (at(a, i, j) - ma).powi(2);
                    vb += g * (at(b, i, j) - mb).powi(2);
                    cov += g * (at(a, i, j) - ma) * (at(b, i, j) - mb);
                }
            }
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    sum / count
}

fn one_channel(data: Vec<f64>, side: usize) -> FeatureStack {
    FeatureStack {
        maps: Tensor::from_vec(1, side, side, data),
        layer_tag: LayerTag::Stem,
        source_shape: (64, 64),
    }
}

#[test]
fn feature_distance_matches_reference_formula() {
    // smallest plane that holds one 11×11 window plus a margin
    let side = 12;
    let a: Vec<f64> = (0..side * side).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
    let b: Vec<f64> = (0..side * side).map(|i| ((i * 5) % 11) as f64 / 11.0 + 0.1).collect();
    let (sa, sb) = (one_channel(a.clone(), side), one_channel(b.clone(), side));
    let w = ChannelWeights::all(1);
    for (ws, wl) in [(0.5, 0.5), (1.0, 0.0), (0.0, 1.0), (0.3, 0.9)] {
        let mix = LossMix {
            ssim_weight: ws,
            l1_weight: wl,
        };
        let l1 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / (side * side) as f64;
        let want = ws * (1.0 - reference_ssim(&a, &b, side, side)) + wl * l1;
        let got = feature_distance(&sa, &sb, &w, mix).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert_eq!(feature_distance(&sb, &sa, &w, mix).unwrap(), got);
        assert_eq!(feature_distance(&sa, &sa, &w, mix).unwrap(), 0.0);
    }
}

#[test]
fn zero_steps_leave_only_the_initial_noise() {
    let ex = Extractor::builtin();
    let img = &images(1, 64, 1)[0];
    let cfg = config(0, 2);
    let out = evade(img, &ex, &cfg).unwrap();
    assert!(out.loss_trace.is_empty());
    assert!(out.delta.linf() <= cfg.epsilon / 10.0 + 1e-15);
    assert!(out.achieved_linf <= cfg.epsilon / 10.0 + 1e-12);
}

#[test]
fn evasion_and_stage_one_share_their_perturbation() {
    let ex = Extractor::builtin();
    for (i, img) in images(4, 64, 3).iter().enumerate() {
        let cfg = config(5, i as u64);
        let e = evade(img, &ex, &cfg).unwrap();
        let f = forge_stage1(img, &ex, &cfg).unwrap();
        assert_eq!(e.delta.delta, f.delta);
        assert_eq!(e.stage, StageTag::Evasion);
    }
}

/// Step size of ε/100, so the iterate reaches the budget boundary only after
/// many steps. At the default rate one step already spans the budget.
fn fine_config(steps: usize, seed: u64) -> AttackConfig {
    let base = config(steps, seed);
    AttackConfig {
        learning_rate: base.epsilon / 100.0,
        ..base
    }
}

fn fraction(t: &[f64], f: impl Fn(f64, f64) -> bool) -> f64 {
    t.windows(2).filter(|w| f(w[0], w[1])).count() as f64 / (t.len() - 1) as f64
}

#[test]
fn evasion_loss_climbs() {
    let ex = Extractor::builtin();
    for (i, img) in images(3, 64, 4).iter().enumerate() {
        let out = evade(img, &ex, &fine_config(40, i as u64)).unwrap();
        let t = &out.loss_trace;
        assert_eq!(t.len(), 40);
        assert!(fraction(t, |a, b| b >= a) >= 0.9, "{t:?}");
    }
}

#[test]
fn default_rate_evasion_rises_and_holds_near_its_peak() {
    let ex = Extractor::builtin();
    for (i, img) in images(3, 64, 4).iter().enumerate() {
        let t = evade(img, &ex, &config(40, i as u64)).unwrap().loss_trace;
        let peak = t.iter().cloned().fold(f64::MIN, f64::max);
        let tail = t[t.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail > 10.0 * t[0] && tail >= 0.9 * peak, "{t:?}");
    }
}

#[test]
fn only_stage_two_on_identical_inputs_descends_to_a_plateau() {
    let ex = Extractor::builtin();
    let img = &images(1, 64, 5)[0];
    let out = forge_only_stage2(img, img, &ex, &fine_config(60, 6)).unwrap();
    let t = &out.loss_trace;
    // monotone descent phase, then a flat tail
    assert!(t[..30].windows(2).all(|w| w[1] < w[0]), "{t:?}");
    assert!(t.last().unwrap() < &(0.1 * t[0]), "{t:?}");
    let tail = &t[t.len() - 10..];
    let spread = tail.iter().cloned().fold(f64::MIN, f64::max) - tail.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.1 * t[0], "{t:?}");
}

/// Central differences of the full objective at random pixels against the
/// analytic gradient.
#[test]
fn objective_gradient_matches_finite_differences() {
    let ex = Extractor::builtin();
    let img = &images(1, 64, 7)[0];
    let cfg = config(1, 8);
    let weights = attack_weights(&ex, img, &cfg).unwrap();
    let reference = ex.extract(img, cfg.layer_tag).unwrap();
    let mut rng = RandomSeedContext::new(9, stream::NOISE).rng();
    let delta: Vec<f64> = (0..img.len()).map(|_| rng.random_range(-0.02..0.02)).collect();
    let (_, grad) = objective_and_gradient(&ex, img, &delta, &reference, &weights, &cfg).unwrap();
    let h = 1e-4;
    let mut checked = 0;
    while checked < 5 {
        let i = rng.random_range(0..img.len());
        if grad[i].abs() < 1e-7 {
            continue;
        }
        let mut plus = delta.clone();
        plus[i] += h;
        let mut minus = delta.clone();
        minus[i] -= h;
        let fp = objective_and_gradient(&ex, img, &plus, &reference, &weights, &cfg).unwrap().0;
        let fm = objective_and_gradient(&ex, img, &minus, &reference, &weights, &cfg).unwrap().0;
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
        assert!(rel < 1e-3, "pixel {i}: analytic {} vs fd {fd}", grad[i]);
        checked += 1;
    }
}

#[test]
fn forgery_stages_respect_the_combined_budget_at_every_step() {
    let ex = Extractor::builtin();
    let imgs = images(2, 64, 10);
    let (wm, clean) = (&imgs[0], &imgs[1]);
    let base = config(3, 11);
    let delta = forge_stage1(wm, &ex, &base).unwrap();
    let weights = attack_weights(&ex, wm, &base).unwrap();
    for steps in 0..=4 {
        let cfg = config(steps, 11);
        let (ds, trace) = forge_stage2(wm, &delta, clean, &weights, &ex, &cfg).unwrap();
        assert_eq!(trace.len(), steps);
        assert!(combined_linf(&delta, &ds) <= cfg.epsilon + 1e-12);
    }
}

#[test]
fn stage_two_rejects_mismatched_shapes() {
    let ex = Extractor::builtin();
    let wm = &images(1, 64, 12)[0];
    let clean = &images(1, 72, 13)[0];
    let cfg = config(1, 0);
    let delta = forge_stage1(wm, &ex, &cfg).unwrap();
    let weights = attack_weights(&ex, wm, &cfg).unwrap();
    let err = forge_stage2(wm, &delta, clean, &weights, &ex, &cfg).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
}

#[test]
fn baseline_ranges_and_identity() {
    let img = &images(1, 64, 14)[0];
    let ctx = RandomSeedContext::new(0, stream::NOISE);
    assert_eq!(&baseline_attack(img, BaselineKind::GaussianNoise { sigma: 0.0 }, ctx).unwrap(), img);
    for bad in [
        BaselineKind::Jpeg { quality: 5 },
        BaselineKind::Jpeg { quality: 99 },
        BaselineKind::GaussianNoise { sigma: 0.2 },
        BaselineKind::GaussianBlur { sigma: 0.1 },
        BaselineKind::GaussianBlur { sigma: 6.0 },
    ] {
        assert!(matches!(baseline_attack(img, bad, ctx), Err(Error::Parameter(_))), "{bad:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_output_stays_within_budget(eps_255 in 1.0f64..24.0, seed in 0u64..1000, steps in 1usize..4) {
        let ex = Extractor::builtin();
        let imgs = images(2, 64, seed);
        let cfg = AttackConfig { epsilon: eps_255 / 255.0, ..config(steps, seed) };
        let slack = cfg.epsilon + 1.0 / 255.0;
        let e = evade(&imgs[0], &ex, &cfg).unwrap();
        prop_assert!(e.attacked.linf_distance(&imgs[0]).unwrap() <= slack);
        prop_assert!(e.attacked.quantize_8bit().linf_distance(&imgs[0]).unwrap() <= slack + 1e-12);
        let f = forge(&imgs[0], &imgs[1], &ex, &cfg).unwrap();
        for out in [&f.stage1, &f.stage12] {
            prop_assert!(out.attacked.quantize_8bit().linf_distance(&imgs[1]).unwrap() <= slack + 1e-12);
        }
        let o = forge_only_stage2(&imgs[0], &imgs[1], &ex, &cfg).unwrap();
        prop_assert!(o.attacked.quantize_8bit().linf_distance(&imgs[1]).unwrap() <= slack + 1e-12);
    }
}
