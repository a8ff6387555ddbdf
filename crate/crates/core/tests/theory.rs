use leakmark::codecs::{DwtDct, DwtDctSvd, WatermarkCodec, DEFAULT_QIM_STEP};
use leakmark::rng::{stream, RandomSeedContext};
use leakmark::theory::{
    channel_capacity, embeddable_threshold_estimate, entropy_crossing, feasibility_check, min_signal_for_entropy,
    strength_frontier, TradeoffInstance, Verdict,
};
use leakmark::{synth, ImageBuffer};
use proptest::prelude::*;
use rand::Rng;

fn instance(strength: f64, noise: f64, entropy: f64, ratio: f64) -> TradeoffInstance {
    TradeoffInstance {
        embedding_strength: strength,
        signal_norm: 10.0,
        noise_std: noise,
        message_entropy: entropy,
        image_norm: 100.0,
        visual_floor: 35.0,
        bit_error_budget: 0.05,
        embeddable_threshold: ratio,
    }
}

proptest! {
    #[test]
    fn capacity_increases_with_signal(s1 in 1e-3f64..10.0, s2 in 1e-3f64..10.0, noise in 1e-2f64..10.0) {
        prop_assume!((s1 - s2).abs() > 1e-6);
        let (lo, hi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
        let a = channel_capacity(&instance(lo, noise, 1.0, 0.1)).unwrap();
        let b = channel_capacity(&instance(hi, noise, 1.0, 0.1)).unwrap();
        prop_assert!(a < b);
    }

    #[test]
    fn capacity_decreases_with_noise(n1 in 1e-2f64..10.0, n2 in 1e-2f64..10.0, s in 1e-2f64..10.0) {
        prop_assume!((n1 - n2).abs() > 1e-6);
        let (lo, hi) = if n1 < n2 { (n1, n2) } else { (n2, n1) };
        let a = channel_capacity(&instance(s, lo, 1.0, 0.1)).unwrap();
        let b = channel_capacity(&instance(s, hi, 1.0, 0.1)).unwrap();
        prop_assert!(a > b);
    }

    #[test]
    fn verdict_is_required_signal_against_budget(
        h in 0.0f64..40.0, noise in 1e-3f64..5.0, ratio in 1e-4f64..1.0,
    ) {
        let inst = instance(1.0, noise, h, ratio);
        let v = feasibility_check(&inst).unwrap();
        let required = min_signal_for_entropy(h, noise).unwrap();
        let feasible = required <= inst.embeddable_threshold * inst.image_norm;
        prop_assert_eq!(v.verdict == Verdict::Feasible, feasible);
    }

    #[test]
    fn capacity_inverts_min_signal(h in 0.0f64..20.0, noise in 1e-2f64..5.0) {
        let signal = min_signal_for_entropy(h, noise).unwrap();
        prop_assume!(signal > 0.0);
        let mut inst = instance(1.0, noise, h, 0.1);
        inst.signal_norm = signal;
        prop_assert!((channel_capacity(&inst).unwrap() - h).abs() < 1e-9 * h.max(1.0));
    }
}

/// Bisection on the verdict as a function of H, independent of the closed form.
fn bisect_flip(inst: &TradeoffInstance) -> f64 {
    let feasible = |h: f64| {
        let mut i = *inst;
        i.message_entropy = h;
        feasibility_check(&i).unwrap().verdict == Verdict::Feasible
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while feasible(hi) {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[test]
fn verdict_flip_matches_closed_form_on_a_grid() {
    let mut rng = RandomSeedContext::new(42, 0).rng();
    for _ in 0..1000 {
        let inst = instance(
            1.0,
            10f64.powf(rng.random_range(-3.0..1.0)),
            0.0,
            10f64.powf(rng.random_range(-4.0..0.0)),
        );
        let closed = entropy_crossing(&inst).unwrap();
        let flip = bisect_flip(&inst);
        assert!((closed - flip).abs() <= 1e-9 * closed.max(1.0), "{closed} vs {flip}");
    }
}

#[test]
fn feasibility_worked_examples() {
    assert_eq!(
        feasibility_check(&instance(1.0, 1.0, 0.0, 1e-6)).unwrap().verdict,
        Verdict::Feasible
    );
    // budget C·‖I‖ = 0.03·100 = 3 = √(2^(2·1) − 1)·√3
    let mut inst = instance(1.0, 3f64.sqrt(), 1.0, 0.03);
    inst.image_norm = 100.0;
    let v = feasibility_check(&inst).unwrap();
    assert!((v.required_signal - 3.0).abs() < 1e-12);
    assert!((v.slack).abs() < 1e-12);
    assert!((min_signal_for_entropy(1.0, 1.0).unwrap() - 3f64.sqrt()).abs() < 1e-12);
    assert!((min_signal_for_entropy(2.0, 0.5).unwrap() - 0.5 * 15f64.sqrt()).abs() < 1e-12);
}

fn images(n: usize, size: usize, seed: u64) -> Vec<ImageBuffer> {
    synth::corpus(n, size, seed).into_iter().map(|i| i.quantize_8bit()).collect()
}

#[test]
fn embeddable_estimate_falls_with_the_visual_floor() {
    let img = &images(1, 128, 3)[0];
    for codec in [
        Box::new(DwtDctSvd::new(32, DEFAULT_QIM_STEP)) as Box<dyn WatermarkCodec>,
        Box::new(DwtDct::new(32, DEFAULT_QIM_STEP)),
    ] {
        let mut prev = f64::INFINITY;
        for floor in [20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0] {
            let est = embeddable_threshold_estimate(img, floor, codec.as_ref()).unwrap();
            assert!(est.ratio <= prev + 1e-15, "{} at {floor} dB", codec.name());
            if est.reachable {
                assert!(est.psnr >= floor);
            }
            prev = est.ratio;
        }
        // 50 dB allows an RMS change of 0.8/255
        let near_limit = embeddable_threshold_estimate(img, 50.0, codec.as_ref()).unwrap();
        assert!(near_limit.ratio < 0.01, "{}", near_limit.ratio);
    }
}

#[test]
fn psnr_floor_fixes_the_signal_budget_regardless_of_texture() {
    let flat = ImageBuffer::filled(128, 128, 3, 0.5);
    let textured = &images(1, 128, 8)[0];
    let norm = |i: &ImageBuffer| i.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    for codec in [
        Box::new(DwtDctSvd::new(32, DEFAULT_QIM_STEP)) as Box<dyn WatermarkCodec>,
        Box::new(DwtDct::new(32, DEFAULT_QIM_STEP)),
    ] {
        for floor in [40.0, 45.0, 50.0] {
            let f = embeddable_threshold_estimate(&flat, floor, codec.as_ref()).unwrap();
            let t = embeddable_threshold_estimate(textured, floor, codec.as_ref()).unwrap();
            // one grid step moves PSNR by about 1 dB
            assert!(f.psnr - floor < 1.5 && t.psnr - floor < 1.5, "{f:?} {t:?}");
            let (bf, bt) = (f.ratio * norm(&flat), t.ratio * norm(textured));
            assert!((bt / bf - 1.0).abs() < 0.2, "{}: budgets {bf} {bt}", codec.name());
        }
    }
}

#[test]
fn qim_step_trades_psnr_for_robustness() {
    let imgs = images(6, 128, 21);
    let steps: Vec<f64> = [8.0, 16.0, 24.0, 36.0, 48.0, 64.0].iter().map(|q| q / 255.0).collect();
    for codec in [
        Box::new(DwtDctSvd::new(32, DEFAULT_QIM_STEP)) as Box<dyn WatermarkCodec>,
        Box::new(DwtDct::new(32, DEFAULT_QIM_STEP)),
    ] {
        let frontier =
            strength_frontier(&imgs, codec.as_ref(), &steps, 0.02, RandomSeedContext::new(5, stream::NOISE)).unwrap();
        for w in frontier.windows(2) {
            assert!(w[1].psnr < w[0].psnr, "{}: PSNR not decreasing {w:?}", codec.name());
        }
        let first = frontier.first().unwrap();
        let last = frontier.last().unwrap();
        assert!(last.robust_accuracy > first.robust_accuracy, "{}: {frontier:?}", codec.name());
    }
}
