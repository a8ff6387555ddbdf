use leakmark::metrics::{
    binomial_upper_tail, bit_accuracy, min_detection_bits, psnr, records_success_rate, ssim, success_rate, AttackMode,
    DetectionRule, MetricRecord,
};
use leakmark::{ImageBuffer, RandomSeedContext, WatermarkPayload};
use proptest::prelude::*;
use rand::Rng;

fn random_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = RandomSeedContext::new(seed, 100).rng();
    ImageBuffer::from_fn(h, w, 3, |_, _, _| rng.random::<f64>())
}

/// Direct (non-separable) windowed SSIM over fully contained 11×11 windows.
fn reference_ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let (c1, c2) = (0.0001, 0.0009);
    let mut k = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let g = k[i][j] / total;
                    ma += g * a[(y + i) * w + x + j];
                    mb += g * b[(y + i) * w + x + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let g = k[i][j] / total;
                    let (da, db) = (a[(y + i) * w + x + j] - ma, b[(y + i) * w + x + j] - mb);
                    va += g * da * da;
                    vb += g * db * db;
                    cov += g * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn reference_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (h, w, c) = a.shape();
    (0..c)
        .map(|ch| {
            let pa: Vec<f64> = (0..h * w).map(|i| a.get(i / w, i % w, ch)).collect();
            let pb: Vec<f64> = (0..h * w).map(|i| b.get(i / w, i % w, ch)).collect();
            reference_ssim_plane(&pa, &pb, h, w)
        })
        .sum::<f64>()
        / c as f64
}

#[test]
fn ssim_matches_direct_window_computation() {
    for seed in 0..4 {
        let a = random_image(24, 30, seed);
        let b = ImageBuffer::from_fn(24, 30, 3, |y, x, c| {
            (a.get(y, x, c) * 0.8 + 0.1 * ((x + y + c) % 3) as f64).clamp(0.0, 1.0)
        });
        let got = ssim(&a, &b).unwrap();
        let want = reference_ssim(&a, &b);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn psnr_matches_mse_formula() {
    let a = random_image(20, 20, 7);
    let b = random_image(20, 20, 8);
    let mut se = 0.0;
    for y in 0..20 {
        for x in 0..20 {
            for c in 0..3 {
                se += (a.get(y, x, c) - b.get(y, x, c)).powi(2);
            }
        }
    }
    let want = -10.0 * (se / 1200.0).log10();
    assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-6);
    let offset = ImageBuffer::filled(8, 8, 3, 0.5);
    let shifted = ImageBuffer::filled(8, 8, 3, 0.5 + 1.0 / 255.0);
    assert!((psnr(&offset, &shifted).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
}

fn choose(n: u128, k: u128) -> u128 {
    let mut c = 1u128;
    for i in 0..k {
        c = c * (n - i) / (i + 1);
    }
    c
}

/// Exhaustive search over k using exact integer tail counts.
fn brute_force_min_bits(n: usize, alpha: f64) -> Option<usize> {
    let limit = (alpha * 2f64.powi(n as i32)).floor() as u128;
    (0..=n).find(|&k| {
        let count: u128 = (k..=n).map(|i| choose(n as u128, i as u128)).sum();
        count <= limit
    })
}

#[test]
fn min_detection_bits_matches_exhaustive_enumeration() {
    for alpha in [0.05, 0.01, 0.001, 0.2] {
        for n in 1..=64 {
            assert_eq!(
                min_detection_bits(n, alpha).unwrap(),
                brute_force_min_bits(n, alpha),
                "n = {n}, alpha = {alpha}"
            );
        }
    }
}

#[test]
fn detection_fraction_falls_toward_half() {
    let fracs: Vec<(usize, f64)> = (8..=256)
        .map(|n| (n, min_detection_bits(n, 0.05).unwrap().unwrap() as f64 / n as f64))
        .collect();
    // non-increasing up to the 1/n granularity of k
    for (i, &(n, f)) in fracs.iter().enumerate() {
        for &(_, g) in &fracs[..i] {
            assert!(f - 1.0 / n as f64 <= g + 1e-12, "n = {n}");
        }
        assert!(f > 0.5);
    }
    assert!(fracs.last().unwrap().1 < 0.56);
}

#[test]
fn tail_is_an_exact_binomial_sum() {
    for n in [1usize, 5, 32, 64] {
        for k in 0..=n {
            let count: u128 = (k..=n).map(|i| choose(n as u128, i as u128)).sum();
            let want = count as f64 / 2f64.powi(n as i32);
            assert!((binomial_upper_tail(n, k) - want).abs() <= 1e-15 * want.max(1e-300));
        }
    }
}

#[test]
fn success_rate_worked_examples() {
    assert_eq!(success_rate(&[1.0, 1.0], AttackMode::Evasion, 0.6).unwrap(), 0.0);
    assert_eq!(success_rate(&[1.0, 1.0], AttackMode::Forgery, 0.6).unwrap(), 1.0);
    assert_eq!(success_rate(&[0.5, 0.7], AttackMode::Evasion, 0.6).unwrap(), 0.5);
}

fn record(acc: f64) -> MetricRecord {
    let n = 32;
    let matching = (acc * n as f64).round() as usize;
    let a = WatermarkPayload::new(vec![true; n]);
    let b = WatermarkPayload::new((0..n).map(|i| i < matching).collect());
    let img = ImageBuffer::filled(16, 16, 3, 0.5);
    MetricRecord::evaluate(&DetectionRule::default(), &a, &b, &img, &img).unwrap()
}

proptest! {
    #[test]
    fn evasion_and_forgery_rates_are_complementary(
        accs in prop::collection::vec(0.0f64..=1.0, 1..40),
        t in 0.51f64..=1.0,
    ) {
        let e = success_rate(&accs, AttackMode::Evasion, t).unwrap();
        let f = success_rate(&accs, AttackMode::Forgery, t).unwrap();
        prop_assert!((e + f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn success_rate_is_monotone_in_threshold(
        accs in prop::collection::vec(0.0f64..=1.0, 1..40),
        t1 in 0.51f64..=1.0,
        t2 in 0.51f64..=1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(success_rate(&accs, AttackMode::Evasion, lo).unwrap()
            <= success_rate(&accs, AttackMode::Evasion, hi).unwrap());
        prop_assert!(success_rate(&accs, AttackMode::Forgery, lo).unwrap()
            >= success_rate(&accs, AttackMode::Forgery, hi).unwrap());
    }

    #[test]
    fn bit_accuracy_of_complement_is_one_minus(bits in prop::collection::vec(any::<bool>(), 1..64), flips in prop::collection::vec(any::<bool>(), 64)) {
        let a = WatermarkPayload::new(bits.clone());
        let b = WatermarkPayload::new(bits.iter().zip(&flips).map(|(x, f)| x ^ f).collect());
        let acc = bit_accuracy(&a, &b).unwrap();
        let acc_c = bit_accuracy(&a, &b.complement()).unwrap();
        prop_assert!((acc + acc_c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn records_rate_matches_plain_rate(accs in prop::collection::vec(0usize..=32, 1..20), t in 0.51f64..=1.0) {
        let accs: Vec<f64> = accs.into_iter().map(|k| k as f64 / 32.0).collect();
        let records: Vec<MetricRecord> = accs.iter().map(|&a| record(a)).collect();
        for mode in [AttackMode::Evasion, AttackMode::Forgery] {
            prop_assert_eq!(
                records_success_rate(&records, mode, t).unwrap(),
                success_rate(&accs, mode, t).unwrap()
            );
        }
    }
}
