use leakmark::codecs::{CodecDescriptor, DwtDctSvd, WatermarkCodec};
use leakmark::features::{
    feasibility_report, locate_leakage_channels, ChannelWeights, Extractor, FeatureStack, LayerTag, LocatorConfig,
};
use leakmark::nn::Tensor;
use leakmark::rng::stream;
use leakmark::{synth, Error, ImageBuffer, RandomSeedContext, Result, WatermarkPayload};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Channels drawn around three prototypes, in shuffled order. Returns the
/// stack and each channel's blob index.
fn blob_stack(sizes: &[usize], seed: u64) -> (FeatureStack, Vec<usize>) {
    let side = 16;
    let mut rng = RandomSeedContext::new(seed, stream::DATASET).rng();
    let prototypes: Vec<Vec<f64>> = sizes
        .iter()
        .map(|_| (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &n)| vec![b; n]).collect();
    labels.shuffle(&mut rng);
    let mut maps = Tensor::zeros(labels.len(), side, side);
    for (c, &b) in labels.iter().enumerate() {
        for (v, p) in maps.plane_mut(c).iter_mut().zip(&prototypes[b]) {
            *v = p + rng.random_range(-0.05..0.05);
        }
    }
    let stack = FeatureStack {
        maps,
        layer_tag: LayerTag::Stem,
        source_shape: (64, 64),
    };
    (stack, labels)
}

#[test]
fn locator_selects_the_two_small_blobs() {
    for seed in 0..5 {
        let (stack, labels) = blob_stack(&[50, 8, 6], seed);
        let w = locate_leakage_channels(&stack, 3, seed).unwrap();
        let expected: Vec<usize> = (0..labels.len()).filter(|&c| labels[c] != 0).collect();
        assert_eq!(w.selected(), expected);
        assert_eq!(w.selected_count, 14);
        let mut sizes: Vec<usize> = w.cluster_report.iter().map(|c| c.size).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![6, 8, 50]);
        // every cluster is exactly one blob
        for cluster in &w.cluster_report {
            let blob = labels[cluster.members[0]];
            assert!(cluster.members.iter().all(|&c| labels[c] == blob));
        }
    }
}

#[test]
fn too_many_clusters_is_a_parameter_error() {
    let (stack, _) = blob_stack(&[10, 4, 3], 1);
    assert!(matches!(locate_leakage_channels(&stack, 18, 0), Err(Error::Parameter(_))));
}

#[test]
fn identical_channels_exhaust_reinitialisation() {
    let mut maps = Tensor::zeros(20, 8, 8);
    for c in 0..20 {
        maps.plane_mut(c).iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
    }
    let stack = FeatureStack {
        maps,
        layer_tag: LayerTag::Stem,
        source_shape: (64, 64),
    };
    assert!(locate_leakage_channels(&stack, 3, 0).is_err());
}

fn images(n: usize, size: usize, seed: u64) -> Vec<ImageBuffer> {
    synth::corpus(n, size, seed).into_iter().map(|i| i.quantize_8bit()).collect()
}

#[test]
fn extraction_is_deterministic_and_zero_delta_is_identity() {
    let ex = Extractor::builtin();
    let img = &images(1, 64, 2)[0];
    for tag in [LayerTag::Stem, LayerTag::DenseLayer(2)] {
        let a = ex.extract(img, tag).unwrap();
        let b = ex.extract(img, tag).unwrap();
        assert_eq!(a, b);
        let shifted: Vec<f64> = img.as_slice().iter().map(|v| v + 0.0).collect();
        let c = ex.forward_pixels(&shifted, 64, 64, tag).unwrap().0;
        assert_eq!(a, c);
        assert!(a.channels() >= 16);
        assert!(a.maps.data.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn locator_on_real_features_is_reproducible() {
    let ex = Extractor::builtin();
    let img = &images(1, 64, 3)[0];
    let stack = ex.extract(img, LayerTag::Stem).unwrap();
    let a = locate_leakage_channels(&stack, 5, 9).unwrap();
    let b = locate_leakage_channels(&stack, 5, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.cluster_report.iter().map(|c| c.size).sum::<usize>(), stack.channels());
    assert!(a.selected_count > 0 && a.selected_count < stack.channels());
}

/// Codec that embeds nothing.
struct Identity(CodecDescriptor);

impl WatermarkCodec for Identity {
    fn descriptor(&self) -> &CodecDescriptor {
        &self.0
    }

    fn embed_with_strength(&self, image: &ImageBuffer, _: &WatermarkPayload, _: f64) -> Result<ImageBuffer> {
        Ok(image.clone())
    }

    fn extract(&self, _: &ImageBuffer) -> Result<WatermarkPayload> {
        Ok(WatermarkPayload::new(vec![false; self.0.payload_length]))
    }
}

#[test]
fn unwatermarked_corpus_shows_no_divergence_gap() {
    let codec = Identity(CodecDescriptor::new("identity", 32, 1.0, 0.625));
    let report = feasibility_report(
        &images(10, 64, 4),
        &codec,
        &Extractor::builtin(),
        LayerTag::Stem,
        &LocatorConfig::default(),
        RandomSeedContext::new(1, 0),
        None,
    )
    .unwrap();
    assert!(report.gap_p_value > 0.05, "{}", report.gap_p_value);
    assert!(report.channels.iter().all(|d| d.divergence == 0.0));
}

#[test]
fn svd_watermark_leaks_into_top_ranked_channels() {
    let dir = tempfile::tempdir().unwrap();
    let report = feasibility_report(
        &images(10, 128, 5),
        &DwtDctSvd::default(),
        &Extractor::builtin(),
        LayerTag::Stem,
        &LocatorConfig::default(),
        RandomSeedContext::new(2, 0),
        Some(dir.path()),
    )
    .unwrap();
    let top = report.top_ranked_similarity(5);
    assert!(top > report.median_similarity, "{top} vs {}", report.median_similarity);
    let written: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert!(written.len() >= 2);
}

#[test]
fn feasibility_needs_two_images() {
    let err = feasibility_report(
        &images(1, 64, 6),
        &DwtDctSvd::default(),
        &Extractor::builtin(),
        LayerTag::Stem,
        &LocatorConfig::default(),
        RandomSeedContext::new(3, 0),
        None,
    );
    assert!(matches!(err, Err(Error::Parameter(_))));
}

#[test]
fn corrupt_weights_report_a_checksum_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    Extractor::builtin().weights().save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 2;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    match Extractor::load(&path) {
        Err(Error::Weights { detail, .. }) => assert!(detail.contains("checksum"), "{detail}"),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn weights_and_complement_partition_the_channels(mask in prop::collection::vec(any::<bool>(), 2..64)) {
        prop_assume!(mask.iter().any(|&b| b) && mask.iter().any(|&b| !b));
        let w = ChannelWeights::from_mask(mask).unwrap();
        let c = w.complement().unwrap();
        for (a, b) in w.weights().iter().zip(c.weights()) {
            prop_assert_eq!(a + b, 1.0);
        }
        prop_assert_eq!(w.selected_count + c.selected_count, w.channels());
    }

    #[test]
    fn masking_zeroes_exactly_the_unselected(mask in prop::collection::vec(any::<bool>(), 4..24), seed in any::<u64>()) {
        prop_assume!(mask.iter().any(|&b| b));
        let mut rng = RandomSeedContext::new(seed, 0).rng();
        let mut maps = Tensor::zeros(mask.len(), 5, 5);
        maps.data.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        let stack = FeatureStack { maps, layer_tag: LayerTag::Stem, source_shape: (64, 64) };
        let w = ChannelWeights::from_mask(mask.clone()).unwrap();
        let m = stack.masked(&w).unwrap();
        for (c, &keep) in mask.iter().enumerate() {
            if keep {
                prop_assert_eq!(m.maps.plane(c), stack.maps.plane(c));
            } else {
                prop_assert!(m.maps.plane(c).iter().all(|&v| v == 0.0));
            }
        }
    }
}
