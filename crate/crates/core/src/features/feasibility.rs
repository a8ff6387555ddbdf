//! Per-channel leakage diagnostics over a watermarked image set.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::locator::channel_descriptors;
use super::{locate_with, Extractor, FeatureStack, LayerTag, LocatorConfig};
use crate::codecs::WatermarkCodec;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::payload::WatermarkPayload;
use crate::rng::{stream, RandomSeedContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDiagnostic {
    pub channel: usize,
    /// Mean pairwise cosine similarity of this channel's watermarked maps
    /// across images.
    pub cross_image_similarity: f64,
    /// Mean relative L1 change between watermarked and clean maps.
    pub divergence: f64,
    /// Fraction of images for which the locator selected this channel.
    pub selection_frequency: f64,
    /// Rank by divergence, 0 = most divergent.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub codec: String,
    pub layer_tag: String,
    pub images: usize,
    pub channels: Vec<ChannelDiagnostic>,
    /// Channels selected for at least half of the images.
    pub selected: Vec<usize>,
    pub median_similarity: f64,
    /// Mean divergence of selected minus unselected channels.
    pub divergence_gap: f64,
    /// Two-sided permutation p-value of `divergence_gap`.
    pub gap_p_value: f64,
}

impl FeasibilityReport {
    /// Mean cross-image similarity of the `top` most divergent channels.
    pub fn top_ranked_similarity(&self, top: usize) -> f64 {
        let mut by_rank: Vec<&ChannelDiagnostic> = self.channels.iter().collect();
        by_rank.sort_by_key(|d| d.rank);
        let top = top.clamp(1, by_rank.len());
        by_rank[..top].iter().map(|d| d.cross_image_similarity).sum::<f64>() / top as f64
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn group_gap(values: &[f64], selected: &[bool]) -> f64 {
    let (mut s, mut ns, mut u, mut nu) = (0.0, 0usize, 0.0, 0usize);
    for (v, &sel) in values.iter().zip(selected) {
        if sel {
            s += v;
            ns += 1;
        } else {
            u += v;
            nu += 1;
        }
    }
    if ns == 0 || nu == 0 {
        return 0.0;
    }
    s / ns as f64 - u / nu as f64
}

/// Watermarks each clean image with a seeded random payload and measures,
/// per extractor channel, how similar the watermarked maps are across images
/// and how far they move from the clean maps. When `gallery_dir` is given, a
/// channel gallery PNG and a JSON summary are written there.
pub fn feasibility_report(
    clean: &[ImageBuffer],
    codec: &dyn WatermarkCodec,
    extractor: &Extractor,
    tag: LayerTag,
    locator: &LocatorConfig,
    ctx: RandomSeedContext,
    gallery_dir: Option<&Path>,
) -> Result<FeasibilityReport> {
    if clean.len() < 2 {
        return Err(Error::Parameter(format!(
            "feasibility needs at least 2 images, got {}",
            clean.len()
        )));
    }
    let n = codec.descriptor().payload_length;
    let mut wm_stacks: Vec<FeatureStack> = Vec::with_capacity(clean.len());
    let mut clean_stacks = Vec::with_capacity(clean.len());
    let mut watermarked = Vec::with_capacity(clean.len());
    for (i, img) in clean.iter().enumerate() {
        let payload = WatermarkPayload::random(n, ctx.for_item(i as u64).with_stream(stream::PAYLOAD));
        let wm = codec.embed(img, &payload)?;
        wm_stacks.push(extractor.extract(&wm, tag)?);
        clean_stacks.push(extractor.extract(img, tag)?);
        watermarked.push(wm);
    }
    let channels = wm_stacks[0].channels();
    let descriptors: Vec<Vec<Vec<f64>>> = wm_stacks.iter().map(channel_descriptors).collect();
    let mut selection = vec![0usize; channels];
    for (i, s) in wm_stacks.iter().enumerate() {
        let cfg = LocatorConfig {
            seed: ctx.for_item(i as u64).seed,
            ..*locator
        };
        for c in locate_with(s, &cfg)?.selected() {
            selection[c] += 1;
        }
    }

    let m = clean.len();
    let mut diags = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut sim = 0.0;
        let mut pairs = 0;
        for i in 0..m {
            for j in i + 1..m {
                sim += descriptors[i][c].iter().zip(&descriptors[j][c]).map(|(a, b)| a * b).sum::<f64>();
                pairs += 1;
            }
        }
        let mut div = 0.0;
        for (w, k) in wm_stacks.iter().zip(&clean_stacks) {
            let (a, b) = (w.maps.plane(c), k.maps.plane(c));
            let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
            let den: f64 = b.iter().map(|y| y.abs()).sum::<f64>() + 1e-9;
            div += num / den;
        }
        diags.push(ChannelDiagnostic {
            channel: c,
            cross_image_similarity: sim / pairs as f64,
            divergence: div / m as f64,
            selection_frequency: selection[c] as f64 / m as f64,
            rank: 0,
        });
    }
    let mut order: Vec<usize> = (0..channels).collect();
    order.sort_by(|&a, &b| diags[b].divergence.total_cmp(&diags[a].divergence).then(a.cmp(&b)));
    for (r, &c) in order.iter().enumerate() {
        diags[c].rank = r;
    }

    let selected_mask: Vec<bool> = diags.iter().map(|d| d.selection_frequency >= 0.5).collect();
    let divergences: Vec<f64> = diags.iter().map(|d| d.divergence).collect();
    let gap = group_gap(&divergences, &selected_mask);
    let mut rng = ctx.with_stream(stream::CLUSTERING).rng();
    let permutations = 999;
    let mut extreme = 0;
    let mut labels = selected_mask.clone();
    for _ in 0..permutations {
        labels.shuffle(&mut rng);
        if group_gap(&divergences, &labels).abs() >= gap.abs() - 1e-15 {
            extreme += 1;
        }
    }
    let report = FeasibilityReport {
        codec: codec.name().to_string(),
        layer_tag: tag.to_string(),
        images: m,
        median_similarity: median(diags.iter().map(|d| d.cross_image_similarity).collect()),
        selected: (0..channels).filter(|&c| selected_mask[c]).collect(),
        channels: diags,
        divergence_gap: gap,
        gap_p_value: (1 + extreme) as f64 / (1 + permutations) as f64,
    };
    if let Some(dir) = gallery_dir {
        fs::create_dir_all(dir)?;
        render_gallery(&watermarked, &wm_stacks, &order, &dir.join("channel_gallery.png"))?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::State(e.to_string()))?;
        fs::write(dir.join("feasibility_summary.json"), json)?;
    }
    Ok(report)
}

/// Grid: one row per image (up to 6), first column the watermarked image,
/// then the 8 most and 4 least divergent channels, each map min-max scaled.
fn render_gallery(images: &[ImageBuffer], stacks: &[FeatureStack], order: &[usize], path: &Path) -> Result<()> {
    const CELL: usize = 64;
    const GAP: usize = 2;
    let rows = images.len().min(6);
    let mut cols: Vec<usize> = order.iter().take(8).copied().collect();
    cols.extend(order.iter().rev().take(4).rev());
    let width = (cols.len() + 1) * (CELL + GAP);
    let height = rows * (CELL + GAP);
    let mut canvas = vec![1.0; height * width * 3];
    let mut put = |row: usize, col: usize, f: &dyn Fn(usize, usize) -> [f64; 3]| {
        for y in 0..CELL {
            for x in 0..CELL {
                let p = f(y, x);
                let o = ((row * (CELL + GAP) + y) * width + col * (CELL + GAP) + x) * 3;
                canvas[o..o + 3].copy_from_slice(&p);
            }
        }
    };
    for r in 0..rows {
        let thumb = images[r].resize(CELL, CELL);
        put(r, 0, &|y, x| [thumb.get(y, x, 0), thumb.get(y, x, 1), thumb.get(y, x, 2)]);
        let maps = &stacks[r].maps;
        for (k, &c) in cols.iter().enumerate() {
            let plane = maps.plane(c);
            let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            put(r, k + 1, &|y, x| {
                let v = (plane[(y * maps.h / CELL) * maps.w + x * maps.w / CELL] - lo) / span;
                [v, v, v]
            });
        }
    }
    ImageBuffer::from_vec(height, width, 3, canvas)?.save_png(path)
}
