//! k-means over channel descriptors and minority-cluster selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ChannelWeights, FeatureStack};
use crate::error::{Error, Result};
use crate::image::bilinear_sample;
use crate::rng::{stream, RandomSeedContext};

/// Side of the resized map used as a channel descriptor.
pub const DESCRIPTOR_SIDE: usize = 16;
/// Empty-cluster re-initialisations tolerated per call.
const MAX_REINITS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocatorConfig {
    pub k_clusters: usize,
    /// How many of the smallest clusters are selected.
    pub selected_clusters: usize,
    pub restarts: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for LocatorConfig {
    fn default() -> Self {
        Self {
            k_clusters: 5,
            selected_clusters: 2,
            restarts: 10,
            max_iterations: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub index: usize,
    pub size: usize,
    pub centroid_norm: f64,
    pub members: Vec<usize>,
    pub selected: bool,
}

/// Resizes each map to 16×16, flattens and L2-normalises it. All-zero maps
/// stay zero.
pub(crate) fn channel_descriptors(stack: &FeatureStack) -> Vec<Vec<f64>> {
    let t = &stack.maps;
    (0..t.c)
        .map(|c| {
            let plane = t.plane(c);
            let mut d = Vec::with_capacity(DESCRIPTOR_SIDE * DESCRIPTOR_SIDE);
            for y in 0..DESCRIPTOR_SIDE {
                for x in 0..DESCRIPTOR_SIDE {
                    d.push(bilinear_sample(
                        |yy, xx| plane[yy * t.w + xx],
                        t.h,
                        t.w,
                        y,
                        x,
                        DESCRIPTOR_SIDE,
                        DESCRIPTOR_SIDE,
                    ));
                }
            }
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                d.iter_mut().for_each(|v| *v /= norm);
            }
            d
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Nearest centroid, ties to the lower index.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

struct Clustering {
    labels: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
}

/// One Lloyd run; `None` when a cluster empties.
fn lloyd(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut impl Rng) -> Option<Clustering> {
    let dim = points[0].len();
    let mut centroids = kmeans_pp(points, k, rng);
    let mut labels = assign(points, &centroids);
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for j in 0..k {
            centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        }
        let next = assign(points, &centroids);
        if next == labels {
            break;
        }
        labels = next;
    }
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    if counts.contains(&0) {
        return None;
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
    Some(Clustering {
        labels,
        centroids,
        inertia,
    })
}

/// Locator with default settings and the given cluster count and seed.
pub fn locate_leakage_channels(stack: &FeatureStack, k_clusters: usize, seed: u64) -> Result<ChannelWeights> {
    locate_with(
        stack,
        &LocatorConfig {
            k_clusters,
            seed,
            ..LocatorConfig::default()
        },
    )
}

/// Clusters channel descriptors with seeded k-means++ (best of `restarts`
/// by inertia) and selects the union of the `selected_clusters` smallest
/// clusters; ties go to the smaller centroid norm, then the lower index.
pub fn locate_with(stack: &FeatureStack, config: &LocatorConfig) -> Result<ChannelWeights> {
    let channels = stack.channels();
    let k = config.k_clusters;
    if k > channels {
        return Err(Error::Parameter(format!("{k} clusters requested for {channels} channels")));
    }
    if config.selected_clusters == 0 || config.selected_clusters >= k {
        return Err(Error::Parameter(format!(
            "selecting {} of {k} clusters leaves no complement",
            config.selected_clusters
        )));
    }
    if config.restarts == 0 {
        return Err(Error::Parameter("at least one k-means restart is required".into()));
    }
    let points = channel_descriptors(stack);
    let mut rng = RandomSeedContext::new(config.seed, stream::CLUSTERING).rng();
    let mut best: Option<Clustering> = None;
    let mut reinits = 0;
    let mut restart = 0;
    while restart < config.restarts {
        match lloyd(&points, k, config.max_iterations, &mut rng) {
            Some(c) => {
                if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
                    best = Some(c);
                }
                restart += 1;
            }
            None => {
                reinits += 1;
                if reinits > MAX_REINITS {
                    return Err(Error::DegenerateClustering { attempts: reinits });
                }
            }
        }
    }
    let best = best.expect("at least one restart succeeded");

    let mut clusters: Vec<ClusterInfo> = (0..k)
        .map(|j| ClusterInfo {
            index: j,
            size: 0,
            centroid_norm: best.centroids[j].iter().map(|v| v * v).sum::<f64>().sqrt(),
            members: Vec::new(),
            selected: false,
        })
        .collect();
    for (c, &l) in best.labels.iter().enumerate() {
        clusters[l].size += 1;
        clusters[l].members.push(c);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&clusters[a], &clusters[b]);
        ca.size
            .cmp(&cb.size)
            .then(ca.centroid_norm.total_cmp(&cb.centroid_norm))
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; channels];
    for &j in &order[..config.selected_clusters] {
        clusters[j].selected = true;
        for &c in &clusters[j].members {
            mask[c] = true;
        }
    }
    let selected_count = mask.iter().filter(|&&b| b).count();
    Ok(ChannelWeights {
        mask,
        selected_count,
        cluster_report: clusters,
    })
}
