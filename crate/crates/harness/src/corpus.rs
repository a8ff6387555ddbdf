//! Corpus ingestion: seeded sampling from an image directory or the
//! synthetic generator, normalised to a square working size.

use std::fs;
use std::path::{Path, PathBuf};

use leakmark::rng::{stream, RandomSeedContext};
use leakmark::{synth, ImageBuffer};
use rand::seq::index::sample;

use crate::config::CorpusSource;
use crate::error::{HarnessError, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusImage {
    /// File stem, or `synth-<seed>-<index>` for generated images.
    pub id: String,
    /// Canonical source path; `None` for generated images.
    pub path: Option<PathBuf>,
    pub image: ImageBuffer,
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Center-crops to a square, resizes to `size` and quantises to 8 bits.
pub fn normalise(image: &ImageBuffer, size: usize) -> ImageBuffer {
    image.center_crop_square().resize(size, size).quantize_8bit()
}

/// Lists image files in `dir` sorted by name, draws `count` of them
/// uniformly without replacement from the `DATASET` stream of `seed`, and
/// returns them (in name order) cropped and resized to `size`. Undecodable
/// files are skipped.
pub fn ingest_corpus(dir: &Path, count: usize, seed: u64, size: usize) -> Result<Vec<CorpusImage>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let files = image_files(dir)?;
    if files.len() < count {
        return Err(HarnessError::InsufficientImages {
            path: dir.to_path_buf(),
            available: files.len(),
            requested: count,
        });
    }
    let mut rng = RandomSeedContext::new(seed, stream::DATASET).rng();
    let mut order: Vec<usize> = sample(&mut rng, files.len(), files.len()).into_vec();
    let mut picked: Vec<usize> = Vec::with_capacity(count);
    for i in order.drain(..) {
        if picked.len() == count {
            break;
        }
        if ImageBuffer::load(&files[i]).is_ok() {
            picked.push(i);
        }
    }
    if picked.len() < count {
        return Err(HarnessError::InsufficientImages {
            path: dir.to_path_buf(),
            available: picked.len(),
            requested: count,
        });
    }
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let path = &files[i];
            let image = normalise(&ImageBuffer::load(path)?, size);
            Ok(CorpusImage {
                id: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                path: Some(path.canonicalize()?),
                image,
            })
        })
        .collect()
}

/// `count` generated images for `seed`, quantised to 8 bits.
pub fn synthetic_corpus(count: usize, seed: u64, size: usize) -> Vec<CorpusImage> {
    synth::corpus(count, size, seed)
        .into_iter()
        .enumerate()
        .map(|(i, image)| CorpusImage {
            id: format!("synth-{seed}-{i:04}"),
            path: None,
            image: image.quantize_8bit(),
        })
        .collect()
}

pub fn load_source(source: &CorpusSource, count: usize, seed: u64, size: usize) -> Result<Vec<CorpusImage>> {
    match source {
        CorpusSource::Dir { path } => ingest_corpus(path, count, seed, size),
        CorpusSource::Synthetic { seed } => Ok(synthetic_corpus(count, *seed, size)),
    }
}

/// Fails when any image appears in both sets (same file or same id).
pub fn ensure_disjoint(a: &[CorpusImage], b: &[CorpusImage]) -> Result<()> {
    for x in a {
        for y in b {
            let same_file = x.path.is_some() && x.path == y.path;
            if same_file || x.id == y.id {
                return Err(HarnessError::Config(format!(
                    "image {:?} is in both the source and target sets",
                    x.id
                )));
            }
        }
    }
    Ok(())
}
