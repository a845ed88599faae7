//! Synthetic multi-caption scenes, their on-disk layout, tokenization and
//! batch sampling.

pub mod ppm;
pub mod sampler;
pub mod scene;
pub mod vocab;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LlipError, Result};
use crate::numerics::Tensor;
use crate::rng;

pub use sampler::Sampler;
pub use scene::{Aspects, Background, Claims, Color, Position, Shape, Size};
pub use vocab::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "img";
/// Seed label of the held-out split.
pub const LABEL_HELDOUT: &str = "heldout";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub captions: Vec<String>,
    pub aspects: Aspects,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("manifest record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| LlipError::Format(format!("manifest line {}: {}", i + 1, e)))?;
            if r.captions.is_empty() {
                return Err(LlipError::Format(format!("manifest line {} has no captions", i + 1)));
            }
            records.push(r);
        }
        Ok(Manifest { records })
    }
}

/// Scenes held in memory: planar `[3, S, S]` images concatenated, with their
/// captions and ground-truth aspects.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pixels: Vec<f32>,
    pub captions: Vec<Vec<String>>,
    pub aspects: Vec<Aspects>,
}

impl Dataset {
    pub fn new(image_size: usize, images: Vec<Tensor<f32>>, captions: Vec<Vec<String>>, aspects: Vec<Aspects>) -> Result<Self> {
        if images.len() != captions.len() || images.len() != aspects.len() {
            return Err(LlipError::Input("images, captions and aspects differ in length".into()));
        }
        let mut pixels = Vec::with_capacity(images.len() * 3 * image_size * image_size);
        for (i, img) in images.iter().enumerate() {
            if img.shape() != [3, image_size, image_size] {
                return Err(LlipError::Dimension(format!(
                    "image {} has shape {:?}, expected [3, {s}, {s}]",
                    i,
                    img.shape(),
                    s = image_size
                )));
            }
            pixels.extend_from_slice(img.data());
        }
        if captions.iter().any(Vec::is_empty) {
            return Err(LlipError::Input("every scene needs at least one caption".into()));
        }
        Ok(Dataset {
            image_size,
            pixels,
            captions,
            aspects,
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    fn image_numel(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        let n = self.image_numel();
        Tensor::new(&[3, self.image_size, self.image_size], self.pixels[i * n..(i + 1) * n].to_vec())
            .expect("image shape")
    }

    /// Stacks the selected images into `[B, 3, S, S]`.
    pub fn images(&self, indices: &[usize]) -> Tensor<f32> {
        let n = self.image_numel();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        Tensor::new(&[indices.len(), 3, self.image_size, self.image_size], data).expect("batch shape")
    }

    pub fn caption_counts(&self) -> Vec<usize> {
        self.captions.iter().map(Vec::len).collect()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_corpus(self.captions.iter().flatten().map(String::as_str))
    }

    /// The first `n` scenes.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            image_size: self.image_size,
            pixels: self.pixels[..n * self.image_numel()].to_vec(),
            captions: self.captions[..n].to_vec(),
            aspects: self.aspects[..n].to_vec(),
        }
    }
}

/// Function words of the caption grammar and prompt templates.
const GRAMMAR_WORDS: [&str; 10] = ["a", "an", "background", "image", "in", "of", "on", "photo", "shape", "the"];

/// The vocabulary of every caption the generator can emit (and of the prompt
/// templates), independent of which scenes were drawn.
pub fn grammar_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = GRAMMAR_WORDS.to_vec();
    words.extend(Shape::ALL.iter().map(|v| v.word()));
    words.extend(Color::ALL.iter().map(|v| v.word()));
    words.extend(Position::ALL.iter().map(|v| v.word()));
    words.extend(Size::ALL.iter().map(|v| v.word()));
    words.extend(Background::ALL.iter().map(|v| v.word()));
    Vocabulary::from_corpus(words)
}

/// Draws `n` scenes from `seed` without touching the filesystem.
pub fn generate_scenes(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(LlipError::Input("scene count must be at least 1".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let aspects = scene::balanced_aspects(n, &mut master);
    let mut images = Vec::with_capacity(n);
    let mut captions = Vec::with_capacity(n);
    for (i, a) in aspects.iter().enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(rng::derive_indexed(seed, &[i as u64]));
        images.push(scene::render(a, &mut r));
        captions.push(scene::captions(a, &mut r));
    }
    Dataset::new(scene::IMAGE_SIZE, images, captions, aspects)
}

/// Training split for an experiment seed.
pub fn training_scenes(n: usize, seed: u64) -> Result<Dataset> {
    generate_scenes(n, rng::derive_seed(seed, rng::LABEL_DATA))
}

/// Held-out split for an experiment seed; disjoint stream from the training split.
pub fn heldout_scenes(n: usize, seed: u64) -> Result<Dataset> {
    generate_scenes(n, rng::derive_seed(seed, LABEL_HELDOUT))
}

fn image_name(i: usize) -> String {
    format!("{}/{:06}.ppm", IMAGE_DIR, i)
}

/// Writes a dataset as `img/NNNNNN.ppm` files plus `manifest.jsonl`.
pub fn write_dataset(ds: &Dataset, out_dir: &Path) -> Result<Manifest> {
    let img_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| LlipError::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let rel = image_name(i);
        let path = out_dir.join(&rel);
        fs::write(&path, ppm::write_ppm(&ds.image(i))?).map_err(|e| LlipError::io(&path, e))?;
        records.push(ManifestRecord {
            image: rel,
            captions: ds.captions[i].clone(),
            aspects: ds.aspects[i],
        });
    }
    let manifest = Manifest { records };
    let path = out_dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| LlipError::io(&path, e))?;
    f.write_all(manifest.to_jsonl().as_bytes())
        .map_err(|e| LlipError::io(&path, e))?;
    Ok(manifest)
}

/// Renders `n` training scenes for `seed` into `out_dir`.
pub fn generate_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    write_dataset(&training_scenes(n, seed)?, out_dir)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let f = fs::File::open(&path).map_err(|e| LlipError::io(&path, e))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| LlipError::io(&path, e))?);
        text.push('\n');
    }
    Manifest::from_jsonl(&text)
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    if manifest.records.is_empty() {
        return Err(LlipError::Input(format!("{} lists no scenes", dir.join(MANIFEST_FILE).display())));
    }
    let mut images = Vec::with_capacity(manifest.records.len());
    let mut size = None;
    for r in &manifest.records {
        let path = dir.join(&r.image);
        let bytes = fs::read(&path).map_err(|e| LlipError::io(&path, e))?;
        let img = ppm::read_ppm(&bytes)?;
        let s = img.shape()[1];
        if img.shape()[2] != s || *size.get_or_insert(s) != s {
            return Err(LlipError::Dimension(format!(
                "{} is {:?}; images must be square and equally sized",
                path.display(),
                img.shape()
            )));
        }
        images.push(img);
    }
    let captions = manifest.records.iter().map(|r| r.captions.clone()).collect();
    let aspects = manifest.records.iter().map(|r| r.aspects).collect();
    Dataset::new(size.unwrap_or(scene::IMAGE_SIZE), images, captions, aspects)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_truthful() {
        let a = generate_scenes(10, 5).unwrap();
        let b = generate_scenes(10, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scenes(10, 6).unwrap());
        for (caps, asp) in a.captions.iter().zip(&a.aspects) {
            assert!(caps.len() >= 3);
            assert!(caps.iter().all(|c| scene::verify_caption(c, asp)));
        }
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = training_scenes(4, 1).unwrap();
        let m = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(m.records[2].image, "img/000002.ppm");
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn zero_scenes_rejected() {
        assert!(matches!(generate_scenes(0, 1), Err(LlipError::Input(_))));
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        assert!(matches!(
            generate_dataset(1, 1, &blocker.join("sub")),
            Err(LlipError::Io { .. })
        ));
    }

    #[test]
    fn grammar_vocabulary_covers_corpus() {
        let v = grammar_vocabulary();
        let corpus = training_scenes(200, 9).unwrap().vocabulary();
        assert_eq!(corpus, v);
        assert!(v.len() <= 64);
    }

    #[test]
    fn splits_differ() {
        let t = training_scenes(20, 3).unwrap();
        let h = heldout_scenes(20, 3).unwrap();
        assert_ne!(t.image(0), h.image(0));
    }
}
