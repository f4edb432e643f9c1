//! Synthetic shapes: labeled geometric images over shape × color × texture.
//! Training and out-of-distribution splits draw colors and textures from
//! disjoint sets, so the label (the shape) is the only attribute shared.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{serialize_docs, write_image_tensor, Image, ImageRecord, InterleavedDocument};
use crate::error::{Error, Result};
use crate::io::write_jsonl;
use crate::par;
use crate::rng::Seed;
use crate::robustvqa::{EmbeddingRecord, LabeledImage};
use crate::sequence::pair_to_document;

pub const SHAPES: [&str; 6] = ["circle", "ring", "bar", "pillar", "triangle", "cross"];
pub const TRAIN_COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const OOD_COLORS: [&str; 3] = ["orange", "purple", "cyan"];
pub const TRAIN_TEXTURES: [&str; 2] = ["solid", "striped"];
pub const OOD_TEXTURES: [&str; 2] = ["dotted", "checkered"];

const CAPTION_WORDS: [&str; 9] = ["a", "an", "object", "thing", "picture", "of", "shown", "here", "is"];
const PROMPT_WORDS: [&str; 19] = [
    "Is", "the", "main", "object", "in", "this", "image", "?", "Please", "answer", "yes", "or", "no", ".",
    "What", "Chose", "from", "list", ":",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Ood,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Ood => "ood",
        }
    }

    pub fn colors(self) -> &'static [&'static str] {
        match self {
            Split::Train => &TRAIN_COLORS,
            Split::Ood => &OOD_COLORS,
        }
    }

    pub fn textures(self) -> &'static [&'static str] {
        match self {
            Split::Train => &TRAIN_TEXTURES,
            Split::Ood => &OOD_TEXTURES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: String,
    pub color: String,
    pub texture: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub spec: ShapeSpec,
    pub image: Image,
    pub split: Split,
}

/// Every word the generator, captions and benchmark prompts use.
pub fn vocabulary() -> Vec<String> {
    SHAPES
        .iter()
        .chain(&TRAIN_COLORS)
        .chain(&OOD_COLORS)
        .chain(&TRAIN_TEXTURES)
        .chain(&OOD_TEXTURES)
        .chain(&CAPTION_WORDS)
        .chain(&PROMPT_WORDS)
        .map(|s| s.to_string())
        .collect()
}

fn rgb(color: &str) -> Result<[f32; 3]> {
    Ok(match color {
        "red" => [0.9, 0.15, 0.15],
        "green" => [0.15, 0.8, 0.2],
        "blue" => [0.2, 0.3, 0.95],
        "yellow" => [0.95, 0.9, 0.15],
        "orange" => [1.0, 0.55, 0.1],
        "purple" => [0.6, 0.2, 0.8],
        "cyan" => [0.1, 0.85, 0.85],
        _ => return Err(Error::InvalidArgument(format!("unknown color {color:?}"))),
    })
}

fn inside(shape: &str, dx: f32, dy: f32, r: f32) -> Result<bool> {
    let d = (dx * dx + dy * dy).sqrt();
    Ok(match shape {
        "circle" => d < r,
        "ring" => d < r && d > 0.6 * r,
        "bar" => dx.abs() < r && dy.abs() < 0.38 * r,
        "pillar" => dy.abs() < r && dx.abs() < 0.38 * r,
        "triangle" => dy > -r && dy < 0.8 * r && dx.abs() < 0.55 * (dy + r),
        "cross" => (dx.abs() < 0.3 * r && dy.abs() < r) || (dy.abs() < 0.3 * r && dx.abs() < r),
        _ => return Err(Error::InvalidArgument(format!("unknown shape {shape:?}"))),
    })
}

/// Whether the texture keeps the full color at pixel (x, y) or darkens it.
fn texture_on(texture: &str, x: usize, y: usize) -> Result<bool> {
    Ok(match texture {
        "solid" => true,
        "striped" => (y / 2) % 2 == 0,
        "dotted" => !(x % 4 == 1 && y % 4 == 1),
        "checkered" => ((x / 3) + (y / 3)) % 2 == 0,
        _ => return Err(Error::InvalidArgument(format!("unknown texture {texture:?}"))),
    })
}

pub fn render<R: Rng + ?Sized>(spec: &ShapeSpec, resolution: usize, rng: &mut R) -> Result<Image> {
    let res = resolution as f32;
    let base = rgb(&spec.color)?;
    // Objects sit near the center: with free placement the layout, not the
    // attributes, would dominate what a noisy image leaves undetermined.
    let r = rng.random_range(0.34..0.42) * res;
    let jitter = res / 16.0;
    let cx = res / 2.0 + rng.random_range(-jitter..=jitter);
    let cy = res / 2.0 + rng.random_range(-jitter..=jitter);
    let bg: f32 = rng.random_range(0.35..0.65);
    let mut img = Image::filled(resolution, resolution, bg);
    for y in 0..resolution {
        for x in 0..resolution {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let px: [f32; 3] = if inside(&spec.shape, dx, dy, r)? {
                let k = if texture_on(&spec.texture, x, y)? { 1.0 } else { 0.45 };
                base.map(|c| c * k)
            } else {
                [bg; 3]
            };
            for (c, v) in px.iter().enumerate() {
                let noise: f32 = rng.random_range(-0.01..0.01);
                img.set(y, x, c, (v + noise).clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

/// Attributes for sample `index`: shapes cycle so every split is balanced;
/// color and texture are drawn from the split's sets.
pub fn spec_for<R: Rng + ?Sized>(split: Split, index: usize, rng: &mut R) -> ShapeSpec {
    let colors = split.colors();
    let textures = split.textures();
    ShapeSpec {
        shape: SHAPES[index % SHAPES.len()].to_string(),
        color: colors[rng.random_range(0..colors.len())].to_string(),
        texture: textures[rng.random_range(0..textures.len())].to_string(),
    }
}

/// Renders `n` samples, each from its own indexed stream (order-independent,
/// so the parallel and sequential builds agree bit for bit).
pub fn generate(split: Split, n: usize, resolution: usize, seed: Seed) -> Result<Vec<SynthSample>> {
    let seed = seed.child(split.name());
    par::map_range(n, |i| {
        let mut rng = seed.indexed("sample", i as u64);
        let spec = spec_for(split, i, &mut rng);
        let image = render(&spec, resolution, &mut rng)?;
        Ok(SynthSample { spec, image, split })
    })
    .into_iter()
    .collect()
}

/// Caption for a training image. The shape is named only with probability
/// `shape_rate`; otherwise the text covers color and texture alone.
pub fn caption<R: Rng + ?Sized>(spec: &ShapeSpec, shape_rate: f64, rng: &mut R) -> String {
    let noun = if rng.random::<f64>() < shape_rate {
        spec.shape.as_str()
    } else if rng.random::<bool>() {
        "object"
    } else {
        "thing"
    };
    match rng.random_range(0..3) {
        0 => format!("a {} {} {noun} .", spec.color, spec.texture),
        1 => format!("a picture of a {} {} {noun} .", spec.texture, spec.color),
        _ => format!("a {} {noun} is shown here , {} .", spec.color, spec.texture),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub resolution: usize,
    pub caption_shape_rate: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            resolution: 32,
            caption_shape_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub image_ref: String,
    pub split: Split,
    #[serde(flatten)]
    pub spec: ShapeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train_docs: usize,
    pub ood_images: usize,
}

/// Captioned pair documents from training samples.
pub fn pair_documents(samples: &[SynthSample], shape_rate: f64, seed: Seed) -> Vec<InterleavedDocument> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = seed.indexed("caption", i as u64);
            let text = caption(&s.spec, shape_rate, &mut rng);
            pair_to_document(format!("train-{i:05}"), &text, ImageRecord::new(s.image.clone()), &mut rng)
        })
        .collect()
}

/// Writes `train.jsonl` (pair documents), `images/` tensors for every
/// sample, `train_labels.jsonl` / `ood_labels.jsonl` (labeled images) and
/// `samples.jsonl` (full attributes) and `embeddings.jsonl` (silhouette
/// embeddings of labels and images).
pub fn write_dataset(out: &Path, n_train: usize, n_ood: usize, seed: Seed, opts: &SynthOptions) -> Result<SynthSummary> {
    if n_train == 0 || n_ood == 0 {
        return Err(Error::InvalidArgument("n_train and n_ood must be at least 1".into()));
    }
    let train = generate(Split::Train, n_train, opts.resolution, seed)?;
    let ood = generate(Split::Ood, n_ood, opts.resolution, seed)?;
    let img_dir = out.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut meta = Vec::new();
    let mut labeled = [Vec::new(), Vec::new()];
    for (k, set) in [&train, &ood].into_iter().enumerate() {
        for (i, s) in set.iter().enumerate() {
            let rel = format!("images/{}_{i:05}.f32t", s.split.name());
            write_image_tensor(&out.join(&rel), &s.image)?;
            labeled[k].push(LabeledImage {
                image_ref: rel.clone(),
                gt_label: s.spec.shape.clone(),
                embedding: None,
                split: Some(s.split.name().into()),
            });
            meta.push(SampleMeta {
                image_ref: rel,
                split: s.split,
                spec: s.spec.clone(),
            });
        }
    }
    let docs = pair_documents(&train, opts.caption_shape_rate, seed.child("docs"));
    let n_docs = serialize_docs(&docs, &out.join("train.jsonl"))?;
    write_jsonl(&out.join("train_labels.jsonl"), &labeled[0])?;
    write_jsonl(&out.join("ood_labels.jsonl"), &labeled[1])?;
    write_jsonl(&out.join("samples.jsonl"), &meta)?;
    // Silhouette embeddings: label prototypes from the training split plus one
    // record per image, ready for hard-negative mining.
    let mut emb: Vec<EmbeddingRecord> = crate::ablation::label_prototypes(&train)
        .into_iter()
        .map(|(label, embedding)| EmbeddingRecord::Label { label, embedding })
        .collect();
    for (m, s) in meta.iter().zip(train.iter().chain(&ood)) {
        emb.push(EmbeddingRecord::Image {
            image_ref: m.image_ref.clone(),
            embedding: crate::ablation::silhouette(&s.image),
        });
    }
    write_jsonl(&out.join("embeddings.jsonl"), &emb)?;
    Ok(SynthSummary {
        train_docs: n_docs,
        ood_images: n_ood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn attribute_sets_disjoint() {
        let a: BTreeSet<_> = TRAIN_COLORS.iter().chain(&TRAIN_TEXTURES).collect();
        let b: BTreeSet<_> = OOD_COLORS.iter().chain(&OOD_TEXTURES).collect();
        assert!(a.is_disjoint(&b));
        let ood = generate(Split::Ood, 30, 16, Seed(1)).unwrap();
        for s in &ood {
            assert!(OOD_COLORS.contains(&s.spec.color.as_str()));
            assert!(OOD_TEXTURES.contains(&s.spec.texture.as_str()));
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = generate(Split::Train, 12, 32, Seed(7)).unwrap();
        let b = generate(Split::Train, 12, 32, Seed(7)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let c = generate(Split::Train, 12, 32, Seed(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_differ_in_pixels() {
        let mut rng = Seed(1).stream("r");
        let mut imgs = Vec::new();
        for shape in SHAPES {
            let spec = ShapeSpec {
                shape: shape.into(),
                color: "red".into(),
                texture: "solid".into(),
            };
            imgs.push(render(&spec, 32, &mut Seed(3).stream("same")).unwrap());
            let _ = rng.random::<u8>();
        }
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                assert!(imgs[i].mean_abs_diff(&imgs[j]) > 0.01, "{} vs {}", SHAPES[i], SHAPES[j]);
            }
        }
    }

    #[test]
    fn captions_omit_shape_by_default() {
        let mut rng = Seed(2).stream("c");
        let spec = ShapeSpec {
            shape: "ring".into(),
            color: "blue".into(),
            texture: "striped".into(),
        };
        for _ in 0..50 {
            let c = caption(&spec, 0.0, &mut rng);
            assert!(!c.contains("ring") && c.contains("blue") && c.contains("striped"));
            assert!(crate::sequence::caption_passes(&c));
        }
        assert!(caption(&spec, 1.0, &mut rng).contains("ring"));
    }

    #[test]
    fn dataset_files_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let opts = SynthOptions::default();
        let s = write_dataset(d1.path(), 10, 4, Seed(7), &opts).unwrap();
        assert_eq!((s.train_docs, s.ood_images), (10, 4));
        write_dataset(d2.path(), 10, 4, Seed(7), &opts).unwrap();
        for f in ["train.jsonl", "train_labels.jsonl", "ood_labels.jsonl", "samples.jsonl", "images/ood_00003.f32t"] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f}");
        }
        let docs = crate::datamodel::deserialize_docs(&d1.path().join("train.jsonl")).unwrap();
        assert_eq!(docs.len(), 10);
    }
}
