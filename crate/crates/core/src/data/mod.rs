//! Samples, masks, the on-disk dataset layout and batching.
//!
//! A dataset directory holds `manifest.tsv`, `images/NNNNN.ppm` and
//! `masks/NNNNN.pgm`. The manifest starts with a `#` header line carrying
//! the format version and generation seed, followed by one record per
//! sample: `image_path<TAB>mask_path<TAB>question<TAB>answer`, paths
//! relative to the manifest.

pub mod pnm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synth::{generate_sample, generate_samples, generate_scene, Scene, ShapeColor, ShapeKind};

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            pixels: vec![false; width * height],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.pixels[y * self.width + x] = on;
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
    }

    /// Pixels above 0.5 are foreground.
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape("mask", &[height, width], &[values.len()]));
        }
        Ok(Mask {
            width,
            height,
            pixels: values.iter().map(|&v| v > 0.5).collect(),
        })
    }

    pub fn to_raster(&self) -> pnm::Raster {
        pnm::Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            bytes: self.pixels.iter().map(|&p| if p { 255 } else { 0 }).collect(),
        }
    }

    /// Accepts only 0 and 255 bytes.
    pub fn from_raster(r: &pnm::Raster) -> Result<Self> {
        if r.channels != 1 {
            return Err(Error::contract("mask", "expected a single-channel PGM"));
        }
        let pixels = r
            .bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                255 => Ok(true),
                v => Err(Error::contract("mask", format!("pixel value {v} is neither 0 nor 255"))),
            })
            .collect::<Result<_>>()?;
        Ok(Mask {
            width: r.width,
            height: r.height,
            pixels,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Mask::from_raster(&pnm::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        pnm::write(path, &self.to_raster())
    }
}

/// 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub bytes: Vec<u8>,
}

impl Rgb8 {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Rgb8 {
            width,
            height,
            bytes: rgb.repeat(width * height),
        }
    }

    pub fn get_index(&self, i: usize) -> [u8; 3] {
        [self.bytes[3 * i], self.bytes[3 * i + 1], self.bytes[3 * i + 2]]
    }

    pub fn set_index(&mut self, i: usize, rgb: [u8; 3]) {
        self.bytes[3 * i..3 * i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3 × H × W]` values in `[0, 1]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                out[c * hw + i] = self.bytes[3 * i + c] as f64 / 255.0;
            }
        }
        out
    }

    /// Quantizes planar `[3 × H × W]` values in `[0, 1]` to 8 bits.
    pub fn from_planar(width: usize, height: usize, planar: &[f64]) -> Result<Self> {
        let hw = width * height;
        if planar.len() != 3 * hw {
            return Err(Error::shape("rgb8", &[3, height, width], &[planar.len()]));
        }
        let mut bytes = vec![0u8; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                bytes[3 * i + c] = (planar[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(Rgb8 { width, height, bytes })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let r = pnm::read(path)?;
        if r.channels != 3 {
            return Err(Error::contract("image", format!("{} is not a PPM", path.display())));
        }
        Ok(Rgb8 {
            width: r.width,
            height: r.height,
            bytes: r.bytes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        pnm::write(
            path,
            &pnm::Raster {
                width: self.width,
                height: self.height,
                channels: 3,
                bytes: self.bytes.clone(),
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub image: Rgb8,
    pub question: String,
    pub answer: String,
    pub mask: Mask,
}

impl GroundingSample {
    pub fn validate(&self) -> Result<()> {
        if (self.image.width, self.image.height) != (self.mask.width, self.mask.height) {
            return Err(Error::shape(
                "grounding_sample",
                &[self.image.height, self.image.width],
                &[self.mask.height, self.mask.width],
            ));
        }
        Ok(())
    }
}

/// Stacked tensors for a list of samples of equal size.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B × 3 × H × W]`
    pub images: Tensor,
    /// `[B × H × W]`, values in {0, 1}
    pub masks: Tensor,
    pub questions: Vec<String>,
    pub answers: Vec<String>,
}

impl Batch {
    pub fn new(samples: &[&GroundingSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::contract("batch", "empty batch"))?;
        let (w, h) = (first.image.width, first.image.height);
        let mut images = Vec::with_capacity(samples.len() * 3 * w * h);
        let mut masks = Vec::with_capacity(samples.len() * w * h);
        for s in samples {
            s.validate()?;
            if (s.image.width, s.image.height) != (w, h) {
                return Err(Error::shape("batch", &[h, w], &[s.image.height, s.image.width]));
            }
            images.extend(s.image.to_planar());
            masks.extend(s.mask.to_f64());
        }
        let b = samples.len();
        Ok(Batch {
            images: Tensor::new(images, &[b, 3, h, w])?,
            masks: Tensor::new(masks, &[b, h, w])?,
            questions: samples.iter().map(|s| s.question.clone()).collect(),
            answers: samples.iter().map(|s| s.answer.clone()).collect(),
        })
    }

    pub fn pairs(&self) -> Vec<(&str, &str)> {
        self.questions
            .iter()
            .zip(&self.answers)
            .map(|(q, a)| (q.as_str(), a.as_str()))
            .collect()
    }
}

pub const MANIFEST_VERSION: &str = "sab-manifest-1";
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_path: String,
    pub mask_path: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub version: String,
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("# version={}\tseed={}\n", self.version, self.seed);
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.image_path, r.mask_path, r.question, r.answer
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().unwrap_or("");
        let parse_err = |offset: usize, msg: &str| Error::Parse {
            offset,
            msg: msg.to_string(),
        };
        let fields = header
            .trim_end()
            .strip_prefix("# ")
            .ok_or_else(|| parse_err(0, "missing manifest header"))?;
        let (mut version, mut seed) = (None, None);
        for kv in fields.split('\t') {
            match kv.split_once('=') {
                Some(("version", v)) => version = Some(v.to_string()),
                Some(("seed", v)) => seed = v.parse().ok(),
                _ => return Err(parse_err(0, &format!("unknown header field {kv:?}"))),
            }
        }
        let version = version.ok_or_else(|| parse_err(0, "header lacks version"))?;
        if version != MANIFEST_VERSION {
            return Err(parse_err(0, &format!("unsupported manifest version {version}")));
        }
        let seed = seed.ok_or_else(|| parse_err(0, "header lacks a numeric seed"))?;
        let mut offset = header.len();
        let mut records = Vec::new();
        for line in lines {
            let body = line.trim_end_matches(['\n', '\r']);
            if !body.is_empty() {
                let cols: Vec<&str> = body.split('\t').collect();
                if cols.len() != 4 {
                    return Err(parse_err(offset, &format!("expected 4 tab-separated fields, found {}", cols.len())));
                }
                records.push(ManifestRecord {
                    image_path: cols[0].to_string(),
                    mask_path: cols[1].to_string(),
                    question: cols[2].to_string(),
                    answer: cols[3].to_string(),
                });
            }
            offset += line.len();
        }
        Ok(DatasetManifest {
            version,
            seed,
            records,
        })
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes samples under `dir` and returns the manifest that indexes them.
pub fn write_dataset(dir: &Path, seed: u64, samples: &[GroundingSample]) -> Result<DatasetManifest> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        for text in [&s.question, &s.answer] {
            if text.contains(['\t', '\n', '\r']) {
                return Err(Error::contract("write_dataset", format!("sample {i} text contains a tab or newline")));
            }
        }
        let image_path = format!("images/{i:05}.ppm");
        let mask_path = format!("masks/{i:05}.pgm");
        s.image.write(&dir.join(&image_path))?;
        s.mask.write(&dir.join(&mask_path))?;
        records.push(ManifestRecord {
            image_path,
            mask_path,
            question: s.question.clone(),
            answer: s.answer.clone(),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        seed,
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates `count` synthetic samples and writes them under `dir`.
pub fn generate_dataset(seed: u64, count: usize, size: usize, dir: &Path) -> Result<DatasetManifest> {
    write_dataset(dir, seed, &generate_samples(seed, count, size)?)
}

/// Resolves a dataset argument that names either the directory or the manifest file.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads a manifest and every file it references.
pub fn load_dataset(path: &Path) -> Result<Vec<GroundingSample>> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = DatasetManifest::parse(&text)?;
    let root = path.parent().unwrap_or(Path::new("."));
    manifest
        .records
        .iter()
        .map(|r| {
            let s = GroundingSample {
                image: Rgb8::read(&root.join(&r.image_path))?,
                mask: Mask::read(&root.join(&r.mask_path))?,
                question: r.question.clone(),
                answer: r.answer.clone(),
            };
            s.validate()?;
            Ok(s)
        })
        .collect()
}
