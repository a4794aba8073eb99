//! Dataset ingestion.
//!
//! A corpus root holds one subdirectory per class. Images are PNG files or
//! raw `DCLR` tensors. Classes are ordered by directory name and files by
//! file name (byte-wise), which fixes sample ids independently of the file
//! system's enumeration order.
//!
//! `DCLR` layout, little-endian:
//!
//! ```text
//! magic  4 bytes "DCLR"
//! rank   u32     2 (H×W, grayscale) or 3 (C×H×W, C ∈ {1, 3})
//! dims   u32 × rank
//! data   f32 × product(dims), values in [0, 1]
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_affine, AppliedTransform, TransformKind, TransformSpec};
use crate::diffnum::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const RAW_MAGIC: &[u8; 4] = b"DCLR";
pub const CHANNELS: usize = 3;

/// One image with its provenance. `class_label` is for evaluation only;
/// training code consumes [`TrainingImage`]s, which do not carry it.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub source_id: u64,
    pub class_label: usize,
    pub transform: Option<AppliedTransform>,
    pub pixels: Tensor,
}

impl SampleRecord {
    pub fn is_original(&self) -> bool {
        self.transform.is_none()
    }

    pub fn transform_tag(&self) -> &'static str {
        self.transform.map_or("none", |t| t.kind.as_str())
    }
}

/// What the training loops see: pixels and an id, no label.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingImage {
    pub sample_id: u64,
    pub pixels: Tensor,
}

pub fn training_view<'a>(samples: impl IntoIterator<Item = &'a SampleRecord>) -> Vec<TrainingImage> {
    samples
        .into_iter()
        .map(|s| TrainingImage { sample_id: s.sample_id, pixels: s.pixels.clone() })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub label: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: u64,
    pub source_id: u64,
    pub class_label: usize,
    /// Path relative to the corpus root (originals only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<AppliedTransform>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<ClassInfo>,
    /// (height, width)
    pub resolution: [usize; 2],
    pub channels: usize,
    pub normalization: String,
    pub seed: u64,
    /// Transform specs used to produce the augmented entries, if any.
    #[serde(default)]
    pub transforms: Vec<TransformSpec>,
    #[serde(default)]
    pub augment_seed: Option<u64>,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Number of original images (m).
    pub fn originals(&self) -> usize {
        self.samples.iter().filter(|s| s.transform.is_none()).count()
    }

    pub fn augmented(&self) -> usize {
        self.samples.len() - self.originals()
    }

    pub fn kinds_present(&self) -> BTreeSet<TransformKind> {
        self.samples.iter().filter_map(|s| s.transform.map(|t| t.kind)).collect()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Decodes every original and regenerates augmented copies from their
    /// recorded transforms.
    pub fn load_samples(&self) -> Result<Vec<SampleRecord>> {
        let [h, w] = self.resolution;
        let mut out: Vec<SampleRecord> = Vec::with_capacity(self.samples.len());
        let mut by_id = std::collections::HashMap::new();
        for e in self.samples.iter().filter(|e| e.transform.is_none()) {
            let rel = e.file.as_ref().ok_or_else(|| Error::Format {
                what: "manifest",
                message: format!("original sample {} has no file", e.sample_id),
            })?;
            let pixels = load_image(&self.root.join(rel), h, w)?;
            by_id.insert(e.sample_id, out.len());
            out.push(SampleRecord {
                sample_id: e.sample_id,
                source_id: e.sample_id,
                class_label: e.class_label,
                transform: None,
                pixels,
            });
        }
        for e in &self.samples {
            let Some(t) = e.transform else { continue };
            let &src = by_id.get(&e.source_id).ok_or_else(|| Error::Format {
                what: "manifest",
                message: format!("sample {} points to missing original {}", e.sample_id, e.source_id),
            })?;
            let pixels = apply_affine(&out[src].pixels, t.kind, t.param)?;
            out.push(SampleRecord {
                sample_id: e.sample_id,
                source_id: e.source_id,
                class_label: e.class_label,
                transform: Some(t),
                pixels,
            });
        }
        let order: std::collections::HashMap<u64, usize> =
            self.samples.iter().enumerate().map(|(i, e)| (e.sample_id, i)).collect();
        out.sort_by_key(|s| order[&s.sample_id]);
        Ok(out)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("dclr"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    v.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(v)
}

/// Scans `root` and decodes every image at `resolution` (height, width).
pub fn ingest(root: &Path, resolution: [usize; 2], seed: u64) -> Result<(DatasetManifest, Vec<SampleRecord>)> {
    if resolution[0] == 0 || resolution[1] == 0 {
        return Err(Error::invalid("target resolution must be positive"));
    }
    let mut classes = Vec::new();
    let mut entries = Vec::new();
    let mut samples = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::invalid(format!("class directory {} is not valid UTF-8", dir.display())))?
            .to_string();
        let label = classes.len();
        let files: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect();
        if files.is_empty() {
            return Err(Error::invalid(format!("class directory {} contains no images", dir.display())));
        }
        for f in &files {
            let pixels = load_image(f, resolution[0], resolution[1])?;
            let id = entries.len() as u64;
            let rel = format!("{name}/{}", f.file_name().and_then(|n| n.to_str()).unwrap_or_default());
            entries.push(ManifestEntry { sample_id: id, source_id: id, class_label: label, file: Some(rel), transform: None });
            samples.push(SampleRecord { sample_id: id, source_id: id, class_label: label, transform: None, pixels });
        }
        classes.push(ClassInfo { name, label, count: files.len() });
    }
    if classes.is_empty() {
        return Err(Error::invalid(format!("{} contains no class directories", root.display())));
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes,
        resolution,
        channels: CHANNELS,
        normalization: "8-bit /255, 16-bit /65535, DCLR as stored; grayscale replicated to RGB; bilinear resize".into(),
        seed,
        transforms: Vec::new(),
        augment_seed: None,
        samples: entries,
    };
    Ok((manifest, samples))
}

/// Keeps `per_class` originals of each class, chosen by a seeded shuffle;
/// augmented entries follow their originals.
pub fn subsample(manifest: &DatasetManifest, per_class: usize, seed: u64) -> Result<DatasetManifest> {
    let mut keep = BTreeSet::new();
    for class in &manifest.classes {
        let mut ids: Vec<u64> = manifest
            .samples
            .iter()
            .filter(|s| s.transform.is_none() && s.class_label == class.label)
            .map(|s| s.sample_id)
            .collect();
        if ids.len() < per_class {
            return Err(Error::invalid(format!(
                "class `{}` has {} images, fewer than the requested {per_class}",
                class.name,
                ids.len()
            )));
        }
        ids.shuffle(&mut rng::stream(seed, Stream::Subsample, class.label as u64, 0));
        keep.extend(ids.into_iter().take(per_class));
    }
    let mut out = manifest.clone();
    out.samples.retain(|s| keep.contains(&s.source_id));
    for c in &mut out.classes {
        c.count = per_class;
    }
    Ok(out)
}

/// Decodes one image file into a `3×H×W` tensor in [0, 1].
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let is_raw = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("dclr"));
    let img = if is_raw {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_raw(&bytes).map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })?
    } else {
        let decoded = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })?;
        let rgb = decoded.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = rgb.into_raw();
        let mut chw = vec![0.0; CHANNELS * h * w];
        for (i, px) in raw.chunks_exact(CHANNELS).enumerate() {
            for (c, v) in px.iter().enumerate() {
                chw[c * h * w + i] = *v as f64;
            }
        }
        Tensor::new(vec![CHANNELS, h, w], chw)?
    };
    Ok(resize_bilinear(&img, height, width))
}

pub fn encode_raw(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decodes a `DCLR` buffer into a `3×H×W` tensor.
pub fn decode_raw(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: String| Error::Format { what: "DCLR raw tensor", message: m };
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad(format!("truncated header at byte {i}")))
    };
    if bytes.get(..4) != Some(RAW_MAGIC.as_slice()) {
        return Err(bad("bad magic".into()));
    }
    let rank = word(4)? as usize;
    let dims = (0..rank).map(|i| word(8 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let (c, h, w) = match dims[..] {
        [h, w] => (1, h, w),
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        _ => return Err(bad(format!("unsupported dims {dims:?}"))),
    };
    let start = 8 + 4 * rank;
    let n = c * h * w;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != 4 * n {
        return Err(bad(format!("payload has {} bytes, expected {}", payload.len(), 4 * n)));
    }
    let vals: Vec<f64> = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    if let Some(v) = vals.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(bad(format!("value {v} outside [0, 1]")));
    }
    let data = if c == 1 { vals.repeat(CHANNELS) } else { vals };
    Tensor::new(vec![CHANNELS, h, w], data)
}

/// Bilinear resize with half-pixel centers and edge clamping; the identity
/// when the size is unchanged.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let &[c, h, w] = img.shape() else { panic!("resize expects C×H×W") };
    if h == out_h && w == out_w {
        return img.clone();
    }
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let src = img.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            for ch in 0..c {
                let p = &src[ch * h * w..];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[(ch * out_h + y) * out_w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("sized above")
}
