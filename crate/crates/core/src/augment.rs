//! Random affine augmentation: rotation, horizontal shear and isotropic
//! scaling about the image center, sampled bilinearly with a black fill.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetManifest, ManifestEntry, SampleRecord};
use crate::diffnum::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Rot,
    Sher,
    Scal,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [TransformKind::Rot, TransformKind::Sher, TransformKind::Scal];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Rot => "rot",
            TransformKind::Sher => "sher",
            TransformKind::Scal => "scal",
        }
    }

    /// Widest admissible parameter interval. Rotation and shear are signed
    /// angles in degrees; scaling is a factor.
    pub fn limits(self) -> (f64, f64) {
        match self {
            TransformKind::Rot => (-90.0, 90.0),
            TransformKind::Sher => (-50.0, 50.0),
            TransformKind::Scal => (0.5, 1.0),
        }
    }

    fn signed(self) -> bool {
        !matches!(self, TransformKind::Scal)
    }

    /// Parameter value that leaves an image untouched.
    pub fn identity_param(self) -> f64 {
        match self {
            TransformKind::Scal => 1.0,
            _ => 0.0,
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rot" => Ok(TransformKind::Rot),
            "sher" => Ok(TransformKind::Sher),
            "scal" => Ok(TransformKind::Scal),
            other => Err(Error::invalid(format!("unknown transform `{other}` (expected rot, sher or scal)"))),
        }
    }
}

/// Parses `none` or a comma-separated subset of `rot,sher,scal`.
pub fn parse_kinds(s: &str) -> Result<Vec<TransformKind>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    let mut kinds = s.split(',').map(str::parse).collect::<Result<Vec<TransformKind>>>()?;
    kinds.sort();
    kinds.dedup();
    Ok(kinds)
}

/// A transform family with the interval its magnitude is drawn from.
/// Rotation and shear magnitudes get a uniformly random sign.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub min: f64,
    pub max: f64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, min: f64, max: f64) -> Result<Self> {
        let (lo, hi) = kind.limits();
        let lo = if kind.signed() { 0.0 } else { lo };
        if !(min <= max) || min < lo || max > hi {
            return Err(Error::invalid(format!(
                "{kind} range [{min}, {max}] must lie within [{lo}, {hi}]"
            )));
        }
        Ok(Self { kind, min, max })
    }

    /// Rotation 0–90°, shear 0–50°, scaling 0.5–1.0.
    pub fn standard(kind: TransformKind) -> Self {
        let (min, max) = match kind {
            TransformKind::Rot => (0.0, 90.0),
            TransformKind::Sher => (0.0, 50.0),
            TransformKind::Scal => (0.5, 1.0),
        };
        Self { kind, min, max }
    }

    /// Degenerate range that always yields the identity transform.
    pub fn identity(kind: TransformKind) -> Self {
        let p = kind.identity_param();
        Self { kind, min: p, max: p }
    }

    pub fn standard_set(kinds: &[TransformKind]) -> Vec<Self> {
        kinds.iter().map(|k| Self::standard(*k)).collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let magnitude = if self.min < self.max { rng.random_range(self.min..=self.max) } else { self.min };
        if self.kind.signed() && rng.random_bool(0.5) {
            -magnitude
        } else {
            magnitude
        }
    }
}

/// A concrete transform applied to one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedTransform {
    pub kind: TransformKind,
    pub param: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Bilinear,
    /// Only meant for exact-coordinate tests.
    Nearest,
}

pub fn apply_affine(pixels: &Tensor, kind: TransformKind, param: f64) -> Result<Tensor> {
    apply_affine_with(pixels, kind, param, Sampling::Bilinear)
}

/// Warps a `C×H×W` image. Output pixel `p` samples the input at
/// `A⁻¹(p − c) + c` with `c` the image center; out-of-bounds reads are 0.
pub fn apply_affine_with(pixels: &Tensor, kind: TransformKind, param: f64, sampling: Sampling) -> Result<Tensor> {
    let (lo, hi) = kind.limits();
    if !(param >= lo && param <= hi) {
        return Err(Error::invalid(format!("{kind} parameter {param} outside [{lo}, {hi}]")));
    }
    let &[c, h, w] = pixels.shape() else {
        return Err(Error::invalid(format!("expected a C×H×W image, got shape {:?}", pixels.shape())));
    };
    // Inverse map as a 2×2 matrix acting on (dx, dy) = (col, row) offsets.
    let inv = match kind {
        TransformKind::Rot => {
            let (s, co) = param.to_radians().sin_cos();
            [[co, s], [-s, co]]
        }
        TransformKind::Sher => [[1.0, -param.to_radians().tan()], [0.0, 1.0]],
        TransformKind::Scal => [[1.0 / param, 0.0], [0.0, 1.0 / param]],
    };
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let src = pixels.data();
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for col in 0..w {
            let dx = col as f64 - cx;
            let dy = r as f64 - cy;
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let v = match sampling {
                    Sampling::Bilinear => bilinear(plane, h, w, sy, sx),
                    Sampling::Nearest => fetch(plane, h, w, sy.round() as isize, sx.round() as isize),
                };
                out[(ch * h + r) * w + col] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(pixels.shape().to_vec(), out)
}

fn fetch(plane: &[f64], h: usize, w: usize, r: isize, c: isize) -> f64 {
    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
        0.0
    } else {
        plane[r as usize * w + c as usize]
    }
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (r, c) = (y0 as isize, x0 as isize);
    let mut v = fetch(plane, h, w, r, c) * (1.0 - fy) * (1.0 - fx);
    // Skipping zero-weight taps keeps integer coordinates exact.
    if fx > 0.0 {
        v += fetch(plane, h, w, r, c + 1) * (1.0 - fy) * fx;
    }
    if fy > 0.0 {
        v += fetch(plane, h, w, r + 1, c) * fy * (1.0 - fx);
        if fx > 0.0 {
            v += fetch(plane, h, w, r + 1, c + 1) * fy * fx;
        }
    }
    v
}

/// One augmented copy per (original, spec). Copy ids continue after the
/// largest input id, grouped by spec; parameters come from a stream keyed by
/// `(seed, source id, spec index)`.
pub fn augment_corpus(samples: &[SampleRecord], specs: &[TransformSpec], seed: u64) -> Result<Vec<SampleRecord>> {
    if specs.is_empty() {
        return Err(Error::invalid("augmentation needs at least one transform"));
    }
    let originals: Vec<&SampleRecord> = samples.iter().filter(|s| s.transform.is_none()).collect();
    let next_id = samples.iter().map(|s| s.sample_id + 1).max().unwrap_or(0);
    let m = originals.len() as u64;
    let mut out = Vec::with_capacity(originals.len() * specs.len());
    for (j, spec) in specs.iter().enumerate() {
        for (i, orig) in originals.iter().enumerate() {
            let param = draw_augment_param(orig.sample_id, j, seed, spec);
            out.push(SampleRecord {
                sample_id: next_id + j as u64 * m + i as u64,
                source_id: orig.sample_id,
                class_label: orig.class_label,
                transform: Some(AppliedTransform { kind: spec.kind, param }),
                pixels: apply_affine(&orig.pixels, spec.kind, param)?,
            });
        }
    }
    Ok(out)
}

/// Augments the originals of a manifest, replacing any augmented entries it
/// already had. Returns the new manifest and every sample, originals first.
pub fn augment_manifest(
    manifest: &DatasetManifest,
    samples: &[SampleRecord],
    specs: &[TransformSpec],
    seed: u64,
) -> Result<(DatasetManifest, Vec<SampleRecord>)> {
    let originals: Vec<SampleRecord> = samples.iter().filter(|s| s.transform.is_none()).cloned().collect();
    let augmented = augment_corpus(&originals, specs, seed)?;
    let mut out = manifest.clone();
    out.samples.retain(|e| e.transform.is_none());
    out.samples.extend(augmented.iter().map(|s| ManifestEntry {
        sample_id: s.sample_id,
        source_id: s.source_id,
        class_label: s.class_label,
        file: None,
        transform: s.transform,
    }));
    out.transforms = specs.to_vec();
    out.augment_seed = Some(seed);
    let mut all = originals;
    all.extend(augmented);
    Ok((out, all))
}

pub(crate) fn draw_augment_param(source_id: u64, spec_index: usize, seed: u64, spec: &TransformSpec) -> f64 {
    let mut r = rng::stream(seed, Stream::Augment, source_id, spec_index as u64);
    spec.sample(&mut r)
}

/// Transform for the consistency partner of `sample_id` in `epoch`: a
/// uniformly chosen spec, then a parameter from its range.
pub fn draw_pair_transform(sample_id: u64, epoch: u64, seed: u64, specs: &[TransformSpec]) -> Result<AppliedTransform> {
    if specs.is_empty() {
        return Err(Error::invalid("pair transform needs at least one spec"));
    }
    let mut r = rng::stream(seed, Stream::Pair, sample_id, epoch);
    let spec = specs[r.random_range(0..specs.len())];
    Ok(AppliedTransform { kind: spec.kind, param: spec.sample(&mut r) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let n = c * h * w;
        Tensor::new(vec![c, h, w], (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()).unwrap()
    }

    #[test]
    fn identity_parameters_are_exact() {
        let img = ramp(3, 7, 6);
        assert_eq!(apply_affine(&img, TransformKind::Rot, 0.0).unwrap(), img);
        assert_eq!(apply_affine(&img, TransformKind::Rot, -0.0).unwrap(), img);
        assert_eq!(apply_affine(&img, TransformKind::Sher, 0.0).unwrap(), img);
        assert_eq!(apply_affine(&img, TransformKind::Scal, 1.0).unwrap(), img);
    }

    fn rotate90_oracle(img: &Tensor) -> Tensor {
        let &[c, h, w] = img.shape() else { panic!() };
        assert_eq!(h, w);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    // input (r, c) lands on (c, H-1-r)
                    out[(ch * h + col) * w + (h - 1 - r)] = img.data()[(ch * h + r) * w + col];
                }
            }
        }
        Tensor::new(img.shape().to_vec(), out).unwrap()
    }

    #[test]
    fn rotation_by_90_matches_coordinate_loop() {
        for n in [3, 5] {
            let img = ramp(1, n, n);
            let got = apply_affine_with(&img, TransformKind::Rot, 90.0, Sampling::Nearest).unwrap();
            assert_eq!(got, rotate90_oracle(&img));
        }
    }

    #[test]
    fn out_of_range_parameters_rejected() {
        let img = ramp(1, 3, 3);
        assert!(apply_affine(&img, TransformKind::Rot, 91.0).is_err());
        assert!(apply_affine(&img, TransformKind::Sher, -50.5).is_err());
        assert!(apply_affine(&img, TransformKind::Scal, 0.49).is_err());
        assert!(apply_affine(&img, TransformKind::Scal, f64::NAN).is_err());
        assert!(TransformSpec::new(TransformKind::Rot, 0.0, 100.0).is_err());
        assert!(TransformSpec::new(TransformKind::Scal, 0.4, 1.0).is_err());
    }

    #[test]
    fn output_stays_in_unit_interval() {
        let img = Tensor::full(&[3, 9, 9], 1.0);
        for (k, p) in [(TransformKind::Rot, 37.0), (TransformKind::Sher, -45.0), (TransformKind::Scal, 0.6)] {
            let out = apply_affine(&img, k, p).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            // The borders are exposed and filled with black.
            assert!(out.data().iter().any(|v| *v < 1.0));
        }
    }

    #[test]
    fn sampled_params_respect_range() {
        let spec = TransformSpec::standard(TransformKind::Sher);
        let mut r = rng::stream(1, Stream::Augment, 0, 0);
        for _ in 0..1000 {
            let p = spec.sample(&mut r);
            assert!(p.abs() <= 50.0);
        }
        let scal = TransformSpec::standard(TransformKind::Scal);
        for _ in 0..1000 {
            let p = scal.sample(&mut r);
            assert!((0.5..=1.0).contains(&p));
        }
    }

    #[test]
    fn pair_draws_are_deterministic_and_balanced() {
        let specs = TransformSpec::standard_set(&TransformKind::ALL);
        assert_eq!(
            draw_pair_transform(5, 3, 11, &specs).unwrap(),
            draw_pair_transform(5, 3, 11, &specs).unwrap()
        );
        let mut counts = [0usize; 3];
        for id in 0..10_000u64 {
            let t = draw_pair_transform(id, 0, 42, &specs).unwrap();
            counts[t.kind as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn pair_draws_decorrelate_across_epochs() {
        let specs = TransformSpec::standard_set(&TransformKind::ALL);
        let differ = (0..1000u64)
            .filter(|id| draw_pair_transform(*id, 0, 9, &specs).unwrap() != draw_pair_transform(*id, 1, 9, &specs).unwrap())
            .count();
        assert!(differ >= 990, "{differ}");
    }

    #[test]
    fn parse_kind_lists() {
        assert_eq!(parse_kinds("none").unwrap(), vec![]);
        assert_eq!(parse_kinds("scal,rot").unwrap(), vec![TransformKind::Rot, TransformKind::Scal]);
        assert!(parse_kinds("rot,flip").is_err());
    }
}
