mod common;

use std::collections::BTreeSet;
use std::path::Path;

use common::*;
use deepclust::augment::{
    apply_affine, augment_corpus, augment_manifest, draw_pair_transform, TransformKind, TransformSpec,
};
use deepclust::corpus::{encode_raw, ingest, subsample, DatasetManifest};
use deepclust::Tensor;
use proptest::prelude::*;

fn small_tree(root: &Path) {
    for (class, shade) in [("b_class", 0u8), ("a_class", 255u8)] {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..3 {
            image::GrayImage::from_pixel(5, 4, image::Luma([shade])).save(dir.join(format!("img{i}.png"))).unwrap();
        }
    }
}

#[test]
fn ingest_counts_orders_and_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    std::fs::write(dir.path().join("a_class/notes.txt"), "ignored").unwrap();
    let (m, samples) = ingest(dir.path(), [8, 8], 1).unwrap();
    assert_eq!(m.originals(), 6);
    assert_eq!(m.classes.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), ["a_class", "b_class"]);
    assert_eq!(samples.iter().map(|s| s.class_label).collect::<Vec<_>>(), [0, 0, 0, 1, 1, 1]);
    assert_eq!(samples.iter().map(|s| s.sample_id).collect::<Vec<_>>(), [0, 1, 2, 3, 4, 5]);
    assert!(samples[0].pixels.data().iter().all(|v| *v == 1.0));
    assert!(samples[5].pixels.data().iter().all(|v| *v == 0.0));
    assert_eq!(samples[0].pixels.shape(), [3, 8, 8]);
    let (again, resamples) = ingest(dir.path(), [8, 8], 1).unwrap();
    assert_eq!(m, again);
    assert_eq!(samples, resamples);
}

#[test]
fn ingest_reports_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    std::fs::create_dir_all(dir.path().join("c_empty")).unwrap();
    assert!(ingest(dir.path(), [8, 8], 1).unwrap_err().to_string().contains("c_empty"));
    std::fs::remove_dir(dir.path().join("c_empty")).unwrap();
    let broken = dir.path().join("a_class/broken.png");
    std::fs::write(&broken, b"not a png").unwrap();
    assert!(ingest(dir.path(), [8, 8], 1).unwrap_err().to_string().contains("broken.png"));
}

#[test]
fn raw_tensor_files_are_ingested() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("only")).unwrap();
    let t = Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
    std::fs::write(dir.path().join("only/x.dclr"), encode_raw(&t)).unwrap();
    let (_, s) = ingest(dir.path(), [2, 2], 0).unwrap();
    for (a, b) in s[0].pixels.data().iter().zip(t.data()) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn subsample_selects_per_class() {
    let dir = tempfile::tempdir().unwrap();
    write_digit_tree(dir.path(), 100);
    let (m, _) = ingest(dir.path(), [8, 8], 0).unwrap();
    assert_eq!(subsample(&m, 100, 3).unwrap().samples.len(), m.samples.len());
    let one = subsample(&m, 1, 3).unwrap();
    assert_eq!(one.originals(), 10);
    assert_eq!(one.samples.iter().map(|s| s.class_label).collect::<BTreeSet<_>>().len(), 10);
    let ids = |m: &DatasetManifest| m.samples.iter().map(|s| s.sample_id).collect::<BTreeSet<_>>();
    assert_ne!(ids(&subsample(&m, 50, 1).unwrap()), ids(&subsample(&m, 50, 2).unwrap()));
    assert_eq!(ids(&subsample(&m, 50, 1).unwrap()), ids(&subsample(&m, 50, 1).unwrap()));
    let err = subsample(&m, 101, 1).unwrap_err().to_string();
    assert!(err.contains("digit0"), "{err}");
}

#[test]
fn augmentation_matches_corpus_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    write_digit_tree(dir.path(), 150);
    let (m, samples) = ingest(dir.path(), [16, 16], 0).unwrap();
    assert_eq!(m.originals(), 1500);
    let specs = TransformSpec::standard_set(&TransformKind::ALL);
    let (am, all) = augment_manifest(&m, &samples, &specs, 7).unwrap();
    assert_eq!(am.augmented(), 4500);
    assert_eq!(all.len(), 6000);
    let origin: BTreeSet<u64> = all.iter().filter(|s| s.is_original()).map(|s| s.sample_id).collect();
    for s in all.iter().filter(|s| !s.is_original()) {
        assert!(origin.contains(&s.source_id));
        assert!(s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let spec = specs.iter().find(|p| p.kind == s.transform.unwrap().kind).unwrap();
        let p = s.transform.unwrap().param;
        assert!(p.abs() >= spec.min - 1e-12 && p.abs() <= spec.max + 1e-12);
    }
    // manifests store provenance, so reloading regenerates identical pixels
    let path = dir.path().join("manifest.json");
    am.save(&path).unwrap();
    let reloaded = DatasetManifest::load(&path).unwrap();
    assert_eq!(reloaded, am);
    assert_eq!(reloaded.load_samples().unwrap(), all);
    // and re-augmenting replaces rather than accumulates
    let (twice, _) = augment_manifest(&am, &all, &specs[..1], 7).unwrap();
    assert_eq!(twice.augmented(), 1500);
}

#[test]
fn degenerate_rotation_range_copies_originals() {
    let dir = tempfile::tempdir().unwrap();
    small_tree(dir.path());
    let (_, samples) = ingest(dir.path(), [8, 8], 0).unwrap();
    let aug = augment_corpus(&samples, &[TransformSpec::new(TransformKind::Rot, 0.0, 0.0).unwrap()], 1).unwrap();
    for (a, o) in aug.iter().zip(&samples) {
        assert_eq!(a.pixels, o.pixels);
    }
    assert_eq!(augment_corpus(&samples, &TransformSpec::standard_set(&TransformKind::ALL), 4).unwrap(),
               augment_corpus(&samples, &TransformSpec::standard_set(&TransformKind::ALL), 4).unwrap());
}

#[test]
fn pair_transforms_are_balanced_and_decorrelated() {
    let specs = TransformSpec::standard_set(&TransformKind::ALL);
    let mut counts = [0usize; 3];
    for id in 0..10_000 {
        let t = draw_pair_transform(id, 0, 5, &specs).unwrap();
        assert_eq!(t, draw_pair_transform(id, 0, 5, &specs).unwrap());
        counts[TransformKind::ALL.iter().position(|k| *k == t.kind).unwrap()] += 1;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
    }
    let differ = (0..1000)
        .filter(|id| draw_pair_transform(*id, 0, 5, &specs).unwrap() != draw_pair_transform(*id, 1, 5, &specs).unwrap())
        .count();
    assert!(differ >= 990);
}

proptest! {
    #[test]
    fn affine_output_stays_in_unit_range(
        pixels in prop::collection::vec(0.0f64..=1.0, 3 * 6 * 5),
        kind in prop::sample::select(TransformKind::ALL.to_vec()),
        u in 0.0f64..=1.0,
        negative in any::<bool>(),
    ) {
        let img = Tensor::new(vec![3, 6, 5], pixels).unwrap();
        let spec = TransformSpec::standard(kind);
        let mut param = spec.min + u * (spec.max - spec.min);
        if negative && kind != TransformKind::Scal {
            param = -param;
        }
        let out = apply_affine(&img, kind, param).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
