mod common;

use common::*;
use deepclust::augment::{TransformKind, TransformSpec};
use deepclust::cae::{ccl_loss, pretrain, soft_assign, CaeModel, CclCenters, LossMode, PretrainConfig, VggConfig};
use deepclust::corpus::TrainingImage;
use deepclust::Tensor;
use proptest::prelude::*;

fn cfg16() -> VggConfig {
    VggConfig { channels: 3, height: 16, width: 16, widths: [4, 4, 8, 8], embedding_dim: 5 }
}

fn images(n: usize, seed: u64) -> Vec<TrainingImage> {
    let mut r = rng(seed);
    (0..n).map(|i| TrainingImage { sample_id: i as u64, pixels: uniform(&mut r, &[3, 16, 16], 0.0, 1.0) }).collect()
}

#[test]
fn default_architecture_encodes_64px_batches() {
    let model = CaeModel::vgg(&VggConfig::default(), 1).unwrap();
    let batch = uniform(&mut rng(1), &[16, 3, 64, 64], 0.0, 1.0);
    let z = model.encode(&batch).unwrap();
    assert_eq!(z.shape(), [16, 10]);
    assert!(z.is_finite());
    assert!(CaeModel::vgg(&VggConfig { height: 60, ..VggConfig::default() }, 1).is_err());
}

#[test]
fn one_pixel_moves_the_embedding() {
    let model = CaeModel::vgg(&cfg16(), 2).unwrap();
    let x = uniform(&mut rng(2), &[1, 3, 16, 16], 0.0, 1.0);
    let mut y = x.clone();
    y.data_mut()[3 * 16 + 5] += 1e-3;
    assert_ne!(model.encode(&x).unwrap(), model.encode(&y).unwrap());
}

#[test]
fn soft_assign_examples() {
    let centers = CclCenters::new(Tensor::new(vec![3, 2], vec![0.0, 0.0, 5.0, 0.0, 0.0, 5.0]).unwrap(), 1.0).unwrap();
    let z = Tensor::new(vec![2, 2], vec![5.0, 0.0, 0.0, 0.0]).unwrap();
    let p = soft_assign(&z, &centers).unwrap();
    assert!(p.row(0)[1] > p.row(0)[0] && p.row(0)[1] > p.row(0)[2]);
    // the origin sits at distance 1 from all four centers
    let eq = CclCenters::new(Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap(), 2.0).unwrap();
    let u = soft_assign(&Tensor::zeros(&[1, 2]), &eq).unwrap();
    assert!(u.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    assert!(CclCenters::new(Tensor::zeros(&[1, 2]), 1.0).is_err());
}

#[test]
fn mse_training_makes_progress() {
    let data = images(32, 3);
    let mut model = CaeModel::vgg(&cfg16(), 3).unwrap();
    let report = pretrain(&mut model, &data, &PretrainConfig { epochs: 50, seed: 3, ..Default::default() }).unwrap();
    let first = report.history.first().unwrap().mse;
    let last = report.history.last().unwrap().mse;
    assert!(last < first, "mse {first} -> {last}");
}

#[test]
fn ccl_training_is_additive_and_deterministic() {
    let data = images(24, 4);
    let cfg = PretrainConfig {
        loss: LossMode::MseCcl,
        epochs: 4,
        warmup_fraction: 0.25,
        clusters: 3,
        batch_size: 8,
        seed: 4,
        pair_specs: TransformSpec::standard_set(&TransformKind::ALL),
        ..Default::default()
    };
    let mut a = CaeModel::vgg(&cfg16(), 4).unwrap();
    let ra = pretrain(&mut a, &data, &cfg).unwrap();
    for s in &ra.steps {
        assert!((s.total - (s.mse + s.ccl)).abs() < 1e-12);
        assert!((0.0..=2.0 / 3.0).contains(&s.ccl));
    }
    assert!(ra.steps.iter().any(|s| s.ccl > 0.0));
    let mut b = CaeModel::vgg(&cfg16(), 4).unwrap();
    let rb = pretrain(&mut b, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.centers, rb.centers);
    assert_eq!(ra.steps, rb.steps);
}

#[test]
fn combined_objective_gradient_wrt_centers() {
    // MSE + CCL on a 4-sample toy batch, differentiated w.r.t. the centers
    let mut r = rng(5);
    let x = uniform(&mut r, &[4, 3], 0.0, 1.0);
    let rec = uniform(&mut r, &[4, 3], 0.0, 1.0);
    let z = uniform(&mut r, &[4, 2], -1.0, 1.0);
    let zt = uniform(&mut r, &[4, 2], -1.0, 1.0);
    let mu = uniform(&mut r, &[3, 2], -1.0, 1.0);
    let worst = check_gradients(
        |g, v| {
            let (xi, ri, zi, zti) = (g.constant(x.clone()), g.constant(rec.clone()), g.constant(z.clone()), g.constant(zt.clone()));
            let mse = g.mse(ri, xi)?;
            let p = g.soft_assign(zi, v[0], 1.0)?;
            let pt = g.soft_assign(zti, v[0], 1.0)?;
            let ccl = g.mean_abs_diff(p, pt)?;
            g.add(mse, ccl)
        },
        &[mu],
        20,
        6,
    );
    assert!(worst < FD_TOL, "{worst:e}");
}

fn stochastic_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..6, 2usize..6).prop_flat_map(|(n, k)| {
        let row = prop::collection::vec(0.01f64..1.0, k);
        (prop::collection::vec(row.clone(), n), prop::collection::vec(row, n)).prop_map(move |(a, b)| {
            let norm = |rows: Vec<Vec<f64>>| {
                let data = rows.iter().flat_map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(move |v| v / s)
                });
                Tensor::new(vec![n, k], data.collect()).unwrap()
            };
            (norm(a), norm(b))
        })
    })
}

proptest! {
    #[test]
    fn ccl_is_symmetric_and_bounded((p, q) in stochastic_pair()) {
        let k = p.shape()[1] as f64;
        let a = ccl_loss(&p, &q).unwrap();
        prop_assert_eq!(a, ccl_loss(&q, &p).unwrap());
        prop_assert!(a >= 0.0 && a <= 2.0 / k + 1e-12);
    }

    #[test]
    fn ccl_detects_row_permutations((p, _) in stochastic_pair(), shift in 1usize..5) {
        let n = p.shape()[0];
        prop_assume!(n > 1 && shift % n != 0);
        let k = p.shape()[1];
        let rows: Vec<f64> = (0..n).flat_map(|i| p.row((i + shift) % n).to_vec()).collect();
        let permuted = Tensor::new(vec![n, k], rows).unwrap();
        prop_assume!(permuted != p);
        prop_assert!(ccl_loss(&p, &permuted).unwrap() > 0.0);
    }
}
