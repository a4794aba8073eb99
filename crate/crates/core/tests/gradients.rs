mod common;

use common::*;
use deepclust::cae::{CaeModel, VggConfig};
use deepclust::{Graph, LayerSpec, Mode, ParamStore, Sequential, Tensor};
use rand::Rng;

const TRIALS: usize = 20;

fn assert_fd(name: &str, worst: f64) {
    assert!(worst < FD_TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut r = rng(1);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let x = uniform(&mut r, &[2, 3, 5, 6], -1.0, 1.0);
        let w = uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
        let b = uniform(&mut r, &[4], -0.5, 0.5);
        let worst = check_gradients(|g, v| g.conv2d(v[0], v[1], v[2], stride, pad), &[x, w, b], TRIALS, 2);
        assert_fd(&format!("conv stride {stride} pad {pad}"), worst);
    }
}

#[test]
fn conv_transpose_matches_finite_differences() {
    let mut r = rng(3);
    for (stride, pad, out_pad) in [(2, 1, 1), (1, 1, 0), (2, 0, 0), (3, 1, 2)] {
        let x = uniform(&mut r, &[2, 3, 4, 3], -1.0, 1.0);
        let w = uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
        let b = uniform(&mut r, &[2], -0.5, 0.5);
        let worst = check_gradients(
            |g, v| g.conv_transpose2d(v[0], v[1], v[2], stride, pad, out_pad),
            &[x, w, b],
            TRIALS,
            4,
        );
        assert_fd(&format!("conv transpose stride {stride} pad {pad}"), worst);
    }
}

#[test]
fn batch_norm_matches_finite_differences() {
    let mut r = rng(5);
    let x = uniform(&mut r, &[4, 3, 2, 3], -2.0, 2.0);
    let gamma = uniform(&mut r, &[3], 0.5, 1.5);
    let beta = uniform(&mut r, &[3], -0.5, 0.5);
    let train = check_gradients(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, None)?.0), &[x.clone(), gamma.clone(), beta.clone()], TRIALS, 6);
    assert_fd("batch norm (batch statistics)", train);
    let (m, var) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    let eval = check_gradients(
        |g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, Some((&m, &var)))?.0),
        &[x, gamma, beta],
        TRIALS,
        7,
    );
    assert_fd("batch norm (running statistics)", eval);
    // dense features: rank-2 input
    let x2 = uniform(&mut r, &[5, 4], -1.0, 1.0);
    let w = check_gradients(
        |g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, None)?.0),
        &[x2, Tensor::full(&[4], 1.3), Tensor::full(&[4], 0.2)],
        TRIALS,
        8,
    );
    assert_fd("batch norm rank 2", w);
}

#[test]
fn pointwise_and_pooling_match_finite_differences() {
    let mut r = rng(9);
    let x = away_from_zero(&mut r, &[2, 3, 4, 4], 1e-2);
    assert_fd("relu", check_gradients(|g, v| g.relu(v[0]), &[x.clone()], TRIALS, 10));
    assert_fd("sigmoid", check_gradients(|g, v| g.sigmoid(v[0]), &[uniform(&mut r, &[3, 5], -4.0, 4.0)], TRIALS, 11));
    // distinct values spaced well apart so the argmax cannot flip
    let n = x.len();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let pool_in = Tensor::new(x.shape().to_vec(), vals).unwrap();
    assert_fd("max pool", check_gradients(|g, v| g.max_pool2d(v[0], 2, 2), &[pool_in], TRIALS, 12));
}

#[test]
fn dense_reshape_concat_slice_match_finite_differences() {
    let mut r = rng(13);
    let x = uniform(&mut r, &[3, 2, 2, 2], -1.0, 1.0);
    let w = uniform(&mut r, &[5, 8], -0.5, 0.5);
    let b = uniform(&mut r, &[5], -0.5, 0.5);
    let worst = check_gradients(
        |g, v| {
            let flat = g.reshape(v[0], &[3, 8])?;
            g.dense(flat, v[1], v[2])
        },
        &[x.clone(), w, b],
        TRIALS,
        14,
    );
    assert_fd("reshape + dense", worst);
    let y = uniform(&mut r, &[2, 2, 2, 2], -1.0, 1.0);
    let worst = check_gradients(
        |g, v| {
            let both = g.concat(&[v[0], v[1]])?;
            let s = g.slice(both, 2, 3)?;
            let t = g.scale(s, 1.7)?;
            g.add(t, s)
        },
        &[x, y],
        TRIALS,
        15,
    );
    assert_fd("concat + slice + scale + add", worst);
}

#[test]
fn reconstruction_loss_matches_finite_differences() {
    let mut r = rng(16);
    let a = uniform(&mut r, &[3, 2, 4], 0.0, 1.0);
    let b = uniform(&mut r, &[3, 2, 4], 0.0, 1.0);
    assert_fd("mse", check_gradients(|g, v| g.mse(v[0], v[1]), &[a, b], TRIALS, 17));
}

#[test]
fn consistency_loss_matches_finite_differences() {
    let mut r = rng(18);
    let a = uniform(&mut r, &[4, 3], 0.0, 1.0);
    // keep every pair at least 0.05 apart so |·| stays differentiable
    let shift = away_from_zero(&mut r, &[4, 3], 0.05);
    let b = Tensor::new(vec![4, 3], a.data().iter().zip(shift.data()).map(|(x, s)| x + s).collect()).unwrap();
    assert_fd("mean abs diff", check_gradients(|g, v| g.mean_abs_diff(v[0], v[1]), &[a, b], TRIALS, 19));
}

#[test]
fn student_t_and_kl_match_finite_differences() {
    let mut r = rng(20);
    for alpha in [1.0, 0.5, 3.0] {
        let z = uniform(&mut r, &[5, 3], -1.0, 1.0);
        let mu = uniform(&mut r, &[4, 3], -1.0, 1.0);
        assert_fd(
            "soft assign",
            check_gradients(|g, v| g.soft_assign(v[0], v[1], alpha), &[z.clone(), mu.clone()], TRIALS, 21),
        );
        let target = stochastic(&mut r, 5, 4);
        assert_fd(
            "soft assign + kl",
            check_gradients(
                |g, v| {
                    let p = g.soft_assign(v[0], v[1], alpha)?;
                    g.kl_div(&target, p)
                },
                &[z.clone(), mu.clone()],
                TRIALS,
                22,
            ),
        );
        // the consistency term on top of two assignment branches
        let zt = uniform(&mut r, &[5, 3], -1.0, 1.0);
        assert_fd(
            "soft assign pair + ccl",
            check_gradients(
                |g, v| {
                    let p = g.soft_assign(v[0], v[2], alpha)?;
                    let pt = g.soft_assign(v[1], v[2], alpha)?;
                    g.mean_abs_diff(p, pt)
                },
                &[z, zt, mu],
                TRIALS,
                23,
            ),
        );
    }
}

#[test]
fn whole_autoencoder_matches_finite_differences() {
    let cfg = VggConfig { channels: 1, height: 16, width: 16, widths: [2, 2, 3, 3], embedding_dim: 3 };
    let model = CaeModel::vgg(&cfg, 7).unwrap();
    let x = uniform(&mut rng(24), &[3, 1, 16, 16], 0.0, 1.0);
    let arch = model.arch.clone();
    let mut store = ParamStore::default();
    let enc = Sequential::build("e", &arch.encoder, &mut store, 7);
    let dec = Sequential::build("d", &arch.decoder, &mut store, 7);
    let params: Vec<Tensor> = store.params.iter().map(|(_, t)| t.clone()).collect();
    let buffers = store.buffers.clone();
    // perturb only a handful of tensors: first conv, dense bottleneck, last conv
    let picks = [0usize, params.len() / 2, params.len() - 2];
    let worst = check_gradients(
        |g, v| {
            let mut bound: Vec<_> = params.iter().map(|t| g.constant(t.clone())).collect();
            for (slot, id) in picks.iter().zip(&v[1..]) {
                bound[*slot] = *id;
            }
            let mut buf = buffers.clone();
            let xn = v[0];
            let z = enc.forward(g, &bound, &mut buf, xn, Mode::Train)?;
            let r = dec.forward(g, &bound, &mut buf, z, Mode::Train)?;
            g.mse(r, xn)
        },
        &[x, params[picks[0]].clone(), params[picks[1]].clone(), params[picks[2]].clone()],
        TRIALS,
        25,
    );
    assert_fd("autoencoder mse", worst);
}

/// `<conv(x), y> == <x, conv_transpose(y)>` for a shared kernel.
#[test]
fn conv_transpose_is_the_adjoint_of_conv() {
    let mut r = rng(26);
    for (stride, pad, h) in [(1, 1, 6), (2, 1, 8), (2, 0, 7), (3, 2, 9)] {
        let x = uniform(&mut r, &[2, 3, h, h], -1.0, 1.0);
        let w = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let (xi, wi) = (g.constant(x.clone()), g.constant(w.clone()));
        let zero_out = g.constant(Tensor::zeros(&[4]));
        let cx = g.conv2d(xi, wi, zero_out, stride, pad).unwrap();
        let y = uniform(&mut r, g.value(cx).shape(), -1.0, 1.0);
        let oh = g.value(cx).shape()[2];
        // output padding recovers the rows the strided conv dropped
        let out_pad = h + 2 * pad - 3 - (oh - 1) * stride;
        let yi = g.constant(y.clone());
        let zero_in = g.constant(Tensor::zeros(&[3]));
        let ty = g.conv_transpose2d(yi, wi, zero_in, stride, pad, out_pad).unwrap();
        assert_eq!(g.value(ty).shape(), x.shape());
        let lhs = g.value(cx).dot(&y).unwrap();
        let rhs = x.dot(g.value(ty)).unwrap();
        assert!((lhs - rhs).abs() < 1e-8, "stride {stride}: {lhs} vs {rhs}");
    }
}

#[test]
fn batch_norm_output_is_standardized() {
    let mut r = rng(27);
    let x = uniform(&mut r, &[8, 3, 4, 4], -3.0, 5.0);
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let one = g.constant(Tensor::full(&[3], 1.0));
    let zero = g.constant(Tensor::zeros(&[3]));
    let (y, stats) = g.batch_norm(xi, one, zero, 1e-5, None).unwrap();
    let stats = stats.unwrap();
    let y = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..8).flat_map(|n| (0..16).map(move |s| (n, s))).map(|(n, s)| y.data()[(n * 3 + c) * 16 + s]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        let biased = stats.var[c] * (vals.len() - 1) as f64 / vals.len() as f64;
        assert!(m.abs() < 1e-12, "channel {c} mean {m}");
        assert!((v - biased / (biased + 1e-5)).abs() < 1e-12, "channel {c} variance {v}");
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn layer_specs_chain_through_sequential() {
    // every layer kind in one chain, checked end to end
    let specs = vec![
        LayerSpec::conv3x3(1, 2),
        LayerSpec::batch_norm(2),
        LayerSpec::Relu,
        LayerSpec::MaxPool { kernel: 2, stride: 2 },
        LayerSpec::upsample3x3(2, 2),
        LayerSpec::Sigmoid,
        LayerSpec::Flatten,
        LayerSpec::Dense { in_features: 2 * 8 * 8, out_features: 4 },
        LayerSpec::Reshape { shape: vec![1, 2, 2] },
    ];
    let mut store = ParamStore::default();
    let seq = Sequential::build("s", &specs, &mut store, 3);
    let x = uniform(&mut rng(28), &[2, 1, 8, 8], 0.0, 1.0);
    let params: Vec<Tensor> = store.params.iter().map(|(_, t)| t.clone()).collect();
    let buffers = store.buffers.clone();
    let worst = check_gradients(
        |g, v| {
            let bound: Vec<_> = v[1..].to_vec();
            let mut buf = buffers.clone();
            seq.forward(g, &bound, &mut buf, v[0], Mode::Train)
        },
        &std::iter::once(x).chain(params).collect::<Vec<_>>(),
        TRIALS,
        29,
    );
    assert_fd("sequential chain", worst);
}
