#![allow(dead_code)]

use std::io::Read;
use std::path::Path;

use deepclust::{Graph, NodeId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values in ±[gap, 1], far from zero so ReLU-like kinks are not crossed
/// by a finite-difference step.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(gap..1.0);
            if r.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Magnitude below which the relative error is measured against this floor.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Builds `f(inputs)` on a fresh graph and reduces it to a scalar by a
/// fixed random projection when it is not one already.
fn eval<F>(f: &F, inputs: &[Tensor], proj: &mut Option<Tensor>, grads: bool) -> (f64, Vec<Tensor>)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &ids).unwrap();
    let loss = if g.value(out).len() == 1 {
        out
    } else {
        let shape = g.value(out).shape().to_vec();
        let p = proj.get_or_insert_with(|| uniform(&mut rng(0xfeed), &shape, -1.0, 1.0)).clone();
        let c = g.constant(p);
        g.dot(out, c).unwrap()
    };
    let value = g.value(loss).data()[0];
    if !grads {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    (value, ids.iter().map(|i| g.grad(*i).unwrap()).collect())
}

/// Compares analytic gradients with central differences on `trials`
/// random coordinates of every input. Returns the worst relative error.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], trials: usize, seed: u64) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut proj = None;
    let (_, analytic) = eval(&f, inputs, &mut proj, true);
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for _ in 0..trials {
            let i = r.random_range(0..input.len());
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&f, &plus, &mut proj, false).0 - eval(&f, &minus, &mut proj, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    worst
}

/// Scikit-learn's 8×8 handwritten digits: 1797 images, pixels 0..16.
pub fn digits() -> Vec<(Vec<u8>, usize)> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/digits.csv.gz");
    let mut text = String::new();
    flate2::read::GzDecoder::new(std::fs::File::open(path).unwrap()).read_to_string(&mut text).unwrap();
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<u8> = l.split(',').map(|x| x.trim().parse::<f64>().unwrap() as u8).collect();
            (v[..64].to_vec(), v[64] as usize)
        })
        .collect()
}

/// Writes the first `per_class` digits of each class as 8-bit grayscale PNGs
/// under `root/<digit>/<index>.png`.
pub fn write_digit_tree(root: &Path, per_class: usize) {
    let mut counts = [0usize; 10];
    for (i, (px, label)) in digits().into_iter().enumerate() {
        if counts[label] == per_class {
            continue;
        }
        counts[label] += 1;
        let dir = root.join(format!("digit{label}"));
        std::fs::create_dir_all(&dir).unwrap();
        let bytes: Vec<u8> = px.iter().map(|v| ((*v as f64) * 255.0 / 16.0).round() as u8).collect();
        image::GrayImage::from_raw(8, 8, bytes).unwrap().save(dir.join(format!("{i:04}.png"))).unwrap();
    }
}

/// Best accuracy over every injective map from clusters to classes.
pub fn brute_acc(y: &[usize], c: &[usize]) -> f64 {
    let ny = y.iter().max().unwrap() + 1;
    let nc = c.iter().max().unwrap() + 1;
    let slots = ny.max(nc);
    let mut best = 0;
    let mut perm: Vec<usize> = (0..slots).collect();
    permutations(&mut perm, 0, &mut |m| {
        let hits = y.iter().zip(c).filter(|(a, b)| m[**b] == **a).count();
        best = best.max(hits);
    });
    best as f64 / y.len() as f64
}

/// Calls `visit` with every permutation of `v[k..]` (Heap-free recursion).
pub fn permutations(v: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, visit);
        v.swap(k, i);
    }
}

pub fn brute_assignment(cost: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    let mut perm: Vec<usize> = (0..cost.len()).collect();
    permutations(&mut perm, 0, &mut |p| {
        let s: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        best = best.min(s);
    });
    best
}

/// Random row-stochastic matrix with strictly positive entries.
pub fn stochastic(r: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| r.random_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![n, k], data).unwrap()
}
