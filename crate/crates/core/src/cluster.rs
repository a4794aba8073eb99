//! K-means and DEC/IDEC fine-tuning on top of a pretrained autoencoder.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_affine, draw_pair_transform, TransformSpec};
use crate::cae::{epoch_batches, gather, CaeModel, CclCenters};
use crate::corpus::TrainingImage;
use crate::diffnum::{kl_value, soft_assign_value, AdamState, Graph, Mode, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Independent k-means++ restarts per call; the lowest inertia wins.
pub const KMEANS_RESTARTS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centers: Tensor,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn distinct_rows(points: &Tensor) -> usize {
    let mut rows: Vec<Vec<u64>> =
        (0..points.batch()).map(|i| points.row(i).iter().map(|v| (v + 0.0).to_bits()).collect()).collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

/// Lloyd's algorithm from k-means++ seeding, best of [`KMEANS_RESTARTS`].
///
/// A cluster that loses all its points is re-seeded at the point farthest
/// from its current center.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    if points.shape().len() != 2 || points.batch() == 0 {
        return Err(Error::invalid(format!("kmeans needs a non-empty n×d matrix, got {:?}", points.shape())));
    }
    if !points.is_finite() {
        return Err(Error::Numeric("kmeans input contains non-finite values".into()));
    }
    if k == 0 {
        return Err(Error::invalid("kmeans needs k ≥ 1"));
    }
    let distinct = distinct_rows(points);
    if k > distinct {
        return Err(Error::invalid(format!("k = {k} exceeds the {distinct} distinct points")));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let run = lloyd(points, k, seed, restart as u64, max_iter.max(1));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(points: &Tensor, k: usize, seed: u64, restart: u64, max_iter: usize) -> KMeansResult {
    let n = points.batch();
    let d = points.row_len();
    let mut r = rng::stream(seed, rng::Stream::KMeans, restart, 1);

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![points.row(r.random_range(0..n)).to_vec()];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let mut target = r.random_range(0.0..1.0) * total;
        let mut pick = None;
        for (i, w) in dist.iter().enumerate() {
            if *w > 0.0 {
                pick = Some(i);
                if target < *w {
                    break;
                }
                target -= w;
            }
        }
        let c = points.row(pick.expect("k ≤ distinct points leaves a positive distance")).to_vec();
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(points.row(i), &c));
        }
        centers.push(c);
    }

    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (j, dd) = nearest(points.row(i), &centers);
            changed |= *a != j;
            *a = j;
            inertia += dd;
        }
        history.push(inertia);
        if !changed || iterations == max_iter {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            sums[a].iter_mut().zip(points.row(i)).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), &centers[assignments[a]]);
                        let db = sq_dist(points.row(b), &centers[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centers[j] = points.row(far).to_vec();
                counts[j] = 1;
            }
        }
    }
    let inertia = *history.last().expect("one assignment step");
    KMeansResult {
        centers: Tensor::new(vec![k, d], centers.concat()).expect("k×d"),
        assignments,
        inertia,
        iterations,
        inertia_history: history,
    }
}

fn check_stochastic(p: &Tensor, what: &str) -> Result<(usize, usize)> {
    let &[n, k] = p.shape() else {
        return Err(Error::invalid(format!("{what} must be an N×K matrix, got {:?}", p.shape())));
    };
    for i in 0..n {
        let row = p.row(i);
        let s: f64 = row.iter().sum();
        if row.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("{what} row {i} is not a probability vector")));
        }
    }
    Ok((n, k))
}

/// Sharpened, frequency-normalized targets:
/// `t_ik ∝ p_ik² / f_k` with `f_k = Σ_i p_ik`.
pub fn target_distribution(p: &Tensor) -> Result<Tensor> {
    let (n, k) = check_stochastic(p, "assignment matrix")?;
    let mut f = vec![0.0; k];
    for i in 0..n {
        f.iter_mut().zip(p.row(i)).for_each(|(f, v)| *f += v);
    }
    if let Some(j) = f.iter().position(|v| *v <= 0.0) {
        return Err(Error::Numeric(format!("soft cluster {j} is empty; target distribution undefined")));
    }
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let w: Vec<f64> = p.row(i).iter().zip(&f).map(|(p, f)| p * p / f).collect();
        let s: f64 = w.iter().sum();
        out.extend(w.iter().map(|v| v / s));
    }
    Tensor::new(vec![n, k], out)
}

/// `Σ_i Σ_k t_ik ln(t_ik / p_ik)` with `0·ln(0/·) = 0`.
///
/// Rounding can leave a sum of order 1e-17 below zero when `T ≈ P`; the
/// result is clamped at 0.
pub fn kl_loss(target: &Tensor, p: &Tensor) -> Result<f64> {
    check_stochastic(target, "target distribution")?;
    check_stochastic(p, "assignment matrix")?;
    if target.shape() != p.shape() {
        return Err(Error::shape("kl_loss", target.shape(), p.shape()));
    }
    Ok(kl_value(target, p)?.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMethod {
    Dec,
    Idec,
}

impl std::str::FromStr for FinetuneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dec" => Ok(FinetuneMethod::Dec),
            "idec" => Ok(FinetuneMethod::Idec),
            other => Err(Error::invalid(format!("unknown method `{other}` (expected dec or idec)"))),
        }
    }
}

impl std::fmt::Display for FinetuneMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FinetuneMethod::Dec => "dec",
            FinetuneMethod::Idec => "idec",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub method: FinetuneMethod,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs between target refreshes; `None` never refreshes after the
    /// initial target.
    pub refresh_interval: Option<usize>,
    /// Weight of the KL term in IDEC.
    pub gamma: f64,
    /// Stop once fewer than this fraction of samples change cluster
    /// between consecutive refreshes.
    pub tolerance: f64,
    pub seed: u64,
    pub clusters: usize,
    pub alpha: f64,
    /// When non-empty, adds the consistency term between each batch and
    /// transformed partners drawn from these specs.
    pub consistency: Vec<TransformSpec>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            method: FinetuneMethod::Dec,
            epochs: 2000,
            batch_size: 16,
            lr: 0.001,
            refresh_interval: Some(5),
            gamma: 0.1,
            tolerance: 0.001,
            seed: 0,
            clusters: 10,
            alpha: 1.0,
            consistency: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refresh {
    pub epoch: usize,
    pub assignments: Vec<usize>,
    /// Fraction of samples whose assignment differs from the previous
    /// refresh (0 for the first).
    pub changed: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneStep {
    pub epoch: usize,
    pub step: usize,
    pub kl: f64,
    pub mse: f64,
    pub ccl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub centers: CclCenters,
    pub history: Vec<Refresh>,
    pub steps: Vec<FinetuneStep>,
    pub stopped_early: bool,
    /// Assignments of the data under the final encoder and centers.
    pub assignments: Vec<usize>,
}

/// Hard assignments (row argmax, first maximum wins).
pub fn argmax_rows(p: &Tensor) -> Vec<usize> {
    (0..p.batch())
        .map(|i| {
            p.row(i).iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, v)| if *v > b.1 { (j, *v) } else { b }).0
        })
        .collect()
}

/// Soft assignments of every image under the current encoder.
pub fn assign_all(model: &CaeModel, centers: &CclCenters, data: &[TrainingImage], batch_size: usize) -> Result<Tensor> {
    let z = model.embed_all(data, batch_size)?;
    soft_assign_value(&z, &centers.centers, centers.alpha)
}

fn changed_fraction(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len().max(1) as f64
}

/// DEC / IDEC fine-tuning of `model` in place.
///
/// DEC minimizes `KL(T‖P)` over encoder weights and centers; IDEC adds the
/// reconstruction MSE (`MSE + γ·KL`) and keeps training the decoder. The KL
/// term is averaged over the batch. Targets are recomputed on the whole
/// dataset every `refresh_interval` epochs and held fixed in between.
/// Batch norm runs on its running statistics throughout, so targets and
/// training see the same network.
pub fn finetune(
    model: &mut CaeModel,
    centers: Option<CclCenters>,
    data: &[TrainingImage],
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    if data.is_empty() {
        return Err(Error::invalid("fine-tuning needs a non-empty dataset"));
    }
    if !(cfg.gamma >= 0.0) || !(0.0..1.0).contains(&cfg.tolerance) {
        return Err(Error::invalid(format!(
            "gamma must be ≥ 0 and tolerance in [0, 1), got {} and {}",
            cfg.gamma, cfg.tolerance
        )));
    }
    if cfg.refresh_interval == Some(0) {
        return Err(Error::invalid("refresh interval must be positive"));
    }
    let mut centers = match centers {
        Some(c) => c,
        None => {
            let z = model.embed_all(data, cfg.batch_size)?;
            let km = kmeans(&z, cfg.clusters, rng::stream_seed(cfg.seed, rng::Stream::KMeans, 1, 0), 300)?;
            CclCenters::new(km.centers, cfg.alpha)?
        }
    };
    let trained = match cfg.method {
        FinetuneMethod::Dec => model.encoder_params(),
        FinetuneMethod::Idec => 0..model.store.params.len(),
    };
    let mut adam = AdamState::new(cfg.lr, model.store.params[trained.clone()].iter().map(|(_, t)| t));
    let mut center_adam = AdamState::new(cfg.lr, [&centers.centers]);

    let p0 = assign_all(model, &centers, data, cfg.batch_size)?;
    let mut target = target_distribution(&p0)?;
    let mut history = vec![Refresh { epoch: 0, assignments: argmax_rows(&p0), changed: 0.0 }];
    let mut steps = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.refresh_interval.is_some_and(|r| epoch % r == 0) {
            let p = assign_all(model, &centers, data, cfg.batch_size)?;
            let assignments = argmax_rows(&p);
            let changed = changed_fraction(&assignments, &history.last().expect("initial refresh").assignments);
            history.push(Refresh { epoch, assignments, changed });
            if changed < cfg.tolerance {
                stopped_early = true;
                break;
            }
            target = target_distribution(&p)?;
        }
        for (step, idx) in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch).into_iter().enumerate() {
            let n = idx.len();
            let x = gather(data, &idx)?;
            let t_rows: Vec<f64> = idx.iter().flat_map(|&i| target.row(i).to_vec()).collect();
            let t_batch = Tensor::new(vec![n, centers.k()], t_rows)?;

            let mut g = Graph::new();
            let bound: Vec<_> = model
                .store
                .params
                .iter()
                .enumerate()
                .map(|(i, (_, t))| if trained.contains(&i) { g.input(t.clone()) } else { g.constant(t.clone()) })
                .collect();
            let buffers = &mut model.store.buffers;
            let xn = g.constant(x);
            let mu = g.input(centers.centers.clone());
            let (z, zt) = if cfg.consistency.is_empty() {
                (model.encoder.forward(&mut g, &bound, buffers, xn, Mode::Eval)?, None)
            } else {
                let partners = idx
                    .iter()
                    .map(|&i| {
                        let t = draw_pair_transform(data[i].sample_id, epoch as u64, cfg.seed, &cfg.consistency)?;
                        apply_affine(&data[i].pixels, t.kind, t.param)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let xt = g.constant(Tensor::stack(&partners.iter().collect::<Vec<_>>())?);
                let both = g.concat(&[xn, xt])?;
                let z = model.encoder.forward(&mut g, &bound, buffers, both, Mode::Eval)?;
                (g.slice(z, 0, n)?, Some(g.slice(z, n, n)?))
            };
            let p = g.soft_assign(z, mu, centers.alpha)?;
            let kl_sum = g.kl_div(&t_batch, p)?;
            let kl = g.scale(kl_sum, 1.0 / n as f64)?;
            let mut total = match cfg.method {
                FinetuneMethod::Dec => kl,
                FinetuneMethod::Idec => {
                    let r = model.decoder.forward(&mut g, &bound, buffers, z, Mode::Eval)?;
                    let mse = g.mse(r, xn)?;
                    let weighted = g.scale(kl, cfg.gamma)?;
                    g.add(mse, weighted)?
                }
            };
            let mse_value = match cfg.method {
                FinetuneMethod::Dec => 0.0,
                FinetuneMethod::Idec => g.value(total).data()[0] - cfg.gamma * g.value(kl).data()[0],
            };
            let mut ccl_value = 0.0;
            if let Some(zt) = zt {
                let pt = g.soft_assign(zt, mu, centers.alpha)?;
                let ccl = g.mean_abs_diff(p, pt)?;
                ccl_value = g.value(ccl).data()[0];
                total = g.add(total, ccl)?;
            }
            let record = FinetuneStep {
                epoch,
                step,
                kl: g.value(kl).data()[0],
                mse: mse_value,
                ccl: ccl_value,
                total: g.value(total).data()[0],
            };
            if !record.total.is_finite() {
                return Err(Error::Numeric(format!("fine-tuning loss diverged at epoch {epoch}, step {step}")));
            }
            g.backward(total)?;
            let grads: Vec<Tensor> = trained.clone().map(|i| g.grad(bound[i]).expect("trainable")).collect();
            adam.step(model.store.params[trained.clone()].iter_mut().map(|(_, t)| t), &grads)?;
            center_adam.step([&mut centers.centers], &[g.grad(mu).expect("trainable")])?;
            steps.push(record);
        }
    }
    let p = assign_all(model, &centers, data, cfg.batch_size)?;
    Ok(FinetuneReport { centers, history, steps, stopped_early, assignments: argmax_rows(&p) })
}

/// Writes `epoch,sample_index,cluster` rows for every refresh.
pub fn write_assignment_csv<W: Write>(history: &[Refresh], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,sample_index,cluster")?;
    for r in history {
        for (i, a) in r.assignments.iter().enumerate() {
            writeln!(out, "{},{},{}", r.epoch, i, a)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn separated_duplicates() {
        let mut rows = vec![[0.0, 0.0]; 5];
        rows.extend(vec![[10.0, 10.0]; 5]);
        let r = kmeans(&pts(&rows), 2, 3, 100).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut c: Vec<Vec<f64>> = (0..2).map(|i| r.centers.row(i).to_vec()).collect();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let p = pts(&[[0.0, 1.0], [2.0, 3.0], [5.0, -1.0], [0.5, 0.5]]);
        assert_eq!(kmeans(&p, 4, 0, 50).unwrap().inertia, 0.0);
    }

    #[test]
    fn too_many_clusters_rejected() {
        let p = pts(&[[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]);
        assert!(kmeans(&p, 3, 0, 10).is_err());
    }

    #[test]
    fn target_hand_values() {
        let p = Tensor::new(vec![2, 2], vec![0.8, 0.2, 0.6, 0.4]).unwrap();
        let t = target_distribution(&p).unwrap();
        // f = [1.4, 0.6]; row 0 weights [0.64/1.4, 0.04/0.6]
        let (a, b) = (0.64 / 1.4, 0.04 / 0.6);
        assert!((t.data()[0] - a / (a + b)).abs() < 1e-15);
        assert!((t.data()[0] - 0.8727).abs() < 1e-4);
        assert!((t.data()[1] - 0.1273).abs() < 1e-4);
    }

    #[test]
    fn target_fixed_points() {
        let onehot = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(target_distribution(&onehot).unwrap(), onehot);
        let uniform = Tensor::full(&[4, 3], 1.0 / 3.0);
        let t = target_distribution(&uniform).unwrap();
        assert!(t.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let empty = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(target_distribution(&empty).is_err());
    }

    #[test]
    fn kl_hand_values() {
        let t = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let p = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!((kl_loss(&t, &p).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_loss(&p, &p).unwrap(), 0.0);
        let zero = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(kl_loss(&t, &zero).is_err());
    }
}
