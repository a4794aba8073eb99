//! Convolutional autoencoder and its pretraining objectives.
//!
//! The encoder is four VGG blocks (`[conv, batch_norm, relu] × 2` then a
//! 2×2 max-pool) followed by a dense bottleneck; the decoder mirrors it with
//! stride-2 transposed convolutions and ends in a sigmoid. Pretraining
//! minimizes reconstruction MSE, optionally plus the consistency loss
//! between Student-t soft assignments of each image and a randomly
//! transformed copy of it.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_affine, draw_pair_transform, TransformKind, TransformSpec};
use crate::cluster::kmeans;
use crate::corpus::TrainingImage;
use crate::diffnum::weights::{self, WeightData, WeightEntry};
use crate::diffnum::{
    mean_abs_diff_value, mse_value, soft_assign_value, AdamState, Graph, LayerSpec, Mode, ParamStore,
    Sequential, Tensor,
};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Shape parameters of the VGG-style autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VggConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: [usize; 4],
    pub embedding_dim: usize,
}

impl Default for VggConfig {
    fn default() -> Self {
        Self { channels: 3, height: 64, width: 64, widths: [32, 64, 128, 256], embedding_dim: 10 }
    }
}

/// Layer chains and shapes of an autoencoder; stored alongside its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub embedding_dim: usize,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
}

impl ModelArch {
    pub fn vgg(cfg: &VggConfig) -> Result<Self> {
        if !cfg.height.is_multiple_of(16) || !cfg.width.is_multiple_of(16) || cfg.height == 0 || cfg.width == 0 {
            return Err(Error::invalid(format!(
                "input {}x{} must be a positive multiple of 16 in both dimensions",
                cfg.height, cfg.width
            )));
        }
        let [w1, w2, w3, w4] = cfg.widths;
        let mut encoder = Vec::new();
        let mut cin = cfg.channels;
        for w in cfg.widths {
            for c in [cin, w] {
                encoder.push(LayerSpec::conv3x3(c, w));
                encoder.push(LayerSpec::batch_norm(w));
                encoder.push(LayerSpec::Relu);
            }
            encoder.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
            cin = w;
        }
        let (bh, bw) = (cfg.height / 16, cfg.width / 16);
        let flat = w4 * bh * bw;
        encoder.push(LayerSpec::Flatten);
        encoder.push(LayerSpec::Dense { in_features: flat, out_features: cfg.embedding_dim });

        let mut decoder = vec![
            LayerSpec::Dense { in_features: cfg.embedding_dim, out_features: flat },
            LayerSpec::Reshape { shape: vec![w4, bh, bw] },
        ];
        for (cin, cout) in [(w4, w4), (w4, w3), (w3, w2), (w2, w1)] {
            decoder.push(LayerSpec::upsample3x3(cin, cout));
            decoder.push(LayerSpec::batch_norm(cout));
            decoder.push(LayerSpec::Relu);
        }
        decoder.push(LayerSpec::conv3x3(w1, cfg.channels));
        decoder.push(LayerSpec::Sigmoid);
        let arch = Self {
            input_shape: vec![cfg.channels, cfg.height, cfg.width],
            embedding_dim: cfg.embedding_dim,
            encoder,
            decoder,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Checks that the encoder yields `embedding_dim` features and the
    /// decoder maps them back to the input shape.
    pub fn validate(&self) -> Result<()> {
        let mut input = vec![1];
        input.extend(&self.input_shape);
        let z = self.encoder.iter().try_fold(input.clone(), |s, l| l.output_shape(&s))?;
        if z != [1, self.embedding_dim] {
            return Err(Error::shape("encoder output", &[1, self.embedding_dim], &z));
        }
        let back = self.decoder.iter().try_fold(z, |s, l| l.output_shape(&s))?;
        if back != input {
            return Err(Error::shape("decoder output", &input, &back));
        }
        Ok(())
    }
}

/// Cluster centers (one row per cluster) and the Student-t degree.
#[derive(Clone, Debug, PartialEq)]
pub struct CclCenters {
    pub centers: Tensor,
    pub alpha: f64,
}

impl CclCenters {
    pub fn new(centers: Tensor, alpha: f64) -> Result<Self> {
        if centers.shape().len() != 2 || centers.shape()[0] < 2 {
            return Err(Error::invalid(format!("need a K×d center matrix with K ≥ 2, got {:?}", centers.shape())));
        }
        if !centers.is_finite() {
            return Err(Error::Numeric("cluster centers contain non-finite values".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { centers, alpha })
    }

    pub fn k(&self) -> usize {
        self.centers.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaeModel {
    pub arch: ModelArch,
    pub(crate) encoder: Sequential,
    pub(crate) decoder: Sequential,
    pub store: ParamStore,
    encoder_params: usize,
}

const ARCH_ENTRY: &str = "meta.arch";
const CENTERS_ENTRY: &str = "clusters.centers";
const ALPHA_ENTRY: &str = "clusters.alpha";

impl CaeModel {
    pub fn new(arch: ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::default();
        let encoder = Sequential::build("encoder", &arch.encoder, &mut store, seed);
        let encoder_params = store.params.len();
        let decoder = Sequential::build("decoder", &arch.decoder, &mut store, seed);
        Ok(Self { arch, encoder, decoder, store, encoder_params })
    }

    pub fn vgg(cfg: &VggConfig, seed: u64) -> Result<Self> {
        Self::new(ModelArch::vgg(cfg)?, seed)
    }

    /// Indices of encoder tensors within `store.params`.
    pub fn encoder_params(&self) -> Range<usize> {
        0..self.encoder_params
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim
    }

    pub(crate) fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != self.arch.input_shape.len() + 1
            || batch.shape()[1..] != self.arch.input_shape[..]
            || batch.batch() == 0
        {
            let mut expected = vec![batch.batch().max(1)];
            expected.extend(&self.arch.input_shape);
            return Err(Error::shape("autoencoder input", &expected, batch.shape()));
        }
        Ok(())
    }

    /// Embeddings of a batch (eval mode).
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let mut buffers = self.store.buffers.clone();
        let x = g.constant(batch.clone());
        let z = self.encoder.forward(&mut g, &bound, &mut buffers, x, Mode::Eval)?;
        Ok(g.value(z).clone())
    }

    /// Reconstruction of a batch (eval mode).
    pub fn reconstruct(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let mut buffers = self.store.buffers.clone();
        let x = g.constant(batch.clone());
        let z = self.encoder.forward(&mut g, &bound, &mut buffers, x, Mode::Eval)?;
        let r = self.decoder.forward(&mut g, &bound, &mut buffers, z, Mode::Eval)?;
        Ok(g.value(r).clone())
    }

    /// Eval-mode embeddings of every image, in order, as an n×d matrix.
    pub fn embed_all(&self, images: &[TrainingImage], batch_size: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.embedding_dim());
        for chunk in images.chunks(batch_size.max(1)) {
            data.extend(self.encode(&stack_images(chunk)?)?.into_data());
        }
        Tensor::new(vec![images.len(), self.embedding_dim()], data)
    }

    pub fn to_entries(&self, centers: Option<&CclCenters>) -> Result<Vec<WeightEntry>> {
        let mut out = vec![WeightEntry::bytes(ARCH_ENTRY, serde_json::to_vec(&self.arch)?)];
        for (name, t) in self.store.params.iter().chain(&self.store.buffers) {
            out.push(WeightEntry::tensor(name.clone(), t.clone()));
        }
        if let Some(c) = centers {
            out.push(WeightEntry::tensor(CENTERS_ENTRY, c.centers.clone()));
            out.push(WeightEntry::tensor(ALPHA_ENTRY, Tensor::scalar(c.alpha)));
        }
        Ok(out)
    }

    pub fn from_entries(entries: &[WeightEntry]) -> Result<(Self, Option<CclCenters>)> {
        let missing = |name: &str| Error::Format { what: "weights", message: format!("missing entry `{name}`") };
        let find = |name: &str| entries.iter().find(|e| e.name == name);
        let arch: ModelArch = match find(ARCH_ENTRY).map(|e| &e.data) {
            Some(WeightData::Bytes(b)) => serde_json::from_slice(b)?,
            _ => return Err(missing(ARCH_ENTRY)),
        };
        let mut model = Self::new(arch, 0)?;
        let tensor_of = |name: &str| -> Result<Tensor> {
            match find(name).map(|e| &e.data) {
                Some(WeightData::F64(t)) => Ok(t.clone()),
                Some(WeightData::F32 { shape, data }) => {
                    Tensor::new(shape.clone(), data.iter().map(|v| *v as f64).collect())
                }
                _ => Err(missing(name)),
            }
        };
        for (name, t) in model.store.params.iter_mut().chain(model.store.buffers.iter_mut()) {
            let loaded = tensor_of(name)?;
            if loaded.shape() != t.shape() {
                return Err(Error::shape(format!("weights entry `{name}`"), t.shape(), loaded.shape()));
            }
            *t = loaded;
        }
        let centers = match find(CENTERS_ENTRY) {
            Some(_) => {
                let alpha = tensor_of(ALPHA_ENTRY)?.item().ok_or_else(|| missing(ALPHA_ENTRY))?;
                Some(CclCenters::new(tensor_of(CENTERS_ENTRY)?, alpha)?)
            }
            None => None,
        };
        Ok((model, centers))
    }

    pub fn save(&self, path: &Path, centers: Option<&CclCenters>) -> Result<()> {
        weights::save(path, &self.to_entries(centers)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<CclCenters>)> {
        Self::from_entries(&weights::load(path)?)
    }
}

pub(crate) fn stack_images(images: &[TrainingImage]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = images.iter().map(|i| &i.pixels).collect();
    Tensor::stack(&refs)
}

/// Mean of squared differences over every element.
pub fn mse_loss(x: &Tensor, reconstructed: &Tensor) -> Result<f64> {
    if x.shape() != reconstructed.shape() {
        return Err(Error::shape("mse_loss", x.shape(), reconstructed.shape()));
    }
    Ok(mse_value(x.data(), reconstructed.data()))
}

/// Row-normalized Student-t kernel between embeddings and centers.
pub fn soft_assign(z: &Tensor, centers: &CclCenters) -> Result<Tensor> {
    soft_assign_value(z, &centers.centers, centers.alpha)
}

/// `(1/(N·K)) Σ |p − pᵗ|` over an N×K pair of assignment matrices.
pub fn ccl_loss(p: &Tensor, p_transformed: &Tensor) -> Result<f64> {
    if p.shape() != p_transformed.shape() || p.shape().len() != 2 {
        return Err(Error::shape("ccl_loss", p.shape(), p_transformed.shape()));
    }
    Ok(mean_abs_diff_value(p.data(), p_transformed.data()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "mse+ccl")]
    MseCcl,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossMode::Mse),
            "mse+ccl" => Ok(LossMode::MseCcl),
            other => Err(Error::invalid(format!("unknown loss `{other}` (expected mse or mse+ccl)"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Mse => "mse",
            LossMode::MseCcl => "mse+ccl",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub loss: LossMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Share of epochs trained with MSE alone before centers are
    /// initialized by K-means.
    pub warmup_fraction: f64,
    pub clusters: usize,
    pub alpha: f64,
    /// Transforms that produce consistency partners.
    pub pair_specs: Vec<TransformSpec>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: LossMode::Mse,
            epochs: 500,
            batch_size: 16,
            lr: 0.001,
            seed: 0,
            warmup_fraction: 0.1,
            clusters: 10,
            alpha: 1.0,
            pair_specs: TransformSpec::standard_set(&TransformKind::ALL),
        }
    }
}

impl PretrainConfig {
    pub fn warmup_epochs(&self) -> usize {
        match self.loss {
            LossMode::Mse => self.epochs,
            LossMode::MseCcl => ((self.epochs as f64 * self.warmup_fraction).ceil() as usize).min(self.epochs),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub mse: f64,
    pub ccl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mse: f64,
    pub ccl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub steps: Vec<StepLoss>,
    pub history: Vec<EpochLoss>,
    pub centers: Option<CclCenters>,
}

/// Per-epoch mini-batches of indices, shuffled by a stream keyed on
/// `(seed, epoch)`.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Shuffle, epoch as u64, 0));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn gather(images: &[TrainingImage], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = idx.iter().map(|i| &images[*i].pixels).collect();
    Tensor::stack(&refs)
}

pub(crate) fn summarize(steps: &[StepLoss], epochs: usize) -> Vec<EpochLoss> {
    (0..epochs)
        .filter_map(|e| {
            let s: Vec<&StepLoss> = steps.iter().filter(|s| s.epoch == e).collect();
            if s.is_empty() {
                return None;
            }
            let n = s.len() as f64;
            Some(EpochLoss {
                epoch: e,
                mse: s.iter().map(|s| s.mse).sum::<f64>() / n,
                ccl: s.iter().map(|s| s.ccl).sum::<f64>() / n,
                total: s.iter().map(|s| s.total).sum::<f64>() / n,
            })
        })
        .collect()
}

/// Trains `model` in place with Adam.
///
/// In `mse+ccl` mode the first warmup epochs use MSE alone; centers are
/// then set by K-means on the current embeddings and optimized jointly with
/// the network. Each batch is concatenated with its freshly transformed
/// partners so both halves share batch-norm statistics, and gradients flow
/// through both branches of the consistency term.
pub fn pretrain(model: &mut CaeModel, data: &[TrainingImage], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("pretraining needs a non-empty dataset"));
    }
    if cfg.loss == LossMode::MseCcl {
        if cfg.pair_specs.is_empty() {
            return Err(Error::invalid("mse+ccl needs at least one transform to build consistency partners"));
        }
        if cfg.clusters < 2 {
            return Err(Error::invalid("mse+ccl needs at least 2 clusters"));
        }
    }
    let mut adam = AdamState::new(cfg.lr, model.store.tensors());
    let warmup = cfg.warmup_epochs();
    let mut centers: Option<CclCenters> = None;
    let mut center_adam: Option<AdamState> = None;
    let mut steps = Vec::new();

    for epoch in 0..cfg.epochs {
        if epoch == warmup && cfg.loss == LossMode::MseCcl {
            let z = model.embed_all(data, cfg.batch_size)?;
            let km = kmeans(&z, cfg.clusters, rng::stream_seed(cfg.seed, Stream::KMeans, 0, 0), 300)?;
            let c = CclCenters::new(km.centers, cfg.alpha)?;
            center_adam = Some(AdamState::new(cfg.lr, [&c.centers]));
            centers = Some(c);
        }
        for (step, idx) in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch).into_iter().enumerate() {
            let x = gather(data, &idx)?;
            let mut g = Graph::new();
            let bound = model.store.bind(&mut g);
            let xn = g.constant(x.clone());
            let (mse, ccl, total, mu) = match &centers {
                None => {
                    let z = model.encoder.forward(&mut g, &bound, &mut model.store.buffers, xn, Mode::Train)?;
                    let r = model.decoder.forward(&mut g, &bound, &mut model.store.buffers, z, Mode::Train)?;
                    let mse = g.mse(r, xn)?;
                    (mse, None, mse, None)
                }
                Some(c) => {
                    let partners = idx
                        .iter()
                        .map(|&i| {
                            let t = draw_pair_transform(data[i].sample_id, epoch as u64, cfg.seed, &cfg.pair_specs)?;
                            apply_affine(&data[i].pixels, t.kind, t.param)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let xt = g.constant(Tensor::stack(&partners.iter().collect::<Vec<_>>())?);
                    let both = g.concat(&[xn, xt])?;
                    let n = idx.len();
                    let z = model.encoder.forward(&mut g, &bound, &mut model.store.buffers, both, Mode::Train)?;
                    let z0 = g.slice(z, 0, n)?;
                    let zt = g.slice(z, n, n)?;
                    let r = model.decoder.forward(&mut g, &bound, &mut model.store.buffers, z0, Mode::Train)?;
                    let mse = g.mse(r, xn)?;
                    let mu = g.input(c.centers.clone());
                    let p = g.soft_assign(z0, mu, c.alpha)?;
                    let pt = g.soft_assign(zt, mu, c.alpha)?;
                    let ccl = g.mean_abs_diff(p, pt)?;
                    let total = g.add(mse, ccl)?;
                    (mse, Some(ccl), total, Some(mu))
                }
            };
            let record = StepLoss {
                epoch,
                step,
                mse: g.value(mse).data()[0],
                ccl: ccl.map_or(0.0, |c| g.value(c).data()[0]),
                total: g.value(total).data()[0],
            };
            if !record.total.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss diverged at epoch {epoch}, step {step}")));
            }
            g.backward(total)?;
            let grads: Vec<Tensor> = bound.iter().map(|b| g.grad(*b).expect("bound params are trainable")).collect();
            adam.step(model.store.params.iter_mut().map(|(_, t)| t), &grads)?;
            if let (Some(mu), Some(c), Some(ca)) = (mu, centers.as_mut(), center_adam.as_mut()) {
                let gmu = g.grad(mu).expect("centers are trainable");
                ca.step([&mut c.centers], &[gmu])?;
            }
            steps.push(record);
        }
    }
    let history = summarize(&steps, cfg.epochs);
    Ok(PretrainReport { steps, history, centers })
}

/// Writes `epoch,mse,ccl,total` rows.
pub fn write_loss_csv<W: Write>(history: &[EpochLoss], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,mse,ccl,total")?;
    for h in history {
        writeln!(out, "{},{:?},{:?},{:?}", h.epoch, h.mse, h.ccl, h.total)?;
    }
    Ok(())
}
