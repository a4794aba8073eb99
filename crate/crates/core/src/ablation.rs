//! Declarative experiment grids: pretrain, optionally fine-tune, evaluate on
//! the original images, and aggregate over seeds.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{TransformKind, TransformSpec};
use crate::cae::{pretrain, write_loss_csv, CaeModel, LossMode, PretrainConfig, VggConfig};
use crate::cluster::{argmax_rows, assign_all, finetune, kmeans, write_assignment_csv, FinetuneConfig, FinetuneMethod};
use crate::corpus::{training_view, DatasetManifest, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Scores};
use crate::rng::{self, Stream};

pub const DESK_CAE_EPOCHS: usize = 50;
pub const DESK_FINETUNE_EPOCHS: usize = 100;
pub const FULL_CAE_EPOCHS: usize = 500;
pub const FULL_FINETUNE_EPOCHS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StagePlan {
    CaeOnly,
    CaeDec,
    CaeIdec,
}

impl StagePlan {
    pub fn method(self) -> Option<FinetuneMethod> {
        match self {
            StagePlan::CaeOnly => None,
            StagePlan::CaeDec => Some(FinetuneMethod::Dec),
            StagePlan::CaeIdec => Some(FinetuneMethod::Idec),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StagePlan::CaeOnly => "cae-only",
            StagePlan::CaeDec => "cae-dec",
            StagePlan::CaeIdec => "cae-idec",
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    0.001
}
fn default_clusters() -> usize {
    10
}
fn default_gamma() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    1.0
}
fn default_embedding() -> usize {
    10
}
fn default_widths() -> [usize; 4] {
    [32, 64, 128, 256]
}
fn default_refresh() -> Option<usize> {
    Some(5)
}
fn default_tolerance() -> f64 {
    0.001
}
fn default_warmup() -> f64 {
    0.1
}

/// One cell of a grid. Omitted hyperparameters take their defaults; omitted
/// epoch counts follow the desk or full-scale preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Path of the dataset manifest.
    pub corpus: PathBuf,
    /// Transform kinds available to augmented stages and to consistency
    /// partners.
    pub augmentation: Vec<TransformKind>,
    pub loss: LossMode,
    pub plan: StagePlan,
    /// Pretraining sees augmented images (Aug) or originals only (WAug).
    #[serde(default)]
    pub cae_aug: bool,
    #[serde(default)]
    pub finetune_aug: bool,
    /// Adds the consistency term to fine-tuning.
    #[serde(default)]
    pub finetune_ccl: bool,
    #[serde(default)]
    pub cae_epochs: Option<usize>,
    #[serde(default)]
    pub finetune_epochs: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_embedding")]
    pub embedding_dim: usize,
    #[serde(default = "default_widths")]
    pub widths: [usize; 4],
    #[serde(default = "default_refresh")]
    pub refresh_interval: Option<usize>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// A cell with every optional field at its default.
    pub fn new(name: impl Into<String>, corpus: impl Into<PathBuf>, loss: LossMode, plan: StagePlan) -> Self {
        Self {
            name: name.into(),
            corpus: corpus.into(),
            augmentation: TransformKind::ALL.to_vec(),
            loss,
            plan,
            cae_aug: false,
            finetune_aug: false,
            finetune_ccl: false,
            cae_epochs: None,
            finetune_epochs: None,
            batch_size: default_batch(),
            lr: default_lr(),
            clusters: default_clusters(),
            gamma: default_gamma(),
            alpha: default_alpha(),
            embedding_dim: default_embedding(),
            widths: default_widths(),
            refresh_interval: default_refresh(),
            tolerance: default_tolerance(),
            warmup_fraction: default_warmup(),
            seeds: default_seeds(),
        }
    }

    /// Fills unset epoch counts from the preset.
    pub fn resolved(&self, paper_scale: bool) -> Self {
        let mut c = self.clone();
        let (cae, ft) =
            if paper_scale { (FULL_CAE_EPOCHS, FULL_FINETUNE_EPOCHS) } else { (DESK_CAE_EPOCHS, DESK_FINETUNE_EPOCHS) };
        c.cae_epochs.get_or_insert(cae);
        c.finetune_epochs.get_or_insert(ft);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid(format!("cell `{}` lists no seeds", self.name)));
        }
        if (self.cae_aug || self.finetune_aug || self.loss == LossMode::MseCcl || self.finetune_ccl)
            && self.augmentation.is_empty()
        {
            return Err(Error::invalid(format!(
                "cell `{}` uses augmented data or the consistency loss but lists no transforms",
                self.name
            )));
        }
        if !(self.gamma >= 0.0) || !(0.0..1.0).contains(&self.tolerance) {
            return Err(Error::invalid(format!("cell `{}`: gamma must be ≥ 0 and tolerance in [0, 1)", self.name)));
        }
        Ok(())
    }

    /// Hex SHA-256 over every field except the display name, with epochs
    /// resolved by the caller.
    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.name.clear();
        let mut kinds: Vec<TransformKind> = keyed.augmentation.clone();
        kinds.sort();
        kinds.dedup();
        keyed.augmentation = kinds;
        let bytes = serde_json::to_vec(&keyed).expect("config serializes");
        Sha256::digest(&bytes).iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn vgg(&self, manifest: &DatasetManifest) -> VggConfig {
        VggConfig {
            channels: manifest.channels,
            height: manifest.resolution[0],
            width: manifest.resolution[1],
            widths: self.widths,
            embedding_dim: self.embedding_dim,
        }
    }

    fn pair_specs(&self) -> Vec<TransformSpec> {
        TransformSpec::standard_set(&self.augmentation)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub cells: Vec<ExperimentConfig>,
}

impl Grid {
    /// Reads a grid file; relative corpus paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut grid: Grid = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for c in &mut grid.cells {
            if c.corpus.is_relative() {
                c.corpus = base.join(&c.corpus);
            }
        }
        Ok(grid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Scores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Partial,
    Failed,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Partial => "partial",
            CellStatus::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedResult>,
    /// Over successful seeds.
    pub mean: Option<Scores>,
    /// Sample standard deviation over successful seeds (0 for one seed).
    pub std: Option<Scores>,
    pub wall_clock_secs: f64,
    pub status: CellStatus,
    /// Number of images scored, and whether that set was exactly the
    /// manifest's originals.
    pub evaluated_samples: usize,
    pub evaluated_originals_only: bool,
}

impl ResultRow {
    pub fn metric(&self, seed_scores: impl Fn(&Scores) -> f64) -> Vec<f64> {
        self.per_seed.iter().filter_map(|s| s.scores.as_ref().map(&seed_scores)).collect()
    }
}

fn aggregate(scores: &[Scores]) -> (Option<Scores>, Option<Scores>) {
    if scores.is_empty() {
        return (None, None);
    }
    let n = scores.len() as f64;
    let stat = |f: fn(&Scores) -> f64| {
        let m = scores.iter().map(f).sum::<f64>() / n;
        let var = if scores.len() > 1 { scores.iter().map(|s| (f(s) - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        (m, var.sqrt())
    };
    let (a, sa) = stat(|s| s.acc);
    let (b, sb) = stat(|s| s.nmi);
    let (c, sc) = stat(|s| s.ari);
    (Some(Scores { acc: a, nmi: b, ari: c }), Some(Scores { acc: sa, nmi: sb, ari: sc }))
}

/// A loaded corpus shared by the cells that reference it.
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub samples: Vec<SampleRecord>,
}

impl Corpus {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let samples = manifest.load_samples()?;
        Ok(Self { manifest, samples })
    }

    fn select(&self, aug: bool, kinds: &[TransformKind]) -> Result<Vec<&SampleRecord>> {
        if aug {
            let present = self.manifest.kinds_present();
            if let Some(k) = kinds.iter().find(|k| !present.contains(k)) {
                return Err(Error::invalid(format!(
                    "corpus has no `{k}` augmented samples; run `deepclust augment` with that transform"
                )));
            }
        }
        Ok(self
            .samples
            .iter()
            .filter(|s| s.transform.is_none_or(|t| aug && kinds.contains(&t.kind)))
            .collect())
    }
}

fn run_seed(cfg: &ExperimentConfig, corpus: &Corpus, seed: u64, dir: Option<&Path>) -> Result<(Scores, Vec<u64>)> {
    let stage = |name: &'static str| move |e: Error| Error::invalid(format!("{name} stage: {e}"));
    let originals = corpus.select(false, &[])?;
    let eval_view = training_view(originals.iter().copied());
    let truth: Vec<usize> = originals.iter().map(|s| s.class_label).collect();

    let cae_data = training_view(corpus.select(cfg.cae_aug, &cfg.augmentation)?);
    let mut model = CaeModel::vgg(&cfg.vgg(&corpus.manifest), rng::stream_seed(seed, Stream::Init, 0, 0))?;
    let pre = PretrainConfig {
        loss: cfg.loss,
        epochs: cfg.cae_epochs.unwrap_or(DESK_CAE_EPOCHS),
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed,
        warmup_fraction: cfg.warmup_fraction,
        clusters: cfg.clusters,
        alpha: cfg.alpha,
        pair_specs: cfg.pair_specs(),
    };
    let report = pretrain(&mut model, &cae_data, &pre).map_err(stage("pretrain"))?;
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let f = d.join("pretrain_loss.csv");
        let file = std::fs::File::create(&f).map_err(|e| Error::io(&f, e))?;
        write_loss_csv(&report.history, std::io::BufWriter::new(file)).map_err(|e| Error::io(&f, e))?;
    }

    let predicted = match cfg.plan.method() {
        None => {
            let z = model.embed_all(&eval_view, cfg.batch_size)?;
            let km = kmeans(&z, cfg.clusters, rng::stream_seed(seed, Stream::KMeans, 2, 0), 300).map_err(stage("evaluate"))?;
            if let Some(d) = dir {
                model.save(&d.join("model.dclw"), report.centers.as_ref())?;
            }
            km.assignments
        }
        Some(method) => {
            let ft_data = training_view(corpus.select(cfg.finetune_aug, &cfg.augmentation)?);
            let ft = FinetuneConfig {
                method,
                epochs: cfg.finetune_epochs.unwrap_or(DESK_FINETUNE_EPOCHS),
                batch_size: cfg.batch_size,
                lr: cfg.lr,
                refresh_interval: cfg.refresh_interval,
                gamma: cfg.gamma,
                tolerance: cfg.tolerance,
                seed,
                clusters: cfg.clusters,
                alpha: cfg.alpha,
                consistency: if cfg.finetune_ccl { cfg.pair_specs() } else { Vec::new() },
            };
            let out = finetune(&mut model, None, &ft_data, &ft).map_err(stage("finetune"))?;
            if let Some(d) = dir {
                model.save(&d.join("model.dclw"), Some(&out.centers))?;
                let f = d.join("assignments.csv");
                let file = std::fs::File::create(&f).map_err(|e| Error::io(&f, e))?;
                write_assignment_csv(&out.history, std::io::BufWriter::new(file)).map_err(|e| Error::io(&f, e))?;
            }
            argmax_rows(&assign_all(&model, &out.centers, &eval_view, cfg.batch_size)?)
        }
    };
    if let Some(d) = dir {
        let text: String = predicted.iter().map(|p| format!("{p}\n")).collect();
        let f = d.join("predictions.csv");
        std::fs::write(&f, text).map_err(|e| Error::io(&f, e))?;
    }
    let ids = originals.iter().map(|s| s.sample_id).collect();
    Ok((evaluate(&truth, &predicted)?, ids))
}

/// Runs every seed of one cell. A failing seed is recorded and the rest
/// still run. Artifacts go under `dir/seed-<n>/` when a directory is given.
pub fn run_cell(cfg: &ExperimentConfig, corpus: &Corpus, dir: Option<&Path>) -> Result<ResultRow> {
    cfg.validate()?;
    let start = Instant::now();
    let expected: BTreeSet<u64> =
        corpus.manifest.samples.iter().filter(|s| s.transform.is_none()).map(|s| s.sample_id).collect();
    let mut per_seed = Vec::new();
    let mut audit = true;
    let mut evaluated = 0;
    for &seed in &cfg.seeds {
        let seed_dir = dir.map(|d| d.join(format!("seed-{seed}")));
        match run_seed(cfg, corpus, seed, seed_dir.as_deref()) {
            Ok((scores, ids)) => {
                evaluated = ids.len();
                audit &= ids.len() == expected.len() && ids.iter().all(|i| expected.contains(i));
                per_seed.push(SeedResult { seed, scores: Some(scores), error: None });
            }
            Err(e) => per_seed.push(SeedResult { seed, scores: None, error: Some(e.to_string()) }),
        }
    }
    let ok: Vec<Scores> = per_seed.iter().filter_map(|s| s.scores).collect();
    let status = match ok.len() {
        0 => CellStatus::Failed,
        n if n == per_seed.len() => CellStatus::Ok,
        _ => CellStatus::Partial,
    };
    let (mean, std) = aggregate(&ok);
    Ok(ResultRow {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        per_seed,
        mean,
        std,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        status,
        evaluated_samples: evaluated,
        evaluated_originals_only: audit && !ok.is_empty(),
    })
}

/// Aug-minus-WAug difference of mean metrics between two pretraining arms
/// that agree on every other field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub with_aug: String,
    pub without_aug: String,
    pub loss: LossMode,
    pub plan: StagePlan,
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub paper_scale: bool,
    pub rows: Vec<ResultRow>,
    pub deltas: Vec<Delta>,
}

pub fn deltas(rows: &[ResultRow]) -> Vec<Delta> {
    let key = |c: &ExperimentConfig| {
        let mut k = c.clone();
        k.name.clear();
        k.cae_aug = false;
        k
    };
    let mut out = Vec::new();
    for aug in rows.iter().filter(|r| r.config.cae_aug) {
        let Some(waug) = rows.iter().find(|r| !r.config.cae_aug && key(&r.config) == key(&aug.config)) else {
            continue;
        };
        if let (Some(a), Some(w)) = (aug.mean, waug.mean) {
            out.push(Delta {
                with_aug: aug.name.clone(),
                without_aug: waug.name.clone(),
                loss: aug.config.loss,
                plan: aug.config.plan,
                acc: a.acc - w.acc,
                nmi: a.nmi - w.nmi,
                ari: a.ari - w.ari,
            });
        }
    }
    out
}

/// Runs a grid under `out`, reusing `out/cells/<hash>/row.json` for cells
/// already completed. `on_cell` sees each row and whether it was reused.
pub fn run_grid(
    grid: &Grid,
    out: &Path,
    paper_scale: bool,
    mut on_cell: impl FnMut(&ResultRow, bool),
) -> Result<Report> {
    let mut corpora: HashMap<PathBuf, Corpus> = HashMap::new();
    let mut rows = Vec::new();
    for cell in &grid.cells {
        let cfg = cell.resolved(paper_scale);
        cfg.validate()?;
        let dir = out.join("cells").join(cfg.hash());
        let row_path = dir.join("row.json");
        if row_path.is_file() {
            let text = std::fs::read_to_string(&row_path).map_err(|e| Error::io(&row_path, e))?;
            let mut row: ResultRow = serde_json::from_str(&text)?;
            row.name = cfg.name.clone();
            row.config.name = cfg.name.clone();
            on_cell(&row, true);
            rows.push(row);
            continue;
        }
        if !corpora.contains_key(&cfg.corpus) {
            corpora.insert(cfg.corpus.clone(), Corpus::load(&cfg.corpus)?);
        }
        let row = run_cell(&cfg, &corpora[&cfg.corpus], Some(&dir))?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        std::fs::write(&row_path, serde_json::to_string_pretty(&row)?).map_err(|e| Error::io(&row_path, e))?;
        on_cell(&row, false);
        rows.push(row);
    }
    let deltas = deltas(&rows);
    Ok(Report { paper_scale, rows, deltas })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Txt,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Txt];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Txt => "txt",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "txt" | "text" => Ok(ReportFormat::Txt),
            other => Err(Error::invalid(format!("unknown report format `{other}` (expected csv, json or txt)"))),
        }
    }
}

pub const CSV_HEADER: &str = "kind,name,config_hash,status,plan,loss,cae_aug,finetune_aug,augmentation,seeds,\
acc_mean,acc_std,nmi_mean,nmi_std,ari_mean,ari_std,acc_per_seed,nmi_per_seed,ari_per_seed,wall_clock_secs,\
evaluated_samples,originals_only";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:?}"))
}

fn joined<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

fn kinds(c: &ExperimentConfig) -> String {
    if c.augmentation.is_empty() {
        "none".into()
    } else {
        c.augmentation.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("+")
    }
}

/// Renders a report. Floats use the shortest exact representation in CSV
/// and JSON, so both parse back to identical values.
pub fn render_report(report: &Report, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Csv => {
            let mut s = String::from(CSV_HEADER);
            s.push('\n');
            for r in &report.rows {
                let c = &r.config;
                let per = |f: fn(&Scores) -> f64| joined(&r.metric(f).iter().map(|v| format!("{v:?}")).collect::<Vec<_>>());
                let _ = writeln!(
                    s,
                    "row,{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:?},{},{}",
                    csv_field(&r.name),
                    r.config_hash,
                    r.status.as_str(),
                    c.plan.as_str(),
                    c.loss,
                    c.cae_aug,
                    c.finetune_aug,
                    kinds(c),
                    joined(&c.seeds),
                    opt(r.mean.map(|m| m.acc)),
                    opt(r.std.map(|m| m.acc)),
                    opt(r.mean.map(|m| m.nmi)),
                    opt(r.std.map(|m| m.nmi)),
                    opt(r.mean.map(|m| m.ari)),
                    opt(r.std.map(|m| m.ari)),
                    per(|s| s.acc),
                    per(|s| s.nmi),
                    per(|s| s.ari),
                    r.wall_clock_secs,
                    r.evaluated_samples,
                    r.evaluated_originals_only,
                );
            }
            for d in &report.deltas {
                let _ = writeln!(
                    s,
                    "delta,{} - {},,,{},{},,,,,{:?},,{:?},,{:?},,,,,,,",
                    csv_field(&d.with_aug),
                    csv_field(&d.without_aug),
                    d.plan.as_str(),
                    d.loss,
                    d.acc,
                    d.nmi,
                    d.ari
                );
            }
            Ok(s)
        }
        ReportFormat::Txt => Ok(render_table(report)),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_table(report: &Report) -> String {
    let head = ["cell", "status", "plan", "loss", "acc", "nmi", "ari", "seeds", "secs"];
    let mut lines: Vec<Vec<String>> = vec![head.iter().map(|s| s.to_string()).collect()];
    let pm = |m: Option<Scores>, s: Option<Scores>, f: fn(&Scores) -> f64| match (m, s) {
        (Some(m), Some(s)) => format!("{:.4} ± {:.4}", f(&m), f(&s)),
        _ => "-".into(),
    };
    for r in &report.rows {
        let status = match r.status {
            CellStatus::Ok => "ok".to_string(),
            other => format!("{}!", other.as_str().to_uppercase()),
        };
        lines.push(vec![
            r.name.clone(),
            status,
            r.config.plan.as_str().into(),
            r.config.loss.to_string(),
            pm(r.mean, r.std, |s| s.acc),
            pm(r.mean, r.std, |s| s.nmi),
            pm(r.mean, r.std, |s| s.ari),
            joined(&r.config.seeds),
            format!("{:.1}", r.wall_clock_secs),
        ]);
    }
    let widths: Vec<usize> =
        (0..head.len()).map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let scale = if report.paper_scale { "full" } else { "desk" };
    let _ = writeln!(out, "results ({scale} scale, evaluated on original images)");
    for (n, l) in lines.iter().enumerate() {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}", w = *w)).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if n == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    for r in report.rows.iter().filter(|r| r.status != CellStatus::Ok) {
        for s in r.per_seed.iter().filter(|s| s.error.is_some()) {
            let _ = writeln!(out, "FAILED {} seed {}: {}", r.name, s.seed, s.error.as_deref().unwrap_or_default());
        }
    }
    if !report.deltas.is_empty() {
        let _ = writeln!(out, "\ndeltas (Aug minus WAug)");
        for d in &report.deltas {
            let _ = writeln!(
                out,
                "{} vs {} [{} {}]: acc {:+.4}  nmi {:+.4}  ari {:+.4}",
                d.with_aug,
                d.without_aug,
                d.plan.as_str(),
                d.loss,
                d.acc,
                d.nmi,
                d.ari
            );
        }
    }
    out
}

/// Writes `report.<ext>` under `dir` and returns the path.
pub fn emit_report(report: &Report, format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("report.{}", format.extension()));
    std::fs::write(&path, render_report(report, format)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
