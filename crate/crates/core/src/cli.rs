//! Command-line surface: `gen-data`, `train`, `eval`, `sweep`, `saliency`.
//!
//! Settings resolve as defaults, then an optional TOML file (`--config`),
//! then flags. The effective settings are written to `config.toml` in every
//! output directory.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{drop_location_labels, generate_synthetic, load_dataset, save_dataset, split, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::fex::FexConfig;
use crate::lanet::{CamSharing, LaNetConfig};
use crate::metrics::{evaluate, summarize, EvalOptions, EvalReport, RunMetrics};
use crate::model::{Model, ModelConfig};
use crate::saliency;
use crate::training::{fit, stage1_csv, stage2_csv, FitOutcome, Stage, TrainConfig};

/// Environment variable capping internal parallelism.
pub const THREADS_ENV: &str = "LESIONAWARE_THREADS";

/// Scalar type used by every command.
pub type Real = f32;

#[derive(Parser, Debug)]
#[command(name = "lesionaware", version, about = "Lesion-aware ultrasound classification with semi-supervised localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic ultrasound-like dataset.
    GenData(GenDataArgs),
    /// Train stage 1 then stage 2 and write checkpoints and logs.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of location-label ratios.
    Sweep(SweepArgs),
    /// Export Grad-CAM heatmaps for a dataset.
    Saliency(SaliencyArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sets both class counts.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub benign: Option<usize>,
    #[arg(long)]
    pub malignant: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub contrast: Option<f64>,
    #[arg(long)]
    pub perturbation: Option<f64>,
    #[arg(long)]
    pub speckle: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing dataset in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// 16-32-64-128 channels, one block per stage.
    #[default]
    Compact,
    /// 64-128-256-512 channels, two blocks per stage.
    Resnet18,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub backbone: Backbone,
    pub n_stages: usize,
    /// Build the lesion-aware branch.
    pub lanet: bool,
    /// Feed the predicted mask into the classifier.
    pub mam: bool,
    pub cam_sharing: CamSharing,
    pub bypass_cam: bool,
    pub bypass_sam: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            backbone: Backbone::Compact,
            n_stages: 4,
            lanet: true,
            mam: true,
            cam_sharing: CamSharing::PerLevel,
            bypass_cam: false,
            bypass_sam: false,
        }
    }
}

impl ModelOptions {
    pub fn to_config(&self, input_size: usize, num_classes: usize) -> Result<ModelConfig> {
        let mut fex = match self.backbone {
            Backbone::Compact => FexConfig::with_input(input_size),
            Backbone::Resnet18 => FexConfig::resnet18_like(input_size),
        };
        if self.n_stages > fex.channels_per_stage.len() {
            return Err(Error::Config(format!(
                "n_stages {} exceeds the {} stages of the backbone",
                self.n_stages,
                fex.channels_per_stage.len()
            )));
        }
        fex.n_stages = self.n_stages;
        fex.channels_per_stage.truncate(self.n_stages);
        fex.blocks_per_stage.truncate(self.n_stages);
        let lanet = self.lanet.then(|| LaNetConfig {
            cam_sharing: self.cam_sharing,
            bypass_cam: self.bypass_cam,
            bypass_sam: self.bypass_sam,
            ..LaNetConfig::default()
        });
        let cfg = ModelConfig {
            fex,
            lanet,
            num_classes,
            use_mam: self.lanet && self.mam,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Settings shared by `train` and `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_classes: usize,
    /// Share of located training samples that keep their location label.
    pub keep_loc_ratio: f64,
    /// Ratios visited by `sweep`; 0 trains the vanilla classifier.
    pub ratios: Vec<f64>,
    pub model: ModelOptions,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_classes: 2,
            keep_loc_ratio: 1.0,
            ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            model: ModelOptions::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        if !ok(self.keep_loc_ratio) {
            return Err(Error::Config(format!("keep_loc_ratio must lie in [0, 1], got {}", self.keep_loc_ratio)));
        }
        if self.ratios.is_empty() || !self.ratios.iter().all(|&r| ok(r)) {
            return Err(Error::Config(format!("ratios must be a nonempty list in [0, 1], got {:?}", self.ratios)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        Ok(())
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunFlags {
    /// TOML file with run settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub keep_loc_ratio: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    /// Stage-2 epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_labeled: Option<usize>,
    #[arg(long)]
    pub batch_unlabeled: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, value_enum)]
    pub backbone: Option<Backbone>,
    #[arg(long)]
    pub n_stages: Option<usize>,
    /// Drop the lesion-aware branch and mask attention.
    #[arg(long)]
    pub vanilla: bool,
    /// Keep the branch but feed the raw feature map to the classifier.
    #[arg(long)]
    pub no_mam: bool,
}

impl RunFlags {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => read_toml(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($dst:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    $($dst)+ = v;
                }
            };
        }
        set!(num_classes => cfg.num_classes);
        set!(keep_loc_ratio => cfg.keep_loc_ratio);
        set!(lambda => cfg.train.lambda);
        set!(alpha => cfg.train.alpha);
        set!(tau => cfg.train.tau);
        set!(lr => cfg.train.lr);
        set!(stage1_epochs => cfg.train.stage1_epochs);
        set!(epochs => cfg.train.stage2_epochs);
        set!(batch_labeled => cfg.train.batch_labeled);
        set!(batch_unlabeled => cfg.train.batch_unlabeled);
        set!(val_fraction => cfg.train.val_fraction);
        set!(seed => cfg.train.seed);
        set!(backbone => cfg.model.backbone);
        set!(n_stages => cfg.model.n_stages);
        if self.no_augment {
            cfg.train.augment = false;
        }
        if self.vanilla {
            cfg.model.lanet = false;
            cfg.model.mam = false;
        }
        if self.no_mam {
            cfg.model.mam = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Repeat to aggregate several runs.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Score box-labeled samples by the hull of the predicted mask.
    #[arg(long)]
    pub as_bbox: bool,
    /// Keep only the largest connected component of predicted masks.
    #[arg(long)]
    pub largest_component: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out evaluation set; defaults to each run's validation split.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Args, Debug, Clone)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only the first `n` samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

// ---- helpers ---------------------------------------------------------------------

fn read_toml<C: serde::de::DeserializeOwned>(path: &Path) -> Result<C> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_echo<C: Serialize>(dir: &Path, cfg: &C) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| Error::Internal(format!("config echo: {e}")))?;
    write_file(&dir.join("config.toml"), text)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Worker count from `LESIONAWARE_THREADS`, defaulting to the available cores.
pub fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// The single-line JSON printed for a failed command.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.detail() }).to_string()
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint<Real>, Model<Real>)> {
    let ckpt = Checkpoint::<Real>::load(path)?;
    let model = ckpt.to_model()?;
    Ok((ckpt, model))
}

fn check_compatible(path: &Path, model: &ModelConfig, data: &Dataset) -> Result<()> {
    data.check_image_size(model.fex.input_size).map_err(|e| {
        Error::Config(format!(
            "checkpoint {} expects {s}x{s} images and is incompatible with the dataset: {e}",
            path.display(),
            s = model.fex.input_size
        ))
    })
}

fn dataset_input_size(data: &Dataset) -> Result<usize> {
    let first = data
        .samples
        .first()
        .ok_or_else(|| Error::Usage("dataset is empty".into()))?;
    if first.image.width != first.image.height {
        return Err(Error::Config(format!(
            "images must be square, {} is {}x{}",
            first.id, first.image.width, first.image.height
        )));
    }
    data.check_image_size(first.image.width)?;
    Ok(first.image.width)
}

// ---- gen-data ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataSummary {
    pub manifest: PathBuf,
    pub benign: usize,
    pub malignant: usize,
}

pub fn gen_data_config(args: &GenDataArgs) -> Result<SynthConfig> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = args.per_class {
        cfg.benign = n;
        cfg.malignant = n;
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = args.$f { cfg.$f = v; } )* };
    }
    set!(benign, malignant, size, contrast, perturbation, speckle, seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<GenDataSummary> {
    let cfg = gen_data_config(args)?;
    let nonempty = match fs::read_dir(&args.out) {
        Ok(mut it) => it.next().is_some(),
        Err(_) => false,
    };
    if nonempty {
        if !args.force {
            return Err(Error::Usage(format!(
                "{} is not empty; pass --force to replace it",
                args.out.display()
            )));
        }
        for sub in ["images", "masks"] {
            let p = args.out.join(sub);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let ds = generate_synthetic(&cfg)?;
    create_dir(&args.out)?;
    let manifest = save_dataset(&ds, &args.out)?;
    write_echo(&args.out, &cfg)?;
    Ok(GenDataSummary {
        manifest,
        benign: cfg.benign,
        malignant: cfg.malignant,
    })
}

// ---- train -------------------------------------------------------------------------

/// Split, label-ratio drop and model for a single training run.
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub model: ModelConfig,
    /// `(id, subset, location)` with location one of `kept`, `dropped`, `none`.
    pub manifest: Vec<(String, &'static str, &'static str)>,
}

pub fn prepare(data: &Dataset, cfg: &RunConfig, keep_ratio: f64, seed: u64) -> Result<Prepared> {
    let size = dataset_input_size(data)?;
    let mut opts = cfg.model.clone();
    if keep_ratio == 0.0 {
        opts.lanet = false;
        opts.mam = false;
    }
    let model = opts.to_config(size, data.num_classes)?;
    let (train, val) = split(data, cfg.train.val_fraction, seed)?;
    let dropped = drop_location_labels(&train, keep_ratio, seed)?;
    let mut manifest = Vec::with_capacity(data.len());
    for (orig, now) in train.samples.iter().zip(&dropped.samples) {
        let loc = match (&orig.location, &now.location) {
            (_, Some(_)) => "kept",
            (Some(_), None) => "dropped",
            (None, None) => "none",
        };
        manifest.push((orig.id.clone(), "train", loc));
    }
    for s in &val.samples {
        manifest.push((s.id.clone(), "val", if s.location.is_some() { "kept" } else { "none" }));
    }
    Ok(Prepared {
        train: dropped,
        val,
        model,
        manifest,
    })
}

fn manifest_csv(rows: &[(String, &str, &str)]) -> String {
    let mut out = String::from("id,subset,location\n");
    for (id, subset, loc) in rows {
        let _ = writeln!(out, "{id},{subset},{loc}");
    }
    out
}

pub struct TrainResult {
    pub fit: FitOutcome<Real>,
    pub prepared: Prepared,
}

/// One full training run writing logs and checkpoints under `out`.
pub fn train_run(data: &Dataset, cfg: &RunConfig, keep_ratio: f64, seed: u64, out: &Path) -> Result<TrainResult> {
    create_dir(out)?;
    let prepared = prepare(data, cfg, keep_ratio, seed)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    write_file(&out.join("split.csv"), manifest_csv(&prepared.manifest))?;
    let mut model = Model::<Real>::build(&prepared.model, seed)?;
    let last_good = out.join("last_good.ckpt");
    let meta = CheckpointMeta {
        best_epoch: None,
        seed,
        train: Some(tcfg.clone()),
    };
    let mut hook = |stage: Stage, epoch: usize, m: &Model<Real>| -> Result<()> {
        info!("{:?} epoch {epoch} done", stage);
        Checkpoint::from_model(m, meta.clone(), None).save(&last_good)
    };
    let outcome = fit(&mut model, &prepared.train, &prepared.val, &tcfg, &mut hook)?;
    write_file(&out.join("stage1_log.csv"), stage1_csv(&outcome.stage1))?;
    write_file(&out.join("stage2_log.csv"), stage2_csv(&outcome.stage2))?;
    let meta = CheckpointMeta {
        best_epoch: outcome.best_epoch,
        ..meta
    };
    Checkpoint::from_model(&outcome.best, meta.clone(), None).save(&out.join("best.ckpt"))?;
    Checkpoint::from_model(&model, meta, Some(&outcome.adam)).save(&out.join("final.ckpt"))?;
    Ok(TrainResult { fit: outcome, prepared })
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    data: String,
    #[serde(flatten)]
    run: &'a RunConfig,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainResult> {
    let cfg = args.run.resolve()?;
    let data = load_dataset(&args.data, cfg.num_classes)?;
    create_dir(&args.out)?;
    write_echo(
        &args.out,
        &TrainEcho {
            data: args.data.display().to_string(),
            run: &cfg,
        },
    )?;
    train_run(&data, &cfg, cfg.keep_loc_ratio, cfg.train.seed, &args.out)
}

// ---- eval --------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalEcho {
    data: String,
    checkpoints: Vec<String>,
    as_bbox: bool,
    largest_component: bool,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let threads = threads()?;
    let opts = EvalOptions {
        as_bbox: args.as_bbox,
        largest_component: args.largest_component,
        threads,
    };
    let mut models = Vec::with_capacity(args.checkpoint.len());
    for p in &args.checkpoint {
        models.push((p, load_checkpoint(p)?.1));
    }
    let k = models[0].1.config.num_classes;
    if let Some((p, _)) = models.iter().find(|(_, m)| m.config.num_classes != k) {
        return Err(Error::Config(format!(
            "checkpoint {} has a different number of classes than {}",
            p.display(),
            models[0].0.display()
        )));
    }
    let data = load_dataset(&args.data, k)?;
    let mut runs = Vec::with_capacity(models.len());
    for (p, m) in &models {
        check_compatible(p, &m.config, &data)?;
        runs.push(evaluate(m, &data, &opts)?);
    }
    let report = EvalReport::from_runs(&runs)?;
    create_dir(&args.out)?;
    write_echo(
        &args.out,
        &EvalEcho {
            data: args.data.display().to_string(),
            checkpoints: args.checkpoint.iter().map(|p| p.display().to_string()).collect(),
            as_bbox: args.as_bbox,
            largest_component: args.largest_component,
        },
    )?;
    write_file(&args.out.join("metrics.csv"), report.to_csv())?;
    write_file(&args.out.join("metrics.txt"), report.to_table())?;
    Ok(report)
}

// ---- sweep -------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub repeat: usize,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub metrics: RunMetrics,
}

pub const SWEEP_HEADER: &str = "ratio,repeat,seed,best_epoch,accuracy,precision,sensitivity,specificity,f1,jsi";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let c = &r.metrics.classification;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.ratio,
            r.repeat,
            r.seed,
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            c.accuracy,
            c.precision,
            c.sensitivity,
            c.specificity,
            c.f1,
            r.metrics.jsi.map(|j| j.to_string()).unwrap_or_default()
        );
    }
    out
}

/// `ratio,metric,mean,ci95_half_width` over repeats.
pub fn sweep_summary_csv(rows: &[SweepRow], ratios: &[f64]) -> Result<String> {
    let mut out = String::from("ratio,metric,mean,ci95_half_width\n");
    for &ratio in ratios {
        let runs: Vec<&SweepRow> = rows.iter().filter(|r| r.ratio == ratio).collect();
        let metrics: [(&str, fn(&RunMetrics) -> Option<f64>); 6] = [
            ("accuracy", |m| Some(m.classification.accuracy)),
            ("precision", |m| Some(m.classification.precision)),
            ("sensitivity", |m| Some(m.classification.sensitivity)),
            ("specificity", |m| Some(m.classification.specificity)),
            ("f1", |m| Some(m.classification.f1)),
            ("jsi", |m| m.jsi),
        ];
        for (name, f) in metrics {
            let vals: Option<Vec<f64>> = runs.iter().map(|r| f(&r.metrics)).collect();
            if let Some(v) = vals.filter(|v| !v.is_empty()) {
                let s = summarize(&v)?;
                let _ = writeln!(out, "{ratio},{name},{},{}", s.mean, s.half_width);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct SweepEcho<'a> {
    data: String,
    test_data: String,
    #[serde(flatten)]
    run: &'a RunConfig,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<SweepRow>> {
    let mut cfg = args.run.resolve()?;
    if let Some(r) = &args.ratios {
        cfg.ratios = r.clone();
    }
    if let Some(n) = args.repeats {
        cfg.train.repeats = n;
    }
    cfg.validate()?;
    let data = load_dataset(&args.data, cfg.num_classes)?;
    let test = args
        .test_data
        .as_ref()
        .map(|p| load_dataset(p, cfg.num_classes))
        .transpose()?;
    create_dir(&args.out)?;
    write_echo(
        &args.out,
        &SweepEcho {
            data: args.data.display().to_string(),
            test_data: args.test_data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            run: &cfg,
        },
    )?;
    let jobs: Vec<(f64, usize)> = cfg
        .ratios
        .iter()
        .flat_map(|&r| (0..cfg.train.repeats).map(move |k| (r, k)))
        .collect();
    let run_job = |&(ratio, repeat): &(f64, usize)| -> Result<SweepRow> {
        let seed = cfg.train.seed + repeat as u64;
        let dir = args.out.join(format!("ratio_{ratio}")).join(format!("rep_{repeat}"));
        let res = train_run(&data, &cfg, ratio, seed, &dir)?;
        let eval_set = test.as_ref().unwrap_or(&res.prepared.val);
        let metrics = evaluate(&res.fit.best, eval_set, &EvalOptions::default())?;
        info!("sweep ratio {ratio} repeat {repeat}: f1 {:.4} jsi {:?}", metrics.classification.f1, metrics.jsi);
        Ok(SweepRow {
            ratio,
            repeat,
            seed,
            best_epoch: res.fit.best_epoch,
            metrics,
        })
    };
    let workers = threads()?.min(jobs.len()).max(1);
    let results: Vec<Result<SweepRow>> = if workers == 1 {
        jobs.iter().map(run_job).collect()
    } else {
        let mut slots: Vec<Option<Result<SweepRow>>> = (0..jobs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let jobs = &jobs;
                    let run_job = &run_job;
                    scope.spawn(move || {
                        (w..jobs.len())
                            .step_by(workers)
                            .map(|i| (i, run_job(&jobs[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("sweep worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every job ran")).collect()
    };
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_file(&args.out.join("sweep.csv"), sweep_csv(&rows))?;
    write_file(&args.out.join("sweep_summary.csv"), sweep_summary_csv(&rows, &cfg.ratios)?)?;
    Ok(rows)
}

// ---- saliency ----------------------------------------------------------------------

#[derive(Serialize)]
struct SaliencyEcho {
    data: String,
    checkpoint: String,
    limit: Option<usize>,
}

pub fn cmd_saliency(args: &SaliencyArgs) -> Result<Vec<saliency::SaliencyRow>> {
    let (_, model) = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data, model.config.num_classes)?;
    check_compatible(&args.checkpoint, &model.config, &data)?;
    let n = args.limit.unwrap_or(data.len()).min(data.len());
    create_dir(&args.out)?;
    write_echo(
        &args.out,
        &SaliencyEcho {
            data: args.data.display().to_string(),
            checkpoint: args.checkpoint.display().to_string(),
            limit: args.limit,
        },
    )?;
    saliency::export(&model, &data.samples[..n], &args.out)
}

// ---- dispatch ----------------------------------------------------------------------

/// Parses `args` (program name first) and runs the command.
pub fn run<I, A>(args: I) -> Result<()>
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    use clap::error::ErrorKind;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            return Err(Error::Usage(
                "no command given; expected one of gen-data, train, eval, sweep, saliency".into(),
            ));
        }
        Err(e) => {
            let text = e.to_string();
            let msg: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            return Err(Error::Usage(msg.join(" ").trim_start_matches("error: ").to_string()));
        }
    };
    match &cli.command {
        Command::GenData(a) => {
            let s = cmd_gen_data(a)?;
            println!(
                "wrote {} ({} benign, {} malignant)",
                s.manifest.display(),
                s.benign,
                s.malignant
            );
        }
        Command::Train(a) => {
            let r = cmd_train(a)?;
            let best = r.fit.best_epoch.and_then(|e| r.fit.stage2.get(e - 1));
            println!(
                "best epoch {} val accuracy {} val JSI {}; checkpoints in {}",
                r.fit.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
                best.map(|b| b.val_accuracy.to_string()).unwrap_or_else(|| "-".into()),
                best.and_then(|b| b.val_jsi).map(|j| j.to_string()).unwrap_or_else(|| "-".into()),
                a.out.display()
            );
        }
        Command::Eval(a) => print!("{}", cmd_eval(a)?.to_table()),
        Command::Sweep(a) => {
            let rows = cmd_sweep(a)?;
            print!("{}", sweep_csv(&rows));
        }
        Command::Saliency(a) => {
            let rows = cmd_saliency(a)?;
            println!("wrote {} heatmaps to {}", rows.len(), a.out.display());
        }
    }
    Ok(())
}
