//! Stage orchestration over a run directory.
//!
//! ```text
//! <run-dir>/
//!   config.ini                      canonical copy of the last config used
//!   results.jsonl                   one EvalReport per (method, seed, target), sorted
//!   seed-<s>/dae/                   autoencoder.{json,bin}, history.csv, latents.csv
//!   seed-<s>/cluster/               pseudo_labels.csv, kmeans.json
//!   seed-<s>/<mode>/plan/           plan.jsonl, diagnostics.json
//!   seed-<s>/<mode>/contrastive/    encoder.{json,bin}, head.{json,bin}, loss.csv
//!   seed-<s>/<mode>/eval/           stage stamps for probe and finetune
//!   report/                         comparison.md, summary.json, dae_loss.csv,
//!                                   contrastive_loss.csv
//! ```
//!
//! Every stage directory holds a `<stage>.stamp` recording the key its
//! outputs were produced under; a stage whose key and outputs are present is
//! skipped unless forced.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{self, PseudoLabelAssignment};
use crate::config::{RunConfig, SourceKind};
use crate::contrastive::{self, ContrastiveModel, Encoder, ProjectionHead};
use crate::dae::{self, LatentMatrix};
use crate::data::{self, ImageDataset, SyntheticSpec};
use crate::error::{io_err, Error, Result};
use crate::eval::{self, EvalReport, EvalTarget, Method};
use crate::scheduler::{self, BatchPlan, PlanMode, PlanSource};
use crate::seed;

/// Published full-scale CIFAR-10 accuracies (linear evaluation and 10%-label
/// fine-tuning), kept for side-by-side display only.
pub const PUBLISHED_CIFAR10: [(EvalTarget, f64, f64); 4] = [
    (EvalTarget::P1, 38.15, 37.69),
    (EvalTarget::P2, 41.01, 39.4),
    (EvalTarget::P3, 40.5, 39.92),
    (EvalTarget::Finetune, 43.1, 42.21),
];
pub const PUBLISHED_CIFAR10_SUPERVISED: f64 = 73.62;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.ini")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.jsonl")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn dae_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("dae")
    }

    pub fn cluster_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("cluster")
    }

    pub fn mode_dir(&self, seed: u64, mode: PlanMode) -> PathBuf {
        self.seed_dir(seed).join(mode.as_str())
    }

    pub fn plan_dir(&self, seed: u64, mode: PlanMode) -> PathBuf {
        self.mode_dir(seed, mode).join("plan")
    }

    pub fn contrastive_dir(&self, seed: u64, mode: PlanMode) -> PathBuf {
        self.mode_dir(seed, mode).join("contrastive")
    }

    pub fn eval_dir(&self, seed: u64, mode: PlanMode) -> PathBuf {
        self.mode_dir(seed, mode).join("eval")
    }
}

/// Training and evaluation images.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: ImageDataset,
    pub val: ImageDataset,
}

impl Splits {
    pub fn dataset_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.train.content_hash());
        h.update(self.val.content_hash());
        hex::encode(h.finalize())
    }
}

/// Per-class split of a synthetic set: the first `train_per_class` images of
/// each class train, the rest evaluate.
fn split_synthetic(all: &ImageDataset, train_per_class: usize) -> Result<Splits> {
    let mut seen = vec![0usize; all.num_classes()];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, &l) in all.labels().iter().enumerate() {
        if seen[l] < train_per_class {
            train.push(i);
        } else {
            val.push(i);
        }
        seen[l] += 1;
    }
    Ok(Splits {
        train: all.subset(&train)?,
        val: all.subset(&val)?,
    })
}

pub fn load_splits(config: &RunConfig) -> Result<Splits> {
    let ds = &config.dataset;
    match ds.source {
        SourceKind::Cifar10 => {
            let s = data::load_cifar10_head(&ds.path, ds.subset_size, ds.val_size)?;
            Ok(Splits {
                train: s.train,
                val: s.test,
            })
        }
        SourceKind::Synthetic => {
            let spec = SyntheticSpec::new(
                ds.synthetic_classes,
                ds.synthetic_per_class + ds.synthetic_val_per_class,
                ds.image_size,
            );
            let all = data::make_synthetic(spec, ds.synthetic_seed)?;
            let mut splits = split_synthetic(&all, ds.synthetic_per_class)?;
            if ds.subset_size > 0 && ds.subset_size < splits.train.len() {
                splits.train = splits.train.head(ds.subset_size)?;
            }
            if ds.val_size > 0 && ds.val_size < splits.val.len() {
                splits.val = splits.val.head(ds.val_size)?;
            }
            Ok(splits)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    key: String,
    config_hash: String,
    dataset_hash: String,
    seed: u64,
    mode: Option<PlanMode>,
}

/// Everything a stage needs: config, run directory, seed, mode, and lazily
/// loaded data.
pub struct Context {
    pub config: RunConfig,
    pub paths: RunPaths,
    pub force: bool,
    splits: OnceCell<Splits>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn read_text(path: &Path, producer: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        });
    }
    fs::read_to_string(path).map_err(io_err(path))
}

fn hash_line(config_hash: &str) -> String {
    format!("# config_hash={config_hash}\n")
}

impl Context {
    pub fn new(config: RunConfig, run_dir: impl Into<PathBuf>, force: bool) -> Self {
        Self {
            config,
            paths: RunPaths::new(run_dir),
            force,
            splits: OnceCell::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn mode(&self) -> PlanMode {
        self.config.scheduler.mode
    }

    pub fn splits(&self) -> Result<&Splits> {
        if let Some(s) = self.splits.get() {
            return Ok(s);
        }
        let loaded = load_splits(&self.config)?;
        Ok(self.splits.get_or_init(|| loaded))
    }

    pub fn config_hash(&self) -> String {
        self.config.config_hash()
    }

    fn stamp_for(&self, stage: &str, mode: Option<PlanMode>) -> Result<Stamp> {
        let config_hash = self.config_hash();
        let dataset_hash = self.splits()?.dataset_hash();
        let mut h = Sha256::new();
        h.update(stage);
        h.update(&config_hash);
        h.update(&dataset_hash);
        h.update(self.seed().to_le_bytes());
        if let Some(m) = mode {
            h.update(m.as_str());
        }
        Ok(Stamp {
            stage: stage.to_string(),
            key: hex::encode(h.finalize()),
            config_hash,
            dataset_hash,
            seed: self.seed(),
            mode,
        })
    }

    fn stamp_path(dir: &Path, stage: &str) -> PathBuf {
        dir.join(format!("{stage}.stamp"))
    }

    fn up_to_date(&self, dir: &Path, stamp: &Stamp, outputs: &[PathBuf]) -> bool {
        if self.force || outputs.iter().any(|p| !p.exists()) {
            return false;
        }
        fs::read_to_string(Self::stamp_path(dir, &stamp.stage))
            .ok()
            .and_then(|t| serde_json::from_str::<Stamp>(&t).ok())
            .is_some_and(|s| s == *stamp)
    }

    fn write_stamp(&self, dir: &Path, stamp: &Stamp) -> Result<()> {
        write_file(
            &Self::stamp_path(dir, &stamp.stage),
            serde_json::to_string_pretty(stamp)? + "\n",
        )
    }

    fn write_config_copy(&self) -> Result<()> {
        write_file(&self.paths.config(), self.config.to_ini())
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed(), &[seed::tag(stage)])
    }
}

/// Trains the autoencoder and exports the latent matrix.
pub fn train_dae(ctx: &Context) -> Result<StageOutcome> {
    let dir = ctx.paths.dae_dir(ctx.seed());
    let stamp = ctx.stamp_for("train-dae", None)?;
    let outputs = [
        dir.join("autoencoder.json"),
        dir.join("autoencoder.bin"),
        dir.join("history.csv"),
        dir.join("latents.csv"),
    ];
    if ctx.up_to_date(&dir, &stamp, &outputs) {
        log::info!("train-dae: up to date in {}", dir.display());
        return Ok(StageOutcome::UpToDate);
    }
    ctx.write_config_copy()?;
    let splits = ctx.splits()?;
    let hash = ctx.config_hash();
    let s = ctx.stage_seed("dae");
    let model = dae::build_autoencoder(&ctx.config.autoencoder_spec(), s)?;
    let (model, history) = dae::train_dae(&model, &splits.train, &ctx.config.dae_train_config(), s)?;
    log::info!(
        "train-dae: best epoch {} of {} (val {:.6})",
        history.best_epoch,
        history.stopped_epoch,
        history.best_val_loss()
    );
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    model.save(&dir.join("autoencoder"), s, &hash)?;
    write_file(&outputs[2], hash_line(&hash) + &history.to_csv())?;
    let latents = dae::extract_latents(&model, &splits.train, ctx.config.dae.batch_size)?;
    let mut buf = hash_line(&hash).into_bytes();
    latents.write_csv(&mut buf)?;
    write_file(&outputs[3], buf)?;
    ctx.write_stamp(&dir, &stamp)?;
    Ok(StageOutcome::Ran)
}

pub fn read_latents(ctx: &Context) -> Result<LatentMatrix> {
    let path = ctx.paths.dae_dir(ctx.seed()).join("latents.csv");
    let text = read_text(&path, "train-dae")?;
    LatentMatrix::read_csv(text.as_bytes(), &path.display().to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KMeansSummary {
    config_hash: String,
    k: usize,
    inertia: f64,
    iterations_run: usize,
    inertia_history: Vec<f64>,
    counts: Vec<usize>,
}

/// k-means on the latents; writes the pseudo-label table.
pub fn cluster(ctx: &Context) -> Result<StageOutcome> {
    let dir = ctx.paths.cluster_dir(ctx.seed());
    let stamp = ctx.stamp_for("cluster", None)?;
    let outputs = [dir.join("pseudo_labels.csv"), dir.join("kmeans.json")];
    let latents = read_latents(ctx)?;
    if ctx.up_to_date(&dir, &stamp, &outputs) {
        log::info!("cluster: up to date in {}", dir.display());
        return Ok(StageOutcome::UpToDate);
    }
    let hash = ctx.config_hash();
    let s = seed::derive(ctx.seed(), &[seed::tag("cluster"), ctx.config.cluster.seed]);
    let model = cluster::kmeans_fit(&latents, &ctx.config.kmeans_config(), s)?;
    let assignment = cluster::assign(&model, &latents)?;
    log::info!(
        "cluster: k = {} inertia {:.4} after {} iterations, {} nonempty",
        model.k(),
        model.inertia(),
        model.iterations_run(),
        assignment.nonempty_clusters()
    );
    let mut buf = hash_line(&hash).into_bytes();
    cluster::write_pseudo_labels_csv(&cluster::pseudo_label_table(&assignment), &mut buf)?;
    write_file(&outputs[0], buf)?;
    let summary = KMeansSummary {
        config_hash: hash,
        k: model.k(),
        inertia: model.inertia(),
        iterations_run: model.iterations_run(),
        inertia_history: model.inertia_history().to_vec(),
        counts: assignment.counts().to_vec(),
    };
    write_file(&outputs[1], serde_json::to_string_pretty(&summary)? + "\n")?;
    ctx.write_stamp(&dir, &stamp)?;
    Ok(StageOutcome::Ran)
}

pub fn read_assignment(ctx: &Context) -> Result<PseudoLabelAssignment> {
    let path = ctx.paths.cluster_dir(ctx.seed()).join("pseudo_labels.csv");
    let text = read_text(&path, "cluster")?;
    let table = cluster::read_pseudo_labels_csv(text.as_bytes())?;
    cluster::assignment_from_table(&table, ctx.config.cluster.k)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanSummary {
    config_hash: String,
    mode: PlanMode,
    batch_size: usize,
    epochs: usize,
    nonempty_clusters: Option<usize>,
    total_violations: Vec<usize>,
    full_batch_violations: Vec<usize>,
}

/// Builds one batch plan per contrastive epoch. Returns warnings, e.g. when
/// the guided plan cannot keep batches label-distinct.
pub fn plan(ctx: &Context) -> Result<(StageOutcome, Vec<String>)> {
    let mode = ctx.mode();
    let p = ctx.config.scheduler.p;
    let dir = ctx.paths.plan_dir(ctx.seed(), mode);
    let n = ctx.splits()?.train.len();
    let (source, assignment) = match mode {
        PlanMode::Guided => {
            let a = read_assignment(ctx)?;
            if a.len() != n {
                return Err(Error::Incompatible(format!(
                    "pseudo-labels cover {} images, training split has {n}",
                    a.len()
                )));
            }
            let src = PlanSource::guided(
                a.clone(),
                p,
                ctx.stage_seed("plan"),
                ctx.config.scheduler.reshuffle_per_epoch,
            );
            (src, a)
        }
        PlanMode::Random => (
            PlanSource::random(n, p, ctx.stage_seed("plan"), ctx.config.scheduler.reshuffle_per_epoch),
            PseudoLabelAssignment::new(vec![0; n], 1)?,
        ),
    };
    let mut warnings = Vec::new();
    if mode == PlanMode::Guided && assignment.nonempty_clusters() < p {
        warnings.push(format!(
            "guided batching degenerates toward random batching: {} nonempty clusters for batch size {p}",
            assignment.nonempty_clusters()
        ));
    }
    for w in &warnings {
        log::warn!("plan: {w}");
    }
    let stamp = ctx.stamp_for("plan", Some(mode))?;
    let outputs = [dir.join("plan.jsonl"), dir.join("diagnostics.json")];
    if ctx.up_to_date(&dir, &stamp, &outputs) {
        log::info!("plan: up to date in {}", dir.display());
        return Ok((StageOutcome::UpToDate, warnings));
    }
    let hash = ctx.config_hash();
    let epochs = ctx.config.contrastive.epochs;
    let mut plans = Vec::with_capacity(epochs);
    let mut summary = PlanSummary {
        config_hash: hash.clone(),
        mode,
        batch_size: p,
        epochs,
        nonempty_clusters: (mode == PlanMode::Guided).then(|| assignment.nonempty_clusters()),
        total_violations: Vec::new(),
        full_batch_violations: Vec::new(),
    };
    for e in 0..epochs {
        let plan = source.plan(e)?;
        let diag = scheduler::validate_plan(&plan, &assignment)?;
        summary.total_violations.push(diag.total_violations);
        summary.full_batch_violations.push(diag.full_batch_violations);
        plans.push(plan);
    }
    let mut buf = hash_line(&hash).into_bytes();
    scheduler::write_plan_jsonl(&plans, &mut buf)?;
    write_file(&outputs[0], buf)?;
    write_file(&outputs[1], serde_json::to_string_pretty(&summary)? + "\n")?;
    ctx.write_stamp(&dir, &stamp)?;
    Ok((StageOutcome::Ran, warnings))
}

pub fn read_plans(ctx: &Context) -> Result<PlanSource> {
    let mode = ctx.mode();
    let path = ctx.paths.plan_dir(ctx.seed(), mode).join("plan.jsonl");
    if !path.exists() {
        return Err(Error::MissingArtifact { path, producer: "plan" });
    }
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let epochs = scheduler::read_plan_jsonl(BufReader::new(file))?;
    let p = ctx.config.scheduler.p;
    let n = ctx.splits()?.train.len();
    let check = PseudoLabelAssignment::new(vec![0; n], 1)?;
    let plans = epochs
        .into_iter()
        .map(|batches| {
            let plan = BatchPlan::new(batches, p, 0);
            scheduler::validate_plan(&plan, &check)?;
            Ok(plan)
        })
        .collect::<Result<Vec<_>>>()?;
    if plans.len() < ctx.config.contrastive.epochs {
        return Err(Error::Incompatible(format!(
            "{} holds {} epochs, training needs {}; rerun `plan`",
            path.display(),
            plans.len(),
            ctx.config.contrastive.epochs
        )));
    }
    PlanSource::fixed(plans, mode)
}

/// Contrastive training over the stored plans.
pub fn train_contrastive(ctx: &Context) -> Result<StageOutcome> {
    let mode = ctx.mode();
    let dir = ctx.paths.contrastive_dir(ctx.seed(), mode);
    let plans = read_plans(ctx)?;
    let stamp = ctx.stamp_for("train-contrastive", Some(mode))?;
    let outputs = [
        dir.join("encoder.json"),
        dir.join("encoder.bin"),
        dir.join("head.json"),
        dir.join("head.bin"),
        dir.join("loss.csv"),
    ];
    if ctx.up_to_date(&dir, &stamp, &outputs) {
        log::info!("train-contrastive: up to date in {}", dir.display());
        return Ok(StageOutcome::UpToDate);
    }
    let hash = ctx.config_hash();
    // Both modes start from the same weights and draw the same augmentations;
    // only the batch composition differs.
    let s = ctx.stage_seed("contrastive");
    let model = ContrastiveModel::build(&ctx.config.encoder_spec(), &ctx.config.head_spec(), s)?;
    let run = contrastive::train_contrastive(&ctx.splits()?.train, &plans, model, &ctx.config.contrastive_config(s))?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    run.model.encoder.save(&dir.join("encoder"), s, &hash)?;
    run.model.head.save(&dir.join("head"), s, &hash)?;
    write_file(&outputs[4], hash_line(&hash) + &run.history.to_csv())?;
    ctx.write_stamp(&dir, &stamp)?;
    Ok(StageOutcome::Ran)
}

pub fn load_contrastive(ctx: &Context) -> Result<ContrastiveModel> {
    let dir = ctx.paths.contrastive_dir(ctx.seed(), ctx.mode());
    Ok(ContrastiveModel {
        encoder: Encoder::load(&dir.join("encoder"), "train-contrastive")?,
        head: ProjectionHead::load(&dir.join("head"), "train-contrastive")?,
    })
}

fn method_for(mode: PlanMode) -> Method {
    match mode {
        PlanMode::Guided => Method::Guided,
        PlanMode::Random => Method::RandomBaseline,
    }
}

pub fn read_results(path: &Path) -> Result<Vec<EvalReport>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Replaces entries with matching keys and rewrites the file sorted by key.
pub fn upsert_results(path: &Path, new: &[EvalReport]) -> Result<()> {
    let mut all: BTreeMap<_, EvalReport> = read_results(path)?.into_iter().map(|r| (r.key(), r)).collect();
    for r in new {
        all.insert(r.key(), r.clone());
    }
    let mut out = String::new();
    for r in all.values() {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_file(path, out)
}

fn report_for(
    ctx: &Context,
    method: Method,
    target: EvalTarget,
    outcome: eval::ClassifierOutcome,
) -> Result<EvalReport> {
    Ok(EvalReport {
        method,
        target,
        accuracy: outcome.accuracy,
        seed: ctx.seed(),
        config_hash: ctx.config_hash(),
        dataset_hash: ctx.splits()?.dataset_hash(),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
    })
}

/// Linear probes at the configured tap points.
pub fn probe(ctx: &Context) -> Result<StageOutcome> {
    let mode = ctx.mode();
    let dir = ctx.paths.eval_dir(ctx.seed(), mode);
    let model = load_contrastive(ctx)?;
    let stamp = ctx.stamp_for("probe", Some(mode))?;
    let results = ctx.paths.results();
    if ctx.up_to_date(&dir, &stamp, std::slice::from_ref(&results)) {
        log::info!("probe: up to date");
        return Ok(StageOutcome::UpToDate);
    }
    let splits = ctx.splits()?;
    let mut reports = Vec::new();
    for &point in &ctx.config.eval.tap_points {
        let s = seed::derive(ctx.seed(), &[seed::tag("probe"), point as u64]);
        let out = eval::linear_probe(
            &eval::tap(&model, point),
            &splits.train,
            &splits.val,
            &ctx.config.probe_config(),
            s,
        )?;
        log::info!("probe {point} ({}): {:.2}%", mode.as_str(), out.accuracy);
        reports.push(report_for(ctx, method_for(mode), point.into(), out)?);
    }
    upsert_results(&results, &reports)?;
    ctx.write_stamp(&dir, &stamp)?;
    Ok(StageOutcome::Ran)
}

/// Label-efficient fine-tuning, plus the supervised reference when enabled.
pub fn finetune(ctx: &Context) -> Result<StageOutcome> {
    let mode = ctx.mode();
    let dir = ctx.paths.eval_dir(ctx.seed(), mode);
    let model = load_contrastive(ctx)?;
    let stamp = ctx.stamp_for("finetune", Some(mode))?;
    let results = ctx.paths.results();
    if ctx.up_to_date(&dir, &stamp, std::slice::from_ref(&results)) {
        log::info!("finetune: up to date");
        return Ok(StageOutcome::UpToDate);
    }
    let splits = ctx.splits()?;
    let cfg = ctx.config.finetune_config();
    let s = ctx.stage_seed("finetune");
    let out = eval::fine_tune(
        &model.encoder,
        &splits.train,
        &splits.val,
        ctx.config.eval.finetune_fraction,
        &cfg,
        s,
    )?;
    log::info!("finetune ({}): {:.2}%", mode.as_str(), out.accuracy);
    let mut reports = vec![report_for(ctx, method_for(mode), EvalTarget::Finetune, out)?];
    if ctx.config.eval.supervised_reference {
        let key = (Method::SupervisedReference, ctx.seed(), EvalTarget::Supervised);
        let have = read_results(&results)?
            .iter()
            .any(|r| r.key() == key && r.config_hash == ctx.config_hash());
        if ctx.force || !have {
            let out = eval::supervised_reference(&splits.train, &splits.val, &ctx.config.encoder_spec(), &cfg, s)?;
            log::info!("supervised reference: {:.2}%", out.accuracy);
            reports.push(report_for(
                ctx,
                Method::SupervisedReference,
                EvalTarget::Supervised,
                out,
            )?);
        }
    }
    upsert_results(&results, &reports)?;
    ctx.write_stamp(&dir, &stamp)?;
    Ok(StageOutcome::Ran)
}

/// All stages for the configured mode. The random baseline skips the
/// autoencoder and clustering.
pub fn run_pipeline(ctx: &Context) -> Result<Vec<String>> {
    ctx.write_config_copy()?;
    if ctx.mode() == PlanMode::Guided {
        train_dae(ctx)?;
        cluster(ctx)?;
    }
    let (_, warnings) = plan(ctx)?;
    train_contrastive(ctx)?;
    probe(ctx)?;
    finetune(ctx)?;
    Ok(warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub seeds: usize,
}

/// Mean accuracy per (method, target) over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dataset_hash: String,
    pub config_hashes: Vec<String>,
    pub cells: BTreeMap<String, BTreeMap<String, Cell>>,
}

impl Summary {
    pub fn mean(&self, method: Method, target: EvalTarget) -> Option<f64> {
        self.cells
            .get(method.as_str())
            .and_then(|m| m.get(target.as_str()))
            .map(|c| c.mean)
    }

    pub fn delta(&self, target: EvalTarget) -> Option<f64> {
        Some(self.mean(Method::Guided, target)? - self.mean(Method::RandomBaseline, target)?)
    }
}

pub fn summarize(results: &[EvalReport]) -> Result<Summary> {
    let mut hashes: Vec<&str> = results.iter().map(|r| r.dataset_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    if hashes.len() > 1 {
        return Err(Error::Incompatible(format!(
            "results were produced on {} different datasets ({}); refusing to compare",
            hashes.len(),
            hashes.iter().map(|h| &h[..12]).collect::<Vec<_>>().join(", ")
        )));
    }
    let mut config_hashes: Vec<String> = results.iter().map(|r| r.config_hash.clone()).collect();
    config_hashes.sort_unstable();
    config_hashes.dedup();
    let mut sums: BTreeMap<(Method, EvalTarget), (f64, usize)> = BTreeMap::new();
    for r in results {
        let e = sums.entry((r.method, r.target)).or_default();
        e.0 += r.accuracy;
        e.1 += 1;
    }
    let mut cells: BTreeMap<String, BTreeMap<String, Cell>> = BTreeMap::new();
    for ((m, t), (sum, count)) in sums {
        cells.entry(m.as_str().to_string()).or_default().insert(
            t.as_str().to_string(),
            Cell {
                mean: sum / count as f64,
                seeds: count,
            },
        );
    }
    Ok(Summary {
        dataset_hash: hashes.first().map(|h| h.to_string()).unwrap_or_default(),
        config_hashes,
        cells,
    })
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.2}"))
}

fn fmt_delta(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:+.2}"))
}

/// Markdown comparison table: methods against P1/P2/P3 and fine-tuning.
pub fn render_table(summary: &Summary) -> String {
    let targets = [EvalTarget::P1, EvalTarget::P2, EvalTarget::P3, EvalTarget::Finetune];
    let mut s = String::from("| method | P1 | P2 | P3 | finetune | seeds |\n|---|---|---|---|---|---|\n");
    for m in [Method::Guided, Method::RandomBaseline] {
        let seeds = targets
            .iter()
            .filter_map(|t| summary.cells.get(m.as_str()).and_then(|c| c.get(t.as_str())))
            .map(|c| c.seeds)
            .max()
            .unwrap_or(0);
        let cells: Vec<String> = targets.iter().map(|&t| fmt_cell(summary.mean(m, t))).collect();
        let _ = writeln!(s, "| {} | {} | {seeds} |", m.as_str(), cells.join(" | "));
    }
    let deltas: Vec<String> = targets.iter().map(|&t| fmt_delta(summary.delta(t))).collect();
    let _ = writeln!(s, "| delta (guided - random) | {} | |", deltas.join(" | "));
    let published: Vec<String> = PUBLISHED_CIFAR10
        .iter()
        .map(|&(_, g, r)| format!("{:+.2}", g - r))
        .collect();
    let _ = writeln!(s, "| published delta, CIFAR-10 full scale | {} | |", published.join(" | "));
    if let Some(v) = summary.mean(Method::SupervisedReference, EvalTarget::Supervised) {
        let _ = writeln!(
            s,
            "\nsupervised reference: {v:.2} (published, full scale: {PUBLISHED_CIFAR10_SUPERVISED:.2})"
        );
    }
    s
}

fn seed_dirs(root: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(s) = name.strip_prefix("seed-").and_then(|s| s.parse().ok()) {
            out.push((s, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn csv_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    r.records().map(|rec| Ok(rec?)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: Summary,
    pub table: String,
}

/// Renders the comparison table and gathers loss curves into `report/`.
pub fn report(run_dir: &Path) -> Result<Report> {
    let paths = RunPaths::new(run_dir);
    let results_path = paths.results();
    if !results_path.exists() {
        return Err(Error::MissingArtifact {
            path: results_path,
            producer: "probe",
        });
    }
    let results = read_results(&results_path)?;
    let summary = summarize(&results)?;
    let table = render_table(&summary);
    let dir = paths.report_dir();
    let header = summary.config_hashes.iter().map(|h| hash_line(h)).collect::<String>();
    write_file(&dir.join("comparison.md"), format!("{header}\n{table}"))?;
    write_file(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    let mut dae_csv = header.clone() + "seed,epoch,train_loss,val_loss\n";
    let mut con_csv = header + "mode,seed,epoch,batch,loss\n";
    for (s, seed_dir) in seed_dirs(run_dir)? {
        let history = seed_dir.join("dae").join("history.csv");
        if history.exists() {
            for rec in csv_rows(&history)? {
                let _ = writeln!(dae_csv, "{s},{}", rec.iter().collect::<Vec<_>>().join(","));
            }
        }
        for mode in [PlanMode::Guided, PlanMode::Random] {
            let loss = seed_dir.join(mode.as_str()).join("contrastive").join("loss.csv");
            if loss.exists() {
                for rec in csv_rows(&loss)? {
                    let _ = writeln!(
                        con_csv,
                        "{},{s},{}",
                        mode.as_str(),
                        rec.iter().collect::<Vec<_>>().join(",")
                    );
                }
            }
        }
    }
    write_file(&dir.join("dae_loss.csv"), dae_csv)?;
    write_file(&dir.join("contrastive_loss.csv"), con_csv)?;
    Ok(Report { summary, table })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: Method, target: EvalTarget, seed: u64, acc: f64, ds: &str) -> EvalReport {
        EvalReport {
            method,
            target,
            accuracy: acc,
            seed,
            config_hash: "c".into(),
            dataset_hash: ds.into(),
            best_epoch: 1,
            epochs_run: 1,
        }
    }

    #[test]
    fn summary_means_and_deltas() {
        let rs = vec![
            report(Method::Guided, EvalTarget::P3, 0, 40.0, "d"),
            report(Method::Guided, EvalTarget::P3, 1, 42.0, "d"),
            report(Method::RandomBaseline, EvalTarget::P3, 0, 39.0, "d"),
        ];
        let s = summarize(&rs).unwrap();
        assert_eq!(s.mean(Method::Guided, EvalTarget::P3), Some(41.0));
        assert_eq!(s.delta(EvalTarget::P3), Some(2.0));
        assert!(render_table(&s).contains("| guided | - | - | 41.00 | - | 2 |"));
    }

    #[test]
    fn mixed_datasets_are_refused() {
        let rs = vec![
            report(Method::Guided, EvalTarget::P3, 0, 40.0, "aaaaaaaaaaaaaaaa"),
            report(Method::RandomBaseline, EvalTarget::P3, 0, 39.0, "bbbbbbbbbbbbbbbb"),
        ];
        assert!(matches!(summarize(&rs), Err(Error::Incompatible(_))));
    }

    #[test]
    fn upsert_replaces_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        upsert_results(&path, &[report(Method::RandomBaseline, EvalTarget::P3, 0, 1.0, "d")]).unwrap();
        upsert_results(&path, &[report(Method::Guided, EvalTarget::P3, 0, 2.0, "d")]).unwrap();
        upsert_results(&path, &[report(Method::RandomBaseline, EvalTarget::P3, 0, 3.0, "d")]).unwrap();
        let rs = read_results(&path).unwrap();
        assert_eq!(rs.len(), 2);
        assert_eq!(rs[0].method, Method::Guided);
        assert_eq!(rs[1].accuracy, 3.0);
    }
}
