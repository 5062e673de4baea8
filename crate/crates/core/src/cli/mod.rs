//! Command-line front end: `synth`, `train`, `eval` and `ablate`.

mod plot;
mod settings;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_domains, read_dataset, write_dataset, DatasetManifest, DomainDataset, SyntheticDomainSpec};
use crate::error::{Error, Result};
use crate::eval::{
    domain_confusion, domain_ranking_table, evaluate_cases, export_features, mean_diagonal, run_holdout, two_sample_ttest,
    CaseResult, ContentMode, LodoConfig, Report,
};
use crate::model::{Model, ModelConfig, Variant};
use crate::trainer::{load_checkpoint, train, StepRecord, TrainOutput};

pub use settings::{ConfigFile, Settings, TrainFlags};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CELL_FILE: &str = "cell.json";
pub const DEVICE_ENV: &str = "DCAC_DEVICE";

#[derive(Parser, Debug)]
#[command(name = "dcac", version, about = "Domain and content adaptive convolution for domain-generalizable segmentation")]
pub struct Cli {
    /// Compute device (overrides DCAC_DEVICE). Only `cpu` is available.
    #[arg(long, global = true)]
    pub device: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset.
    Synth(SynthArgs),
    /// Train one (variant, held-out domain) cell.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its held-out domain.
    Eval(EvalArgs),
    /// Run the variant x held-out ablation matrix.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub domains: usize,
    #[arg(long, default_value_t = 40)]
    pub cases: usize,
    /// Edge length of each image.
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    /// 2 for slices, 3 for volumes.
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub holdout: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the held-out domain recorded next to the checkpoint.
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Source cases per domain used for the confusion matrix.
    #[arg(long)]
    pub val_cases: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Also write pooled features before and after the domain-adaptive head.
    #[arg(long)]
    pub export_features: bool,
    /// Write loss-curve and confusion-matrix images.
    #[arg(long)]
    pub plot: bool,
    /// Give every case the content filters of another case (DC(p)AC).
    #[arg(long)]
    pub shuffle_content: bool,
    /// Training log for the loss curve; defaults to the one beside the checkpoint.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variant names; defaults to the full ablation set.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
    /// Comma-separated held-out domains; defaults to every domain.
    #[arg(long, value_delimiter = ',')]
    pub holdouts: Option<Vec<usize>>,
    /// Skip the DC(p)AC evaluation of the DCAC checkpoints.
    #[arg(long)]
    pub no_shuffled: bool,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildInfo {
    pub version: String,
    pub git: Option<String>,
    pub profile: String,
}

impl BuildInfo {
    pub fn current() -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            git: option_env!("DCAC_GIT_REV").map(str::to_string),
            profile: if cfg!(debug_assertions) { "debug" } else { "release" }.to_string(),
        }
    }
}

/// Written once into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub build: BuildInfo,
    pub device: String,
    pub seed: Option<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
}

/// Held-out domain and source split of a trained cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellInfo {
    pub holdout: usize,
    pub sources: Vec<usize>,
    pub val_cases: usize,
    pub variant: Variant,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

struct ManifestWriter {
    command: &'static str,
    args: Vec<String>,
    device: String,
    started: f64,
}

impl ManifestWriter {
    fn write(&self, dir: &Path, config: serde_json::Value, seed: Option<u64>, outputs: Vec<PathBuf>) -> Result<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            args: self.args.clone(),
            config,
            build: BuildInfo::current(),
            device: self.device.clone(),
            seed,
            started_unix: self.started,
            finished_unix: now(),
            outputs,
        };
        write_json(&dir.join(MANIFEST_FILE), &m)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Create `dir`, refusing to reuse a non-empty directory unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::invalid(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn resolve_device(flag: Option<&str>) -> Result<String> {
    let device = match flag {
        Some(d) => d.to_string(),
        None => std::env::var(DEVICE_ENV).unwrap_or_else(|_| "cpu".into()),
    };
    if device.eq_ignore_ascii_case("cpu") {
        Ok("cpu".into())
    } else {
        Err(Error::config(format!("device `{device}` is not available; this build runs on cpu only")))
    }
}

/// Parse `args` and run the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cli: Cli, args: Vec<String>) -> Result<()> {
    let device = resolve_device(cli.device.as_deref())?;
    let command = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
    };
    let mw = ManifestWriter {
        command,
        args,
        device,
        started: now(),
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, &mw),
        Command::Train(a) => cmd_train(&a, &mw),
        Command::Eval(a) => cmd_eval(&a, &mw),
        Command::Ablate(a) => cmd_ablate(&a, &mw),
    }
}

fn cmd_synth(a: &SynthArgs, mw: &ManifestWriter) -> Result<()> {
    if a.domains < 3 {
        return Err(Error::invalid(format!(
            "leave-one-domain-out needs at least 3 domains, got {}",
            a.domains
        )));
    }
    if !(2..=3).contains(&a.rank) || a.size == 0 || a.cases == 0 {
        return Err(Error::invalid("need rank 2 or 3, a positive size and at least one case"));
    }
    prepare_dir(&a.out, a.force)?;
    let mut spec = SyntheticDomainSpec::new(a.seed, vec![a.size; a.rank]);
    spec.num_classes = a.classes;
    let datasets = generate_synthetic_domains(&spec, a.domains, a.cases)?;
    let manifest = write_dataset(&a.out, &datasets, a.classes)?;
    log::info!("wrote {} domains x {} cases to {}", manifest.num_domains, a.cases, a.out.display());
    let config = serde_json::json!({
        "domains": a.domains,
        "cases": a.cases,
        "size": a.size,
        "rank": a.rank,
        "classes": a.classes,
        "seed": a.seed,
        "spec": spec,
    });
    mw.write(&a.out, config, Some(a.seed), vec![a.out.join("manifest.json")])
}

/// Split every source domain into training and validation cases.
fn split_sources(datasets: &[DomainDataset], holdout: usize, val_cases: usize) -> Result<(Vec<DomainDataset>, Vec<DomainDataset>)> {
    if !datasets.iter().any(|d| d.domain_id == holdout) {
        let ids: Vec<usize> = datasets.iter().map(|d| d.domain_id).collect();
        return Err(Error::invalid(format!("held-out domain {holdout} not in dataset (domains {ids:?})")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for d in datasets.iter().filter(|d| d.domain_id != holdout) {
        if d.len() <= val_cases {
            return Err(Error::invalid(format!(
                "domain {} has {} cases, cannot hold back {val_cases}",
                d.domain_id,
                d.len()
            )));
        }
        let (t, v) = d.split(val_cases);
        train.push(t);
        val.push(v);
    }
    Ok((train, val))
}

fn model_config(settings: &Settings, manifest: &DatasetManifest, k: usize) -> ModelConfig {
    let mut backbone = settings.backbone.clone();
    backbone.spatial_rank = manifest.spatial_rank;
    backbone.in_channels = manifest.in_channels;
    ModelConfig {
        backbone,
        num_domains: k,
        num_classes: manifest.num_classes,
        variant: settings.variant,
    }
}

fn cmd_train(a: &TrainArgs, mw: &ManifestWriter) -> Result<()> {
    let settings = Settings::resolve(&a.flags)?;
    let (manifest, datasets) = read_dataset(&a.data)?;
    let (train_sets, _) = split_sources(&datasets, a.holdout, settings.val_cases)?;
    let sources: Vec<usize> = train_sets.iter().map(|d| d.domain_id).collect();
    let mut tcfg = settings.train.clone();
    tcfg.patch = settings.patch_for(manifest.spatial_rank)?;
    let mcfg = model_config(&settings, &manifest, sources.len());
    prepare_dir(&a.out, a.force)?;
    let mut model = Model::new(mcfg, tcfg.seed)?;
    let output = TrainOutput { dir: a.out.clone() };
    let outcome = train(&mut model, &train_sets, &tcfg, Some(&output))?;
    if outcome.seen_domains.contains(&a.holdout) {
        return Err(Error::invalid(format!("held-out domain {} appeared in training", a.holdout)));
    }
    let cell = CellInfo {
        holdout: a.holdout,
        sources,
        val_cases: settings.val_cases,
        variant: settings.variant,
    };
    write_json(&a.out.join(CELL_FILE), &cell)?;
    let snapshot = serde_json::json!({
        "data": a.data,
        "holdout": a.holdout,
        "settings": settings.snapshot(),
    });
    write_json(&a.out.join("config.json"), &snapshot)?;
    println!("final loss {:.5} after {} steps", outcome.final_loss, outcome.log.len());
    mw.write(
        &a.out,
        snapshot,
        Some(tcfg.seed),
        vec![output.checkpoint_path(), output.log_path(), a.out.join(CELL_FILE), a.out.join("config.json")],
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub variant: Variant,
    pub holdout: usize,
    pub shuffled_content: bool,
    pub mean_dsc: f64,
    pub mean_asd: Option<f64>,
    pub confusion_diagonal: Option<f64>,
}

fn load_cell(checkpoint: &Path) -> Option<CellInfo> {
    let p = checkpoint.parent()?.join(CELL_FILE);
    read_json(&p).ok()
}

fn cmd_eval(a: &EvalArgs, mw: &ManifestWriter) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cell = load_cell(&a.checkpoint);
    let holdout = a
        .holdout
        .or(cell.as_ref().map(|c| c.holdout))
        .ok_or_else(|| Error::invalid("--holdout is required when the checkpoint has no cell record"))?;
    let val_cases = a.val_cases.or(cell.as_ref().map(|c| c.val_cases)).unwrap_or(settings::DEFAULT_VAL_CASES);
    let (manifest, datasets) = read_dataset(&a.data)?;
    let (_, val_sets) = split_sources(&datasets, holdout, val_cases)?;
    let mcfg = ckpt.meta.model.clone();
    check_compatible(&mcfg, &manifest, val_sets.len())?;
    let model = ckpt.into_model()?;
    prepare_dir(&a.out, a.force)?;
    let target = datasets.iter().find(|d| d.domain_id == holdout).expect("checked by split_sources");
    let out = evaluate_one(&model, target, &val_sets, a.shuffle_content, holdout)?;
    let mut outputs = out.write(&a.out)?;
    if a.export_features {
        let records = export_features(&model, std::slice::from_ref(target))?;
        let path = a.out.join("features.jsonl");
        write_jsonl(&path, &records)?;
        outputs.push(path);
    }
    if a.plot {
        let log_path = a
            .log
            .clone()
            .unwrap_or_else(|| a.checkpoint.with_file_name("train_log.jsonl"));
        if log_path.exists() {
            let log = read_log(&log_path)?;
            let p = a.out.join("loss_curve.png");
            plot::loss_curve(&log, &p)?;
            outputs.push(p);
        } else {
            log::warn!("no training log at {}; skipping the loss curve", log_path.display());
        }
        if let Some(m) = &out.confusion {
            let p = a.out.join("confusion.png");
            plot::matrix(m, &p)?;
            outputs.push(p);
        }
    }
    print!("{}", out.report.render_table());
    let config = serde_json::json!({
        "data": a.data,
        "checkpoint": a.checkpoint,
        "holdout": holdout,
        "val_cases": val_cases,
        "shuffle_content": a.shuffle_content,
        "export_features": a.export_features,
        "plot": a.plot,
        "model": mcfg,
    });
    mw.write(&a.out, config, None, outputs)
}

fn check_compatible(mcfg: &ModelConfig, manifest: &DatasetManifest, sources: usize) -> Result<()> {
    let b = &mcfg.backbone;
    if mcfg.num_classes != manifest.num_classes
        || b.in_channels != manifest.in_channels
        || b.spatial_rank != manifest.spatial_rank
        || (mcfg.variant.has_domain_predictor() && mcfg.num_domains != sources)
    {
        return Err(Error::config(format!(
            "checkpoint (K={}, C={}, channels={}, rank={}) does not match the dataset (sources={sources}, C={}, channels={}, rank={})",
            mcfg.num_domains,
            mcfg.num_classes,
            b.in_channels,
            b.spatial_rank,
            manifest.num_classes,
            manifest.in_channels,
            manifest.spatial_rank
        )));
    }
    Ok(())
}

struct EvalOutput {
    summary: EvalSummary,
    report: Report,
    confusion: Option<Vec<Vec<f64>>>,
    ranking: Option<Vec<Vec<f64>>>,
}

impl EvalOutput {
    fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut outputs = Vec::new();
        let p = dir.join("case_results.jsonl");
        write_jsonl(&p, &self.report.cases)?;
        outputs.push(p);
        let p = dir.join("report.json");
        write_json(&p, &self.report)?;
        outputs.push(p);
        let p = dir.join("summary.txt");
        fs::write(&p, self.report.render_table())?;
        outputs.push(p);
        let p = dir.join("eval_summary.json");
        write_json(&p, &self.summary)?;
        outputs.push(p);
        if let Some(m) = &self.confusion {
            let p = dir.join("confusion.json");
            write_json(&p, &serde_json::json!({"rows": "true source", "columns": "predicted source", "matrix": m}))?;
            outputs.push(p);
        }
        if let Some(t) = &self.ranking {
            let p = dir.join("ranking.json");
            write_json(&p, &serde_json::json!({"rows": "source", "columns": "rank", "percent": t}))?;
            outputs.push(p);
        }
        Ok(outputs)
    }
}

fn evaluate_one(
    model: &Model,
    target: &DomainDataset,
    val_sets: &[DomainDataset],
    shuffled: bool,
    holdout: usize,
) -> Result<EvalOutput> {
    let variant = model.variant();
    let mode = if shuffled {
        if !variant.uses_cac() {
            return Err(Error::config(format!("variant {variant} has no content filters to shuffle")));
        }
        ContentMode::Shuffled { seed: holdout as u64 }
    } else {
        ContentMode::Generated
    };
    let cases = evaluate_cases(model, target, mode)?;
    let label = if shuffled { "DC(p)AC".to_string() } else { variant.label() };
    let report = Report::from_cases(label, model.config().num_classes, cases);
    let (confusion, ranking) = if variant.has_domain_predictor() {
        (Some(domain_confusion(model, val_sets)?), Some(domain_ranking_table(model, target)?))
    } else {
        (None, None)
    };
    Ok(EvalOutput {
        summary: EvalSummary {
            variant,
            holdout,
            shuffled_content: shuffled,
            mean_dsc: report.mean_dsc(),
            mean_asd: report.mean_asd(),
            confusion_diagonal: confusion.as_ref().map(|m| mean_diagonal(m)),
        },
        report,
        confusion,
        ranking,
    })
}

fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Per-cell result stored by `ablate`; its presence marks the cell done.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub holdout: usize,
    pub cases: Vec<CaseResult>,
    pub final_loss: Option<f64>,
    pub confusion_diagonal: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Mean foreground DSC per held-out domain, in `holdouts` order.
    pub dsc: Vec<Option<f64>>,
    pub average: Option<f64>,
    /// Welch p-value of per-case DSC against DCAC.
    pub p_vs_dcac: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub holdouts: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut s = format!("{:<10}", "Method");
        for h in &self.holdouts {
            s += &format!("{:>10}", format!("D{h}"));
        }
        s += &format!("{:>10}{:>10}\n", "Average", "p");
        for r in &self.rows {
            s += &format!("{:<10}", r.label);
            for v in &r.dsc {
                s += &format!("{:>10}", v.map_or("-".into(), |x| format!("{x:.2}")));
            }
            s += &format!("{:>10}", r.average.map_or("-".into(), |x| format!("{x:.2}")));
            s += &format!("{:>10}\n", r.p_vs_dcac.map_or("-".into(), |x| format!("{x:.3}")));
        }
        s
    }
}

const DCPAC: &str = "DC(p)AC";

fn cell_dir(root: &Path, label: &str, holdout: usize) -> PathBuf {
    let slug: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    root.join(slug).join(format!("holdout_{holdout}"))
}

fn mean_fg(cases: &[CaseResult]) -> Vec<f64> {
    cases.iter().map(|c| c.dsc.iter().sum::<f64>() / c.dsc.len().max(1) as f64).collect()
}

fn cmd_ablate(a: &AblateArgs, mw: &ManifestWriter) -> Result<()> {
    let settings = Settings::resolve(&a.flags)?;
    let (manifest, datasets) = read_dataset(&a.data)?;
    if datasets.len() < 3 {
        return Err(Error::invalid("ablation needs at least 3 domains"));
    }
    let variants = a.variants.clone().unwrap_or_else(Variant::ablation_set);
    let holdouts = a.holdouts.clone().unwrap_or_else(|| manifest.domain_ids());
    let with_shuffled = !a.no_shuffled && variants.contains(&Variant::Dcac);
    fs::create_dir_all(&a.out)?;
    let mut tcfg = settings.train.clone();
    tcfg.patch = settings.patch_for(manifest.spatial_rank)?;
    let snapshot = serde_json::json!({
        "data": a.data,
        "variants": variants,
        "holdouts": holdouts,
        "dcpac": with_shuffled,
        "settings": settings.snapshot(),
    });
    write_json(&a.out.join("config.json"), &snapshot)?;

    let mut labels: Vec<String> = variants.iter().map(|v| v.label()).collect();
    if with_shuffled {
        let at = variants
            .iter()
            .position(|&v| v == Variant::DcacNg || v == Variant::Dcac)
            .unwrap_or(labels.len());
        labels.insert(at, DCPAC.into());
    }
    for &h in &holdouts {
        for &v in &variants {
            let label = v.label();
            let dir = cell_dir(&a.out, &label, h);
            let done = dir.join("result.json");
            let shuffled_done = cell_dir(&a.out, DCPAC, h).join("result.json");
            let need_shuffled = v == Variant::Dcac && with_shuffled && !shuffled_done.exists();
            if done.exists() && !need_shuffled {
                log::info!("{label} holdout {h}: already done");
                continue;
            }
            log::info!("{label} holdout {h}: training");
            let cfg = LodoConfig {
                model: model_config(&settings.with_variant(v), &manifest, datasets.len() - 1),
                train: tcfg.clone(),
                val_cases: settings.val_cases,
                shuffled_eval: v == Variant::Dcac && with_shuffled,
                output: dir.parent().map(Path::to_path_buf),
            };
            let run = run_holdout(&datasets, h, &cfg)?;
            let cell = CellInfo {
                holdout: h,
                sources: run.sources.clone(),
                val_cases: settings.val_cases,
                variant: v,
            };
            write_json(&dir.join(CELL_FILE), &cell)?;
            let result = CellResult {
                label: label.clone(),
                holdout: h,
                cases: run.cases.clone(),
                final_loss: Some(run.final_loss),
                confusion_diagonal: run.confusion.as_ref().map(|m| mean_diagonal(m)),
            };
            write_json(&done, &result)?;
            mw.write(&dir, serde_json::json!({"cell": cell, "settings": settings.snapshot()}), Some(tcfg.seed), vec![done.clone()])?;
            if let Some(sh) = run.shuffled_cases {
                let sdir = cell_dir(&a.out, DCPAC, h);
                fs::create_dir_all(&sdir)?;
                let sres = CellResult {
                    label: DCPAC.into(),
                    holdout: h,
                    cases: sh,
                    final_loss: None,
                    confusion_diagonal: None,
                };
                write_json(&sdir.join("result.json"), &sres)?;
                mw.write(
                    &sdir,
                    serde_json::json!({"cell": cell, "perturbation": "content filters shuffled across cases", "checkpoint": dir.join("model.ckpt")}),
                    Some(tcfg.seed),
                    vec![sdir.join("result.json")],
                )?;
            }
            let report = aggregate(&a.out, &labels, &holdouts)?;
            write_json(&a.out.join("ablation.json"), &report)?;
        }
    }
    let report = aggregate(&a.out, &labels, &holdouts)?;
    write_json(&a.out.join("ablation.json"), &report)?;
    fs::write(a.out.join("ablation.txt"), report.render())?;
    print!("{}", report.render());
    mw.write(
        &a.out,
        snapshot,
        Some(tcfg.seed),
        vec![a.out.join("ablation.json"), a.out.join("ablation.txt"), a.out.join("config.json")],
    )
}

/// Collect finished cells into the comparison table.
pub fn aggregate(root: &Path, labels: &[String], holdouts: &[usize]) -> Result<AblationReport> {
    let mut per_label: Vec<(String, Vec<Option<CellResult>>)> = Vec::new();
    for label in labels {
        let cells = holdouts
            .iter()
            .map(|&h| {
                let p = cell_dir(root, label, h).join("result.json");
                if p.exists() {
                    read_json::<CellResult>(&p).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        per_label.push((label.clone(), cells));
    }
    let dcac_label = Variant::Dcac.label();
    let dcac_scores: Option<Vec<f64>> = per_label
        .iter()
        .find(|(l, _)| *l == dcac_label)
        .map(|(_, cells)| cells.iter().flatten().flat_map(|c| mean_fg(&c.cases)).collect());
    let rows = per_label
        .iter()
        .map(|(label, cells)| {
            let dsc: Vec<Option<f64>> = cells
                .iter()
                .map(|c| {
                    c.as_ref().map(|c| {
                        let v = mean_fg(&c.cases);
                        v.iter().sum::<f64>() / v.len().max(1) as f64
                    })
                })
                .collect();
            let done: Vec<f64> = dsc.iter().flatten().copied().collect();
            let average = (done.len() == dsc.len() && !done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64);
            let mine: Vec<f64> = cells.iter().flatten().flat_map(|c| mean_fg(&c.cases)).collect();
            let p_vs_dcac = match &dcac_scores {
                Some(d) if *label != dcac_label && d.len() >= 2 && mine.len() >= 2 => {
                    two_sample_ttest(&mine, d).ok().map(|t| t.p_value)
                }
                _ => None,
            };
            AblationRow {
                label: label.clone(),
                dsc,
                average,
                p_vs_dcac,
            }
        })
        .collect();
    Ok(AblationReport {
        holdouts: holdouts.to_vec(),
        rows,
    })
}
