//! Leave-one-domain-out orchestration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{domain_confusion, domain_ranking_table, evaluate_cases, CaseResult, ContentMode, Report};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::trainer::{train, TrainConfig, TrainOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoConfig {
    /// `num_domains` is replaced by the number of source domains of each run.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Source cases per domain held back for the domain-confusion matrix.
    pub val_cases: usize,
    /// Also evaluate with content filters shuffled across target cases.
    pub shuffled_eval: bool,
    /// Per-holdout artifacts go to `output/holdout_<id>`.
    pub output: Option<PathBuf>,
}

pub struct HoldoutRun {
    pub holdout: usize,
    pub sources: Vec<usize>,
    pub cases: Vec<CaseResult>,
    pub shuffled_cases: Option<Vec<CaseResult>>,
    pub confusion: Option<Vec<Vec<f64>>>,
    pub ranking: Option<Vec<Vec<f64>>>,
    pub final_loss: f64,
    pub model: Model,
}

pub struct LodoOutcome {
    pub report: Report,
    pub shuffled: Option<Report>,
    pub runs: Vec<HoldoutRun>,
}

/// Train on every domain except `holdout` and evaluate on it.
pub fn run_holdout(datasets: &[DomainDataset], holdout: usize, cfg: &LodoConfig) -> Result<HoldoutRun> {
    let target = datasets
        .iter()
        .find(|d| d.domain_id == holdout)
        .ok_or_else(|| Error::invalid(format!("held-out domain {holdout} is not in the dataset")))?;
    let (train_sets, val_sets): (Vec<DomainDataset>, Vec<DomainDataset>) = datasets
        .iter()
        .filter(|d| d.domain_id != holdout)
        .map(|d| {
            if d.len() <= cfg.val_cases {
                return Err(Error::invalid(format!(
                    "domain {} has {} cases, cannot hold back {}",
                    d.domain_id,
                    d.len(),
                    cfg.val_cases
                )));
            }
            Ok(d.split(cfg.val_cases))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let sources: Vec<usize> = train_sets.iter().map(|d| d.domain_id).collect();
    let mcfg = ModelConfig {
        num_domains: sources.len(),
        ..cfg.model.clone()
    };
    let mut model = Model::new(mcfg, cfg.train.seed)?;
    let output = cfg.output.as_ref().map(|o| TrainOutput {
        dir: o.join(format!("holdout_{holdout}")),
    });
    let outcome = train(&mut model, &train_sets, &cfg.train, output.as_ref())?;
    if outcome.seen_domains.contains(&holdout) {
        return Err(Error::invalid(format!("held-out domain {holdout} appeared in a training batch")));
    }
    log::info!("holdout {holdout}: final loss {:.4}", outcome.final_loss);
    let cases = evaluate_cases(&model, target, ContentMode::Generated)?;
    let shuffled_cases = if cfg.shuffled_eval && model.variant().uses_cac() {
        Some(evaluate_cases(
            &model,
            target,
            ContentMode::Shuffled {
                seed: cfg.train.seed ^ holdout as u64,
            },
        )?)
    } else {
        None
    };
    let (confusion, ranking) = if model.variant().has_domain_predictor() {
        let val_sets = if cfg.val_cases > 0 { val_sets } else { train_sets };
        (
            Some(domain_confusion(&model, &val_sets)?),
            Some(domain_ranking_table(&model, target)?),
        )
    } else {
        (None, None)
    };
    Ok(HoldoutRun {
        holdout,
        sources,
        cases,
        shuffled_cases,
        confusion,
        ranking,
        final_loss: outcome.final_loss,
        model,
    })
}

/// Hold out each domain in turn.
pub fn run_lodo(datasets: &[DomainDataset], cfg: &LodoConfig) -> Result<LodoOutcome> {
    if datasets.len() < 3 {
        return Err(Error::invalid(format!(
            "leave-one-domain-out needs at least 3 domains, got {}",
            datasets.len()
        )));
    }
    let mut runs = Vec::with_capacity(datasets.len());
    for d in datasets {
        runs.push(run_holdout(datasets, d.domain_id, cfg)?);
    }
    let label = cfg.model.variant.label();
    let report = Report::from_cases(
        label.clone(),
        cfg.model.num_classes,
        runs.iter().flat_map(|r| r.cases.iter().cloned()).collect(),
    );
    let shuffled = if runs.iter().all(|r| r.shuffled_cases.is_some()) && !runs.is_empty() {
        Some(Report::from_cases(
            "DC(p)AC",
            cfg.model.num_classes,
            runs.iter()
                .flat_map(|r| r.shuffled_cases.iter().flatten().cloned())
                .collect(),
        ))
    } else {
        None
    };
    Ok(LodoOutcome { report, shuffled, runs })
}
