//! Inference, per-case metrics, report aggregation and domain-code analyses.

pub mod lodo;
pub mod metrics;
pub mod stats;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{crop, pad_symmetric};
use crate::dac::DomainCode;
use crate::data::{normalize, Case, DomainDataset};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::Tensor;

pub use lodo::{run_holdout, run_lodo, HoldoutRun, LodoConfig, LodoOutcome};
pub use metrics::{asd, dsc};
pub use stats::{linear_probe_accuracy, two_sample_ttest, TTest};

/// Normalize, then pad to a size the backbone accepts. Returns the batch-of-one
/// input and the padding offsets.
fn prepare_input(model: &Model, image: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let bcfg = &model.config().backbone;
    if image.rank() != bcfg.spatial_rank + 1 || image.shape()[0] != bcfg.in_channels {
        return Err(Error::shape(format!(
            "image {:?} does not match a model with {} input channels and spatial rank {}",
            image.shape(),
            bcfg.in_channels,
            bcfg.spatial_rank
        )));
    }
    let spatial = &image.shape()[1..];
    if bcfg.strict {
        bcfg.check_spatial(spatial)?;
    }
    let target = bcfg.padded_extent(spatial);
    let (padded, offsets) = pad_symmetric(&normalize(image), &target)?;
    let mut shape = vec![1];
    shape.extend_from_slice(padded.shape());
    Ok((padded.reshape(&shape)?, offsets))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mask: Vec<u8>,
    pub code: Option<DomainCode>,
    /// Content-adaptive filters used for this image.
    pub content_filters: Option<Vec<f32>>,
}

/// Segment one `[channels, spatial..]` image with the finest head.
pub fn predict(model: &Model, image: &Tensor) -> Result<Prediction> {
    predict_with(model, image, None)
}

/// As [`predict`], optionally replacing the generated content filters.
pub fn predict_with(model: &Model, image: &Tensor, content_filters: Option<&[f32]>) -> Result<Prediction> {
    let (input, offsets) = prepare_input(model, image)?;
    let padded = input.spatial().to_vec();
    let spatial = image.shape()[1..].to_vec();
    let mut g = Graph::inference();
    let x = g.constant(input);
    let opts = ForwardOptions {
        content_filters: match content_filters {
            Some(f) => Some(Tensor::from_vec(&[1, f.len()], f.to_vec())?),
            None => None,
        },
        ..ForwardOptions::inference()
    };
    let out = model.forward(&mut g, x, &opts)?;
    let probs = g.value(out.probs[0]);
    let classes = probs.channels();
    let pvol: usize = padded.iter().product();
    let channels: Vec<Vec<f32>> = (0..classes)
        .map(|c| crop(&probs.data()[c * pvol..(c + 1) * pvol], &padded, &offsets, &spatial))
        .collect();
    let vol: usize = spatial.iter().product();
    let mask = (0..vol)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if channels[c][i] > channels[best][i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    let code = match out.domain_code {
        Some(v) => Some(code_from_row(g.value(v).data())?),
        None => None,
    };
    let content_filters = out.content_filters.map(|v| g.value(v).data().to_vec());
    Ok(Prediction {
        mask,
        code,
        content_filters,
    })
}

fn code_from_row(row: &[f32]) -> Result<DomainCode> {
    let s: f64 = row.iter().map(|&v| v as f64).sum();
    DomainCode::new(row.iter().map(|&v| v as f64 / s).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub domain_id: usize,
    /// Percent, one entry per foreground class.
    pub dsc: Vec<f64>,
    /// Voxels, `None` where either mask is empty.
    pub asd: Vec<Option<f64>>,
    pub code: Option<Vec<f64>>,
}

pub fn score_case(case: &Case, domain_id: usize, pred: &Prediction, num_classes: usize) -> Result<CaseResult> {
    let mut d = Vec::with_capacity(num_classes - 1);
    let mut a = Vec::with_capacity(num_classes - 1);
    for c in 1..num_classes as u8 {
        d.push(dsc(&pred.mask, &case.label, c)?);
        a.push(asd(&pred.mask, &case.label, case.spatial(), c)?);
    }
    Ok(CaseResult {
        case_id: case.id.clone(),
        domain_id,
        dsc: d,
        asd: a,
        code: pred.code.as_ref().map(|c| c.probs().to_vec()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ContentMode {
    #[default]
    Generated,
    /// Give every case the content filters generated for a different case.
    Shuffled { seed: u64 },
}

/// Random permutation of `0..n` without fixed points (identity when `n < 2`).
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    if n < 2 {
        return perm;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

pub fn evaluate_cases(model: &Model, dataset: &DomainDataset, mode: ContentMode) -> Result<Vec<CaseResult>> {
    let classes = model.config().num_classes;
    let preds: Vec<Prediction> = dataset
        .cases
        .iter()
        .map(|c| predict(model, &c.image))
        .collect::<Result<_>>()?;
    let preds = match mode {
        ContentMode::Generated => preds,
        ContentMode::Shuffled { seed } => {
            let perm = derangement(dataset.cases.len(), seed);
            dataset
                .cases
                .iter()
                .zip(&perm)
                .map(|(case, &j)| {
                    let filters = preds[j]
                        .content_filters
                        .as_deref()
                        .ok_or_else(|| Error::config(format!("variant {} has no content filters", model.variant())))?;
                    predict_with(model, &case.image, Some(filters))
                })
                .collect::<Result<_>>()?
        }
    };
    dataset
        .cases
        .iter()
        .zip(&preds)
        .map(|(case, p)| score_case(case, dataset.domain_id, p, classes))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain_id: usize,
    pub cases: usize,
    pub dsc: Vec<Stat>,
    pub asd: Vec<Option<Stat>>,
    /// Cases per class whose ASD was undefined.
    pub asd_undefined: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub dsc: Vec<f64>,
    pub asd: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub label: String,
    pub num_classes: usize,
    pub rows: Vec<DomainRow>,
    /// Mean of the per-domain means.
    pub average: AverageRow,
    pub cases: Vec<CaseResult>,
    pub notes: Vec<String>,
}

pub const REPORT_NOTES: [&str; 3] = [
    "DSC of two empty masks is defined as 100.",
    "ASD is undefined when either mask is empty; such cases are excluded from ASD means and counted per domain.",
    "Each 2D case is one slice; 3D cases are scored per volume.",
];

impl Report {
    pub fn from_cases(label: impl Into<String>, num_classes: usize, cases: Vec<CaseResult>) -> Self {
        let fg = num_classes.saturating_sub(1);
        let mut ids: Vec<usize> = cases.iter().map(|c| c.domain_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let rows: Vec<DomainRow> = ids
            .iter()
            .map(|&d| {
                let mine: Vec<&CaseResult> = cases.iter().filter(|c| c.domain_id == d).collect();
                let dsc = (0..fg)
                    .map(|k| Stat::of(&mine.iter().map(|c| c.dsc[k]).collect::<Vec<_>>()).expect("non-empty domain"))
                    .collect();
                let asd_vals: Vec<Vec<f64>> = (0..fg)
                    .map(|k| mine.iter().filter_map(|c| c.asd[k]).collect())
                    .collect();
                DomainRow {
                    domain_id: d,
                    cases: mine.len(),
                    dsc,
                    asd: asd_vals.iter().map(|v| Stat::of(v)).collect(),
                    asd_undefined: asd_vals.iter().map(|v| mine.len() - v.len()).collect(),
                }
            })
            .collect();
        let average = AverageRow {
            dsc: (0..fg)
                .map(|k| rows.iter().map(|r| r.dsc[k].mean).sum::<f64>() / rows.len().max(1) as f64)
                .collect(),
            asd: (0..fg)
                .map(|k| {
                    let v: Vec<f64> = rows.iter().filter_map(|r| r.asd[k].map(|s| s.mean)).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect(),
        };
        Self {
            label: label.into(),
            num_classes,
            rows,
            average,
            cases,
            notes: REPORT_NOTES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Average-row DSC over foreground classes.
    pub fn mean_dsc(&self) -> f64 {
        self.average.dsc.iter().sum::<f64>() / self.average.dsc.len().max(1) as f64
    }

    pub fn mean_asd(&self) -> Option<f64> {
        let v: Vec<f64> = self.average.asd.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn render_table(&self) -> String {
        let fg = self.num_classes.saturating_sub(1);
        let mut s = format!("{}\n", self.label);
        let mut header = format!("{:<10}{:>6}", "Domain", "Cases");
        for k in 1..=fg {
            header += &format!("{:>18}{:>18}", format!("DSC c{k} (%)"), format!("ASD c{k} (px)"));
        }
        s += &header;
        s.push('\n');
        for r in &self.rows {
            let mut line = format!("{:<10}{:>6}", format!("D{}", r.domain_id), r.cases);
            for k in 0..fg {
                line += &format!("{:>18}", format!("{:.2}±{:.2}", r.dsc[k].mean, r.dsc[k].std));
                line += &format!(
                    "{:>18}",
                    r.asd[k].map_or("n/a".to_string(), |a| format!("{:.2}±{:.2}", a.mean, a.std))
                );
            }
            s += &line;
            s.push('\n');
        }
        let mut line = format!("{:<10}{:>6}", "Average", self.cases.len());
        for k in 0..fg {
            line += &format!("{:>18}", format!("{:.2}", self.average.dsc[k]));
            line += &format!("{:>18}", self.average.asd[k].map_or("n/a".into(), |a| format!("{a:.2}")));
        }
        s += &line;
        s.push('\n');
        for n in &self.notes {
            s += &format!("* {n}\n");
        }
        s
    }
}

/// Row-normalized confusion matrix; rows are true labels. Rows without
/// samples stay zero.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1.0;
    }
    for row in &mut m {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    m
}

pub fn mean_diagonal(m: &[Vec<f64>]) -> f64 {
    m.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / m.len().max(1) as f64
}

/// Domain codes of every case, in order.
pub fn domain_codes(model: &Model, dataset: &DomainDataset) -> Result<Vec<DomainCode>> {
    dataset
        .cases
        .iter()
        .map(|c| {
            predict(model, &c.image)?
                .code
                .ok_or_else(|| Error::config(format!("variant {} predicts no domain code", model.variant())))
        })
        .collect()
}

/// Confusion of the domain predictor on per-source validation sets given in
/// the model's source order.
pub fn domain_confusion(model: &Model, val_sets: &[DomainDataset]) -> Result<Vec<Vec<f64>>> {
    let k = model.config().num_domains;
    if val_sets.len() != k {
        return Err(Error::invalid(format!("expected {k} validation sets, got {}", val_sets.len())));
    }
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (i, ds) in val_sets.iter().enumerate() {
        for code in domain_codes(model, ds)? {
            truth.push(i);
            pred.push(code.argmax());
        }
    }
    Ok(confusion_matrix(&truth, &pred, k))
}

/// `table[d][r]`: percentage of codes that put source `d` at rank `r`
/// (rank 0 = largest probability).
pub fn ranking_table(codes: &[DomainCode]) -> Vec<Vec<f64>> {
    let k = codes.first().map_or(0, DomainCode::len);
    let mut t = vec![vec![0.0; k]; k];
    for code in codes {
        for (rank, d) in code.ranking().into_iter().enumerate() {
            t[d][rank] += 100.0 / codes.len() as f64;
        }
    }
    t
}

pub fn domain_ranking_table(model: &Model, target: &DomainDataset) -> Result<Vec<Vec<f64>>> {
    Ok(ranking_table(&domain_codes(model, target)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub case_id: String,
    pub domain_id: usize,
    /// GAP of the projected finest decoder features.
    pub pre: Vec<f32>,
    /// GAP of their domain-adaptive dynamic response.
    pub post: Vec<f32>,
    /// GAP of the domain-adaptive head output.
    pub head: Vec<f32>,
}

pub fn export_features(model: &Model, datasets: &[DomainDataset]) -> Result<Vec<FeatureRecord>> {
    let mut out = Vec::new();
    for ds in datasets {
        for case in &ds.cases {
            let (input, _) = prepare_input(model, &case.image)?;
            let mut g = Graph::inference();
            let x = g.constant(input);
            let (pre, dynamic) = model.domain_head_features(&mut g, x)?;
            let head = match model.variant().residual_sign() {
                crate::dac::ResidualSign::Minus => g.sub(pre, dynamic)?,
                crate::dac::ResidualSign::Plus => g.add(pre, dynamic)?,
            };
            let pool = |g: &mut Graph, v| {
                let p = g.global_avg_pool(v);
                g.value(p).data().to_vec()
            };
            out.push(FeatureRecord {
                case_id: case.id.clone(),
                domain_id: ds.domain_id,
                pre: pool(&mut g, pre),
                post: pool(&mut g, dynamic),
                head: pool(&mut g, head),
            });
        }
    }
    Ok(out)
}
