//! Defense reports: per-output rows, summaries and the transfer matrix.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::Perturbation;
use super::metrics::{distance, psnr, DistanceKind};
use super::perceptual::perceptual_distance;
use crate::autograd::Var;
use crate::dataio::{batch_to_images, images_to_batch, DomainLabel, ImageTensor};
use crate::error::{config, Error, Result};
use crate::models::{ArchName, ModelHandle};
use crate::tensor::Tensor;
use crate::training::DomainSampler;
use crate::Task;

/// Forward passes are chunked to bound memory.
const CHUNK: usize = 32;

/// Attribute-domain choice of a model: the defender's set or a different one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainTag {
    SD,
    DD,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainTag::SD => "SD",
            DomainTag::DD => "DD",
        })
    }
}

impl FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SD" => Ok(DomainTag::SD),
            "DD" => Ok(DomainTag::DD),
            _ => Err(config(format!("unknown domain choice {s:?}, expected SD or DD"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub task: Task,
    pub surrogate_arch: ArchName,
    pub target_arch: ArchName,
    pub domains: DomainTag,
    pub epsilon: f64,
    /// `pg`, `noise` or `clean`.
    pub perturbation: String,
    /// Same architecture and domain choice as the surrogate.
    pub gray_box: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: usize,
    /// Domain slot for editing; always 0 for reenactment.
    pub domain: usize,
    pub l1: f64,
    pub l2: f64,
    /// PSNR of the infected input against the clean one, when the row has
    /// its own input pair.
    pub psnr: Option<f64>,
    pub perceptual: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub setting: Setting,
    pub metric: DistanceKind,
    pub threshold: f64,
    pub total: usize,
    pub successes: usize,
    pub dsr: f64,
    pub mean_l1: f64,
    pub mean_l2: f64,
    pub mean_perceptual: f64,
    /// Smallest finite input PSNR; absent when every input is unchanged.
    pub min_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefenseReport {
    pub setting: Setting,
    pub threshold: f64,
    pub rows: Vec<ImageRow>,
}

/// One output pair with its bookkeeping, before metrics are taken.
pub struct OutputPair<'a> {
    pub id: usize,
    pub domain: usize,
    pub inputs: Option<(&'a ImageTensor, &'a ImageTensor)>,
    pub clean: &'a ImageTensor,
    pub infected: &'a ImageTensor,
}

impl DefenseReport {
    pub fn from_pairs(setting: Setting, threshold: f64, pairs: &[OutputPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(config("a report needs at least one output pair"));
        }
        let kind = DistanceKind::for_task(setting.task);
        let rows = pairs
            .par_iter()
            .map(|p| {
                let l1 = distance(p.clean, p.infected, DistanceKind::L1)?;
                let l2 = distance(p.clean, p.infected, DistanceKind::L2)?;
                let psnr = match p.inputs {
                    Some((x, xp)) => Some(psnr(x, xp)?),
                    None => None,
                };
                let d = if kind == DistanceKind::L1 { l1 } else { l2 };
                Ok(ImageRow {
                    id: p.id,
                    domain: p.domain,
                    l1,
                    l2,
                    psnr,
                    perceptual: perceptual_distance(p.clean, p.infected)?,
                    success: d > threshold,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { setting, threshold, rows })
    }

    pub fn metric(&self) -> DistanceKind {
        DistanceKind::for_task(self.setting.task)
    }

    pub fn successes(&self) -> usize {
        self.rows.iter().filter(|r| r.success).count()
    }

    pub fn dsr(&self) -> f64 {
        self.successes() as f64 / self.rows.len() as f64
    }

    fn mean(&self, f: impl Fn(&ImageRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_l1(&self) -> f64 {
        self.mean(|r| r.l1)
    }

    pub fn mean_l2(&self) -> f64 {
        self.mean(|r| r.l2)
    }

    /// Mean of the task's success metric.
    pub fn mean_distance(&self) -> f64 {
        match self.metric() {
            DistanceKind::L1 => self.mean_l1(),
            DistanceKind::L2 => self.mean_l2(),
        }
    }

    pub fn summary(&self) -> ReportSummary {
        let min_psnr = self
            .rows
            .iter()
            .filter_map(|r| r.psnr)
            .filter(|p| p.is_finite())
            .reduce(f64::min);
        ReportSummary {
            setting: self.setting.clone(),
            metric: self.metric(),
            threshold: self.threshold,
            total: self.rows.len(),
            successes: self.successes(),
            dsr: self.dsr(),
            mean_l1: self.mean_l1(),
            mean_l2: self.mean_l2(),
            mean_perceptual: self.mean(|r| r.perceptual),
            min_psnr,
        }
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    task: Task,
    surrogate_arch: ArchName,
    target_arch: ArchName,
    domains: DomainTag,
    epsilon: f64,
    perturbation: &'a str,
    gray_box: bool,
    id: usize,
    domain: usize,
    l1: f64,
    l2: f64,
    psnr: Option<f64>,
    perceptual: f64,
    success: bool,
}

/// Write `<stem>.csv` (one line per output pair) and `<stem>.json` (one
/// summary per report). Output depends only on the reports.
pub fn write_reports(dir: &Path, stem: &str, reports: &[DefenseReport]) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in reports {
        let s = &r.setting;
        for row in &r.rows {
            w.serialize(CsvRow {
                task: s.task,
                surrogate_arch: s.surrogate_arch,
                target_arch: s.target_arch,
                domains: s.domains,
                epsilon: s.epsilon,
                perturbation: &s.perturbation,
                gray_box: s.gray_box,
                id: row.id,
                domain: row.domain,
                l1: row.l1,
                l2: row.l2,
                psnr: row.psnr,
                perceptual: row.perceptual,
                success: row.success,
            })?;
        }
    }
    w.flush()?;
    let summaries: Vec<ReportSummary> = reports.iter().map(DefenseReport::summary).collect();
    fs::write(&json_path, serde_json::to_string_pretty(&summaries)? + "\n")?;
    Ok((csv_path, json_path))
}

pub fn read_summaries(path: &Path) -> Result<Vec<ReportSummary>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn forge_chunked(images: &[ImageTensor], f: impl Fn(&Tensor, std::ops::Range<usize>) -> Result<Tensor>) -> Result<Vec<ImageTensor>> {
    let mut out = Vec::with_capacity(images.len());
    for start in (0..images.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(images.len());
        let y = f(&images_to_batch(&images[start..end]), start..end)?;
        out.extend(batch_to_images(&y)?);
    }
    Ok(out)
}

/// `M(x, c)` for every image under one target tensor `[N,K]`.
pub fn forge_edits(editor: &ModelHandle, images: &[ImageTensor], targets: &Tensor) -> Result<Vec<ImageTensor>> {
    let p = editor.param_vars(false);
    let k = targets.shape()[1];
    forge_chunked(images, |x, r| {
        let c = Tensor::from_vec(&[r.len(), k], targets.data()[r.start * k..r.end * k].to_vec());
        Ok(editor.edit(&p, &Var::constant(x.clone()), &c)?.value().clone())
    })
}

/// `M(z)` for every landmark map.
pub fn forge_reenactment(model: &ModelHandle, landmarks: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
    let p = model.param_vars(false);
    forge_chunked(landmarks, |z, _| Ok(model.translate(&p, &Var::constant(z.clone()))?.value().clone()))
}

/// `j` fixed target domains per image, `[N,K]` each.
pub fn evaluation_domains(labels: &[DomainLabel], attribute_names: &[String], j: usize, seed: u64) -> Result<Vec<Tensor>> {
    let sampler = DomainSampler::new(attribute_names);
    sampler.validate(j)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample_batch(labels, j, &mut rng))
}

/// Forge clean and infected inputs through an editor under every domain.
pub fn evaluate_editing(
    setting: Setting,
    threshold: f64,
    editor: &ModelHandle,
    images: &[ImageTensor],
    infected: &[ImageTensor],
    domains: &[Tensor],
) -> Result<DefenseReport> {
    if images.len() != infected.len() {
        return Err(config("clean and infected image counts differ"));
    }
    let mut outs = Vec::with_capacity(domains.len());
    for c in domains {
        outs.push((forge_edits(editor, images, c)?, forge_edits(editor, infected, c)?));
    }
    let mut pairs = Vec::new();
    for (j, (y, yp)) in outs.iter().enumerate() {
        for i in 0..images.len() {
            pairs.push(OutputPair {
                id: i,
                domain: j,
                inputs: Some((&images[i], &infected[i])),
                clean: &y[i],
                infected: &yp[i],
            });
        }
    }
    pairs.sort_by_key(|p| (p.id, p.domain));
    DefenseReport::from_pairs(setting, threshold, &pairs)
}

/// Compare a clean-trained and an infected-trained translator on held-out
/// landmarks.
pub fn evaluate_reenactment(
    setting: Setting,
    threshold: f64,
    clean_model: &ModelHandle,
    infected_model: &ModelHandle,
    landmarks: &[ImageTensor],
) -> Result<DefenseReport> {
    let y = forge_reenactment(clean_model, landmarks)?;
    let yp = forge_reenactment(infected_model, landmarks)?;
    let pairs: Vec<OutputPair> = y
        .iter()
        .zip(&yp)
        .enumerate()
        .map(|(i, (a, b))| OutputPair {
            id: i,
            domain: 0,
            inputs: None,
            clean: a,
            infected: b,
        })
        .collect();
    DefenseReport::from_pairs(setting, threshold, &pairs)
}

/// A trained editor to test against, with the attributes it was trained on
/// (indices into the evaluation labels).
pub struct TransferTarget<'a> {
    pub arch: ArchName,
    pub domains: DomainTag,
    pub model: &'a ModelHandle,
    pub attributes: Vec<usize>,
}

/// Evaluation inputs shared by every cell of a transfer matrix.
pub struct EvalSet<'a> {
    pub images: &'a [ImageTensor],
    pub labels: &'a [DomainLabel],
    pub attribute_names: &'a [String],
    pub domains_per_image: usize,
    pub seed: u64,
}

/// One report per target: poison the evaluation images once, then forge
/// clean and infected inputs through each target on its own domains.
pub fn transfer_matrix(
    perturbation: Perturbation,
    surrogate: (ArchName, DomainTag),
    targets: &[TransferTarget],
    eval: &EvalSet,
    epsilon: f64,
    threshold: f64,
) -> Result<Vec<DefenseReport>> {
    if targets.is_empty() {
        return Err(config("transfer matrix without target models"));
    }
    let infected = perturbation.apply(eval.images, epsilon)?;
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        if t.model.spec.num_attrs != t.attributes.len() {
            return Err(config(format!(
                "{} target expects {} attributes, {} selected",
                t.arch,
                t.model.spec.num_attrs,
                t.attributes.len()
            )));
        }
        let labels: Vec<DomainLabel> = eval.labels.iter().map(|l| l.select(&t.attributes)).collect();
        let names: Vec<String> = t.attributes.iter().map(|&i| eval.attribute_names[i].clone()).collect();
        let domains = evaluation_domains(&labels, &names, eval.domains_per_image, eval.seed)?;
        let setting = Setting {
            task: Task::AttributeEditing,
            surrogate_arch: surrogate.0,
            target_arch: t.arch,
            domains: t.domains,
            epsilon,
            perturbation: perturbation.tag().into(),
            gray_box: (t.arch, t.domains) == surrogate,
        };
        out.push(evaluate_editing(setting, threshold, t.model, eval.images, &infected, &domains)?);
    }
    Ok(out)
}
