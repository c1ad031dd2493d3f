use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::PolarNetModel;
use crate::data::dataset::{batch_inputs, InputSpec, Sample};
use crate::data::folds::{fold_indices, kfold_split};
use crate::data::metrics::{self, Metrics};
use crate::error::{Error, Result};
use crate::grid::PriorMatrix;
use crate::tensor::{Adam, AdamConfig, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
    /// Rotation augmentation range in degrees, applied as row shifts.
    pub augment_deg: f64,
    pub prior_path: Option<PathBuf>,
    pub class_weighting: bool,
    pub model: ModelConfig,
    pub input: InputSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            batch_size: 28,
            epochs: 20,
            seed: 0,
            folds: 5,
            augment_deg: 20.0,
            prior_path: None,
            class_weighting: true,
            model: ModelConfig::default(),
            input: InputSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if !(0.0..=180.0).contains(&self.augment_deg) {
            return Err(Error::Config(format!("augmentation range {} outside [0,180]", self.augment_deg)));
        }
        if (self.input.theta, self.input.r) != self.model.input_size {
            return Err(Error::Config(format!(
                "input {}x{} does not match model input {:?}",
                self.input.theta, self.input.r, self.model.input_size
            )));
        }
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub epochs: Vec<EpochLog>,
    pub test_samples: Vec<usize>,
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
    pub metrics: Option<Metrics>,
    /// Metrics on per-subject mean scores.
    #[serde(default)]
    pub subject_metrics: Option<Metrics>,
}

/// Averages each test subject's eye scores; returns (labels, scores) in
/// first-seen subject order.
pub fn subject_scores(samples: &[Sample], test: &[usize], scores: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = Vec::new();
    let mut acc: Vec<(usize, f64, usize)> = Vec::new();
    for (&i, &s) in test.iter().zip(scores) {
        let sub = samples[i].subject;
        match order.iter().position(|&o| o == sub) {
            Some(k) => {
                acc[k].1 += s;
                acc[k].2 += 1;
            }
            None => {
                order.push(sub);
                acc.push((samples[i].label, s, 1));
            }
        }
    }
    acc.into_iter().map(|(l, s, n)| (l, s / n as f64)).unzip()
}

/// Per-image and per-subject metrics for one scored test fold.
pub fn fold_metrics(samples: &[Sample], test: &[usize], scores: &[f64]) -> (Option<Metrics>, Option<Metrics>) {
    let labels: Vec<usize> = test.iter().map(|&i| samples[i].label).collect();
    let (sl, ss) = subject_scores(samples, test, scores);
    (metrics::metrics(&labels, scores).ok(), metrics::metrics(&sl, &ss).ok())
}

fn class_weights(labels: &[usize], classes: usize, enabled: bool) -> Result<Vec<f32>> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Data("training fold contains a single class".into()));
    }
    let n = labels.len() as f32;
    Ok(counts.iter().map(|&c| if !enabled || c == 0 { 1.0 } else { n / (classes as f32 * c as f32) }).collect())
}

/// Probability of class 1 for each listed sample.
pub fn score_samples(
    model: &PolarNetModel,
    samples: &[Sample],
    idx: &[usize],
    batch: usize,
    prior: Option<&PriorMatrix>,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch.max(1)) {
        let items: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        let probs = model.predict(&batch_inputs(&items, &vec![0; items.len()])?, prior)?;
        let k = model.config.classes;
        scores.extend(probs.data().chunks(k).map(|row| row[1] as f64));
    }
    Ok(scores)
}

/// Trains one model on `train` and scores `test`. All randomness derives
/// from `(cfg.seed, fold)`.
pub fn train_fold(
    cfg: &TrainConfig,
    samples: &[Sample],
    train: &[usize],
    test: &[usize],
    fold: usize,
    prior: Option<&PriorMatrix>,
) -> Result<(PolarNetModel, FoldReport)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(fold as u64 + 1);
    let mut model = PolarNetModel::new(cfg.model.clone(), rng.random())?;
    let labels: Vec<usize> = train.iter().map(|&i| samples[i].label).collect();
    let weights = class_weights(&labels, cfg.model.classes, cfg.class_weighting)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let theta = cfg.model.input_size.0 as f64;
    let max_shift = (cfg.augment_deg / 360.0 * theta).round() as isize;
    let mut order = train.to_vec();
    let mut epochs = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let shifts: Vec<isize> = items
                .iter()
                .map(|_| if max_shift > 0 { rng.random_range(-max_shift as i64..=max_shift as i64) as isize } else { 0 })
                .collect();
            let targets: Vec<usize> = items.iter().map(|s| s.label).collect();
            let inputs = batch_inputs(&items, &shifts)?;
            let mut fp = model.forward_graph(&inputs, prior, false)?;
            let loss = fp.graph.softmax_cross_entropy(fp.logits, &targets, Some(&weights))?;
            loss_sum += fp.graph.value(loss).item() as f64 * items.len() as f64;
            let k = cfg.model.classes;
            for (row, &t) in fp.graph.value(fp.logits).data().chunks(k).zip(&targets) {
                let pred = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
                hits += usize::from(pred == t);
            }
            fp.graph.backward(loss)?;
            let grads: Vec<Tensor> = fp.param_vars.iter().map(|&v| fp.graph.grad_or_zeros(v)).collect();
            adam.step(model.params.tensors_mut(), &grads)?;
        }
        let log = EpochLog { epoch, loss: loss_sum / order.len() as f64, train_acc: hits as f64 / order.len() as f64 };
        log::info!("fold {fold} epoch {epoch}: loss {:.5} train acc {:.3}", log.loss, log.train_acc);
        epochs.push(log);
    }
    let scores = score_samples(&model, samples, test, cfg.batch_size, prior)?;
    let test_labels: Vec<usize> = test.iter().map(|&i| samples[i].label).collect();
    let (m, sm) = fold_metrics(samples, test, &scores);
    Ok((model, FoldReport { fold, epochs, test_samples: test.to_vec(), labels: test_labels, scores, metrics: m, subject_metrics: sm }))
}

/// Sample indices per fold from a subject-level split.
pub fn sample_folds(samples: &[Sample], subject_labels: &[usize], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let assignment = kfold_split(subject_labels, k, seed)?;
    Ok((0..k)
        .map(|f| {
            let (_, test_subjects) = fold_indices(&assignment, f);
            (0..samples.len()).partition(|&i| !test_subjects.contains(&samples[i].subject))
        })
        .collect())
}

/// K-fold cross-validation. Folds run on up to `jobs` threads; results do
/// not depend on the thread count.
pub fn cross_validate(
    cfg: &TrainConfig,
    samples: &[Sample],
    subject_labels: &[usize],
    prior: Option<&PriorMatrix>,
    jobs: usize,
) -> Result<Vec<(PolarNetModel, FoldReport)>> {
    cfg.validate()?;
    let folds = sample_folds(samples, subject_labels, cfg.folds, cfg.seed)?;
    let jobs = jobs.clamp(1, folds.len());
    let mut results: Vec<Option<Result<(PolarNetModel, FoldReport)>>> = (0..folds.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (lane, slots) in results.chunks_mut(folds.len().div_ceil(jobs)).enumerate() {
            let folds = &folds;
            s.spawn(move || {
                let base = lane * folds.len().div_ceil(jobs);
                for (off, slot) in slots.iter_mut().enumerate() {
                    let f = base + off;
                    *slot = Some(train_fold(cfg, samples, &folds[f].0, &folds[f].1, f, prior));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("every fold ran")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc: (f64, f64),
    pub auroc: (f64, f64),
    pub kappa: (f64, f64),
}

pub fn summarize(reports: &[FoldReport]) -> Option<Summary> {
    summarize_metrics(reports.iter().filter_map(|r| r.metrics).collect())
}

pub fn summarize_subjects(reports: &[FoldReport]) -> Option<Summary> {
    summarize_metrics(reports.iter().filter_map(|r| r.subject_metrics).collect())
}

fn summarize_metrics(ms: Vec<Metrics>) -> Option<Summary> {
    if ms.is_empty() {
        return None;
    }
    let col = |f: fn(&Metrics) -> f64| metrics::mean_std(&ms.iter().map(f).collect::<Vec<_>>());
    Some(Summary { acc: col(|m| m.acc), auroc: col(|m| m.auroc), kappa: col(|m| m.kappa) })
}
