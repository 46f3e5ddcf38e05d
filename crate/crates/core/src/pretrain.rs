//! Contrastive pretraining of the sensor and label encoders.
//!
//! Every window carries a set of positive label phrases. For each positive
//! `w`, the loss term is
//!
//! ```text
//! -log( exp(z_s . z_w / tau) / sum_{a in D(w)} exp(z_s . z_a / tau) )
//! ```
//!
//! averaged over the window's positives and summed over windows. `D(w)` is
//! the vocabulary without `w` (exclusive mode, the default) or the full
//! vocabulary (inclusive mode). Log-sum-exp is max-shifted.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{
    dot, encode_label, encode_sensor, init_parameters, label_backward, label_forward, sensor_backward,
    sensor_forward, EncoderConfig, EncoderError, Parameters,
};
use crate::ingest::{LabelVocabulary, Modality, ModalitySchema, SensorWindow, Timeline};
use crate::optim::Adam;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("degenerate vocabulary: {0} label(s), need at least 2")]
    DegenerateVocabulary(usize),
    #[error("sample {0} has no positive labels")]
    EmptyPositives(usize),
    #[error("label `{0}` is not in the vocabulary")]
    UnknownLabel(String),
    #[error("no labeled windows to train on")]
    NoTrainingData,
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Denominator over the vocabulary minus the positive phrase.
    #[default]
    ExcludePositive,
    /// Denominator over the whole vocabulary.
    IncludePositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub denominator_mode: DenominatorMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            denominator_mode: DenominatorMode::ExcludePositive,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.tau > 0.0) {
            return Err(TrainError::Config("tau must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A window paired with the vocabulary indices of its positive labels.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub window: &'a SensorWindow,
    pub positives: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub samples: Vec<Sample<'a>>,
}

impl<'a> Batch<'a> {
    /// Pair each window with its labels; unlabeled windows are an error here.
    pub fn from_windows<I>(windows: I, vocab: &LabelVocabulary) -> Result<Self, TrainError>
    where
        I: IntoIterator<Item = &'a SensorWindow>,
    {
        let samples = windows
            .into_iter()
            .enumerate()
            .map(|(i, w)| {
                if w.labels.is_empty() {
                    return Err(TrainError::EmptyPositives(i));
                }
                let positives = w
                    .labels
                    .iter()
                    .map(|l| vocab.index_of(l).ok_or_else(|| TrainError::UnknownLabel(l.clone())))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Sample { window: w, positives })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub grad_norm: f64,
}

fn evaluate(
    params: &Parameters,
    batch: &Batch,
    config: &TrainConfig,
    want_grad: bool,
) -> Result<(LossReport, Option<Parameters>), TrainError> {
    let vocab = &params.vocab;
    let n_labels = vocab.len();
    if n_labels < 2 {
        return Err(TrainError::DegenerateVocabulary(n_labels));
    }
    let tau = config.tau;
    let label_traces = vocab
        .phrases()
        .iter()
        .map(|p| label_forward(params, p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut grad = want_grad.then(|| params.zeros_like());
    let dim = params.config.embed_dim;
    let mut d_labels = vec![vec![0.0; dim]; n_labels];

    let mut per_sample = Vec::with_capacity(batch.len());
    let mut scores = vec![0.0; n_labels];
    let mut d_scores = vec![0.0; n_labels];
    for (i, sample) in batch.samples.iter().enumerate() {
        if sample.positives.is_empty() {
            return Err(TrainError::EmptyPositives(i));
        }
        if let Some(&bad) = sample.positives.iter().find(|&&p| p >= n_labels) {
            return Err(TrainError::UnknownLabel(format!("#{bad}")));
        }
        let trace = sensor_forward(params, sample.window)?;
        let z_s = &trace.output;
        for (s, lt) in scores.iter_mut().zip(&label_traces) {
            *s = dot(z_s, &lt.output) / tau;
        }
        d_scores.iter_mut().for_each(|d| *d = 0.0);
        let weight = 1.0 / sample.positives.len() as f64;
        let mut loss = 0.0;
        for &w in &sample.positives {
            let in_denominator =
                |a: usize| a != w || config.denominator_mode == DenominatorMode::IncludePositive;
            let max = (0..n_labels)
                .filter(|&a| in_denominator(a))
                .map(|a| scores[a])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..n_labels)
                .filter(|&a| in_denominator(a))
                .map(|a| (scores[a] - max).exp())
                .sum();
            let lse = max + sum.ln();
            loss += weight * (lse - scores[w]);
            if want_grad {
                d_scores[w] -= weight;
                for a in (0..n_labels).filter(|&a| in_denominator(a)) {
                    d_scores[a] += weight * (scores[a] - lse).exp();
                }
            }
        }
        per_sample.push(loss);

        if let Some(g) = grad.as_mut() {
            let mut d_zs = vec![0.0; dim];
            for (a, &ds) in d_scores.iter().enumerate() {
                if ds == 0.0 {
                    continue;
                }
                let z_a = &label_traces[a].output;
                for k in 0..dim {
                    d_zs[k] += ds * z_a[k] / tau;
                    d_labels[a][k] += ds * z_s[k] / tau;
                }
            }
            sensor_backward(params, &trace, &d_zs, g);
        }
    }
    if let Some(g) = grad.as_mut() {
        for (lt, d) in label_traces.iter().zip(&d_labels) {
            label_backward(params, lt, d, g);
        }
    }
    let grad_norm = grad
        .as_ref()
        .map(|g| g.flatten().iter().map(|v| v * v).sum::<f64>().sqrt())
        .unwrap_or(0.0);
    let value = per_sample.iter().sum();
    Ok((
        LossReport {
            value,
            per_sample,
            grad_norm,
        },
        grad,
    ))
}

/// Batch loss (sum over samples).
pub fn partial_context_loss(params: &Parameters, batch: &Batch, config: &TrainConfig) -> Result<LossReport, TrainError> {
    Ok(evaluate(params, batch, config, false)?.0)
}

/// Analytic gradient of [`partial_context_loss`], shaped like `params`.
pub fn loss_gradient(params: &Parameters, batch: &Batch, config: &TrainConfig) -> Result<Parameters, TrainError> {
    Ok(evaluate(params, batch, config, true)?.1.expect("gradient requested"))
}

pub fn loss_and_gradient(
    params: &Parameters,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(LossReport, Parameters), TrainError> {
    let (report, grad) = evaluate(params, batch, config, true)?;
    Ok((report, grad.expect("gradient requested")))
}

/// Central difference `(f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, eps: f64) -> Result<f64, TrainError> {
    if !(eps > 0.0) {
        return Err(TrainError::InvalidStep(eps));
    }
    Ok((f(x + eps) - f(x - eps)) / (2.0 * eps))
}

/// Central-difference gradient of the loss, one scalar parameter at a time.
pub fn finite_difference_gradient(
    params: &Parameters,
    batch: &Batch,
    config: &TrainConfig,
    eps: f64,
) -> Result<Parameters, TrainError> {
    if !(eps > 0.0) {
        return Err(TrainError::InvalidStep(eps));
    }
    let base = params.flatten();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut flat = base.clone();
    for i in 0..base.len() {
        let mut failure = None;
        let g = central_difference(
            |x| {
                flat[i] = x;
                probe.assign_flat(&flat);
                match partial_context_loss(&probe, batch, config) {
                    Ok(r) => r.value,
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            base[i],
            eps,
        )?;
        flat[i] = base[i];
        if let Some(e) = failure {
            return Err(e);
        }
        out.push(g);
    }
    let mut grad = params.zeros_like();
    grad.assign_flat(&out);
    Ok(grad)
}

/// Windows with at least one label, in timeline order.
pub fn labeled_windows(timeline: &Timeline) -> Vec<&SensorWindow> {
    timeline.windows.iter().filter(|w| w.is_labeled()).collect()
}

/// Mini-batch Adam training. Returns the trained parameters and the mean
/// per-sample loss of every epoch.
pub fn train(
    params: &Parameters,
    timeline: &Timeline,
    config: &TrainConfig,
) -> Result<(Parameters, Vec<f64>), TrainError> {
    train_with_progress(params, timeline, config, |_, _| {})
}

pub fn train_with_progress<F: FnMut(usize, f64)>(
    params: &Parameters,
    timeline: &Timeline,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Parameters, Vec<f64>), TrainError> {
    config.validate()?;
    let windows = labeled_windows(timeline);
    if windows.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let all = Batch::from_windows(windows, &params.vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = params.clone();
    let mut flat = current.flatten();
    let mut adam = Adam::new(flat.len(), config.learning_rate, config.beta1, config.beta2, config.epsilon);
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch {
                samples: chunk.iter().map(|&i| all.samples[i].clone()).collect(),
            };
            let (report, grad) = loss_and_gradient(&current, &batch, config)?;
            total += report.value;
            adam.step(&mut flat, &grad.flatten());
            current.assign_flat(&flat);
        }
        let mean = total / all.len() as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok((current, history))
}

/// Fraction of labeled windows whose best-scoring label is among their positives.
/// Ties go to the lower vocabulary index.
pub fn retrieval_accuracy(params: &Parameters, timeline: &Timeline) -> Result<f64, TrainError> {
    let label_embeddings = params
        .vocab
        .phrases()
        .iter()
        .map(|p| encode_label(params, p))
        .collect::<Result<Vec<_>, _>>()?;
    let windows = labeled_windows(timeline);
    if windows.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let mut hits = 0usize;
    for w in &windows {
        let z = encode_sensor(params, w)?;
        let best = argmax_label(&z.0, label_embeddings.iter().map(|e| e.0.as_slice()));
        if w.labels.contains(&params.vocab.phrases()[best]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / windows.len() as f64)
}

pub(crate) fn argmax_label<'a, I: Iterator<Item = &'a [f64]>>(z: &[f64], labels: I) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, l) in labels.enumerate() {
        let s = dot(z, l);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// One randomized gradient-check configuration and its outcome.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckCase {
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub batch_size: usize,
    pub max_positives: usize,
    pub tau: f64,
    pub normalize: bool,
    pub denominator_mode: DenominatorMode,
    pub num_parameters: usize,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`.
    pub rel_err: f64,
    /// Largest per-component `|a - n| / max(|a|, |n|)` over components whose
    /// magnitude exceeds 1e-6 of the gradient's largest component.
    pub max_component_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub max_rel_err: f64,
    pub eps: f64,
}

/// Minimum distance of every hidden pre-activation from the ReLU kink. A
/// perturbation of `eps` can only move a pre-activation by `eps * |input|`,
/// so windows closer than this to a kink are redrawn. Windows whose fused
/// vector is this close to zero (every unit inactive) are redrawn too.
const KINK_MARGIN: f64 = 1e-3;

/// Compare analytic and central-difference gradients on `n_cases` random
/// small problems covering embed dims {4, 8}, vocab sizes {3, 10}, positive
/// set sizes up to 3, both denominator modes and normalization on and off.
pub fn gradcheck(n_cases: usize, seed: u64, eps: f64) -> Result<GradcheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n_cases);
    for case in 0..n_cases {
        let embed_dim = [4, 8][case % 2];
        let vocab_size = [3, 10][(case / 2) % 2];
        let normalize = (case / 4) % 2 == 0;
        let denominator_mode = if (case / 8) % 2 == 0 {
            DenominatorMode::ExcludePositive
        } else {
            DenominatorMode::IncludePositive
        };
        let batch_size = rng.random_range(1..=16usize);
        let max_positives = rng.random_range(1..=3usize).min(vocab_size - 1);
        let tau = [0.1, 0.5, 1.0][rng.random_range(0..3usize)];

        let schema = ModalitySchema::new(vec![
            Modality { name: "imu".into(), dim: rng.random_range(2..=4) },
            Modality { name: "audio".into(), dim: rng.random_range(2..=3) },
        ])
        .expect("valid schema");
        // multi-token phrases share tokens so the token table is exercised
        let phrases: Vec<String> = (0..vocab_size)
            .map(|i| match i % 3 {
                0 => format!("act{i}"),
                1 => format!("at place{i}"),
                _ => format!("doing act{} work", i - 2),
            })
            .collect();
        let vocab = LabelVocabulary::from_phrases(phrases.clone()).expect("distinct phrases");
        let enc = EncoderConfig {
            embed_dim,
            hidden: vec![rng.random_range(3..=6)],
            seed: rng.random(),
            normalize,
            ..Default::default()
        };
        let params = init_parameters(&enc, &schema, &vocab)?;

        let mut windows = Vec::with_capacity(batch_size);
        while windows.len() < batch_size {
            let features: Vec<Vec<f64>> = schema
                .modalities
                .iter()
                .map(|m| (0..m.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let n_pos = rng.random_range(1..=max_positives);
            let mut idx: Vec<usize> = (0..vocab_size).collect();
            idx.shuffle(&mut rng);
            let window = SensorWindow {
                timestamp: windows.len() as i64 * 60,
                user_id: "g".into(),
                missing: vec![false; features.len()],
                features,
                missing_cells: vec![],
                labels: idx[..n_pos].iter().map(|&i| vocab.phrases()[i].clone()).collect(),
            };
            let trace = sensor_forward(&params, &window)?;
            if trace.min_abs_preactivation() > KINK_MARGIN && (!normalize || trace.fused_norm() > KINK_MARGIN) {
                windows.push(window);
            }
        }
        let batch = Batch::from_windows(windows.iter(), &vocab)?;
        let train = TrainConfig {
            tau,
            denominator_mode,
            ..Default::default()
        };
        let analytic = loss_gradient(&params, &batch, &train)?.flatten();
        let numeric = finite_difference_gradient(&params, &batch, &train, eps)?.flatten();
        let (rel_err, max_component_rel_err) = compare_gradients(&analytic, &numeric);
        cases.push(GradcheckCase {
            embed_dim,
            vocab_size,
            batch_size,
            max_positives,
            tau,
            normalize,
            denominator_mode,
            num_parameters: analytic.len(),
            rel_err,
            max_component_rel_err,
        });
    }
    let max_rel_err = cases.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { cases, max_rel_err, eps })
}

/// Returns (norm-wise relative error, largest significant per-component relative error).
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    let rel = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
    let largest = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * largest;
    let component = analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) > floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    (rel, component)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Modality;
    use std::collections::BTreeSet;

    fn schema() -> ModalitySchema {
        ModalitySchema::new(vec![
            Modality { name: "imu".into(), dim: 3 },
            Modality { name: "audio".into(), dim: 2 },
        ])
        .unwrap()
    }

    fn window(features: [f64; 5], labels: &[&str]) -> SensorWindow {
        SensorWindow {
            timestamp: 0,
            user_id: "u".into(),
            features: vec![features[..3].to_vec(), features[3..].to_vec()],
            missing: vec![false, false],
            missing_cells: vec![],
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Parameters whose sensor encoder emits `e0` for every window and whose
    /// label table maps "w" to e0 and "a" to e1. Both are unit vectors.
    fn closed_form_params(normalize: bool) -> Parameters {
        let vocab = LabelVocabulary::from_phrases(["a", "w"]).unwrap();
        let cfg = EncoderConfig {
            embed_dim: 2,
            hidden: vec![1],
            normalize,
            ..Default::default()
        };
        let mut p = init_parameters(&cfg, &schema(), &vocab).unwrap().zeros_like();
        p.fusion.bias = vec![1.0, 0.0];
        p.tokens.insert("w".into(), vec![1.0, 0.0]);
        p.tokens.insert("a".into(), vec![0.0, 1.0]);
        p
    }

    #[test]
    fn exclusive_closed_form_is_minus_one() {
        let p = closed_form_params(true);
        let w = window([0.0; 5], &["w"]);
        let batch = Batch::from_windows([&w], &p.vocab).unwrap();
        let cfg = TrainConfig { tau: 1.0, ..Default::default() };
        let r = partial_context_loss(&p, &batch, &cfg).unwrap();
        assert!((r.value - (-1.0)).abs() < 1e-12, "{}", r.value);
    }

    #[test]
    fn inclusive_closed_form() {
        let p = closed_form_params(true);
        let w = window([0.0; 5], &["w"]);
        let batch = Batch::from_windows([&w], &p.vocab).unwrap();
        let cfg = TrainConfig {
            tau: 1.0,
            denominator_mode: DenominatorMode::IncludePositive,
            ..Default::default()
        };
        let r = partial_context_loss(&p, &batch, &cfg).unwrap();
        // log(1 + e^-1), evaluated with mpmath at 50 digits
        assert!((r.value - 0.313_261_687_518_222_8).abs() < 1e-12, "{}", r.value);
    }

    #[test]
    fn symmetric_positives_average_to_single_term() {
        // z_s = e0; positives p1, p2 symmetric about e0; one negative at -e0
        let vocab = LabelVocabulary::from_phrases(["neg", "pa", "pb"]).unwrap();
        let cfg = EncoderConfig { embed_dim: 2, hidden: vec![1], ..Default::default() };
        let mut p = init_parameters(&cfg, &schema(), &vocab).unwrap().zeros_like();
        p.fusion.bias = vec![1.0, 0.0];
        let c = 0.6f64;
        let s = 0.8f64;
        p.tokens.insert("pa".into(), vec![c, s]);
        p.tokens.insert("pb".into(), vec![c, -s]);
        p.tokens.insert("neg".into(), vec![-1.0, 0.0]);
        let train = TrainConfig { tau: 0.5, ..Default::default() };
        let both = window([0.0; 5], &["pa", "pb"]);
        let one = window([0.0; 5], &["pa"]);
        let l2 = partial_context_loss(&p, &Batch::from_windows([&both], &p.vocab).unwrap(), &train).unwrap();
        let l1 = partial_context_loss(&p, &Batch::from_windows([&one], &p.vocab).unwrap(), &train).unwrap();
        assert!((l2.value - l1.value).abs() < 1e-12);
    }

    #[test]
    fn degenerate_vocabulary_rejected() {
        let mut p = closed_form_params(true);
        // bypass the vocabulary constructor to build a single-label vocabulary
        let v = LabelVocabulary::from_phrases(["w", "a"]).unwrap();
        p.vocab = v;
        let w = window([0.0; 5], &["w"]);
        let batch = Batch::from_windows([&w], &p.vocab).unwrap();
        assert!(partial_context_loss(&p, &batch, &TrainConfig::default()).is_ok());
        assert!(matches!(
            LabelVocabulary::from_phrases(["w"]),
            Err(crate::ingest::IngestError::InsufficientVocabulary(1))
        ));
    }

    #[test]
    fn unknown_label_rejected_in_batch() {
        let p = closed_form_params(true);
        let w = window([0.0; 5], &["zzz"]);
        assert!(matches!(Batch::from_windows([&w], &p.vocab), Err(TrainError::UnknownLabel(_))));
    }

    #[test]
    fn quadratic_central_difference() {
        let g = central_difference(|p| p * p, 3.0, 1e-4).unwrap();
        assert!((g - 6.0).abs() < 1e-6);
        assert!(matches!(central_difference(|p| p, 1.0, 0.0), Err(TrainError::InvalidStep(_))));
    }

    #[test]
    fn fd_rejects_zero_eps() {
        let p = closed_form_params(true);
        let w = window([0.0; 5], &["w"]);
        let batch = Batch::from_windows([&w], &p.vocab).unwrap();
        assert!(matches!(
            finite_difference_gradient(&p, &batch, &TrainConfig::default(), 0.0),
            Err(TrainError::InvalidStep(_))
        ));
    }

    fn random_setup(seed: u64, normalize: bool) -> (Parameters, Vec<SensorWindow>) {
        let vocab = LabelVocabulary::from_phrases(["sitting", "at home", "walking", "doing computer work"]).unwrap();
        let cfg = EncoderConfig {
            embed_dim: 4,
            hidden: vec![4],
            seed,
            normalize,
            ..Default::default()
        };
        let p = init_parameters(&cfg, &schema(), &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let windows = (0..5)
            .map(|i| {
                let f: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let labels: &[&str] = match i % 3 {
                    0 => &["sitting", "at home"],
                    1 => &["walking"],
                    _ => &["doing computer work", "sitting", "at home"],
                };
                window(f, labels)
            })
            .collect();
        (p, windows)
    }

    #[test]
    fn analytic_matches_finite_differences() {
        for (seed, normalize, mode) in [
            (1, true, DenominatorMode::ExcludePositive),
            (2, false, DenominatorMode::IncludePositive),
        ] {
            let (p, windows) = random_setup(seed, normalize);
            let batch = Batch::from_windows(windows.iter(), &p.vocab).unwrap();
            let cfg = TrainConfig { tau: 0.5, denominator_mode: mode, ..Default::default() };
            let a = loss_gradient(&p, &batch, &cfg).unwrap().flatten();
            let n = finite_difference_gradient(&p, &batch, &cfg, 1e-5).unwrap().flatten();
            let (rel, _) = compare_gradients(&a, &n);
            assert!(rel < 1e-4, "rel err {rel}");
        }
    }

    #[test]
    fn unused_token_has_zero_gradient() {
        let (mut p, windows) = random_setup(3, true);
        p.tokens.insert("unused".into(), vec![0.5; 4]);
        let batch = Batch::from_windows(windows.iter(), &p.vocab).unwrap();
        let g = loss_gradient(&p, &batch, &TrainConfig::default()).unwrap();
        assert!(g.tokens["unused"].iter().all(|&v| v == 0.0));
        assert!(g.tokens["sitting"].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_is_linear_in_repeated_samples() {
        let (p, windows) = random_setup(4, true);
        let single = Batch::from_windows([&windows[0]], &p.vocab).unwrap();
        let triple = Batch::from_windows([&windows[0], &windows[0], &windows[0]], &p.vocab).unwrap();
        let cfg = TrainConfig::default();
        let g1 = loss_gradient(&p, &single, &cfg).unwrap().flatten();
        let g3 = loss_gradient(&p, &triple, &cfg).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn inclusive_terms_nonnegative_exclusive_can_be_negative() {
        let (p, windows) = random_setup(5, true);
        let batch = Batch::from_windows(windows.iter(), &p.vocab).unwrap();
        let inc = TrainConfig {
            denominator_mode: DenominatorMode::IncludePositive,
            ..Default::default()
        };
        let r = partial_context_loss(&p, &batch, &inc).unwrap();
        assert!(r.per_sample.iter().all(|&v| v >= 0.0));
        let total: f64 = r.per_sample.iter().sum();
        assert!((total - r.value).abs() < 1e-12);
    }

    #[test]
    fn batch_order_invariance() {
        let (p, windows) = random_setup(6, true);
        let cfg = TrainConfig::default();
        let fwd = Batch::from_windows(windows.iter(), &p.vocab).unwrap();
        let rev = Batch::from_windows(windows.iter().rev(), &p.vocab).unwrap();
        let a = partial_context_loss(&p, &fwd, &cfg).unwrap().value;
        let b = partial_context_loss(&p, &rev, &cfg).unwrap().value;
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn vocabulary_order_invariance() {
        // renaming labels changes their sorted positions but not the geometry
        let (p, windows) = random_setup(7, true);
        let rename = |s: &str| -> String {
            match s {
                "sitting" => "aaa".into(),
                "walking" => "bbb".into(),
                "at" => "zz1".into(),
                "home" => "zz2".into(),
                "doing" => "ccc".into(),
                "computer" => "yyy".into(),
                "work" => "ddd".into(),
                other => other.into(),
            }
        };
        let rename_phrase = |s: &str| s.split(' ').map(rename).collect::<Vec<_>>().join(" ");
        let vocab2 = LabelVocabulary::from_phrases(p.vocab.phrases().iter().map(|s| rename_phrase(s))).unwrap();
        assert_ne!(
            vocab2.phrases().iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            p.vocab.phrases().iter().map(|s| rename_phrase(s)).collect::<Vec<_>>(),
            "order should actually change"
        );
        let mut p2 = p.clone();
        p2.vocab = vocab2;
        p2.tokens = p.tokens.iter().map(|(k, v)| (rename(k), v.clone())).collect();
        let windows2: Vec<SensorWindow> = windows
            .iter()
            .map(|w| SensorWindow {
                labels: w.labels.iter().map(|l| rename_phrase(l)).collect::<BTreeSet<_>>(),
                ..w.clone()
            })
            .collect();
        let cfg = TrainConfig::default();
        let a = partial_context_loss(&p, &Batch::from_windows(windows.iter(), &p.vocab).unwrap(), &cfg)
            .unwrap()
            .value;
        let b = partial_context_loss(&p2, &Batch::from_windows(windows2.iter(), &p2.vocab).unwrap(), &cfg)
            .unwrap()
            .value;
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn small_tau_stays_finite() {
        let (p, windows) = random_setup(8, true);
        let batch = Batch::from_windows(windows.iter(), &p.vocab).unwrap();
        for mode in [DenominatorMode::ExcludePositive, DenominatorMode::IncludePositive] {
            let cfg = TrainConfig { tau: 1e-3, denominator_mode: mode, ..Default::default() };
            let (r, g) = loss_and_gradient(&p, &batch, &cfg).unwrap();
            assert!(r.value.is_finite());
            assert!(g.is_finite());
        }
    }

    fn tiny_timeline() -> Timeline {
        let (_, windows) = random_setup(9, true);
        let mut ws: Vec<SensorWindow> = windows
            .into_iter()
            .enumerate()
            .map(|(i, w)| SensorWindow { timestamp: i as i64 * 60, ..w })
            .collect();
        ws.push(SensorWindow {
            timestamp: 1000,
            labels: BTreeSet::new(),
            ..ws[0].clone()
        });
        Timeline::from_windows(ws).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (p, _) = random_setup(9, true);
        let tl = tiny_timeline();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, batch_size: 2, ..Default::default() };
        let (q, hist) = train(&p, &tl, &cfg).unwrap();
        assert_eq!(q.flatten(), p.flatten());
        assert_eq!(hist.len(), 3);
        assert!(hist.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn training_is_deterministic() {
        let (p, _) = random_setup(9, true);
        let tl = tiny_timeline();
        let cfg = TrainConfig { epochs: 5, batch_size: 2, seed: 3, ..Default::default() };
        let (_, a) = train(&p, &tl, &cfg).unwrap();
        let (_, b) = train(&p, &tl, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_requires_labels() {
        let (p, windows) = random_setup(9, true);
        let unlabeled: Vec<SensorWindow> = windows
            .into_iter()
            .enumerate()
            .map(|(i, w)| SensorWindow { timestamp: i as i64, labels: BTreeSet::new(), ..w })
            .collect();
        let tl = Timeline::from_windows(unlabeled).unwrap();
        assert!(matches!(train(&p, &tl, &TrainConfig::default()), Err(TrainError::NoTrainingData)));
    }

    #[test]
    fn oracle_embeddings_retrieve_perfectly() {
        // sensor output copies the first feature block into a one-hot direction
        let vocab = LabelVocabulary::from_phrases(["a", "b"]).unwrap();
        let cfg = EncoderConfig { embed_dim: 2, hidden: vec![1], normalize: true, ..Default::default() };
        let mut p = init_parameters(&cfg, &schema(), &vocab).unwrap().zeros_like();
        p.tokens.insert("a".into(), vec![1.0, 0.0]);
        p.tokens.insert("b".into(), vec![0.0, 1.0]);
        // route imu feature 0 -> dim 0 and audio feature 0 -> dim 1 through ReLU units
        p.modalities[0].hidden.weight = vec![1.0, 0.0, 0.0];
        p.modalities[0].output.weight = vec![1.0, 0.0];
        p.modalities[1].hidden.weight = vec![1.0, 0.0];
        p.modalities[1].output.weight = vec![0.0, 1.0];
        p.fusion.weight = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let ws = vec![
            SensorWindow { timestamp: 0, ..window([1.0, 0.0, 0.0, 0.0, 0.0], &["a"]) },
            SensorWindow { timestamp: 60, ..window([0.0, 0.0, 0.0, 1.0, 0.0], &["b"]) },
        ];
        let tl = Timeline::from_windows(ws).unwrap();
        assert_eq!(retrieval_accuracy(&p, &tl).unwrap(), 1.0);
    }
}
