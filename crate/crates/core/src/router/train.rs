use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{SparseFeatures, DEFAULT_FEATURE_DIM};
use super::model::RouterModel;
use super::{Decision, LabelSet};
use crate::{jsonl, Error, Result};

/// One training pair: a question and the retrieval decision that scored best for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingExample {
    pub question: String,
    pub label: Decision,
}

pub fn read_examples(path: &Path) -> Result<Vec<RoutingExample>> {
    jsonl::read_file(path)
}

pub fn write_examples(path: &Path, examples: &[RoutingExample]) -> Result<()> {
    jsonl::write_file(path, examples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Balanced class weights `n / (C · n_c)` in the loss.
    pub class_weighting: bool,
    pub feature_dim: usize,
    pub featurizer_seed: u64,
    pub label_set: LabelSet,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 16,
            epochs: 5,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            class_weighting: true,
            feature_dim: DEFAULT_FEATURE_DIM,
            featurizer_seed: 0,
            label_set: LabelSet::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Balanced weights `w_c = n / (C · n_c)` over the label set, in label-set order.
pub fn class_weights(labels: &[Decision], label_set: &LabelSet) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; label_set.len()];
    for &l in labels {
        let i = label_set
            .index_of(l)
            .ok_or_else(|| Error::UnknownLabel(l.to_string()))?;
        counts[i] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(label_set.get(missing).to_string()));
    }
    let n = labels.len() as f64;
    let c = label_set.len() as f64;
    Ok(counts.iter().map(|&nc| n / (c * nc as f64)).collect())
}

#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    pub features: SparseFeatures,
    /// Index into the model's label set.
    pub label: usize,
}

/// Gradients with the same layout as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Class-weighted softmax cross-entropy, averaged over the batch, plus
/// `l2 / 2 · ‖W‖²` (bias excluded).
///
/// Training passes `l2 = 0` and applies weight decay in the optimizer instead.
pub fn loss_and_grad(
    model: &RouterModel,
    batch: &[LabeledFeatures],
    class_weights: &[f64],
    l2: f64,
) -> Result<(f64, Gradients)> {
    let c = model.num_classes();
    let d = model.feature_dim;
    if class_weights.len() != c {
        return Err(Error::Invalid(format!("{} class weights for {c} classes", class_weights.len())));
    }
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let mut grads = Gradients {
        weights: vec![0.0; c * d],
        bias: vec![0.0; c],
    };
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        if ex.label >= c {
            return Err(Error::UnknownLabel(format!("label index {}", ex.label)));
        }
        if ex.features.max_index().is_some_and(|j| j >= d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: ex.features.max_index().unwrap() + 1,
            });
        }
        let logits = model.logits(&ex.features);
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("router logits"));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let w = class_weights[ex.label];
        loss += scale * w * (log_sum - logits[ex.label]);
        for (k, &z) in logits.iter().enumerate() {
            let p = (z - log_sum).exp();
            let dz = scale * w * (p - if k == ex.label { 1.0 } else { 0.0 });
            grads.bias[k] += dz;
            let row = &mut grads.weights[k * d..(k + 1) * d];
            for (j, v) in ex.features.iter() {
                row[j] += dz * v;
            }
        }
    }
    if l2 != 0.0 {
        loss += 0.5 * l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
        for (g, w) in grads.weights.iter_mut().zip(&model.weights) {
            *g += l2 * w;
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub class_weights: Vec<(Decision, f64)>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Learning rate applied at each optimizer step.
    pub learning_rates: Vec<f64>,
    pub total_steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedRouter {
    pub model: RouterModel,
    pub report: TrainReport,
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One decoupled-weight-decay Adam step over `params` (which occupy
    /// `offset..offset + params.len()` of the moment buffers).
    fn update(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [f64], grads: &[f64], offset: usize, decay: bool) {
        let bc1 = 1.0 - cfg.adam_beta1.powi(self.step);
        let bc2 = 1.0 - cfg.adam_beta2.powi(self.step);
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
            if decay {
                *p -= lr * cfg.weight_decay * *p;
            }
            *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
            *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
        }
    }
}

/// Trains from zero-initialized parameters. Deterministic for a fixed config:
/// the only randomness is the per-epoch shuffle, drawn from `cfg.seed`.
pub fn train_router(dataset: &[RoutingExample], cfg: &TrainConfig) -> Result<TrainedRouter> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    let label_set = &cfg.label_set;
    let mut model = RouterModel::zeros(label_set.clone(), cfg.feature_dim, cfg.featurizer_seed)?;
    let mut examples = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let label = label_set
            .index_of(ex.label)
            .ok_or_else(|| Error::UnknownLabel(ex.label.to_string()))?;
        examples.push(LabeledFeatures {
            features: model.featurize(&ex.question)?,
            label,
        });
    }
    let weights = if cfg.class_weighting {
        let labels: Vec<Decision> = dataset.iter().map(|e| e.label).collect();
        class_weights(&labels, label_set)?
    } else {
        vec![1.0; label_set.len()]
    };

    let n = examples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let n_weights = model.weights.len();
    let mut opt = AdamW::new(n_weights + model.bias.len());
    let mut learning_rates = Vec::with_capacity(total_steps);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            let (loss, grads) = loss_and_grad(&model, &batch, &weights, 0.0)?;
            epoch_loss += loss * chunk.len() as f64;

            let t = learning_rates.len();
            let lr = cfg.learning_rate * (1.0 - t as f64 / total_steps as f64);
            learning_rates.push(lr);
            opt.step += 1;
            opt.update(cfg, lr, &mut model.weights, &grads.weights, 0, true);
            opt.update(cfg, lr, &mut model.bias, &grads.bias, n_weights, false);
        }
        let mean = epoch_loss / n as f64;
        log::info!("epoch {}/{}: loss {mean:.6}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean);
    }
    if model.weights.iter().chain(&model.bias).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("router parameters after training"));
    }
    Ok(TrainedRouter {
        model,
        report: TrainReport {
            class_weights: label_set.labels().iter().copied().zip(weights).collect(),
            epoch_losses,
            learning_rates,
            total_steps,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls() -> LabelSet {
        LabelSet::default()
    }

    fn labels(na: usize, vis: usize, text: usize) -> Vec<Decision> {
        std::iter::repeat(Decision::Na)
            .take(na)
            .chain(std::iter::repeat(Decision::Visual).take(vis))
            .chain(std::iter::repeat(Decision::Textual).take(text))
            .collect()
    }

    #[test]
    fn balanced_counts_give_unit_weights() {
        assert_eq!(class_weights(&labels(5, 5, 5), &ls()).unwrap(), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn unbalanced_counts() {
        let w = class_weights(&labels(10, 30, 60), &ls()).unwrap();
        // 100 / (3 · n_c)
        let expected = [100.0 / 30.0, 100.0 / 90.0, 100.0 / 180.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let total: f64 = w.iter().zip([10.0, 30.0, 60.0]).map(|(w, n)| w * n).sum();
        assert!((total - 100.0).abs() < 1e-9);
    }

    #[test]
    fn missing_class_is_error() {
        assert!(matches!(
            class_weights(&labels(0, 10, 10), &ls()),
            Err(Error::MissingClass(c)) if c == "NA"
        ));
    }

    #[test]
    fn zero_model_loss_is_ln3() {
        let model = RouterModel::zeros(ls(), 16, 0).unwrap();
        let ex = LabeledFeatures {
            features: SparseFeatures::from_pairs([(1, 0.6), (4, 0.8)]),
            label: 2,
        };
        let (loss, _) = loss_and_grad(&model, &[ex], &[1.0, 1.0, 1.0], 0.0).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_linear_in_class_weight() {
        let model = RouterModel::from_parameters(ls(), 4, 0, (0..12).map(|i| i as f64 * 0.1).collect(), vec![0.0; 3]).unwrap();
        let ex = LabeledFeatures {
            features: SparseFeatures::from_pairs([(0, 1.0), (3, -0.5)]),
            label: 1,
        };
        let (a, _) = loss_and_grad(&model, &[ex.clone()], &[1.0, 1.0, 1.0], 0.0).unwrap();
        let (b, _) = loss_and_grad(&model, &[ex], &[1.0, 2.0, 1.0], 0.0).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let mut model = RouterModel::zeros(ls(), 4, 0).unwrap();
        model.bias[0] = f64::INFINITY;
        let ex = LabeledFeatures {
            features: SparseFeatures::from_pairs([(0, 1.0)]),
            label: 0,
        };
        assert!(matches!(
            loss_and_grad(&model, &[ex], &[1.0; 3], 0.0),
            Err(Error::NonFinite(_))
        ));
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            feature_dim: 1 << 12,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_example_is_learned() {
        let data = [RoutingExample {
            question: "where is the lighthouse".into(),
            label: Decision::Textual,
        }];
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 0.05,
            class_weighting: false,
            ..small_cfg()
        };
        let trained = train_router(&data, &cfg).unwrap();
        assert_eq!(trained.model.route("where is the lighthouse").unwrap().decision, Decision::Textual);
    }

    #[test]
    fn schedule_decays_linearly_to_zero() {
        let data: Vec<RoutingExample> = (0..40)
            .map(|i| RoutingExample {
                question: format!("question {i}"),
                label: [Decision::Na, Decision::Visual, Decision::Textual][i % 3],
            })
            .collect();
        let cfg = small_cfg();
        let trained = train_router(&data, &cfg).unwrap();
        let lrs = &trained.report.learning_rates;
        let total = trained.report.total_steps;
        assert_eq!(total, 5 * 3);
        assert_eq!(lrs.len(), total);
        assert_eq!(lrs[0], cfg.learning_rate);
        for (t, lr) in lrs.iter().enumerate() {
            assert!((lr - cfg.learning_rate * (1.0 - t as f64 / total as f64)).abs() < 1e-18);
        }
        // The last applied step uses lr/T; the schedule reaches 0 right after it.
        assert!(*lrs.last().unwrap() <= cfg.learning_rate / total as f64 * (1.0 + 1e-12));
        assert_eq!(trained.report.epoch_losses.len(), 5);
    }

    #[test]
    fn same_seed_same_bytes() {
        let data: Vec<RoutingExample> = (0..30)
            .map(|i| RoutingExample {
                question: format!("item {} of kind {}", i, i % 3),
                label: [Decision::Na, Decision::Visual, Decision::Textual][i % 3],
            })
            .collect();
        let a = train_router(&data, &small_cfg()).unwrap().model.to_bytes();
        let b = train_router(&data, &small_cfg()).unwrap().model.to_bytes();
        assert_eq!(a, b);
        let other = TrainConfig { seed: 1, ..small_cfg() };
        assert_ne!(a, train_router(&data, &other).unwrap().model.to_bytes());
    }

    #[test]
    fn empty_dataset_and_unknown_labels() {
        assert!(matches!(train_router(&[], &small_cfg()), Err(Error::EmptyInput(_))));
        let data = [RoutingExample {
            question: "q".into(),
            label: Decision::Hybrid,
        }];
        assert!(matches!(train_router(&data, &small_cfg()), Err(Error::UnknownLabel(_))));
    }
}
