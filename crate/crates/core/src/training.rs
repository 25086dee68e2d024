//! Loss, Adam, the warmup schedule and the epoch loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Example};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict_all, EvalReport};
use crate::exec::map_ordered;
use crate::math;
use crate::model::{Mode, Model};
use crate::numerics::graph::{smoothed_ce_row, smoothed_targets};
use crate::numerics::{Graph, Tensor};

/// `lr = k · d^-0.5 · min(step^-0.5, step · w^-1.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub factor: f64,
    pub warmup: u64,
    pub model_dim: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            factor: 0.95,
            warmup: 18_000,
            model_dim: 128,
        }
    }
}

pub fn lr_at(step: u64, s: &ScheduleConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("learning-rate steps start at 1"));
    }
    if !(s.factor > 0.0) || s.warmup == 0 || s.model_dim == 0 {
        return Err(Error::invalid("schedule needs factor > 0, warmup >= 1, model_dim >= 1"));
    }
    let step = step as f64;
    let decay = 1.0 / math::sqrt(step);
    let rise = step / math::pow(s.warmup as f64, 1.5);
    Ok(s.factor / math::sqrt(s.model_dim as f64) * decay.min(rise))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - math::pow(beta1, state.step as f64);
    let c2 = 1.0 - math::pow(beta2, state.step as f64);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            pd[i] -= lr * m_hat / (math::sqrt(v_hat) + eps);
        }
        if !p.is_all_finite() {
            return Err(Error::NonFinite("parameter update".into()));
        }
    }
    Ok(())
}

/// `−Σ_c q_c log softmax(logits)_c` with `q_target = 1−ε+ε/C`, others `ε/C`.
pub fn smoothed_cross_entropy(logits: &[f64], target: usize, smoothing: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid("label smoothing outside [0, 1)"));
    }
    smoothed_ce_row(logits, target, smoothing)
}

/// Lowest achievable smoothed cross-entropy: the entropy of the smoothed
/// target distribution.
pub fn smoothed_ce_floor(classes: usize, smoothing: f64) -> f64 {
    let (on, off) = smoothed_targets(classes, smoothing);
    let h = |q: f64| if q > 0.0 { -q * math::ln(q) } else { 0.0 };
    h(on) + (classes - 1) as f64 * h(off)
}

/// Mean teacher-forced loss of a hierarchical model over `batch`.
pub fn sequence_loss(model: &Model, batch: &[Example]) -> Result<f64> {
    if model.config().mode != Mode::Hierarchical {
        return Err(Error::Mode {
            expected: "hierarchical",
        });
    }
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for ex in batch {
        total += model.loss(&ex.features, &ex.label)?;
    }
    Ok(total / batch.len() as f64)
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = math::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum());
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Training-loop settings. `warmup` and `lr_factor` feed the schedule
/// together with the model's `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub lr_factor: f64,
    pub warmup: u64,
    pub adam: AdamConfig,
    /// Score eval with the field-constrained decoder.
    pub constrained_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            seed: 0,
            clip_norm: 5.0,
            lr_factor: 0.95,
            warmup: 18_000,
            adam: AdamConfig::default(),
            constrained_eval: false,
        }
    }
}

impl TrainConfig {
    /// Recipe for the desk model on the synthetic corpus: a shorter
    /// warmup and lower peak suited to 75 steps per epoch.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            lr_factor: 0.5,
            warmup: 1500,
            ..Self::default()
        }
    }

    pub fn schedule(&self, model_dim: usize) -> ScheduleConfig {
        ScheduleConfig {
            factor: self.lr_factor,
            warmup: self.warmup,
            model_dim,
        }
    }
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_domain_acc: f64,
    pub eval_intent_acc: f64,
    pub eval_slot_acc: f64,
    pub eval_exact_match: f64,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Epoch of the best eval exact match (1-based), if any epoch ran.
    pub best_epoch: Option<usize>,
    pub best_report: Option<EvalReport>,
    pub best_params: Vec<Tensor>,
    pub steps: u64,
}

/// Mean loss and mean gradient over `batch`, each utterance on its own
/// training graph with dropout drawn from its seed. Per-utterance
/// gradients are summed in batch order, so the result does not depend on
/// how work was spread over threads.
pub fn batch_gradients(model: &Model, batch: &[(&Example, u64)]) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let per = map_ordered(batch, |(ex, seed)| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::training(model.params(), *seed);
        let loss = model.network().loss(&mut g, &ex.features, &ex.label)?;
        let value = g.value(loss).data()[0];
        Ok((value, g.backward(loss)?.into_param_grads(model.params())))
    });
    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for r in per {
        let (loss, grads) = r?;
        total += loss;
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = sum.expect("non-empty batch");
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((total / n, grads))
}

/// Decodes `examples` and scores them.
pub fn evaluate_examples(model: &Model, examples: &[Example], constrained: bool) -> Result<EvalReport> {
    let decoded = predict_all(model, examples.iter().map(|e| &e.features), constrained)?;
    let preds: Vec<(String, _)> = examples.iter().map(|e| e.id.clone()).zip(decoded).collect();
    let refs: Vec<(String, _)> = examples.iter().map(|e| (e.id.clone(), e.label.clone())).collect();
    Ok(evaluate(&preds, &refs, &model.config().label_space)?.0)
}

/// Trains `model` in place and leaves it holding the parameters of the
/// epoch with the best eval exact match. `on_epoch` sees every epoch's
/// metrics and the current model, with a flag for a new best.
pub fn train<F>(
    model: &mut Model,
    train_set: &[Example],
    eval_set: &[Example],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochMetrics, &Model, bool) -> Result<()>,
{
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::data("training needs non-empty train and eval sets"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let schedule = config.schedule(model.config().model_dim);
    let mut adam = AdamState::new(model.params(), config.adam);
    let mut outcome = TrainOutcome {
        metrics: Vec::new(),
        best_epoch: None,
        best_report: None,
        best_params: model.params().to_vec(),
        steps: 0,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = f64::NEG_INFINITY;
    let mut lr = 0.0;
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[10, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let step = adam.step + 1;
            let batch: Vec<(&Example, u64)> = chunk
                .iter()
                .enumerate()
                .map(|(i, &k)| (&train_set[k], derive_seed(config.seed, &[11, step, i as u64])))
                .collect();
            let (loss, mut grads) = batch_gradients(model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            clip_global_norm(&mut grads, config.clip_norm);
            lr = lr_at(step, &schedule)?;
            adam_step(model.params_mut(), &grads, &mut adam, lr)?;
            loss_sum += loss;
            batches += 1;
        }
        outcome.steps = adam.step;
        let report = evaluate_examples(model, eval_set, config.constrained_eval)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            eval_domain_acc: report.domain_acc,
            eval_intent_acc: report.intent_acc,
            eval_slot_acc: report.slot_macro_acc,
            eval_exact_match: report.exact_match,
            lr,
        };
        let improved = report.exact_match > best;
        if improved {
            best = report.exact_match;
            outcome.best_epoch = Some(epoch);
            outcome.best_params = model.params().to_vec();
            outcome.best_report = Some(report);
        }
        on_epoch(&metrics, model, improved)?;
        outcome.metrics.push(metrics);
    }
    model.params_mut().clone_from_slice(&outcome.best_params);
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::LabelVector;
    use crate::model::ModelConfig;
    use alloc::vec;

    #[test]
    fn schedule_examples() {
        let s = ScheduleConfig::default();
        let peak = lr_at(18_000, &s).unwrap();
        assert!((peak - 0.95 / (128f64.sqrt() * 18_000f64.sqrt())).abs() < 1e-12);
        assert!((peak - 6.258e-4).abs() < 1e-6);
        let first = lr_at(1, &s).unwrap();
        assert!((first - 0.95 / 128f64.sqrt() / 18_000f64.powf(1.5)).abs() < 1e-18);
        assert!(lr_at(17_999, &s).unwrap() < peak);
        assert!(lr_at(18_001, &s).unwrap() < peak);
        assert!(lr_at(0, &s).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((smoothed_cross_entropy(&[0.0, 0.0], 0, 0.1).unwrap() - 2f64.ln()).abs() < 1e-15);
        for eps in [0.0, 0.1, 0.5] {
            let l = smoothed_cross_entropy(&[1.5; 7], 3, eps).unwrap();
            assert!((l - 7f64.ln()).abs() < 1e-12);
        }
        let logits = [0.3, -1.0, 2.0];
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        let plain = -(logits[2].exp() / z).ln();
        assert!((smoothed_cross_entropy(&logits, 2, 0.0).unwrap() - plain).abs() < 1e-14);
        assert!(smoothed_cross_entropy(&logits, 3, 0.1).is_err());
    }

    #[test]
    fn cross_entropy_never_below_floor() {
        let floor = smoothed_ce_floor(5, 0.1);
        let mut best = f64::INFINITY;
        for scale in [0.0, 1.0, 2.0, 3.0, 4.0, 8.0] {
            let logits: Vec<f64> = (0..5).map(|c| if c == 1 { scale } else { 0.0 }).collect();
            let l = smoothed_cross_entropy(&logits, 1, 0.1).unwrap();
            assert!(l >= floor - 1e-12);
            best = best.min(l);
        }
        // optimum: logit gap ln(q_on / q_off) = ln(0.92 / 0.02)
        let gap = (0.92f64 / 0.02).ln();
        let logits: Vec<f64> = (0..5).map(|c| if c == 1 { gap } else { 0.0 }).collect();
        assert!((smoothed_cross_entropy(&logits, 1, 0.1).unwrap() - floor).abs() < 1e-12);
        assert!(best > floor);
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![Tensor::scalar(0.0).unwrap()];
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[Tensor::scalar(1.0).unwrap()], &mut st, 0.1).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-9);

        let mut q = vec![Tensor::full(&[3], 0.7)];
        let before = q.clone();
        let mut st = AdamState::new(&q, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut q, &[Tensor::zeros(&[3])], &mut st, 0.1).unwrap();
        }
        assert_eq!(q, before);
        assert!(adam_step(&mut q, &[Tensor::zeros(&[2])], &mut st, 0.1).is_err());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = vec![Tensor::new(&[2], vec![3.0, -2.0]).unwrap()];
        let mut st = AdamState::new(&p, AdamConfig::default());
        let loss = |p: &Tensor| p.data().iter().map(|v| v * v).sum::<f64>();
        let mut last = loss(&p[0]);
        for _ in 0..2 {
            let g = Tensor::new(&[2], p[0].data().iter().map(|v| 2.0 * v).collect()).unwrap();
            adam_step(&mut p, &[g], &mut st, 0.1).unwrap();
            let now = loss(&p[0]);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new(&[2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Tensor::new(&[1], vec![0.5]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    fn examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                id: format!("u{i}"),
                features: Tensor::full(&[3, 6], 0.1 * i as f64),
                label: LabelVector::new(i % 2, i % 3, vec![]),
            })
            .collect()
    }

    #[test]
    fn sequence_loss_is_a_mean() {
        let model = Model::new(ModelConfig::tiny(Mode::Hierarchical), 1).unwrap();
        let ex = examples(2);
        let both = sequence_loss(&model, &ex).unwrap();
        let a = sequence_loss(&model, &ex[..1]).unwrap();
        let b = sequence_loss(&model, &ex[1..]).unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-14);
        let cls = Model::new(ModelConfig::tiny(Mode::Classification), 1).unwrap();
        assert!(sequence_loss(&cls, &ex).is_err());
    }

    #[test]
    fn zero_epochs_keeps_initial_model() {
        let mut model = Model::new(ModelConfig::tiny(Mode::Hierarchical), 1).unwrap();
        let init = model.params().to_vec();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train(&mut model, &examples(4), &examples(2), &cfg, |_, _, _| Ok(())).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(model.params(), &init[..]);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { epochs: 2, batch_size: 3, warmup: 10, ..TrainConfig::default() };
        let run = || {
            let mut model = Model::new(ModelConfig::tiny(Mode::Hierarchical), 1).unwrap();
            let out = train(&mut model, &examples(7), &examples(3), &cfg, |_, _, _| Ok(())).unwrap();
            (out.metrics, model.params().to_vec())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.len(), 2);
        assert!(train(&mut Model::new(ModelConfig::tiny(Mode::Hierarchical), 1).unwrap(), &[], &examples(1), &cfg, |_, _, _| Ok(())).is_err());
    }
}
