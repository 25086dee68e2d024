//! End-to-end steps shared by the command line and the test suites:
//! corpus export, featurization, training and evaluation runs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use slu_core::data::{Example, Manifest, Split, SyntheticCorpus, SyntheticSpec};
use slu_core::decoding::{LabelSpace, LabelVector};
use slu_core::eval::{evaluate, predict_all, ConfusionMatrix, EvalReport};
use slu_core::features::{cmvn_apply, cmvn_fit, featurize, CmvnStats};
use slu_core::model::{Mode, Model, ModelConfig};
use slu_core::numerics::{grad_check, GradCheckReport};
use slu_core::training::{train, EpochMetrics, TrainConfig, TrainOutcome};
use slu_core::Tensor;

use crate::audio::{read_wav, write_wav};
use crate::error::{Error, IoContext, Result};
use crate::manifest::{write_label_space, write_manifest};
use crate::report::{write_confusion, write_predictions, write_report, MetricsWriter, PredictionRecord};
use crate::store::write_checkpoint;

/// Everything a run needs; any field left out of a JSON file keeps its
/// default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Paper-size model and schedule.
    Paper,
    /// Small model and recipe that train on the synthetic corpus in minutes.
    Desk,
    /// Gradient-check model.
    Tiny,
}

impl RunConfig {
    pub fn preset(preset: Preset, mode: Mode) -> Self {
        match preset {
            Preset::Paper => Self {
                model: ModelConfig::default().with_mode(mode),
                ..Self::default()
            },
            Preset::Desk => Self {
                model: ModelConfig::desk(mode),
                train: TrainConfig::desk(),
                ..Self::default()
            },
            Preset::Tiny => Self {
                model: ModelConfig::tiny(mode),
                ..Self::default()
            },
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, json + "\n").at(path)
    }
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.csv", split.as_str()))
}

pub fn label_space_path(dir: &Path) -> PathBuf {
    dir.join("labels.json")
}

/// Writes `dir/wav/<id>.wav`, one manifest per split and the label space.
/// Manifest sources are paths relative to `dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir).at(&wav_dir)?;
    corpus
        .utterances
        .par_iter()
        .map(|u| write_wav(&wav_dir.join(format!("{}.wav", u.id)), &u.waveform))
        .collect::<Result<Vec<()>>>()?;
    write_label_space(&label_space_path(dir), &corpus.label_space)?;
    for split in Split::ALL {
        let mut m = corpus.manifest(split);
        for e in &mut m.entries {
            e.source = format!("wav/{}.wav", e.id);
        }
        write_manifest(&manifest_path(dir, split), &m)?;
    }
    Ok(())
}

/// Featurizes every manifest entry; relative sources resolve against
/// `base`. Output keeps manifest order and is keyed by utterance id.
pub fn featurize_manifest(manifest: &Manifest, base: &Path) -> Result<Vec<(String, Tensor)>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = base.join(&e.source);
            let w = read_wav(&path)?;
            let f = featurize(&w).map_err(|err| Error::format(&path, err.to_string()))?;
            Ok((e.id.clone(), f))
        })
        .collect()
}

pub fn fit_cmvn<'a>(features: impl IntoIterator<Item = &'a Tensor>) -> Result<CmvnStats> {
    let all: Vec<&Tensor> = features.into_iter().collect();
    Ok(cmvn_fit(all.iter().copied())?)
}

/// Feature lookup by utterance id over one or more stores.
#[derive(Debug, Default)]
pub struct FeatureTable(HashMap<String, Tensor>);

impl FeatureTable {
    pub fn extend(&mut self, records: Vec<(String, Tensor)>, origin: &Path) -> Result<()> {
        for (id, t) in records {
            if self.0.insert(id.clone(), t).is_some() {
                return Err(Error::format(origin, format!("duplicate feature id {id:?}")));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.0.get(id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Model-ready examples for a manifest, normalized with `cmvn` if given.
pub fn examples_for(manifest: &Manifest, table: &FeatureTable, cmvn: Option<&CmvnStats>) -> Result<Vec<Example>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let raw = table
                .get(&e.id)
                .ok_or_else(|| Error::Core(slu_core::Error::Data(format!("no features for id {:?}", e.id))))?;
            let features = match cmvn {
                Some(s) => cmvn_apply(raw, s)?,
                None => raw.clone(),
            };
            Ok(Example {
                id: e.id.clone(),
                features,
                label: e.label.clone(),
            })
        })
        .collect()
}

/// Normalizes every split with statistics fitted on `train`.
pub fn normalize_splits(train: &mut [Example], others: &mut [&mut [Example]]) -> Result<CmvnStats> {
    let stats = fit_cmvn(train.iter().map(|e| &e.features))?;
    for e in train.iter_mut().chain(others.iter_mut().flat_map(|s| s.iter_mut())) {
        e.features = cmvn_apply(&e.features, &stats)?;
    }
    Ok(stats)
}

/// Files written by [`train_run`] into its output directory.
pub const CHECKPOINT_FILE: &str = "model.slum";
pub const METRICS_FILE: &str = "metrics.csv";

/// Trains and writes the metrics CSV (row by row) and the best checkpoint.
/// `progress` sees each epoch as it finishes.
pub fn train_run(
    model: &mut Model,
    train_set: &[Example],
    eval_set: &[Example],
    config: &TrainConfig,
    out_dir: &Path,
    mut progress: impl FnMut(&EpochMetrics, bool),
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let mut metrics = MetricsWriter::create(&out_dir.join(METRICS_FILE))?;
    let mut failure: Option<Error> = None;
    let outcome = train(model, train_set, eval_set, config, |m, _, best| {
        progress(m, best);
        if let Err(e) = metrics.push(m) {
            failure = Some(e);
            return Err(slu_core::Error::Data("could not write metrics".into()));
        }
        Ok(())
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let outcome = outcome?;
    write_checkpoint(&out_dir.join(CHECKPOINT_FILE), model)?;
    Ok(outcome)
}

/// Results of scoring a model on a labeled set.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub confusion: Vec<ConfusionMatrix>,
    pub predictions: Vec<PredictionRecord>,
}

pub fn evaluate_model(model: &Model, examples: &[Example], constrained: bool) -> Result<EvalOutcome> {
    let space = &model.config().label_space;
    let decoded = predict_all(model, examples.iter().map(|e| &e.features), constrained)?;
    let predictions = examples
        .iter()
        .zip(&decoded)
        .map(|(e, d)| PredictionRecord::new(&e.id, model.config().mode, d, space))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<(String, _)> = examples.iter().map(|e| e.id.clone()).zip(decoded).collect();
    let refs: Vec<(String, LabelVector)> = examples.iter().map(|e| (e.id.clone(), e.label.clone())).collect();
    let (report, confusion) = evaluate(&preds, &refs, space)?;
    Ok(EvalOutcome {
        report,
        confusion,
        predictions,
    })
}

pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

pub fn confusion_path(dir: &Path, m: &ConfusionMatrix) -> PathBuf {
    dir.join(format!("confusion_{}.csv", m.field.name()))
}

/// Writes the report, one confusion CSV per field and the predictions.
pub fn write_eval(out: &EvalOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    write_report(&dir.join(REPORT_FILE), &out.report)?;
    for m in &out.confusion {
        write_confusion(&confusion_path(dir, m), m)?;
    }
    write_predictions(&dir.join(PREDICTIONS_FILE), &out.predictions)
}

/// Input length and label used by [`model_grad_check`].
pub const GRAD_CHECK_FRAMES: usize = 3;

/// Gradient check of the full model loss (dropout off) on a random
/// three-frame input and a random label, all drawn from `seed`.
pub fn model_grad_check(config: &ModelConfig, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let mut config = config.clone();
    config.dropout = 0.0;
    let mut model = Model::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = GRAD_CHECK_FRAMES * config.input_dim;
    let x = Tensor::new(
        &[GRAD_CHECK_FRAMES, config.input_dim],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let label = random_label(&config.label_space, &mut rng);
    let network = model.network().clone();
    let trainable = vec![true; model.params().len()];
    Ok(grad_check(model.params_mut(), &trainable, tolerance, |g| network.loss(g, &x, &label))?)
}

fn random_label(space: &LabelSpace, rng: &mut impl Rng) -> LabelVector {
    let mut ids = space.fields().into_iter().map(|f| rng.gen_range(0..space.cardinality(f)));
    let domain = ids.next().unwrap_or(0);
    let intent = ids.next().unwrap_or(0);
    LabelVector::new(domain, intent, ids.collect())
}

/// Attention weights of every head in every layer for one input, keyed by
/// layer and head (`encoder.0.self_attn.head.1.alpha`, …). Decoder maps
/// are taken on the teacher-forced pass over the emitted tokens.
pub fn attention_maps(model: &Model, x: &Tensor, emitted: &[usize]) -> Result<Vec<(String, Tensor)>> {
    use slu_core::decoding::SOP;
    use slu_core::model::ActivationTrace;
    use slu_core::numerics::Graph;

    let mut trace = ActivationTrace::enabled();
    let enc = model.encode_traced(x, &mut trace)?;
    match model.config().mode {
        Mode::Hierarchical => {
            let mut inputs = vec![SOP];
            inputs.extend(emitted.iter().take(emitted.len().saturating_sub(1)));
            model.decoder_logits_traced(&enc, &inputs, &mut trace)?;
        }
        Mode::Classification => {
            let mut g = Graph::new(model.params());
            let ev = g.constant(enc);
            model.network().class_logits(&mut g, ev, &mut trace)?;
        }
    }
    Ok(trace
        .entries()
        .iter()
        .filter(|(name, _)| name.ends_with(".alpha"))
        .cloned()
        .collect())
}
