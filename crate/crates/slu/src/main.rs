use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use slu_core::data::generate_synthetic;
use slu_core::decoding::decode;
use slu_core::features::featurize;
use slu_core::model::{parameter_count, Mode, Model};

use slu::audio::read_wav;
use slu::error::{Error, Result};
use slu::manifest::{load_manifest, read_label_space};
use slu::pipeline::{self, FeatureTable, Preset, RunConfig};
use slu::report::{write_attention, PredictionRecord};
use slu::store::{read_checkpoint, read_cmvn, read_features, write_cmvn, write_features};

const CMVN_FILE: &str = "cmvn.bin";
const CONFIG_FILE: &str = "config.json";

#[derive(Parser)]
#[command(name = "slu", version, about = "End-to-end transformer spoken language understanding")]
struct Cli {
    /// Seed for initialization, shuffling, dropout and data generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Restrict each decoding step to the expected field.
    #[arg(long, global = true)]
    constrained_decode: bool,
    /// Run configuration JSON (`{"model":…,"train":…,"synthetic":…}`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Classification,
    Hierarchical,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
    Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// WAV files listed in a manifest to a feature store (and CMVN stats).
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Directory that relative sources resolve against (default: the
        /// manifest's directory).
        #[arg(long)]
        wav_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also fit CMVN statistics on these features and write them here.
        #[arg(long)]
        cmvn_out: Option<PathBuf>,
    },
    /// Synthetic corpus: WAVs, per-split manifests and the label space.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the best checkpoint and a metrics CSV.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Feature stores holding every train and eval utterance.
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        /// CMVN statistics; fitted on the train split when omitted.
        #[arg(long)]
        cmvn: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a manifest: report JSON, confusion CSVs and
    /// predictions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        /// Defaults to the statistics saved next to the checkpoint.
        #[arg(long)]
        cmvn: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode one utterance and print a JSON line.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with_all = ["features", "id"])]
        wav: Option<PathBuf>,
        #[arg(long, requires = "id")]
        features: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        cmvn: Option<PathBuf>,
        /// Write one attention-weight CSV per head and layer here.
        #[arg(long)]
        attention_dir: Option<PathBuf>,
    },
    /// Print the number of trainable parameters.
    ParamCount,
    /// Compare analytic gradients of the full model with finite differences.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

impl Command {
    /// Preset used when neither --config nor --preset is given.
    fn default_preset(&self) -> Preset {
        match self {
            Command::ParamCount => Preset::Paper,
            Command::GradCheck { .. } => Preset::Tiny,
            _ => Preset::Desk,
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mode = match cli.mode {
        Some(ModeArg::Classification) => Some(Mode::Classification),
        Some(ModeArg::Hierarchical) => Some(Mode::Hierarchical),
        None => None,
    };
    let mut config = match (&cli.config, cli.preset) {
        (Some(path), _) => RunConfig::read(path)?,
        (None, p) => {
            let preset = match p {
                Some(PresetArg::Paper) => Preset::Paper,
                Some(PresetArg::Desk) => Preset::Desk,
                Some(PresetArg::Tiny) => Preset::Tiny,
                None => cli.command.default_preset(),
            };
            RunConfig::preset(preset, mode.unwrap_or_default())
        }
    };
    if let Some(mode) = mode {
        config.model.mode = mode;
    }
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.synthetic.seed = seed;
    }
    config.train.constrained_eval |= cli.constrained_decode;
    Ok(config)
}

fn load_tables(paths: &[PathBuf]) -> Result<FeatureTable> {
    let mut table = FeatureTable::default();
    for p in paths {
        table.extend(read_features(p)?, p)?;
    }
    Ok(table)
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

fn run(cli: Cli) -> Result<()> {
    let config = run_config(&cli)?;
    match &cli.command {
        Command::ParamCount => println!("{}", parameter_count(&config.model)?),
        Command::GradCheck { tolerance } => {
            let report = pipeline::model_grad_check(&config.model, config.train.seed, *tolerance)?;
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!("{verdict} max_rel_err={:e}", report.rel_error());
            if !report.passed() {
                return Err(Error::Numeric(format!("gradient check above tolerance {tolerance:e}")));
            }
        }
        Command::GenData { out } => {
            let corpus = generate_synthetic(&config.synthetic)?;
            pipeline::write_corpus(&corpus, out)?;
            eprintln!("wrote {} utterances to {}", corpus.utterances.len(), out.display());
        }
        Command::Featurize {
            manifest,
            labels,
            wav_dir,
            out,
            cmvn_out,
        } => {
            let space = labels.as_deref().map(read_label_space).transpose()?;
            let m = load_manifest(manifest, space.as_ref())?;
            let base = match wav_dir {
                Some(d) => d.clone(),
                None => manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
            };
            let records = pipeline::featurize_manifest(&m, &base)?;
            write_features(out, records.iter().map(|(id, t)| (id.as_str(), t)))?;
            if let Some(path) = cmvn_out {
                write_cmvn(path, &pipeline::fit_cmvn(records.iter().map(|(_, t)| t))?)?;
            }
            eprintln!("featurized {} utterances", records.len());
        }
        Command::Train {
            train,
            eval,
            labels,
            features,
            cmvn,
            out,
        } => {
            let space = match labels {
                Some(p) => Some(read_label_space(p)?),
                None => None,
            };
            let train_m = load_manifest(train, space.as_ref())?;
            let eval_m = load_manifest(eval, Some(&train_m.label_space))?;
            let table = load_tables(features)?;
            let raw = pipeline::examples_for(&train_m, &table, None)?;
            let stats = match cmvn {
                Some(p) => read_cmvn(p)?,
                None => pipeline::fit_cmvn(raw.iter().map(|e| &e.features))?,
            };
            let train_set = pipeline::examples_for(&train_m, &table, Some(&stats))?;
            let eval_set = pipeline::examples_for(&eval_m, &table, Some(&stats))?;
            let mut model_config = config.model.clone();
            model_config.label_space = train_m.label_space.clone();
            if let Some(e) = train_set.first() {
                if e.features.cols() != model_config.input_dim {
                    return Err(Error::Usage(format!(
                        "features have {} dimensions but the model expects {}",
                        e.features.cols(),
                        model_config.input_dim
                    )));
                }
            }
            let mut model = Model::new(model_config.clone(), config.train.seed)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            write_cmvn(&out.join(CMVN_FILE), &stats)?;
            RunConfig {
                model: model_config,
                ..config.clone()
            }
            .write(&out.join(CONFIG_FILE))?;
            eprintln!(
                "training {} parameters on {} utterances ({} eval)",
                model.num_parameters(),
                train_set.len(),
                eval_set.len()
            );
            let outcome = pipeline::train_run(&mut model, &train_set, &eval_set, &config.train, out, |m, best| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  exact {:.4}  lr {:.2e}{}",
                    m.epoch,
                    m.train_loss,
                    m.eval_exact_match,
                    m.lr,
                    if best { "  *" } else { "" }
                );
            })?;
            if let Some(report) = outcome.best_report {
                println!("{}", to_json(&report));
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            features,
            cmvn,
            out,
        } => {
            let model = read_checkpoint(checkpoint)?;
            let m = load_manifest(manifest, Some(&model.config().label_space))?;
            let stats = checkpoint_cmvn(checkpoint, cmvn.as_deref())?;
            let examples = pipeline::examples_for(&m, &load_tables(features)?, stats.as_ref())?;
            let outcome = pipeline::evaluate_model(&model, &examples, cli.constrained_decode)?;
            pipeline::write_eval(&outcome, out)?;
            println!("{}", to_json(&outcome.report));
        }
        Command::Predict {
            checkpoint,
            wav,
            features,
            id,
            cmvn,
            attention_dir,
        } => {
            let model = read_checkpoint(checkpoint)?;
            let stats = checkpoint_cmvn(checkpoint, cmvn.as_deref())?;
            let (name, raw) = match (wav, features, id) {
                (Some(w), _, _) => (w.display().to_string(), featurize(&read_wav(w)?)?),
                (None, Some(f), Some(id)) => {
                    let table = load_tables(std::slice::from_ref(f))?;
                    let t = table
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::format(f, format!("no features for id {id:?}")))?;
                    (id.clone(), t)
                }
                _ => return Err(Error::Usage("predict needs --wav or --features with --id".into())),
            };
            let x = match &stats {
                Some(s) => slu_core::features::cmvn_apply(&raw, s)?,
                None => raw,
            };
            let decoded = decode(&model, &x, cli.constrained_decode)?;
            let record = PredictionRecord::new(&name, model.config().mode, &decoded, &model.config().label_space)?;
            println!("{}", to_json(&record));
            if let Some(dir) = attention_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                for (key, alpha) in pipeline::attention_maps(&model, &x, &decoded.tokens)? {
                    write_attention(&dir.join(format!("{key}.csv")), &alpha)?;
                }
            }
        }
    }
    Ok(())
}

/// Explicit statistics, else those saved next to the checkpoint, else none.
fn checkpoint_cmvn(checkpoint: &Path, explicit: Option<&Path>) -> Result<Option<slu_core::features::CmvnStats>> {
    if let Some(p) = explicit {
        return read_cmvn(p).map(Some);
    }
    let sibling = checkpoint.with_file_name(CMVN_FILE);
    if sibling.exists() {
        read_cmvn(&sibling).map(Some)
    } else {
        Ok(None)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
