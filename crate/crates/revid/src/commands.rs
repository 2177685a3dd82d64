//! Command-line interface: argument definitions and the five subcommands.
//!
//! Exit codes, mapped from [`CommandError::exit_code`]:
//!
//! * 0 — success
//! * 1 — validation or format error (bad config, corrupt or incompatible
//!   artifact, malformed feature file, bad usage)
//! * 2 — operating-system I/O failure (missing file, unwritable path)
//! * 3 — numerical check failure (`gradcheck` found a gradient mismatch)

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::config::{load_config, Config, ConfigError, DatasetKind};
use crate::data::{
    generate_synthetic, holdout_split, load_feature_records, save_feature_records, to_feature_records,
    DataError, FeatureRecord,
};
use crate::eval::{
    cmc_top_k, mean_average_precision, rank_query, EmbeddingSet, EvalError, EvalReport, Metric,
};
use crate::gradcheck::{run_gradcheck, GradCheckError};
use crate::pipeline::{
    infer_feature, run_train_plan, PipelineError, PipelineModel, QueryInput, TrainData,
};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Desk-scale vehicle re-identification: train, embed, and evaluate.
#[derive(Debug, Parser)]
#[command(name = "revid", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the staged pipeline and write a checkpoint.
    Train {
        /// Experiment config (TOML); omitted means all defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the trained model.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed a feature file of instances with a trained checkpoint.
    Embed {
        /// Trained model to embed with.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output feature file of embeddings.
        #[arg(long)]
        out: PathBuf,
        /// Seed for query-sequence assembly.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Input feature file; each record is one instance.
        input: PathBuf,
    },
    /// Rank queries against a gallery and report Top-1, Top-5, and mAP.
    Eval {
        /// Distance metric: euclidean or cosine.
        #[arg(long, default_value = "cosine")]
        metric: Metric,
        /// Report an additional CMC rate at this rank.
        #[arg(long)]
        top_k: Option<usize>,
        /// Query feature file.
        queries: PathBuf,
        /// Gallery feature file.
        gallery: PathBuf,
    },
    /// Verify analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Generate the synthetic dataset as a feature file of raw pixels.
    Synth {
        /// Experiment config (TOML); omitted means all defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output feature file (with --split, the stem for three files).
        #[arg(long)]
        out: PathBuf,
        /// Write <out>.train/.query/.gallery files using the cross-camera
        /// holdout split instead of one combined file.
        #[arg(long)]
        split: bool,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Any failure a subcommand can surface.
#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        source: DataError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error("cannot write {path}: {source}")]
    WriteIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("gradient check failed; see the report above")]
    NumericalCheckFailed,
}

impl CommandError {
    /// The process exit code this failure maps to.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(ConfigError::Io { .. }) => 2,
            CommandError::Config(_) => 1,
            CommandError::Checkpoint(CheckpointError::Io { .. }) => 2,
            CommandError::Checkpoint(_) => 1,
            CommandError::Pipeline(_) => 1,
            CommandError::Data { source, .. } => match source {
                DataError::Io(_) => 2,
                _ => 1,
            },
            CommandError::Eval(_) => 1,
            CommandError::GradCheck(_) => 1,
            CommandError::WriteIo { .. } => 2,
            CommandError::NumericalCheckFailed => 3,
        }
    }
}

/// Dispatches a parsed command line, printing results to stdout.
pub fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Train {
            config,
            checkpoint,
            seed,
        } => cmd_train(config.as_deref(), &checkpoint, seed, &mut |line| {
            println!("{line}");
        }),
        Command::Embed {
            checkpoint,
            out,
            seed,
            input,
        } => {
            let n = cmd_embed(&checkpoint, &input, &out, seed)?;
            println!("wrote {n} embeddings to {}", out.display());
            Ok(())
        }
        Command::Eval {
            metric,
            top_k,
            queries,
            gallery,
        } => {
            for line in cmd_eval(&queries, &gallery, metric, top_k)? {
                println!("{line}");
            }
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let (lines, passed) = cmd_gradcheck(seed)?;
            for line in lines {
                println!("{line}");
            }
            if passed {
                Ok(())
            } else {
                Err(CommandError::NumericalCheckFailed)
            }
        }
        Command::Synth {
            config,
            out,
            split,
            seed,
        } => {
            for (path, n) in cmd_synth(config.as_deref(), &out, split, seed)? {
                println!("wrote {n} records to {}", path.display());
            }
            Ok(())
        }
    }
}

/// Loads (or defaults) and validates the config, applying a seed override.
fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config, ConfigError> {
    let mut config = match path {
        Some(p) => load_config(p)?,
        None => Config::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_features(path: &Path) -> Result<Vec<FeatureRecord>, CommandError> {
    load_feature_records(path).map_err(|source| CommandError::Data {
        path: path.to_owned(),
        source,
    })
}

fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<(), CommandError> {
    save_feature_records(path, records).map_err(|source| match source {
        DataError::Io(source) => CommandError::WriteIo {
            path: path.to_owned(),
            source,
        },
        source => CommandError::Data {
            path: path.to_owned(),
            source,
        },
    })
}

/// Trains per the config and writes the checkpoint. Epoch log lines go to
/// `observer` as they are produced.
pub fn cmd_train(
    config_path: Option<&Path>,
    checkpoint_path: &Path,
    seed: Option<u64>,
    observer: &mut dyn FnMut(&str),
) -> Result<(), CommandError> {
    let config = resolve_config(config_path, seed)?;

    // Materialize the training corpus. Both arms keep their backing storage
    // alive for the duration of training.
    let images;
    let records;
    let (data, input_width, num_classes) = match config.dataset.kind {
        DatasetKind::Synthetic => {
            let spec = config.synthetic_spec().expect("kind is synthetic");
            images = generate_synthetic(&spec).map_err(|source| CommandError::Data {
                path: PathBuf::from("<synthetic>"),
                source,
            })?;
            let first = images.first().ok_or(PipelineError::EmptyDataset)?;
            let width = first.width() * first.height() * first.depth();
            let classes = count_identities(images.iter().map(|i| i.id()));
            (TrainData::Images(&images), width, classes)
        }
        DatasetKind::Features => {
            let path = config
                .dataset
                .train_path
                .clone()
                .expect("validated: train_path present");
            records = load_features(&path)?;
            let first = records.first().ok_or(PipelineError::EmptyDataset)?;
            let classes = count_identities(records.iter().map(|r| r.id.as_str()));
            (TrainData::Features(&records), first.vector.len(), classes)
        }
    };

    let model_config = config.model_config(input_width, num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = PipelineModel::new(model_config, &mut rng)?;
    let plan = config.train_plan()?;
    let options = config.train_options()?;
    run_train_plan(&mut model, &plan, &data, &options, |line| observer(line))?;
    save_checkpoint(&model, checkpoint_path)?;
    Ok(())
}

fn count_identities<'a>(ids: impl Iterator<Item = &'a str>) -> usize {
    ids.collect::<BTreeSet<_>>().len()
}

/// Embeds every record of the input feature file, preserving id and camera
/// tags. Returns the number of embeddings written.
pub fn cmd_embed(
    checkpoint_path: &Path,
    input: &Path,
    out: &Path,
    seed: u64,
) -> Result<usize, CommandError> {
    let model = load_checkpoint(checkpoint_path)?;
    let records = load_features(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Augmentation ranges do not matter for feature-record queries (the
    // vector is repeated, not augmented); defaults keep the call uniform.
    let augment = crate::data::AugmentParams::default();
    let mut out_records = Vec::with_capacity(records.len());
    for record in &records {
        let vector = infer_feature(&model, QueryInput::Features(record), &augment, &mut rng)?;
        out_records.push(FeatureRecord::new(
            record.id.clone(),
            record.camera.clone(),
            vector,
        ));
    }
    write_features(out, &out_records)?;
    Ok(out_records.len())
}

/// Evaluates a query file against a gallery file; returns the report lines.
pub fn cmd_eval(
    queries_path: &Path,
    gallery_path: &Path,
    metric: Metric,
    top_k: Option<usize>,
) -> Result<Vec<String>, CommandError> {
    let queries = EmbeddingSet::new(load_features(queries_path)?)?;
    let gallery = EmbeddingSet::new(load_features(gallery_path)?)?;
    if queries.width() != gallery.width() {
        return Err(EvalError::WidthMismatch {
            query: queries.width(),
            gallery: gallery.width(),
        }
        .into());
    }
    let ranked = queries
        .records()
        .iter()
        .enumerate()
        .map(|(i, q)| rank_query(q, i, &gallery, metric))
        .collect::<Result<Vec<_>, _>>()?;
    let report = EvalReport {
        top1: cmc_top_k(&ranked, 1)?,
        top5: cmc_top_k(&ranked, 5)?,
        map: mean_average_precision(&ranked)?,
        n_query: queries.len(),
        n_gallery: gallery.len(),
        metric,
    };
    let mut lines: Vec<String> = report.to_string().lines().map(String::from).collect();
    if let Some(k) = top_k {
        lines.push(format!("top-{k}   : {:.4}", cmc_top_k(&ranked, k)?));
    }
    lines.push(report.machine_line());
    Ok(lines)
}

/// Runs the gradient checker; returns its report lines and overall verdict.
pub fn cmd_gradcheck(seed: u64) -> Result<(Vec<String>, bool), CommandError> {
    let report = run_gradcheck(seed)?;
    let mut lines = vec![format!(
        "central differences: h={:e} tolerance={:e}",
        report.step, report.tolerance
    )];
    lines.extend(report.lines());
    lines.push(format!("gradcheck {}", if report.passed() { "passed" } else { "FAILED" }));
    Ok((lines, report.passed()))
}

/// Generates the synthetic corpus and writes it as feature records of raw
/// pixels. Returns `(path, record count)` per file written.
pub fn cmd_synth(
    config_path: Option<&Path>,
    out: &Path,
    split: bool,
    seed: Option<u64>,
) -> Result<Vec<(PathBuf, usize)>, CommandError> {
    let mut config = resolve_config(config_path, seed)?;
    config.dataset.kind = DatasetKind::Synthetic;
    let spec = config.synthetic_spec().expect("kind forced to synthetic");
    let images = generate_synthetic(&spec).map_err(|source| CommandError::Data {
        path: PathBuf::from("<synthetic>"),
        source,
    })?;

    let mut written = Vec::new();
    if split {
        let parts = holdout_split(&images);
        for (suffix, subset) in [
            ("train", &parts.train),
            ("query", &parts.queries),
            ("gallery", &parts.gallery),
        ] {
            let path = out.with_extension(format!("{suffix}.tsv"));
            let records = to_feature_records(subset);
            write_features(&path, &records)?;
            written.push((path, records.len()));
        }
    } else {
        let records = to_feature_records(&images);
        write_features(out, &records)?;
        written.push((out.to_owned(), records.len()));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_feature_records;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("config.toml");
        std::fs::write(&path, text).unwrap();
        path
    }

    /// A config small enough that train-based tests stay fast.
    const TINY: &str = "\
seed = 5
[dataset]
num_identities = 3
images_per_identity = 2
viewpoint_count = 2
noise_scale = 0.01
[model]
vfl_width = 8
lstm_units = 8
[train]
batch_size = 8
[train.backbone]
epochs = 2
decay_every = 30
[train.vfl]
epochs = 2
decay_every = 20
[train.lstm]
epochs = 2
decay_every = 30
";

    #[test]
    fn train_writes_a_loadable_checkpoint_and_stage_logs() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), TINY);
        let ckpt = dir.path().join("model.ckpt");
        let mut lines = Vec::new();
        cmd_train(Some(&config), &ckpt, None, &mut |l| lines.push(l.to_owned())).unwrap();
        assert_eq!(lines.len(), 6, "three stages, two epochs each");
        assert!(lines.iter().any(|l| l.contains("stage=backbone")));
        assert!(lines.iter().any(|l| l.contains("stage=vfl")));
        assert!(lines.iter().any(|l| l.contains("stage=lstm")));
        let model = load_checkpoint(&ckpt).unwrap();
        assert_eq!(model.trained().len(), 3);
    }

    #[test]
    fn joint_regime_checkpoint_has_no_trained_lstm() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{TINY}[model.extra]\n");
        // Splice the regime into the model section instead of an extra table.
        let text = text.replace("[model]\n", "[model]\nregime = \"joint_vfl\"\n");
        let text = text.replace("[model.extra]\n", "[train.joint]\nepochs = 2\ndecay_every = 20\n");
        let config = write_config(dir.path(), &text);
        let ckpt = dir.path().join("model.ckpt");
        let mut lines = Vec::new();
        cmd_train(Some(&config), &ckpt, None, &mut |l| lines.push(l.to_owned())).unwrap();
        assert!(lines.iter().all(|l| l.contains("stage=joint_vfl")));
        let model = load_checkpoint(&ckpt).unwrap();
        assert!(!model
            .trained()
            .contains(&crate::pipeline::Component::Lstm));
        assert_eq!(model.trained().len(), 2);
    }

    #[test]
    fn train_twice_with_one_seed_logs_identical_lines() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), TINY);
        let run = |name: &str| {
            let ckpt = dir.path().join(name);
            let mut lines = Vec::new();
            cmd_train(Some(&config), &ckpt, None, &mut |l| lines.push(l.to_owned())).unwrap();
            lines
        };
        assert_eq!(run("a.ckpt"), run("b.ckpt"));
    }

    #[test]
    fn invalid_config_lists_every_violation() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(
            dir.path(),
            "[model]\nvfl_width = 0\nlstm_units = 0\n[train]\nbatch_size = 0\n",
        );
        let err = cmd_train(Some(&config), &dir.path().join("x.ckpt"), None, &mut |_| {})
            .unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let text = err.to_string();
        for field in ["model.vfl_width", "model.lstm_units", "train.batch_size"] {
            assert!(text.contains(field), "missing {field} in: {text}");
        }
    }

    #[test]
    fn embed_writes_one_line_per_input_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), TINY);
        let ckpt = dir.path().join("model.ckpt");
        cmd_train(Some(&config), &ckpt, None, &mut |_| {}).unwrap();

        // Build a 5-record input from the same synthetic corpus.
        let spec = resolve_config(Some(&config), None)
            .unwrap()
            .synthetic_spec()
            .unwrap();
        let images = generate_synthetic(&spec).unwrap();
        let records = to_feature_records(&images[..5]);
        let input = dir.path().join("input.tsv");
        save_feature_records(&input, &records).unwrap();

        let out_a = dir.path().join("a.tsv");
        let out_b = dir.path().join("b.tsv");
        assert_eq!(cmd_embed(&ckpt, &input, &out_a, 7).unwrap(), 5);
        assert_eq!(cmd_embed(&ckpt, &input, &out_b, 7).unwrap(), 5);
        assert_eq!(
            std::fs::read(&out_a).unwrap(),
            std::fs::read(&out_b).unwrap()
        );

        let embedded = load_feature_records(&out_a).unwrap();
        assert_eq!(embedded.len(), 5);
        // separate regime: units + n.
        assert_eq!(embedded[0].vector.len(), 8 + 8);
        assert_eq!(embedded[0].id, records[0].id);
        assert_eq!(embedded[0].camera, records[0].camera);
    }

    #[test]
    fn embed_rejects_width_incompatible_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), TINY);
        let ckpt = dir.path().join("model.ckpt");
        cmd_train(Some(&config), &ckpt, None, &mut |_| {}).unwrap();
        let input = dir.path().join("bad.tsv");
        save_feature_records(&input, &[FeatureRecord::new("q", None, vec![0.5; 10])]).unwrap();
        let err = cmd_embed(&ckpt, &input, &dir.path().join("o.tsv"), 7).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(matches!(
            err,
            CommandError::Pipeline(PipelineError::InputWidth { .. })
        ));
    }

    #[test]
    fn eval_reports_perfect_retrieval_on_identical_cross_camera_sets() {
        let dir = tempfile::tempdir().unwrap();
        let queries = vec![
            FeatureRecord::new("a", Some("c0".into()), vec![1.0, 0.0]),
            FeatureRecord::new("b", Some("c0".into()), vec![0.0, 1.0]),
        ];
        let gallery = vec![
            FeatureRecord::new("a", Some("c1".into()), vec![1.0, 0.1]),
            FeatureRecord::new("b", Some("c1".into()), vec![0.1, 1.0]),
        ];
        let q_path = dir.path().join("q.tsv");
        let g_path = dir.path().join("g.tsv");
        save_feature_records(&q_path, &queries).unwrap();
        save_feature_records(&g_path, &gallery).unwrap();
        let lines = cmd_eval(&q_path, &g_path, Metric::Cosine, Some(2)).unwrap();
        let machine = lines.last().unwrap();
        assert!(machine.starts_with("top1=1 top5=1 map=1 "));
        assert!(lines.iter().any(|l| l.starts_with("top-2")));
    }

    #[test]
    fn eval_maps_missing_files_to_io_and_width_mismatch_to_validation() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.tsv");
        let present = dir.path().join("g.tsv");
        save_feature_records(&present, &[FeatureRecord::new("a", None, vec![1.0])]).unwrap();
        let err = cmd_eval(&missing, &present, Metric::Cosine, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("absent.tsv"));

        let narrow = dir.path().join("q.tsv");
        save_feature_records(&narrow, &[FeatureRecord::new("a", None, vec![1.0, 2.0])]).unwrap();
        let err = cmd_eval(&narrow, &present, Metric::Cosine, None).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn gradcheck_reports_every_parameter_and_passes() {
        let (lines, passed) = cmd_gradcheck(11).unwrap();
        assert!(passed);
        assert_eq!(*lines.last().unwrap(), "gradcheck passed");
        let rows = lines
            .iter()
            .filter(|l| l.starts_with("component="))
            .count();
        assert!(rows >= 8);
        assert!(lines.iter().any(|l| l.contains("parameter=w_forget")));
    }

    #[test]
    fn synth_writes_combined_or_split_files() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), TINY);
        let combined = dir.path().join("data.tsv");
        let written = cmd_synth(Some(&config), &combined, false, None).unwrap();
        assert_eq!(written.len(), 1);
        // 3 identities x 2 viewpoints x 2 images per viewpoint.
        assert_eq!(written[0].1, 12);
        let records = parse_feature_records(
            std::fs::read_to_string(&combined).unwrap().as_bytes(),
        )
        .unwrap();
        assert_eq!(records.len(), 12);

        let written = cmd_synth(Some(&config), &dir.path().join("data.tsv"), true, None).unwrap();
        assert_eq!(written.len(), 3);
        let total: usize = written.iter().map(|(_, n)| n).sum();
        assert_eq!(total, 12);
        assert!(written[0].0.ends_with("data.train.tsv"));
        assert!(written[1].0.ends_with("data.query.tsv"));
        assert!(written[2].0.ends_with("data.gallery.tsv"));
    }

    #[test]
    fn exit_codes_cover_all_four_categories() {
        let validation = CommandError::Config(ConfigError::Invalid {
            violations: vec!["x".into()],
        });
        assert_eq!(validation.exit_code(), 1);
        let io = CommandError::WriteIo {
            path: PathBuf::from("x"),
            source: std::io::Error::other("disk"),
        };
        assert_eq!(io.exit_code(), 2);
        assert_eq!(CommandError::NumericalCheckFailed.exit_code(), 3);
    }
}
