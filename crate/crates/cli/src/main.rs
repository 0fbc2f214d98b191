mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mscnn_core::analysis::analyze;
use mscnn_core::bench::{relative_improvement, run_bench};
use mscnn_core::config::ConfigFile;
use mscnn_core::frontend::io::{read_wav, write_fmat};
use mscnn_core::frontend::logmel::logmel;
use mscnn_core::frontend::specaugment::spec_augment;
use mscnn_core::multistream::Model;
use mscnn_core::trainer::checkpoint::Checkpoint;
use mscnn_core::trainer::data::{synth_dataset, Dataset};
use mscnn_core::trainer::{evaluate, Trainer};
use mscnn_core::{Error, Result};
use serde_json::{json, Value};

use report::{object, render};

#[derive(Parser)]
#[command(name = "mscnn", version, about = "Multistream TDNN-F acoustic model toolkit")]
struct Cli {
    /// Run seed; falls back to MSCNN_SEED, then to the config file.
    #[arg(long, global = true, env = "MSCNN_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract 40-bin log-mel features from a WAV file into an FMAT1 file.
    Featurize {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Apply the [augment] masking policy.
        #[arg(long)]
        augment: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Report alignment, receptive field and parameter count of a model config.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Train a model; writes train.log and final.ckpt into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from the parameters of an existing checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Frame accuracy and mean cross-entropy of a checkpoint on an utterance list.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write the configured synthetic corpus as FMAT1 files plus utterance lists.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time inference and report throughput and real-time factor.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 10.0)]
        frame_shift_ms: f64,
        /// Second checkpoint to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

/// 2 for bad input or usage, 1 for everything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::StaleCache(_) | Error::Mode { .. } | Error::NonFiniteLoss { .. } => 1,
        _ => 2,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ConfigFile> {
    let mut cfg = ConfigFile::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    cfg.augment.seed = cfg.train.seed;
    cfg.data.synth.feature_dim = cfg.model.input_dim;
    Ok(cfg)
}

fn featurize(wav: &Path, out: &Path, augment: bool, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let audio = read_wav(wav)?;
    let spec = logmel(&audio.samples, audio.sample_rate_hz)?;
    let mut feats = spec.frames;
    if augment {
        let mut policy = match config {
            Some(p) => load_config(p, seed)?.augment,
            None => Default::default(),
        };
        if let Some(s) = seed {
            policy.seed = s;
        }
        feats = spec_augment(&feats, &policy);
    }
    write_fmat(out, &feats)?;
    println!("{}\t{} frames x {} bins", out.display(), feats.dim(0), feats.dim(1));
    Ok(())
}

fn analysis_report(cfg: &ConfigFile) -> Value {
    let a = analyze(&cfg.model);
    let breakdown: serde_json::Map<String, Value> = a
        .parameters
        .breakdown
        .iter()
        .map(|(k, n)| (k.clone(), json!(n)))
        .collect();
    object(vec![
        ("streams", json!(a.streams)),
        ("num_streams", json!(cfg.model.streams.len())),
        ("dilations", json!(cfg.model.dilations())),
        ("subsample_rate", json!(a.alignment.rate)),
        ("grid_aligned", json!(a.alignment.per_stream)),
        ("all_aligned", json!(a.alignment.all_aligned)),
        ("concat_dim", json!(cfg.model.concat_dim())),
        (
            "receptive_field",
            object(vec![
                ("stem", json!(a.receptive_field.stem)),
                ("per_stream", json!(a.receptive_field.per_stream)),
                ("total", json!(a.receptive_field.total)),
                ("left", json!(a.receptive_field.left)),
                ("right", json!(a.receptive_field.right)),
            ]),
        ),
        (
            "parameters",
            object(vec![
                ("total", json!(a.parameters.total)),
                ("breakdown", Value::Object(breakdown)),
            ]),
        ),
        ("min_frames", json!(a.min_frames)),
    ])
}

fn load_datasets(cfg: &ConfigFile) -> Result<(Dataset, Option<Dataset>)> {
    if let Some(list) = &cfg.data.train_list {
        let heldout = cfg.data.heldout_list.as_deref().map(Dataset::read_list).transpose()?;
        return Ok((Dataset::read_list(list)?, heldout));
    }
    let train = synth_dataset(&cfg.data.synth)?.data;
    let mut spec = cfg.data.synth.clone();
    spec.num_utterances = cfg.data.synth_heldout;
    spec.seed = spec.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let heldout = (spec.num_utterances > 0)
        .then(|| synth_dataset(&spec).map(|s| s.data))
        .transpose()?;
    Ok((train, heldout))
}

fn train(config: &Path, out: &Path, init: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let (train_set, heldout) = load_datasets(&cfg)?;
    if cfg.data.train_list.is_none() {
        train_set.write_list(out, "train")?;
        if let Some(h) = &heldout {
            h.write_list(out, "heldout")?;
        }
    }
    let model = match init {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.model != cfg.model {
                eprintln!("note: using the model architecture stored in {}", p.display());
            }
            ck.build_model()?
        }
        None => Model::new(cfg.model.clone())?,
    };
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let logs = trainer.train(&train_set)?;
    let mut text = String::new();
    for l in &logs {
        text.push_str(&format!("{l}\n"));
    }
    print!("{text}");
    let log_path = out.join("train.log");
    fs::write(&log_path, &text).map_err(|e| Error::Io {
        path: log_path,
        source: e,
    })?;
    trainer.checkpoint().save(&out.join("final.ckpt"))?;
    if let Some(h) = heldout {
        let r = evaluate(&trainer.model, &h)?;
        println!(
            "heldout\taccuracy={:.6}\tmean_loss={:.6}\tframes={}",
            r.accuracy, r.mean_loss, r.frames
        );
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, json: bool) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.build_model()?;
    let set = Dataset::read_list(data)?;
    let r = evaluate(&model, &set)?;
    let v = object(vec![
        ("accuracy", json!(r.accuracy)),
        ("mean_loss", json!(r.mean_loss)),
        ("frames", json!(r.frames)),
        ("utterances", json!(set.len())),
    ]);
    print!("{}", render(&v, json));
    Ok(())
}

fn synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let (train_set, heldout) = load_datasets(&cfg)?;
    train_set.write_list(out, "train")?;
    if let Some(h) = heldout {
        h.write_list(out, "heldout")?;
    }
    println!("{}", out.join("train.list").display());
    Ok(())
}

fn bench_one(
    path: &Path,
    frames: usize,
    threads: usize,
    reps: usize,
    shift: f64,
) -> Result<mscnn_core::bench::BenchReport> {
    let model = Checkpoint::load(path)?.build_model()?;
    run_bench(&model, frames, threads, reps, shift).inspect_err(|e| {
        if let Error::InsufficientContext { .. } = e {
            let rf = mscnn_core::analysis::receptive_field(model.config());
            eprintln!("the model's receptive field is {} frames", rf.total);
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn bench(
    checkpoint: &Path,
    frames: usize,
    threads: usize,
    reps: usize,
    shift_ms: f64,
    baseline: Option<&Path>,
    json: bool,
) -> Result<()> {
    let shift = shift_ms / 1000.0;
    let r = bench_one(checkpoint, frames, threads, reps, shift)?;
    let mut pairs = vec![
        ("frames", json!(r.frames)),
        ("threads", json!(r.threads)),
        ("repetitions", json!(r.repetitions)),
        ("median_seconds", json!(r.median_seconds)),
        ("frames_per_second", json!(r.frames_per_second)),
        ("rtf", json!(r.rtf)),
    ];
    if let Some(b) = baseline {
        let base = bench_one(b, frames, threads, reps, shift)?;
        pairs.push(("baseline_rtf", json!(base.rtf)));
        pairs.push(("relative_rtf_improvement", json!(relative_improvement(base.rtf, r.rtf))));
    }
    print!("{}", render(&object(pairs), json));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Featurize {
            wav,
            out,
            augment,
            config,
        } => featurize(&wav, &out, augment, config.as_deref(), seed),
        Command::Analyze { config, json } => {
            let cfg = load_config(&config, seed)?;
            print!("{}", render(&analysis_report(&cfg), json));
            Ok(())
        }
        Command::Train { config, out, init } => train(&config, &out, init.as_deref(), seed),
        Command::Eval { checkpoint, data, json } => eval(&checkpoint, &data, json),
        Command::Synth { config, out } => synth(&config, &out, seed),
        Command::Bench {
            checkpoint,
            frames,
            threads,
            reps,
            frame_shift_ms,
            baseline,
            json,
        } => bench(
            &checkpoint,
            frames,
            threads,
            reps,
            frame_shift_ms,
            baseline.as_deref(),
            json,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
