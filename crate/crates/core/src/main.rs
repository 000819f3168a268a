use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sunet::analysis::analyze_files;
use sunet::channel::{write_jsonl, SentenceRecord};
use sunet::config::RunConfig;
use sunet::dataset::{load_dataset, load_dataset_masks_optional, save_dataset, write_pgm, Gray};
use sunet::model::{SunetModel, MODEL_CONFIG_FILE};
use sunet::params::Mode;
use sunet::synthdata::{generate, GenerateSpec};
use sunet::trainer::{dsc, predict, split_by_subject, train, EPOCHS_CSV_HEADER};
use sunet::{checkpoint, Error, Result};

const EPOCHS_FILE: &str = "epochs.csv";

/// Symbolic semantic segmentation: data generation, training, inference
/// and symbol analysis.
#[derive(Parser)]
#[command(name = "sunet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset (PGM images and masks plus stats.csv).
    Gendata {
        /// Run config (JSON); `data.generate` holds the generator settings.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write model.ckpt, config.json and epochs.csv.
    Train {
        /// Run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Model output directory.
        #[arg(long)]
        out: PathBuf,
        /// Train the backbone with a plain 1x1 conv + sigmoid head instead of the channel.
        #[arg(long, default_value_t = false)]
        ablate_channel: bool,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict masks and sentences for a dataset.
    Infer {
        /// Model directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for {key}.pred.pgm, sentences.jsonl and dsc.csv.
        #[arg(long)]
        out: PathBuf,
        /// Optional run config; its backbone and channel must match the model.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Regress outcomes on symbols and mine sentence prefixes.
    Analyze {
        /// Sentence log (JSONL) written by `infer`.
        #[arg(long)]
        sentences: PathBuf,
        /// stats.csv of the same dataset.
        #[arg(long)]
        stats: PathBuf,
        /// Output directory for table2.csv and patterns.txt.
        #[arg(long)]
        out: PathBuf,
        /// Optional run config supplying the `analysis` section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override analysis.min_count [config default: 5].
        #[arg(long)]
        min_count: Option<usize>,
        /// Override analysis.max_k [config default: 2].
        #[arg(long)]
        max_k: Option<usize>,
        /// Override analysis.min_coverage [config default: 0.2].
        #[arg(long)]
        min_coverage: Option<f64>,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_owned(),
        source: e,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn gendata(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let spec = cfg.data.generate.clone().unwrap_or_else(GenerateSpec::default);
    let samples = generate(&spec, seed.unwrap_or(cfg.seed))?;
    save_dataset(out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn train_cmd(
    config: &Path,
    data: &Path,
    out: &Path,
    ablate: bool,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let samples = load_dataset(data)?;
    let (train_set, val_set) = split_by_subject(&samples, cfg.train.val_fraction);
    let model_cfg = cfg.model_config(ablate);
    let mut model = SunetModel::new(model_cfg.clone(), cfg.seed)?;
    create_dir(out)?;
    write_file(&out.join(MODEL_CONFIG_FILE), serde_json::to_string_pretty(&model_cfg).expect("serializes"))?;
    let epochs_path = out.join(EPOCHS_FILE);
    let mut csv = format!("{EPOCHS_CSV_HEADER}\n");
    write_file(&epochs_path, &csv)?;
    let every = cfg.train.checkpoint_every;
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train, |r, m| {
        writeln!(csv, "{}", r.csv_row()).expect("string write");
        write_file(&epochs_path, &csv)?;
        eprintln!(
            "epoch {} loss {:.5} val_dsc {:.4} tau {:.3}",
            r.epoch, r.train_loss, r.val_dsc, r.tau
        );
        if every > 0 && r.epoch % every == 0 {
            checkpoint::save(&m.params, &out.join(format!("epoch{:04}.ckpt", r.epoch)))?;
        }
        Ok(())
    })?;
    model.save_dir(out)?;
    let best = outcome
        .reports
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .map_or(0.0, |r| r.val_dsc);
    println!(
        "trained {} epochs on {} samples; best val DSC {:.4} at epoch {}",
        outcome.reports.len(),
        train_set.len(),
        best,
        outcome.best_epoch
    );
    Ok(())
}

fn infer_cmd(model_dir: &Path, data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let model = SunetModel::load_dir(model_dir)?;
    if let Some(c) = config {
        let run = RunConfig::load(c)?;
        if run.backbone != model.config.backbone {
            return Err(Error::Config("config backbone does not match the model".into()));
        }
        if let Some(ch) = &model.config.channel {
            if run.channel.sentence_length != ch.sentence_length {
                return Err(Error::Config(format!(
                    "config sentence_length {} does not match the model's {}",
                    run.channel.sentence_length, ch.sentence_length
                )));
            }
            if run.channel != *ch {
                return Err(Error::Config("config channel does not match the model".into()));
            }
        }
    }
    let loaded = load_dataset_masks_optional(data)?;
    let samples: Vec<_> = loaded.iter().map(|(s, _)| s.clone()).collect();
    let preds = predict(&model, &samples)?;
    create_dir(out)?;
    let mut records = Vec::new();
    let mut dsc_csv = String::from("sample_id,slice,dsc\n");
    for ((s, has_mask), p) in loaded.iter().zip(&preds) {
        let key = s.key();
        let img = Gray {
            width: s.width,
            height: s.height,
            pixels: p.mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect(),
        };
        write_pgm(&out.join(format!("{key}.pred.pgm")), &img)?;
        if let Some(sentence) = &p.sentence {
            records.push(SentenceRecord {
                sample_id: s.sample_id.clone(),
                slice_index: s.slice_index,
                ids: sentence.ids.clone(),
                mode: Mode::Infer.as_str().to_owned(),
            });
        }
        if *has_mask {
            writeln!(dsc_csv, "{},{},{}", s.sample_id, s.slice_index, dsc(&p.mask, &s.mask)?).expect("string write");
        }
    }
    if model.has_channel() {
        write_jsonl(&out.join("sentences.jsonl"), &records)?;
    }
    write_file(&out.join("dsc.csv"), dsc_csv)?;
    println!("predicted {} images into {}", preds.len(), out.display());
    Ok(())
}

struct AnalyzeArgs<'a> {
    sentences: &'a Path,
    stats: &'a Path,
    out: &'a Path,
    config: Option<&'a Path>,
    min_count: Option<usize>,
    max_k: Option<usize>,
    min_coverage: Option<f64>,
}

fn analyze_cmd(a: AnalyzeArgs<'_>) -> Result<()> {
    let mut acfg = match a.config {
        Some(c) => RunConfig::load(c)?.analysis,
        None => Default::default(),
    };
    if let Some(v) = a.min_count {
        acfg.min_count = v;
    }
    if let Some(v) = a.max_k {
        acfg.max_k = v;
    }
    if let Some(v) = a.min_coverage {
        acfg.min_coverage = v;
    }
    let reports = analyze_files(a.sentences, a.stats, a.out, &acfg)?;
    for r in &reports {
        match r.best() {
            Some(b) => println!("{}: best position {} ({:.4})", r.outcome, b.position, b.statistic),
            None => println!("{}: skipped", r.outcome),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gendata { config, out, seed } => gendata(&config, &out, seed),
        Command::Train {
            config,
            data,
            out,
            ablate_channel,
            seed,
            epochs,
        } => train_cmd(&config, &data, &out, ablate_channel, seed, epochs),
        Command::Infer {
            model,
            data,
            out,
            config,
        } => infer_cmd(&model, &data, &out, config.as_deref()),
        Command::Analyze {
            sentences,
            stats,
            out,
            config,
            min_count,
            max_k,
            min_coverage,
        } => analyze_cmd(AnalyzeArgs {
            sentences: &sentences,
            stats: &stats,
            out: &out,
            config: config.as_deref(),
            min_count,
            max_k,
            min_coverage,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("ERROR code={} msg={}", e.exit_code(), msg);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
