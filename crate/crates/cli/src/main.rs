mod plot;
mod run_config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use polyp_core::backbone::{mock_oracle_backbone, OracleTask, Task, TrainedModel};
use polyp_core::cascade::{classify_patch, CascadeModels, CascadeResult};
use polyp_core::dataset::{
    build_manifest, class_distribution, extract_patches, synth_generate, GroupBy, PolypLabel, Split, SynthConfig,
};
use polyp_core::metrics::ConfusionMatrix;
use polyp_core::pipeline::{
    coarse_records, evaluate_predictions, infer_records, read_predictions, run_sweep, train_task, write_predictions,
    Corpus, Evaluation, SweepConfig, SweepEvent, TaskTraining,
};
use polyp_core::scalespace::{read_png, write_png, SCANNER_MPP};
use polyp_core::Error;
use run_config::{defaults_help, resolve, RunConfig};

/// Multi-resolution cascaded classification of colorectal-polyp patches.
#[derive(Parser)]
#[command(
    name = "polyp",
    version,
    after_help = "Exit codes: 0 success, 2 environment or input error, 3 data error."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Tile labelled source images (<label>/<slide_id>/.../*.png) into patches at one scale and index them.
    Extract {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scale_um: f64,
        #[arg(long, default_value_t = SCANNER_MPP)]
        mpp: f64,
        /// Manifest path; defaults to <out>/manifest.csv.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Generate the synthetic corpus and its manifest.
    #[command(after_help = defaults_help::<SynthConfig>("Synthetic corpus keys"))]
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one classifier on the train split.
    #[command(after_help = defaults_help::<RunConfig>("Run keys"))]
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// hp, adenoma, grade or six_class.
        #[arg(long)]
        task: Task,
        /// Training scale; defaults to sigma_coarse_um for adenoma, sigma_fine_um otherwise.
        #[arg(long)]
        scale_um: Option<f64>,
        /// Keep native resolution instead of resampling to 224x224.
        #[arg(long)]
        full_res: bool,
        #[arg(long)]
        out_model: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and test a six-class 224x224 baseline per scale.
    #[command(after_help = defaults_help::<RunConfig>("Run keys"))]
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "100,800,1500,4000,7000,8000")]
        scales: Vec<f64>,
        /// JSON report; a text table is written next to it with a .txt extension.
        #[arg(long)]
        out_report: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the cascade over coarse patches.
    #[command(after_help = defaults_help::<RunConfig>("Run keys"))]
    Infer {
        /// Directory holding hp/, adenoma/ and grade/ models.
        #[arg(long)]
        models_dir: PathBuf,
        /// A manifest CSV (its coarse-scale records) or a single coarse PNG.
        #[arg(long)]
        input: PathBuf,
        /// Restrict manifest input to one split.
        #[arg(long)]
        split: Option<Split>,
        /// Predictions, as JSON Lines.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score predictions against manifest labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON report; a text version is written next to it with a .txt extension.
        #[arg(long)]
        report: PathBuf,
        /// Six-class confusion heat map (PNG).
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long, default_value_t = SCANNER_MPP)]
        mpp: f64,
    },
    /// Write cue-oracle hp/, adenoma/ and grade/ models tuned to a synthetic corpus.
    #[command(after_help = defaults_help::<SynthConfig>("Synthetic corpus keys"))]
    MockModels {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a confusion matrix from an evaluate report as a heat map.
    Plot {
        #[arg(long)]
        report: PathBuf,
        /// `six_class` or `by_type`.
        #[arg(long, default_value = "six_class")]
        matrix: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Data and semantic errors exit 3; everything else exits 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    let data = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<Error>(),
            Some(
                Error::EmptyClass(_)
                    | Error::ZeroSupport(_)
                    | Error::DuplicatePatchId(_)
                    | Error::SplitLeak(_)
                    | Error::MissingScale(_)
                    | Error::UnmatchedPatchId(_)
                    | Error::UnknownLabel(_)
            )
        )
    });
    if data {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Extract {
            input_dir,
            out,
            scale_um,
            mpp,
            manifest,
        } => cmd_extract(&input_dir, &out, scale_um, mpp, manifest.as_deref()),
        Command::Synth { out, cfg } => cmd_synth(&out, &cfg),
        Command::Train {
            manifest,
            task,
            scale_um,
            full_res,
            out_model,
            cfg,
        } => cmd_train(&manifest, task, scale_um, full_res, &out_model, &cfg),
        Command::Sweep {
            manifest,
            scales,
            out_report,
            cfg,
        } => cmd_sweep(&manifest, scales, &out_report, &cfg),
        Command::Infer {
            models_dir,
            input,
            split,
            out,
            cfg,
        } => cmd_infer(&models_dir, &input, split, &out, &cfg),
        Command::Evaluate {
            predictions,
            manifest,
            report,
            plot,
            mpp,
        } => cmd_evaluate(&predictions, &manifest, &report, plot.as_deref(), mpp),
        Command::MockModels { out_dir, cfg } => cmd_mock_models(&out_dir, &cfg),
        Command::Plot { report, matrix, out } => cmd_plot(&report, &matrix, &out),
    }
}

fn print_counts(manifest: &polyp_core::dataset::Manifest) {
    let counts = class_distribution(manifest, GroupBy::Patch, None);
    for l in PolypLabel::ALL {
        println!("  {:<7} {}", l.as_str(), counts.get(l));
    }
    println!("  {:<7} {}", "total", counts.total());
}

fn cmd_extract(input: &Path, out: &Path, scale_um: f64, mpp: f64, manifest: Option<&Path>) -> Result<()> {
    if !input.is_dir() {
        return Err(Error::InvalidArgument(format!("input directory {} does not exist", input.display())).into());
    }
    let summary = extract_patches(input, out, scale_um, mpp)?;
    for w in &summary.warnings {
        eprintln!("warning: {}: {}", w.path.display(), w.reason);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let built = build_manifest(out, mpp)?;
    for s in &built.skipped {
        eprintln!("warning: skipped {}: {}", s.path.display(), s.reason);
    }
    let path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("manifest.csv"));
    built.manifest.write_csv(&path)?;
    println!(
        "{} patches from {} sources at {scale_um} um; manifest {} indexes {} patches:",
        summary.n_patches,
        summary.n_sources,
        path.display(),
        built.manifest.records.len()
    );
    print_counts(&built.manifest);
    Ok(())
}

fn cmd_synth(out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg: SynthConfig = resolve(args.config.as_deref(), &args.overrides)?;
    let manifest = synth_generate(&cfg, out)?;
    // Run keys needed to read this corpus back.
    let run = format!(
        "mpp = {}\nsigma_fine_um = {}\nsigma_coarse_um = {}\n",
        cfg.mpp, cfg.sigma_fine_um, cfg.canvas_um
    );
    std::fs::write(out.join("run.cfg"), run).map_err(|e| Error::Io {
        path: out.join("run.cfg"),
        source: e,
    })?;
    println!(
        "{} parents from {} slides written to {}; pass --config {} to other commands",
        manifest.records.len(),
        manifest.slide_labels().len(),
        out.display(),
        out.join("run.cfg").display()
    );
    print_counts(&manifest);
    Ok(())
}

fn open_corpus(manifest: &Path, mpp: f64) -> Result<Corpus> {
    Corpus::open(manifest, mpp).with_context(|| format!("reading manifest {}", manifest.display()))
}

fn cmd_train(
    manifest: &Path,
    task: Task,
    scale_um: Option<f64>,
    full_res: bool,
    out: &Path,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg: RunConfig = resolve(args.config.as_deref(), &args.overrides)?;
    let corpus = open_corpus(manifest, cfg.cascade.mpp)?;
    let sigma_um = scale_um.unwrap_or(match task {
        Task::Adenoma => cfg.cascade.sigma_coarse_um,
        _ => cfg.cascade.sigma_fine_um,
    });
    let t = TaskTraining {
        task,
        sigma_um,
        full_res,
        crops: cfg.crops(),
        arch: cfg.architecture(),
        train: cfg.train.clone(),
    };
    let model = train_task(&corpus, &t, |l| {
        eprintln!(
            "epoch {:>3}  lr {:.0e}  loss {:.4}  train acc {:.3}",
            l.epoch, l.lr, l.mean_loss, l.train_accuracy
        )
    })?;
    model.save(out)?;
    let acc = model.log().last().map_or(0.0, |l| l.train_accuracy);
    println!(
        "{} model at {sigma_um} um saved to {} (final train accuracy {acc:.3})",
        task,
        out.display()
    );
    Ok(())
}

fn write_text(json_path: &Path, text: &str) -> Result<()> {
    let path = json_path.with_extension("txt");
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(Error::Json)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn cmd_sweep(manifest: &Path, scales: Vec<f64>, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg: RunConfig = resolve(args.config.as_deref(), &args.overrides)?;
    let corpus = open_corpus(manifest, cfg.cascade.mpp)?;
    let sweep = SweepConfig {
        scales,
        arch: cfg.architecture(),
        crops: cfg.crops(),
        train: cfg.train.clone(),
    };
    let report = run_sweep(&corpus, &sweep, |e| match e {
        SweepEvent::Training { scale_um } => eprintln!("training six-class baseline at {scale_um} um"),
        SweepEvent::Epoch { log, .. } => {
            eprintln!(
                "  epoch {:>3}  loss {:.4}  train acc {:.3}",
                log.epoch, log.mean_loss, log.train_accuracy
            )
        }
        SweepEvent::Evaluated { row } => eprintln!("  test BA {:.4} on {} patches", row.six_class_ba, row.n_test),
    })?;
    write_json(out, &report)?;
    let text = report.render();
    write_text(out, &text)?;
    print!("{text}");
    Ok(())
}

fn load_model(dir: &Path) -> Result<TrainedModel> {
    TrainedModel::load(dir).with_context(|| format!("loading model {}", dir.display()))
}

fn cmd_infer(models_dir: &Path, input: &Path, split: Option<Split>, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg: RunConfig = resolve(args.config.as_deref(), &args.overrides)?;
    let hp = load_model(&models_dir.join("hp"))?;
    let adenoma = load_model(&models_dir.join("adenoma"))?;
    let grade = load_model(&models_dir.join("grade"))?;
    let models = CascadeModels {
        hp: &hp,
        adenoma: &adenoma,
        grade: &grade,
    };
    models.validate()?;

    let results: Vec<CascadeResult> = if input.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let img = read_png(input)?;
        let mut r = classify_patch(&img, models, &cfg.cascade)?;
        r.patch_id = input.file_stem().map(|s| s.to_string_lossy().into_owned());
        vec![r]
    } else {
        let corpus = open_corpus(input, cfg.cascade.mpp)?;
        let records = coarse_records(&corpus, &cfg.cascade, split)?;
        infer_records(&corpus, &records, models, &cfg.cascade)?
    };
    write_predictions(&results, out)?;
    println!("{} predictions written to {}", results.len(), out.display());
    Ok(())
}

fn cmd_evaluate(predictions: &Path, manifest: &Path, report: &Path, plot: Option<&Path>, mpp: f64) -> Result<()> {
    let results = read_predictions(predictions)?;
    let corpus = open_corpus(manifest, mpp)?;
    let eval = evaluate_predictions(&results, &corpus.manifest)?;
    write_json(report, &eval)?;
    let text = eval.render();
    write_text(report, &text)?;
    if let Some(p) = plot {
        write_png(&plot::heat_map(&eval.six_class), p)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_mock_models(out_dir: &Path, args: &ConfigArgs) -> Result<()> {
    let synth: SynthConfig = resolve(args.config.as_deref(), &args.overrides)?;
    for task in [OracleTask::Hp, OracleTask::Adenoma, OracleTask::Grade] {
        let dir = out_dir.join(task.task().tag());
        mock_oracle_backbone(task, &synth)?.save(&dir)?;
        println!("{} oracle written to {}", task.task(), dir.display());
    }
    Ok(())
}

fn cmd_plot(report: &Path, matrix: &str, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(report).map_err(|e| Error::Io {
        path: report.to_path_buf(),
        source: e,
    })?;
    let eval: Evaluation = serde_json::from_str(&text).map_err(Error::Json)?;
    let cm: &ConfusionMatrix = match matrix {
        "six_class" => &eval.six_class,
        "by_type" => &eval.by_type,
        other => {
            return Err(Error::InvalidArgument(format!("--matrix must be six_class or by_type, got `{other}`")).into())
        }
    };
    write_png(&plot::heat_map(cm), out)?;
    println!("heat map written to {}", out.display());
    Ok(())
}
