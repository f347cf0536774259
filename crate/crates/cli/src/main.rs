use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use deepid::data::{gen_dataset, load_dataset, write_dataset, Dataset, Split, SyntheticDatasetSpec};
use deepid::pipeline::{
    build_protocols, dense_labels, ensemble_spec, evaluate, extract_features, fit_recognition, load_ensemble,
    load_features, run_pipeline, save_ensemble, save_features, stage, train_ensemble, write_reports, Recognition,
};
use deepid::training::write_training_log;
use deepid::weights::{load_weights, save_weights};
use deepid::{Error, PipelineConfig};

#[derive(Parser)]
#[command(name = "deepid", version, about = "Train and evaluate toy-scale DeepID3 face-recognition ensembles")]
struct Cli {
    /// Configuration file (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving every artifact.
    #[arg(long, global = true, default_value = "deepid-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into `<out-dir>/data`.
    GenData,
    /// Train the region ensemble into `<out-dir>/models`.
    Train,
    /// Extract ensemble features into `<out-dir>/features`.
    Extract,
    /// Fit PCA and Joint Bayesian on the training features.
    FitRecognition,
    /// Run the verification and identification protocols.
    Eval,
    /// Every stage in sequence, plus the depth comparison.
    Pipeline,
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PipelineConfig::parse(&text).map_err(|e| e.in_stage("config"))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    Ok(cfg)
}

fn data_dir(cfg: &PipelineConfig, out: &Path) -> PathBuf {
    cfg.data_dir.clone().unwrap_or_else(|| out.join("data"))
}

fn dataset(cfg: &PipelineConfig, out: &Path) -> deepid::Result<Dataset> {
    load_dataset(data_dir(cfg, out))
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out_dir.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let models = out.join("models");
    let features = out.join("features");
    match cli.command {
        Command::GenData => stage("gen-data", || {
            let ds = gen_dataset(&SyntheticDatasetSpec { seed: cfg.seed, ..cfg.data.clone() })?;
            write_dataset(out.join("data"), &ds)?;
            println!("wrote {} train and {} test images", ds.train.images.len(), ds.test.images.len());
            Ok(())
        })?,
        Command::Train => stage("train", || {
            let ds = dataset(&cfg, out)?;
            let nets = train_ensemble(&cfg, &ds)?;
            save_ensemble(&models, &nets)?;
            let logs = out.join("logs");
            fs::create_dir_all(&logs).map_err(|e| Error::io(&logs, e))?;
            for t in &nets {
                let mut buf = Vec::new();
                write_training_log(&t.history, &mut buf).expect("writing to memory");
                let path = logs.join(format!("{}.tsv", t.file_stem()));
                fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
                println!("{}: final loss {:.4}", t.file_stem(), t.history.last().copied().unwrap_or(f64::NAN));
            }
            Ok(())
        })?,
        Command::Extract => stage("extract", || {
            let ds = dataset(&cfg, out)?;
            let spec = ensemble_spec(&load_ensemble(&models, &cfg, &ds)?)?;
            fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
            save_features(&features.join("train.dtw"), &extract_features(&spec, &ds.train.images)?, &ds.train.labels)?;
            save_features(&features.join("test.dtw"), &extract_features(&spec, &ds.test.images)?, &ds.test.labels)?;
            println!("feature dimension {}", spec.feature_dim());
            Ok(())
        })?,
        Command::FitRecognition => stage("fit-recognition", || {
            let (feats, labels) = load_features(&features.join("train.dtw"))?;
            let split = Split { images: Vec::new(), labels };
            let rec = fit_recognition(&feats, &dense_labels(&split), cfg.pca_dim, cfg.em_iters)?;
            save_weights(models.join("recognition.dtw"), &rec.to_tensors())?;
            println!("PCA {} -> {}", rec.pca.input_dim(), rec.pca.output_dim());
            Ok(())
        })?,
        Command::Eval => stage("eval", || {
            let rec = Recognition::from_tensors(&load_weights(models.join("recognition.dtw"))?)?;
            let (feats, labels) = load_features(&features.join("test.dtw"))?;
            let protocols = build_protocols(&cfg, &Split { images: Vec::new(), labels })?;
            let report = evaluate(&cfg, &protocols, &rec, &feats)?;
            write_reports(&out.join("reports"), &report)?;
            print_report(&report);
            Ok(())
        })?,
        Command::Pipeline => {
            let summary = run_pipeline(&cfg, out)?;
            print_report(&summary.report);
            if let Some(cmp) = &summary.comparison {
                for (region, a, b) in &cmp.rows {
                    println!("region {region}: deepid3 {a:.4} deepid2+ {b:.4}");
                }
                println!("mean error-rate reduction {:+.4}", cmp.mean_error_reduction);
            }
        }
    }
    Ok(())
}

fn print_report(r: &deepid::evaluation::EvaluationReport) {
    println!("verification accuracy {:.4} ± {:.4} (population std over folds)", r.mean_accuracy, r.accuracy_std);
    println!("rank-1 closed-set {:.4}", r.rank1);
    println!("DIR at {:.0}% FAR {:.4}", r.far * 100.0, r.dir);
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
