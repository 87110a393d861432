//! Command-line surface: generate the synthetic benchmark, train one
//! variant, evaluate a checkpoint on a target domain, run the full
//! leave-one-domain-out ablation, and export extractor features.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure during training.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mixdann::config::{AppConfig, ConfigError};
use mixdann::experiment::{probe_json, run_ablation};
use mixdann::io::{
    checkpoint_prefix, load_checkpoint, load_dataset, save_checkpoint, save_dataset, DataError,
};
use mixdann::manifest::RunManifest;
use mixdann::metrics::{evaluate_all, BinaryMask};
use mixdann::probe::{export_features, features_to_csv};
use mixdann::rng::derive_seed;
use mixdann::synth::{build_benchmark, DomainDataset, Subject};
use mixdann::tensor::Tensor;
use mixdann::trainer::{predict, train, TrainConfig, TrainError, Variant};

#[derive(Parser)]
#[command(name = "mixdann", version, about = "Domain-generalization segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain benchmark dataset
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one variant on all domains except the target
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a target domain
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        out: PathBuf,
        /// Baseline aggregate report JSON; fills the gain fields
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Run the full leave-one-domain-out ablation over all four variants
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export pooled extractor features for every subject as CSV
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numeric { .. } => CliError::Numeric(e.to_string()),
            TrainError::NeedTwoSources { .. } | TrainError::Mixup(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<AppConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            AppConfig::parse(&text)?
        }
        None => AppConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn find_target<'a>(domains: &'a [DomainDataset], name: &str) -> Result<&'a DomainDataset, CliError> {
    domains.iter().find(|d| d.spec.name == name).ok_or_else(|| {
        let known: Vec<&str> = domains.iter().map(|d| d.spec.name.as_str()).collect();
        CliError::Data(format!("unknown target domain {name:?}; dataset has {known:?}"))
    })
}

fn cmd_generate(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(&config, seed)?;
    let data = build_benchmark(
        cfg.seed,
        cfg.data_k_domains,
        cfg.data_n_per_domain,
        cfg.data_height,
        cfg.data_width,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let files = save_dataset(&out, &data, cfg.data_pgm)?;
    let mut manifest = RunManifest::new("generate", cfg.snapshot(), vec![cfg.seed]);
    if let Some(p) = &config {
        manifest.add_input(Path::new(""), p)?;
    }
    for f in &files {
        manifest.add_output(&out, f)?;
    }
    manifest.write(&out.join("manifest.json"))?;
    println!(
        "wrote {} domains x {} subjects to {}",
        cfg.data_k_domains,
        cfg.data_n_per_domain,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    data: PathBuf,
    target: String,
    out: PathBuf,
    variant: Option<String>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = load_config(&config, seed)?;
    if let Some(v) = &variant {
        cfg.variant = Variant::parse(v)
            .ok_or_else(|| CliError::Config(format!("unknown variant {v:?}")))?;
    }
    let domains = load_dataset(&data)?;
    let target_ds = find_target(&domains, &target)?;
    let sources: Vec<&DomainDataset> =
        domains.iter().filter(|d| d.domain_id != target_ds.domain_id).collect();

    // same per-target seed derivation the experiment uses
    let run_seed = derive_seed(cfg.seed, &format!("target/{}", target_ds.spec.name));
    let train_cfg = TrainConfig { seed: run_seed, ..cfg.train_config() };
    let (bundle, log) = train(&train_cfg, &sources)?;

    fs::create_dir_all(&out)?;
    let (bin, json) = save_checkpoint(&out.join("checkpoint"), &bundle)?;
    let log_path = out.join("trainlog.csv");
    fs::write(&log_path, log.to_csv())?;

    let mut manifest = RunManifest::new("train", cfg.snapshot(), vec![cfg.seed, run_seed]);
    if let Some(p) = &config {
        manifest.add_input(Path::new(""), p)?;
    }
    manifest.add_input(&data, &data.join("index.csv"))?;
    for f in [&bin, &json, &log_path] {
        manifest.add_output(&out, f)?;
    }
    manifest.write(&out.join("manifest.json"))?;
    let final_val = log.epochs.last().map(|e| e.val_dsc).unwrap_or(f64::NAN);
    println!(
        "trained {} vs target {} for {} epochs; final source-val DSC {:.4}; checkpoint at {}",
        cfg.variant,
        target,
        train_cfg.epochs,
        final_val,
        bin.display()
    );
    Ok(())
}

fn cmd_evaluate(
    checkpoint: PathBuf,
    data: PathBuf,
    target: String,
    out: PathBuf,
    baseline: Option<PathBuf>,
) -> Result<(), CliError> {
    let bundle = load_checkpoint(&checkpoint_prefix(&checkpoint))?;
    let domains = load_dataset(&data)?;
    let target_ds = find_target(&domains, &target)?;

    let images: Vec<&Tensor> = target_ds.subjects.iter().map(|s| &s.image).collect();
    let mut preds = Vec::with_capacity(images.len());
    for group in images.chunks(16) {
        preds.extend(predict(&bundle, group).map_err(|e| CliError::Data(e.to_string()))?);
    }
    let gts: Vec<BinaryMask> = target_ds
        .subjects
        .iter()
        .map(|s| BinaryMask::from_mask_tensor(&s.mask))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Data(e.to_string()))?;
    let case_ids: Vec<usize> = target_ds.subjects.iter().map(|s| s.case_id).collect();
    let mut report =
        evaluate_all(&case_ids, &gts, &preds).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(bp) = baseline {
        let base: serde_json::Value = serde_json::from_str(&fs::read_to_string(&bp)?)
            .map_err(|e| CliError::Data(format!("bad baseline report: {e}")))?;
        report = report.with_gain_against_json(&base);
    }

    fs::create_dir_all(&out)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report.to_json()).expect("report json"),
    )?;
    println!("{}", serde_json::to_string_pretty(&report.to_json()).expect("report json"));
    Ok(())
}

fn cmd_experiment(
    config: Option<PathBuf>,
    data: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = load_config(&config, seed)?;
    let domains = load_dataset(&data)?;
    let outcome = run_ablation(&cfg, &domains)?;

    fs::create_dir_all(&out)?;
    let mut outputs = Vec::new();
    let results_txt = out.join("results.txt");
    fs::write(&results_txt, outcome.table.to_text())?;
    outputs.push(results_txt);
    let results_csv = out.join("results.csv");
    fs::write(&results_csv, outcome.table.to_csv())?;
    outputs.push(results_csv);
    let probe_path = out.join("probe.json");
    fs::write(
        &probe_path,
        serde_json::to_string_pretty(&probe_json(&outcome.probe)).expect("probe json"),
    )?;
    outputs.push(probe_path);

    for run in &outcome.runs {
        let stem = format!("{}_{}_r{}", run.variant.as_str(), run.target_name, run.rep);
        let (bin, json) = save_checkpoint(&out.join(format!("ckpt_{stem}")), &run.bundle)?;
        outputs.push(bin);
        outputs.push(json);
        let report_path = out.join(format!("report_{stem}.json"));
        fs::write(
            &report_path,
            serde_json::to_string_pretty(&run.report.to_json()).expect("report json"),
        )?;
        outputs.push(report_path);
        let log_path = out.join(format!("trainlog_{stem}.csv"));
        fs::write(&log_path, run.log.to_csv())?;
        outputs.push(log_path);
    }

    let seeds: Vec<u64> = std::iter::once(cfg.seed)
        .chain(outcome.runs.iter().map(|r| r.seed))
        .collect();
    let mut manifest = RunManifest::new("experiment", cfg.snapshot(), seeds);
    if let Some(p) = &config {
        manifest.add_input(Path::new(""), p)?;
    }
    manifest.add_input(&data, &data.join("index.csv"))?;
    for f in &outputs {
        manifest.add_output(&out, f)?;
    }
    manifest.write(&out.join("manifest.json"))?;

    print!("{}", outcome.table.to_text());
    println!("\nDomain-probe accuracy on extractor features (lower = more invariant):");
    for p in &outcome.probe {
        println!("  {:<10} {:.4}", p.variant, p.accuracy);
    }
    Ok(())
}

fn cmd_export_features(checkpoint: PathBuf, data: PathBuf, out: PathBuf) -> Result<(), CliError> {
    let bundle = load_checkpoint(&checkpoint_prefix(&checkpoint))?;
    let domains = load_dataset(&data)?;
    let mut subjects: Vec<&Subject> = domains.iter().flat_map(|d| d.subjects.iter()).collect();
    subjects.sort_by_key(|s| s.case_id);
    let records =
        export_features(&bundle, &subjects, 16).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&out, features_to_csv(&records))?;
    println!("wrote {} feature records to {}", records.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(config, out, seed),
        Command::Train { config, data, target, out, variant, seed } => {
            cmd_train(config, data, target, out, variant, seed)
        }
        Command::Evaluate { checkpoint, data, target, out, baseline } => {
            cmd_evaluate(checkpoint, data, target, out, baseline)
        }
        Command::Experiment { config, data, out, seed } => cmd_experiment(config, data, out, seed),
        Command::ExportFeatures { checkpoint, data, out } => {
            cmd_export_features(checkpoint, data, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
