use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use ordrep_core::binarize::CodesFile;
use ordrep_core::compression::{curves_csv, rd_curve};
use ordrep_core::config::ExperimentConfig;
use ordrep_core::data::{gen_gaussian, gen_pinwheel, ingest_image_dataset, IngestFormat, PinwheelParams};
use ordrep_core::experiment::{load_dataset, run_experiment, split_dataset, train_model};
use ordrep_core::pca::{check_commutativity, extract_t, lemma1_structure_check, pca};
use ordrep_core::retrieval::bench;
use ordrep_core::trainer::{metrics_csv, mixture_cost};
use ordrep_core::{BinarizerModel, BitCode, Dataset, Network, Ordering, PrefixTrieIndex, TruncationDistribution};

/// Ordered representations with nested dropout: training, retrieval and
/// progressive compression experiments.
#[derive(Parser)]
#[command(name = "ordrep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest a dataset into the packed row format.
    GenData {
        #[command(subcommand)]
        source: GenSource,
    },
    /// Train a nested dropout autoencoder from a config file.
    Train(TrainArgs),
    /// Report the PCA spectrum of a dataset and, given a linear model, check
    /// the structure of its extracted mixing matrix.
    VerifyPca(VerifyPcaArgs),
    /// Encode a dataset and threshold each code unit at its β-quantile.
    Binarize(BinarizeArgs),
    /// Build or query a prefix-tree index over binary codes.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Time index queries against the linear Hamming scan.
    Bench(BenchArgs),
    /// Rate-distortion curves of truncated codes.
    Compress(CompressArgs),
    /// Run a whole experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum GenSource {
    Pinwheel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        arms: usize,
        #[arg(long, default_value_t = 200)]
        points_per_arm: usize,
        #[arg(long, default_value_t = 0.3)]
        radial_std: f64,
        #[arg(long, default_value_t = 0.05)]
        tangential_std: f64,
        #[arg(long, default_value_t = 0.25)]
        rate: f64,
    },
    Gaussian {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        count: usize,
        /// Comma-separated variances along the planted directions.
        #[arg(long, value_delimiter = ',', required = true)]
        spectrum: Vec<f64>,
    },
    /// Read a packed file or a directory of PNG images; the result is
    /// normalized per dimension.
    Ingest {
        #[arg(long)]
        path: PathBuf,
        /// `packed-f64-rows` or `png-dir`.
        #[arg(long, default_value = "png-dir")]
        format: IngestFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Packed dataset to train on instead of the config's data section.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyPcaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args)]
struct BinarizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the fitted thresholds as JSON.
    #[arg(long)]
    binarizer: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IndexAction {
    Build {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ordrep_core::retrieval::DEFAULT_COLLAPSE)]
        collapse: usize,
    },
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        r: usize,
        /// Query code as hex; bit i is the (i mod 8)-th most significant bit of byte i/8.
        #[arg(long, conflicts_with = "row")]
        code: Option<String>,
        /// Use row `row` of `--codes` as the query.
        #[arg(long, requires = "codes")]
        row: Option<usize>,
        #[arg(long)]
        codes: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    index: PathBuf,
    /// Codes file whose rows serve as queries.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 32])]
    r: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    max_queries: usize,
    #[arg(long, default_value_t = 20)]
    scan_queries: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompressArgs {
    /// `ORDERING=MODEL` pairs, e.g. `nested=model.json plain=plain.json`.
    #[arg(long = "curve", value_parser = parse_curve, required = true)]
    curves: Vec<(Ordering, PathBuf)>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    b_list: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_curve(s: &str) -> std::result::Result<(Ordering, PathBuf), String> {
    let (o, p) = s.split_once('=').ok_or_else(|| format!("expected ORDERING=PATH, got `{s}`"))?;
    Ok((o.parse().map_err(|e| format!("{e}"))?, PathBuf::from(p)))
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<Network> {
    Network::load(path).with_context(|| format!("reading model {}", path.display()))
}

/// Write to stdout; a reader that closed the pipe early is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    emit(&(serde_json::to_string_pretty(v)? + "\n"))
}

fn gen_data(source: GenSource) -> Result<()> {
    let (ds, skipped, out) = match source {
        GenSource::Pinwheel {
            out,
            seed,
            arms,
            points_per_arm,
            radial_std,
            tangential_std,
            rate,
        } => {
            let p = PinwheelParams {
                num_arms: arms,
                points_per_arm,
                radial_std,
                tangential_std,
                rate,
            };
            (gen_pinwheel(&p, seed)?, 0, out)
        }
        GenSource::Gaussian {
            out,
            seed,
            dim,
            count,
            spectrum,
        } => (gen_gaussian(dim, count, &spectrum, seed)?, 0, out),
        GenSource::Ingest { path, format, out } => {
            let ing = ingest_image_dataset(&path, format).with_context(|| format!("ingesting {}", path.display()))?;
            if ing.skipped > 0 {
                warn!("skipped {} unreadable or mismatched files", ing.skipped);
            }
            (ing.dataset, ing.skipped, out)
        }
    };
    ds.save(&out).with_context(|| format!("writing {}", out.display()))?;
    print_json(&json!({
        "provenance": ds.provenance(),
        "fingerprint": ds.fingerprint(),
        "n": ds.len(),
        "dim": ds.dim(),
        "skipped_files": skipped,
    }))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config).with_context(|| format!("config {}", a.config.display()))?;
    let hash = cfg.hash()?;
    let ds = match &a.data {
        Some(p) => {
            let mut ds = load_data(p)?;
            if cfg.data.normalize {
                ds.normalize()?;
            }
            ds
        }
        None => load_dataset(&cfg).context("stage `data`")?.0,
    };
    let (train, holdout) = split_dataset(&ds, cfg.data.holdout_fraction, cfg.seed);
    let dist = cfg.train.dist.build(cfg.network.k())?;
    info!("training on {} examples, K = {}", train.ncols(), dist.k());
    let model = train_model(&cfg, &train, dist.clone()).context("stage `train`")?;
    model.net.save(&a.out, Some(&hash))?;
    if let Some(m) = &a.metrics {
        fs::write(m, metrics_csv(&model.metrics))?;
    }
    let holdout_cost = if holdout.ncols() > 0 {
        Some(mixture_cost(&model.net, &holdout, &dist)?)
    } else {
        None
    };
    print_json(&json!({
        "config_hash": hash,
        "seed": cfg.seed,
        "steps": model.steps,
        "frozen_prefix": model.frozen_prefix,
        "train_mixture_cost": mixture_cost(&model.net, &train, &dist)?,
        "holdout_mixture_cost": holdout_cost,
    }))
}

/// Returns whether every requested structural check passed.
fn verify_pca(a: VerifyPcaArgs) -> Result<bool> {
    let ds = load_data(&a.data)?;
    let p = pca(ds.matrix(), a.k)?;
    let n = ds.len() as f64;
    let mut report = json!({
        "n": ds.len(),
        "dim": ds.dim(),
        "variances": p.eigenvalues.iter().take(a.k).map(|e| e / n).collect::<Vec<_>>(),
        "tail_energy_per_example": p.tail_energy(a.k) / n,
    });
    let mut passed = true;
    if let Some(mp) = &a.model {
        let net = load_model(mp)?;
        let ex = extract_t(&net, &p, ds.matrix())?;
        let comm = check_commutativity(&ex.t, a.tol)?;
        let lemma = lemma1_structure_check(&ex.t, a.tol)?;
        passed = comm.passed && lemma.passed && ex.reliable;
        report["extraction"] = serde_json::to_value(&ex)?;
        report["commutativity"] = json!({
            "passed": comm.passed,
            "max_defect": comm.max_defect(),
            "defects": comm.defects,
        });
        report["structure_passed"] = json!(lemma.passed);
        report["structure_violations"] = json!(lemma.violations.len());
        report["full_code_cost"] = json!(mixture_cost(
            &net,
            ds.matrix(),
            &TruncationDistribution::point_mass(a.k, a.k)?
        )?);
    }
    report["passed"] = json!(passed);
    print_json(&report)?;
    Ok(passed)
}

fn binarize(a: BinarizeArgs) -> Result<()> {
    let net = load_model(&a.model)?;
    let ds = load_data(&a.data)?;
    let codes = net.encode_batch(ds.matrix())?;
    let model = BinarizerModel::fit(&codes, a.beta)?;
    let bits = model.binarize_batch(&codes)?;
    let rates = model.positive_rates(&codes)?;
    CodesFile {
        beta: model.beta,
        thresholds: model.thresholds.clone(),
        codes: bits,
    }
    .save(&a.out)?;
    if let Some(p) = &a.binarizer {
        fs::write(p, serde_json::to_string_pretty(&model)?)?;
    }
    print_json(&json!({
        "n": ds.len(),
        "k": model.k(),
        "beta": model.beta,
        "degenerate_units": model.degenerate.iter().filter(|d| **d).count(),
        "max_rate_deviation": rates.iter().map(|r| (r - model.beta).abs()).fold(0.0, f64::max),
        "calibration_bound": model.calibration_bound(),
    }))
}

fn index(action: IndexAction) -> Result<()> {
    match action {
        IndexAction::Build { codes, out, collapse } => {
            let file = CodesFile::load(&codes).with_context(|| format!("reading codes {}", codes.display()))?;
            let mut idx = PrefixTrieIndex::with_collapse(file.k(), collapse)?;
            for c in &file.codes {
                idx.insert(c)?;
            }
            idx.audit()?;
            idx.save(&out)?;
            print_json(&json!({ "n": idx.len(), "k": idx.k(), "nodes": idx.node_count() }))
        }
        IndexAction::Query {
            index,
            r,
            code,
            row,
            codes,
        } => {
            let idx = PrefixTrieIndex::load(&index).with_context(|| format!("reading index {}", index.display()))?;
            let q = match (code, row, codes) {
                (Some(hex), _, _) => BitCode::from_hex(idx.k(), &hex)?,
                (None, Some(row), Some(codes)) => {
                    let file = CodesFile::load(&codes)?;
                    match file.codes.get(row) {
                        Some(c) => c.clone(),
                        None => bail!("row {row} out of range (codes file has {})", file.codes.len()),
                    }
                }
                _ => bail!("give either --code HEX or --row N --codes FILE"),
            };
            let res = idx.query(&q, r)?;
            print_json(&json!({
                "terminal_depth": res.terminal_depth,
                "visited_counts": res.visited_counts,
                "neighbor_ids": res.neighbor_ids,
            }))
        }
    }
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let idx = PrefixTrieIndex::load(&a.index)?;
    let file = CodesFile::load(&a.queries)?;
    let queries: Vec<BitCode> = file.codes.into_iter().take(a.max_queries).collect();
    let table = bench(&idx, &queries, &a.r, a.scan_queries)?;
    let csv = table.to_csv();
    fs::write(&a.out, &csv)?;
    emit(&csv)
}

fn compress(a: CompressArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let mut curves = Vec::new();
    for (ordering, path) in &a.curves {
        let net = load_model(path)?;
        let k = net.code_dim();
        let b_list: Vec<usize> = if a.b_list.is_empty() {
            (1..=k).collect()
        } else {
            a.b_list.iter().copied().filter(|&b| (1..=k).contains(&b)).collect()
        };
        curves.push(rd_curve(&net, ds.matrix(), &b_list, *ordering)?);
    }
    let csv = curves_csv(&curves);
    fs::write(&a.out, &csv)?;
    emit(&csv)
}

fn run(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("config {}", config.display()))?;
    let report = run_experiment(&cfg, out)?;
    info!("outputs in {}", out.display());
    print_json(&serde_json::to_value(&report)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { source } => gen_data(source),
        Command::Train(a) => train(a),
        Command::VerifyPca(a) => match verify_pca(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
        Command::Binarize(a) => binarize(a),
        Command::Index { action } => index(action),
        Command::Bench(a) => run_bench(a),
        Command::Compress(a) => compress(a),
        Command::Run { config, out } => run(&config, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
