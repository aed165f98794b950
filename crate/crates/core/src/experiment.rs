//! End-to-end runs: data → train → binarize → index → bench → compress.
//!
//! Every stage writes into one output directory and refreshes
//! `manifest.json`, which lists each file with its SHA-256 next to the
//! config hash and seed. A failing stage aborts the run with its name attached
//! and leaves earlier outputs in place.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::binarize::{BinarizerModel, CodesFile};
use crate::compression::{curves_csv, expected_distortion, rd_curve, Ordering, RateDistortionCurve};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{gen_gaussian, gen_pinwheel, ingest_image_dataset, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Network};
use crate::retrieval::{bench, PrefixTrieIndex};
use crate::trainer::{metrics_csv, mixture_cost, MetricsRow, Trainer};
use crate::truncation::TruncationDistribution;
use crate::Matrix;

pub const REPORT_SCHEMA: &str = include_str!("../report.schema.json");
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub completed_stages: Vec<&'static str>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataReport {
    pub provenance: String,
    pub fingerprint: String,
    pub dim: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    pub skipped_files: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub k: usize,
    pub final_mixture_cost: f64,
    pub frozen_prefix: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinarizeReport {
    pub beta: f64,
    pub degenerate_units: usize,
    /// Largest `|rate − β|` over units on the held-out split (0 if none).
    pub holdout_max_deviation: f64,
    pub calibration_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexReport {
    pub n: usize,
    pub nodes: usize,
    pub collapse: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub method: String,
    pub param: usize,
    /// `None` for rows that are computed analytically rather than timed.
    pub mean_us: Option<f64>,
    pub mean_depth: Option<f64>,
    pub candidates: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressReport {
    pub curves: Vec<RateDistortionCurve>,
    pub expected_distortion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub data: DataReport,
    pub train: TrainReport,
    pub binarize: Option<BinarizeReport>,
    pub index: Option<IndexReport>,
    pub bench: Option<Vec<BenchSummary>>,
    pub compress: Option<CompressReport>,
}

struct Outputs {
    dir: PathBuf,
    manifest: Manifest,
}

impl Outputs {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.record(name, bytes);
        Ok(path)
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        let sha256 = hex::encode(Sha256::digest(bytes));
        self.manifest.files.retain(|f| f.name != name);
        self.manifest.files.push(FileEntry {
            name: name.to_string(),
            sha256,
        });
    }

    fn finish_stage(&mut self, stage: &'static str) -> Result<()> {
        self.manifest.completed_stages.push(stage);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Build the dataset described by the config (normalized if requested).
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, usize)> {
    let d = &cfg.data;
    let (mut ds, skipped) = match d.source {
        DataSource::Pinwheel => (gen_pinwheel(&d.pinwheel, cfg.seed)?, 0),
        DataSource::Gaussian => (gen_gaussian(d.dim, d.count, &d.spectrum, cfg.seed)?, 0),
        DataSource::File => {
            let path = d.path.as_deref().ok_or_else(|| Error::invalid("data.path missing"))?;
            let ing = ingest_image_dataset(Path::new(path), d.format)?;
            (ing.dataset, ing.skipped)
        }
    };
    if d.normalize {
        ds.normalize()?;
    }
    Ok((ds, skipped))
}

/// Shuffle examples with the run seed and split off the held-out fraction.
pub fn split_dataset(ds: &Dataset, holdout_fraction: f64, seed: u64) -> (Matrix, Matrix) {
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed ^ 0xda7a));
    let n_hold = (n as f64 * holdout_fraction).floor() as usize;
    let n_train = n - n_hold;
    let m = ds.matrix();
    (
        m.select_columns(order[..n_train].iter()),
        m.select_columns(order[n_train..].iter()),
    )
}

pub struct TrainedModel {
    pub net: Network,
    pub metrics: Vec<MetricsRow>,
    pub steps: u64,
    pub frozen_prefix: usize,
}

/// Build the configured network (initialized from the run seed) and train it
/// on `train` under `dist`.
pub fn train_model(cfg: &ExperimentConfig, train: &Matrix, dist: TruncationDistribution) -> Result<TrainedModel> {
    let net_cfg = &cfg.network;
    let net = Network::autoencoder(
        &net_cfg.widths,
        net_cfg.hidden_activation,
        net_cfg.code_activation,
        net_cfg.tied,
        cfg.seed,
    )?;
    let mut tc = cfg.train.to_train_config(net_cfg.k(), cfg.seed)?;
    tc.dist = dist;
    let mut trainer = Trainer::new(net, tc)?;
    let metrics = trainer.fit(train, cfg.train.log_every)?;
    let steps = trainer.steps_taken();
    let frozen_prefix = trainer.sweep_state().frozen_prefix();
    Ok(TrainedModel {
        net: trainer.into_net(),
        metrics,
        steps,
        frozen_prefix,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let hash = cfg.hash()?;
    let mut out = Outputs {
        dir: out_dir.to_path_buf(),
        manifest: Manifest {
            version: REPORT_VERSION,
            config_hash: hash.clone(),
            seed: cfg.seed,
            completed_stages: Vec::new(),
            files: Vec::new(),
        },
    };
    out.write("config.toml", cfg.to_toml()?.as_bytes())?;
    let k = cfg.network.k();

    let (ds, skipped) = stage("data", load_dataset(cfg))?;
    let (train, holdout) = split_dataset(&ds, cfg.data.holdout_fraction, cfg.seed);
    stage("data", {
        let mut buf = Vec::new();
        ds.write_packed(&mut buf).map(|_| buf)
    })
    .and_then(|buf| out.write("dataset.bin", &buf))?;
    out.finish_stage("data")?;
    let data_report = DataReport {
        provenance: ds.provenance().to_string(),
        fingerprint: ds.fingerprint(),
        dim: ds.dim(),
        n_train: train.ncols(),
        n_holdout: holdout.ncols(),
        skipped_files: skipped,
    };

    let dist = stage("train", cfg.train.dist.build(k))?;
    let TrainedModel {
        net,
        metrics: rows,
        steps,
        frozen_prefix: frozen,
    } = stage("train", train_model(cfg, &train, dist.clone()))?;
    stage("train", net.to_model_json(Some(&hash))).and_then(|j| out.write("model.json", j.as_bytes()))?;
    out.write("metrics.csv", metrics_csv(&rows).as_bytes())?;
    let final_cost = stage("train", mixture_cost(&net, &train, &dist))?;
    out.finish_stage("train")?;
    let train_report = TrainReport {
        steps,
        k,
        final_mixture_cost: final_cost,
        frozen_prefix: frozen,
    };

    let mut binarize_report = None;
    let mut codes = None;
    let mut holdout_bits = None;
    if let Some(b) = &cfg.binarize {
        let (model, train_bits, hold_bits) = stage("binarize", (|| {
            let train_codes = net.encode_batch(&train)?;
            let model = BinarizerModel::fit(&train_codes, b.beta)?;
            let bits = model.binarize_batch(&train_codes)?;
            let hold = if holdout.ncols() > 0 {
                let hc = net.encode_batch(&holdout)?;
                Some((model.positive_rates(&hc)?, model.binarize_batch(&hc)?))
            } else {
                None
            };
            Ok((model, bits, hold))
        })())?;
        let file = CodesFile {
            beta: model.beta,
            thresholds: model.thresholds.clone(),
            codes: train_bits.clone(),
        };
        let mut buf = Vec::new();
        stage("binarize", file.write_to(&mut buf))?;
        out.write("codes.bin", &buf)?;
        out.write("binarizer.json", serde_json::to_string_pretty(&model)?.as_bytes())?;
        let deviation = hold_bits
            .as_ref()
            .map(|(rates, _)| rates.iter().map(|r| (r - model.beta).abs()).fold(0.0, f64::max))
            .unwrap_or(0.0);
        binarize_report = Some(BinarizeReport {
            beta: model.beta,
            degenerate_units: model.degenerate.iter().filter(|d| **d).count(),
            holdout_max_deviation: deviation,
            calibration_bound: model.calibration_bound(),
        });
        holdout_bits = hold_bits.map(|(_, bits)| bits);
        codes = Some(train_bits);
        out.finish_stage("binarize")?;
    }

    let mut index_report = None;
    let mut index = None;
    if let (Some(ix), Some(codes)) = (&cfg.index, &codes) {
        let built = stage("index", (|| {
            let mut idx = PrefixTrieIndex::with_collapse(k, ix.collapse)?;
            for c in codes {
                idx.insert(c)?;
            }
            idx.audit()?;
            Ok(idx)
        })())?;
        let mut buf = Vec::new();
        stage("index", built.write_to(&mut buf))?;
        out.write("index.bin", &buf)?;
        index_report = Some(IndexReport {
            n: built.len(),
            nodes: built.node_count(),
            collapse: ix.collapse,
        });
        index = Some(built);
        out.finish_stage("index")?;
    }

    let mut bench_report = None;
    if let (Some(bc), Some(idx)) = (&cfg.bench, &index) {
        let pool = holdout_bits.as_ref().or(codes.as_ref()).expect("index implies codes");
        let queries: Vec<_> = pool.iter().take(bc.queries).cloned().collect();
        let table = stage("bench", bench(idx, &queries, &bc.r_list, bc.scan_queries))?;
        out.write("bench.csv", table.to_csv().as_bytes())?;
        bench_report = Some(
            table
                .rows
                .iter()
                .map(|r| BenchSummary {
                    method: r.method.to_string(),
                    param: r.param,
                    mean_us: r.mean_us.is_finite().then_some(r.mean_us),
                    mean_depth: r.mean_depth.is_finite().then_some(r.mean_depth),
                    candidates: r.candidates,
                })
                .collect(),
        );
        out.finish_stage("bench")?;
    }

    let mut compress_report = None;
    if let Some(cc) = &cfg.compress {
        let eval = if holdout.ncols() > 0 { &holdout } else { &train };
        let mut b_list: Vec<usize> = cc.b_list.iter().copied().filter(|&b| b >= 1 && b <= k).collect();
        if b_list.is_empty() {
            b_list = (1..=k).collect();
        }
        let needs_plain = cc.orderings.iter().any(|o| *o != Ordering::NestedDropout);
        let plain = if needs_plain {
            let point = stage("compress", TruncationDistribution::point_mass(k, k))?;
            let plain = stage("compress", train_model(cfg, &train, point))?.net;
            stage("compress", plain.to_model_json(Some(&hash)))
                .and_then(|j| out.write("plain_model.json", j.as_bytes()))?;
            Some(plain)
        } else {
            None
        };
        let mut curves = Vec::new();
        for &o in &cc.orderings {
            let model = if o == Ordering::NestedDropout { &net } else { plain.as_ref().expect("trained above") };
            curves.push(stage("compress", rd_curve(model, eval, &b_list, o))?);
        }
        out.write("curve.csv", curves_csv(&curves).as_bytes())?;
        let ed = stage("compress", expected_distortion(&net, eval, &dist))?;
        compress_report = Some(CompressReport {
            curves,
            expected_distortion: ed,
        });
        out.finish_stage("compress")?;
    }

    let report = RunReport {
        version: REPORT_VERSION,
        config_hash: hash,
        seed: cfg.seed,
        data: data_report,
        train: train_report,
        binarize: binarize_report,
        index: index_report,
        bench: bench_report,
        compress: compress_report,
    };
    out.write("report.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    out.finish_stage("report")?;
    Ok(report)
}
