//! The pipeline behind the `fuselens` binary: single-pair fusion, metric
//! evaluation, manifest-driven batch processing, and phantom dataset
//! generation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde_json::json;

use crate::error::{FusionError, Result};
use crate::fuse::{fuse_average, fuse_laplacian, fuse_variational, FusionResult, OptimConfig};
use crate::image::{load_image, save_image, GrayImage, RegisteredPair};
use crate::losses::{composite_loss, LossReport};
use crate::manifest::{Manifest, ManifestEntry};
use crate::metrics::evaluate_all;
use crate::phantom::generate_phantom;
use crate::report::{render_batch, render_single, round_sig10, MetricRecord};

/// Fusion method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Variational,
    Average,
    Laplacian,
}

impl FromStr for Method {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variational" => Ok(Method::Variational),
            "average" => Ok(Method::Average),
            "laplacian" => Ok(Method::Laplacian),
            other => Err(FusionError::Validation(format!(
                "unknown method '{other}' (expected variational, average, or laplacian)"
            ))),
        }
    }
}

/// Report format selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(FusionError::Validation(format!(
                "unknown format '{other}' (expected csv or json)"
            ))),
        }
    }
}

/// Everything a fuse or batch run needs besides its input paths.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub method: Method,
    pub optim: OptimConfig,
    pub out_dir: PathBuf,
    pub format: ReportFormat,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Variational,
            optim: OptimConfig::default(),
            out_dir: PathBuf::from("."),
            format: ReportFormat::Csv,
            jobs: 1,
        }
    }
}

/// Pyramid depth for the Laplacian baseline: as deep as the image allows,
/// up to four levels.
fn pyramid_levels(pair: &RegisteredPair) -> usize {
    let min_side = pair.width().min(pair.height());
    let mut levels = 0usize;
    while levels < 4 && (1usize << (levels + 1)) <= min_side {
        levels += 1;
    }
    levels.max(1)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| FusionError::Output {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    file.write_all(text.as_bytes()).map_err(|e| FusionError::Output {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| FusionError::Output {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_pair(ct_path: &Path, mr_path: &Path) -> Result<RegisteredPair> {
    RegisteredPair::new(load_image(ct_path)?, load_image(mr_path)?)
}

fn loss_report_json(report: &LossReport) -> serde_json::Value {
    let mut v = json!({
        "sl": round_sig10(report.sl),
        "mef_ssim": round_sig10(report.mef_ssim),
        "composite": round_sig10(report.composite),
        "alpha": report.weights.alpha,
        "beta": report.weights.beta,
    });
    if let Some(r) = report.reconstruct {
        v["reconstruct"] = json!(round_sig10(r));
    }
    v
}

/// Runs the configured fuser. For the baselines the result carries an empty
/// trace and zero iterations.
fn run_method(pair: &RegisteredPair, cfg: &RunConfig) -> Result<(GrayImage, Option<FusionResult>)> {
    match cfg.method {
        Method::Average => Ok((fuse_average(pair), None)),
        Method::Laplacian => Ok((fuse_laplacian(pair, pyramid_levels(pair))?, None)),
        Method::Variational => {
            let result = fuse_variational(pair, &cfg.optim)?;
            Ok((result.fused.clone(), Some(result)))
        }
    }
}

/// Fuses one pair, writing `fused.png` and `trace.json` into the output
/// directory.
pub fn cmd_fuse(ct_path: &Path, mr_path: &Path, cfg: &RunConfig) -> Result<()> {
    let pair = load_pair(ct_path, mr_path)?;
    ensure_dir(&cfg.out_dir)?;

    // The initial point of the variational method is also the natural
    // reference for the baselines' trace files.
    let initial = composite_loss(
        &pair,
        &fuse_average(&pair),
        &cfg.optim.weights,
        &cfg.optim.sl_spec,
        &cfg.optim.mef_spec,
        None,
    )?;
    let (fused, result) = run_method(&pair, cfg)?;

    let trace = json!({
        "method": method_name(cfg.method),
        "initial": loss_report_json(&initial),
        "iterations_run": result.as_ref().map_or(0, |r| r.iterations_run),
        "converged": result.as_ref().is_none_or(|r| r.converged),
        "trace": result
            .as_ref()
            .map_or_else(Vec::new, |r| r.loss_trace.iter().map(loss_report_json).collect::<Vec<_>>()),
    });
    save_image(&fused, &cfg.out_dir.join("fused.png"))?;
    write_text(
        &cfg.out_dir.join("trace.json"),
        &format!("{}\n", serde_json::to_string_pretty(&trace).expect("serialize")),
    )
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Variational => "variational",
        Method::Average => "average",
        Method::Laplacian => "laplacian",
    }
}

/// Evaluates a fused image against its sources and prints one record to
/// stdout.
pub fn cmd_eval(ct_path: &Path, mr_path: &Path, fused_path: &Path, format: ReportFormat) -> Result<String> {
    let pair = load_pair(ct_path, mr_path)?;
    let fused = load_image(fused_path)?;
    if !pair.ct.same_shape(&fused) {
        return Err(FusionError::Dimension(
            "fused image shape differs from sources".to_string(),
        ));
    }
    let id = fused_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("fused")
        .to_string();
    let record = MetricRecord {
        id,
        report: evaluate_all(&pair, &fused)?,
    };
    Ok(render_single(&record, format == ReportFormat::Json))
}

/// Fuses and evaluates every manifest entry, writing per-entry fused images
/// and a report with one aggregate row. Entry failures are reported on
/// stderr and the first one is returned after the report is written.
pub fn cmd_batch(manifest_path: &Path, cfg: &RunConfig) -> Result<()> {
    let (manifest, root) = Manifest::load(manifest_path)?;
    ensure_dir(&cfg.out_dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| FusionError::Validation(format!("cannot build thread pool: {e}")))?;

    let outcomes: Vec<(String, Result<MetricRecord>)> = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|entry| (entry.id.clone(), process_entry(entry, &root, cfg)))
            .collect()
    });

    let mut records = Vec::new();
    let mut first_error = None;
    for (id, outcome) in outcomes {
        match outcome {
            Ok(record) => records.push(record),
            Err(e) => {
                eprintln!("entry {id}: {e}");
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }

    if !records.is_empty() {
        let name = match cfg.format {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Json => "report.json",
        };
        write_text(
            &cfg.out_dir.join(name),
            &render_batch(&records, cfg.format == ReportFormat::Json),
        )?;
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn process_entry(entry: &ManifestEntry, root: &Path, cfg: &RunConfig) -> Result<MetricRecord> {
    let pair = load_pair(&root.join(&entry.ct_path), &root.join(&entry.mr_path))?;
    let (fused, _) = run_method(&pair, cfg)?;
    save_image(&fused, &cfg.out_dir.join(format!("{}_fused.png", entry.id)))?;
    Ok(MetricRecord {
        id: entry.id.clone(),
        report: evaluate_all(&pair, &fused)?,
    })
}

/// Generates `count` phantom pairs plus a manifest into the output
/// directory; deterministic in the seed.
pub fn cmd_phantom(out_dir: &Path, count: usize, seed: u64, size: usize) -> Result<()> {
    if count == 0 {
        return Err(FusionError::Validation(
            "phantom count must be at least 1".to_string(),
        ));
    }
    ensure_dir(out_dir)?;
    let mut entries = Vec::with_capacity(count);
    for index in 0..count {
        let phantom = generate_phantom(size, seed, index as u64)?;
        let id = format!("p{index:03}");
        let ct_path = format!("{id}_ct.png");
        let mr_path = format!("{id}_mr.png");
        save_image(&phantom.pair.ct, &out_dir.join(&ct_path))?;
        save_image(&phantom.pair.mr, &out_dir.join(&mr_path))?;
        entries.push(ManifestEntry {
            id,
            ct_path,
            mr_path,
            fused_path: None,
        });
    }
    let manifest = Manifest {
        root: ".".to_string(),
        entries,
    };
    write_text(
        &out_dir.join("manifest.json"),
        &format!("{}\n", serde_json::to_string_pretty(&manifest).expect("serialize")),
    )
}
