//! Pipeline orchestration: run reference simulations, replay annotations,
//! reconstruct, score, and compare treatments; emits machine-readable
//! reports. Every command is a pure function of (inputs, flags, seed).

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::{DifferentiaWidth, StorageKind};
use crate::formats::{
    export_alife_csv, export_newick, import_alife_csv, AnnotationSetFile, FormatError,
};
use crate::quality::{evaluate, QualityReport};
use crate::reconstruct::{
    build_tree, collapse_unifurcations, peel_back_conjoined_leaves, Phylogeny, ReconstructError,
};
use crate::refmodel::{downsample, run_evolution, AnnotationConfig, RefModelError, Regime};
use crate::retention::RetentionPolicy;
use crate::stats::{effect_report, skim_best, skim_worst, EffectReport, StatsError};

/// Errors carry a stable category for the single-line stderr report.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Data { .. } => "data",
        }
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn data(path: &Path, err: impl std::fmt::Display) -> CliError {
        CliError::Data {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }
}

impl From<RefModelError> for CliError {
    fn from(e: RefModelError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> CliError {
        CliError::Config(e.to_string())
    }
}

pub const SEED_ENV_VAR: &str = "STRATIGRAPH_SEED";

/// One treatment: regime, scale, annotation configuration, replicate count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub regime: String,
    pub population_size: usize,
    pub generations: u64,
    pub downsample: usize,
    pub policy: String,
    pub storage: String,
    pub annotation_bits: u64,
    pub differentia_bits: u8,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> ExperimentSpec {
        ExperimentSpec {
            regime: "plain".into(),
            population_size: 1024,
            generations: 10_000,
            downsample: 128,
            policy: "tilted".into(),
            storage: "surface".into(),
            annotation_bits: 64,
            differentia_bits: 1,
            replicates: 20,
            seed: 0,
        }
    }
}

/// The spec resolved into model-level types.
pub struct ResolvedSpec {
    pub regime: Regime,
    pub spec: ExperimentSpec,
    pub annotation: AnnotationConfig,
}

impl ExperimentSpec {
    pub fn resolve(&self) -> Result<ResolvedSpec, CliError> {
        let regime: Regime = self
            .regime
            .parse()
            .map_err(|e: RefModelError| CliError::Config(e.to_string()))?;
        if self.downsample == 0 || self.downsample > self.population_size {
            return Err(CliError::Config(format!(
                "downsample {} must lie in 1..=population {}",
                self.downsample, self.population_size
            )));
        }
        if self.replicates == 0 {
            return Err(CliError::Config("replicates must be positive".into()));
        }
        let annotation = resolve_annotation(
            &self.policy,
            &self.storage,
            self.annotation_bits,
            self.differentia_bits,
        )?;
        Ok(ResolvedSpec {
            regime,
            spec: self.clone(),
            annotation,
        })
    }
}

/// Builds the annotation configuration from CLI-level fields. Capped policy
/// names may omit their capacity (`tilted` vs `tilted:64`); the bare form
/// derives capacity = annotation_bits / differentia_bits.
pub fn resolve_annotation(
    policy: &str,
    storage: &str,
    annotation_bits: u64,
    differentia_bits: u8,
) -> Result<AnnotationConfig, CliError> {
    let width = DifferentiaWidth::new(differentia_bits)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if annotation_bits == 0 || annotation_bits % differentia_bits as u64 != 0 {
        return Err(CliError::Config(format!(
            "annotation_bits {annotation_bits} not divisible by differentia_bits {differentia_bits}"
        )));
    }
    let capacity = annotation_bits / differentia_bits as u64;
    let policy_str = match policy {
        "steady" | "tilted" | "hybrid" => format!("{policy}:{capacity}"),
        other => other.to_string(),
    };
    let policy: RetentionPolicy = policy_str
        .parse()
        .map_err(|e: crate::retention::RetentionError| CliError::Config(e.to_string()))?;
    let storage = match storage {
        "column" => StorageKind::Column,
        "surface" => StorageKind::Surface,
        other => {
            return Err(CliError::Config(format!(
                "unknown storage `{other}` (expected column|surface)"
            )))
        }
    };
    if storage == StorageKind::Surface {
        if !capacity.is_power_of_two() || capacity < 8 {
            return Err(CliError::Config(format!(
                "surface site count {capacity} must be a power of two >= 8"
            )));
        }
        match policy.capacity() {
            Some(c) if c == capacity => {}
            Some(c) => {
                return Err(CliError::Config(format!(
                    "policy capacity {c} disagrees with annotation_bits/differentia_bits = {capacity}"
                )))
            }
            None => {
                return Err(CliError::Config(format!(
                    "surface storage requires a capped policy, got `{policy}`"
                )))
            }
        }
    }
    Ok(AnnotationConfig {
        policy,
        width,
        storage,
    })
}

#[derive(Parser, Debug)]
#[command(
    name = "stratigraph",
    about = "Hereditary-stratigraphy annotate-and-reconstruct pipeline",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct SpecArgs {
    /// JSON file with ExperimentSpec fields; flags override file values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Selection regime: plain|mild|rich|drift
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub population_size: Option<usize>,
    #[arg(long)]
    pub generations: Option<u64>,
    /// Taxa sampled from the end-state population
    #[arg(long)]
    pub downsample: Option<usize>,
    /// Retention policy id; bare steady|tilted|hybrid derive their capacity
    #[arg(long)]
    pub policy: Option<String>,
    /// column|surface
    #[arg(long)]
    pub storage: Option<String>,
    /// Total annotation differentia budget in bits
    #[arg(long)]
    pub annotation_bits: Option<u64>,
    /// Differentia width in bits: 1|8|32|64
    #[arg(long)]
    pub differentia_bits: Option<u8>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Run seed; defaults to $STRATIGRAPH_SEED, then 0
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SpecArgs {
    pub fn build(&self) -> Result<ExperimentSpec, CliError> {
        let mut spec = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
                serde_json::from_str(&text).map_err(|e| CliError::data(path, e))?
            }
            None => ExperimentSpec::default(),
        };
        if self.seed.is_none() && self.config.is_none() {
            if let Ok(v) = std::env::var(SEED_ENV_VAR) {
                spec.seed = v
                    .parse()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV_VAR}={v} is not a u64")))?;
            }
        } else if self.config.is_some() && self.seed.is_none() {
            // config file provided a seed; env only fills the gap when the
            // file kept the default
            if let Ok(v) = std::env::var(SEED_ENV_VAR) {
                if spec.seed == 0 {
                    spec.seed = v.parse().map_err(|_| {
                        CliError::Config(format!("{SEED_ENV_VAR}={v} is not a u64"))
                    })?;
                }
            }
        }
        macro_rules! over {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    spec.$field = v.clone();
                }
            };
        }
        over!(regime);
        over!(population_size);
        over!(generations);
        over!(downsample);
        over!(policy);
        over!(storage);
        over!(annotation_bits);
        over!(differentia_bits);
        over!(replicates);
        over!(seed);
        Ok(spec)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run reference simulations: per replicate, a reference phylogeny and
    /// an annotation set
    Simulate {
        #[command(flatten)]
        spec: SpecArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Concurrent replicates; defaults to logical cores
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Rebuild a phylogeny from an annotation set file
    Reconstruct {
        /// Input .ann.json or .ann.csv
        input: PathBuf,
        /// Output .phylo.csv path; defaults next to the input
        #[arg(long)]
        out: Option<PathBuf>,
        /// Additionally write Newick beside the CSV
        #[arg(long)]
        newick: bool,
    },
    /// Score a reconstruction against its reference
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        reconstruction: PathBuf,
        /// Report path; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare groups of quality reports: medians, pairwise effects, skims
    Compare {
        /// Groups as label=dir, each dir holding *.quality.json reports
        #[arg(required = true, num_args = 2..)]
        groups: Vec<String>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Table path; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// simulate + reconstruct + evaluate (+ compare across policies), with a
    /// content-hash manifest
    Experiment {
        #[command(flatten)]
        spec: SpecArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated policy list; two or more enable the comparison
        /// stage (overrides --policy)
        #[arg(long)]
        policies: Option<String>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

/// Prints to stdout, tolerating a closed pipe (e.g. `| head`).
fn emit(line: std::fmt::Arguments<'_>) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

/// splitmix64; used to derive independent replicate seeds.
fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes atomically: temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(CliError::io(dir))?;
    std::fs::write(tmp.path(), bytes).map_err(CliError::io(path))?;
    tmp.persist(path)
        .map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e.error,
        })?;
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(CliError::io(path))
}

fn jobs_or_default(jobs: Option<usize>) -> usize {
    jobs.filter(|&j| j > 0).unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    })
}

/// Runs `count` independent tasks on up to `jobs` threads, preserving output
/// order; fails with the lowest-index error.
fn run_parallel<T, F>(jobs: usize, count: usize, task: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(usize) -> Result<T, CliError> + Sync,
{
    let results: Mutex<Vec<Option<Result<T, CliError>>>> =
        Mutex::new((0..count).map(|_| None).collect());
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(count.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let r = task(i);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(count);
    for r in results.into_inner().unwrap() {
        out.push(r.expect("every index visited")?);
    }
    Ok(out)
}

/// Artifacts produced per replicate by `simulate`.
pub struct ReplicateFiles {
    pub reference: PathBuf,
    pub annotations: PathBuf,
}

/// Runs the reference model per replicate and writes `ref-<r>.phylo.csv` and
/// `ann-<r>.ann.json`, each fully determined by (seed, replicate).
pub fn cmd_simulate(
    spec: &ExperimentSpec,
    out_dir: &Path,
    jobs: Option<usize>,
) -> Result<Vec<ReplicateFiles>, CliError> {
    let resolved = spec.resolve()?;
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    run_parallel(jobs_or_default(jobs), spec.replicates, |r| {
        let rep_seed = mix_seed(spec.seed, r as u64 + 1);
        let config = resolved
            .regime
            .config(spec.population_size, spec.generations, rep_seed);
        let output = run_evolution(&config, &resolved.annotation)?;
        let output = if spec.downsample < spec.population_size {
            downsample(&output, spec.downsample, mix_seed(rep_seed, 0xD0))?
        } else {
            output
        };
        let reference = out_dir.join(format!("ref-{r}.phylo.csv"));
        let annotations = out_dir.join(format!("ann-{r}.ann.json"));
        let csv = export_alife_csv(&output.reference)
            .map_err(|e| CliError::data(&reference, e))?;
        write_atomic(&reference, csv.as_bytes())?;
        let set = AnnotationSetFile::new(output.taxa.clone(), &output.annotations);
        write_atomic(&annotations, set.to_json().as_bytes())?;
        Ok(ReplicateFiles {
            reference,
            annotations,
        })
    })
}

fn reconstruct_set(set: &AnnotationSetFile, path: &Path) -> Result<Phylogeny, CliError> {
    let annotations = set.annotations().map_err(|e| CliError::data(path, e))?;
    let tree = build_tree(&annotations, &set.taxa)
        .and_then(|t| peel_back_conjoined_leaves(t, &annotations, &set.taxa))
        .map_err(|e: ReconstructError| CliError::data(path, e))?;
    Ok(collapse_unifurcations(&tree))
}

/// Reconstructs a phylogeny from an annotation set file; returns the paths
/// written (CSV, then optionally Newick).
pub fn cmd_reconstruct(
    input: &Path,
    out: Option<&Path>,
    newick: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let text = read_to_string(input)?;
    let set = if input.extension().is_some_and(|e| e == "csv") {
        AnnotationSetFile::from_csv(&text)
    } else {
        AnnotationSetFile::from_json(&text)
    }
    .map_err(|e: FormatError| CliError::data(input, e))?;
    let tree = reconstruct_set(&set, input)?;
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = input
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or("reconstruction");
            let stem = stem.trim_end_matches(".ann.json").trim_end_matches(".ann.csv");
            input.with_file_name(format!("{stem}.phylo.csv"))
        }
    };
    let csv = export_alife_csv(&tree).map_err(|e| CliError::data(&out, e))?;
    write_atomic(&out, csv.as_bytes())?;
    let mut written = vec![out.clone()];
    if newick {
        let nwk_path = out.with_extension("").with_extension("nwk");
        write_atomic(&nwk_path, (export_newick(&tree, false) + "\n").as_bytes())?;
        written.push(nwk_path);
    }
    Ok(written)
}

/// Scores a reconstruction against its reference; returns the report.
pub fn cmd_evaluate(
    reference: &Path,
    reconstruction: &Path,
    out: Option<&Path>,
) -> Result<QualityReport, CliError> {
    let ref_tree =
        import_alife_csv(&read_to_string(reference)?).map_err(|e| CliError::data(reference, e))?;
    let rec_tree = import_alife_csv(&read_to_string(reconstruction)?)
        .map_err(|e| CliError::data(reconstruction, e))?;
    let report =
        evaluate(&ref_tree, &rec_tree).map_err(|e| CliError::data(reconstruction, e))?;
    let json = serde_json::to_string_pretty(&report).expect("plain data serializes");
    match out {
        Some(path) => write_atomic(path, json.as_bytes())?,
        None => emit(format_args!("{json}")),
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: String,
    pub n: usize,
    pub median: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseEffect {
    pub a: String,
    pub b: String,
    #[serde(flatten)]
    pub effect: EffectReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub groups: Vec<GroupSummary>,
    pub pairwise: Vec<PairwiseEffect>,
    pub skim_best: Vec<String>,
    pub skim_worst: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub alpha: f64,
    pub metrics: Vec<MetricComparison>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Compares labeled groups of quality reports metric by metric.
pub fn compare_reports(
    groups: &[(String, Vec<QualityReport>)],
    alpha: f64,
) -> Result<ComparisonReport, CliError> {
    if groups.len() < 2 {
        return Err(CliError::Usage(format!(
            "compare needs at least 2 groups, got {}",
            groups.len()
        )));
    }
    let metrics: [(&str, fn(&QualityReport) -> Option<f64>); 3] = [
        ("strict_triplet_distance", |r| {
            Some(r.strict_triplet_distance)
        }),
        ("lax_triplet_distance", |r| Some(r.lax_triplet_distance)),
        ("inner_node_loss", |r| r.inner_node_loss),
    ];
    let mut out = Vec::new();
    for (metric, extract) in metrics {
        let samples: Vec<(String, Vec<f64>)> = groups
            .iter()
            .map(|(label, reports)| {
                (
                    label.clone(),
                    reports.iter().filter_map(extract).collect::<Vec<f64>>(),
                )
            })
            .collect();
        if samples.iter().any(|(_, v)| v.is_empty()) {
            continue; // metric absent in some group (e.g. undefined loss)
        }
        let mut pairwise = Vec::new();
        for i in 0..samples.len() {
            for j in (i + 1)..samples.len() {
                pairwise.push(PairwiseEffect {
                    a: samples[i].0.clone(),
                    b: samples[j].0.clone(),
                    effect: effect_report(&samples[i].1, &samples[j].1)?,
                });
            }
        }
        let refs: Vec<&[f64]> = samples.iter().map(|(_, v)| v.as_slice()).collect();
        let best = skim_best(&refs, alpha)?;
        let worst = skim_worst(&refs, alpha)?;
        out.push(MetricComparison {
            metric: metric.to_string(),
            groups: samples
                .iter()
                .map(|(label, v)| GroupSummary {
                    label: label.clone(),
                    n: v.len(),
                    median: median(v),
                })
                .collect(),
            pairwise,
            skim_best: best.into_iter().map(|i| samples[i].0.clone()).collect(),
            skim_worst: worst.into_iter().map(|i| samples[i].0.clone()).collect(),
        });
    }
    Ok(ComparisonReport {
        alpha,
        metrics: out,
    })
}

fn load_report_dir(dir: &Path) -> Result<Vec<QualityReport>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".quality.json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data {
            path: dir.to_path_buf(),
            message: "no *.quality.json reports found".into(),
        });
    }
    paths
        .iter()
        .map(|p| {
            serde_json::from_str(&read_to_string(p)?).map_err(|e| CliError::data(p, e))
        })
        .collect()
}

pub fn cmd_compare(
    group_args: &[String],
    alpha: f64,
    out: Option<&Path>,
) -> Result<ComparisonReport, CliError> {
    let mut groups = Vec::new();
    for g in group_args {
        let (label, dir) = g.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("group `{g}` must have the form label=dir"))
        })?;
        groups.push((label.to_string(), load_report_dir(Path::new(dir))?));
    }
    let report = compare_reports(&groups, alpha)?;
    let json = serde_json::to_string_pretty(&report).expect("plain data serializes");
    match out {
        Some(path) => write_atomic(path, json.as_bytes())?,
        None => emit(format_args!("{json}")),
    }
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub specs: Vec<ExperimentSpec>,
    pub artifacts: Vec<ManifestEntry>,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn sanitize(policy: &str) -> String {
    policy.replace(':', "-")
}

/// Full pipeline: simulate, reconstruct, and evaluate each policy treatment,
/// compare across treatments when two or more are given, and write a
/// manifest hashing every artifact.
pub fn cmd_experiment(
    base: &ExperimentSpec,
    policies: &[String],
    out_dir: &Path,
    alpha: f64,
    jobs: Option<usize>,
) -> Result<ExperimentManifest, CliError> {
    if policies.is_empty() {
        return Err(CliError::Usage("no policies given".into()));
    }
    let mut artifacts: Vec<PathBuf> = Vec::new();
    let mut specs = Vec::new();
    let mut groups = Vec::new();
    for policy in policies {
        let spec = ExperimentSpec {
            policy: policy.clone(),
            ..base.clone()
        };
        spec.resolve()?;
        let dir = out_dir.join(sanitize(policy));
        let files = cmd_simulate(&spec, &dir, jobs)?;
        let reports = run_parallel(jobs_or_default(jobs), files.len(), |r| {
            let rec = dir.join(format!("rec-{r}.phylo.csv"));
            cmd_reconstruct(&files[r].annotations, Some(&rec), false)?;
            let report_path = dir.join(format!("eval-{r}.quality.json"));
            let report = cmd_evaluate(&files[r].reference, &rec, Some(&report_path))?;
            Ok((rec, report_path, report))
        })?;
        for f in &files {
            artifacts.push(f.reference.clone());
            artifacts.push(f.annotations.clone());
        }
        let mut group = Vec::new();
        for (rec, report_path, report) in reports {
            artifacts.push(rec);
            artifacts.push(report_path);
            group.push(report);
        }
        groups.push((policy.clone(), group));
        specs.push(spec);
    }
    if groups.len() >= 2 {
        let comparison = compare_reports(&groups, alpha)?;
        let path = out_dir.join("comparison.json");
        write_atomic(
            &path,
            serde_json::to_string_pretty(&comparison)
                .expect("plain data serializes")
                .as_bytes(),
        )?;
        artifacts.push(path);
    }
    let manifest = ExperimentManifest {
        specs,
        artifacts: artifacts
            .iter()
            .map(|p| {
                Ok(ManifestEntry {
                    path: p
                        .strip_prefix(out_dir)
                        .unwrap_or(p)
                        .to_string_lossy()
                        .into_owned(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?,
    };
    write_atomic(
        &out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .expect("plain data serializes")
            .as_bytes(),
    )?;
    Ok(manifest)
}

/// Entry point for the binary: parse, dispatch, map errors to a single-line
/// category report.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { spec, out, jobs } => {
            let spec = spec.build()?;
            let files = cmd_simulate(&spec, &out, jobs)?;
            for f in files {
                emit(format_args!("{}", f.reference.display()));
                emit(format_args!("{}", f.annotations.display()));
            }
            Ok(())
        }
        Command::Reconstruct { input, out, newick } => {
            for p in cmd_reconstruct(&input, out.as_deref(), newick)? {
                emit(format_args!("{}", p.display()));
            }
            Ok(())
        }
        Command::Evaluate {
            reference,
            reconstruction,
            out,
        } => {
            cmd_evaluate(&reference, &reconstruction, out.as_deref())?;
            Ok(())
        }
        Command::Compare { groups, alpha, out } => {
            cmd_compare(&groups, alpha, out.as_deref())?;
            Ok(())
        }
        Command::Experiment {
            spec,
            out,
            policies,
            alpha,
            jobs,
        } => {
            let base = spec.build()?;
            let policies: Vec<String> = match policies {
                Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
                None => vec![base.policy.clone()],
            };
            cmd_experiment(&base, &policies, &out, alpha, jobs)?;
            emit(format_args!("{}", out.join("manifest.json").display()));
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retention::RetentionPolicy;

    #[test]
    fn resolve_annotation_derives_capacity_for_bare_names() {
        let cfg = resolve_annotation("tilted", "surface", 64, 1).unwrap();
        assert_eq!(cfg.policy, RetentionPolicy::TiltedCapped(64));
        assert_eq!(cfg.width.bits(), 1);
        assert_eq!(cfg.storage, StorageKind::Surface);
        let cfg = resolve_annotation("steady", "column", 256, 8).unwrap();
        assert_eq!(cfg.policy, RetentionPolicy::SteadyCapped(32));
        // explicit capacity must agree for surfaces
        assert!(resolve_annotation("tilted:32", "surface", 64, 1).is_err());
        assert!(resolve_annotation("keep-all", "surface", 64, 1).is_err());
        assert!(resolve_annotation("keep-all", "column", 64, 64).is_ok());
        assert!(resolve_annotation("tilted", "surface", 60, 1).is_err());
        assert!(resolve_annotation("tilted", "banana", 64, 1).is_err());
    }

    #[test]
    fn spec_args_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        std::fs::write(
            &path,
            r#"{"population_size": 64, "generations": 10, "seed": 9}"#,
        )
        .unwrap();
        let args = SpecArgs {
            config: Some(path),
            generations: Some(25),
            ..Default::default()
        };
        let spec = args.build().unwrap();
        assert_eq!(spec.population_size, 64);
        assert_eq!(spec.generations, 25);
        assert_eq!(spec.seed, 9);
        assert_eq!(spec.regime, "plain"); // default
    }

    #[test]
    fn spec_rejects_unknown_config_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        std::fs::write(&path, r#"{"popsize": 64}"#).unwrap();
        let args = SpecArgs {
            config: Some(path),
            ..Default::default()
        };
        assert!(matches!(args.build().unwrap_err(), CliError::Data { .. }));
    }

    #[test]
    fn simulate_is_deterministic_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec {
            population_size: 32,
            generations: 20,
            downsample: 8,
            replicates: 3,
            annotation_bits: 64,
            differentia_bits: 8,
            policy: "tilted".into(),
            storage: "surface".into(),
            seed: 5,
            ..Default::default()
        };
        let a = cmd_simulate(&spec, &dir.path().join("a"), Some(2)).unwrap();
        let b = cmd_simulate(&spec, &dir.path().join("b"), Some(1)).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                std::fs::read(&x.reference).unwrap(),
                std::fs::read(&y.reference).unwrap()
            );
            assert_eq!(
                std::fs::read(&x.annotations).unwrap(),
                std::fs::read(&y.annotations).unwrap()
            );
        }
        // replicates differ from one another
        assert_ne!(
            std::fs::read(&a[0].annotations).unwrap(),
            std::fs::read(&a[1].annotations).unwrap()
        );
    }

    #[test]
    fn reconstruct_and_evaluate_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec {
            population_size: 64,
            generations: 60,
            downsample: 16,
            replicates: 1,
            annotation_bits: u64::MAX, // unused for keep-all column
            policy: "keep-all".into(),
            storage: "column".into(),
            differentia_bits: 64,
            seed: 11,
            ..Default::default()
        };
        // keep-all column ignores annotation_bits but must still divide
        let spec = ExperimentSpec {
            annotation_bits: 64,
            ..spec
        };
        let files = cmd_simulate(&spec, dir.path(), Some(1)).unwrap();
        let rec = dir.path().join("rec-0.phylo.csv");
        let written = cmd_reconstruct(&files[0].annotations, Some(&rec), true).unwrap();
        assert_eq!(written.len(), 2);
        assert!(written[1].ends_with("rec-0.nwk"));
        let report_path = dir.path().join("eval-0.quality.json");
        let report = cmd_evaluate(&files[0].reference, &rec, Some(&report_path)).unwrap();
        // KeepAll + 64-bit: essentially perfect reconstruction
        assert_eq!(report.strict_triplet_distance, 0.0);
        // report round-trips through its file
        let loaded: QualityReport =
            serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
        assert_eq!(loaded, report);
    }

    #[test]
    fn compare_flags_separated_groups() {
        let mk = |v: &[f64]| -> Vec<QualityReport> {
            v.iter()
                .map(|&x| QualityReport {
                    strict_triplet_distance: x,
                    lax_triplet_distance: x / 2.0,
                    inner_node_loss: Some(x),
                    outcome_histogram: Vec::new(),
                    triplet_count: 100,
                    monte_carlo: false,
                })
                .collect()
        };
        let low: Vec<f64> = (0..12).map(|i| 0.1 + i as f64 * 0.001).collect();
        let high: Vec<f64> = (0..12).map(|i| 0.8 + i as f64 * 0.001).collect();
        let groups = vec![
            ("low".to_string(), mk(&low)),
            ("high".to_string(), mk(&high)),
        ];
        let report = compare_reports(&groups, 0.05).unwrap();
        let strict = &report.metrics[0];
        assert_eq!(strict.metric, "strict_triplet_distance");
        assert_eq!(strict.skim_best, vec!["low"]);
        assert_eq!(strict.skim_worst, vec!["high"]);
        assert_eq!(strict.pairwise[0].effect.cliffs_delta, -1.0);
        assert!(strict.pairwise[0].effect.p_value < 0.05);
        // identical groups: no skims, zero delta
        let same = vec![
            ("a".to_string(), mk(&low)),
            ("b".to_string(), mk(&low)),
        ];
        let report = compare_reports(&same, 0.05).unwrap();
        assert!(report.metrics[0].skim_best.is_empty());
        assert_eq!(report.metrics[0].pairwise[0].effect.cliffs_delta, 0.0);
        assert!(matches!(
            compare_reports(&groups[..1], 0.05).unwrap_err(),
            CliError::Usage(_)
        ));
    }

    #[test]
    fn experiment_writes_manifest_with_valid_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let base = ExperimentSpec {
            population_size: 32,
            generations: 30,
            downsample: 12,
            replicates: 4,
            annotation_bits: 64,
            differentia_bits: 8,
            storage: "surface".into(),
            seed: 3,
            ..Default::default()
        };
        let manifest = cmd_experiment(
            &base,
            &["steady".to_string(), "tilted".to_string()],
            dir.path(),
            0.05,
            Some(2),
        )
        .unwrap();
        assert_eq!(manifest.specs.len(), 2);
        // 2 policies x 4 replicates x 4 files + comparison.json
        assert_eq!(manifest.artifacts.len(), 2 * 4 * 4 + 1);
        for entry in &manifest.artifacts {
            let path = dir.path().join(&entry.path);
            assert!(path.exists(), "{} missing", entry.path);
            assert_eq!(sha256_file(&path).unwrap(), entry.sha256, "{}", entry.path);
        }
        assert!(dir.path().join("manifest.json").exists());
        assert!(dir.path().join("comparison.json").exists());
        assert!(dir.path().join("steady/ref-0.phylo.csv").exists());
        assert!(dir.path().join("tilted/eval-3.quality.json").exists());
    }

    #[test]
    fn error_categories_are_stable() {
        assert_eq!(CliError::Usage("x".into()).category(), "usage");
        assert_eq!(CliError::Config("x".into()).category(), "config");
        assert_eq!(
            CliError::Data {
                path: "p".into(),
                message: "m".into()
            }
            .category(),
            "data"
        );
    }
}
