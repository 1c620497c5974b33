use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use fliqs_core::analysis::{
    self, AnalysisError, ClippingResult, ExpFit, SweepPoint, SynthSpec, ThresholdRule,
};
use fliqs_core::arch::{ArchChoice, SearchSpace};
use fliqs_core::costmodel::{self, ManifestError, ModelManifest, GIGA};
use fliqs_core::data::Dataset;
use fliqs_core::numerics::NumericFormat;
use fliqs_core::search::{
    self, run_pool, run_search_on, run_uniform_on, serve_config, write_trace_csv, CostTarget, SearchConfig,
    SearchError, SearchHooks, SearchResult, ServedConfig, SweepRow,
};
use serde::{Deserialize, Serialize};

use crate::overrides;
use crate::rundir::{self, create_file, io_err, write_json};
use crate::CliError;

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Spec(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        CliError::Config(e.to_string())
    }
}

pub struct Ctx {
    pub out_root: PathBuf,
}

pub fn load_search_config(path: &Path, sets: &[String], seed: Option<u64>) -> Result<SearchConfig, CliError> {
    let cfg: SearchConfig = overrides::load(Some(path), sets, seed.map(|s| ("seed", s)))?;
    cfg.validate()?;
    Ok(cfg)
}

fn searchable_names(cfg: &SearchConfig, data: &Dataset) -> Result<Vec<String>, CliError> {
    let net = cfg.build_network(data)?;
    Ok(net
        .searchable_layers()
        .into_iter()
        .map(|i| net.weight_layers()[i].name.clone())
        .collect())
}

fn write_trace(path: &Path, names: &[String], trace: &[search::TraceRecord]) -> Result<(), CliError> {
    write_trace_csv(create_file(path)?, names, trace).map_err(|e| io_err(path, e))
}

/// Writes the artifacts of a finished run into `dir`.
fn write_run(dir: &Path, r: &SearchResult) -> Result<(), CliError> {
    write_trace(&dir.join("trace.csv"), &r.layer_names, &r.trace)?;
    let weights = dir.join("weights.bin");
    let mut w = create_file(&weights)?;
    fliqs_core::network::checkpoint::save_checkpoint(&r.network, &mut w).map_err(|e| io_err(&weights, e))?;
    w.flush().map_err(|e| io_err(&weights, e))?;
    write_json(&dir.join("served_config.json"), &serve_config(r))?;
    write_json(&dir.join("result.json"), &r.summary("weights.bin"))
}

/// Runs `run` and writes its artifacts; a failed step still leaves the
/// partial trace behind.
fn execute(
    dir: &Path,
    cfg: &SearchConfig,
    data: &Dataset,
    run: impl FnOnce() -> Result<SearchResult, SearchError>,
) -> Result<SearchResult, CliError> {
    match run() {
        Ok(r) => {
            write_run(dir, &r)?;
            Ok(r)
        }
        Err(SearchError::Step { step, message, partial }) => {
            write_trace(&dir.join("trace.csv"), &searchable_names(cfg, data)?, &partial)?;
            Err(CliError::Runtime(format!(
                "step {step}: {message} (partial trace of {} steps in {})",
                partial.len(),
                dir.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn search(ctx: &Ctx, config: &Path, sets: &[String], seed: Option<u64>) -> Result<PathBuf, CliError> {
    let cfg = load_search_config(config, sets, seed)?;
    let data = cfg.data.load().map_err(SearchError::from)?;
    let dir = rundir::create(&ctx.out_root, "search", cfg.seed)?;
    write_json(&dir.join("resolved_config.json"), &cfg)?;
    let r = execute(&dir, &cfg, &data, || run_search_on(&cfg, &data, &mut SearchHooks::default()))?;
    log::info!(
        "served {} accuracy {:.4} cost {:.4} GBOPs (target {:.4})",
        r.archs_label(),
        r.served_accuracy,
        r.served_cost / GIGA,
        r.cost_target / GIGA
    );
    Ok(dir)
}

/// Uniform-format training. Without `format` the config's search space must
/// hold exactly one format; the resolved config records that single format.
pub fn uniform(
    ctx: &Ctx,
    config: &Path,
    format: Option<&str>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<PathBuf, CliError> {
    let mut cfg = load_search_config(config, sets, seed)?;
    let format: NumericFormat = match format {
        Some(f) => f.parse().map_err(|e| CliError::Config(format!("--format: {e}")))?,
        None => match cfg.search_space.formats().as_slice() {
            [f] => *f,
            other => {
                return Err(CliError::Config(format!(
                    "uniform needs --format or a single-format search space, got {} formats",
                    other.len()
                )))
            }
        },
    };
    cfg.search_space = SearchSpace::Custom(vec![format]);
    let data = cfg.data.load().map_err(SearchError::from)?;
    let dir = rundir::create(&ctx.out_root, "uniform", cfg.seed)?;
    write_json(&dir.join("resolved_config.json"), &cfg)?;
    let r = execute(&dir, &cfg, &data, || run_uniform_on(&cfg, &data, format))?;
    log::info!("{format}: accuracy {:.4} cost {:.4} GBOPs", r.served_accuracy, r.served_cost / GIGA);
    Ok(dir)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: SearchConfig,
    #[serde(default)]
    pub targets: Vec<CostTarget>,
    #[serde(default)]
    pub formats: Vec<NumericFormat>,
    /// Defaults to the base seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    Pareto,
    UniformFormats,
}

#[derive(Clone, Copy)]
enum SweepTask {
    Target(CostTarget),
    Format(NumericFormat),
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

pub fn sweep(
    ctx: &Ctx,
    kind: SweepKind,
    config: &Path,
    sets: &[String],
    seed: Option<u64>,
    jobs: usize,
) -> Result<PathBuf, CliError> {
    let mut sc: SweepConfig = overrides::load(Some(config), sets, seed.map(|s| ("base.seed", s)))?;
    sc.base.validate()?;
    if sc.seeds.is_empty() {
        sc.seeds.push(sc.base.seed);
    }
    let keys: Vec<SweepTask> = match kind {
        SweepKind::Pareto => sc.targets.iter().map(|&t| SweepTask::Target(t)).collect(),
        SweepKind::UniformFormats => sc.formats.iter().map(|&f| SweepTask::Format(f)).collect(),
    };
    if keys.is_empty() {
        let what = if kind == SweepKind::Pareto { "targets" } else { "formats" };
        return Err(CliError::Config(format!("sweep `{what}` list is empty")));
    }
    let data = sc.base.data.load().map_err(SearchError::from)?;
    let dir = rundir::create(&ctx.out_root, "sweep", sc.base.seed)?;
    write_json(&dir.join("resolved_config.json"), &sc)?;
    let tasks: Vec<(SweepTask, u64)> = keys.iter().flat_map(|&k| sc.seeds.iter().map(move |&s| (k, s))).collect();
    let rows = run_pool(tasks.len(), jobs, |i| {
        let (task, seed) = tasks[i];
        let mut cfg = sc.base.clone();
        cfg.seed = seed;
        let (key, result) = match task {
            SweepTask::Target(t) => {
                cfg.cost_target = t;
                (t.to_string(), run_search_on(&cfg, &data, &mut SearchHooks::default()))
            }
            SweepTask::Format(f) => {
                cfg.search_space = SearchSpace::Custom(vec![f]);
                (f.to_string(), run_uniform_on(&cfg, &data, f))
            }
        };
        let row_dir = dir.join(format!("{i:03}-{}-s{seed}", slug(&key)));
        let written = std::fs::create_dir(&row_dir)
            .map_err(|e| io_err(&row_dir, e))
            .and_then(|_| write_json(&row_dir.join("resolved_config.json"), &cfg))
            .and_then(|_| match &result {
                Ok(r) => write_run(&row_dir, r),
                Err(SearchError::Step { partial, .. }) => {
                    write_trace(&row_dir.join("trace.csv"), &searchable_names(&cfg, &data)?, partial)
                }
                Err(_) => Ok(()),
            });
        let mut row = SweepRow::from_result(key, seed, result);
        if let Err(e) = written {
            row.error.get_or_insert(e.to_string());
        }
        log::info!("row {i}: {} seed {} accuracy {:.4}", row.key, row.seed, row.accuracy);
        row
    });
    let path = dir.join("results.csv");
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    w.write_record(["key", "seed", "cost_target_gbops", "achieved_gbops", "accuracy", "archs", "error"])
        .map_err(|e| io_err(&path, e))?;
    for r in &rows {
        w.write_record([
            r.key.clone(),
            r.seed.to_string(),
            r.cost_target_gbops.to_string(),
            r.achieved_gbops.to_string(),
            r.accuracy.to_string(),
            r.archs.clone(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} of {} sweep rows failed; see {}",
            rows.len(),
            path.display()
        )));
    }
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AnalyzeKind {
    Switching,
    Clipping,
    Entropy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PercentileGrid {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub synth: SynthSpec,
    pub k1: Vec<u8>,
    pub k2: u8,
    pub threshold: ThresholdRule,
    pub clip_formats: Vec<NumericFormat>,
    pub percentiles: PercentileGrid,
    /// Trace CSV for the entropy analysis.
    pub trace: Option<PathBuf>,
    pub seed: u64,
}

impl Default for PercentileGrid {
    fn default() -> Self {
        Self {
            low: 1.0,
            high: 100.0,
            count: 100,
        }
    }
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            k1: (4..=8).collect(),
            k2: 8,
            threshold: ThresholdRule::default(),
            clip_formats: vec![NumericFormat::int(4).expect("valid"), NumericFormat::int(8).expect("valid")],
            percentiles: PercentileGrid::default(),
            trace: None,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct SwitchingReport<'a> {
    k2: u8,
    synth: &'a SynthSpec,
    threshold: ThresholdRule,
    points: &'a [SweepPoint],
    fit: Option<ExpFit>,
    fit_error: Option<String>,
}

#[derive(Serialize)]
struct ClippingReport<'a> {
    synth: &'a SynthSpec,
    optimal_percentile: BTreeMap<String, f64>,
    curves: &'a [ClippingResult],
}

#[derive(Serialize)]
struct EntropyReport {
    trace: PathBuf,
    steps: usize,
    spearman: f64,
}

fn write_points(path: &Path, x_name: &str, points: &[SweepPoint]) -> Result<(), CliError> {
    analysis::write_sweep_csv(create_file(path)?, x_name, points).map_err(|e| io_err(path, e))
}

pub fn analyze(
    ctx: &Ctx,
    kind: AnalyzeKind,
    config: Option<&Path>,
    trace: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<PathBuf, CliError> {
    let mut cfg: AnalyzeConfig = overrides::load(config, sets, seed.map(|s| ("seed", s)))?;
    if let Some(t) = trace {
        cfg.trace = Some(t.to_path_buf());
    }
    cfg.synth.validate()?;
    let entropy_trace = match kind {
        AnalyzeKind::Entropy => Some(
            cfg.trace
                .clone()
                .ok_or_else(|| CliError::Config("entropy analysis needs --trace".into()))?,
        ),
        _ => None,
    };
    match kind {
        AnalyzeKind::Switching => {
            let points = analysis::switching_sweep(&cfg.k1, cfg.k2, &cfg.synth, cfg.threshold, cfg.seed)?;
            let dir = rundir::create(&ctx.out_root, "analyze-switching", cfg.seed)?;
            write_json(&dir.join("resolved_config.json"), &cfg)?;
            write_points(&dir.join("switching.csv"), "k1", &points)?;
            let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
            let ys: Vec<f64> = points.iter().map(|p| p.mean).collect();
            let (fit, fit_error) = match analysis::fit_exponential(&xs, &ys) {
                Ok(f) => (Some(f), None),
                Err(AnalysisError::FitFailed { best, .. }) => (Some(best), Some("fit did not converge".into())),
                Err(e) => (None, Some(e.to_string())),
            };
            write_json(
                &dir.join("switching.json"),
                &SwitchingReport {
                    k2: cfg.k2,
                    synth: &cfg.synth,
                    threshold: cfg.threshold,
                    points: &points,
                    fit,
                    fit_error: fit_error.clone(),
                },
            )?;
            match fit_error {
                Some(e) => Err(CliError::Runtime(format!("exponential fit: {e} ({})", dir.display()))),
                None => Ok(dir),
            }
        }
        AnalyzeKind::Clipping => {
            if cfg.clip_formats.is_empty() {
                return Err(CliError::Config("clip_formats is empty".into()));
            }
            let p = &cfg.percentiles;
            let grid = analysis::percentile_grid(p.low, p.high, p.count);
            let curves = cfg
                .clip_formats
                .iter()
                .map(|&f| analysis::clipping_sweep(f, &cfg.synth, &grid, cfg.seed))
                .collect::<Result<Vec<_>, _>>()?;
            let dir = rundir::create(&ctx.out_root, "analyze-clipping", cfg.seed)?;
            write_json(&dir.join("resolved_config.json"), &cfg)?;
            for c in &curves {
                write_points(&dir.join(format!("clipping_{}.csv", c.format)), "percentile", &c.curve)?;
            }
            let optimal_percentile = curves.iter().map(|c| (c.format.to_string(), c.optimal_percentile)).collect();
            write_json(
                &dir.join("clipping.json"),
                &ClippingReport {
                    synth: &cfg.synth,
                    optimal_percentile,
                    curves: &curves,
                },
            )?;
            Ok(dir)
        }
        AnalyzeKind::Entropy => {
            let path = entropy_trace.expect("checked above");
            let (entropy, switching) = read_entropy_series(&path)?;
            let rho = analysis::entropy_switch_correlation_raw(&entropy, &switching)?;
            let dir = rundir::create(&ctx.out_root, "analyze-entropy", cfg.seed)?;
            write_json(&dir.join("resolved_config.json"), &cfg)?;
            let csv_path = dir.join("entropy.csv");
            let mut w = csv::Writer::from_writer(create_file(&csv_path)?);
            w.write_record(["entropy", "switch_rms"]).map_err(|e| io_err(&csv_path, e))?;
            for (e, s) in entropy.iter().zip(&switching) {
                w.write_record([e.to_string(), s.to_string()]).map_err(|e| io_err(&csv_path, e))?;
            }
            w.flush().map_err(|e| io_err(&csv_path, e))?;
            write_json(
                &dir.join("entropy.json"),
                &EntropyReport {
                    trace: path,
                    steps: entropy.len(),
                    spearman: rho,
                },
            )?;
            Ok(dir)
        }
    }
}

/// Entropy and switching columns of the policy-update steps of a trace CSV.
fn read_entropy_series(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let file = File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let headers = r.headers().map_err(|e| io_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("{}: no `{name}` column", path.display())))
    };
    let (ce, cs, cu) = (col("entropy")?, col("switch_rms")?, col("policy_updated")?);
    let (mut entropy, mut switching) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let num = |c: usize| -> Result<f64, CliError> {
            rec[c]
                .parse()
                .map_err(|_| CliError::Config(format!("{} row {}: bad number `{}`", path.display(), i + 1, &rec[c])))
        };
        if num(cu)? != 0.0 {
            entropy.push(num(ce)?);
            switching.push(num(cs)?);
        }
    }
    Ok((entropy, switching))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LayerAssignment {
    Format(NumericFormat),
    Choice(ArchChoice),
}

impl LayerAssignment {
    fn choice(&self) -> ArchChoice {
        match self {
            LayerAssignment::Format(f) => ArchChoice::new(*f),
            LayerAssignment::Choice(c) => *c,
        }
    }
}

/// Per-layer choices for a cost report. Layers not listed take `default`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assignment {
    #[serde(default)]
    pub default: Option<NumericFormat>,
    #[serde(default)]
    pub layers: BTreeMap<String, LayerAssignment>,
}

#[derive(Debug, Serialize)]
pub struct CostLine {
    pub name: String,
    pub macs: u64,
    pub choice: String,
    pub gbops: f64,
}

#[derive(Debug, Serialize)]
pub struct CostReport {
    pub model: String,
    pub layers: Vec<CostLine>,
    pub total_gbops: f64,
}

fn load_any_manifest(name_or_path: &str) -> Result<ModelManifest, CliError> {
    match ModelManifest::bundled(name_or_path) {
        Ok(m) => Ok(m),
        Err(ManifestError::UnknownBundled(_)) if Path::new(name_or_path).exists() => {
            Ok(costmodel::load_manifest(name_or_path)?)
        }
        Err(ManifestError::UnknownBundled(_)) => Err(CliError::Config(format!(
            "`{name_or_path}` is neither a bundled manifest (resnet18, mobilenetv2) nor a file"
        ))),
        Err(e) => Err(e.into()),
    }
}

pub fn resolve_assignment(manifest: &ModelManifest, a: &Assignment) -> Result<Vec<ArchChoice>, CliError> {
    for name in a.layers.keys() {
        if manifest.layer(name).is_none() {
            return Err(CliError::Config(format!("assignment names unknown layer `{name}`")));
        }
    }
    manifest
        .layers
        .iter()
        .map(|l| match (a.layers.get(&l.name), a.default, l.fixed_format) {
            (Some(x), _, _) => Ok(x.choice()),
            (None, Some(f), _) => Ok(ArchChoice::new(f)),
            (None, None, Some(f)) if !l.searchable => Ok(ArchChoice::new(f)),
            _ => Err(CliError::Config(format!("assignment does not cover layer `{}`", l.name))),
        })
        .collect()
}

pub fn cost_report(manifest: &ModelManifest, archs: &[ArchChoice]) -> Result<CostReport, CliError> {
    let total = costmodel::model_cost(archs, manifest)?;
    let layers = manifest
        .layers
        .iter()
        .zip(archs)
        .map(|(l, a)| {
            let a = match (l.searchable, l.fixed_format) {
                (false, Some(format)) => ArchChoice { format, ..*a },
                _ => *a,
            };
            Ok(CostLine {
                name: l.name.clone(),
                macs: l.resolve_macs(&a)?,
                choice: a.to_string(),
                gbops: costmodel::layer_cost(&a, l)? / GIGA,
            })
        })
        .collect::<Result<Vec<_>, ManifestError>>()?;
    Ok(CostReport {
        model: manifest.model_name.clone(),
        layers,
        total_gbops: total / GIGA,
    })
}

fn print_report(report: &CostReport, json: bool) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    let res = if json {
        serde_json::to_writer_pretty(&mut out, report)
            .map_err(std::io::Error::other)
            .and_then(|_| writeln!(out))
    } else {
        (|| {
            writeln!(out, "{:<28} {:>14} {:>10} {:>12}", "layer", "macs", "choice", "gbops")?;
            for l in &report.layers {
                writeln!(out, "{:<28} {:>14} {:>10} {:>12.6}", l.name, l.macs, l.choice, l.gbops)?;
            }
            writeln!(out, "{:<28} {:>14} {:>10} {:>12.6}", "total", "", "", report.total_gbops)
        })()
    };
    res.map_err(|e| CliError::Runtime(format!("stdout: {e}")))
}

pub fn cost(manifest: &str, uniform: Option<&str>, assignment: Option<&Path>, json: bool) -> Result<(), CliError> {
    let manifest = load_any_manifest(manifest)?;
    let a = match (uniform, assignment) {
        (Some(f), None) => Assignment {
            default: Some(f.parse().map_err(|e| CliError::Config(format!("--uniform: {e}")))?),
            layers: BTreeMap::new(),
        },
        (None, Some(path)) => overrides::load(Some(path), &[], None)?,
        _ => return Err(CliError::Config("give exactly one of --uniform or --assignment".into())),
    };
    let archs = resolve_assignment(&manifest, &a)?;
    print_report(&cost_report(&manifest, &archs)?, json)
}

#[derive(Serialize)]
struct ServeInfo {
    layers: Vec<search::ServedLayer>,
    parameters: usize,
    cost_gbops: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    validation_accuracy: Option<f64>,
}

pub fn serve_info(run_dir: &Path, evaluate: bool, json: bool) -> Result<(), CliError> {
    let served_path = run_dir.join("served_config.json");
    let served: ServedConfig = overrides::load(Some(&served_path), &[], None)?;
    let weights = run_dir.join("weights.bin");
    let file = File::open(&weights).map_err(|e| io_err(&weights, e))?;
    let model = served.load(BufReader::new(file))?;
    let manifest = model.network.manifest();
    let cost = costmodel::model_cost(&model.archs, &manifest)?;
    let validation_accuracy = if evaluate {
        let cfg: SearchConfig = overrides::load(Some(&run_dir.join("resolved_config.json")), &[], None)?;
        let data = cfg.data.load().map_err(SearchError::from)?;
        let split = cfg.batch_plan().split(data.len()).map_err(SearchError::from)?;
        Some(model.evaluate(&data, &split.validation, cfg.trainer.eval_batch_size)?)
    } else {
        None
    };
    let info = ServeInfo {
        layers: served.layers,
        parameters: model.network.parameter_count(),
        cost_gbops: cost / GIGA,
        validation_accuracy,
    };
    let mut out = std::io::stdout().lock();
    let res = if json {
        serde_json::to_writer_pretty(&mut out, &info)
            .map_err(std::io::Error::other)
            .and_then(|_| writeln!(out))
    } else {
        (|| {
            writeln!(out, "{:<12} {:>10} {:>6} {:>6} {:>12} {:>12}", "layer", "format", "width", "kernel", "act_thr", "wt_thr")?;
            for l in &info.layers {
                let kernel = l.kernel.map(|k| k.to_string()).unwrap_or_else(|| "-".into());
                writeln!(
                    out,
                    "{:<12} {:>10} {:>6} {:>6} {:>12.6} {:>12.6}",
                    l.name, l.format.to_string(), l.width_mult, kernel, l.activation_threshold, l.weight_threshold
                )?;
            }
            writeln!(out, "parameters {}", info.parameters)?;
            writeln!(out, "cost {:.6} GBOPs", info.cost_gbops)?;
            if let Some(a) = info.validation_accuracy {
                writeln!(out, "validation accuracy {a:.4}")?;
            }
            Ok(())
        })()
    };
    res.map_err(|e: std::io::Error| CliError::Runtime(format!("stdout: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_coverage() {
        let m = ModelManifest::bundled("resnet18").unwrap();
        let none = Assignment {
            default: None,
            layers: BTreeMap::new(),
        };
        assert!(matches!(resolve_assignment(&m, &none), Err(CliError::Config(_))));
        let bad: Assignment = serde_json::from_str(r#"{"default":"INT8","layers":{"nope":"BF16"}}"#).unwrap();
        assert!(resolve_assignment(&m, &bad).is_err());
        let uniform: Assignment = serde_json::from_str(r#"{"default":"INT8"}"#).unwrap();
        let archs = resolve_assignment(&m, &uniform).unwrap();
        let r = cost_report(&m, &archs).unwrap();
        let sum: f64 = r.layers.iter().map(|l| l.gbops).sum();
        assert!((sum - r.total_gbops).abs() < 1e-9 * r.total_gbops);
    }

    #[test]
    fn analyze_defaults_cover_k1_four_to_eight() {
        let cfg = AnalyzeConfig::default();
        assert_eq!(cfg.k1, vec![4, 5, 6, 7, 8]);
        assert_eq!(cfg.synth.trials, 1000);
    }
}
