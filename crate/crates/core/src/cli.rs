//! Run configuration, validation, orchestration and result files.
//!
//! Configuration is JSON:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "model": {"preset": "gsobol"},
//!   "subsets": ["singletons", {"explicit": [[2, 9], [9, 10]]}],
//!   "sampling": {"m": 10000, "generator": "sobol", "seed": 1},
//!   "output": {"dir": "out", "format": "both"}
//! }
//! ```
//!
//! `model` is a preset name or a full model description; `blocks` may
//! override the model's own input structure and is required for expression
//! models.

use crate::depmodel::{CopulaSpec, DmFamily, ScalarTransform};
use crate::empirical::{fit_quantile_dm, rejection_sample, ConstrainedSampler, Feature, FitOptions, Region};
use crate::error::{Error, Result};
use crate::margins::{Margin, MarginSpec};
use crate::models::{parse_expression, Expr, ModelSpec};
use crate::representations::{BlockStructure, DependentBlock};
use crate::sensitivity::{run_analysis, AnalysisResult, EstimationSettings};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

pub const SCHEMA_VERSION: u64 = 1;
/// Smallest `m` accepted for interval estimates.
pub const MIN_ROWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
    Both,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ModelEntry {
    Preset { preset: String },
    Spec(ModelSpec),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum SubsetRequest {
    Named(String),
    UpTo { up_to: usize },
    Explicit { explicit: Vec<Vec<usize>> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlocksConfig {
    #[serde(default)]
    independent: Vec<IndependentInput>,
    #[serde(default)]
    dependent: Vec<DependentConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndependentInput {
    index: usize,
    margin: MarginSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DependentConfig {
    indices: Vec<usize>,
    model: FamilyConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MapConfig {
    Named(String),
    Affine { affine: [f64; 2] },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintConfig {
    /// Margins of the unconstrained draw.
    margins: Vec<MarginSpec>,
    /// Constraint components `c_k(x)` as expressions.
    map: Vec<String>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    #[serde(default = "default_fit_rows")]
    rows: usize,
    #[serde(default)]
    seed: u64,
}

fn default_fit_rows() -> usize {
    10_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    #[serde(default)]
    levels: Option<usize>,
    #[serde(default)]
    features: Option<Vec<Feature>>,
    #[serde(default)]
    ridge: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum FamilyConfig {
    GaussianCopula {
        correlation: Vec<Vec<f64>>,
        margins: Vec<MarginSpec>,
    },
    StudentCopula {
        nu: f64,
        correlation: Vec<Vec<f64>>,
        margins: Vec<MarginSpec>,
    },
    Simplex,
    Transformed {
        base: Box<FamilyConfig>,
        maps: Vec<MapConfig>,
        #[serde(default)]
        abs_symmetric: bool,
    },
    /// Pairs known from a sample (given, or drawn under a constraint).
    Empirical {
        #[serde(default)]
        sample: Option<Vec<[f64; 2]>>,
        #[serde(default)]
        constrained: Option<ConstraintConfig>,
        #[serde(default)]
        fit: Option<FitConfig>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputConfig {
    #[serde(default)]
    dir: Option<PathBuf>,
    #[serde(default)]
    format: Option<OutputFormat>,
}

/// A validated run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub structure: BlockStructure,
    pub subsets: Vec<Vec<usize>>,
    pub settings: EstimationSettings,
    pub out_dir: PathBuf,
    pub format: OutputFormat,
}

fn preset(name: &str) -> Option<ModelSpec> {
    Some(match name {
        "linear_gaussian" => ModelSpec::linear_reference(),
        "portfolio" => ModelSpec::portfolio_reference(),
        "gsobol" => ModelSpec::gsobol_reference(),
        _ => return None,
    })
}

fn section<T: serde::de::DeserializeOwned>(root: &Value, key: &str, errors: &mut Vec<String>) -> Option<T> {
    match root.get(key) {
        None => None,
        Some(v) => match T::deserialize(v) {
            Ok(t) => Some(t),
            Err(e) => {
                errors.push(format!("{key}: {e}"));
                None
            }
        },
    }
}

fn map_transform(m: &MapConfig) -> Result<ScalarTransform> {
    match m {
        MapConfig::Named(n) => match n.as_str() {
            "identity" => Ok(ScalarTransform::identity()),
            "exp" => Ok(ScalarTransform::exp()),
            "log" => Ok(ScalarTransform::invertible("log", f64::ln, f64::exp)),
            "cube" => Ok(ScalarTransform::invertible("cube", |x| x * x * x, f64::cbrt)),
            "square" => Ok(ScalarTransform::new("square", |x| x * x, None)),
            "abs" => Ok(ScalarTransform::new("abs", f64::abs, None)),
            other => Err(Error::Config(format!(
                "unknown map '{other}' (expected identity, exp, log, cube, square, abs or {{\"affine\": [a, b]}})"
            ))),
        },
        MapConfig::Affine { affine: [a, b] } => {
            if *b == 0.0 || !a.is_finite() || !b.is_finite() {
                return Err(Error::Config("affine map needs finite a and nonzero b".into()));
            }
            Ok(ScalarTransform::affine(*a, *b))
        }
    }
}

fn fit_options(fit: &Option<FitConfig>) -> Result<FitOptions> {
    let mut o = FitOptions::default();
    if let Some(f) = fit {
        if let Some(n) = f.levels {
            if n == 0 {
                return Err(Error::Config("fit.levels must be positive".into()));
            }
            o.levels = crate::empirical::equispaced_levels(n);
        }
        if let Some(feat) = &f.features {
            if feat.is_empty() {
                return Err(Error::Config("fit.features must not be empty".into()));
            }
            o.features = feat.clone();
        }
        if let Some(r) = f.ridge {
            o.ridge = r;
        }
    }
    Ok(o)
}

fn constrained_sample(c: &ConstraintConfig) -> Result<Vec<[f64; 2]>> {
    if c.margins.len() != 2 {
        return Err(Error::Config("constrained empirical blocks take exactly 2 margins".into()));
    }
    if c.map.len() != c.lo.len() || c.map.len() != c.hi.len() || c.map.is_empty() {
        return Err(Error::Config("constraint map, lo and hi must have the same nonzero length".into()));
    }
    let exprs: Vec<Expr> = c.map.iter().map(|s| parse_expression(s)).collect::<Result<_>>()?;
    if let Some(e) = exprs.iter().find(|e| e.max_variable() > 2) {
        return Err(Error::Config(format!("constraint '{e}' references inputs beyond x2")));
    }
    let margins = c.margins.iter().cloned().map(Margin::new).collect::<Result<Vec<_>>>()?;
    let region = Region::boxed(
        move |x, out| {
            for (o, e) in out.iter_mut().zip(&exprs) {
                *o = e.eval(x).unwrap_or(f64::NAN);
            }
        },
        c.lo.clone(),
        c.hi.clone(),
    );
    let sampler = ConstrainedSampler::independent(margins, region);
    let s = rejection_sample(&sampler, c.rows, c.seed)?;
    Ok(s.data.chunks(2).map(|r| [r[0], r[1]]).collect())
}

fn build_family(cfg: &FamilyConfig) -> Result<DmFamily> {
    Ok(match cfg {
        FamilyConfig::GaussianCopula { correlation, margins } => DmFamily::Copula {
            copula: CopulaSpec::gaussian(correlation.clone())?,
            margins: margins.clone(),
        },
        FamilyConfig::StudentCopula { nu, correlation, margins } => DmFamily::Copula {
            copula: CopulaSpec::student(*nu, correlation.clone())?,
            margins: margins.clone(),
        },
        FamilyConfig::Simplex => DmFamily::Simplex,
        FamilyConfig::Transformed {
            base,
            maps,
            abs_symmetric,
        } => DmFamily::Transformed {
            base: Box::new(build_family(base)?),
            maps: maps.iter().map(map_transform).collect::<Result<_>>()?,
            abs_symmetric: *abs_symmetric,
        },
        FamilyConfig::Empirical {
            sample,
            constrained,
            fit,
        } => {
            let pairs = match (sample, constrained) {
                (Some(s), None) => s.clone(),
                (None, Some(c)) => constrained_sample(c)?,
                _ => {
                    return Err(Error::Config(
                        "empirical block needs exactly one of 'sample' or 'constrained'".into(),
                    ))
                }
            };
            let opts = fit_options(fit)?;
            let x0: Vec<f64> = pairs.iter().map(|p| p[0]).collect();
            let x1: Vec<f64> = pairs.iter().map(|p| p[1]).collect();
            let c0 = fit_quantile_dm(&x0, &x1, &opts)?;
            let c1 = fit_quantile_dm(&x1, &x0, &opts)?;
            DmFamily::Quantile {
                margins: [
                    Margin::new(MarginSpec::Empirical { sample: x0 })?,
                    Margin::new(MarginSpec::Empirical { sample: x1 })?,
                ],
                curves: [Arc::new(c0), Arc::new(c1)],
            }
        }
    })
}

/// Builds a dependency-model family from its JSON description (the
/// `model` object of a dependent block).
pub fn family_from_json(text: &str) -> Result<DmFamily> {
    let cfg: FamilyConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("block model: {e}")))?;
    build_family(&cfg)
}

fn check_family_dims(cfg: &FamilyConfig, k: usize, errors: &mut Vec<String>, path: &str) {
    let want = |what: &str, got: usize, errors: &mut Vec<String>| {
        if got != k {
            errors.push(format!("{path}: {what} has {got} entries for a block of {k} inputs"));
        }
    };
    match cfg {
        FamilyConfig::GaussianCopula { correlation, margins } | FamilyConfig::StudentCopula { correlation, margins, .. } => {
            want("correlation", correlation.len(), errors);
            want("margins", margins.len(), errors);
        }
        FamilyConfig::Simplex => want("simplex", 2, errors),
        FamilyConfig::Transformed { base, maps, .. } => {
            want("maps", maps.len(), errors);
            check_family_dims(base, k, errors, path);
        }
        FamilyConfig::Empirical { .. } => want("empirical", 2, errors),
    }
}

fn build_structure(cfg: &BlocksConfig, errors: &mut Vec<String>) -> Option<BlockStructure> {
    let mut ok = true;
    let mut dependent = Vec::new();
    for (b, blk) in cfg.dependent.iter().enumerate() {
        let path = format!("blocks.dependent[{b}]");
        let before = errors.len();
        check_family_dims(&blk.model, blk.indices.len(), errors, &path);
        if errors.len() > before {
            ok = false;
            continue;
        }
        match build_family(&blk.model) {
            Ok(family) => dependent.push(DependentBlock {
                indices: blk.indices.clone(),
                family,
            }),
            Err(e) => {
                errors.push(format!("{path}: {e}"));
                ok = false;
            }
        }
    }
    for (k, inp) in cfg.independent.iter().enumerate() {
        if let Err(e) = Margin::new(inp.margin.clone()) {
            errors.push(format!("blocks.independent[{k}]: {e}"));
            ok = false;
        }
    }
    if !ok {
        return None;
    }
    let independent = cfg.independent.iter().map(|i| (i.index, i.margin.clone())).collect();
    match BlockStructure::new(independent, dependent) {
        Ok(s) => Some(s),
        Err(e) => {
            errors.push(format!("blocks: {e}"));
            None
        }
    }
}

fn expand_subsets(reqs: &[SubsetRequest], d: usize, errors: &mut Vec<String>) -> Vec<Vec<usize>> {
    let combos = |k: usize| -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = Vec::new();
        fn rec(start: usize, d: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..=d {
                cur.push(i);
                rec(i + 1, d, k, cur, out);
                cur.pop();
            }
        }
        rec(1, d, k, &mut cur, &mut out);
        out
    };
    let mut all = Vec::new();
    for r in reqs {
        match r {
            SubsetRequest::Named(n) => match n.as_str() {
                "singletons" => all.extend(combos(1)),
                "pairs" => all.extend(combos(2)),
                "all" => (1..=d).for_each(|k| all.extend(combos(k))),
                other => errors.push(format!("subsets: unknown request '{other}' (singletons, pairs, all)")),
            },
            SubsetRequest::UpTo { up_to } => {
                if *up_to == 0 || *up_to > d {
                    errors.push(format!("subsets: up_to must lie in 1..={d}, got {up_to}"));
                }
                (1..=(*up_to).min(d)).for_each(|k| all.extend(combos(k)));
            }
            SubsetRequest::Explicit { explicit } => {
                for u in explicit {
                    if u.is_empty() {
                        errors.push("subsets: empty subset".into());
                        continue;
                    }
                    let mut bad = false;
                    for &i in u {
                        if i == 0 || i > d {
                            errors.push(format!("subsets: {u:?}: index {i} out of range 1..={d}"));
                            bad = true;
                        }
                    }
                    if u.iter().collect::<BTreeSet<_>>().len() != u.len() {
                        errors.push(format!("subsets: {u:?} repeats an index"));
                        bad = true;
                    }
                    if !bad {
                        all.push(u.clone());
                    }
                }
            }
        }
    }
    let mut seen = BTreeSet::new();
    all.into_iter()
        .map(|mut u| {
            u.sort_unstable();
            u
        })
        .filter(|u| seen.insert(u.clone()))
        .collect()
}

/// Parses and cross-checks a configuration, collecting every problem.
pub fn validate_config(text: &str) -> std::result::Result<RunConfig, Vec<String>> {
    let root: Value = serde_json::from_str(text).map_err(|e| vec![format!("invalid JSON: {e}")])?;
    let mut errors = Vec::new();
    let Some(obj) = root.as_object() else {
        return Err(vec!["configuration must be a JSON object".into()]);
    };
    for key in obj.keys() {
        if !["schema_version", "model", "blocks", "subsets", "sampling", "output"].contains(&key.as_str()) {
            errors.push(format!("unknown top-level key '{key}'"));
        }
    }
    match obj.get("schema_version").and_then(Value::as_u64) {
        Some(SCHEMA_VERSION) => {}
        Some(v) => errors.push(format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})")),
        None => errors.push("schema_version is required".into()),
    }

    let model: Option<ModelSpec> = match section::<ModelEntry>(&root, "model", &mut errors) {
        Some(ModelEntry::Preset { preset: p }) => match preset(&p) {
            Some(m) => Some(m),
            None => {
                errors.push(format!("model: unknown preset '{p}' (linear_gaussian, portfolio, gsobol)"));
                None
            }
        },
        Some(ModelEntry::Spec(m)) => match m.validate() {
            Ok(()) => Some(m),
            Err(e) => {
                errors.push(format!("model: {e}"));
                None
            }
        },
        None => {
            if root.get("model").is_none() {
                errors.push("model is required".into());
            }
            None
        }
    };

    let blocks: Option<BlocksConfig> = section(&root, "blocks", &mut errors);
    let structure = match (&blocks, &model) {
        (Some(b), _) => build_structure(b, &mut errors),
        (None, Some(m)) => match m.default_structure() {
            Ok(Some(s)) => Some(s),
            Ok(None) => {
                errors.push("blocks: required for expression models".into());
                None
            }
            Err(e) => {
                errors.push(format!("model: {e}"));
                None
            }
        },
        (None, None) => None,
    };
    if let (Some(m), Some(s)) = (&model, &structure) {
        if m.input_dim() != s.d() {
            errors.push(format!("model takes {} inputs but blocks define {}", m.input_dim(), s.d()));
        }
    }

    let d = structure.as_ref().map(|s| s.d()).or(model.as_ref().map(|m| m.input_dim()));
    let subsets = match section::<OneOrMany<SubsetRequest>>(&root, "subsets", &mut errors) {
        Some(r) => {
            let reqs = match r {
                OneOrMany::One(x) => vec![x],
                OneOrMany::Many(v) => v,
            };
            match d {
                Some(d) => expand_subsets(&reqs, d, &mut errors),
                None => Vec::new(),
            }
        }
        None => {
            if root.get("subsets").is_none() {
                errors.push("subsets is required".into());
            }
            Vec::new()
        }
    };
    if subsets.is_empty() && root.get("subsets").is_some() {
        errors.push("subsets: no subsets requested".into());
    }

    let settings: Option<EstimationSettings> = section(&root, "sampling", &mut errors);
    if root.get("sampling").is_none() {
        errors.push("sampling is required".into());
    }
    if let Some(s) = &settings {
        if s.m < MIN_ROWS {
            errors.push(format!("sampling: m = {} is below the minimum of {MIN_ROWS}", s.m));
        }
        if s.big_m() < 2 {
            errors.push("sampling: big_m must be at least 2".into());
        }
    }
    let output: Option<OutputConfig> = section(&root, "output", &mut errors);

    if !errors.is_empty() {
        return Err(errors);
    }
    let output = output.unwrap_or(OutputConfig { dir: None, format: None });
    Ok(RunConfig {
        model: model.expect("validated"),
        structure: structure.expect("validated"),
        subsets,
        settings: settings.expect("validated"),
        out_dir: output.dir.unwrap_or_else(|| PathBuf::from("dgsi-out")),
        format: output.format.unwrap_or(OutputFormat::Both),
    })
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub format: Option<OutputFormat>,
}

/// Result of [`run`]: the analysis and the audit record.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub analysis: AnalysisResult,
    pub audit: Value,
    pub files: Vec<PathBuf>,
}

/// Audit record of a finished analysis.
pub fn audit_record(config: &RunConfig, analysis: &AnalysisResult, wall_seconds: f64, threads: usize) -> Value {
    let plan = &analysis.plan;
    let labels: Vec<Value> = analysis
        .routing
        .labels
        .iter()
        .zip(&analysis.routing.serves)
        .map(|(l, serves)| {
            json!({
                "representation": plan.canonical_index(l),
                "name": format!("g{}", plan.canonical_index(l) + 1),
                "permutations": l.0.iter().enumerate().map(|(b, &k)| plan.blocks[b].permutations[k].clone()).collect::<Vec<_>>(),
                "serves": serves,
            })
        })
        .collect();
    let routes: Vec<Value> = analysis
        .routing
        .routes
        .iter()
        .map(|r| {
            json!({
                "subset": r.subset,
                "representation": r.representation,
                "name": format!("g{}", r.representation + 1),
                "conditioning": r.conditioning.variables,
            })
        })
        .collect();
    json!({
        "schema_version": SCHEMA_VERSION,
        "model": config.model,
        "d": config.structure.d(),
        "blocks": config.structure.dependent().iter().map(|b| json!({"indices": b.indices, "model": b.family.name()})).collect::<Vec<_>>(),
        "independent": config.structure.independent(),
        "r_min": plan.r_min().to_string().parse::<u64>().unwrap_or(u64::MAX),
        "representations_built": analysis.representations_built(),
        "permutation_plan": plan,
        "representations": labels,
        "routes": routes,
        "sigma_representation": analysis.sigma_representation,
        "sampling": {
            "generator": config.settings.generator,
            "seed": config.settings.seed,
            "scramble": config.settings.sample_plan(analysis.layout.clone()).scramble,
            "m": config.settings.m,
            "big_m": config.settings.big_m(),
        },
        "columns": analysis.layout.columns,
        "threads": threads,
        "wall_time_seconds": wall_seconds,
    })
}

/// Runs a validated configuration and writes the result files.
pub fn run(mut config: RunConfig, overrides: &Overrides) -> Result<RunOutcome> {
    if let Some(s) = overrides.seed {
        config.settings.seed = s;
    }
    if let Some(o) = &overrides.out {
        config.out_dir = o.clone();
    }
    if let Some(f) = overrides.format {
        config.format = f;
    }
    let start = Instant::now();
    let model = config.model.build()?;
    let analysis = run_analysis(&config.structure, model, &config.subsets, &config.settings)?;
    let wall = start.elapsed().as_secs_f64();
    let threads = rayon::current_num_threads();
    let audit = audit_record(&config, &analysis, wall, threads);
    let files = write_outputs(&config.out_dir, config.format, &analysis, &audit)?;
    Ok(RunOutcome { analysis, audit, files })
}

fn write_outputs(dir: &Path, format: OutputFormat, analysis: &AnalysisResult, audit: &Value) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        files.push(p);
        Ok(())
    };
    if matches!(format, OutputFormat::Csv | OutputFormat::Both) {
        put("indices.csv", analysis.report.to_csv())?;
    }
    if matches!(format, OutputFormat::Json | OutputFormat::Both) {
        put("indices.json", analysis.report.to_json())?;
    }
    put("audit.json", serde_json::to_string_pretty(audit).expect("audit serializes"))?;
    Ok(files)
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Parameter(_) => 2,
        Error::DegenerateVariance { .. } => 3,
        Error::Evaluation { .. } => 4,
        _ => 1,
    }
}

#[derive(Debug, clap::Parser)]
#[command(name = "dgsi", version, about = "Dependent generalized sensitivity indices")]
pub struct Args {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,
}

/// Entry point behind the binary; returns the exit code.
pub fn main_with(args: Args) -> i32 {
    if let Some(t) = args.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return 2;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot set up {t} threads: {e}");
            return 1;
        }
    }
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return 2;
        }
    };
    let config = match validate_config(&text) {
        Ok(c) => c,
        Err(errs) => {
            for e in errs {
                eprintln!("config error: {e}");
            }
            return 2;
        }
    };
    let overrides = Overrides {
        out: args.out,
        seed: args.seed,
        threads: args.threads,
        format: args.format,
    };
    match run(config, &overrides) {
        Ok(outcome) => {
            let a = &outcome.audit;
            eprintln!(
                "R_min = {}, representations built = {}, {} subsets, {:.2} s",
                a["r_min"], a["representations_built"], outcome.analysis.report.entries.len(), a["wall_time_seconds"]
            );
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gsobol_pairs_text() -> String {
        r#"{
            "schema_version": 1,
            "model": {"preset": "gsobol"},
            "subsets": ["singletons", {"explicit": [[1,2],[1,3],[1,9],[1,10],[2,3],[2,9],[2,10],[3,9],[3,10],[9,10]]}],
            "sampling": {"m": 1000, "generator": "sobol", "seed": 7}
        }"#
        .to_string()
    }

    #[test]
    fn valid_preset() {
        let c = validate_config(&gsobol_pairs_text()).unwrap();
        assert_eq!(c.subsets.len(), 20);
        assert_eq!(c.structure.d(), 10);
        assert_eq!(c.format, OutputFormat::Both);
    }

    #[test]
    fn errors_are_collected() {
        let text = r#"{
            "schema_version": 2,
            "model": {"preset": "gsobol"},
            "subsets": {"explicit": [[11], [1, 1]]},
            "sampling": {"m": 10},
            "extra": 0
        }"#;
        let errs = validate_config(text).unwrap_err();
        let joined = errs.join("\n");
        assert!(joined.contains("schema_version 2"), "{joined}");
        assert!(joined.contains("index 11 out of range"), "{joined}");
        assert!(joined.contains("repeats"), "{joined}");
        assert!(joined.contains("below the minimum"), "{joined}");
        assert!(joined.contains("unknown top-level key 'extra'"), "{joined}");
    }

    #[test]
    fn indefinite_copula_is_reported() {
        let text = r#"{
            "schema_version": 1,
            "model": {"kind": "expression", "inputs": 2, "outputs": ["x1 + x2"]},
            "blocks": {"dependent": [{"indices": [1, 2], "model": {"type": "gaussian_copula",
                "correlation": [[1, 1.1], [1.1, 1]],
                "margins": [{"family": "uniform", "a": 0, "b": 1}, {"family": "uniform", "a": 0, "b": 1}]}}]},
            "subsets": "singletons",
            "sampling": {"m": 200}
        }"#;
        let errs = validate_config(text).unwrap_err();
        assert!(errs.iter().any(|e| e.contains("not positive definite")), "{errs:?}");
    }

    #[test]
    fn empirical_block_from_constraint() {
        let text = r#"{
            "schema_version": 1,
            "model": {"kind": "expression", "inputs": 3, "outputs": ["x1 + 2*x2 + x3"]},
            "blocks": {
                "independent": [{"index": 3, "margin": {"family": "normal", "mu": 0, "sigma": 1}}],
                "dependent": [{"indices": [1, 2], "model": {"type": "empirical",
                    "constrained": {"margins": [{"family": "uniform", "a": 0, "b": 1}, {"family": "uniform", "a": 0, "b": 1}],
                                    "map": ["x1 + x2"], "lo": [-1], "hi": [1], "rows": 2000, "seed": 3},
                    "fit": {"levels": 19, "features": ["one", "x"]}}}]
            },
            "subsets": "all",
            "sampling": {"m": 500, "generator": "prng"}
        }"#;
        let c = validate_config(text).unwrap();
        assert_eq!(c.subsets.len(), 7);
        assert_eq!(c.structure.dependent()[0].family.name(), "quantile");
    }

    #[test]
    fn subset_expansion() {
        let mut e = Vec::new();
        let s = expand_subsets(&[SubsetRequest::UpTo { up_to: 2 }, SubsetRequest::Named("singletons".into())], 4, &mut e);
        assert!(e.is_empty());
        assert_eq!(s.len(), 10);
        let s = expand_subsets(&[SubsetRequest::Explicit { explicit: vec![vec![3, 1], vec![1, 3]] }], 4, &mut e);
        assert_eq!(s, vec![vec![1, 3]]);
    }

    #[test]
    fn run_writes_deterministic_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = validate_config(&gsobol_pairs_text()).unwrap();
        let o1 = Overrides {
            out: Some(dir.path().join("a")),
            ..Default::default()
        };
        let o2 = Overrides {
            out: Some(dir.path().join("b")),
            ..Default::default()
        };
        let r1 = run(c.clone(), &o1).unwrap();
        run(c, &o2).unwrap();
        let a = std::fs::read(dir.path().join("a/indices.csv")).unwrap();
        let b = std::fs::read(dir.path().join("b/indices.csv")).unwrap();
        assert_eq!(a, b);
        assert_eq!(r1.audit["r_min"], 6);
        assert_eq!(r1.audit["representations_built"], 6);
        let csv = String::from_utf8(a).unwrap();
        assert_eq!(csv.lines().count(), 1 + 20 * 4);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::DegenerateVariance { trace: 0.0, threshold: 0.0 }), 3);
        assert_eq!(exit_code(&Error::Evaluation { row: 1, message: "x".into() }), 4);
        assert_eq!(exit_code(&Error::Invariant("x".into())), 1);
    }
}
