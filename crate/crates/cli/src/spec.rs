//! Experiment spec files: flat `key = value` lines, `#` comments.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use dama::engine::{InitialPoint, UpdateForm, DEFAULT_DIVERGENCE_THRESHOLD};
use dama::grace::{specialize, BatchSize, Correction, EstimatorName, GraceConfig};
use dama::problems::{QuadraticConfig, Spread};
use dama::strategy::StrategyKind;
use dama::topology::{GraphKind, MixingRule};

/// One problem in a spec, tied to the line it came from (0 when it is not
/// tied to a single line).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

/// Every problem found in a spec file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecError {
    pub source: String,
    pub diagnostics: Vec<Diagnostic>,
}

impl SpecError {
    pub fn single(source: &str, line: usize, message: impl Into<String>) -> Self {
        Self { source: source.to_owned(), diagnostics: vec![Diagnostic { line, message: message.into() }] }
    }
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.diagnostics.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            if d.line == 0 {
                write!(f, "{}: {}", self.source, d.message)?;
            } else {
                write!(f, "{}:{}: {}", self.source, d.line, d.message)?;
            }
        }
        Ok(())
    }
}

impl std::error::Error for SpecError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scale {
    /// K = 20, d = 100, N = 2000.
    Paper,
    /// K = 8, d = 16, N = 200.
    #[default]
    Desk,
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            _ => Err(format!("unknown scale `{s}` (expected `paper` or `desk`)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProblemKind {
    #[default]
    Quadratic,
    Bilinear,
}

/// Faults injected on purpose by `verify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Perturb one off-diagonal entry of every mixing matrix.
    CorruptMixing,
}

/// Values given on the command line; they win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scale: Option<Scale>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorCell {
    pub name: EstimatorName,
    pub config: GraceConfig,
    /// Line that named the estimator (or its last override).
    pub line: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub estimators: Vec<EstimatorCell>,
    pub strategies: Vec<StrategyKind>,
    pub topologies: Vec<GraphKind>,
    pub mixing: MixingRule,
    pub problem: ProblemKind,
    pub quadratic: QuadraticConfig,
    pub hessian_products: bool,
    pub scale: Scale,
    pub seed: u64,
    pub repetitions: usize,
    pub seed_offset: u64,
    pub rounds: usize,
    pub mu_x: f64,
    pub mu_y: f64,
    pub cadence: usize,
    pub form: UpdateForm,
    pub divergence_threshold: f64,
    pub init: InitialPoint,
    pub record_wallclock: bool,
    pub out: PathBuf,
    pub inject: Option<Fault>,
    /// Line of each key, for diagnostics raised after parsing.
    pub lines: BTreeMap<String, usize>,
}

impl ExperimentSpec {
    pub fn line_of(&self, key: &str) -> usize {
        self.lines.get(key).copied().unwrap_or(0)
    }

    /// Samples per agent, `None` for streaming agents.
    pub fn samples(&self) -> Option<usize> {
        self.quadratic.samples_per_agent
    }

    /// Estimator stream seed of repetition `rep`.
    pub fn estimator_seed(&self, rep: usize) -> u64 {
        self.seed.wrapping_add(self.seed_offset.wrapping_mul(rep as u64))
    }

    /// Seed of the shared large-batch coin of repetition `rep`.
    pub fn bernoulli_seed(&self, rep: usize) -> u64 {
        self.estimator_seed(rep) ^ 0x9E37_79B9_7F4A_7C15
    }
}

const ESTIMATOR_KEYS: [&str; 11] =
    ["p", "beta", "beta_x", "beta_y", "b", "big_batch", "b0", "gamma1", "gamma2", "correction", "independent_batches"];

struct Entry {
    line: usize,
    value: String,
}

/// Message of a core error without its category prefix.
fn core_msg(e: dama::Error) -> String {
    match e {
        dama::Error::InvalidParameter(m) => m,
        e => e.to_string(),
    }
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect()
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_num<T: FromStr>(v: &str, what: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got `{v}`"))
}

fn parse_topology(v: &str, edge_prob: f64) -> Result<GraphKind, String> {
    match v {
        "ring" => Ok(GraphKind::Ring),
        "line" => Ok(GraphKind::Line),
        "complete" => Ok(GraphKind::Complete),
        "metropolis" | "random" => Ok(GraphKind::MetropolisRandom { edge_prob }),
        _ => Err(format!("unknown topology `{v}` (expected ring, line, complete or metropolis)")),
    }
}

fn parse_init(v: &str) -> Result<InitialPoint, String> {
    if v == "zero" {
        return Ok(InitialPoint::Zero);
    }
    if let Some(rest) = v.strip_prefix("random") {
        let rest = rest.trim();
        let scale = if rest.is_empty() {
            1.0
        } else {
            let s = rest.strip_prefix(':').ok_or_else(|| format!("expected `random:SCALE`, got `{v}`"))?;
            parse_num::<f64>(s.trim(), "a scale")?
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(format!("initial scale must be positive, got {scale}"));
        }
        // The initial-point seed is tied to the spec seed later on.
        return Ok(InitialPoint::Random { scale, seed: 0 });
    }
    Err(format!("unknown init `{v}` (expected `zero` or `random[:SCALE]`)"))
}

fn apply_estimator_key(cfg: &mut GraceConfig, gammas: &mut [Option<u8>; 2], key: &str, v: &str) -> Result<(), String> {
    let prob = |v: &str| -> Result<f64, String> {
        let x: f64 = parse_num(v, "a number in [0, 1]")?;
        if (0.0..=1.0).contains(&x) {
            Ok(x)
        } else {
            Err(format!("expected a number in [0, 1], got {x}"))
        }
    };
    let batch = |v: &str| BatchSize::from_str(v).map_err(core_msg);
    let gamma = |v: &str| match v {
        "0" => Ok(0u8),
        "1" => Ok(1u8),
        _ => Err(format!("expected 0 or 1, got `{v}`")),
    };
    match key {
        "p" => cfg.p = prob(v)?,
        "beta" => {
            cfg.beta_x = prob(v)?;
            cfg.beta_y = cfg.beta_x;
        }
        "beta_x" => cfg.beta_x = prob(v)?,
        "beta_y" => cfg.beta_y = prob(v)?,
        "b" => {
            cfg.b = parse_num(v, "a positive integer")?;
            if cfg.b == 0 {
                return Err("b must be positive".into());
            }
        }
        "big_batch" => cfg.big_batch = batch(v)?,
        "b0" => cfg.b0 = batch(v)?,
        "gamma1" => gammas[0] = Some(gamma(v)?),
        "gamma2" => gammas[1] = Some(gamma(v)?),
        "correction" => {
            cfg.correction = match v {
                "none" => Correction::None,
                "gradient_difference" => Correction::GradientDifference,
                "hessian" => Correction::Hessian,
                _ => return Err(format!("unknown correction `{v}` (expected none, gradient_difference or hessian)")),
            }
        }
        "independent_batches" => cfg.independent_batches = parse_bool(v)?,
        _ => unreachable!("checked against ESTIMATOR_KEYS"),
    }
    Ok(())
}

/// Parses and validates a spec. `source` names the file in diagnostics.
pub fn parse(text: &str, source: &str, overrides: &Overrides) -> Result<ExperimentSpec, SpecError> {
    let mut diags = Vec::new();
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    let mut est_overrides: Vec<(usize, String, String, String)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            diags.push(Diagnostic { line, message: format!("expected `key = value`, got `{content}`") });
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            diags.push(Diagnostic { line, message: "empty key or value".into() });
            continue;
        }
        if let Some((est, field)) = k.split_once('.') {
            if !ESTIMATOR_KEYS.contains(&field) {
                diags.push(Diagnostic {
                    line,
                    message: format!("unknown estimator setting `{field}` (expected one of {})", ESTIMATOR_KEYS.join(", ")),
                });
                continue;
            }
            est_overrides.push((line, est.to_owned(), field.to_owned(), v.to_owned()));
            continue;
        }
        if let Some(prev) = entries.get(k) {
            diags.push(Diagnostic { line, message: format!("duplicate key `{k}` (first set on line {})", prev.line) });
            continue;
        }
        entries.insert(k.to_owned(), Entry { line, value: v.to_owned() });
    }

    let mut lines: BTreeMap<String, usize> = entries.iter().map(|(k, e)| (k.clone(), e.line)).collect();
    let mut take = |key: &str| entries.remove(key);

    macro_rules! field {
        ($key:literal, $default:expr, $parse:expr) => {
            match take($key) {
                None => $default,
                Some(e) => match ($parse)(e.value.as_str()) {
                    Ok(v) => v,
                    Err(msg) => {
                        diags.push(Diagnostic { line: e.line, message: format!("`{}`: {}", $key, msg) });
                        $default
                    }
                },
            }
        };
    }

    let file_scale: Scale = field!("scale", Scale::Desk, |v: &str| v.parse::<Scale>());
    let scale = overrides.scale.unwrap_or(file_scale);
    let file_seed: u64 = field!("seed", 0, |v: &str| parse_num::<u64>(v, "a non-negative integer"));
    let seed = overrides.seed.unwrap_or(file_seed);

    let mut quadratic = match scale {
        Scale::Paper => QuadraticConfig::paper_scale(seed),
        Scale::Desk => QuadraticConfig::desk_scale(seed),
    };
    let positive = |v: &str| -> Result<usize, String> {
        let n: usize = parse_num(v, "a positive integer")?;
        if n == 0 {
            Err("must be positive".into())
        } else {
            Ok(n)
        }
    };
    let positive_f = |v: &str| -> Result<f64, String> {
        let x: f64 = parse_num(v, "a number")?;
        if x > 0.0 && x.is_finite() {
            Ok(x)
        } else {
            Err(format!("must be positive and finite, got {x}"))
        }
    };
    let nonneg_f = |v: &str| -> Result<f64, String> {
        let x: f64 = parse_num(v, "a number")?;
        if x >= 0.0 && x.is_finite() {
            Ok(x)
        } else {
            Err(format!("must be finite and >= 0, got {x}"))
        }
    };
    quadratic.agents = field!("agents", quadratic.agents, positive);
    quadratic.dim_x = field!("dim_x", quadratic.dim_x, positive);
    quadratic.dim_y = field!("dim_y", quadratic.dim_y, positive);
    quadratic.samples_per_agent = field!("samples", quadratic.samples_per_agent, |v: &str| {
        if v == "online" {
            Ok(None)
        } else {
            positive(v).map(Some)
        }
    });
    quadratic.nu = field!("nu", quadratic.nu, positive_f);
    quadratic.hetero_shift = field!("hetero_shift", quadratic.hetero_shift, nonneg_f);
    quadratic.data_mean = field!("data_mean", quadratic.data_mean, |v: &str| parse_num::<f64>(v, "a number"));
    quadratic.data_scale = field!("data_scale", quadratic.data_scale, nonneg_f);
    quadratic.noise_scale = field!("noise_scale", quadratic.noise_scale, nonneg_f);
    quadratic.coupling_scale = field!("coupling_scale", quadratic.coupling_scale, nonneg_f);
    quadratic.spread = field!("spread", quadratic.spread, |v: &str| match v {
        "variance" => Ok(Spread::Variance),
        "stddev" => Ok(Spread::StdDev),
        _ => Err(format!("unknown spread `{v}` (expected variance or stddev)")),
    });
    let problem = field!("problem", ProblemKind::Quadratic, |v: &str| match v {
        "quadratic" => Ok(ProblemKind::Quadratic),
        "bilinear" => Ok(ProblemKind::Bilinear),
        _ => Err(format!("unknown problem `{v}` (expected quadratic or bilinear)")),
    });
    let hessian_products = field!("hessian_products", true, parse_bool);

    let mixing = field!("mixing", MixingRule::Metropolis, |v: &str| v.parse::<MixingRule>().map_err(core_msg));
    let edge_prob = field!("edge_prob", 0.3, |v: &str| {
        let q: f64 = parse_num(v, "a probability")?;
        if q > 0.0 && q <= 1.0 {
            Ok(q)
        } else {
            Err(format!("must lie in (0, 1], got {q}"))
        }
    });

    let rounds = field!("rounds", 1000, |v: &str| parse_num::<usize>(v, "a non-negative integer"));
    let mu_x = field!("mu_x", 1e-3, nonneg_f);
    let mu_y = field!("mu_y", 1e-2, nonneg_f);
    let cadence = field!("cadence", 1, positive);
    let form = field!("form", UpdateForm::General, |v: &str| match v {
        "general" => Ok(UpdateForm::General),
        "node_level" => Ok(UpdateForm::NodeLevel),
        _ => Err(format!("unknown form `{v}` (expected general or node_level)")),
    });
    let divergence_threshold = field!("divergence_threshold", DEFAULT_DIVERGENCE_THRESHOLD, positive_f);
    let mut init = field!("init", InitialPoint::Zero, parse_init);
    if let InitialPoint::Random { seed: s, .. } = &mut init {
        *s = seed;
    }
    let record_wallclock = field!("record_wallclock", false, parse_bool);
    let repetitions = field!("repetitions", 1, positive);
    let seed_offset = field!("seed_offset", 1000, |v: &str| parse_num::<u64>(v, "a non-negative integer"));
    let file_out = field!("out", PathBuf::from("results"), |v: &str| Ok::<_, String>(PathBuf::from(v)));
    let out = overrides.out.clone().unwrap_or(file_out);
    let inject = field!("inject", None, |v: &str| match v {
        "none" => Ok(None),
        "corrupt_mixing" => Ok(Some(Fault::CorruptMixing)),
        _ => Err(format!("unknown fault `{v}` (expected none or corrupt_mixing)")),
    });

    let est_line = lines.get("estimators").copied().unwrap_or(0);
    let problem_line = lines.get("problem").copied().unwrap_or(0);
    let mut required_list = |key: &str, diags: &mut Vec<Diagnostic>| -> Option<(usize, Vec<String>)> {
        match take(key) {
            None => {
                diags.push(Diagnostic { line: 0, message: format!("missing required key `{key}`") });
                None
            }
            Some(e) => {
                let items = split_list(&e.value);
                if items.is_empty() {
                    diags.push(Diagnostic { line: e.line, message: format!("`{key}` is empty") });
                }
                Some((e.line, items))
            }
        }
    };

    let mut strategies = Vec::new();
    if let Some((line, items)) = required_list("strategies", &mut diags) {
        for s in items {
            match s.parse::<StrategyKind>() {
                Ok(k) if strategies.contains(&k) => diags.push(Diagnostic { line, message: format!("strategy `{s}` listed twice") }),
                Ok(k) => strategies.push(k),
                Err(e) => diags.push(Diagnostic { line, message: core_msg(e) }),
            }
        }
    }
    let mut topologies = Vec::new();
    if let Some((line, items)) = required_list("topologies", &mut diags) {
        for s in items {
            match parse_topology(&s, edge_prob) {
                Ok(k) if topologies.contains(&k) => diags.push(Diagnostic { line, message: format!("topology `{s}` listed twice") }),
                Ok(k) => topologies.push(k),
                Err(e) => diags.push(Diagnostic { line, message: e }),
            }
        }
    }
    let n_for_presets = quadratic.samples_per_agent.unwrap_or(1);
    let mut estimators: Vec<EstimatorCell> = Vec::new();
    if let Some((line, items)) = required_list("estimators", &mut diags) {
        for s in items {
            match s.parse::<EstimatorName>() {
                Ok(name) if estimators.iter().any(|c| c.name == name) => {
                    diags.push(Diagnostic { line, message: format!("estimator `{s}` listed twice") })
                }
                Ok(name) => estimators.push(EstimatorCell { name, config: specialize(name, n_for_presets), line }),
                Err(e) => diags.push(Diagnostic { line, message: core_msg(e) }),
            }
        }
    }
    // Gamma switches are combined after all overrides, so their order does not matter.
    let mut gammas: Vec<([Option<u8>; 2], usize)> = vec![([None, None], 0); estimators.len()];
    for (line, est, field, value) in est_overrides {
        let Ok(name) = est.parse::<EstimatorName>() else {
            diags.push(Diagnostic { line, message: format!("unknown estimator `{est}`") });
            continue;
        };
        let Some(idx) = estimators.iter().position(|c| c.name == name) else {
            diags.push(Diagnostic {
                line,
                message: format!("setting for `{}` but it is not listed in `estimators` (line {est_line})", name.name()),
            });
            continue;
        };
        let cell = &mut estimators[idx];
        match apply_estimator_key(&mut cell.config, &mut gammas[idx].0, &field, &value) {
            Ok(()) => {
                cell.line = line;
                if field.starts_with("gamma") {
                    gammas[idx].1 = line;
                }
            }
            Err(msg) => diags.push(Diagnostic { line, message: format!("`{est}.{field}`: {msg}") }),
        }
        lines.insert(format!("{}.{field}", name.name()), line);
    }

    for (cell, ([g1, g2], line)) in estimators.iter_mut().zip(gammas) {
        if g1.is_none() && g2.is_none() {
            continue;
        }
        let (c1, c2) = cell.config.correction.gammas();
        match Correction::from_gammas(g1.unwrap_or(c1), g2.unwrap_or(c2)) {
            Ok(c) => cell.config.correction = c,
            Err(e) => diags.push(Diagnostic { line, message: format!("estimator {}: {}", cell.name.name(), core_msg(e)) }),
        }
    }

    for (k, e) in &entries {
        diags.push(Diagnostic { line: e.line, message: format!("unknown key `{k}`") });
    }

    for cell in &estimators {
        if let Err(e) = cell.config.validate() {
            diags.push(Diagnostic { line: cell.line, message: format!("estimator {}: {}", cell.name.name(), core_msg(e)) });
        }
        if cell.config.correction == Correction::Hessian && !hessian_products {
            diags.push(Diagnostic {
                line: cell.line,
                message: format!(
                    "estimator {} uses the Hessian correction (gamma2 = 1) but the problem has `hessian_products = false`",
                    cell.name.name()
                ),
            });
        }
        if quadratic.samples_per_agent.is_none() {
            for (what, b) in [("b0", cell.config.b0), ("big_batch", cell.config.big_batch)] {
                if b == BatchSize::Full {
                    diags.push(Diagnostic {
                        line: cell.line,
                        message: format!("estimator {}: streaming agents (`samples = online`) need an explicit `{what}`", cell.name.name()),
                    });
                }
            }
        }
        if let (Some(n), BatchSize::Samples(b0)) = (quadratic.samples_per_agent, cell.config.b0) {
            if b0 > n {
                diags.push(Diagnostic {
                    line: cell.line,
                    message: format!("estimator {}: b0 = {b0} exceeds the {n} samples per agent", cell.name.name()),
                });
            }
        }
    }
    if problem == ProblemKind::Bilinear && quadratic.samples_per_agent.is_none() {
        diags.push(Diagnostic { line: problem_line, message: "the bilinear problem needs a finite `samples`".into() });
    }
    if quadratic.agents < 2 && topologies.iter().any(|t| *t != GraphKind::Complete) {
        log::debug!("single agent: topologies are ignored");
    }

    if !diags.is_empty() {
        diags.sort_by_key(|d| d.line);
        return Err(SpecError { source: source.to_owned(), diagnostics: diags });
    }
    Ok(ExperimentSpec {
        estimators,
        strategies,
        topologies,
        mixing,
        problem,
        quadratic,
        hessian_products,
        scale,
        seed,
        repetitions,
        seed_offset,
        rounds,
        mu_x,
        mu_y,
        cadence,
        form,
        divergence_threshold,
        init,
        record_wallclock,
        out,
        inject,
        lines,
    })
}
