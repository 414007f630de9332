//! Experiment configs, seed sweeps and median/quartile aggregation.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Spanned;

use crate::agents::{run_training, Algo, EvalPoint, PlainHooks, SeedRun, TrainConfig, TrainError};
use crate::game::{template_payoff, Env, PayoffTensor};
use crate::maven::{run_maven, MavenArtifact, MavenConfig, MiMode, PolicyMode};

/// Environment variable holding the number of seeds run concurrently.
pub const WORKERS_ENV: &str = "MAVEN_WORKERS";

/// Seeds per sweep when the config names none.
pub const DEFAULT_SEED_COUNT: u64 = 20;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{}", fmt_located(.path, *.line, .message))]
    Config {
        path: Option<PathBuf>,
        line: Option<usize>,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("curves are not on a common evaluation grid: {0}")]
    Misaligned(String),
}

fn fmt_located(path: &Option<PathBuf>, line: Option<usize>, message: &str) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!("{}:{l}: {message}", p.display()),
        (Some(p), None) => format!("{}: {message}", p.display()),
        (None, Some(l)) => format!("line {l}: {message}"),
        (None, None) => message.to_string(),
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentAlgo {
    Iql,
    Vdn,
    Qmix,
    Maven,
}

impl fmt::Display for ExperimentAlgo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Iql => "iql",
            Self::Vdn => "vdn",
            Self::Qmix => "qmix",
            Self::Maven => "maven",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    /// The m-step chain game.
    Mstep,
    /// The nonmonotone template matrix game.
    Template,
    /// A matrix game read from a payoff JSON file.
    Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvConfig {
    Mstep { m: usize },
    Template { n: usize, k: usize, reward: f64, delta: f64 },
    Matrix { payoff: PayoffTensor },
}

impl EnvConfig {
    pub fn build(&self) -> Result<Env> {
        let map = |e: crate::game::GameError| HarnessError::Config {
            path: None,
            line: None,
            message: e.to_string(),
        };
        match self {
            EnvConfig::Mstep { m } => Env::mstep(*m).map_err(map),
            EnvConfig::Template { n, k, reward, delta } => {
                Ok(Env::matrix(template_payoff(*n, *k, *reward, *delta).map_err(map)?))
            }
            EnvConfig::Matrix { payoff } => Ok(Env::matrix(payoff.clone())),
        }
    }
}

/// A fully validated experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algo: ExperimentAlgo,
    pub env: EnvConfig,
    pub seeds: Vec<u64>,
    /// Agent and training settings; `train` inside is used by every algorithm.
    pub maven: MavenConfig,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn train(&self) -> &TrainConfig {
        &self.maven.train
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    algo: Option<Spanned<ExperimentAlgo>>,
    env: Option<Spanned<EnvKind>>,
    m: Option<Spanned<i64>>,
    n: Option<Spanned<i64>>,
    k: Option<Spanned<i64>>,
    reward: Option<Spanned<f64>>,
    delta: Option<Spanned<f64>>,
    payoff: Option<Spanned<String>>,
    seeds: Option<Spanned<Vec<i64>>>,
    seed_count: Option<Spanned<i64>>,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    maven: RawMaven,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    total_steps: Option<Spanned<i64>>,
    eval_every: Option<Spanned<i64>>,
    eval_episodes: Option<Spanned<i64>>,
    batch_size: Option<Spanned<i64>>,
    buffer_steps: Option<Spanned<i64>>,
    target_update_episodes: Option<Spanned<i64>>,
    grad_clip: Option<Spanned<f64>>,
    hidden: Option<Spanned<i64>>,
    mixer_embed: Option<Spanned<i64>>,
    mixer_layers: Option<Spanned<i64>>,
    learning_rate: Option<Spanned<f64>>,
    rms_alpha: Option<Spanned<f64>>,
    rms_eps: Option<Spanned<f64>>,
    epsilon_start: Option<Spanned<f64>>,
    epsilon_end: Option<Spanned<f64>>,
    epsilon_anneal_steps: Option<Spanned<i64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMaven {
    latent_categories: Option<Spanned<i64>>,
    lambda_mi: Option<Spanned<f64>>,
    lambda_ql: Option<Spanned<f64>>,
    entropy_coef: Option<Spanned<f64>>,
    mi_mode: Option<Spanned<MiMode>>,
    policy_mode: Option<Spanned<PolicyMode>>,
    policy_learning_rate: Option<Spanned<f64>>,
    discriminator_hidden: Option<Spanned<i64>>,
    temperature: Option<Spanned<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<Spanned<String>>,
}

struct Locator<'a> {
    text: &'a str,
    path: Option<&'a Path>,
}

impl Locator<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        self.text[..span.start.min(self.text.len())].matches('\n').count() + 1
    }

    fn err(&self, span: Option<Range<usize>>, message: impl Into<String>) -> HarnessError {
        HarnessError::Config {
            path: self.path.map(Path::to_path_buf),
            line: span.map(|s| self.line(s)),
            message: message.into(),
        }
    }

    fn count(&self, v: &Spanned<i64>, key: &str, min: i64) -> Result<usize> {
        let x = *v.get_ref();
        if x < min {
            return Err(self.err(Some(v.span()), format!("`{key}` must be at least {min}, got {x}")));
        }
        Ok(x as usize)
    }

    fn real(&self, v: &Spanned<f64>, key: &str, ok: impl Fn(f64) -> bool, what: &str) -> Result<f64> {
        let x = *v.get_ref();
        if !x.is_finite() || !ok(x) {
            return Err(self.err(Some(v.span()), format!("`{key}` must be {what}, got {x}")));
        }
        Ok(x)
    }
}

/// Parses and validates a config; `path` only labels errors and anchors a
/// relative `payoff` file.
pub fn parse_config_str(text: &str, path: Option<&Path>) -> Result<ExperimentConfig> {
    let loc = Locator { text, path };
    let raw: RawConfig = toml::from_str(text).map_err(|e| loc.err(e.span(), e.message().to_string()))?;

    let mut missing = Vec::new();
    if raw.algo.is_none() {
        missing.push("algo");
    }
    if raw.env.is_none() {
        missing.push("env");
    }
    if !missing.is_empty() {
        return Err(loc.err(
            None,
            format!("missing required keys: {} (algo: iql|vdn|qmix|maven; env: mstep|template|matrix)", missing.join(", ")),
        ));
    }
    let algo = raw.algo.expect("checked").into_inner();
    let env_kind = raw.env.expect("checked");
    let env_span = env_kind.span();
    let kind = env_kind.into_inner();
    let need = |name: &str| loc.err(Some(env_span.clone()), format!("env `{}` needs `{name}`", kind_name(kind)));

    let env = match kind {
        EnvKind::Mstep => {
            let m = raw.m.as_ref().ok_or_else(|| need("m"))?;
            EnvConfig::Mstep { m: loc.count(m, "m", 1)? }
        }
        EnvKind::Template => {
            let n = loc.count(raw.n.as_ref().ok_or_else(|| need("n"))?, "n", 1)?;
            let k = loc.count(raw.k.as_ref().ok_or_else(|| need("k"))?, "k", 3)?;
            let reward = loc.real(raw.reward.as_ref().ok_or_else(|| need("reward"))?, "reward", |x| x > 0.0, "positive")?;
            let delta = loc.real(raw.delta.as_ref().ok_or_else(|| need("delta"))?, "delta", |x| x >= 0.0, "nonnegative")?;
            EnvConfig::Template { n, k, reward, delta }
        }
        EnvKind::Matrix => {
            let p = raw.payoff.as_ref().ok_or_else(|| need("payoff"))?;
            let file = match path.and_then(Path::parent) {
                Some(dir) => dir.join(p.get_ref()),
                None => PathBuf::from(p.get_ref()),
            };
            let payoff = PayoffTensor::read_json(&file).map_err(|e| loc.err(Some(p.span()), e.to_string()))?;
            EnvConfig::Matrix { payoff }
        }
    };

    let seeds = match (&raw.seeds, &raw.seed_count) {
        (Some(_), Some(c)) => return Err(loc.err(Some(c.span()), "give either `seeds` or `seed_count`, not both")),
        (Some(s), None) => {
            let mut out = Vec::new();
            for &x in s.get_ref() {
                if x < 0 {
                    return Err(loc.err(Some(s.span()), format!("seeds must be nonnegative, got {x}")));
                }
                if out.contains(&(x as u64)) {
                    return Err(loc.err(Some(s.span()), format!("seed {x} is listed twice")));
                }
                out.push(x as u64);
            }
            if out.is_empty() {
                return Err(loc.err(Some(s.span()), "`seeds` is empty"));
            }
            out
        }
        (None, Some(c)) => (0..loc.count(c, "seed_count", 1)? as u64).collect(),
        (None, None) => (0..DEFAULT_SEED_COUNT).collect(),
    };

    let mut mc = MavenConfig::default();
    let t = &raw.train;
    let tc = &mut mc.train;
    if let Some(v) = &t.total_steps {
        tc.total_steps = loc.count(v, "total_steps", 1)?;
    }
    if let Some(v) = &t.eval_every {
        tc.eval_every = loc.count(v, "eval_every", 1)?;
    }
    if let Some(v) = &t.eval_episodes {
        tc.eval_episodes = loc.count(v, "eval_episodes", 1)?;
    }
    if let Some(v) = &t.batch_size {
        tc.batch_size = loc.count(v, "batch_size", 1)?;
    }
    if let Some(v) = &t.buffer_steps {
        tc.buffer_steps = loc.count(v, "buffer_steps", 1)?;
    }
    if let Some(v) = &t.target_update_episodes {
        tc.target_update_episodes = loc.count(v, "target_update_episodes", 1)?;
    }
    if let Some(v) = &t.grad_clip {
        tc.grad_clip = loc.real(v, "grad_clip", |x| x > 0.0, "positive")?;
    }
    if let Some(v) = &t.hidden {
        tc.net.hidden = loc.count(v, "hidden", 1)?;
    }
    if let Some(v) = &t.mixer_embed {
        tc.net.mixer.embed = loc.count(v, "mixer_embed", 1)?;
    }
    if let Some(v) = &t.mixer_layers {
        let l = loc.count(v, "mixer_layers", 1)?;
        if l > 2 {
            return Err(loc.err(Some(v.span()), format!("`mixer_layers` must be 1 or 2, got {l}")));
        }
        tc.net.mixer.layers = l;
    }
    if let Some(v) = &t.learning_rate {
        tc.optimizer.learning_rate = loc.real(v, "learning_rate", |x| x > 0.0, "positive")?;
    }
    if let Some(v) = &t.rms_alpha {
        tc.optimizer.alpha = loc.real(v, "rms_alpha", |x| (0.0..1.0).contains(&x), "in [0, 1)")?;
    }
    if let Some(v) = &t.rms_eps {
        tc.optimizer.eps = loc.real(v, "rms_eps", |x| x > 0.0, "positive")?;
    }
    if let Some(v) = &t.epsilon_start {
        tc.epsilon.start = loc.real(v, "epsilon_start", |x| (0.0..=1.0).contains(&x), "in [0, 1]")?;
    }
    if let Some(v) = &t.epsilon_end {
        tc.epsilon.end = loc.real(v, "epsilon_end", |x| (0.0..=1.0).contains(&x), "in [0, 1]")?;
    }
    if let Some(v) = &t.epsilon_anneal_steps {
        tc.epsilon.anneal_steps = loc.count(v, "epsilon_anneal_steps", 0)?;
    }
    if tc.epsilon.end > tc.epsilon.start {
        let span = t.epsilon_end.as_ref().or(t.epsilon_start.as_ref()).map(|s| s.span());
        return Err(loc.err(span, "`epsilon_end` must not exceed `epsilon_start`"));
    }

    let m = &raw.maven;
    if let Some(v) = &m.latent_categories {
        mc.latent_categories = loc.count(v, "latent_categories", 1)?;
    }
    if let Some(v) = &m.lambda_mi {
        mc.lambda_mi = loc.real(v, "lambda_mi", |x| x >= 0.0, "nonnegative")?;
    }
    if let Some(v) = &m.lambda_ql {
        mc.lambda_ql = loc.real(v, "lambda_ql", |x| x >= 0.0, "nonnegative")?;
    }
    if let Some(v) = &m.entropy_coef {
        mc.entropy_coef = loc.real(v, "entropy_coef", |x| x >= 0.0, "nonnegative")?;
    }
    if let Some(v) = &m.mi_mode {
        mc.mi_mode = *v.get_ref();
    }
    if let Some(v) = &m.policy_mode {
        mc.policy_mode = *v.get_ref();
    }
    if let Some(v) = &m.policy_learning_rate {
        mc.policy_learning_rate = Some(loc.real(v, "policy_learning_rate", |x| x > 0.0, "positive")?);
    }
    if let Some(v) = &m.discriminator_hidden {
        mc.discriminator_hidden = loc.count(v, "discriminator_hidden", 1)?;
    }
    if let Some(v) = &m.temperature {
        mc.temperature = loc.real(v, "temperature", |x| x > 0.0, "positive")?;
    }
    mc.validate().map_err(|e| loc.err(None, e.to_string()))?;

    let out_dir = raw.output.dir.map(|d| PathBuf::from(d.into_inner()));
    Ok(ExperimentConfig {
        algo,
        env,
        seeds,
        maven: mc,
        out_dir,
    })
}

fn kind_name(k: EnvKind) -> &'static str {
    match k {
        EnvKind::Mstep => "mstep",
        EnvKind::Template => "template",
        EnvKind::Matrix => "matrix",
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config_str(&text, Some(path))
}

/// One row of the aggregate table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub step: usize,
    pub median_return: f64,
    pub q1_return: f64,
    pub q3_return: f64,
}

/// One row of a per-seed curve file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub step: usize,
    #[serde(rename = "return")]
    pub value: f64,
    pub seed: u64,
}

/// Nearest-rank percentile of an ascending slice: rank `ceil(p n)`, at least 1.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Per-step median and quartiles across seeds.
pub fn aggregate(curves: &[Vec<EvalPoint>]) -> Result<Vec<AggregateRow>> {
    let first = curves
        .first()
        .ok_or_else(|| HarnessError::Misaligned("no curves".into()))?;
    for (i, c) in curves.iter().enumerate() {
        if c.len() != first.len() || c.iter().zip(first).any(|(a, b)| a.step != b.step) {
            return Err(HarnessError::Misaligned(format!("curve {i} differs from curve 0")));
        }
    }
    Ok((0..first.len())
        .map(|j| {
            let mut v: Vec<f64> = curves.iter().map(|c| c[j].mean_return).collect();
            v.sort_by(f64::total_cmp);
            AggregateRow {
                step: first[j].step,
                median_return: nearest_rank(&v, 0.5),
                q1_return: nearest_rank(&v, 0.25),
                q3_return: nearest_rank(&v, 0.75),
            }
        })
        .collect())
}

/// Everything a finished seed leaves behind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub algo: ExperimentAlgo,
    pub env: EnvConfig,
    pub run: SeedRun,
    pub maven: Option<MavenArtifact>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seeds: Vec<SeedRun>,
    pub aggregate: Vec<AggregateRow>,
    /// Seeds that failed, with their error messages.
    pub failures: Vec<(u64, String)>,
}

impl RunResult {
    pub fn final_row(&self) -> Option<&AggregateRow> {
        self.aggregate.last()
    }
}

/// Runs one seed of the experiment.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifact> {
    let env = cfg.env.build()?;
    let (run, maven) = match cfg.algo {
        ExperimentAlgo::Maven => {
            let out = run_maven(&env, &cfg.maven, seed, &mut |_, _| {})?;
            (out.run, Some(out.artifact))
        }
        other => {
            let algo = match other {
                ExperimentAlgo::Iql => Algo::Iql,
                ExperimentAlgo::Vdn => Algo::Vdn,
                _ => Algo::Qmix,
            };
            let (run, _) = run_training(&env, algo, cfg.train(), seed, None, &mut PlainHooks, &mut |_, _| {})?;
            (run, None)
        }
    };
    Ok(RunArtifact {
        algo: cfg.algo,
        env: cfg.env.clone(),
        run,
        maven,
    })
}

/// Worker count from the environment, defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn write_seed_csv(path: &Path, run: &SeedRun) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in &run.curve {
        w.serialize(SeedRow {
            step: p.step,
            value: p.mean_return,
            seed: run.seed,
        })?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_seed_csv(path: &Path) -> Result<Vec<SeedRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Runs every seed on up to `workers` threads and aggregates the successful
/// ones. With `out`, writes `seed_<s>.csv`, `seed_<s>.json`, `aggregate.csv`
/// and `config.json` there.
pub fn run_sweep(cfg: &ExperimentConfig, out: Option<&Path>, workers: usize) -> Result<RunResult> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join("config.json"), cfg)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    let outcomes: Vec<(u64, Result<RunArtifact>)> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let res = run_seed(cfg, seed).and_then(|art| {
                    if let Some(dir) = out {
                        write_seed_csv(&dir.join(format!("seed_{seed}.csv")), &art.run)?;
                        write_json(&dir.join(format!("seed_{seed}.json")), &art)?;
                    }
                    Ok(art)
                });
                (seed, res)
            })
            .collect()
    });
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    for (seed, res) in outcomes {
        match res {
            Ok(art) => seeds.push(art.run),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    let aggregate = if seeds.is_empty() {
        Vec::new()
    } else {
        let curves: Vec<Vec<EvalPoint>> = seeds.iter().map(|r| r.curve.clone()).collect();
        aggregate(&curves)?
    };
    if let Some(dir) = out {
        write_aggregate_csv(&dir.join("aggregate.csv"), &aggregate)?;
    }
    Ok(RunResult {
        seeds,
        aggregate,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(values: &[f64]) -> Vec<EvalPoint> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| EvalPoint {
                step: i * 10,
                mean_return: v,
            })
            .collect()
    }

    fn line_of(e: HarnessError) -> Option<usize> {
        match e {
            HarnessError::Config { line, .. } => line,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse_config_str("algo = \"maven\"\nenv = \"mstep\"\nm = 10\n", None).unwrap();
        assert_eq!(c.algo, ExperimentAlgo::Maven);
        assert_eq!(c.env, EnvConfig::Mstep { m: 10 });
        assert_eq!(c.maven.latent_categories, 16);
        assert_eq!(c.maven.lambda_mi, 1.0);
        assert_eq!(c.maven.lambda_ql, 1.0);
        let e = c.train().epsilon;
        assert_eq!((e.start, e.end, e.anneal_steps), (1.0, 0.01, 100));
        assert_eq!(c.seeds, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn empty_file_lists_required_keys() {
        let e = parse_config_str("", None).unwrap_err().to_string();
        assert!(e.contains("algo") && e.contains("env"), "{e}");
    }

    #[test]
    fn negative_seed_count_is_rejected_with_line() {
        let text = "algo = \"qmix\"\nenv = \"mstep\"\nm = 3\nseed_count = -2\n";
        assert_eq!(line_of(parse_config_str(text, None).unwrap_err()), Some(4));
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = "algo = \"qmix\"\nenv = \"mstep\"\nm = 3\n\n[train]\nlearning_rat = 0.1\n";
        let e = parse_config_str(text, None).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("learning_rat"), "{msg}");
        assert_eq!(line_of(e), Some(6));
    }

    #[test]
    fn type_mismatch_reports_its_line() {
        let text = "algo = \"qmix\"\nenv = \"mstep\"\nm = \"ten\"\n";
        assert_eq!(line_of(parse_config_str(text, None).unwrap_err()), Some(3));
    }

    #[test]
    fn unknown_algorithm_reports_its_line() {
        let text = "env = \"mstep\"\nalgo = \"qplex\"\nm = 3\n";
        assert_eq!(line_of(parse_config_str(text, None).unwrap_err()), Some(2));
    }

    #[test]
    fn missing_env_parameter_points_at_env() {
        let text = "algo = \"qmix\"\n\nenv = \"template\"\nn = 2\nk = 3\nreward = 8.0\n";
        let e = parse_config_str(text, None).unwrap_err();
        assert!(e.to_string().contains("delta"));
        assert_eq!(line_of(e), Some(3));
    }

    #[test]
    fn duplicate_seeds_are_rejected() {
        let text = "algo = \"qmix\"\nenv = \"mstep\"\nm = 3\nseeds = [1, 2, 1]\n";
        assert_eq!(line_of(parse_config_str(text, None).unwrap_err()), Some(4));
    }

    #[test]
    fn overrides_reach_the_configs() {
        let text = "algo = \"maven\"\nenv = \"template\"\nn = 2\nk = 3\nreward = 8\ndelta = 1\nseeds = [4, 7]\n\
                    [train]\ntotal_steps = 500\nmixer_layers = 1\n[maven]\nlatent_categories = 4\n\
                    policy_mode = \"uniform\"\nmi_mode = \"per_timestep\"\n[output]\ndir = \"runs/x\"\n";
        let c = parse_config_str(text, None).unwrap();
        assert_eq!(c.seeds, vec![4, 7]);
        assert_eq!(c.train().total_steps, 500);
        assert_eq!(c.train().net.mixer.layers, 1);
        assert_eq!(c.maven.latent_categories, 4);
        assert_eq!(c.maven.policy_mode, PolicyMode::Uniform);
        assert_eq!(c.maven.mi_mode, MiMode::PerTimestep);
        assert_eq!(c.out_dir, Some(PathBuf::from("runs/x")));
    }

    #[test]
    fn nearest_rank_examples() {
        let rows = aggregate(&[curve(&[1.0]), curve(&[2.0]), curve(&[3.0])]).unwrap();
        assert_eq!((rows[0].median_return, rows[0].q1_return, rows[0].q3_return), (2.0, 1.0, 3.0));
        let rows = aggregate(&vec![curve(&[5.0, 6.0]); 4]).unwrap();
        assert!(rows.iter().all(|r| r.q1_return == r.median_return && r.q3_return == r.median_return));
    }

    #[test]
    fn misaligned_grids_are_rejected() {
        let mut b = curve(&[1.0, 2.0]);
        b[1].step = 11;
        assert!(matches!(aggregate(&[curve(&[1.0, 2.0]), b]), Err(HarnessError::Misaligned(_))));
        assert!(aggregate(&[curve(&[1.0]), curve(&[1.0, 2.0])]).is_err());
    }
}
