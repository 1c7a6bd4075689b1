//! Run configuration and the command implementations behind the CLI:
//! plan, train, bench, noc, match and generate.
//!
//! Every command writes its artifacts under the configured output directory
//! and finishes with a `manifest.json` listing each artifact's sha256 next to
//! the config hash, seed and weights version.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{plan_eg_mcts_0, plan_greedy_dfs, plan_mcts_rollout, Algorithm, DfsParams, RolloutParams};
use crate::egn::{EgnError, EgnWeights, TrainConfig};
use crate::metrics::{aggregate, rows_csv, BenchmarkRow, MetricsError, DEFAULT_LIMITS};
use crate::noc::{build_noc, hardness_screen, load_records, split_targets, NocError};
use crate::phase1::{run_phase1, validation_csv, Phase1Error, Phase1Params};
use crate::problem::{ExpansionOracle, Item, OracleConfig, OracleError, ProblemError, StockSet, TemplateAction};
use crate::remote::{Endpoint, RemoteOracle};
use crate::routes::{extract_route, matching_degree, Route, RouteError};
use crate::search::{plan, PlanError, PlanOutcome, SearchParams};
use crate::seed::derive_seed;
use crate::synthetic::{DomainProfile, SyntheticDomain, SyntheticError};

pub const CONFIG_FORMAT: &str = "egmcts-config/1";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Egn(#[from] EgnError),
    #[error(transparent)]
    Phase1(#[from] Phase1Error),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Noc(#[from] NocError),
    #[error("planning {target}: {source}")]
    Plan {
        target: String,
        #[source]
        source: PlanError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where expansions come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleSpec {
    Synthetic(PathBuf),
    Remote(Endpoint),
}

impl OracleSpec {
    /// Parses `synthetic:<path>` or `remote:<endpoint>`.
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        if let Some(p) = s.strip_prefix("synthetic:") {
            if p.is_empty() {
                return Err(HarnessError::Config("empty synthetic domain path".into()));
            }
            return Ok(OracleSpec::Synthetic(PathBuf::from(p)));
        }
        if let Some(ep) = s.strip_prefix("remote:") {
            return Ok(OracleSpec::Remote(ep.parse()?));
        }
        Err(HarnessError::Config(format!(
            "oracle must be synthetic:<path> or remote:<endpoint>, got {s:?}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Section {
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub window: usize,
    pub max_rounds: usize,
    pub accumulate: bool,
}

impl Default for Phase1Section {
    fn default() -> Self {
        let p = Phase1Params::default();
        Phase1Section {
            epsilon1: p.epsilon1,
            epsilon2: p.epsilon2,
            window: p.window,
            max_rounds: p.max_rounds,
            accumulate: p.accumulate,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetFiles {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub algorithms: Vec<String>,
    pub limits: Vec<usize>,
    pub dfs_max_depth: usize,
    pub rollout_depth: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            algorithms: Algorithm::ALL.iter().map(|a| a.name().to_string()).collect(),
            limits: DEFAULT_LIMITS.to_vec(),
            dfs_max_depth: DfsParams::default().max_depth,
            rollout_depth: RolloutParams::default().max_rollout_depth,
        }
    }
}

/// The single TOML configuration document. Relative paths are resolved
/// against the directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format: String,
    pub seed: u64,
    /// `synthetic:<path>` or `remote:<endpoint>`.
    pub oracle: Option<String>,
    /// One id per line. Defaults to the synthetic domain's stock.
    pub stock: Option<PathBuf>,
    pub output: PathBuf,
    pub jobs: usize,
    pub weights: Option<PathBuf>,
    /// Plan with a constant 0.5 prior instead of trained weights.
    pub untrained: bool,
    pub search: SearchParams,
    pub phase1: Phase1Section,
    pub train: TrainConfig,
    pub targets: TargetFiles,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format: CONFIG_FORMAT.into(),
            seed: 0,
            oracle: None,
            stock: None,
            output: PathBuf::from("egmcts-out"),
            jobs: 1,
            weights: None,
            untrained: false,
            search: SearchParams::default(),
            phase1: Phase1Section::default(),
            train: TrainConfig::default(),
            targets: TargetFiles::default(),
            bench: BenchSection::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub k: Option<usize>,
    pub c: Option<f64>,
    pub z: Option<f64>,
    pub jobs: Option<usize>,
    pub oracle: Option<String>,
    pub weights: Option<PathBuf>,
    pub untrained: bool,
    pub stop_on_first: Option<bool>,
    pub stock: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if cfg.format != CONFIG_FORMAT {
            return Err(HarnessError::Config(format!(
                "unsupported config format {:?} (expected {CONFIG_FORMAT:?})",
                cfg.format
            )));
        }
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.stock, &mut self.weights, &mut self.targets.train, &mut self.targets.validation, &mut self.targets.test]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        resolve(base, &mut self.output);
        if let Some(o) = &self.oracle {
            if let Some(p) = o.strip_prefix("synthetic:") {
                let mut p = PathBuf::from(p);
                resolve(base, &mut p);
                self.oracle = Some(format!("synthetic:{}", p.display()));
            }
        }
    }

    /// Flags win over file values. Paths given on the command line are taken
    /// as-is (relative to the working directory).
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.iterations {
            self.search.iteration_limit = v;
        }
        if let Some(v) = o.k {
            self.search.k = v;
        }
        if let Some(v) = o.c {
            self.search.c = v;
        }
        if let Some(v) = o.z {
            self.search.z = v;
        }
        if let Some(v) = o.jobs {
            self.jobs = v;
        }
        if let Some(v) = &o.oracle {
            self.oracle = Some(v.clone());
        }
        if let Some(v) = &o.weights {
            self.weights = Some(v.clone());
            self.untrained = false;
        }
        if o.untrained {
            self.untrained = true;
            self.weights = None;
        }
        if let Some(v) = o.stop_on_first {
            self.search.stop_on_first_solution = v;
        }
        if let Some(v) = &o.stock {
            self.stock = Some(v.clone());
        }
        if let Some(v) = &o.output {
            self.output = v.clone();
        }
    }

    /// Checks parameters and that every referenced file exists.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.search.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.phase1_params().validate()?;
        if self.jobs == 0 {
            return Err(HarnessError::Config("jobs must be >= 1".into()));
        }
        let spec = self.oracle_spec()?;
        let mut files: Vec<&Path> = Vec::new();
        if let OracleSpec::Synthetic(p) = &spec {
            files.push(p);
        }
        if let OracleSpec::Remote(_) = &spec {
            if self.stock.is_none() {
                return Err(HarnessError::Config("a remote oracle needs a stock file".into()));
            }
        }
        files.extend(
            [&self.stock, &self.weights, &self.targets.train, &self.targets.validation, &self.targets.test]
                .into_iter()
                .flatten()
                .map(PathBuf::as_path),
        );
        for f in files {
            if !f.is_file() {
                return Err(HarnessError::Config(format!("referenced file {} does not exist", f.display())));
            }
        }
        Ok(())
    }

    pub fn oracle_spec(&self) -> Result<OracleSpec, HarnessError> {
        let s = self
            .oracle
            .as_deref()
            .ok_or_else(|| HarnessError::Config("no oracle configured".into()))?;
        OracleSpec::parse(s)
    }

    pub fn phase1_params(&self) -> Phase1Params {
        Phase1Params {
            epsilon1: self.phase1.epsilon1,
            epsilon2: self.phase1.epsilon2,
            window: self.phase1.window,
            max_rounds: self.phase1.max_rounds,
            accumulate: self.phase1.accumulate,
            search: self.search,
            train: self.train.clone(),
        }
    }

    /// Hash over everything that influences results. Files contribute their
    /// content digest rather than their path, and the output directory and
    /// worker count are left out, so moving a run elsewhere keeps its hash.
    pub fn config_hash(&self) -> Result<String, HarnessError> {
        let digest = |p: &Option<PathBuf>| -> Result<Value, HarnessError> {
            match p {
                Some(p) => Ok(Value::String(file_digest(p)?)),
                None => Ok(Value::Null),
            }
        };
        let oracle = match self.oracle_spec()? {
            OracleSpec::Synthetic(p) => json!({ "synthetic": file_digest(&p)? }),
            OracleSpec::Remote(ep) => json!({ "remote": format!("{ep:?}") }),
        };
        let doc = json!({
            "format": self.format,
            "seed": self.seed,
            "oracle": oracle,
            "stock": digest(&self.stock)?,
            "weights": digest(&self.weights)?,
            "untrained": self.untrained,
            "search": self.search,
            "phase1": self.phase1,
            "train": self.train,
            "targets": {
                "train": digest(&self.targets.train)?,
                "validation": digest(&self.targets.validation)?,
                "test": digest(&self.targets.test)?,
            },
            "bench": self.bench,
        });
        let bytes = serde_json::to_vec(&doc).expect("hash document serializes");
        Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
    }
}

fn file_digest(p: &Path) -> Result<String, HarnessError> {
    let bytes = std::fs::read(p).map_err(io_err(p))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// The configured oracle, local or remote.
pub enum LoadedOracle {
    Synthetic(SyntheticDomain),
    Remote(RemoteOracle),
}

impl ExpansionOracle for LoadedOracle {
    fn expand(&self, item: &Item, cfg: &OracleConfig) -> Result<Vec<TemplateAction>, OracleError> {
        match self {
            LoadedOracle::Synthetic(d) => d.expand(item, cfg),
            LoadedOracle::Remote(r) => r.expand(item, cfg),
        }
    }

    fn item(&self, id: &str) -> Result<Item, OracleError> {
        match self {
            LoadedOracle::Synthetic(d) => d.item(id),
            LoadedOracle::Remote(r) => r.item(id),
        }
    }
}

/// Everything a command needs, loaded and validated once.
pub struct Session {
    pub config: RunConfig,
    pub oracle: LoadedOracle,
    pub stock: Arc<StockSet>,
    pub config_hash: String,
    pool: rayon::ThreadPool,
}

impl Session {
    pub fn open(config: RunConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let config_hash = config.config_hash()?;
        let oracle = match config.oracle_spec()? {
            OracleSpec::Synthetic(p) => LoadedOracle::Synthetic(SyntheticDomain::load(&p)?),
            OracleSpec::Remote(ep) => LoadedOracle::Remote(RemoteOracle::connect(&ep, config.jobs)?),
        };
        let stock = match (&config.stock, &oracle) {
            (Some(p), _) => StockSet::load(p)?,
            (None, LoadedOracle::Synthetic(d)) => d.stock().clone(),
            (None, LoadedOracle::Remote(_)) => unreachable!("validate requires a stock file"),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        Ok(Session {
            config,
            oracle,
            stock: Arc::new(stock),
            config_hash,
            pool,
        })
    }

    pub fn provenance(&self, weights_version: Option<u64>) -> Value {
        json!({
            "config_hash": self.config_hash,
            "seed": self.config.seed,
            "weights_version": weights_version,
        })
    }

    fn weights(&self) -> Result<Option<EgnWeights>, HarnessError> {
        if self.config.untrained {
            return Ok(None);
        }
        match &self.config.weights {
            Some(p) => Ok(Some(EgnWeights::load(p)?)),
            None => Ok(None),
        }
    }

    fn targets(&self, file: &Option<PathBuf>, what: &str) -> Result<Vec<Item>, HarnessError> {
        let path = file
            .as_ref()
            .ok_or_else(|| HarnessError::Config(format!("no {what} target file configured")))?;
        let ids = read_id_list(path)?;
        if ids.is_empty() {
            return Err(HarnessError::Config(format!("{what} target file {} is empty", path.display())));
        }
        ids.iter().map(|id| Ok(self.oracle.item(id)?)).collect()
    }
}

/// One id per line; blank lines and `#` comments are skipped. Order is kept.
pub fn read_id_list(path: &Path) -> Result<Vec<String>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Collects written files and emits the manifest.
struct ArtifactWriter {
    dir: PathBuf,
    written: BTreeMap<String, String>,
}

impl ArtifactWriter {
    fn new(dir: &Path) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(ArtifactWriter {
            dir: dir.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, HarnessError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(&path, bytes.as_ref()).map_err(io_err(&path))?;
        self.record(name)?;
        Ok(path)
    }

    /// Registers a file some other routine already wrote.
    fn record(&mut self, name: &str) -> Result<(), HarnessError> {
        let digest = file_digest(&self.dir.join(name))?;
        self.written.insert(name.to_string(), digest);
        Ok(())
    }

    fn remove_stale(&self, name: &str) -> Result<(), HarnessError> {
        let path = self.dir.join(name);
        match std::fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn finish(mut self, command: &str, provenance: Value) -> Result<Vec<PathBuf>, HarnessError> {
        let artifacts: Vec<Value> = self
            .written
            .iter()
            .map(|(k, v)| json!({ "path": k, "sha256": v }))
            .collect();
        let doc = json!({
            "format": "egmcts-manifest/1",
            "command": command,
            "provenance": provenance,
            "artifacts": artifacts,
        });
        let names: Vec<String> = self.written.keys().cloned().collect();
        self.write("manifest.json", pretty(&doc))?;
        Ok(names.iter().map(|n| self.dir.join(n)).chain([self.dir.join("manifest.json")]).collect())
    }
}

fn pretty<T: Serialize + ?Sized>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanStatus {
    Solved,
    Unsolved,
}

impl PlanStatus {
    /// Shell exit code: 0 solved, 2 unsolved.
    pub fn exit_code(self) -> i32 {
        match self {
            PlanStatus::Solved => 0,
            PlanStatus::Unsolved => 2,
        }
    }
}

/// Plans one target. Writes `plan.json`, `route.json` when solved and
/// `tree.dot` when asked.
pub fn cmd_plan(session: &Session, target_id: &str, dump_tree: bool) -> Result<PlanStatus, HarnessError> {
    let cfg = &session.config;
    let weights = session.weights()?;
    let target = session.oracle.item(target_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["plan", target_id]));
    let (algorithm, result) = session.pool.install(|| match &weights {
        Some(w) => ("eg-mcts", plan(target, session.stock.clone(), &session.oracle, w, &cfg.search, &mut rng)),
        None => (
            "eg-mcts-0",
            plan_eg_mcts_0(target, session.stock.clone(), &session.oracle, &cfg.search, &mut rng),
        ),
    });
    let outcome = result.map_err(|source| HarnessError::Plan {
        target: target_id.into(),
        source,
    })?;
    let version = weights.as_ref().map(|w| w.version);
    let prov = session.provenance(version);
    let mut out = ArtifactWriter::new(&cfg.output)?;
    let doc = json!({
        "format": "egmcts-plan/1",
        "provenance": prov,
        "algorithm": algorithm,
        "outcome": outcome.summary(),
    });
    out.write("plan.json", pretty(&doc))?;
    if outcome.solved {
        let route = extract_route(&outcome.tree)?;
        out.write("route.json", route.to_json_with(Some(prov.clone())))?;
    } else {
        out.remove_stale("route.json")?;
    }
    if dump_tree {
        let dot = format!(
            "// config_hash={} seed={} weights_version={}\n{}",
            session.config_hash,
            cfg.seed,
            version.map_or("none".to_string(), |v| v.to_string()),
            outcome.tree.to_dot()
        );
        out.write("tree.dot", dot)?;
    } else {
        out.remove_stale("tree.dot")?;
    }
    out.finish("plan", prov)?;
    Ok(if outcome.solved {
        PlanStatus::Solved
    } else {
        PlanStatus::Unsolved
    })
}

/// Runs the experience-guided training loop. Writes the per-round files under
/// `phase1/`, the selected `weights.bin` and `train-report.json`.
pub fn cmd_train(session: &Session) -> Result<(), HarnessError> {
    let cfg = &session.config;
    let train = session.targets(&cfg.targets.train, "train")?;
    let val = session.targets(&cfg.targets.validation, "validation")?;
    let mut out = ArtifactWriter::new(&cfg.output)?;
    let phase_dir = cfg.output.join("phase1");
    // a rerun must not leave files from a longer earlier run behind
    if phase_dir.exists() {
        std::fs::remove_dir_all(&phase_dir).map_err(io_err(&phase_dir))?;
    }
    let params = cfg.phase1_params();
    let result = session
        .pool
        .install(|| run_phase1(&train, &val, session.stock.clone(), &session.oracle, &params, cfg.seed, Some(&phase_dir)))?;
    for entry in std::fs::read_dir(&phase_dir).map_err(io_err(&phase_dir))? {
        let entry = entry.map_err(io_err(&phase_dir))?;
        out.record(&format!("phase1/{}", entry.file_name().to_string_lossy()))?;
    }
    let prov = session.provenance(Some(result.weights.version));
    let wpath = cfg.output.join("weights.bin");
    result.weights.save(
        &wpath,
        json!({ "provenance": prov, "best_round": result.best_round }),
    )?;
    out.record("weights.bin")?;
    out.record("weights.bin.json")?;
    let report = json!({
        "format": "egmcts-train-report/1",
        "provenance": prov,
        "best_round": result.best_round,
        "validation": result.records,
        "experience_sizes": result.experience_sizes,
        "training": result.reports,
    });
    out.write("train-report.json", pretty(&report))?;
    out.write("validation.csv", validation_csv(&result.records))?;
    out.finish("train", prov)?;
    Ok(())
}

fn run_algorithm(session: &Session, alg: Algorithm, target: &Item, weights: Option<&EgnWeights>) -> Result<PlanOutcome, PlanError> {
    let cfg = &session.config;
    let s = &cfg.search;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["bench", alg.name(), &target.id]));
    let stock = session.stock.clone();
    let t = target.clone();
    match alg {
        Algorithm::EgMcts => plan(t, stock, &session.oracle, weights.expect("checked by caller"), s, &mut rng),
        Algorithm::EgMcts0 => plan_eg_mcts_0(t, stock, &session.oracle, s, &mut rng),
        Algorithm::GreedyDfs => plan_greedy_dfs(
            t,
            stock,
            &session.oracle,
            &DfsParams {
                max_depth: cfg.bench.dfs_max_depth,
                iteration_limit: s.iteration_limit,
                k: s.k,
            },
        ),
        Algorithm::MctsRollout => plan_mcts_rollout(
            t,
            stock,
            &session.oracle,
            &RolloutParams {
                max_rollout_depth: cfg.bench.rollout_depth,
                c: s.c,
                iteration_limit: s.iteration_limit,
                k: s.k,
                stop_on_first_solution: s.stop_on_first_solution,
            },
            &mut rng,
        ),
    }
}

pub fn parse_algorithms(names: &[String]) -> Result<Vec<Algorithm>, HarnessError> {
    if names.is_empty() {
        return Err(HarnessError::Config("no algorithms selected".into()));
    }
    names
        .iter()
        .map(|n| n.parse::<Algorithm>().map_err(HarnessError::Config))
        .collect()
}

/// Runs each planner over the test targets and writes the per-run rows plus
/// the success-rate and route-length tables.
pub fn cmd_bench(session: &Session, algorithms: &[Algorithm]) -> Result<Vec<BenchmarkRow>, HarnessError> {
    let cfg = &session.config;
    let targets = session.targets(&cfg.targets.test, "test")?;
    let weights = if algorithms.contains(&Algorithm::EgMcts) {
        let w = session.weights()?;
        if w.is_none() {
            return Err(HarnessError::Config("eg-mcts needs --weights".into()));
        }
        w
    } else {
        None
    };
    let mut rows = Vec::new();
    for &alg in algorithms {
        let results: Vec<Result<BenchmarkRow, HarnessError>> = session.pool.install(|| {
            targets
                .par_iter()
                .map(|t| {
                    let o = run_algorithm(session, alg, t, weights.as_ref()).map_err(|source| HarnessError::Plan {
                        target: t.id.clone(),
                        source,
                    })?;
                    let route_length = if o.solved {
                        Some(extract_route(&o.tree)?.len())
                    } else {
                        None
                    };
                    Ok(BenchmarkRow {
                        algorithm: alg.name().into(),
                        target: t.id.clone(),
                        solved: o.solved,
                        iterations: o.iterations_to_first_solution.unwrap_or(o.iterations_run),
                        expanded_reaction_nodes: o.expanded_reaction_nodes,
                        expanded_molecule_nodes: o.expanded_molecule_nodes,
                        route_length,
                    })
                })
                .collect()
        });
        for r in results {
            rows.push(r?);
        }
    }
    let summary = aggregate(&rows, cfg.search.iteration_limit, &cfg.bench.limits)?;
    let prov = session.provenance(weights.as_ref().map(|w| w.version));
    let mut out = ArtifactWriter::new(&cfg.output)?;
    out.write("bench-rows.csv", rows_csv(&rows)?)?;
    out.write("bench-efficiency.csv", summary.efficiency_csv()?)?;
    out.write("bench-lengths.csv", summary.length_csv()?)?;
    out.write(
        "bench-summary.json",
        pretty(&json!({ "format": "egmcts-bench/1", "provenance": prov, "summary": summary })),
    )?;
    out.finish("bench", prov)?;
    Ok(rows)
}

/// Inputs of the network-building command.
#[derive(Debug, Clone)]
pub struct NocJob {
    pub records: PathBuf,
    pub stock: PathBuf,
    pub output: PathBuf,
    pub min_outdegree: usize,
    pub min_cost: usize,
    /// Greedy DFS limit for the hardness screen; needs `oracle`.
    pub screen_limit: Option<usize>,
    pub oracle: Option<String>,
    pub split: Option<(usize, usize, usize)>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NocSummary {
    pub nodes: usize,
    pub edges: usize,
    pub candidates: usize,
    pub targets: usize,
}

pub fn cmd_noc(job: &NocJob) -> Result<NocSummary, HarnessError> {
    let records = load_records(&job.records)?;
    let stock = Arc::new(StockSet::load(&job.stock)?);
    let g = build_noc(&records, &stock);
    let candidates = g.filter_targets(job.min_outdegree, job.min_cost);
    let mut targets = candidates.clone();
    let mut screen_errors = Vec::new();
    if let Some(limit) = job.screen_limit {
        let spec = job
            .oracle
            .as_deref()
            .ok_or_else(|| HarnessError::Config("the hardness screen needs an oracle".into()))?;
        let oracle = match OracleSpec::parse(spec)? {
            OracleSpec::Synthetic(p) => LoadedOracle::Synthetic(SyntheticDomain::load(&p)?),
            OracleSpec::Remote(ep) => LoadedOracle::Remote(RemoteOracle::connect(&ep, 1)?),
        };
        let screened = hardness_screen(&candidates, stock.clone(), &oracle, limit);
        targets = screened.hard;
        screen_errors = screened.errors;
    }
    let prov = json!({
        "records_sha256": file_digest(&job.records)?,
        "stock_sha256": file_digest(&job.stock)?,
        "seed": job.seed,
        "min_outdegree": job.min_outdegree,
        "min_cost": job.min_cost,
        "screen_limit": job.screen_limit,
    });
    let mut out = ArtifactWriter::new(&job.output)?;
    out.write("noc-nodes.csv", g.nodes_csv())?;
    out.write("noc-edges.csv", g.edges_csv())?;
    let mut listing = targets.join("\n");
    if !listing.is_empty() {
        listing.push('\n');
    }
    out.write("targets.txt", listing)?;
    if !screen_errors.is_empty() {
        out.write("screen-errors.json", pretty(&screen_errors))?;
    }
    if let Some(sizes) = job.split {
        let manifest = split_targets(&targets, sizes, job.seed)?;
        out.write("split.json", pretty(&json!({ "provenance": prov, "split": manifest })))?;
    }
    out.finish("noc", prov)?;
    Ok(NocSummary {
        nodes: g.node_count(),
        edges: g.edges().count(),
        candidates: candidates.len(),
        targets: targets.len(),
    })
}

/// Matching degree of a generated route against a reference route file.
pub fn cmd_match(generated: &Path, reference: &Path) -> Result<Value, HarnessError> {
    let g = Route::load(generated)?;
    let r = Route::load(reference)?;
    let report = matching_degree(&g, &r)?;
    Ok(json!({
        "generated": g.target,
        "reference": r.target,
        "matched_steps": report.matched_steps,
        "total_steps": report.total_steps,
        "degree": report.degree,
    }))
}

/// Inputs of the synthetic-suite generator.
#[derive(Debug, Clone)]
pub struct GenerateJob {
    pub output: PathBuf,
    pub seed: u64,
    pub profile: DomainProfile,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub difficulty: (usize, usize),
}

impl Default for GenerateJob {
    fn default() -> Self {
        GenerateJob {
            output: PathBuf::from("egmcts-suite"),
            seed: 0,
            profile: DomainProfile::default(),
            train: 200,
            validation: 50,
            test: 50,
            difficulty: (2, 6),
        }
    }
}

/// Writes a random synthetic domain, disjoint target lists and a config that
/// points at them.
pub fn cmd_generate(job: &GenerateJob) -> Result<PathBuf, HarnessError> {
    let domain = SyntheticDomain::random(job.seed, &job.profile)?;
    let total = job.train + job.validation + job.test;
    let instances = domain.generate_instances(total, job.difficulty)?;
    let mut out = ArtifactWriter::new(&job.output)?;
    out.write("domain.json", domain.to_json() + "\n")?;
    let ids = |r: std::ops::Range<usize>| {
        let mut s: String = instances[r].iter().map(|i| format!("{}\n", i.target)).collect();
        if s.is_empty() {
            s.push('\n');
        }
        s
    };
    let (a, b) = (job.train, job.train + job.validation);
    out.write("train.txt", ids(0..a))?;
    out.write("validation.txt", ids(a..b))?;
    out.write("test.txt", ids(b..total))?;
    out.write("test-instances.json", pretty(&instances[b..total]))?;
    let cfg = RunConfig {
        seed: job.seed,
        oracle: Some("synthetic:domain.json".into()),
        output: PathBuf::from("out"),
        targets: TargetFiles {
            train: Some("train.txt".into()),
            validation: Some("validation.txt".into()),
            test: Some("test.txt".into()),
        },
        ..RunConfig::default()
    };
    let path = out.write("config.toml", cfg.to_toml())?;
    out.finish("generate", json!({ "seed": job.seed }))?;
    Ok(path)
}
