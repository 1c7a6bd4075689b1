//! Self-play training: plan, harvest reaction-node values as experience,
//! train the guidance network, validate, and repeat while validation keeps
//! improving.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::egn::{self, EgnError, EgnWeights, Sample, SparseInput, TrainConfig, TrainReport};
use crate::fingerprint::Fingerprint;
use crate::problem::{ExpansionOracle, Item, StockSet};
use crate::search::{plan, PlanError, PlanOutcome, Scorer, SearchParams};
use crate::seed::derive_seed;
use crate::tree::SearchTree;

#[derive(Debug, Error)]
pub enum Phase1Error {
    #[error("invalid phase-1 parameters: {0}")]
    InvalidParams(String),
    #[error("round {round}: {source}")]
    Plan {
        round: usize,
        #[source]
        source: PlanError,
        /// Validation records of the rounds completed before the failure.
        completed: Vec<ValidationRecord>,
    },
    #[error(transparent)]
    Egn(#[from] EgnError),
    #[error("artifact io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Error-free floating point sum: a list of non-overlapping partials whose
/// exact sum is the sum of everything added.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn add(&mut self, mut x: f64) {
        let mut kept = 0;
        for i in 0..self.partials.len() {
            let mut y = self.partials[i];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        self.partials.truncate(kept);
        self.partials.push(x);
    }

    /// The exact sum rounded once to the nearest double.
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let Some((&top, rest)) = p.split_last() else {
            return 0.0;
        };
        let mut hi = top;
        let mut lo = 0.0;
        let mut i = rest.len();
        while i > 0 {
            i -= 1;
            let x = hi;
            let y = rest[i];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // half-way correction, as in the classic msum
        if i > 0 && ((lo < 0.0 && rest[i - 1] < 0.0) || (lo > 0.0 && rest[i - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

/// Identity of one decomposition action.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExperienceKey {
    pub item: String,
    pub template: String,
    pub reactants: String,
}

#[derive(Debug, Clone)]
pub struct RawExperience {
    pub key: ExperienceKey,
    pub q_bar: f64,
    pub mol_fp: Fingerprint,
    pub tmpl_fp: Fingerprint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceEntry {
    pub mol_fp: Fingerprint,
    pub tmpl_fp: Fingerprint,
    sum: ExactSum,
    pub occurrences: u64,
}

impl ExperienceEntry {
    pub fn mean(&self) -> f64 {
        // the exactly rounded sum divided once; independent of merge order
        self.sum.value() / self.occurrences as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperienceSet {
    entries: BTreeMap<ExperienceKey, ExperienceEntry>,
    pub round: usize,
}

/// One serialized experience line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub item: String,
    pub template: String,
    pub reactants: String,
    pub mean: f64,
    pub count: u64,
}

impl ExperienceSet {
    pub fn new(round: usize) -> Self {
        ExperienceSet {
            entries: BTreeMap::new(),
            round,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &ExperienceKey) -> Option<&ExperienceEntry> {
        self.entries.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ExperienceKey, &ExperienceEntry)> {
        self.entries.iter()
    }

    /// Training pairs in key order with targets clamped into [0, 1].
    pub fn samples(&self) -> Vec<Sample> {
        self.entries
            .values()
            .map(|e| Sample {
                input: SparseInput::from_fingerprints(&e.mol_fp, &e.tmpl_fp),
                target: e.mean().clamp(0.0, 1.0),
            })
            .collect()
    }

    pub fn records(&self) -> Vec<ExperienceRecord> {
        self.entries
            .iter()
            .map(|(k, e)| ExperienceRecord {
                item: k.item.clone(),
                template: k.template.clone(),
                reactants: k.reactants.clone(),
                mean: e.mean(),
                count: e.occurrences,
            })
            .collect()
    }

    /// Newline-delimited JSON, sorted by key.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// One entry per reaction node, carrying its final q̄.
pub fn collect_experience(tree: &SearchTree) -> Vec<RawExperience> {
    tree.reactions()
        .map(|(_, r)| {
            let product = &tree.mol(r.parent).item;
            RawExperience {
                key: ExperienceKey {
                    item: product.id.clone(),
                    template: r.action.template_id.clone(),
                    reactants: r.action.reactant_key(),
                },
                q_bar: r.q_bar,
                mol_fp: product.fingerprint,
                tmpl_fp: r.action.fingerprint,
            }
        })
        .collect()
}

pub fn merge_experience(raw: Vec<RawExperience>, mut into: ExperienceSet) -> ExperienceSet {
    for r in raw {
        let e = into.entries.entry(r.key).or_insert_with(|| ExperienceEntry {
            mol_fp: r.mol_fp,
            tmpl_fp: r.tmpl_fp,
            sum: ExactSum::default(),
            occurrences: 0,
        });
        e.sum.add(r.q_bar);
        e.occurrences += 1;
    }
    into
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Params {
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub window: usize,
    pub max_rounds: usize,
    /// Train on the union of all rounds' experience instead of the current
    /// round only.
    pub accumulate: bool,
    pub search: SearchParams,
    pub train: TrainConfig,
}

impl Default for Phase1Params {
    fn default() -> Self {
        Phase1Params {
            epsilon1: 0.015,
            epsilon2: 3.0,
            window: 5,
            max_rounds: 10,
            accumulate: false,
            search: SearchParams::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Phase1Params {
    pub fn validate(&self) -> Result<(), Phase1Error> {
        let bad = |m: &str| Err(Phase1Error::InvalidParams(m.into()));
        if !(self.epsilon1 > 0.0) || !(self.epsilon2 > 0.0) {
            return bad("epsilon1 and epsilon2 must be positive");
        }
        if self.window == 0 {
            return bad("window must be >= 1");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be >= 1");
        }
        self.search
            .validate()
            .map_err(|e| Phase1Error::InvalidParams(e.to_string()))?;
        self.train.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub round: usize,
    pub success_rate: f64,
    pub avg_iterations: f64,
}

impl ValidationRecord {
    /// Success rate and mean iterations-to-first-solution, counting unsolved
    /// targets at the iteration limit.
    pub fn from_outcomes(round: usize, outcomes: &[PlanOutcome], limit: usize) -> Self {
        let n = outcomes.len().max(1) as f64;
        let solved = outcomes.iter().filter(|o| o.solved).count();
        let iters: usize = outcomes
            .iter()
            .map(|o| o.iterations_to_first_solution.unwrap_or(limit))
            .sum();
        ValidationRecord {
            round,
            success_rate: solved as f64 / n,
            avg_iterations: iters as f64 / n,
        }
    }

    /// Higher success rate first, then fewer iterations.
    pub fn better_than(&self, other: &ValidationRecord) -> bool {
        self.success_rate > other.success_rate
            || (self.success_rate == other.success_rate && self.avg_iterations < other.avg_iterations)
    }
}

/// Loop condition over the last `p.window` records of `history`.
pub fn should_continue(history: &[ValidationRecord], current: &ValidationRecord, p: &Phase1Params) -> bool {
    let recent = &history[history.len().saturating_sub(p.window)..];
    if recent.is_empty() {
        return true;
    }
    let best_rate = recent.iter().map(|r| r.success_rate).fold(f64::NEG_INFINITY, f64::max);
    let best_iters = recent.iter().map(|r| r.avg_iterations).fold(f64::INFINITY, f64::min);
    current.success_rate - best_rate > p.epsilon1 || best_iters - current.avg_iterations > p.epsilon2
}

#[derive(Debug, Clone)]
pub struct Phase1Result {
    /// Weights of the best validation round.
    pub weights: EgnWeights,
    pub best_round: usize,
    pub records: Vec<ValidationRecord>,
    pub reports: Vec<TrainReport>,
    pub experience_sizes: Vec<usize>,
}

/// Plans every target in parallel with per-target seeds derived from
/// `(seed, label, target id)`. Results come back in target order.
pub fn plan_targets<O, S>(
    targets: &[Item],
    stock: &Arc<StockSet>,
    oracle: &O,
    scorer: &S,
    params: &SearchParams,
    seed: u64,
    label: &str,
) -> Vec<Result<PlanOutcome, PlanError>>
where
    O: ExpansionOracle + ?Sized,
    S: Scorer + ?Sized,
{
    targets
        .par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[label, &t.id]));
            plan(t.clone(), stock.clone(), oracle, scorer, params, &mut rng)
        })
        .collect()
}

fn collect_ok(round: usize, results: Vec<Result<PlanOutcome, PlanError>>, done: &[ValidationRecord]) -> Result<Vec<PlanOutcome>, Phase1Error> {
    results
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| Phase1Error::Plan {
            round,
            source,
            completed: done.to_vec(),
        })
}

/// The full loop with the planning-based validator.
pub fn run_phase1<O: ExpansionOracle + ?Sized>(
    train_targets: &[Item],
    validation_targets: &[Item],
    stock: Arc<StockSet>,
    oracle: &O,
    p: &Phase1Params,
    seed: u64,
    artifacts: Option<&Path>,
) -> Result<Phase1Result, Phase1Error> {
    let validator = |w: &EgnWeights, round: usize, done: &[ValidationRecord]| {
        let label = format!("validate-{round}");
        let results = plan_targets(validation_targets, &stock, oracle, w, &p.search, seed, &label);
        let outcomes = collect_ok(round, results, done)?;
        Ok(ValidationRecord::from_outcomes(round, &outcomes, p.search.iteration_limit))
    };
    run_phase1_with(train_targets, stock.clone(), oracle, p, seed, artifacts, validator)
}

/// Same as [`run_phase1`] with a caller-supplied validator.
pub fn run_phase1_with<O, V>(
    train_targets: &[Item],
    stock: Arc<StockSet>,
    oracle: &O,
    p: &Phase1Params,
    seed: u64,
    artifacts: Option<&Path>,
    mut validator: V,
) -> Result<Phase1Result, Phase1Error>
where
    O: ExpansionOracle + ?Sized,
    V: FnMut(&EgnWeights, usize, &[ValidationRecord]) -> Result<ValidationRecord, Phase1Error>,
{
    p.validate()?;
    if train_targets.is_empty() {
        return Err(Phase1Error::InvalidParams("no training targets".into()));
    }
    if let Some(dir) = artifacts {
        std::fs::create_dir_all(dir).map_err(|source| Phase1Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let mut weights = EgnWeights::random(derive_seed(seed, &["init"]));
    let mut pool = ExperienceSet::new(0);
    let mut records: Vec<ValidationRecord> = Vec::new();
    let mut reports = Vec::new();
    let mut experience_sizes = Vec::new();
    let mut best: Option<(ValidationRecord, EgnWeights)> = None;

    for round in 1..=p.max_rounds {
        let label = format!("train-{round}");
        let results = plan_targets(train_targets, &stock, oracle, &weights, &p.search, seed, &label);
        let outcomes = collect_ok(round, results, &records)?;
        let raw: Vec<RawExperience> = outcomes.iter().flat_map(|o| collect_experience(&o.tree)).collect();
        let base = if p.accumulate {
            std::mem::take(&mut pool)
        } else {
            ExperienceSet::new(round)
        };
        let mut set = merge_experience(raw, base);
        set.round = round;

        let cfg = TrainConfig {
            seed: derive_seed(seed, &["train", &round.to_string()]),
            ..p.train.clone()
        };
        let (mut next, report) = egn::train(&weights, &set.samples(), &cfg)?;
        next.round = round as u32;
        experience_sizes.push(set.len());

        let version = next.version;
        let current = validator(&next, round, &records)?;
        debug_assert_eq!(next.version, version);

        if let Some(dir) = artifacts {
            write_round_artifacts(dir, round, &set, &next, seed)?;
        }
        let keep_going = should_continue(&records, &current, p);
        records.push(current);
        if let Some(dir) = artifacts {
            write_validation_log(dir, &records)?;
        }
        if best.as_ref().is_none_or(|(b, _)| current.better_than(b)) {
            best = Some((current, next.clone()));
        }
        reports.push(report);
        weights = next;
        if p.accumulate {
            pool = set;
        }
        if !keep_going {
            break;
        }
    }
    let (best_record, best_weights) = best.expect("at least one round runs");
    Ok(Phase1Result {
        weights: best_weights,
        best_round: best_record.round,
        records,
        reports,
        experience_sizes,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Phase1Error + '_ {
    move |source| Phase1Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_round_artifacts(dir: &Path, round: usize, set: &ExperienceSet, w: &EgnWeights, seed: u64) -> Result<(), Phase1Error> {
    let exp = dir.join(format!("round-{round:03}-experience.ndjson"));
    std::fs::write(&exp, set.to_ndjson()).map_err(io_err(&exp))?;
    let wpath = dir.join(format!("round-{round:03}-weights.bin"));
    w.save(&wpath, serde_json::json!({ "seed": seed, "round": round, "experience": set.len() }))?;
    Ok(())
}

pub fn validation_csv(records: &[ValidationRecord]) -> String {
    let mut out = String::from("round,R_s,R_a\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.round, r.success_rate, r.avg_iterations);
    }
    out
}

fn write_validation_log(dir: &Path, records: &[ValidationRecord]) -> Result<(), Phase1Error> {
    let path = dir.join("validation.csv");
    std::fs::write(&path, validation_csv(records)).map_err(io_err(&path))
}
