//! Reaction network construction from generic reaction records, node
//! statistics, target filtering and dataset splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{plan_greedy_dfs, DfsParams};
use crate::problem::{ExpansionOracle, StockSet, DEFAULT_TOP_K};

#[derive(Debug, Error)]
pub enum NocError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("record {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error("split needs {needed} targets but only {available} are available")]
    NotEnoughTargets { needed: usize, available: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReactionRecord {
    pub reactants: Vec<String>,
    pub products: Vec<String>,
}

impl ReactionRecord {
    pub fn new<S: Into<String>>(reactants: impl IntoIterator<Item = S>, products: impl IntoIterator<Item = S>) -> Self {
        ReactionRecord {
            reactants: reactants.into_iter().map(Into::into).collect(),
            products: products.into_iter().map(Into::into).collect(),
        }
    }
}

/// Parses newline-delimited JSON records; blank lines are skipped.
pub fn parse_records(text: &str) -> Result<Vec<ReactionRecord>, NocError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: ReactionRecord = serde_json::from_str(line).map_err(|e| NocError::BadRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if rec.reactants.is_empty() || rec.products.is_empty() {
            return Err(NocError::BadRecord {
                line: i + 1,
                reason: "reactants and products must be non-empty".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<ReactionRecord>, NocError> {
    let text = std::fs::read_to_string(path).map_err(|source| NocError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_records(&text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NocGraph {
    /// Node id → is-stock flag.
    nodes: BTreeMap<String, bool>,
    /// Directed reactant → product edges.
    edges: BTreeSet<(String, String)>,
    parents: HashMap<String, Vec<String>>,
    outdegree: HashMap<String, usize>,
}

/// Synchronous fixed-point construction. In each pass a record fires if all
/// its reactants were in the graph when the pass started; its products that
/// are not yet in the graph are added with edges from every reactant. The
/// result does not depend on record order and has no cycles.
pub fn build_noc(records: &[ReactionRecord], stock: &StockSet) -> NocGraph {
    let mut nodes: BTreeMap<String, bool> = stock.sorted_ids().into_iter().map(|s| (s.to_string(), true)).collect();
    let mut edges = BTreeSet::new();
    loop {
        let mut added: BTreeSet<&str> = BTreeSet::new();
        let mut new_edges = Vec::new();
        for r in records {
            if !r.reactants.iter().all(|x| nodes.contains_key(x)) {
                continue;
            }
            for p in &r.products {
                if nodes.contains_key(p) {
                    continue;
                }
                added.insert(p);
                for x in &r.reactants {
                    new_edges.push((x.clone(), p.clone()));
                }
            }
        }
        if added.is_empty() {
            break;
        }
        for p in added {
            nodes.insert(p.to_string(), false);
        }
        edges.extend(new_edges);
    }
    let mut parents: HashMap<String, Vec<String>> = HashMap::new();
    let mut outdegree: HashMap<String, usize> = HashMap::new();
    for (a, b) in &edges {
        parents.entry(b.clone()).or_default().push(a.clone());
        *outdegree.entry(a.clone()).or_default() += 1;
    }
    NocGraph {
        nodes,
        edges,
        parents,
        outdegree,
    }
}

impl NocGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&str, bool)> {
        self.nodes.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn is_stock(&self, id: &str) -> Option<bool> {
        self.nodes.get(id).copied()
    }

    pub fn parents(&self, id: &str) -> &[String] {
        self.parents.get(id).map_or(&[], Vec::as_slice)
    }

    pub fn outdegree(&self, id: &str) -> Result<usize, NocError> {
        if !self.contains(id) {
            return Err(NocError::UnknownNode(id.into()));
        }
        Ok(self.outdegree.get(id).copied().unwrap_or(0))
    }

    /// Longest path, in edges, from `id` back to a node without parents.
    pub fn node_cost(&self, id: &str) -> Result<usize, NocError> {
        if !self.contains(id) {
            return Err(NocError::UnknownNode(id.into()));
        }
        Ok(self.costs()[id])
    }

    /// Costs of every node, by memoized longest-path over parents.
    pub fn costs(&self) -> HashMap<&str, usize> {
        let mut memo: HashMap<&str, usize> = HashMap::with_capacity(self.nodes.len());
        for start in self.nodes.keys() {
            if memo.contains_key(start.as_str()) {
                continue;
            }
            // iterative post-order so deep chains do not overflow the stack
            let mut stack: Vec<(&str, bool)> = vec![(start, false)];
            while let Some((v, ready)) = stack.pop() {
                if memo.contains_key(v) {
                    continue;
                }
                let ps = self.parents(v);
                if ready || ps.is_empty() {
                    let c = ps.iter().map(|p| memo[p.as_str()] + 1).max().unwrap_or(0);
                    memo.insert(v, c);
                } else {
                    stack.push((v, true));
                    for p in ps {
                        if !memo.contains_key(p.as_str()) {
                            stack.push((p, false));
                        }
                    }
                }
            }
        }
        memo
    }

    /// Kahn's algorithm; true when every node can be ordered.
    pub fn is_acyclic(&self) -> bool {
        let mut indeg: HashMap<&str, usize> = self.nodes.keys().map(|k| (k.as_str(), 0)).collect();
        let mut children: HashMap<&str, Vec<&str>> = HashMap::new();
        for (a, b) in self.edges() {
            *indeg.get_mut(b).expect("edge target is a node") += 1;
            children.entry(a).or_default().push(b);
        }
        let mut queue: Vec<&str> = indeg.iter().filter(|(_, &d)| d == 0).map(|(k, _)| *k).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop() {
            seen += 1;
            for &c in children.get(v).map_or(&[][..], Vec::as_slice) {
                let d = indeg.get_mut(c).expect("child is a node");
                *d -= 1;
                if *d == 0 {
                    queue.push(c);
                }
            }
        }
        seen == self.nodes.len()
    }

    /// Non-stock nodes meeting both thresholds, sorted.
    pub fn filter_targets(&self, min_outdegree: usize, min_cost: usize) -> Vec<String> {
        let costs = self.costs();
        self.nodes
            .iter()
            .filter(|(id, &stock)| {
                !stock && self.outdegree.get(id.as_str()).copied().unwrap_or(0) >= min_outdegree && costs[id.as_str()] >= min_cost
            })
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// `id,is_stock,outdegree,cost` rows sorted by id.
    pub fn nodes_csv(&self) -> String {
        let costs = self.costs();
        let mut out = String::from("id,is_stock,outdegree,cost\n");
        for (id, stock) in self.nodes() {
            let _ = writeln!(out, "{},{},{},{}", csv_field(id), stock, self.outdegree.get(id).copied().unwrap_or(0), costs[id]);
        }
        out
    }

    pub fn edges_csv(&self) -> String {
        let mut out = String::from("source,target\n");
        for (a, b) in self.edges() {
            let _ = writeln!(out, "{},{}", csv_field(a), csv_field(b));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenResult {
    /// Candidates the depth-first baseline could not solve within the limit.
    pub hard: Vec<String>,
    /// Candidates whose screening failed, with the error message.
    pub errors: Vec<(String, String)>,
}

/// Keeps the candidates that greedy depth-first search fails to solve within
/// `screen_limit` iterations. Oracle errors are recorded per candidate.
pub fn hardness_screen<O: ExpansionOracle + ?Sized>(
    candidates: &[String],
    stock: Arc<StockSet>,
    oracle: &O,
    screen_limit: usize,
) -> ScreenResult {
    let params = DfsParams {
        iteration_limit: screen_limit.max(1),
        k: DEFAULT_TOP_K,
        ..DfsParams::default()
    };
    let mut out = ScreenResult::default();
    for id in candidates {
        if stock.contains(id) {
            continue;
        }
        let item = match oracle.item(id) {
            Ok(i) => i,
            Err(e) => {
                out.errors.push((id.clone(), e.to_string()));
                continue;
            }
        };
        match plan_greedy_dfs(item, stock.clone(), oracle, &params) {
            Ok(o) if !o.solved => out.hard.push(id.clone()),
            Ok(_) => {}
            Err(e) => out.errors.push((id.clone(), e.to_string())),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle of the sorted ids, then consecutive slices.
pub fn split_targets(ids: &[String], sizes: (usize, usize, usize), seed: u64) -> Result<SplitManifest, NocError> {
    let needed = sizes.0 + sizes.1 + sizes.2;
    let mut pool: Vec<String> = ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if pool.len() < needed {
        return Err(NocError::NotEnoughTargets {
            needed,
            available: pool.len(),
        });
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = pool.into_iter();
    let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
    Ok(SplitManifest {
        seed,
        train: take(sizes.0),
        validation: take(sizes.1),
        test: take(sizes.2),
    })
}
