//! Routes: extraction from a solved tree, validity checks, the exhaustive
//! optimum oracle and the matching degree against a reference route.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{ExpansionOracle, Item, OracleConfig, OracleError, StockSet, TemplateAction};
use crate::tree::{MolId, NodeRef, SearchTree, Status};

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("tree root is not solved")]
    NotSolved,
    #[error("inconsistent tree: {0}")]
    InconsistentTree(String),
    #[error("route has no steps")]
    EmptyRoute,
    #[error("route file {path}: {reason}")]
    File { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteStep {
    pub product: String,
    pub template_id: String,
    pub reactants: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub target: String,
    pub steps: Vec<RouteStep>,
}

/// On-disk route document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteFile {
    pub format: String,
    pub target: String,
    pub steps: Vec<RouteStep>,
    /// Items that are never decomposed, sorted.
    pub leaves: Vec<String>,
    /// Free-form run metadata written by the harness.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

const ROUTE_FORMAT: &str = "egmcts-route/1";

impl Route {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Items that appear but are never the product of a later step.
    pub fn leaves(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.steps.is_empty() {
            out.push(self.target.clone());
        }
        for (i, s) in self.steps.iter().enumerate() {
            for r in &s.reactants {
                if !self.steps[i + 1..].iter().any(|l| &l.product == r) {
                    out.push(r.clone());
                }
            }
        }
        out.sort();
        out
    }

    pub fn to_file(&self) -> RouteFile {
        RouteFile {
            format: ROUTE_FORMAT.into(),
            target: self.target.clone(),
            steps: self.steps.clone(),
            leaves: self.leaves(),
            provenance: None,
        }
    }

    pub fn to_json(&self) -> String {
        self.to_json_with(None)
    }

    pub fn to_json_with(&self, provenance: Option<serde_json::Value>) -> String {
        let file = RouteFile {
            provenance,
            ..self.to_file()
        };
        let mut s = serde_json::to_string_pretty(&file).expect("route serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, RouteError> {
        let f: RouteFile = serde_json::from_str(text).map_err(|e| RouteError::File {
            path: "<string>".into(),
            reason: e.to_string(),
        })?;
        Ok(Route {
            target: f.target,
            steps: f.steps,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RouteError> {
        let text = std::fs::read_to_string(path).map_err(|e| RouteError::File {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            RouteError::File { reason, .. } => RouteError::File {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }
}

/// Breadth-first walk from the root taking, for each non-stock molecule,
/// its successful reaction child with the highest q̄.
pub fn extract_route(tree: &SearchTree) -> Result<Route, RouteError> {
    if tree.root().status != Status::Success {
        return Err(RouteError::NotSolved);
    }
    let mut steps = Vec::new();
    let mut queue = VecDeque::from([SearchTree::ROOT]);
    while let Some(m) = queue.pop_front() {
        let node = tree.mol(m);
        if node.in_stock {
            continue;
        }
        let mut best = None;
        for &r in &node.children {
            let rxn = tree.rxn(r);
            if rxn.status == Status::Success && best.is_none_or(|b: crate::tree::RxnId| rxn.q_bar > tree.rxn(b).q_bar) {
                best = Some(r);
            }
        }
        let r = best.ok_or_else(|| {
            RouteError::InconsistentTree(format!("molecule {} on the success path has no successful reaction", node.item.id))
        })?;
        let rxn = tree.rxn(r);
        steps.push(RouteStep {
            product: node.item.id.clone(),
            template_id: rxn.action.template_id.clone(),
            reactants: rxn.children.iter().map(|&c| tree.mol(c).item.id.clone()).collect(),
        });
        queue.extend(rxn.children.iter().copied());
    }
    Ok(Route {
        target: tree.root().item.id.clone(),
        steps,
    })
}

/// Checks step ordering and that every leaf is in stock.
pub fn validate_route(route: &Route, stock: &StockSet) -> bool {
    for (i, s) in route.steps.iter().enumerate() {
        let ordered = s.product == route.target || route.steps[..i].iter().any(|e| e.reactants.contains(&s.product));
        if !ordered || s.reactants.is_empty() {
            return false;
        }
    }
    route.leaves().iter().all(|l| stock.contains(l))
}

/// [`validate_route`] plus: every step is an action the oracle proposes for
/// its product.
pub fn validate_route_with_oracle<O: ExpansionOracle + ?Sized>(
    route: &Route,
    stock: &StockSet,
    oracle: &O,
) -> Result<bool, OracleError> {
    if !validate_route(route, stock) {
        return Ok(false);
    }
    for s in &route.steps {
        let item = oracle.item(&s.product)?;
        let key = crate::problem::reactant_key(s.reactants.iter().map(String::as_str));
        let actions = oracle.expand(&item, &OracleConfig { k: usize::MAX })?;
        if !actions.iter().any(|a| a.template_id == s.template_id && a.reactant_key() == key) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Minimal number of reactions reducing `target` to stock, searching all
/// routes of at most `cap` reactions. Memoized on (item id, budget).
pub fn brute_force_solve<O: ExpansionOracle + ?Sized>(
    target: &Item,
    stock: &StockSet,
    oracle: &O,
    cap: usize,
) -> Result<Option<usize>, OracleError> {
    struct Solver<'a, O: ?Sized> {
        stock: &'a StockSet,
        oracle: &'a O,
        expansions: HashMap<String, Vec<TemplateAction>>,
        memo: HashMap<(String, usize), Option<usize>>,
    }

    impl<O: ExpansionOracle + ?Sized> Solver<'_, O> {
        fn cost(&mut self, item: &Item, budget: usize) -> Result<Option<usize>, OracleError> {
            if self.stock.contains(&item.id) {
                return Ok(Some(0));
            }
            if budget == 0 {
                return Ok(None);
            }
            if let Some(&c) = self.memo.get(&(item.id.clone(), budget)) {
                return Ok(c);
            }
            if !self.expansions.contains_key(&item.id) {
                let actions = self.oracle.expand(item, &OracleConfig { k: usize::MAX })?;
                self.expansions.insert(item.id.clone(), actions);
            }
            let actions = self.expansions[&item.id].clone();
            let mut best: Option<usize> = None;
            'actions: for a in &actions {
                let mut total = 1;
                for r in &a.reactants {
                    match self.cost(r, budget - 1)? {
                        Some(c) if total + c <= budget => total += c,
                        _ => continue 'actions,
                    }
                }
                best = Some(best.map_or(total, |b| b.min(total)));
            }
            self.memo.insert((item.id.clone(), budget), best);
            Ok(best)
        }
    }

    let mut solver = Solver {
        stock,
        oracle,
        expansions: HashMap::new(),
        memo: HashMap::new(),
    };
    solver.cost(target, cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matched_steps: usize,
    pub total_steps: usize,
    pub degree: f64,
}

fn is_sub_multiset(small: &[String], big: &[String]) -> bool {
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for b in big {
        *counts.entry(b).or_default() += 1;
    }
    for s in small {
        let c = counts.entry(s).or_default();
        *c -= 1;
        if *c < 0 {
            return false;
        }
    }
    true
}

/// In-order matching of generated steps against the reference. A step
/// matches a reference step at or after the cursor with the same product
/// whose reactants contain the generated reactants.
pub fn matching_degree(generated: &Route, reference: &Route) -> Result<MatchReport, RouteError> {
    if generated.is_empty() || reference.is_empty() {
        return Err(RouteError::EmptyRoute);
    }
    let mut cursor = 0;
    let mut matched = 0;
    for g in &generated.steps {
        if let Some(off) = reference.steps[cursor..]
            .iter()
            .position(|r| r.product == g.product && is_sub_multiset(&g.reactants, &r.reactants))
        {
            matched += 1;
            cursor += off + 1;
        }
    }
    let total = generated.len();
    Ok(MatchReport {
        matched_steps: matched,
        total_steps: total,
        degree: matched as f64 / total as f64,
    })
}

/// Builds a search tree holding exactly the given decomposition, so planners
/// that do not grow a tree can report the same outcome shape. `steps` pairs
/// a product id with the action applied to it, parents before children.
pub fn tree_from_steps(target: Item, stock: Arc<StockSet>, steps: Vec<(String, TemplateAction)>) -> SearchTree {
    let mut tree = SearchTree::new(target, stock);
    let mut open: HashMap<String, VecDeque<MolId>> = HashMap::new();
    if !tree.root().expanded {
        open.entry(tree.root().item.id.clone()).or_default().push_back(SearchTree::ROOT);
    }
    let mut attached = Vec::new();
    for (product, action) in steps {
        let Some(m) = open.get_mut(&product).and_then(VecDeque::pop_front) else {
            continue;
        };
        tree.attach_expansion(m, vec![action], &[crate::tree::UNVISITED_VALUE])
            .expect("open node is unexpanded");
        attached.push(m);
        let r = *tree.mol(m).children.last().expect("one reaction attached");
        for &c in &tree.rxn(r).children {
            let child = tree.mol(c);
            if !child.expanded {
                open.entry(child.item.id.clone()).or_default().push_back(c);
            }
        }
    }
    for &m in attached.iter().rev() {
        tree.propagate_status(NodeRef::Mol(m));
    }
    tree
}
