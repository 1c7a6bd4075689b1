//! The planning loop: PUCT selection, oracle expansion with learned initial
//! scores, and the reward/update pass.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::egn::EgnWeights;
use crate::problem::{ExpansionOracle, Item, OracleConfig, OracleError, StockSet, TemplateAction, DEFAULT_TOP_K};
use crate::tree::{MolId, NodeRef, RxnId, SearchTree, Status};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    pub c: f64,
    pub z: f64,
    pub iteration_limit: usize,
    pub k: usize,
    pub stop_on_first_solution: bool,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            c: 0.5,
            z: 10.0,
            iteration_limit: 500,
            k: DEFAULT_TOP_K,
            stop_on_first_solution: true,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<(), SearchError> {
        if !(self.c > 0.0) {
            return Err(SearchError::InvalidParams("c must be positive".into()));
        }
        if !(self.z > 1.0) {
            return Err(SearchError::InvalidParams("z must exceed 1".into()));
        }
        if self.iteration_limit == 0 {
            return Err(SearchError::InvalidParams("iteration_limit must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(SearchError::InvalidParams("k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("invalid search parameters: {0}")]
    InvalidParams(String),
    #[error("no selectable leaf: every frontier node is decided")]
    NoSelectableLeaf,
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Planning failure with the state reached so far.
#[derive(Debug, Error)]
#[error("planning aborted after {} iterations: {error}", partial.iterations_run)]
pub struct PlanError {
    pub error: SearchError,
    pub partial: Box<PlanOutcome>,
}

/// Supplies the initial value Q₀ of a freshly attached reaction node.
pub trait Scorer: Send + Sync {
    fn score(&self, mol: &Item, action: &TemplateAction) -> f64;

    /// Version of the underlying weights, if any.
    fn version(&self) -> Option<u64> {
        None
    }
}

impl Scorer for EgnWeights {
    fn score(&self, mol: &Item, action: &TemplateAction) -> f64 {
        EgnWeights::score(self, &mol.fingerprint, &action.fingerprint)
    }

    fn version(&self) -> Option<u64> {
        Some(self.version)
    }
}

impl<S: Scorer + ?Sized> Scorer for Arc<S> {
    fn score(&self, mol: &Item, action: &TemplateAction) -> f64 {
        (**self).score(mol, action)
    }

    fn version(&self) -> Option<u64> {
        (**self).version()
    }
}

/// Scores every action with the same value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, _: &Item, _: &TemplateAction) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub tree: SearchTree,
    pub solved: bool,
    pub iterations_to_first_solution: Option<usize>,
    pub iterations_run: usize,
    pub expanded_reaction_nodes: usize,
    pub expanded_molecule_nodes: usize,
}

/// Serializable view of a [`PlanOutcome`] without the tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub target: String,
    pub solved: bool,
    pub iterations_to_first_solution: Option<usize>,
    pub iterations_run: usize,
    pub expanded_reaction_nodes: usize,
    pub expanded_molecule_nodes: usize,
    pub root_status: Status,
}

impl PlanOutcome {
    pub fn from_tree(tree: SearchTree, first: Option<usize>, iterations_run: usize) -> Self {
        PlanOutcome {
            solved: first.is_some(),
            iterations_to_first_solution: first,
            iterations_run,
            expanded_reaction_nodes: tree.reaction_nodes_created(),
            expanded_molecule_nodes: tree.molecule_nodes_created(),
            tree,
        }
    }

    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            target: self.tree.root().item.id.clone(),
            solved: self.solved,
            iterations_to_first_solution: self.iterations_to_first_solution,
            iterations_run: self.iterations_run,
            expanded_reaction_nodes: self.expanded_reaction_nodes,
            expanded_molecule_nodes: self.expanded_molecule_nodes,
            root_status: self.tree.root().status,
        }
    }
}

/// `q̄ / max(1, n) + c · p · √n_parent / (1 + n)`.
pub fn puct(q_bar: f64, n: u64, p: f64, n_parent: u64, c: f64) -> f64 {
    q_bar / n.max(1) as f64 + c * p * (n_parent as f64).sqrt() / (1 + n) as f64
}

/// Update count standing in for the parent visits of `rxn`: the grandparent
/// reaction's count, or the summed sibling counts under the root.
pub fn parent_visits(tree: &SearchTree, rxn: RxnId) -> u64 {
    match tree.grandparent(rxn) {
        Some(g) => tree.rxn(g).visits,
        None => {
            let parent = tree.rxn(rxn).parent;
            tree.mol(parent).children.iter().map(|&r| tree.rxn(r).visits).sum()
        }
    }
}

pub fn puct_score(tree: &SearchTree, rxn: RxnId, c: f64) -> f64 {
    let node = tree.rxn(rxn);
    puct(node.q_bar, node.visits, node.action.probability, parent_visits(tree, rxn), c)
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(scores: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Descends from the root to an unexpanded, undecided molecule node.
pub fn select<R: Rng>(tree: &SearchTree, c: f64, rng: &mut R) -> Result<MolId, SearchError> {
    let mut mol = SearchTree::ROOT;
    loop {
        let node = tree.mol(mol);
        if !node.expanded {
            return if node.status == Status::Unknown {
                Ok(mol)
            } else {
                Err(SearchError::NoSelectableLeaf)
            };
        }
        let open: Vec<RxnId> = node
            .children
            .iter()
            .copied()
            .filter(|&r| !tree.rxn(r).status.is_terminal())
            .collect();
        let best = argmax(open.iter().map(|&r| puct_score(tree, r, c))).ok_or(SearchError::NoSelectableLeaf)?;
        let rxn = tree.rxn(open[best]);
        let fresh: Vec<MolId> = rxn
            .children
            .iter()
            .copied()
            .filter(|&m| !tree.mol(m).expanded)
            .collect();
        mol = if !fresh.is_empty() {
            fresh[rng.gen_range(0..fresh.len())]
        } else {
            let pending: Vec<MolId> = rxn
                .children
                .iter()
                .copied()
                .filter(|&m| tree.mol(m).status != Status::Success)
                .collect();
            if pending.is_empty() {
                return Err(SearchError::NoSelectableLeaf);
            }
            pending[rng.gen_range(0..pending.len())]
        };
    }
}

/// Queries the oracle for `leaf`, drops actions that would regenerate an
/// item already on the path to the root, scores the rest and attaches them.
pub fn expand<O, S>(
    tree: &mut SearchTree,
    leaf: MolId,
    oracle: &O,
    scorer: &S,
    params: &SearchParams,
) -> Result<(), SearchError>
where
    O: ExpansionOracle + ?Sized,
    S: Scorer + ?Sized,
{
    let item = tree.mol(leaf).item.clone();
    let actions = oracle.expand(&item, &OracleConfig { k: params.k })?;
    let actions: Vec<TemplateAction> = {
        let ancestors = tree.ancestor_ids(leaf);
        actions
            .into_iter()
            .filter(|a| a.reactants.iter().all(|r| !ancestors.contains(r.id.as_str())))
            .collect()
    };
    let q0s: Vec<f64> = actions.iter().map(|a| scorer.score(&item, a)).collect();
    tree.attach_expansion(leaf, actions, &q0s)
        .expect("selected leaf is unexpanded and scores match actions");
    Ok(())
}

pub fn reward(tree: &SearchTree, rxn: RxnId, z: f64) -> f64 {
    let node = tree.rxn(rxn);
    match node.status {
        Status::Success => z,
        Status::Failure => -z,
        Status::Unknown => {
            let sum: f64 = node.children.iter().map(|&m| tree.mol(m).value).sum();
            sum / node.children.len() as f64
        }
    }
}

fn refresh_value(tree: &mut SearchTree, mol: MolId) {
    let best = tree
        .mol(mol)
        .children
        .iter()
        .map(|&r| tree.rxn(r).q_bar)
        .fold(None, |acc: Option<f64>, q| Some(acc.map_or(q, |a| a.max(q))));
    if let Some(v) = best {
        tree.mol_mut(mol).value = v;
    }
}

/// Status propagation from `leaf`, then value updates on the path to the root.
pub fn update(tree: &mut SearchTree, leaf: MolId, z: f64) {
    tree.propagate_status(NodeRef::Mol(leaf));
    let mut mol = leaf;
    loop {
        refresh_value(tree, mol);
        let Some(rxn) = tree.mol(mol).parent else { break };
        let r = reward(tree, rxn, z);
        tree.rxn_mut(rxn).record(r);
        mol = tree.rxn(rxn).parent;
    }
}

/// Runs select → expand → update until the limit, the first solution (when
/// `stop_on_first_solution`), or until the search is decided.
pub fn plan<O, S, R>(
    target: Item,
    stock: Arc<StockSet>,
    oracle: &O,
    scorer: &S,
    params: &SearchParams,
    rng: &mut R,
) -> Result<PlanOutcome, PlanError>
where
    O: ExpansionOracle + ?Sized,
    S: Scorer + ?Sized,
    R: Rng,
{
    let mut tree = SearchTree::new(target, stock);
    if let Err(error) = params.validate() {
        return Err(PlanError {
            error,
            partial: Box::new(PlanOutcome::from_tree(tree, None, 0)),
        });
    }
    if tree.route_exists() {
        return Ok(PlanOutcome::from_tree(tree, Some(0), 0));
    }
    let mut first = None;
    let mut iterations = 0;
    while iterations < params.iteration_limit {
        let leaf = match select(&tree, params.c, rng) {
            Ok(leaf) => leaf,
            Err(_) => break,
        };
        iterations += 1;
        if let Err(error) = expand(&mut tree, leaf, oracle, scorer, params) {
            return Err(PlanError {
                error,
                partial: Box::new(PlanOutcome::from_tree(tree, first, iterations)),
            });
        }
        update(&mut tree, leaf, params.z);
        if first.is_none() && tree.route_exists() {
            first = Some(iterations);
            if params.stop_on_first_solution {
                break;
            }
        }
        if tree.root().status == Status::Failure {
            break;
        }
    }
    Ok(PlanOutcome::from_tree(tree, first, iterations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::Fingerprint;
    use crate::synthetic::SyntheticDomain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;
    use std::sync::Mutex;

    fn item(id: &str) -> Item {
        Item::new(id, Fingerprint::zeros()).unwrap()
    }

    fn action(t: &str, p: f64, reactants: &[&str]) -> TemplateAction {
        TemplateAction {
            template_id: t.into(),
            fingerprint: Fingerprint::zeros(),
            probability: p,
            reactants: reactants.iter().map(|r| item(r)).collect(),
        }
    }

    /// Table-driven oracle that also counts calls.
    struct TableOracle {
        table: HashMap<String, Vec<TemplateAction>>,
        calls: Mutex<usize>,
    }

    impl TableOracle {
        fn new(entries: Vec<(&str, Vec<TemplateAction>)>) -> Self {
            TableOracle {
                table: entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
                calls: Mutex::new(0),
            }
        }
    }

    impl ExpansionOracle for TableOracle {
        fn expand(&self, item: &Item, cfg: &OracleConfig) -> Result<Vec<TemplateAction>, OracleError> {
            *self.calls.lock().unwrap() += 1;
            let mut v = self.table.get(&item.id).cloned().unwrap_or_default();
            v.truncate(cfg.k);
            Ok(v)
        }

        fn item(&self, id: &str) -> Result<Item, OracleError> {
            Ok(item(id))
        }
    }

    struct FailingOracle;

    impl ExpansionOracle for FailingOracle {
        fn expand(&self, _: &Item, _: &OracleConfig) -> Result<Vec<TemplateAction>, OracleError> {
            Err(OracleError::Unavailable("down".into()))
        }

        fn item(&self, id: &str) -> Result<Item, OracleError> {
            Ok(item(id))
        }
    }

    fn stock(ids: &[&str]) -> Arc<StockSet> {
        Arc::new(StockSet::new(ids.iter().copied()))
    }

    #[test]
    fn puct_examples() {
        let s = puct(0.6, 2, 0.5, 4, 0.5);
        assert!((s - (0.3 + 0.5 * 0.5 * 2.0 / 3.0)).abs() < 1e-9);
        assert!((s - 0.46667).abs() < 1e-5);
        assert_eq!(puct(0.37, 1, 0.0, 9, 0.5), 0.37);
        assert_eq!(puct(0.42, 0, 0.9, 0, 0.5), 0.42);
    }

    #[test]
    fn scaling_c_scales_only_exploration() {
        let base = puct(0.6, 3, 0.4, 16, 0.0);
        let e1 = puct(0.6, 3, 0.4, 16, 1.0) - base;
        let e2 = puct(0.6, 3, 0.4, 16, 2.0) - base;
        assert!((e2 - 2.0 * e1).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_lowest_index() {
        assert_eq!(argmax([0.4, 0.7, 0.7]), Some(1));
        assert_eq!(argmax([0.5, 0.5]), Some(0));
        assert_eq!(argmax(std::iter::empty()), None);
    }

    #[test]
    fn select_fresh_root_and_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tree = SearchTree::new(item("t"), stock(&[]));
        assert_eq!(select(&tree, 0.5, &mut rng).unwrap(), SearchTree::ROOT);
        tree.attach_expansion(
            SearchTree::ROOT,
            vec![action("a", 0.0, &["x"]), action("b", 0.0, &["y"])],
            &[0.4, 0.7],
        )
        .unwrap();
        let leaf = select(&tree, 0.5, &mut rng).unwrap();
        assert_eq!(tree.mol(leaf).item.id, "y");
    }

    #[test]
    fn select_prefers_unexpanded_reactant() {
        let mut tree = SearchTree::new(item("t"), stock(&[]));
        tree.attach_expansion(SearchTree::ROOT, vec![action("a", 0.5, &["x", "y"])], &[0.5])
            .unwrap();
        let x = tree.rxn(RxnId(0)).children[0];
        tree.attach_expansion(x, vec![action("b", 0.5, &["u"])], &[0.5]).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let leaf = select(&tree, 0.5, &mut rng).unwrap();
            assert_eq!(tree.mol(leaf).item.id, "y");
        }
    }

    #[test]
    fn select_on_decided_tree_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tree = SearchTree::new(item("t"), stock(&[]));
        tree.attach_expansion(SearchTree::ROOT, vec![], &[]).unwrap();
        assert_eq!(select(&tree, 0.5, &mut rng), Err(SearchError::NoSelectableLeaf));
    }

    #[test]
    fn expand_filters_ancestors_and_scores() {
        let oracle = TableOracle::new(vec![
            ("t", vec![action("a", 0.9, &["x"])]),
            ("x", vec![action("loop", 0.6, &["t", "s"]), action("ok", 0.4, &["s", "w"])]),
        ]);
        let params = SearchParams::default();
        let mut tree = SearchTree::new(item("t"), stock(&["s"]));
        expand(&mut tree, SearchTree::ROOT, &oracle, &ConstantScorer(0.3), &params).unwrap();
        let x = tree.rxn(RxnId(0)).children[0];
        expand(&mut tree, x, &oracle, &ConstantScorer(0.8), &params).unwrap();
        let kids = &tree.mol(x).children;
        assert_eq!(kids.len(), 1);
        assert_eq!(tree.rxn(kids[0]).action.template_id, "ok");
        assert_eq!(tree.rxn(kids[0]).q_bar, 0.8);
        assert_eq!(tree.rxn(kids[0]).visits, 0);
        assert_eq!(tree.rxn(RxnId(0)).q_bar, 0.3);
    }

    #[test]
    fn expand_empty_marks_failure() {
        let oracle = TableOracle::new(vec![]);
        let mut tree = SearchTree::new(item("t"), stock(&[]));
        expand(&mut tree, SearchTree::ROOT, &oracle, &ConstantScorer(0.5), &SearchParams::default()).unwrap();
        assert_eq!(tree.root().status, Status::Failure);
    }

    #[test]
    fn reward_cases() {
        let mut tree = SearchTree::new(item("t"), stock(&["s"]));
        tree.attach_expansion(
            SearchTree::ROOT,
            vec![action("a", 0.5, &["s"]), action("b", 0.5, &["x", "y"])],
            &[0.5, 0.5],
        )
        .unwrap();
        assert_eq!(reward(&tree, RxnId(0), 10.0), 10.0);
        let kids = tree.rxn(RxnId(1)).children.clone();
        tree.mol_mut(kids[0]).value = 0.4;
        tree.mol_mut(kids[1]).value = 0.6;
        assert!((reward(&tree, RxnId(1), 10.0) - 0.5).abs() < 1e-15);
        tree.rxn_mut(RxnId(1)).status = Status::Failure;
        assert_eq!(reward(&tree, RxnId(1), 10.0), -10.0);
    }

    #[test]
    fn update_applies_running_mean_and_max() {
        let mut tree = SearchTree::new(item("t"), stock(&["s"]));
        tree.attach_expansion(SearchTree::ROOT, vec![action("a", 0.5, &["x", "s"])], &[0.5])
            .unwrap();
        let x = tree.rxn(RxnId(0)).children[0];
        tree.attach_expansion(
            x,
            vec![action("b", 0.5, &["p"]), action("c", 0.5, &["q"])],
            &[0.2, 0.9],
        )
        .unwrap();
        update(&mut tree, x, 10.0);
        assert_eq!(tree.mol(x).value, 0.9);
        // reward = mean(0.9, 1.0) = 0.95; q̄ = (0.5 + 0.95) / 2
        let r = tree.rxn(RxnId(0));
        assert_eq!(r.visits, 1);
        assert!((r.q_bar - 0.725).abs() < 1e-15);
        assert!((tree.root().value - 0.725).abs() < 1e-15);
    }

    #[test]
    fn success_reward_mean() {
        let mut tree = SearchTree::new(item("t"), stock(&["s"]));
        tree.attach_expansion(SearchTree::ROOT, vec![action("a", 0.5, &["x"])], &[0.5])
            .unwrap();
        let x = tree.rxn(RxnId(0)).children[0];
        tree.attach_expansion(x, vec![action("b", 0.5, &["s"])], &[0.5]).unwrap();
        update(&mut tree, x, 10.0);
        assert_eq!(tree.rxn(RxnId(0)).status, Status::Success);
        assert_eq!(tree.rxn(RxnId(0)).q_bar, 5.25);
        assert!(tree.route_exists());
    }

    #[test]
    fn plan_target_in_stock() {
        let oracle = TableOracle::new(vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = plan(item("s"), stock(&["s"]), &oracle, &ConstantScorer(0.5), &SearchParams::default(), &mut rng)
            .unwrap();
        assert!(out.solved);
        assert_eq!(out.iterations_to_first_solution, Some(0));
        assert_eq!(out.iterations_run, 0);
        assert_eq!(out.tree.reaction_count(), 0);
        assert_eq!(*oracle.calls.lock().unwrap(), 0);
    }

    #[test]
    fn plan_one_step_and_unsolvable() {
        let oracle = TableOracle::new(vec![("t", vec![action("a", 1.0, &["s", "r"])])]);
        let st = stock(&["s", "r"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = plan(item("t"), st.clone(), &oracle, &ConstantScorer(0.5), &SearchParams::default(), &mut rng)
            .unwrap();
        assert!(out.solved);
        assert_eq!(out.iterations_to_first_solution, Some(1));

        let out = plan(item("u"), st, &oracle, &ConstantScorer(0.5), &SearchParams::default(), &mut rng).unwrap();
        assert!(!out.solved);
        assert_eq!(out.iterations_run, 1);
        assert_eq!(out.tree.root().status, Status::Failure);
    }

    #[test]
    fn plan_iterations_equal_oracle_calls() {
        let domain = SyntheticDomain::random(5, &Default::default()).unwrap();
        let instances = domain.generate_instances(5, (3, 5)).unwrap();
        let stock = Arc::new(domain.stock().clone());
        for inst in instances {
            struct Counting<'a>(&'a SyntheticDomain, Mutex<usize>);
            impl ExpansionOracle for Counting<'_> {
                fn expand(&self, item: &Item, cfg: &OracleConfig) -> Result<Vec<TemplateAction>, OracleError> {
                    *self.1.lock().unwrap() += 1;
                    self.0.expand(item, cfg)
                }
                fn item(&self, id: &str) -> Result<Item, OracleError> {
                    self.0.item(id)
                }
            }
            let oracle = Counting(&domain, Mutex::new(0));
            let target = domain.make_item(&inst.target);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let params = SearchParams {
                stop_on_first_solution: false,
                iteration_limit: 500,
                ..SearchParams::default()
            };
            let out = plan(target, stock.clone(), &oracle, &ConstantScorer(0.5), &params, &mut rng).unwrap();
            assert_eq!(out.iterations_run, *oracle.1.lock().unwrap());
            assert!(out.iterations_run <= 500);
            assert!(out.solved);
            for (_, r) in out.tree.reactions() {
                assert!(r.q_bar.abs() <= params.z);
            }
        }
    }

    #[test]
    fn plan_is_replay_deterministic() {
        let domain = SyntheticDomain::random(9, &Default::default()).unwrap();
        let inst = &domain.generate_instances(1, (4, 6)).unwrap()[0];
        let stock = Arc::new(domain.stock().clone());
        let w = EgnWeights::random(3);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let out = plan(domain.make_item(&inst.target), stock.clone(), &domain, &w, &SearchParams::default(), &mut rng)
                .unwrap();
            (out.summary(), serde_json::to_string(&out.tree.snapshot()).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn oracle_failure_keeps_partial_outcome() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = plan(item("t"), stock(&[]), &FailingOracle, &ConstantScorer(0.5), &SearchParams::default(), &mut rng)
            .unwrap_err();
        assert!(matches!(err.error, SearchError::Oracle(OracleError::Unavailable(_))));
        assert_eq!(err.partial.iterations_run, 1);
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = SearchParams {
            z: 1.0,
            ..SearchParams::default()
        };
        assert!(bad.validate().is_err());
        assert!(SearchParams { c: 0.0, ..SearchParams::default() }.validate().is_err());
        assert!(SearchParams { iteration_limit: 0, ..SearchParams::default() }.validate().is_err());
    }
}
