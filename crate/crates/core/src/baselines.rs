//! Non-learning planners for comparison: the constant-prior variant of the
//! main search, greedy depth-first search and rollout MCTS over
//! molecule-set states.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::problem::{ExpansionOracle, Item, OracleConfig, OracleError, StockSet, TemplateAction, DEFAULT_TOP_K};
use crate::routes::tree_from_steps;
use crate::search::{argmax, plan, puct, ConstantScorer, PlanError, PlanOutcome, SearchError, SearchParams};
use crate::tree::SearchTree;

/// EG-MCTS with every initial score fixed at 0.5.
pub fn plan_eg_mcts_0<O, R>(
    target: Item,
    stock: Arc<StockSet>,
    oracle: &O,
    params: &SearchParams,
    rng: &mut R,
) -> Result<PlanOutcome, PlanError>
where
    O: ExpansionOracle + ?Sized,
    R: Rng,
{
    plan(target, stock, oracle, &ConstantScorer(0.5), params, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DfsParams {
    pub max_depth: usize,
    pub iteration_limit: usize,
    pub k: usize,
}

impl Default for DfsParams {
    fn default() -> Self {
        DfsParams {
            max_depth: 10,
            iteration_limit: 500,
            k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutParams {
    pub max_rollout_depth: usize,
    pub c: f64,
    pub iteration_limit: usize,
    pub k: usize,
    pub stop_on_first_solution: bool,
}

impl Default for RolloutParams {
    fn default() -> Self {
        RolloutParams {
            max_rollout_depth: 5,
            c: 0.5,
            iteration_limit: 500,
            k: DEFAULT_TOP_K,
            stop_on_first_solution: true,
        }
    }
}

fn invalid(msg: &str, target: Item, stock: Arc<StockSet>) -> PlanError {
    PlanError {
        error: SearchError::InvalidParams(msg.into()),
        partial: Box::new(PlanOutcome::from_tree(SearchTree::new(target, stock), None, 0)),
    }
}

/// Unsolved molecules of a state, kept sorted.
type Open = Vec<String>;

fn replace_first(open: &Open, action: &TemplateAction, stock: &StockSet) -> (Open, usize) {
    let mut next: Open = open[1..].to_vec();
    let mut solved = 0;
    for r in &action.reactants {
        if stock.contains(&r.id) {
            solved += 1;
        } else {
            next.push(r.id.clone());
        }
    }
    next.sort();
    (next, solved)
}

struct Counters {
    iterations: usize,
    reactions: usize,
    molecules: usize,
}

impl Counters {
    fn record(&mut self, actions: &[TemplateAction]) {
        self.iterations += 1;
        self.reactions += actions.len();
        self.molecules += actions.iter().map(|a| a.reactants.len()).sum::<usize>();
    }
}

fn outcome(
    target: Item,
    stock: Arc<StockSet>,
    steps: Option<Vec<(String, TemplateAction)>>,
    first: Option<usize>,
    c: &Counters,
) -> PlanOutcome {
    let tree = match steps {
        Some(steps) => tree_from_steps(target, stock, steps),
        None => SearchTree::new(target, stock),
    };
    PlanOutcome {
        solved: first.is_some(),
        iterations_to_first_solution: first,
        iterations_run: c.iterations,
        expanded_reaction_nodes: c.reactions,
        expanded_molecule_nodes: c.molecules,
        tree,
    }
}

/// Depth-first search over molecule-set states, always decomposing the
/// lexicographically first unsolved molecule and trying actions in the
/// oracle's probability order. Deterministic.
pub fn plan_greedy_dfs<O: ExpansionOracle + ?Sized>(
    target: Item,
    stock: Arc<StockSet>,
    oracle: &O,
    p: &DfsParams,
) -> Result<PlanOutcome, PlanError> {
    if p.max_depth == 0 || p.iteration_limit == 0 || p.k == 0 {
        return Err(invalid("max_depth, iteration_limit and k must be >= 1", target, stock));
    }
    let mut counters = Counters {
        iterations: 0,
        reactions: 0,
        molecules: 0,
    };
    if stock.contains(&target.id) {
        return Ok(outcome(target, stock, Some(vec![]), Some(0), &counters));
    }

    enum Step {
        Solved,
        Failed,
        Exhausted,
    }

    struct Dfs<'a, O: ?Sized> {
        stock: &'a StockSet,
        oracle: &'a O,
        p: &'a DfsParams,
        counters: &'a mut Counters,
        items: HashMap<String, Item>,
        path: Vec<(String, TemplateAction)>,
    }

    impl<O: ExpansionOracle + ?Sized> Dfs<'_, O> {
        fn run(&mut self, open: &Open, depth: usize) -> Result<Step, OracleError> {
            let Some(first) = open.first() else {
                return Ok(Step::Solved);
            };
            if depth == self.p.max_depth {
                return Ok(Step::Failed);
            }
            if self.counters.iterations == self.p.iteration_limit {
                return Ok(Step::Exhausted);
            }
            let item = self.items[first].clone();
            let actions = self.oracle.expand(&item, &OracleConfig { k: self.p.k })?;
            self.counters.record(&actions);
            for a in actions {
                for r in &a.reactants {
                    self.items.entry(r.id.clone()).or_insert_with(|| r.clone());
                }
                let (next, _) = replace_first(open, &a, self.stock);
                self.path.push((first.clone(), a));
                match self.run(&next, depth + 1)? {
                    Step::Failed => {
                        self.path.pop();
                    }
                    done => return Ok(done),
                }
            }
            Ok(Step::Failed)
        }
    }

    let mut dfs = Dfs {
        stock: &stock,
        oracle,
        p,
        counters: &mut counters,
        items: HashMap::from([(target.id.clone(), target.clone())]),
        path: Vec::new(),
    };
    let result = dfs.run(&vec![target.id.clone()], 0);
    let path = std::mem::take(&mut dfs.path);
    match result {
        Ok(Step::Solved) => {
            let first = Some(counters.iterations);
            Ok(outcome(target, stock, Some(path), first, &counters))
        }
        Ok(_) => Ok(outcome(target, stock, None, None, &counters)),
        Err(e) => Err(PlanError {
            error: SearchError::Oracle(e),
            partial: Box::new(outcome(target, stock, None, None, &counters)),
        }),
    }
}

/// Value of a state reached by random playout: stock molecules over all
/// molecules, counting molecules without templates as unsolved.
pub fn state_score(open: usize, solved: usize) -> f64 {
    let total = open + solved;
    if total == 0 || open == 0 {
        1.0
    } else {
        solved as f64 / total as f64
    }
}

struct RolloutNode {
    open: Open,
    solved: usize,
    parent: Option<usize>,
    /// The step that produced this state from its parent.
    step: Option<(String, TemplateAction)>,
    prior: f64,
    children: Vec<usize>,
    expanded: bool,
    dead: bool,
    visits: u64,
    value_sum: f64,
}

impl RolloutNode {
    fn is_solved(&self) -> bool {
        self.open.is_empty()
    }

    fn is_terminal(&self) -> bool {
        self.dead || self.is_solved()
    }
}

struct ExpansionCache<'a, O: ?Sized> {
    oracle: &'a O,
    k: usize,
    items: HashMap<String, Item>,
    actions: HashMap<String, Vec<TemplateAction>>,
}

impl<O: ExpansionOracle + ?Sized> ExpansionCache<'_, O> {
    fn expand(&mut self, id: &str) -> Result<Vec<TemplateAction>, OracleError> {
        if let Some(a) = self.actions.get(id) {
            return Ok(a.clone());
        }
        let item = match self.items.get(id) {
            Some(i) => i.clone(),
            None => self.oracle.item(id)?,
        };
        let actions = self.oracle.expand(&item, &OracleConfig { k: self.k })?;
        for a in &actions {
            for r in &a.reactants {
                self.items.entry(r.id.clone()).or_insert_with(|| r.clone());
            }
        }
        self.actions.insert(id.to_string(), actions.clone());
        Ok(actions)
    }
}

/// MCTS over molecule-set states with random-playout leaf evaluation.
pub fn plan_mcts_rollout<O, R>(
    target: Item,
    stock: Arc<StockSet>,
    oracle: &O,
    p: &RolloutParams,
    rng: &mut R,
) -> Result<PlanOutcome, PlanError>
where
    O: ExpansionOracle + ?Sized,
    R: Rng,
{
    if p.iteration_limit == 0 || p.k == 0 || !(p.c > 0.0) {
        return Err(invalid("iteration_limit, k and c must be positive", target, stock));
    }
    let mut counters = Counters {
        iterations: 0,
        reactions: 0,
        molecules: 0,
    };
    if stock.contains(&target.id) {
        return Ok(outcome(target, stock, Some(vec![]), Some(0), &counters));
    }
    let mut cache = ExpansionCache {
        oracle,
        k: p.k,
        items: HashMap::from([(target.id.clone(), target.clone())]),
        actions: HashMap::new(),
    };
    let mut nodes = vec![RolloutNode {
        open: vec![target.id.clone()],
        solved: 0,
        parent: None,
        step: None,
        prior: 1.0,
        children: Vec::new(),
        expanded: false,
        dead: false,
        visits: 0,
        value_sum: 0.0,
    }];
    let mut first: Option<(usize, usize)> = None;
    let fail = |e: OracleError, counters: &Counters| PlanError {
        error: SearchError::Oracle(e),
        partial: Box::new(outcome(target.clone(), stock.clone(), None, None, counters)),
    };

    while counters.iterations < p.iteration_limit && !nodes[0].dead {
        // selection
        let mut cur = 0;
        while nodes[cur].expanded {
            let open: Vec<usize> = nodes[cur].children.iter().copied().filter(|&c| !nodes[c].is_terminal()).collect();
            let parent_n = nodes[cur].visits;
            let best = argmax(open.iter().map(|&c| {
                let n = &nodes[c];
                let q = if n.visits == 0 { 0.0 } else { n.value_sum / n.visits as f64 };
                puct(q, n.visits, n.prior, parent_n, p.c)
            }));
            match best {
                Some(i) => cur = open[i],
                None => break,
            }
        }
        if nodes[cur].expanded {
            // every child is decided and none solved
            mark_dead(&mut nodes, cur);
            continue;
        }

        // expansion
        counters.iterations += 1;
        let product = nodes[cur].open[0].clone();
        let actions = cache.expand(&product).map_err(|e| fail(e, &counters))?;
        counters.reactions += actions.len();
        counters.molecules += actions.iter().map(|a| a.reactants.len()).sum::<usize>();
        nodes[cur].expanded = true;
        if actions.is_empty() {
            mark_dead(&mut nodes, cur);
            continue;
        }
        for a in actions {
            let (open, solved) = replace_first(&nodes[cur].open, &a, &stock);
            let idx = nodes.len();
            nodes.push(RolloutNode {
                open,
                solved: nodes[cur].solved + solved,
                parent: Some(cur),
                step: Some((product.clone(), a.clone())),
                prior: a.probability,
                children: Vec::new(),
                expanded: false,
                dead: false,
                visits: 0,
                value_sum: 0.0,
            });
            nodes[cur].children.push(idx);
            if first.is_none() && nodes[idx].is_solved() {
                first = Some((counters.iterations, idx));
            }
        }
        if first.is_some() && p.stop_on_first_solution {
            break;
        }

        // evaluate the most probable child by playout
        let child = nodes[cur].children[0];
        let value = playout(&nodes[child].open, nodes[child].solved, &stock, &mut cache, p.max_rollout_depth, rng)
            .map_err(|e| fail(e, &counters))?;
        let mut up = Some(child);
        while let Some(i) = up {
            nodes[i].visits += 1;
            nodes[i].value_sum += value;
            up = nodes[i].parent;
        }
    }

    let steps = first.map(|(_, leaf)| {
        let mut steps = Vec::new();
        let mut cur = Some(leaf);
        while let Some(i) = cur {
            if let Some(s) = &nodes[i].step {
                steps.push(s.clone());
            }
            cur = nodes[i].parent;
        }
        steps.reverse();
        steps
    });
    Ok(outcome(target, stock, steps, first.map(|f| f.0), &counters))
}

fn mark_dead(nodes: &mut [RolloutNode], start: usize) {
    let mut cur = Some(start);
    while let Some(i) = cur {
        let all_dead = !nodes[i].children.is_empty() && nodes[i].children.iter().all(|&c| nodes[c].dead);
        if i == start || all_dead {
            nodes[i].dead = true;
            cur = nodes[i].parent;
        } else {
            break;
        }
    }
}

fn playout<O, R>(
    open: &Open,
    solved: usize,
    stock: &StockSet,
    cache: &mut ExpansionCache<'_, O>,
    max_depth: usize,
    rng: &mut R,
) -> Result<f64, OracleError>
where
    O: ExpansionOracle + ?Sized,
    R: Rng,
{
    let mut open = open.clone();
    let mut solved = solved;
    let mut dead = 0;
    for _ in 0..max_depth {
        let Some(first) = open.first().cloned() else { break };
        let actions = cache.expand(&first)?;
        if actions.is_empty() {
            open.remove(0);
            dead += 1;
            continue;
        }
        let a = &actions[rng.gen_range(0..actions.len())];
        let (next, s) = replace_first(&open, a, stock);
        open = next;
        solved += s;
    }
    Ok(state_score(open.len() + dead, solved))
}

/// Planner selector shared by the harness and benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    EgMcts,
    EgMcts0,
    GreedyDfs,
    MctsRollout,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::EgMcts, Algorithm::EgMcts0, Algorithm::GreedyDfs, Algorithm::MctsRollout];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::EgMcts => "eg-mcts",
            Algorithm::EgMcts0 => "eg-mcts-0",
            Algorithm::GreedyDfs => "greedy-dfs",
            Algorithm::MctsRollout => "mcts-rollout",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm '{s}' (expected one of eg-mcts, eg-mcts-0, greedy-dfs, mcts-rollout)"))
    }
}
