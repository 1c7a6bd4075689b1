//! AND-OR search tree: molecule (OR) and reaction (AND) nodes stored in
//! arenas, plus success/failure propagation.
//!
//! The same item appearing under different branches gets distinct molecule
//! nodes; there is no sharing between branches.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{Item, StockSet, TemplateAction};

/// Value of a molecule node that has not been updated yet.
pub const UNVISITED_VALUE: f64 = 0.5;
/// Value of a stock molecule node.
pub const STOCK_VALUE: f64 = 1.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("molecule node {0} is already expanded")]
    AlreadyExpanded(usize),
    #[error("got {actions} actions but {scores} initial scores")]
    LengthMismatch { actions: usize, scores: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Unknown,
    Success,
    Failure,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        self != Status::Unknown
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MolId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RxnId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeRef {
    Mol(MolId),
    Rxn(RxnId),
}

/// OR node.
#[derive(Debug, Clone)]
pub struct MoleculeNode {
    pub item: Item,
    /// V_m: best child Q̄ once updated.
    pub value: f64,
    pub status: Status,
    pub expanded: bool,
    pub in_stock: bool,
    pub children: Vec<RxnId>,
    pub parent: Option<RxnId>,
    pub depth: usize,
}

/// AND node.
#[derive(Debug, Clone)]
pub struct ReactionNode {
    pub action: TemplateAction,
    /// Running mean of the initial score and every recorded reward.
    pub q_bar: f64,
    /// Reward-driven update count; the initial score is not counted.
    pub visits: u64,
    /// Sum of the initial score and all recorded rewards.
    pub q_sum: f64,
    pub status: Status,
    pub children: Vec<MolId>,
    pub parent: MolId,
}

impl ReactionNode {
    /// Records one reward and refreshes the running mean.
    pub fn record(&mut self, reward: f64) {
        self.visits += 1;
        self.q_sum += reward;
        self.q_bar = self.q_sum / (self.visits + 1) as f64;
    }
}

/// Local OR rule.
pub fn or_rule(base_success: bool, expanded: bool, children: impl IntoIterator<Item = Status>) -> Status {
    if base_success {
        return Status::Success;
    }
    let mut all_failed = true;
    for s in children {
        match s {
            Status::Success => return Status::Success,
            Status::Failure => {}
            Status::Unknown => all_failed = false,
        }
    }
    if expanded && all_failed {
        Status::Failure
    } else {
        Status::Unknown
    }
}

/// Local AND rule.
pub fn and_rule(children: impl IntoIterator<Item = Status>) -> Status {
    let mut all_success = true;
    for s in children {
        match s {
            Status::Failure => return Status::Failure,
            Status::Success => {}
            Status::Unknown => all_success = false,
        }
    }
    if all_success {
        Status::Success
    } else {
        Status::Unknown
    }
}

/// Minimal view of an AND-OR graph needed for status propagation. Nodes may
/// have several parents, so this also covers DAGs.
pub trait AndOrGraph {
    type Node: Copy;

    fn status(&self, node: Self::Node) -> Status;
    fn set_status(&mut self, node: Self::Node, status: Status);
    /// Status implied by the node's own flags and its children's statuses.
    fn evaluate(&self, node: Self::Node) -> Status;
    fn parents(&self, node: Self::Node) -> Vec<Self::Node>;
}

/// Re-evaluates `start` and walks up through parents while statuses change.
/// Terminal statuses are never revisited. Returns the nodes that changed.
pub fn propagate<G: AndOrGraph>(graph: &mut G, start: G::Node) -> Vec<G::Node> {
    let mut changed = Vec::new();
    let mut stack = vec![(start, true)];
    while let Some((node, force_parents)) = stack.pop() {
        let mut push = force_parents;
        if graph.status(node) == Status::Unknown {
            let now = graph.evaluate(node);
            if now != Status::Unknown {
                graph.set_status(node, now);
                changed.push(node);
                push = true;
            }
        }
        if push {
            stack.extend(graph.parents(node).into_iter().map(|p| (p, false)));
        }
    }
    changed
}

#[derive(Debug, Clone)]
pub struct SearchTree {
    molecules: Vec<MoleculeNode>,
    reactions: Vec<ReactionNode>,
    stock: Arc<StockSet>,
    expansions: usize,
    molecule_nodes_created: usize,
    reaction_nodes_created: usize,
}

impl SearchTree {
    pub const ROOT: MolId = MolId(0);

    pub fn new(target: Item, stock: Arc<StockSet>) -> Self {
        let mut tree = SearchTree {
            molecules: Vec::new(),
            reactions: Vec::new(),
            stock,
            expansions: 0,
            molecule_nodes_created: 0,
            reaction_nodes_created: 0,
        };
        tree.push_molecule(target, None, 0);
        tree
    }

    fn push_molecule(&mut self, item: Item, parent: Option<RxnId>, depth: usize) -> MolId {
        let in_stock = self.stock.contains(&item.id);
        let id = MolId(self.molecules.len());
        self.molecules.push(MoleculeNode {
            item,
            value: if in_stock { STOCK_VALUE } else { UNVISITED_VALUE },
            status: if in_stock { Status::Success } else { Status::Unknown },
            expanded: in_stock,
            in_stock,
            children: Vec::new(),
            parent,
            depth,
        });
        id
    }

    pub fn root(&self) -> &MoleculeNode {
        &self.molecules[0]
    }

    pub fn stock(&self) -> &Arc<StockSet> {
        &self.stock
    }

    pub fn mol(&self, id: MolId) -> &MoleculeNode {
        &self.molecules[id.0]
    }

    pub fn mol_mut(&mut self, id: MolId) -> &mut MoleculeNode {
        &mut self.molecules[id.0]
    }

    pub fn rxn(&self, id: RxnId) -> &ReactionNode {
        &self.reactions[id.0]
    }

    pub fn rxn_mut(&mut self, id: RxnId) -> &mut ReactionNode {
        &mut self.reactions[id.0]
    }

    pub fn molecules(&self) -> impl Iterator<Item = (MolId, &MoleculeNode)> {
        self.molecules.iter().enumerate().map(|(i, m)| (MolId(i), m))
    }

    pub fn reactions(&self) -> impl Iterator<Item = (RxnId, &ReactionNode)> {
        self.reactions.iter().enumerate().map(|(i, r)| (RxnId(i), r))
    }

    pub fn molecule_count(&self) -> usize {
        self.molecules.len()
    }

    pub fn reaction_count(&self) -> usize {
        self.reactions.len()
    }

    /// Number of molecule nodes that went through expansion.
    pub fn expansions(&self) -> usize {
        self.expansions
    }

    pub fn molecule_nodes_created(&self) -> usize {
        self.molecule_nodes_created
    }

    pub fn reaction_nodes_created(&self) -> usize {
        self.reaction_nodes_created
    }

    pub fn route_exists(&self) -> bool {
        self.root().status == Status::Success
    }

    /// Ids of `mol` and every molecule above it.
    pub fn ancestor_ids(&self, mol: MolId) -> HashSet<&str> {
        let mut out = HashSet::new();
        let mut cur = Some(mol);
        while let Some(m) = cur {
            let node = self.mol(m);
            out.insert(node.item.id.as_str());
            cur = node.parent.map(|r| self.rxn(r).parent);
        }
        out
    }

    /// Reaction node two levels above `rxn`, if any.
    pub fn grandparent(&self, rxn: RxnId) -> Option<RxnId> {
        self.mol(self.rxn(rxn).parent).parent
    }

    /// Adds one reaction node per action under `leaf`, each with its reactants
    /// as molecule children. Stock reactants start as successes. An empty
    /// action list marks the leaf as a failure.
    pub fn attach_expansion(
        &mut self,
        leaf: MolId,
        actions: Vec<TemplateAction>,
        q0s: &[f64],
    ) -> Result<(), TreeError> {
        if self.mol(leaf).expanded {
            return Err(TreeError::AlreadyExpanded(leaf.0));
        }
        if actions.len() != q0s.len() {
            return Err(TreeError::LengthMismatch {
                actions: actions.len(),
                scores: q0s.len(),
            });
        }
        let depth = self.mol(leaf).depth + 1;
        for (action, &q0) in actions.into_iter().zip(q0s) {
            let rid = RxnId(self.reactions.len());
            let reactants = action.reactants.clone();
            self.reactions.push(ReactionNode {
                action,
                q_bar: q0,
                visits: 0,
                q_sum: q0,
                status: Status::Unknown,
                children: Vec::with_capacity(reactants.len()),
                parent: leaf,
            });
            for r in reactants {
                let mid = self.push_molecule(r, Some(rid), depth);
                self.reactions[rid.0].children.push(mid);
                self.molecule_nodes_created += 1;
            }
            let status = self.evaluate(NodeRef::Rxn(rid));
            self.reactions[rid.0].status = status;
            self.molecules[leaf.0].children.push(rid);
            self.reaction_nodes_created += 1;
        }
        let node = &mut self.molecules[leaf.0];
        node.expanded = true;
        if node.children.is_empty() {
            node.status = Status::Failure;
        }
        self.expansions += 1;
        Ok(())
    }

    pub fn propagate_status(&mut self, node: NodeRef) -> Vec<NodeRef> {
        propagate(self, node)
    }

    pub fn snapshot(&self) -> TreeSnapshot {
        TreeSnapshot {
            molecules: self
                .molecules()
                .map(|(id, m)| MoleculeSnapshot {
                    id: id.0,
                    item: m.item.id.clone(),
                    status: m.status,
                    expanded: m.expanded,
                    in_stock: m.in_stock,
                    v_m: m.value,
                    parent: m.parent.map(|r| r.0),
                    children: m.children.iter().map(|r| r.0).collect(),
                })
                .collect(),
            reactions: self
                .reactions()
                .map(|(id, r)| ReactionSnapshot {
                    id: id.0,
                    template_id: r.action.template_id.clone(),
                    probability: r.action.probability,
                    q_bar: r.q_bar,
                    n: r.visits,
                    status: r.status,
                    parent: r.parent.0,
                    children: r.children.iter().map(|m| m.0).collect(),
                })
                .collect(),
        }
    }

    /// Graphviz rendering: molecules as ellipses, reactions as boxes,
    /// successes green and failures red.
    pub fn to_dot(&self) -> String {
        fn color(s: Status) -> &'static str {
            match s {
                Status::Unknown => "black",
                Status::Success => "darkgreen",
                Status::Failure => "red",
            }
        }
        let mut out = String::from("digraph search_tree {\n");
        for (id, m) in self.molecules() {
            let shape = if m.in_stock { "doublecircle" } else { "ellipse" };
            let _ = writeln!(
                out,
                "  m{} [shape={shape}, color={}, label=\"{}\\nV={:.3}\"];",
                id.0,
                color(m.status),
                m.item.id.replace('"', "\\\""),
                m.value
            );
        }
        for (id, r) in self.reactions() {
            let _ = writeln!(
                out,
                "  r{} [shape=box, color={}, label=\"{}\\nQ={:.3} N={}\"];",
                id.0,
                color(r.status),
                r.action.template_id.replace('"', "\\\""),
                r.q_bar,
                r.visits
            );
            let _ = writeln!(out, "  m{} -> r{};", r.parent.0, id.0);
            for c in &r.children {
                let _ = writeln!(out, "  r{} -> m{};", id.0, c.0);
            }
        }
        out.push_str("}\n");
        out
    }
}

impl AndOrGraph for SearchTree {
    type Node = NodeRef;

    fn status(&self, node: NodeRef) -> Status {
        match node {
            NodeRef::Mol(m) => self.mol(m).status,
            NodeRef::Rxn(r) => self.rxn(r).status,
        }
    }

    fn set_status(&mut self, node: NodeRef, status: Status) {
        match node {
            NodeRef::Mol(m) => self.mol_mut(m).status = status,
            NodeRef::Rxn(r) => self.rxn_mut(r).status = status,
        }
    }

    fn evaluate(&self, node: NodeRef) -> Status {
        match node {
            NodeRef::Mol(m) => {
                let n = self.mol(m);
                or_rule(n.in_stock, n.expanded, n.children.iter().map(|&c| self.rxn(c).status))
            }
            NodeRef::Rxn(r) => and_rule(self.rxn(r).children.iter().map(|&c| self.mol(c).status)),
        }
    }

    fn parents(&self, node: NodeRef) -> Vec<NodeRef> {
        match node {
            NodeRef::Mol(m) => self.mol(m).parent.map(NodeRef::Rxn).into_iter().collect(),
            NodeRef::Rxn(r) => vec![NodeRef::Mol(self.rxn(r).parent)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeSnapshot {
    pub id: usize,
    pub item: String,
    pub status: Status,
    pub expanded: bool,
    pub in_stock: bool,
    pub v_m: f64,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionSnapshot {
    pub id: usize,
    pub template_id: String,
    pub probability: f64,
    pub q_bar: f64,
    pub n: u64,
    pub status: Status,
    pub parent: usize,
    pub children: Vec<usize>,
}

/// Plain-data export of a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub molecules: Vec<MoleculeSnapshot>,
    pub reactions: Vec<ReactionSnapshot>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::Fingerprint;

    fn item(id: &str) -> Item {
        Item::new(id, Fingerprint::zeros()).unwrap()
    }

    fn action(t: &str, reactants: &[&str]) -> TemplateAction {
        TemplateAction {
            template_id: t.into(),
            fingerprint: Fingerprint::zeros(),
            probability: 0.5,
            reactants: reactants.iter().map(|r| item(r)).collect(),
        }
    }

    fn tree(target: &str, stock: &[&str]) -> SearchTree {
        SearchTree::new(item(target), Arc::new(StockSet::new(stock.iter().copied())))
    }

    #[test]
    fn empty_expansion_marks_failure() {
        let mut t = tree("x", &["a"]);
        t.attach_expansion(SearchTree::ROOT, vec![], &[]).unwrap();
        assert_eq!(t.root().status, Status::Failure);
        assert!(t.root().expanded);
    }

    #[test]
    fn single_action_construction() {
        let mut t = tree("x", &["a"]);
        t.attach_expansion(SearchTree::ROOT, vec![action("t", &["y"])], &[0.5]).unwrap();
        let r = t.rxn(RxnId(0));
        assert_eq!((r.q_bar, r.visits, r.q_sum), (0.5, 0, 0.5));
        assert_eq!(t.reaction_nodes_created(), 1);
        assert_eq!(
            t.attach_expansion(SearchTree::ROOT, vec![], &[]),
            Err(TreeError::AlreadyExpanded(0))
        );
    }

    #[test]
    fn stock_reactants_premarked() {
        let mut t = tree("x", &["a", "c"]);
        t.attach_expansion(SearchTree::ROOT, vec![action("t", &["a", "b", "c"])], &[0.3])
            .unwrap();
        let r = t.rxn(RxnId(0));
        assert_eq!(r.children.len(), 3);
        let st: Vec<Status> = r.children.iter().map(|&m| t.mol(m).status).collect();
        assert_eq!(st, vec![Status::Success, Status::Unknown, Status::Success]);
        assert!(t.mol(r.children[0]).expanded);
        assert_eq!(t.mol(r.children[0]).value, STOCK_VALUE);
        assert_eq!(t.mol(r.children[1]).value, UNVISITED_VALUE);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut t = tree("x", &[]);
        assert!(matches!(
            t.attach_expansion(SearchTree::ROOT, vec![action("t", &["y"])], &[]),
            Err(TreeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn failure_child_fails_reaction_and_reevaluates_parent() {
        let mut t = tree("x", &["a"]);
        t.attach_expansion(SearchTree::ROOT, vec![action("t", &["a", "b"])], &[0.5]).unwrap();
        let b = t.rxn(RxnId(0)).children[1];
        t.attach_expansion(b, vec![], &[]).unwrap();
        let changed = t.propagate_status(NodeRef::Mol(b));
        assert_eq!(t.rxn(RxnId(0)).status, Status::Failure);
        assert_eq!(t.root().status, Status::Failure);
        assert!(changed.contains(&NodeRef::Rxn(RxnId(0))));
        assert!(changed.contains(&NodeRef::Mol(SearchTree::ROOT)));
        assert!(t.propagate_status(NodeRef::Mol(b)).is_empty());
    }

    #[test]
    fn route_exists_cases() {
        assert!(tree("a", &["a"]).route_exists());
        assert!(!tree("x", &["a"]).route_exists());
        let mut t = tree("x", &["a", "b"]);
        t.attach_expansion(SearchTree::ROOT, vec![action("t", &["a", "b"])], &[0.5]).unwrap();
        t.propagate_status(NodeRef::Mol(SearchTree::ROOT));
        assert!(t.route_exists());
    }

    #[test]
    fn record_keeps_running_mean() {
        let mut t = tree("x", &[]);
        t.attach_expansion(SearchTree::ROOT, vec![action("t", &["y"])], &[0.5]).unwrap();
        let r = t.rxn_mut(RxnId(0));
        r.record(0.7);
        assert!((r.q_bar - 0.6).abs() < 1e-15);
        r.record(10.0);
        assert!((r.q_bar - (0.5 + 0.7 + 10.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn snapshot_and_dot() {
        let mut t = tree("x", &["a"]);
        t.attach_expansion(SearchTree::ROOT, vec![action("t", &["a", "b"])], &[0.25]).unwrap();
        let snap = t.snapshot();
        assert_eq!(snap.molecules.len(), 3);
        assert_eq!(snap.reactions[0].children, vec![1, 2]);
        let json = serde_json::to_string(&snap).unwrap();
        assert_eq!(serde_json::from_str::<TreeSnapshot>(&json).unwrap(), snap);
        let dot = t.to_dot();
        assert!(dot.contains("m0 -> r0"));
        assert!(dot.contains("r0 -> m2"));
    }

    #[test]
    fn ancestors_cover_the_path() {
        let mut t = tree("x", &[]);
        t.attach_expansion(SearchTree::ROOT, vec![action("t", &["y", "z"])], &[0.5]).unwrap();
        let y = t.rxn(RxnId(0)).children[0];
        t.attach_expansion(y, vec![action("u", &["w"])], &[0.5]).unwrap();
        let w = t.rxn(RxnId(1)).children[0];
        let anc = t.ancestor_ids(w);
        assert_eq!(anc, ["w", "y", "x"].into_iter().collect());
        assert_eq!(t.grandparent(RxnId(1)), Some(RxnId(0)));
        assert_eq!(t.grandparent(RxnId(0)), None);
    }
}
