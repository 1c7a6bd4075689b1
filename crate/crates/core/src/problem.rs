//! The decomposition problem model: items, stock, template actions and the
//! single-step expansion oracle contract.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint::{Fingerprint, FINGERPRINT_BITS};

/// Length of the guidance network input: molecule bits followed by template bits.
pub const EGN_INPUT_DIM: usize = 2 * FINGERPRINT_BITS;

/// Shipped top-k default. Unconfirmed for the original work.
pub const DEFAULT_TOP_K: usize = 50;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("fingerprint length mismatch: expected {FINGERPRINT_BITS} bits, got {0}")]
    LengthMismatch(usize),
    #[error("item id must be non-empty")]
    EmptyId,
    #[error("invalid template action {template_id}: {reason}")]
    InvalidAction { template_id: String, reason: String },
    #[error("oracle config: k must be at least 1")]
    InvalidK,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    /// The oracle could not be reached or the connection dropped.
    #[error("oracle unavailable: {0}")]
    Unavailable(String),
    /// The oracle answered with something that violates the protocol.
    #[error("oracle protocol violation: {0}")]
    Protocol(String),
    /// The oracle reported a request-level error.
    #[error("oracle error: {0}")]
    Remote(String),
}

/// A decomposable unit. Identity is the canonical id only; the fingerprint is
/// carried data.
#[derive(Clone, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub fingerprint: Fingerprint,
}

impl Item {
    pub fn new(id: impl Into<String>, fingerprint: Fingerprint) -> Result<Self, ProblemError> {
        let id = id.into();
        if id.is_empty() {
            return Err(ProblemError::EmptyId);
        }
        Ok(Item { id, fingerprint })
    }
}

impl PartialEq for Item {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Eq for Item {}

impl std::hash::Hash for Item {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.id.hash(state);
    }
}

impl fmt::Debug for Item {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Item({})", self.id)
    }
}

impl fmt::Display for Item {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

/// One concrete decomposition of a product proposed by the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateAction {
    pub template_id: String,
    pub fingerprint: Fingerprint,
    pub probability: f64,
    pub reactants: Vec<Item>,
}

impl TemplateAction {
    pub fn validate(&self, product_id: &str) -> Result<(), ProblemError> {
        let fail = |reason: &str| ProblemError::InvalidAction {
            template_id: self.template_id.clone(),
            reason: reason.to_string(),
        };
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(fail("probability outside [0,1]"));
        }
        if self.reactants.is_empty() {
            return Err(fail("empty reactant list"));
        }
        if self.reactants.iter().any(|r| r.id == product_id) {
            return Err(fail("reactant equals product"));
        }
        Ok(())
    }

    /// Order-independent key of the reactant multiset.
    pub fn reactant_key(&self) -> String {
        reactant_key(self.reactants.iter().map(|r| r.id.as_str()))
    }
}

pub fn reactant_key<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let mut ids: Vec<&str> = ids.collect();
    ids.sort_unstable();
    ids.join(".")
}

/// The set of primitive items that need no further decomposition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StockSet {
    members: HashSet<String>,
}

impl StockSet {
    pub fn new<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        StockSet {
            members: ids.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.members.contains(id)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn sorted_ids(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.members.iter().map(String::as_str).collect();
        v.sort_unstable();
        v
    }

    /// Reads one id per line; blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self, ProblemError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProblemError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(StockSet::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub k: usize,
}

impl OracleConfig {
    pub fn new(k: usize) -> Result<Self, ProblemError> {
        if k == 0 {
            return Err(ProblemError::InvalidK);
        }
        Ok(OracleConfig { k })
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { k: DEFAULT_TOP_K }
    }
}

/// Single-step expansion oracle.
///
/// Implementations must be deterministic for a fixed internal state and safe
/// for concurrent read-only use.
pub trait ExpansionOracle: Send + Sync {
    /// Top-k template actions for `item`, sorted by probability descending.
    /// An empty list means no template applies; it is not an error.
    fn expand(&self, item: &Item, cfg: &OracleConfig) -> Result<Vec<TemplateAction>, OracleError>;

    /// Resolves an id to a full item (computes or fetches its fingerprint).
    fn item(&self, id: &str) -> Result<Item, OracleError>;
}

impl<T: ExpansionOracle + ?Sized> ExpansionOracle for std::sync::Arc<T> {
    fn expand(&self, item: &Item, cfg: &OracleConfig) -> Result<Vec<TemplateAction>, OracleError> {
        (**self).expand(item, cfg)
    }

    fn item(&self, id: &str) -> Result<Item, OracleError> {
        (**self).item(id)
    }
}

/// Stable sort by probability descending, then truncate to `k`.
pub fn rank_and_truncate(mut actions: Vec<TemplateAction>, k: usize) -> Vec<TemplateAction> {
    actions.sort_by(|a, b| b.probability.total_cmp(&a.probability));
    actions.truncate(k);
    actions
}

/// Concatenates molecule and template fingerprints into the 4096-wide
/// network input, molecule bits first.
pub fn make_egn_input(mol: &Fingerprint, tmpl: &Fingerprint) -> Vec<f64> {
    let mut x = vec![0.0; EGN_INPUT_DIM];
    for i in mol.iter_ones() {
        x[i] = 1.0;
    }
    for i in tmpl.iter_ones() {
        x[FINGERPRINT_BITS + i] = 1.0;
    }
    x
}

/// Same as [`make_egn_input`] for raw bit slices, checking their lengths.
pub fn make_egn_input_bits(mol: &[bool], tmpl: &[bool]) -> Result<Vec<f64>, ProblemError> {
    for bits in [mol, tmpl] {
        if bits.len() != FINGERPRINT_BITS {
            return Err(ProblemError::LengthMismatch(bits.len()));
        }
    }
    Ok(mol
        .iter()
        .chain(tmpl.iter())
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect())
}

/// Indices of the non-zero entries of `make_egn_input(mol, tmpl)`, ascending.
pub fn egn_active_inputs(mol: &Fingerprint, tmpl: &Fingerprint) -> Vec<usize> {
    mol.iter_ones()
        .chain(tmpl.iter_ones().map(|i| i + FINGERPRINT_BITS))
        .collect()
}
