//! Desk-scale rule-system domain used as a stand-in for a reaction template
//! library.
//!
//! Items are strings over a small lowercase alphabet. A rule is keyed by a
//! bigram pattern `xy` and applies at every position where the product
//! contains `xy`:
//!
//! * `cleave` splits the product between `x` and `y` into a prefix and a
//!   suffix;
//! * `capped` does the same but emits the prefix in capped (uppercase) form.
//!   Capped items match no rule and are never stock, so they are dead ends.
//!
//! Both kinds strictly reduce the number of lowercase symbols in every
//! reactant, which bounds every decomposition chain by the product length.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint::{Fingerprint, FINGERPRINT_BITS};
use crate::problem::{
    rank_and_truncate, ExpansionOracle, Item, OracleConfig, OracleError, StockSet, TemplateAction,
};

pub const DOMAIN_FORMAT: &str = "egmcts-synthetic-domain";
pub const DOMAIN_VERSION: u32 = 1;

/// Upper bound on certified route lengths.
pub const MAX_CERTIFIED_DEPTH: usize = 8;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("could not generate {wanted} instances with optimal length in [{min}, {max}] after {attempts} attempts (got {got})")]
    GenerationExhausted {
        wanted: usize,
        got: usize,
        min: usize,
        max: usize,
        attempts: usize,
    },
    #[error("difficulty range [{0}, {1}] is invalid (need 1 <= min <= max <= {MAX_CERTIFIED_DEPTH})")]
    InvalidDifficulty(usize, usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed domain file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Cleave,
    Capped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub pattern: String,
    pub kind: RuleKind,
    pub weight: f64,
}

impl Rule {
    fn bigram(&self) -> (u8, u8) {
        let b = self.pattern.as_bytes();
        (b[0], b[1])
    }
}

/// Knobs for [`SyntheticDomain::random`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub alphabet_size: usize,
    /// Fraction of bigrams that carry a cleave rule.
    pub cleave_density: f64,
    /// Fraction of bigrams that carry a capped rule.
    pub capped_density: f64,
    pub cleave_weight: (f64, f64),
    pub capped_weight: (f64, f64),
    /// Fraction of single symbols that are stock.
    pub symbol_stock_fraction: f64,
    /// Number of extra multi-symbol stock items.
    pub extra_stock: usize,
}

impl Default for DomainProfile {
    fn default() -> Self {
        DomainProfile {
            alphabet_size: 8,
            cleave_density: 0.5,
            capped_density: 0.45,
            cleave_weight: (0.2, 1.0),
            capped_weight: (0.5, 1.5),
            symbol_stock_fraction: 0.75,
            extra_stock: 24,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DomainFile {
    format: String,
    version: u32,
    seed: u64,
    alphabet: String,
    stock: Vec<String>,
    rules: Vec<Rule>,
}

/// A generated planning target with its certified optimal route length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub target: String,
    pub optimal_length: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticDomain {
    alphabet: Vec<u8>,
    rules: Vec<Rule>,
    stock: StockSet,
    seed: u64,
    by_bigram: HashMap<(u8, u8), Vec<usize>>,
}

fn hash_feature(tag: &str, body: &[u8]) -> usize {
    let mut h = FnvHasher::default();
    h.write(tag.as_bytes());
    h.write_u8(0xff);
    h.write(body);
    (h.finish() % FINGERPRINT_BITS as u64) as usize
}

/// Circular-style fingerprint: every symbol's neighbourhood of radius 0, 1
/// and 2 (with boundary markers) hashed into 2048 bits.
pub fn item_fingerprint(id: &str) -> Fingerprint {
    let mut padded = Vec::with_capacity(id.len() + 4);
    padded.extend_from_slice(b"^^");
    padded.extend_from_slice(id.as_bytes());
    padded.extend_from_slice(b"$$");
    let mut fp = Fingerprint::zeros();
    for i in 2..padded.len() - 2 {
        for r in 0..=2usize {
            fp.set(hash_feature("env", &padded[i - r..=i + r]));
        }
    }
    fp
}

/// Structural fingerprint of a rule: its kind, each side of the pattern, and
/// the full pattern, each alone and combined with the kind.
pub fn rule_fingerprint(rule: &Rule) -> Fingerprint {
    let kind = match rule.kind {
        RuleKind::Cleave => "cleave",
        RuleKind::Capped => "capped",
    };
    let p = rule.pattern.as_bytes();
    let mut fp = Fingerprint::zeros();
    fp.set(hash_feature("kind", kind.as_bytes()));
    fp.set(hash_feature("left", &p[..1]));
    fp.set(hash_feature("right", &p[1..]));
    fp.set(hash_feature("pattern", p));
    fp.set(hash_feature(kind, &p[..1]));
    fp.set(hash_feature(kind, &p[1..]));
    fp.set(hash_feature(kind, p));
    fp
}

impl SyntheticDomain {
    pub fn new(
        alphabet: &str,
        rules: Vec<Rule>,
        stock: StockSet,
        seed: u64,
    ) -> Result<Self, SyntheticError> {
        let bad = |m: String| Err(SyntheticError::InvalidDomain(m));
        let alpha: Vec<u8> = alphabet.bytes().collect();
        if alpha.is_empty() || !alpha.iter().all(u8::is_ascii_lowercase) {
            return bad(format!("alphabet must be non-empty lowercase ascii: {alphabet:?}"));
        }
        let alpha_set: HashSet<u8> = alpha.iter().copied().collect();
        if alpha_set.len() != alpha.len() {
            return bad("alphabet has repeated symbols".into());
        }
        let mut ids = HashSet::new();
        let mut by_bigram: HashMap<(u8, u8), Vec<usize>> = HashMap::new();
        for (i, r) in rules.iter().enumerate() {
            let p = r.pattern.as_bytes();
            if p.len() != 2 || !p.iter().all(|c| alpha_set.contains(c)) {
                return bad(format!("rule {} pattern {:?} is not a bigram over the alphabet", r.id, r.pattern));
            }
            if !(r.weight.is_finite() && r.weight > 0.0) {
                return bad(format!("rule {} weight must be positive", r.id));
            }
            if r.id.is_empty() || !ids.insert(r.id.clone()) {
                return bad(format!("rule id {:?} empty or duplicated", r.id));
            }
            by_bigram.entry(r.bigram()).or_default().push(i);
        }
        for id in stock.sorted_ids() {
            if id.is_empty() || !id.bytes().all(|c| alpha_set.contains(&c)) {
                return bad(format!("stock item {id:?} is not a string over the alphabet"));
            }
        }
        Ok(SyntheticDomain {
            alphabet: alpha,
            rules,
            stock,
            seed,
            by_bigram,
        })
    }

    /// Draws a random domain. Same `(seed, profile)` gives the same domain.
    pub fn random(seed: u64, profile: &DomainProfile) -> Result<Self, SyntheticError> {
        if profile.alphabet_size == 0 || profile.alphabet_size > 26 {
            return Err(SyntheticError::InvalidDomain("alphabet_size must be in 1..=26".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alphabet: Vec<u8> = (b'a'..b'a' + profile.alphabet_size as u8).collect();
        let mut rules = Vec::new();
        for &x in &alphabet {
            for &y in &alphabet {
                let pattern = String::from_utf8(vec![x, y]).expect("ascii");
                if rng.gen_bool(profile.cleave_density) {
                    let (lo, hi) = profile.cleave_weight;
                    rules.push(Rule {
                        id: format!("cleave-{pattern}"),
                        pattern: pattern.clone(),
                        kind: RuleKind::Cleave,
                        weight: round6(rng.gen_range(lo..=hi)),
                    });
                }
                if rng.gen_bool(profile.capped_density) {
                    let (lo, hi) = profile.capped_weight;
                    rules.push(Rule {
                        id: format!("capped-{pattern}"),
                        pattern,
                        kind: RuleKind::Capped,
                        weight: round6(rng.gen_range(lo..=hi)),
                    });
                }
            }
        }
        let mut stock: BTreeSet<String> = BTreeSet::new();
        let mut symbols = alphabet.clone();
        symbols.shuffle(&mut rng);
        let n_symbols = ((profile.symbol_stock_fraction * alphabet.len() as f64).round() as usize)
            .clamp(1, alphabet.len());
        for &c in &symbols[..n_symbols] {
            stock.insert((c as char).to_string());
        }
        let mut guard = 0;
        while stock.len() < n_symbols + profile.extra_stock && guard < 100 * (profile.extra_stock + 1) {
            guard += 1;
            let len = rng.gen_range(2..=3);
            let s: String = (0..len)
                .map(|_| *alphabet.choose(&mut rng).expect("non-empty") as char)
                .collect();
            stock.insert(s);
        }
        let alphabet = String::from_utf8(alphabet).expect("ascii");
        SyntheticDomain::new(&alphabet, rules, StockSet::new(stock), seed)
    }

    pub fn alphabet(&self) -> &str {
        std::str::from_utf8(&self.alphabet).expect("ascii")
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn stock(&self) -> &StockSet {
        &self.stock
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn make_item(&self, id: &str) -> Item {
        Item {
            id: id.to_string(),
            fingerprint: item_fingerprint(id),
        }
    }

    fn apply(&self, rule: &Rule, product: &str, cut: usize) -> Vec<Item> {
        let (prefix, suffix) = product.split_at(cut);
        let prefix = match rule.kind {
            RuleKind::Cleave => prefix.to_string(),
            RuleKind::Capped => prefix.to_ascii_uppercase(),
        };
        vec![self.make_item(&prefix), self.make_item(suffix)]
    }

    /// Every applicable `(rule index, cut position)` pair, in rule order then
    /// position order. Cut `p` splits `s` into `s[..p]` and `s[p..]`.
    pub fn matches(&self, product: &str) -> Vec<(usize, usize)> {
        let bytes = product.as_bytes();
        let mut out = Vec::new();
        for p in 1..bytes.len() {
            if let Some(rs) = self.by_bigram.get(&(bytes[p - 1], bytes[p])) {
                out.extend(rs.iter().map(|&r| (r, p)));
            }
        }
        out.sort_by_key(|&(r, p)| (r, p));
        out
    }

    pub fn to_json(&self) -> String {
        let file = DomainFile {
            format: DOMAIN_FORMAT.to_string(),
            version: DOMAIN_VERSION,
            seed: self.seed,
            alphabet: self.alphabet().to_string(),
            stock: self.stock.sorted_ids().into_iter().map(String::from).collect(),
            rules: self.rules.clone(),
        };
        serde_json::to_string_pretty(&file).expect("domain serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SyntheticError> {
        let file: DomainFile = serde_json::from_str(text)?;
        if file.format != DOMAIN_FORMAT {
            return Err(SyntheticError::InvalidDomain(format!("unexpected format tag {:?}", file.format)));
        }
        if file.version != DOMAIN_VERSION {
            return Err(SyntheticError::InvalidDomain(format!("unsupported version {}", file.version)));
        }
        SyntheticDomain::new(&file.alphabet, file.rules, StockSet::new(file.stock), file.seed)
    }

    pub fn load(path: &Path) -> Result<Self, SyntheticError> {
        let text = std::fs::read_to_string(path).map_err(|source| SyntheticError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), SyntheticError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|source| SyntheticError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Minimal route length for `target` by interval dynamic programming over
    /// its substrings, using cleave rules only (capped reactants never
    /// resolve). `None` if the target cannot be reduced to stock.
    pub fn certify(&self, target: &str) -> Option<usize> {
        let s = target.as_bytes();
        let n = s.len();
        if n == 0 || !s.iter().all(|c| self.alphabet.contains(c)) {
            return None;
        }
        let cleavable = |p: usize| {
            self.by_bigram
                .get(&(s[p - 1], s[p]))
                .is_some_and(|rs| rs.iter().any(|&r| self.rules[r].kind == RuleKind::Cleave))
        };
        // cost[i][j] for s[i..j], j > i
        let mut cost = vec![vec![None::<usize>; n + 1]; n + 1];
        for len in 1..=n {
            for i in 0..=n - len {
                let j = i + len;
                if self.stock.contains(&target[i..j]) {
                    cost[i][j] = Some(0);
                    continue;
                }
                let mut best: Option<usize> = None;
                for p in i + 1..j {
                    if !cleavable(p) {
                        continue;
                    }
                    if let (Some(a), Some(b)) = (cost[i][p], cost[p][j]) {
                        let c = 1 + a + b;
                        best = Some(best.map_or(c, |x: usize| x.min(c)));
                    }
                }
                cost[i][j] = best;
            }
        }
        cost[0][n]
    }

    /// Generates `n` distinct solvable targets whose certified optimal route
    /// length lies in `difficulty`, seeded by the domain seed.
    pub fn generate_instances(
        &self,
        n: usize,
        difficulty: (usize, usize),
    ) -> Result<Vec<Instance>, SyntheticError> {
        self.generate_instances_seeded(n, difficulty, self.seed)
    }

    pub fn generate_instances_seeded(
        &self,
        n: usize,
        difficulty: (usize, usize),
        seed: u64,
    ) -> Result<Vec<Instance>, SyntheticError> {
        let (min_d, max_d) = difficulty;
        if min_d == 0 || min_d > max_d || max_d > MAX_CERTIFIED_DEPTH {
            return Err(SyntheticError::InvalidDifficulty(min_d, max_d));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let pieces: Vec<&str> = self.stock.sorted_ids();
        let cleave_junctions: HashSet<(u8, u8)> = self
            .rules
            .iter()
            .filter(|r| r.kind == RuleKind::Cleave)
            .map(Rule::bigram)
            .collect();
        let budget = 2000 * n.max(1);
        let mut out = Vec::with_capacity(n);
        let mut seen = HashSet::new();
        let mut attempts = 0;
        while out.len() < n && attempts < budget {
            attempts += 1;
            let n_pieces = rng.gen_range(min_d + 1..=max_d + 1);
            let mut target = String::new();
            let mut ok = true;
            for _ in 0..n_pieces {
                let candidates: Vec<&str> = match target.as_bytes().last() {
                    None => pieces.clone(),
                    Some(&last) => pieces
                        .iter()
                        .copied()
                        .filter(|p| cleave_junctions.contains(&(last, p.as_bytes()[0])))
                        .collect(),
                };
                match candidates.choose(&mut rng) {
                    Some(p) => target.push_str(p),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok || self.stock.contains(&target) || seen.contains(&target) {
                continue;
            }
            if let Some(opt) = self.certify(&target) {
                if (min_d..=max_d).contains(&opt) {
                    seen.insert(target.clone());
                    out.push(Instance {
                        target,
                        optimal_length: opt,
                    });
                }
            }
        }
        if out.len() < n {
            return Err(SyntheticError::GenerationExhausted {
                wanted: n,
                got: out.len(),
                min: min_d,
                max: max_d,
                attempts,
            });
        }
        Ok(out)
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

impl ExpansionOracle for SyntheticDomain {
    fn expand(&self, item: &Item, cfg: &OracleConfig) -> Result<Vec<TemplateAction>, OracleError> {
        let matches = self.matches(&item.id);
        if matches.is_empty() {
            return Ok(Vec::new());
        }
        let mut distinct: Vec<usize> = matches.iter().map(|&(r, _)| r).collect();
        distinct.dedup();
        let total: f64 = distinct.iter().map(|&r| self.rules[r].weight).sum();
        let actions = matches
            .into_iter()
            .map(|(r, cut)| {
                let rule = &self.rules[r];
                TemplateAction {
                    template_id: rule.id.clone(),
                    fingerprint: rule_fingerprint(rule),
                    probability: rule.weight / total,
                    reactants: self.apply(rule, &item.id, cut),
                }
            })
            .collect();
        Ok(rank_and_truncate(actions, cfg.k))
    }

    fn item(&self, id: &str) -> Result<Item, OracleError> {
        if id.is_empty() {
            return Err(OracleError::Remote("empty id".into()));
        }
        Ok(self.make_item(id))
    }
}
