//! Benchmark aggregation and dataset similarity statistics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::Item;

pub const DEFAULT_LIMITS: [usize; 5] = [100, 200, 300, 400, 500];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("algorithms were run on different target sets ({0})")]
    MismatchedTargets(String),
    #[error("empty item set")]
    EmptySet,
    #[error("csv: {0}")]
    Csv(String),
}

/// One planner run on one target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub algorithm: String,
    pub target: String,
    pub solved: bool,
    /// Iterations to the first solution when solved, iterations run otherwise.
    pub iterations: usize,
    pub expanded_reaction_nodes: usize,
    pub expanded_molecule_nodes: usize,
    pub route_length: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: String,
    pub targets: usize,
    /// `(limit, success rate)` pairs.
    pub success_rates: Vec<(usize, f64)>,
    pub avg_iterations: f64,
    pub avg_reaction_nodes: f64,
    pub avg_molecule_nodes: f64,
    pub common_solved: usize,
    pub longest_route_count: usize,
    pub shortest_route_count: usize,
    pub avg_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub iteration_limit: usize,
    pub algorithms: Vec<AlgorithmSummary>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-algorithm table. Unsolved targets count `iteration_limit` toward the
/// average iterations; route-length statistics use the targets every
/// algorithm solved, and ties for longest or shortest count for everyone tied.
pub fn aggregate(rows: &[BenchmarkRow], iteration_limit: usize, limits: &[usize]) -> Result<Summary, MetricsError> {
    let mut by_alg: BTreeMap<&str, BTreeMap<&str, &BenchmarkRow>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !by_alg.contains_key(r.algorithm.as_str()) {
            order.push(&r.algorithm);
        }
        let per = by_alg.entry(&r.algorithm).or_default();
        if per.insert(&r.target, r).is_some() {
            return Err(MetricsError::MismatchedTargets(format!("{} has {} twice", r.algorithm, r.target)));
        }
    }
    let target_sets: Vec<BTreeSet<&str>> = by_alg.values().map(|m| m.keys().copied().collect()).collect();
    if target_sets.windows(2).any(|w| w[0] != w[1]) {
        return Err(MetricsError::MismatchedTargets("target sets differ".into()));
    }
    let targets: Vec<&str> = target_sets.first().map(|s| s.iter().copied().collect()).unwrap_or_default();
    let common: Vec<&str> = targets
        .iter()
        .copied()
        .filter(|t| by_alg.values().all(|m| m[t].solved))
        .collect();

    let mut longest: BTreeMap<&str, usize> = BTreeMap::new();
    let mut shortest: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &common {
        let lens: Vec<(&str, usize)> = by_alg
            .iter()
            .map(|(a, m)| (*a, m[t].route_length.unwrap_or(0)))
            .collect();
        let max = lens.iter().map(|l| l.1).max().unwrap_or(0);
        let min = lens.iter().map(|l| l.1).min().unwrap_or(0);
        for (a, l) in lens {
            if l == max {
                *longest.entry(a).or_default() += 1;
            }
            if l == min {
                *shortest.entry(a).or_default() += 1;
            }
        }
    }

    let algorithms = order
        .iter()
        .map(|a| {
            let m = &by_alg[a];
            let n = m.len().max(1) as f64;
            AlgorithmSummary {
                algorithm: a.to_string(),
                targets: m.len(),
                success_rates: limits
                    .iter()
                    .map(|&l| (l, m.values().filter(|r| r.solved && r.iterations <= l).count() as f64 / n))
                    .collect(),
                avg_iterations: mean(m.values().map(|r| if r.solved { r.iterations } else { iteration_limit } as f64)),
                avg_reaction_nodes: mean(m.values().map(|r| r.expanded_reaction_nodes as f64)),
                avg_molecule_nodes: mean(m.values().map(|r| r.expanded_molecule_nodes as f64)),
                common_solved: common.len(),
                longest_route_count: longest.get(a).copied().unwrap_or(0),
                shortest_route_count: shortest.get(a).copied().unwrap_or(0),
                avg_length: (!common.is_empty())
                    .then(|| mean(common.iter().map(|t| m[t].route_length.unwrap_or(0) as f64))),
            }
        })
        .collect();
    Ok(Summary {
        iteration_limit,
        algorithms,
    })
}

fn write_csv(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| MetricsError::Csv(e.to_string());
    w.write_record(&header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| MetricsError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

impl Summary {
    /// Success rates and average node counts.
    pub fn efficiency_csv(&self) -> Result<String, MetricsError> {
        let limits: Vec<usize> = self
            .algorithms
            .first()
            .map(|a| a.success_rates.iter().map(|s| s.0).collect())
            .unwrap_or_default();
        let mut header = vec!["algorithm".to_string(), "targets".to_string()];
        header.extend(limits.iter().map(|l| format!("success_at_{l}")));
        header.extend(["avg_iter", "avg_T", "avg_M"].map(String::from));
        let rows = self
            .algorithms
            .iter()
            .map(|a| {
                let mut r = vec![a.algorithm.clone(), a.targets.to_string()];
                r.extend(a.success_rates.iter().map(|s| format!("{:.4}", s.1)));
                r.push(format!("{:.2}", a.avg_iterations));
                r.push(format!("{:.2}", a.avg_reaction_nodes));
                r.push(format!("{:.2}", a.avg_molecule_nodes));
                r
            })
            .collect();
        write_csv(header, rows)
    }

    /// Route-length comparison over the commonly solved targets.
    pub fn length_csv(&self) -> Result<String, MetricsError> {
        let header = ["algorithm", "common_solved", "LRN", "SRN", "avg_length"].map(String::from).to_vec();
        let rows = self
            .algorithms
            .iter()
            .map(|a| {
                vec![
                    a.algorithm.clone(),
                    a.common_solved.to_string(),
                    a.longest_route_count.to_string(),
                    a.shortest_route_count.to_string(),
                    a.avg_length.map(|l| format!("{l:.3}")).unwrap_or_default(),
                ]
            })
            .collect();
        write_csv(header, rows)
    }
}

pub fn rows_csv(rows: &[BenchmarkRow]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| MetricsError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| MetricsError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStat {
    pub id: String,
    pub s_max: f64,
    pub s_avg: f64,
}

/// Highest and mean Tanimoto similarity of each test item to the training set.
pub fn similarity_stats(test: &[Item], train: &[Item]) -> Result<Vec<SimilarityStat>, MetricsError> {
    if test.is_empty() || train.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    Ok(test
        .iter()
        .map(|t| {
            let sims: Vec<f64> = train.iter().map(|r| t.fingerprint.tanimoto(&r.fingerprint)).collect();
            SimilarityStat {
                id: t.id.clone(),
                s_max: sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                s_avg: sims.iter().sum::<f64>() / sims.len() as f64,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::Fingerprint;

    fn row(alg: &str, target: &str, solved: bool, iterations: usize, len: Option<usize>) -> BenchmarkRow {
        BenchmarkRow {
            algorithm: alg.into(),
            target: target.into(),
            solved,
            iterations,
            expanded_reaction_nodes: 4,
            expanded_molecule_nodes: 6,
            route_length: len,
        }
    }

    #[test]
    fn all_solved_at_one() {
        let rows = vec![row("a", "t1", true, 1, Some(1)), row("a", "t2", true, 1, Some(2))];
        let s = aggregate(&rows, 500, &DEFAULT_LIMITS).unwrap();
        let a = &s.algorithms[0];
        assert!(a.success_rates.iter().all(|r| r.1 == 1.0));
        assert_eq!(a.avg_iterations, 1.0);
        assert_eq!(a.avg_length, Some(1.5));
    }

    #[test]
    fn lrn_srn_hand_example() {
        let rows = vec![
            row("a", "t1", true, 5, Some(3)),
            row("a", "t2", true, 5, Some(5)),
            row("b", "t1", true, 5, Some(5)),
            row("b", "t2", true, 5, Some(3)),
        ];
        let s = aggregate(&rows, 500, &DEFAULT_LIMITS).unwrap();
        for a in &s.algorithms {
            assert_eq!((a.longest_route_count, a.shortest_route_count), (1, 1));
        }
        let tie = vec![row("a", "t1", true, 5, Some(4)), row("b", "t1", true, 5, Some(4))];
        let s = aggregate(&tie, 500, &DEFAULT_LIMITS).unwrap();
        for a in &s.algorithms {
            assert_eq!((a.longest_route_count, a.shortest_route_count), (1, 1));
        }
    }

    #[test]
    fn unsolved_counts_at_limit_and_rates_monotone() {
        let rows = vec![
            row("a", "t1", false, 37, None),
            row("a", "t2", true, 150, Some(2)),
            row("a", "t3", true, 20, Some(2)),
        ];
        let s = aggregate(&rows, 500, &DEFAULT_LIMITS).unwrap();
        let a = &s.algorithms[0];
        assert!((a.avg_iterations - (500.0 + 150.0 + 20.0) / 3.0).abs() < 1e-12);
        let rates: Vec<f64> = a.success_rates.iter().map(|r| r.1).collect();
        assert!(rates.windows(2).all(|w| w[0] <= w[1]));
        assert!((rates[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((rates[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_targets() {
        let rows = vec![row("a", "t1", true, 1, Some(1)), row("b", "t2", true, 1, Some(1))];
        assert!(matches!(aggregate(&rows, 500, &DEFAULT_LIMITS), Err(MetricsError::MismatchedTargets(_))));
    }

    #[test]
    fn csv_outputs() {
        let rows = vec![row("a", "t1", true, 1, Some(1)), row("b", "t1", false, 9, None)];
        let s = aggregate(&rows, 500, &DEFAULT_LIMITS).unwrap();
        let eff = s.efficiency_csv().unwrap();
        assert!(eff.starts_with("algorithm,targets,success_at_100,"));
        assert_eq!(eff.lines().count(), 3);
        let len = s.length_csv().unwrap();
        assert!(len.contains("a,0,0,0,"));
        assert!(rows_csv(&rows).unwrap().starts_with("algorithm,target,solved"));
    }

    #[test]
    fn similarity_examples() {
        let it = |id: &str, bits: &[usize]| Item::new(id, Fingerprint::from_indices(bits.iter().copied())).unwrap();
        let a = it("a", &[1, 2, 3]);
        let b = it("b", &[2, 3, 4]);
        let c = it("c", &[7]);
        let s = similarity_stats(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
        assert_eq!(s[0].s_max, 1.0);
        let s = similarity_stats(std::slice::from_ref(&a), std::slice::from_ref(&c)).unwrap();
        assert_eq!(s[0].s_max, 0.0);
        let s = similarity_stats(std::slice::from_ref(&a), &[b, c]).unwrap();
        assert_eq!(s[0].s_max, 0.5);
        assert_eq!(s[0].s_avg, 0.25);
        assert_eq!(similarity_stats(&[], &[a]), Err(MetricsError::EmptySet));
    }
}
