use std::sync::Arc;

use egmcts::phase1::{run_phase1, Phase1Params};
use egmcts::synthetic::{DomainProfile, SyntheticDomain};

fn small_params() -> Phase1Params {
    let mut p = Phase1Params {
        max_rounds: 2,
        ..Phase1Params::default()
    };
    p.search.iteration_limit = 120;
    p.train.epochs = 3;
    p
}

#[test]
fn phase_one_is_reproducible_and_thread_count_independent() {
    let d = SyntheticDomain::random(2, &DomainProfile::default()).unwrap();
    let items: Vec<_> = d
        .generate_instances(16, (2, 5))
        .unwrap()
        .iter()
        .map(|x| d.make_item(&x.target))
        .collect();
    let (train, val) = items.split_at(12);
    let stock = Arc::new(d.stock().clone());
    let p = small_params();
    let run = |threads: usize, dir: &std::path::Path| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_phase1(train, val, stock.clone(), &d, &p, 9, Some(dir)).unwrap())
    };
    let (a_dir, b_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = run(1, a_dir.path());
    let b = run(2, b_dir.path());
    assert_eq!(a.weights.to_bytes(), b.weights.to_bytes());
    assert_eq!(a.records, b.records);
    assert_eq!(a.experience_sizes, b.experience_sizes);
    let mut names: Vec<_> = std::fs::read_dir(a_dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.contains(&"round-001-weights.bin".to_string()));
    assert!(names.contains(&"validation.csv".to_string()));
    for n in names {
        assert_eq!(
            std::fs::read(a_dir.path().join(&n)).unwrap(),
            std::fs::read(b_dir.path().join(&n)).unwrap(),
            "{n} differs"
        );
    }
}
