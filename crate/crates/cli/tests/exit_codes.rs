use std::path::Path;
use std::process::{Command, Output};

fn egmcts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egmcts")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("process exited normally")
}

fn generate(dir: &Path) -> String {
    let out = egmcts(&[
        "generate",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "2",
        "--train",
        "4",
        "--validation",
        "2",
        "--test",
        "3",
        "--min-depth",
        "2",
        "--max-depth",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("config.toml").to_str().unwrap().to_string()
}

fn first_test_target(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("test.txt")).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn plan_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generate(dir.path());
    let target = first_test_target(dir.path());
    let out = egmcts(&["plan", &target, "--config", &cfg, "--untrained"]);
    assert_eq!(code(&out), 0);
    let out = egmcts(&["plan", "QQQQ", "--config", &cfg, "--untrained"]);
    assert_eq!(code(&out), 2);
    let out = egmcts(&["plan", &target, "--config", "/no/such/config.toml"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = egmcts(&["plan", &target, "--config", &cfg, "--weights", "/no/such/weights.bin"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&egmcts(&["plan"])), 1);
    assert_eq!(code(&egmcts(&["no-such-command"])), 1);
    assert_eq!(code(&egmcts(&["--help"])), 0);
}

#[test]
fn bench_rejects_unknown_algorithm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generate(dir.path());
    let out = egmcts(&["bench", "--config", &cfg, "--algorithms", "eg-mcts-0,bogus"]);
    assert_eq!(code(&out), 1);
    let out = egmcts(&["bench", "--config", &cfg, "--algorithms", "eg-mcts-0,greedy-dfs"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn plan_over_subprocess_oracle_matches_local() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = generate(dir.path());
    let target = first_test_target(dir.path());
    let domain = dir.path().join("domain.json");
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&domain).unwrap()).unwrap();
    let stock: Vec<&str> = doc["stock"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    let stock_file = dir.path().join("stock.txt");
    std::fs::write(&stock_file, stock.join("\n") + "\n").unwrap();

    let local = dir.path().join("local");
    let out = egmcts(&["plan", &target, "--config", &cfg, "--untrained", "--out", local.to_str().unwrap()]);
    assert_eq!(code(&out), 0);

    let remote = dir.path().join("remote");
    let endpoint = format!(
        "remote:cmd:{} serve-oracle --domain {} --stdio",
        env!("CARGO_BIN_EXE_egmcts"),
        domain.display()
    );
    let out = egmcts(&[
        "plan",
        &target,
        "--oracle",
        &endpoint,
        "--stock",
        stock_file.to_str().unwrap(),
        "--seed",
        "2",
        "--untrained",
        "--out",
        remote.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let read = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(d.join("plan.json")).unwrap()).unwrap()
    };
    assert_eq!(read(&local)["outcome"], read(&remote)["outcome"]);
}

#[test]
fn noc_split_takes_comma_separated_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("r.ndjson");
    let stock = dir.path().join("stock.txt");
    std::fs::write(&rec, "{\"reactants\":[\"s\"],\"products\":[\"a\"]}\n{\"reactants\":[\"a\"],\"products\":[\"b\"]}\n").unwrap();
    std::fs::write(&stock, "s\n").unwrap();
    let run = |split: &str| {
        let out = dir.path().join("noc");
        egmcts(&[
            "noc",
            "--records",
            rec.to_str().unwrap(),
            "--stock",
            stock.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--min-outdegree",
            "0",
            "--min-cost",
            "1",
            "--split",
            split,
        ])
    };
    assert_eq!(code(&run("1,1,0")), 0);
    assert!(dir.path().join("noc/split.json").is_file());
    assert_eq!(code(&run("1,1")), 1);
}
