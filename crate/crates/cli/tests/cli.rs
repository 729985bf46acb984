use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedapt_cli::runner::{Aggregate, CheckpointFile, Summary};
use fedapt_core::evaluation::evaluate;
use fedapt_core::scenario::Scenario;
use fedapt_core::EvalOptions;

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.toml");

fn fedapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedapt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = fedapt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn read_json<T: serde::de::DeserializeOwned>(p: PathBuf) -> T {
    serde_json::from_str(&fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

fn metric_rounds(csv: &str) -> Vec<usize> {
    let mut rounds: Vec<usize> = csv.lines().skip(2).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    rounds.dedup();
    rounds
}

#[test]
fn tiny_run_writes_the_full_tree() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    run_ok(&["run", "--config", TINY, "--out", path(&out)]);

    let config_echo = fs::read_to_string(out.join("config.toml")).unwrap();
    let agg: Aggregate = read_json(out.join("aggregate.json"));
    assert_eq!(agg.seeds, [1, 2]);
    let header = format!("# fedapt-cli {} config={}", env!("CARGO_PKG_VERSION"), agg.header.config_hash);
    assert_eq!(config_echo.lines().next().unwrap(), header);

    for seed in [1, 2] {
        let dir = out.join(format!("seed-{seed}"));
        let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), header);
        assert_eq!(lines.next().unwrap(), "round,seed,mode,domain,accuracy,adaptive_net_acc,mean_local_loss");
        assert_eq!(metric_rounds(&csv), [0, 1, 2, 3]);
        // 3 domains plus the average, per round.
        assert_eq!(csv.lines().count(), 2 + 4 * 4);

        let summary: Summary = read_json(dir.join("summary.json"));
        assert_eq!(summary.header, agg.header);
        assert_eq!(summary.seed, seed);
        assert_eq!(summary.rounds_completed, 3);
        let per_key = summary.per_key.as_ref().unwrap();
        assert_eq!((per_key.len(), per_key[0].len()), (4, 3));
        let ckpt: CheckpointFile = read_json(dir.join("checkpoint.json"));
        assert_eq!(ckpt.header, agg.header);
        assert_eq!(ckpt.checkpoint.encoder_fingerprint, summary.encoder_fingerprint);
    }
}

#[test]
fn mean_over_seeds_matches_the_seed_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    run_ok(&["run", "--config", TINY, "--out", path(&out), "--repeats", "3"]);
    let agg: Aggregate = read_json(out.join("aggregate.json"));
    let summaries: Vec<Summary> = agg.seeds.iter().map(|s| read_json(out.join(format!("seed-{s}/summary.json")))).collect();
    for (d, stat) in agg.per_domain.iter().enumerate() {
        let hand = summaries.iter().map(|s| s.per_domain[d]).sum::<f64>() / 3.0;
        assert!((stat.mean - hand).abs() < 1e-12, "domain {d}: {} vs {hand}", stat.mean);
    }
    let hand = summaries.iter().map(|s| s.average).sum::<f64>() / 3.0;
    assert!((agg.average.mean - hand).abs() < 1e-12);
}

#[test]
fn checkpoint_reproduces_the_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    run_ok(&["run", "--config", TINY, "--out", path(&out), "--repeats", "1"]);
    let summary: Summary = read_json(out.join("seed-1/summary.json"));
    let ckpt: CheckpointFile = read_json(out.join("seed-1/checkpoint.json"));

    let cfg = fedapt_cli::config::ExperimentConfig::load(Path::new(TINY), &[]).unwrap();
    let scenario = Scenario::build(&cfg.world, &cfg.partition, &cfg.encoder).unwrap();
    assert_eq!(ckpt.checkpoint.encoder_fingerprint, scenario.pair.fingerprint());
    let state = ckpt.checkpoint.into_state();
    let report = evaluate(&state, &scenario.pair, &scenario.test, &EvalOptions::default()).unwrap();
    assert_eq!(report.per_domain, summary.per_domain);
}

#[test]
fn golden_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    run_ok(&["run", "--config", TINY, "--out", path(&out), "--repeats", "1"]);
    let got = fs::read_to_string(out.join("seed-1/metrics.csv")).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/tiny_metrics.csv");
    if std::env::var_os("FEDAPT_BLESS").is_some() {
        fs::write(&golden, &got).unwrap();
    }
    let want = fs::read_to_string(&golden).expect("golden file; run with FEDAPT_BLESS=1 to create");
    assert_eq!(got, want);
}

#[test]
fn echoed_config_replays_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok(&["run", "--config", TINY, "--out", path(&a), "--fed.rounds=2", "--repeats", "1"]);
    let echo = a.join("config.toml");
    run_ok(&["run", "--config", path(&echo), "--out", path(&b)]);
    let ma = fs::read(a.join("seed-1/metrics.csv")).unwrap();
    let mb = fs::read(b.join("seed-1/metrics.csv")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn zero_rounds_and_zeroshot_write_only_the_initial_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, flags) in [("r0", ["--rounds", "0"]), ("zs", ["--mode", "zeroshot"])] {
        let out = tmp.path().join(name);
        let mut args = vec!["run", "--config", TINY, "--out", path(&out), "--repeats", "1"];
        args.extend(flags);
        run_ok(&args);
        assert!(out.join("config.toml").exists());
        let csv = fs::read_to_string(out.join("seed-1/metrics.csv")).unwrap();
        assert_eq!(metric_rounds(&csv), [0], "{name}");
        let summary: Summary = read_json(out.join("seed-1/summary.json"));
        assert_eq!(summary.rounds_completed, 0);
    }
}

#[test]
fn invalid_config_exits_2_with_a_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[world]\nnum_classes = 4\n\n[fed]\nmode = \"fedsgd\"\n").unwrap();
    let out = fedapt(&["run", "--config", path(&bad), "--out", path(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml:5:"), "{err}");

    fs::write(&bad, "[fed]\ntau_q = -1.0\n").unwrap();
    let out = fedapt(&["run", "--config", path(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml:2:"));

    let out = fedapt(&["run", "--config", path(&tmp.path().join("missing.toml"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1_with_round_and_client() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fedapt(&[
        "run",
        "--config",
        TINY,
        "--out",
        path(&tmp.path().join("o")),
        "--supervision",
        "unsupervised",
        "--training.unsup.stage1_rounds=0",
        "--training.unsup.num_neighbors=500",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("round 1") && err.contains("client"), "{err}");

    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = fedapt(&["run", "--config", TINY, "--out", path(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compare_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let fedapt_dir = tmp.path().join("fedapt");
    let promptfl_dir = tmp.path().join("promptfl");
    run_ok(&["run", "--config", TINY, "--out", path(&fedapt_dir)]);
    run_ok(&["run", "--config", TINY, "--out", path(&promptfl_dir), "--mode", "promptfl"]);

    let table = tmp.path().join("table");
    let out = run_ok(&["compare", path(&fedapt_dir), path(&promptfl_dir), "--out", path(&table)]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 1 + 3 + 1, "{text}");
    let csv = fs::read_to_string(table.join("compare.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows[0], "domain,fedapt,promptfl,delta:promptfl-fedapt");
    assert_eq!(rows.len(), 1 + 3 + 1);
    assert!(table.join("compare.txt").exists());

    let same = run_ok(&["compare", path(&fedapt_dir), path(&fedapt_dir)]);
    for line in String::from_utf8_lossy(&same.stdout).lines().skip(1) {
        assert!(line.trim_end().ends_with("+0.00"), "{line}");
    }

    let other = tmp.path().join("other");
    run_ok(&["run", "--config", TINY, "--out", path(&other), "--world.seed=12", "--repeats", "1"]);
    let out = fedapt(&["compare", path(&fedapt_dir), path(&other)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different worlds"));
}
