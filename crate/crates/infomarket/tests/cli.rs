//! End-to-end runs of the command-line binary: every command, the
//! documented exit codes, and determinism under a fixed seed.

use infomarket::Money;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::str::FromStr;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_infomarket"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_lines(path: &Path, lines: &[&str]) {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).unwrap();
}

const CATALOG: &[&str] = &[
    r#"{"advertiser":"wanderfar","keyword":"travel","cpc":2.0}"#,
    r#"{"advertiser":"gadgetry","keyword":"tech","cpc":1.5}"#,
    r#"{"advertiser":"stockly","keyword":"finance","cpc":2.5}"#,
];

#[test]
fn trace_gen_is_deterministic_and_inspectable() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "trace", "gen", "--users", "30", "--publishers", "8", "--aggs", "3", "--events", "500",
        "--seed", "7",
    ];
    assert_success(&run(&[&args[..], &["--out", "a.jsonl"]].concat(), dir.path()));
    assert_success(&run(&[&args[..], &["--out", "b.jsonl"]].concat(), dir.path()));
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "same seed must write identical traces");

    let other = run(&[&args[..10], &["--seed", "8", "--out", "c.jsonl"][..]].concat(), dir.path());
    assert_success(&other);
    let c = std::fs::read(dir.path().join("c.jsonl")).unwrap();
    assert_ne!(a, c, "a different seed must change the trace");
}

#[test]
fn simulation_without_ad_networks_reports_zero_adoption() {
    let dir = tempfile::tempdir().unwrap();
    assert_success(&run(
        &[
            "trace", "gen", "--users", "20", "--publishers", "5", "--aggs", "0", "--events", "200",
            "--seed", "3", "--out", "t.jsonl",
        ],
        dir.path(),
    ));
    write_lines(&dir.path().join("catalog.jsonl"), CATALOG);
    let out = run(
        &["simulate", "--trace", "t.jsonl", "--catalog", "catalog.jsonl", "--out", "results"],
        dir.path(),
    );
    assert_success(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("users joined = 0/20 (0.0%)"), "{stdout}");
    assert!(stdout.contains("aggregators joined = 0/0"), "{stdout}");
}

#[test]
fn simulate_writes_deterministic_result_csvs() {
    let dir = tempfile::tempdir().unwrap();
    assert_success(&run(
        &[
            "trace", "gen", "--users", "40", "--publishers", "10", "--aggs", "4", "--events",
            "1500", "--seed", "5", "--out", "t.jsonl",
        ],
        dir.path(),
    ));
    write_lines(&dir.path().join("catalog.jsonl"), CATALOG);
    let simulate = |out_dir: &str| {
        run(
            &[
                "simulate", "--trace", "t.jsonl", "--catalog", "catalog.jsonl", "--out", out_dir,
                "--market", "direct", "--set", "beta=4.0", "--seed", "9",
            ],
            dir.path(),
        )
    };
    assert_success(&simulate("r1"));
    assert_success(&simulate("r2"));
    for name in ["rounds.csv", "summary.csv", "user_revenue_quantiles.csv"] {
        let one = std::fs::read(dir.path().join("r1").join(name)).unwrap();
        let two = std::fs::read(dir.path().join("r2").join(name)).unwrap();
        assert!(!one.is_empty());
        assert_eq!(one, two, "{name} must be identical across reruns");
    }
}

#[test]
fn config_file_drives_simulate_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    assert_success(&run(
        &[
            "trace", "gen", "--users", "10", "--publishers", "4", "--aggs", "2", "--events",
            "120", "--seed", "2", "--out", "t.jsonl",
        ],
        dir.path(),
    ));
    write_lines(&dir.path().join("catalog.jsonl"), CATALOG);
    write_lines(
        &dir.path().join("run.conf"),
        &[
            "# demo experiment",
            "market_type = mediated",
            "beta = 4.0",
            "trace = t.jsonl",
            "catalog = catalog.jsonl",
            "output = from_config",
        ],
    );
    let out = run(&["simulate", "--config", "run.conf"], dir.path());
    assert_success(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("market = mediated"));
    assert!(dir.path().join("from_config/summary.csv").exists());

    let out = run(&["simulate", "--config", "run.conf", "--market", "dnt-direct", "--out", "o2"], dir.path());
    assert_success(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("market = dnt-direct"));

    let bad = run(&["simulate", "--config", "missing.conf"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn auction_run_is_seeded_writes_grants_and_reconciles_with_report() {
    let dir = tempfile::tempdir().unwrap();
    write_lines(
        &dir.path().join("bids.jsonl"),
        &[
            r#"{"user":"u1","aggregator":"b.example","max_price":"2.0"}"#,
            r#"{"user":"u1","aggregator":"d.example","max_price":"1.0"}"#,
            r#"{"user":"u2","aggregator":"b.example","max_price":"3.5"}"#,
        ],
    );
    let args = [
        "auction", "run", "--bids", "bids.jsonl", "--epsilon", "2", "--period", "1", "--seed",
        "11",
    ];
    assert_success(&run(&[&args[..], &["--out", "o1.jsonl", "--grants", "g.jsonl", "--ledger", "ledger.jsonl"]].concat(), dir.path()));
    assert_success(&run(&[&args[..], &["--out", "o2.jsonl"]].concat(), dir.path()));
    let o1 = std::fs::read(dir.path().join("o1.jsonl")).unwrap();
    let o2 = std::fs::read(dir.path().join("o2.jsonl")).unwrap();
    assert_eq!(o1, o2, "same seed must reproduce outcomes");

    let grants = std::fs::read_to_string(dir.path().join("g.jsonl")).unwrap();
    for line in grants.lines() {
        let grant: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(grant["period"], 1);
        assert_eq!(grant["user"].as_str().unwrap().len(), 2);
    }

    // per-user totals printed by report must sum to its own total line
    let report = run(&["report", "--ledger", "ledger.jsonl"], dir.path());
    assert_success(&report);
    let text = String::from_utf8(report.stdout).unwrap();
    let mut users_sum = Money::ZERO;
    let mut reported_total = None;
    for line in text.lines().skip(1) {
        let (who, amount) = line.split_once(',').unwrap();
        let amount = Money::from_str(amount).unwrap();
        if who == "total" {
            reported_total = Some(amount);
        } else {
            users_sum += amount;
        }
    }
    assert_eq!(Some(users_sum), reported_total, "report must reconcile exactly:\n{text}");
}

#[test]
fn auction_run_rejects_duplicate_bids_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    write_lines(
        &dir.path().join("bids.jsonl"),
        &[
            r#"{"user":"u1","aggregator":"b.example","max_price":"2.0"}"#,
            r#"{"user":"u1","aggregator":"b.example","max_price":"9.0"}"#,
        ],
    );
    let out = run(&["auction", "run", "--bids", "bids.jsonl", "--out", "o.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("bids.jsonl:2"), "{stderr}");
    assert!(!dir.path().join("o.jsonl").exists(), "no output on failure");
}

#[test]
fn auction_run_with_no_bids_writes_nothing_but_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bids.jsonl"), "").unwrap();
    let out = run(
        &["auction", "run", "--bids", "bids.jsonl", "--out", "o.jsonl", "--ledger", "l.jsonl"],
        dir.path(),
    );
    assert_success(&out);
    assert_eq!(std::fs::read_to_string(dir.path().join("o.jsonl")).unwrap(), "");
    assert_eq!(std::fs::read_to_string(dir.path().join("l.jsonl")).unwrap(), "");

    let report = run(&["report", "--ledger", "l.jsonl"], dir.path());
    assert_success(&report);
    assert_eq!(String::from_utf8(report.stdout).unwrap(), "user,total\ntotal,0\n");
}

#[test]
fn shapley_prints_shares_and_rejects_inverted_intents() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["shapley", "--market", "mediated", "--impl", "2", "--expl", "4"], dir.path());
    assert_success(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("user = 0.500000"), "{text}");
    assert!(text.contains("aggregator = 3.000000"), "{text}");
    assert!(text.contains("market_maker = 0.500000"), "{text}");

    let out = run(&["shapley", "--market", "direct", "--impl", "3", "--expl", "2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn valuate_prices_a_profile() {
    let dir = tempfile::tempdir().unwrap();
    write_lines(
        &dir.path().join("profile.jsonl"),
        &[r#"{"site":"travelblog.example","count":2,"keywords":["travel"]}"#],
    );
    write_lines(
        &dir.path().join("catalog.jsonl"),
        &[r#"{"advertiser":"wanderfar","keyword":"travel","cpc":1.0}"#],
    );
    let out = run(
        &["valuate", "--profile", "profile.jsonl", "--catalog", "catalog.jsonl", "--pi", "0.5"],
        dir.path(),
    );
    assert_success(&out);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "0.75");
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["bogus-command"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["trace", "gen", "--no-such-flag"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(run(&["shapley", "--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn proxy_command_serves_and_rejects_unauthenticated_clients() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("state/whitelists")).unwrap();
    std::fs::write(dir.path().join("state/whitelists/u1.txt"), "news.example\n").unwrap();
    let mut child = bin()
        .args(["proxy", "--listen", "127.0.0.1:0", "--control", "127.0.0.1:0", "--state-dir", "state"])
        .current_dir(dir.path())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.strip_prefix("proxy listening on ").expect(&first).to_string();
    let second = lines.next().unwrap().unwrap();
    assert!(second.starts_with("control listening on "));

    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    stream
        .write_all(b"GET http://news.example/ HTTP/1.1\r\nHost: news.example\r\nConnection: close\r\n\r\n")
        .unwrap();
    let mut reply = Vec::new();
    stream.read_to_end(&mut reply).unwrap();
    assert!(reply.starts_with(b"HTTP/1.1 407 "), "{}", String::from_utf8_lossy(&reply));

    child.kill().unwrap();
    let _ = child.wait();
}
