use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const SIM_HEADER: &str = "K,p,C,epsilon,rule,feedback_mode,trials,rate,mean_tau,mean_eta,meanD_all,meanD_exsys,meanD_comm,fer,rate_ci95,ns_per_1000_symbols,tau_B,rate_bound_systematic,rate_bound_uniform";

fn sparsepm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsepm")).args(args).output().expect("run sparsepm")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn strip_timing(csv: &str) -> String {
    let col = SIM_HEADER.split(',').position(|h| h == "ns_per_1000_symbols").unwrap();
    csv.lines()
        .map(|l| l.split(',').enumerate().filter(|&(i, _)| i != col).map(|(_, f)| f).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn bounds_range_gives_one_row_per_k() {
    let csv = stdout(&sparsepm(&["bounds", "--K", "1..512", "--p", "0.11", "--epsilon", "1e-3"]));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 513);
    assert_eq!(lines[0], "K,p,C,epsilon,tau_com,tau_conf,tau_prime_com,tau_binomial_com,tau_B,rate_bound_systematic,rate_bound_uniform");
    assert!(lines[1].starts_with("1,0.11,"));
    assert!(lines[512].starts_with("512,0.11,"));
}

#[test]
fn capacity_sweep_echoes_resolved_p() {
    let csv = stdout(&sparsepm(&["bounds", "--K", "16,32", "--capacity", "0.5,0.75"]));
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let p: f64 = rows[0][1].parse().unwrap();
    let c: f64 = rows[0][2].parse().unwrap();
    assert!((p - 0.110_027_864_438_359_55).abs() < 1e-12);
    assert!((c - 0.5).abs() < 1e-12);
}

#[test]
fn simulate_matches_golden_file() {
    let csv = stdout(&sparsepm(&["simulate", "--K", "8,12", "--p", "0.1", "--trials", "50", "--seed", "3", "--dmax", "6"]));
    assert_eq!(csv.lines().next().unwrap(), SIM_HEADER);
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/simulate_small.csv")).unwrap();
    assert_eq!(strip_timing(&csv), strip_timing(&golden));
}

#[test]
fn simulate_sweep_row_count_and_threads() {
    let base = ["simulate", "--K", "8,10", "--capacity", "0.5,0.75", "--trials", "40", "--seed", "11"];
    let one = stdout(&sparsepm(&[&base[..], &["--threads", "1"]].concat()));
    let three = stdout(&sparsepm(&[&base[..], &["--threads", "3"]].concat()));
    assert_eq!(one.lines().count(), 5);
    assert_eq!(strip_timing(&one), strip_timing(&three));
}

#[test]
fn rules_and_feedback_modes_are_reported() {
    for (rule, feedback) in [("sed", "dense"), ("sead", "dense"), ("wmad-lookahead", "sparse"), ("wmad-lookahead", "dense")] {
        let csv = stdout(&sparsepm(&["simulate", "--K", "6", "--p", "0.05", "--trials", "10", "--rule", rule, "--feedback", feedback]));
        let row: Vec<String> = csv.lines().nth(1).unwrap().split(',').map(String::from).collect();
        assert_eq!(row[4], rule);
        assert_eq!(row[5], feedback);
        assert_eq!(row[6], "10");
    }
}

#[test]
fn output_file_and_config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    let out = dir.path().join("out.csv");
    std::fs::write(
        &config,
        format!("command = \"simulate\"\nK = [8]\nC = 0.5\ntrials = 5\nmasterSeed = 4\noutputPath = {:?}\n", out.to_str().unwrap()),
    )
    .unwrap();
    let status = sparsepm(&["--config", config.to_str().unwrap(), "--trials", "7", "--K", "6..7"]);
    assert!(stdout(&status).is_empty());
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "6");
    assert_eq!(rows[0][6], "7");

    let both = dir.path().join("both.toml");
    std::fs::write(&both, "K = 8\np = 0.1\nC = 0.5\n").unwrap();
    let fail = sparsepm(&["bounds", "--config", both.to_str().unwrap()]);
    assert_eq!(fail.status.code(), Some(2));
    assert!(stderr(&fail).contains("`p` and `C`"));
    let ok = sparsepm(&["bounds", "--config", both.to_str().unwrap(), "--p", "0.2"]);
    assert!(stdout(&ok).contains("\n8,0.2,"));
}

#[test]
fn config_errors_name_the_field() {
    let cases: [(&[&str], &str); 7] = [
        (&["simulate", "--K", "", "--p", "0.1"], "`K`"),
        (&["simulate", "--p", "0.1"], "`K`"),
        (&["simulate", "--K", "8"], "`p` and `C`"),
        (&["simulate", "--K", "8", "--p", "0.1", "--dmax", "25"], "`Dmax`"),
        (&["simulate", "--K", "8", "--p", "0.6"], "`p`"),
        (&["simulate", "--K", "8", "--p", "0.1", "--rule", "greedy"], "`rule`"),
        (&["simulate", "--K", "8", "--p", "0.1", "--output", "/nonexistent/dir/x.csv"], "`outputPath`"),
    ];
    for (args, field) in cases {
        let out = sparsepm(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(stderr(&out).contains(field), "{args:?}: {}", stderr(&out));
    }
    let unknown = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(unknown.path(), "K = 8\nseeds = 3\n").unwrap();
    let out = sparsepm(&["bounds", "--p", "0.1", "--config", unknown.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("seeds"));
}

#[test]
fn verify_quick_mode() {
    let t = Instant::now();
    let out = sparsepm(&["verify", "--trials", "100"]);
    let elapsed = t.elapsed();
    let table = stdout(&out);
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    assert_eq!(table.lines().count(), 11);
    assert_eq!(table.lines().filter(|l| l.ends_with("pass")).count(), 10);
}

#[test]
fn verify_fails_on_injected_fault() {
    let out = sparsepm(&["verify", "--trials", "100", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.lines().any(|l| l.starts_with("planner-safety") && l.ends_with("FAIL")));
}
