//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::process::Command;
use std::time::{Duration, Instant};

use astro_float::{BigFloat, Consts, RoundingMode};
use sparsepm::bounds::tau_b;
use sparsepm::codec::{CodecConfig, FeedbackMode, Rule};
use sparsepm::model::{make_channel, solve_p_for_capacity, ChannelParams};
use sparsepm::montecarlo::{aggregate, run_trials, SummaryStats, TrialRecord};
use sparsepm::verify::{
    check_block_identity, check_planner_safety, check_singleton, check_wmad_implies_c, grid_check_f, BREAKPOINTS,
};

const SEED: u64 = 1;
const EPS: f64 = 1e-3;
const RATE_TRIALS: u64 = 10_000;
const K96_TRIALS: u64 = 500;

struct Report {
    failures: u32,
}

impl Report {
    fn line(&mut self, n: u32, name: &str, pass: bool, detail: String, elapsed: Duration) {
        if !pass {
            self.failures += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {name:<22} {verdict}  {detail} [{:.1} s]", elapsed.as_secs_f64());
    }
}

fn big_constants(cc: &mut Consts, p: f64) -> [f64; 3] {
    const P: usize = 256;
    const RM: RoundingMode = RoundingMode::ToEven;
    let pb = BigFloat::from_f64(p, P);
    let one = BigFloat::from_u64(1, P);
    let q = one.sub(&pb, P, RM);
    let hp = pb.mul(&pb.log2(P, RM, cc), P, RM);
    let hq = q.mul(&q.log2(P, RM, cc), P, RM);
    let c = one.add(&hp, P, RM).add(&hq, P, RM);
    let c2 = q.div(&pb, P, RM).log2(P, RM, cc);
    let c1 = q.sub(&pb, P, RM).mul(&c2, P, RM);
    [c, c1, c2].map(|x| x.to_string().parse::<f64>().unwrap())
}

fn criterion_1(r: &mut Report) {
    let t = Instant::now();
    let mut cc = Consts::new().unwrap();
    let (mut worst, mut worst_c1) = (0.0_f64, 0.0_f64);
    for i in 1..=45 {
        let p = i as f64 / 100.0;
        let ch = make_channel(p).unwrap();
        let oracle = big_constants(&mut cc, p);
        for (got, want) in [ch.capacity(), ch.c1(), ch.c2()].iter().zip(oracle) {
            worst = worst.max((got - want).abs());
        }
        worst_c1 = worst_c1.max((ch.c1() - (ch.q() - ch.p()) * ch.c2()).abs());
    }
    let elapsed = t.elapsed();
    let pass = worst <= 1e-12 && worst_c1 <= 1e-15 && elapsed < Duration::from_secs(1);
    r.line(1, "constants", pass, format!("max |err| {worst:.2e} (<= 1e-12), C1 identity {worst_c1:.2e} (<= 1e-15)"), elapsed);
}

fn criterion_2(r: &mut Report) {
    let t = Instant::now();
    let gap = check_block_identity(10_000, 6, SEED);
    let elapsed = t.elapsed();
    let pass = gap <= 1e-10 && elapsed < Duration::from_secs(60);
    r.line(2, "block-update-identity", pass, format!("10^4 pairs, max relative gap {gap:.2e} (<= 1e-10)"), elapsed);
}

fn criterion_3(r: &mut Report) {
    let t = Instant::now();
    let slack = check_wmad_implies_c(100_000, SEED);
    let (drift, step) = check_singleton(100_000, SEED);
    let elapsed = t.elapsed();
    let pass = slack >= -1e-9 && drift <= 1e-12 && step <= 1e-12 && elapsed < Duration::from_secs(300);
    r.line(
        3,
        "drift",
        pass,
        format!("10^5 WMAD instances, min drift - C {slack:.2e} (>= -1e-9); singleton |drift - C1| {drift:.2e}, ||dU| - C2| {step:.2e} (<= 1e-12)"),
        elapsed,
    );
}

fn criterion_4(r: &mut Report) {
    let t = Instant::now();
    let g = grid_check_f();
    let elapsed = t.elapsed();
    let pass = g.worst >= -1e-12 && elapsed < Duration::from_secs(60);
    r.line(
        4,
        "jensen-grid",
        pass,
        format!(
            "{} points incl. {} breakpoints, min f {:.3e} at rho {:.3e} (>= -1e-12)",
            g.points,
            BREAKPOINTS.len(),
            g.worst,
            g.rho
        ),
        elapsed,
    );
}

fn criterion_5(r: &mut Report) {
    let t = Instant::now();
    let report = check_planner_safety(1_000, 6, SEED, false);
    let elapsed = t.elapsed();
    let pass = report.worst <= 0.0 && elapsed < Duration::from_secs(300);
    r.line(
        5,
        "planner-safety",
        pass,
        format!("10^3 states, max realized slack {:.3e} (<= 0), plans by depth {:?}", report.worst, &report.depths[1..]),
        elapsed,
    );
}

struct Point {
    k: u32,
    c: f64,
    channel: ChannelParams,
    records: Vec<TrialRecord>,
    stats: SummaryStats,
    elapsed: Duration,
}

fn simulate(k: u32, c: f64, trials: u64, rule: Rule, feedback: FeedbackMode) -> Point {
    let channel = make_channel(solve_p_for_capacity(c).unwrap()).unwrap();
    let cfg = CodecConfig { epsilon: EPS, rule, feedback, ..CodecConfig::new(k, channel) };
    let t = Instant::now();
    let records = run_trials(&cfg, trials, SEED).expect("simulation failed");
    let elapsed = t.elapsed();
    let stats = aggregate(k, &records);
    Point { k, c, channel, records, stats, elapsed }
}

fn standard_error(records: &[TrialRecord]) -> f64 {
    let n = records.len() as f64;
    let mean = records.iter().map(|r| r.tau as f64).sum::<f64>() / n;
    let var = records.iter().map(|r| (r.tau as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

fn criterion_6(r: &mut Report, sparse: &[Point]) {
    let mut pass = true;
    let mut elapsed = Duration::ZERO;
    for pt in sparse {
        let bound = tau_b(pt.k, &pt.channel, EPS);
        let se = standard_error(&pt.records);
        let ok = pt.stats.mean_tau <= bound + 2.0 * se;
        pass &= ok;
        elapsed += pt.elapsed;
        println!(
            "    K={:<3} C={:.2}  E[tau]={:.3} +- {:.3} (SE)  tau_B={:.3}  rate={:.4}  K/tau_B={:.4}  {}",
            pt.k,
            pt.c,
            pt.stats.mean_tau,
            se,
            bound,
            pt.stats.rate,
            pt.k as f64 / bound,
            if ok { "ok" } else { "above bound" }
        );
    }
    r.line(6, "rate-vs-bound", pass, format!("{} points x 10^4 trials, E[tau] <= tau_B + 2 SE", sparse.len()), elapsed);
}

fn criterion_7(r: &mut Report, points: &[&Point]) {
    let mut pass = true;
    let mut worst = f64::NEG_INFINITY;
    for pt in points {
        let n = pt.records.len() as f64;
        let limit = EPS + 3.0 * (EPS * (1.0 - EPS) / n).sqrt();
        pass &= pt.stats.fer <= limit;
        worst = worst.max(pt.stats.fer - limit);
    }
    r.line(7, "frame-error-rate", pass, format!("{} points, max FER - limit {worst:.2e} (<= 0)", points.len()), Duration::ZERO);
}

fn criterion_8(r: &mut Report, trend: &[&Point]) {
    let d: Vec<f64> = trend.iter().map(|p| p.stats.mean_d_comm).collect();
    let monotone = d.windows(2).all(|w| w[1] >= w[0]);
    let last = *d.last().unwrap();
    let listing: Vec<String> = trend.iter().map(|p| format!("K={}: {:.3}", p.k, p.stats.mean_d_comm)).collect();
    let elapsed = trend.last().unwrap().elapsed;
    r.line(
        8,
        "sparsity-trend",
        monotone && last >= 4.0,
        format!("C=0.50 meanD_comm {} (nondecreasing, >= 4.0 at K=96)", listing.join(", ")),
        elapsed,
    );
}

fn criterion_9(r: &mut Report, sparse: &[Point], dense: &[Point]) {
    let mut pass = true;
    let mut elapsed = Duration::ZERO;
    for (s, d) in sparse.iter().zip(dense) {
        let ok = s.stats.rate >= d.stats.rate * 0.98;
        pass &= ok;
        elapsed += d.elapsed;
        println!(
            "    K={:<3} C={:.2}  sparse rate={:.4}  dense-SEAD rate={:.4}  ratio={:.4}  {}",
            s.k,
            s.c,
            s.stats.rate,
            d.stats.rate,
            s.stats.rate / d.stats.rate,
            if ok { "ok" } else { "below" }
        );
    }
    r.line(9, "sparse-vs-dense", pass, format!("{} common points, sparse >= 0.98 x dense", sparse.len()), elapsed);
}

/// CSV text without the timing column.
fn strip_timing(csv: &str) -> String {
    let header: Vec<&str> = csv.lines().next().unwrap_or("").split(',').collect();
    let col = header.iter().position(|&h| h == "ns_per_1000_symbols").expect("timing column");
    csv.lines()
        .map(|l| l.split(',').enumerate().filter(|&(i, _)| i != col).map(|(_, f)| f).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
}

fn criterion_10(r: &mut Report) {
    let t = Instant::now();
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_sparsepm"))
            .args(["simulate", "--K", "8,16,24", "--capacity", "0.5,0.75", "--trials", "300", "--seed", "77"])
            .args(["--threads", threads])
            .output()
            .expect("run sparsepm");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let runs: Vec<String> = ["1", "2", "4", "7"].iter().map(|n| strip_timing(&run(n))).collect();
    let rows = runs[0].lines().count() - 1;
    let pass = rows == 6 && runs.iter().all(|x| x == &runs[0]);
    r.line(10, "determinism", pass, format!("simulate with 1, 2, 4, 7 threads: {rows} rows, identical without timing"), t.elapsed());
}

fn main() {
    let mut report = Report { failures: 0 };
    criterion_1(&mut report);
    criterion_2(&mut report);
    criterion_3(&mut report);
    criterion_4(&mut report);
    criterion_5(&mut report);

    let grid: Vec<(u32, f64)> = [16, 32, 64].iter().flat_map(|&k| [0.5, 0.75].map(|c| (k, c))).collect();
    let sparse: Vec<Point> =
        grid.iter().map(|&(k, c)| simulate(k, c, RATE_TRIALS, Rule::WmadLookahead, FeedbackMode::Sparse)).collect();
    criterion_6(&mut report, &sparse);

    let k96 = simulate(96, 0.5, K96_TRIALS, Rule::WmadLookahead, FeedbackMode::Sparse);
    let dense: Vec<Point> = grid.iter().map(|&(k, c)| simulate(k, c, RATE_TRIALS, Rule::Sead, FeedbackMode::Dense)).collect();
    let all: Vec<&Point> = sparse.iter().chain(dense.iter()).chain(std::iter::once(&k96)).collect();
    criterion_7(&mut report, &all);

    let trend: Vec<&Point> = sparse.iter().filter(|p| p.c == 0.5).chain(std::iter::once(&k96)).collect();
    criterion_8(&mut report, &trend);
    criterion_9(&mut report, &sparse, &dense);
    criterion_10(&mut report);

    println!("acceptance: {} of 10 criteria passed", 10 - report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
