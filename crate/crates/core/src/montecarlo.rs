//! Seeded trial runner and summary statistics.
//!
//! Trial `i` of a run with master seed `s` draws the message and then one channel flip per
//! transmitted symbol from the ChaCha8 stream `(s, i)`. Results are collected in trial
//! order, so a run is reproducible for any thread count.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::{CodecConfig, CodecError, Decoder, Encoder, PlanMemo};
use crate::posterior::Word;

/// Outcome of one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialRecord {
    pub tau: u64,
    /// Feedback packets.
    pub eta: u64,
    /// Symbols used in each block; the first entry is the systematic block.
    pub d_list: Vec<u32>,
    /// Whether each block started with every member below one half.
    pub comm_blocks: Vec<bool>,
    pub error: bool,
    /// Symbols received with every member below one half.
    pub comm_time: u64,
    pub conf_time: u64,
    /// Encoder, decoder and planner time, excluding noise generation.
    pub wall_ns: u64,
}

/// Aggregated metrics over a set of trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryStats {
    pub trials: u64,
    pub rate: f64,
    pub mean_tau: f64,
    pub mean_eta: f64,
    /// Symbols per block over all blocks.
    pub mean_d_all: f64,
    /// Symbols per block without the systematic block.
    pub mean_d_exsys: f64,
    /// Symbols per non-systematic block started in the communication phase.
    pub mean_d_comm: f64,
    pub fer: f64,
    /// 95% half-widths; `None` with fewer than two trials.
    pub tau_ci95: Option<f64>,
    pub eta_ci95: Option<f64>,
    pub rate_ci95: Option<f64>,
    pub fer_ci95: Option<f64>,
    pub ns_per_1000_symbols: f64,
}

const Z95: f64 = 1.96;

fn trial_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs trial `index` of the run seeded with `seed`.
pub fn run_trial(cfg: &CodecConfig, seed: u64, index: u64) -> Result<TrialRecord, CodecError> {
    session(cfg, &PlanMemo::default(), seed, index)
}

fn session(cfg: &CodecConfig, shared: &PlanMemo, seed: u64, index: u64) -> Result<TrialRecord, CodecError> {
    let mut rng = trial_rng(seed, index);
    let mask: Word = if cfg.k >= 128 { Word::MAX } else { (1 << cfg.k) - 1 };
    let theta = rng.random::<Word>() & mask;
    let p = cfg.channel.p();

    let mut wall = 0u128;
    let clock = Instant::now();
    let memo = shared.for_session();
    let mut enc = Encoder::new(*cfg, theta)?.with_plan_memo(memo.clone());
    let mut dec = Decoder::new(*cfg)?.with_plan_memo(memo);
    wall += clock.elapsed().as_nanos();

    let mut d_list = Vec::new();
    let mut comm_blocks = Vec::new();
    loop {
        let clock = Instant::now();
        let block = enc.next_block()?;
        wall += clock.elapsed().as_nanos();

        let y: Vec<u8> = block.bits.iter().map(|&b| b ^ rng.random_bool(p) as u8).collect();

        let clock = Instant::now();
        let packet = dec.absorb(block.start_time, &y)?;
        enc.absorb(&packet)?;
        wall += clock.elapsed().as_nanos();

        let info = *dec.blocks().last().ok_or(CodecError::Protocol("decoder recorded no block"))?;
        d_list.push(info.used);
        comm_blocks.push(info.communication);
        if packet.stop {
            break;
        }
    }
    let clock = Instant::now();
    let estimate = dec.estimate()?;
    wall += clock.elapsed().as_nanos();

    let tau = dec.time();
    let comm_time = dec.communication_symbols();
    Ok(TrialRecord {
        tau,
        eta: d_list.len() as u64,
        d_list,
        comm_blocks,
        error: estimate != theta,
        comm_time,
        conf_time: tau - comm_time,
        wall_ns: wall.min(u64::MAX as u128) as u64,
    })
}

/// Trials `0..trials` in index order, run on the current rayon pool.
pub fn run_trials(cfg: &CodecConfig, trials: u64, seed: u64) -> Result<Vec<TrialRecord>, CodecError> {
    cfg.validate()?;
    let shared = PlanMemo::default();
    (0..trials).into_par_iter().map(|i| session(cfg, &shared, seed, i)).collect()
}

fn mean_and_half_width(xs: impl Iterator<Item = f64> + Clone) -> (f64, Option<f64>) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, None);
    }
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(Z95 * (var / n).sqrt()))
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// Summary of `records`, all produced with message length `k`. `records` must be nonempty.
pub fn aggregate(k: u32, records: &[TrialRecord]) -> SummaryStats {
    assert!(!records.is_empty(), "aggregate needs at least one record");
    let n = records.len() as u64;
    let (mean_tau, tau_ci95) = mean_and_half_width(records.iter().map(|r| r.tau as f64));
    let (mean_eta, eta_ci95) = mean_and_half_width(records.iter().map(|r| r.eta as f64));
    let (fer, fer_ci95) = mean_and_half_width(records.iter().map(|r| r.error as u8 as f64));

    let total_tau: u64 = records.iter().map(|r| r.tau).sum();
    let total_eta: u64 = records.iter().map(|r| r.eta).sum();
    let first: u64 = records.iter().map(|r| r.d_list.first().copied().unwrap_or(0) as u64).sum();
    let (mut comm_symbols, mut comm_count) = (0u64, 0u64);
    for r in records {
        for (&d, &c) in r.d_list.iter().zip(&r.comm_blocks).skip(1) {
            if c {
                comm_symbols += d as u64;
                comm_count += 1;
            }
        }
    }
    let wall: u128 = records.iter().map(|r| r.wall_ns as u128).sum();

    let rate = k as f64 / mean_tau;
    SummaryStats {
        trials: n,
        rate,
        mean_tau,
        mean_eta,
        mean_d_all: ratio(total_tau, total_eta),
        mean_d_exsys: ratio(total_tau - first, total_eta - n),
        mean_d_comm: ratio(comm_symbols, comm_count),
        fer,
        tau_ci95,
        eta_ci95,
        rate_ci95: tau_ci95.map(|h| k as f64 * h / (mean_tau * mean_tau)),
        fer_ci95,
        ns_per_1000_symbols: wall as f64 / total_tau as f64 * 1000.0,
    }
}
