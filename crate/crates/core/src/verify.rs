//! Numerical checks of the inequalities behind the partition rules and the block update.
//!
//! All random checks draw instance `i` from a ChaCha stream `(seed, i)`, so results do not
//! depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::lookahead::{enumerate_realized_delta, plan_block, LookaheadError, PartitionPlan};
use crate::model::{make_channel, ChannelParams};
use crate::partition::{wmad_holds, BinaryPartition, PartitionError};
use crate::posterior::{word_to_bits, GroupedPosterior, Labeling, PosteriorError, Slice, Word};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("member value {0} too close to one for a finite log-likelihood ratio")]
    Degenerate(f64),
    #[error("argument outside the domain: {0}")]
    Domain(&'static str),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Lookahead(#[from] LookaheadError),
}

/// Explicit posterior over a handful of messages with a binary partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub values: Vec<f64>,
    pub in_s0: Vec<bool>,
    pub channel: ChannelParams,
}

impl Instance {
    pub fn delta(&self) -> f64 {
        self.values.iter().zip(&self.in_s0).map(|(v, &s)| if s { *v } else { -*v }).sum()
    }

    pub fn median(&self) -> f64 {
        let mut sorted = self.values.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut cum = 0.0;
        for &v in &sorted {
            cum += v;
            if cum >= 0.5 {
                return v;
            }
        }
        sorted[sorted.len() - 1]
    }

    pub fn satisfies_wmad(&self) -> bool {
        wmad_holds(self.delta(), self.median())
    }
}

/// Exact one-step drift of `U_θ` for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub drift: f64,
    /// `drift - C`.
    pub slack: f64,
    pub delta: f64,
    pub median: f64,
}

/// Change of `log2(ρ/(1-ρ))` for member `i` after output `y`, in the ratio form
/// `log2(L_i Σ_{j≠i} ρ_j / Σ_{j≠i} ρ_j L_j)`, which avoids cancellation near `ρ_i = 1`.
fn u_step(inst: &Instance, i: usize, y: u8) -> f64 {
    let (mut rest, mut rest_weighted) = (0.0, 0.0);
    for j in (0..inst.values.len()).filter(|&j| j != i) {
        rest += inst.values[j];
        rest_weighted += inst.values[j] * likelihood(inst, j, y);
    }
    (likelihood(inst, i, y) * rest / rest_weighted).log2()
}

fn likelihood(inst: &Instance, j: usize, y: u8) -> f64 {
    let x = if inst.in_s0[j] { 0 } else { 1 };
    if y == x {
        inst.channel.q()
    } else {
        inst.channel.p()
    }
}

fn check_values(inst: &Instance) -> Result<(), VerifyError> {
    for &v in &inst.values {
        if !(v > 0.0) {
            return Err(VerifyError::Domain("member values must be positive"));
        }
        if v >= 1.0 - 1e-15 {
            return Err(VerifyError::Degenerate(v));
        }
    }
    Ok(())
}

/// `Σ_i ρ_i Σ_y P(y | i) (U_i(t+1) - U_i(t))`.
pub fn exact_drift(inst: &Instance) -> Result<DriftReport, VerifyError> {
    check_values(inst)?;
    let delta = inst.delta();
    let mut drift = 0.0;
    for i in 0..inst.values.len() {
        for y in 0..2u8 {
            drift += inst.values[i] * likelihood(inst, i, y) * u_step(inst, i, y);
        }
    }
    Ok(DriftReport { drift, slack: drift - inst.channel.capacity(), delta, median: inst.median() })
}

/// `E[U_i(t+1) - U_i(t) | θ = j]`.
pub fn conditional_drift(inst: &Instance, i: usize, j: usize) -> Result<f64, VerifyError> {
    check_values(inst)?;
    Ok((0..2u8).map(|y| likelihood(inst, j, y) * u_step(inst, i, y)).sum())
}

/// `U_i(t+1) - U_i(t)` for outputs 0 and 1.
pub fn u_increments(inst: &Instance, i: usize) -> Result<[f64; 2], VerifyError> {
    check_values(inst)?;
    Ok([u_step(inst, i, 0), u_step(inst, i, 1)])
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_masses(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-300).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Random WMAD-compliant instance with `2 <= M <= 64`.
///
/// Half of the partitions are uniform random subsets. The other half start from the
/// largest-first split and are pushed toward the WMAD boundary by single-member moves.
pub fn random_wmad_instance(rng: &mut ChaCha8Rng) -> Instance {
    loop {
        let m = rng.random_range(2..=64usize);
        let values = random_masses(rng, m);
        if values.iter().any(|&v| v >= 1.0 - 1e-12) {
            continue;
        }
        let channel = make_channel(rng.random_range(0.001..0.499)).expect("p in range");
        if rng.random_bool(0.5) {
            for _ in 0..200 {
                let in_s0: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
                let inst = Instance { values: values.clone(), in_s0, channel };
                if inst.satisfies_wmad() {
                    return inst;
                }
            }
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
        let mut in_s0 = vec![false; m];
        let mut mass = 0.0;
        for &i in &order {
            if mass >= 0.5 {
                break;
            }
            in_s0[i] = true;
            mass += values[i];
        }
        let mut inst = Instance { values, in_s0, channel };
        if !inst.satisfies_wmad() {
            // Dropping the last member gives the SEAD split, which always passes.
            let last = *order.iter().rev().find(|&&i| inst.in_s0[i]).expect("nonempty");
            inst.in_s0[last] = false;
        }
        if !inst.satisfies_wmad() {
            continue;
        }
        for _ in 0..2 * m {
            let i = rng.random_range(0..m);
            let before = inst.delta().abs();
            inst.in_s0[i] = !inst.in_s0[i];
            if !(inst.satisfies_wmad() && inst.delta().abs() > before) {
                inst.in_s0[i] = !inst.in_s0[i];
            }
        }
        return inst;
    }
}

/// Random instance whose leader holds at least one half, split off on its own.
pub fn random_singleton_instance(rng: &mut ChaCha8Rng) -> Instance {
    let m = rng.random_range(2..=64usize);
    let lead = rng.random_range(0.5..0.999);
    let rest = random_masses(rng, m - 1);
    let mut values = vec![lead];
    values.extend(rest.into_iter().map(|v| (1.0 - lead) * v.max(1e-12)));
    let total: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= total);
    let mut in_s0 = vec![false; m];
    in_s0[0] = true;
    let channel = make_channel(rng.random_range(0.001..0.499)).expect("p in range");
    Instance { values, in_s0, channel }
}

/// Minimum of `drift - C` over random WMAD instances.
pub fn check_wmad_implies_c(trials: u64, seed: u64) -> f64 {
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let inst = random_wmad_instance(&mut stream(seed, i));
            exact_drift(&inst).map(|r| r.slack).unwrap_or(f64::NEG_INFINITY)
        })
        .reduce(|| f64::INFINITY, f64::min)
}

/// Worst `|drift - C1|` and worst `||ΔU| - C2|` of the leader under singleton partitions.
pub fn check_singleton(trials: u64, seed: u64) -> (f64, f64) {
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let inst = random_singleton_instance(&mut stream(seed, i));
            let c1 = inst.channel.c1();
            let c2 = inst.channel.c2();
            let drift = conditional_drift(&inst, 0, 0).map(|d| (d - c1).abs()).unwrap_or(f64::INFINITY);
            let step = u_increments(&inst, 0)
                .map(|u| u.iter().map(|x| (x.abs() - c2).abs()).fold(0.0, f64::max))
                .unwrap_or(f64::INFINITY);
            (drift, step)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)))
}

/// Minimum over random WMAD instances of every member's drift given that it was sent.
pub fn check_constraint_11(trials: u64, seed: u64) -> f64 {
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let inst = random_wmad_instance(&mut stream(seed, i));
            (0..inst.values.len())
                .map(|m| conditional_drift(&inst, m, m).unwrap_or(f64::NEG_INFINITY))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min)
}

/// Maximum of `U_i(t+1) - U_i(t) - C2` over random instances with arbitrary partitions.
pub fn check_increment_cap(trials: u64, seed: u64) -> f64 {
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let mut inst = random_wmad_instance(&mut rng);
            for s in inst.in_s0.iter_mut() {
                *s = rng.random_bool(0.5);
            }
            let c2 = inst.channel.c2();
            (0..inst.values.len())
                .flat_map(|m| u_increments(&inst, m).unwrap_or([f64::INFINITY; 2]))
                .map(|u| u - c2)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

/// Lower bound on the Jensen argument of the drift expansion, scaled by `-2`.
///
/// `r` is the fraction `R` of the upper mass `(1+δ)/2` lying in `S0`, `small_delta` is
/// `δ = 2 P(ρ >= ρ_m) - 1` and `rho` the median value.
pub fn f_jensen(delta: f64, r: f64, small_delta: f64, rho: f64) -> Result<f64, VerifyError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(VerifyError::Domain("rho must lie in (0, 1)"));
    }
    let a = delta * (1.0 - 2.0 * r) * (1.0 + small_delta);
    Ok((a + rho * (1.0 + small_delta)) / (1.0 - rho) - delta * (2.0 * delta + (1.0 - 2.0 * r) * (1.0 + small_delta)))
}

/// The same quantity assembled from the four weighted per-set bounds, as `-2 Σ w x`.
pub fn jensen_weighted(delta: f64, r: f64, small_delta: f64, rho: f64) -> f64 {
    let upper = (1.0 + small_delta) / 2.0;
    // Mass at or above the median in S0 and S1, then the rest of each set.
    let w = [
        r * upper,
        (1.0 + delta) / 2.0 - r * upper,
        (1.0 - r) * upper,
        (1.0 - delta) / 2.0 - (1.0 - r) * upper,
    ];
    let x = [(delta - rho) / (1.0 - rho), delta, (-delta - rho) / (1.0 - rho), -delta];
    -2.0 * w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
}

/// Median values at which the piecewise argument changes cells.
pub const BREAKPOINTS: [f64; 7] = [0.1, 49.0 / 250.0, 5.0 / 18.0, 0.4, 0.625, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridReport {
    pub worst: f64,
    pub alpha: f64,
    pub small_delta: f64,
    pub rho: f64,
    pub points: u64,
}

/// Minimum of `f` over `α² <= 0.4 ρ` with the worst-case sign `Δ(1 - 2R) = -α`.
///
/// `ρ` runs over a `1e-3` grid of `[1e-6, 1)` plus the breakpoints; `ρ = 1` itself is
/// outside the domain and is represented by `1 - 1e-9`.
pub fn grid_check_f() -> GridReport {
    let mut rhos: Vec<f64> = vec![1e-6];
    rhos.extend((1..1000).map(|i| i as f64 * 1e-3));
    rhos.extend(BREAKPOINTS.iter().map(|&b| if b >= 1.0 { 1.0 - 1e-9 } else { b }));
    let mut report = GridReport { worst: f64::INFINITY, alpha: 0.0, small_delta: 0.0, rho: 0.0, points: 0 };
    for &rho in &rhos {
        let amax = (0.4 * rho).sqrt();
        for ai in 0..=200 {
            let alpha = if ai == 200 { amax } else { amax * ai as f64 / 200.0 };
            for di in 0..=10 {
                let small_delta = rho * di as f64 / 10.0;
                for (delta, r) in [(alpha, 1.0), (-alpha, 0.0)] {
                    let f = f_jensen(delta, r, small_delta, rho).expect("rho < 1");
                    report.points += 1;
                    if f < report.worst {
                        report = GridReport { worst: f, alpha, small_delta, rho, points: report.points };
                    }
                }
            }
        }
    }
    report
}

/// Random `(Δ, R, δ, ρ)` with `Δ² <= 0.4 ρ`: worst `f` and worst disagreement between
/// [`f_jensen`] and [`jensen_weighted`].
pub fn spot_check_f(samples: u64, seed: u64) -> (f64, f64) {
    (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let rho: f64 = rng.random_range(1e-6..0.999);
            let amax = (0.4 * rho).sqrt();
            let delta = rng.random_range(-amax..=amax);
            let r = rng.random_range(0.0..=1.0);
            let small_delta = rng.random_range(0.0..=rho);
            let f = f_jensen(delta, r, small_delta, rho).expect("rho < 1");
            (f, (f - jensen_weighted(delta, r, small_delta, rho)).abs())
        })
        .reduce(|| (f64::INFINITY, 0.0), |a, b| (a.0.min(b.0), a.1.max(b.1)))
}

/// A state the protocol can actually reach in the communication phase, with its channel.
///
/// Runs the systematic phase and a random number of planned blocks with random block
/// limits against a simulated channel. One sample in ten starts from the uniform prior.
pub fn sample_state(rng: &mut ChaCha8Rng) -> (GroupedPosterior, ChannelParams) {
    loop {
        let channel = make_channel(rng.random_range(0.02..0.3)).expect("p in range");
        let uniform = rng.random_bool(0.1);
        let k = if uniform { rng.random_range(2..=12u32) } else { rng.random_range(3..=40u32) };
        let theta: Word = rng.random::<u128>() & ((1u128 << k) - 1);
        let mut state = if uniform {
            GroupedPosterior::uniform(k, &channel).expect("k in range")
        } else {
            let flips: Word = (0..k).fold(0, |acc, _| (acc << 1) | rng.random_bool(channel.p()) as u128);
            GroupedPosterior::systematic_init(k, &channel, theta ^ flips).expect("k in range")
        };
        if state.is_confirming() {
            continue;
        }
        let mut loc = state.locate(theta).expect("root state");
        for _ in 0..rng.random_range(0..25) {
            let dmax = rng.random_range(1..=6);
            let plan = plan_block(&state, &channel, dmax).expect("planner is total");
            let group = loc.group(&state).expect("located");
            let label = plan.label_of(group, loc.position).expect("labelled");
            let y: Vec<u8> =
                word_to_bits(label as Word, plan.depth()).into_iter().map(|b| b ^ rng.random_bool(channel.p()) as u8).collect();
            let next = state.update_block(&plan, &y).expect("valid block");
            if next.is_confirming() {
                break;
            }
            loc.advance(&next).expect("tracked");
            state = next;
        }
        return (state, channel);
    }
}

/// Labels of bit `bit` (0 = most significant of `depth`) of a plan labeling.
fn bit_labeling(labeling: &Labeling, depth: u32, bit: u32) -> Labeling {
    Labeling::new(
        labeling.slices().iter().map(|s| Slice { label: (s.label >> (depth - 1 - bit)) & 1, ..*s }).collect(),
    )
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares one block update against its sequential composition and against the direct
/// per-bin formula `v q^(j-z) p^z / Σ_k q^(j-z_k) p^(z_k) P_k`. Returns the worst relative
/// deviation, infinite when the group structures differ.
pub fn block_identity_gap(
    state: &GroupedPosterior,
    plan: &PartitionPlan,
    y: &[u8],
    channel: &ChannelParams,
) -> Result<f64, VerifyError> {
    let depth = plan.depth();
    let j = y.len() as u32;
    let block = state.update_block(plan, y)?;

    let mut chain = state.clone();
    let mut labeling = plan.labeling().clone();
    for (i, &bit) in y.iter().enumerate() {
        let part = BinaryPartition::from_labeling(chain.groups(), bit_labeling(&labeling, depth, i as u32))?;
        let next = chain.update_sequential(&part, bit)?;
        labeling = labeling.transport(&chain, &next)?;
        chain = next;
    }
    if block.groups().len() != chain.groups().len() {
        return Ok(f64::INFINITY);
    }
    let mut worst = 0.0_f64;
    for (a, b) in block.groups().iter().zip(chain.groups()) {
        if a.distance != b.distance || a.count != b.count {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(relative_gap(a.value, b.value));
    }

    let (p, q) = (channel.p(), channel.q());
    let received = y.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
    let weight = |label: u32| {
        let z = ((label >> (depth - j)) ^ received).count_ones() as i32;
        q.powi(j as i32 - z) * p.powi(z)
    };
    let norm: f64 = plan.bin_mass().iter().enumerate().map(|(k, &m)| weight(k as u32) * m).sum();
    for s in plan.labeling().slices() {
        let g = state.groups()[s.group];
        let z = ((s.label >> (depth - j)) ^ received).count_ones();
        let expected = g.value * weight(s.label) / norm;
        let Some(idx) = block.group_index(g.distance + z) else {
            return Ok(f64::INFINITY);
        };
        worst = worst.max(relative_gap(block.groups()[idx].value, expected));
    }
    Ok(worst)
}

/// Worst [`block_identity_gap`] over random reachable states, plans with depth at most
/// `dmax` and random received prefixes.
pub fn check_block_identity(trials: u64, dmax: u32, seed: u64) -> f64 {
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let (state, channel) = sample_state(&mut rng);
            let plan = plan_block(&state, &channel, rng.random_range(1..=dmax)).expect("planner is total");
            let j = rng.random_range(1..=plan.depth());
            let y: Vec<u8> = (0..j).map(|_| rng.random_bool(0.5) as u8).collect();
            block_identity_gap(&state, &plan, &y, &channel).unwrap_or(f64::INFINITY)
        })
        .reduce(|| 0.0, f64::max)
}

/// Outcome of the planner safety check.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyReport {
    pub worst: f64,
    /// Number of plans of each depth, indexed by depth.
    pub depths: Vec<u64>,
}

/// Worst realized `Δ² - 0.4 ρ_m` over plans for random reachable states.
///
/// With `inject_fault`, plans of depth 2 get all members of bin `00` moved to bin `10`,
/// which must be caught.
pub fn check_planner_safety(trials: u64, dmax: u32, seed: u64, inject_fault: bool) -> SafetyReport {
    let results: Vec<(f64, u32)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i);
            let (state, channel) = sample_state(&mut rng);
            let limit = if inject_fault { 2 } else { dmax };
            let mut plan = plan_block(&state, &channel, limit).expect("planner is total");
            if inject_fault && plan.depth() == 2 {
                plan = plan.with_reassigned(state.groups(), 0, 2, u128::MAX);
            }
            let slack = enumerate_realized_delta(&plan, &state, &channel).unwrap_or(f64::INFINITY);
            (slack, plan.depth())
        })
        .collect();
    let mut depths = vec![0u64; dmax.max(2) as usize + 1];
    let mut worst = f64::NEG_INFINITY;
    for (slack, d) in results {
        worst = worst.max(slack);
        depths[d as usize] += 1;
    }
    SafetyReport { worst, depths }
}

/// One row of the verification table.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: u64,
    pub worst: f64,
    pub tolerance: f64,
    /// `true` when `worst` must stay at or above `tolerance`, `false` for at or below.
    pub lower: bool,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        if self.lower {
            self.worst >= self.tolerance
        } else {
            self.worst <= self.tolerance
        }
    }
}

/// Every check, each with `trials` random instances where applicable.
pub fn run_all(trials: u64, seed: u64, inject_fault: bool) -> Vec<CheckOutcome> {
    let grid = grid_check_f();
    let (spot_min, spot_gap) = spot_check_f(trials, seed);
    let (singleton_drift, singleton_step) = check_singleton(trials, seed);
    let structured = (trials / 10).max(1);
    vec![
        CheckOutcome { name: "wmad-drift-above-capacity", instances: trials, worst: check_wmad_implies_c(trials, seed), tolerance: -1e-9, lower: true },
        CheckOutcome { name: "singleton-drift-equals-c1", instances: trials, worst: singleton_drift, tolerance: 1e-12, lower: false },
        CheckOutcome { name: "singleton-step-equals-c2", instances: trials, worst: singleton_step, tolerance: 1e-12, lower: false },
        CheckOutcome { name: "own-message-drift-positive", instances: trials, worst: check_constraint_11(trials, seed), tolerance: 0.0, lower: true },
        CheckOutcome { name: "step-at-most-c2", instances: trials, worst: check_increment_cap(trials, seed), tolerance: 1e-12, lower: false },
        CheckOutcome { name: "jensen-grid", instances: grid.points, worst: grid.worst, tolerance: -1e-12, lower: true },
        CheckOutcome { name: "jensen-spot", instances: trials, worst: spot_min, tolerance: -1e-12, lower: true },
        CheckOutcome { name: "jensen-reduction", instances: trials, worst: spot_gap, tolerance: 1e-12, lower: false },
        CheckOutcome { name: "block-update-identity", instances: structured, worst: check_block_identity(structured, 6, seed), tolerance: 1e-10, lower: false },
        CheckOutcome {
            name: "planner-safety",
            instances: structured,
            worst: check_planner_safety(structured, 6, seed, inject_fault).worst,
            tolerance: 0.0,
            lower: false,
        },
    ]
}
