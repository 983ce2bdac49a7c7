//! Look-ahead block planner.
//!
//! A plan splits the state into `2^D` bins of nearly equal mass and labels each bin with a
//! `D`-bit word. The encoder sends the label of its message's bin, most significant bit
//! first, and feedback is only needed after the whole block. Bit `j + 1` of the labels is
//! the single-symbol partition used at step `j`, so each step must satisfy WMAD at every
//! possible received prefix. The planner enforces this by keeping every bin mass within
//! `2^-D (1 ± Δ)` and by lower-bounding the median at each future step.
//!
//! Planning for a depth `D`:
//!
//! 1. Search a mass threshold `γ > 1/2` and, for each step `j`, the largest disagreement
//!    count `h_j` whose bins still hold half the mass. This gives a lower bound
//!    `2^j q^(j-h) p^h ρ_γ / (1 + Δ')` on the future median and with it the budget `Δ`.
//! 2. Allocate members largest first. Every bin first collects `γ 2^-D` from members of
//!    value at least `ρ_γ`, then the rest is levelled toward `2^-D`.
//! 3. Certify the allocation from the exact bin masses for every prefix.
//!
//! Depths are tried from `Dmax` down; depth 1 falls back to the SEAD partition.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::model::ChannelParams;
use crate::partition::{build_sead_partition, BinaryPartition, PartitionError};
use crate::posterior::{Group, GroupedPosterior, Labeling, PosteriorError, Slice};

pub const DEFAULT_DMAX: u32 = 12;
pub const MAX_DEPTH: u32 = 24;
/// Largest depth accepted by [`enumerate_realized_delta`].
pub const ENUMERATION_CAP: u32 = 8;
/// Relative margin kept by the certificate against rounding in later updates.
const CERTIFICATE_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LookaheadError {
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("depth {depth} exceeds the enumeration cap {cap}")]
    EnumerationCap { depth: u32, cap: u32 },
    #[error("depth {0} outside [1, {MAX_DEPTH}]")]
    BadDepth(u32),
}

/// Why a depth was rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum AllocFailure {
    /// A member is heavier than a bin may become.
    Overflow { bin: u32, fill: f64 },
    /// A bin never reached `γ 2^-D`.
    NoCrossing { bin: u32 },
    /// A bin reached `γ 2^-D` only with a member lighter than planned.
    LowCrossing { bin: u32, value: f64 },
    /// Final bin mass outside the budget.
    Imbalance { bin: u32, delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanKind {
    Lookahead,
    Sead,
    Sed,
    Singleton,
}

/// Outcome of the threshold search for one depth.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaSearch {
    pub gamma: f64,
    /// Value of the group holding the threshold.
    pub rho_gamma: f64,
    pub group: usize,
    /// `h_1 .. h_{D-1}`.
    pub h: Vec<u32>,
    /// Median lower bounds for steps `0 .. D-1`; entry 0 is the current median.
    pub rho_min: Vec<f64>,
    /// `min(sqrt(0.4 ρ_m), 1 - γ)`.
    pub delta_prime: f64,
    /// Largest imbalance the bounds allow at any step.
    pub delta_max: f64,
}

/// A planned block of `D` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    kind: PlanKind,
    depth: u32,
    labeling: Labeling,
    bin_mass: Vec<f64>,
    delta_k: Vec<f64>,
    gamma: Option<f64>,
    rho_gamma_planned: Option<f64>,
    crossing: Vec<f64>,
    h: Vec<u32>,
    rho_min_schedule: Vec<f64>,
    delta_max: f64,
    bin_delta_max: f64,
    certified_slack: f64,
}

impl PartitionPlan {
    /// One-symbol plan from a binary partition.
    pub fn single(kind: PlanKind, partition: &BinaryPartition, median: f64) -> Self {
        let bin_mass = vec![partition.p0(), partition.p1()];
        let delta_k = bin_mass.iter().map(|m| m - 0.5).collect();
        let delta = partition.delta();
        Self {
            kind,
            depth: 1,
            labeling: partition.labeling().clone(),
            bin_mass,
            delta_k,
            gamma: None,
            rho_gamma_planned: None,
            crossing: Vec::new(),
            h: Vec::new(),
            rho_min_schedule: vec![median],
            delta_max: delta.abs(),
            bin_delta_max: 0.5 * delta.abs(),
            certified_slack: delta * delta - 0.4 * median,
        }
    }

    pub fn kind(&self) -> PlanKind {
        self.kind
    }

    /// Block size `D`.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn bins(&self) -> usize {
        1 << self.depth
    }

    pub fn labeling(&self) -> &Labeling {
        &self.labeling
    }

    pub fn bin_mass(&self) -> &[f64] {
        &self.bin_mass
    }

    /// `P_k - 2^-D` per bin.
    pub fn delta_k(&self) -> &[f64] {
        &self.delta_k
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma
    }

    pub fn rho_gamma_planned(&self) -> Option<f64> {
        self.rho_gamma_planned
    }

    /// Value of the member with which each bin crossed `γ 2^-D`.
    pub fn crossing(&self) -> &[f64] {
        &self.crossing
    }

    pub fn h(&self) -> &[u32] {
        &self.h
    }

    pub fn rho_min_schedule(&self) -> &[f64] {
        &self.rho_min_schedule
    }

    /// Bin-level imbalance budget `Δ`; every bin lies within `2^-D (1 ± Δ)`.
    pub fn delta_max(&self) -> f64 {
        self.delta_max
    }

    /// `Δ 2^-D`.
    pub fn bin_delta_max(&self) -> f64 {
        self.bin_delta_max
    }

    /// Worst certificate slack; nonpositive for accepted plans.
    pub fn certified_slack(&self) -> f64 {
        self.certified_slack
    }

    /// Label of the member at `position` in group `group`.
    pub fn label_of(&self, group: usize, position: u128) -> Option<u32> {
        self.labeling.label_of(group, position)
    }

    /// Copy with the mass bookkeeping of bin `bin` replaced, for fault-injection tests.
    /// The labeling is also rebuilt so the bin really holds the extra members.
    pub fn with_reassigned(&self, groups: &[Group], from: u32, to: u32, members: u128) -> Self {
        let mut slices = Vec::with_capacity(self.labeling.slices().len() + 1);
        let mut left = members;
        for s in self.labeling.slices() {
            if left > 0 && s.label == from {
                let moved = left.min(s.len);
                left -= moved;
                slices.push(Slice { len: moved, label: to, ..*s });
                if moved < s.len {
                    slices.push(Slice { start: s.start + moved, len: s.len - moved, ..*s });
                }
            } else {
                slices.push(*s);
            }
        }
        let labeling = Labeling::new(slices);
        let bin_mass = labeling.masses(groups, self.bins());
        let unit = 1.0 / self.bins() as f64;
        let delta_k = bin_mass.iter().map(|m| m - unit).collect();
        Self { labeling, bin_mass, delta_k, ..self.clone() }
    }
}

/// `B_j(h) = Σ_{z<=h} binom(j, z) q^(j-z) p^z` for `j < depth`.
fn cumulative_binomials(depth: u32, channel: &ChannelParams) -> Vec<Vec<f64>> {
    let (p, q) = (channel.p(), channel.q());
    (0..depth)
        .map(|j| {
            let mut row = Vec::with_capacity(j as usize + 1);
            let mut acc = 0.0;
            let mut coeff = 1.0_f64;
            for z in 0..=j {
                if z > 0 {
                    coeff = coeff * (j - z + 1) as f64 / z as f64;
                }
                acc += coeff * q.powi((j - z) as i32) * p.powi(z as i32);
                row.push(if z == j { 1.0 } else { acc });
            }
            row
        })
        .collect()
}

struct SearchContext<'a> {
    depth: u32,
    median: f64,
    dw: f64,
    cum: Vec<Vec<f64>>,
    channel: &'a ChannelParams,
}

struct Evaluation {
    objective: f64,
    h: Vec<u32>,
    rho_min: Vec<f64>,
    delta_prime: f64,
}

impl SearchContext<'_> {
    fn delta_prime(&self, gamma: f64) -> f64 {
        self.dw.min(1.0 - gamma)
    }

    /// Objective at `gamma` for threshold value `v`, or `None` if some step has no `h`.
    fn evaluate(&self, gamma: f64, v: f64) -> Option<Evaluation> {
        let dp = self.delta_prime(gamma);
        if !(dp > 0.0) {
            return None;
        }
        let need = 0.5 * (1.0 + dp);
        let (p, q) = (self.channel.p(), self.channel.q());
        let mut h = Vec::with_capacity(self.depth as usize);
        let mut rho_min = Vec::with_capacity(self.depth as usize);
        rho_min.push(self.median);
        let mut worst = self.median;
        for j in 1..self.depth {
            let row = &self.cum[j as usize];
            let hj = row.iter().position(|&b| gamma * b >= need)? as u32;
            let r = (2f64).powi(j as i32) * q.powi((j - hj) as i32) * p.powi(hj as i32) * v / (1.0 + dp);
            worst = worst.min(r);
            h.push(hj);
            rho_min.push(r);
        }
        let objective = dp.min((0.4 * worst).sqrt());
        Some(Evaluation { objective, h, rho_min, delta_prime: dp })
    }

    /// Smallest `γ` at which `γ B >= (1 + Δ'(γ)) / 2`.
    fn breakpoint(&self, b: f64) -> f64 {
        let low = (1.0 + self.dw) / (2.0 * b);
        if low <= 1.0 - self.dw {
            low
        } else {
            (1.0 - self.dw).max(2.0 / (2.0 * b + 1.0))
        }
    }

    /// Sign of `Δ'(γ) - sqrt(0.4 min ρ_min(γ))`; infeasible points count as positive.
    fn excess(&self, gamma: f64, v: f64) -> f64 {
        match self.evaluate(gamma, v) {
            None => f64::INFINITY,
            Some(e) => {
                let worst = e.rho_min.iter().copied().fold(f64::INFINITY, f64::min);
                e.delta_prime - (0.4 * worst).sqrt()
            }
        }
    }
}

/// Threshold search for depth `depth`.
pub fn search_gamma_h(state: &GroupedPosterior, depth: u32, channel: &ChannelParams) -> Option<GammaSearch> {
    search_groups(state.groups(), depth, channel)
}

fn search_groups(groups: &[Group], depth: u32, channel: &ChannelParams) -> Option<GammaSearch> {
    if depth < 2 {
        return None;
    }
    let median = crate::posterior::median_of(groups);
    let ctx = SearchContext {
        depth,
        median: median.value,
        dw: (0.4 * median.value).sqrt(),
        cum: cumulative_binomials(depth, channel),
        channel,
    };
    let bins = (1u64 << depth) as f64;
    let mut breakpoints: Vec<f64> = ctx.cum.iter().skip(1).flatten().map(|&b| ctx.breakpoint(b)).collect();
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup();

    let mut before: f64 = groups[..median.group].iter().map(Group::mass).sum();
    let mut best: Option<GammaSearch> = None;
    for (gi, g) in groups.iter().enumerate().skip(median.group) {
        let v = g.value;
        let through = before + g.mass();
        let lo = before.max(0.5);
        before = through;
        if v <= 0.0 {
            break;
        }
        // Room for each bin to overshoot by one member.
        let hi = (through - bins * v).min(1.0);
        if !(hi > lo) {
            continue;
        }
        let mut points: Vec<f64> = breakpoints.iter().copied().filter(|&b| b > lo && b <= hi).collect();
        points.push(hi);
        let (mut a, mut b) = (lo, hi);
        if ctx.excess(hi, v) < 0.0 {
            for _ in 0..60 {
                let mid = 0.5 * (a + b);
                if ctx.excess(mid, v) >= 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            if a > lo {
                points.push(a);
            }
            points.push(b);
        }
        let mut group_best: Option<(f64, Evaluation)> = None;
        for &gamma in &points {
            if let Some(e) = ctx.evaluate(gamma, v) {
                if group_best.as_ref().is_none_or(|(_, be)| e.objective > be.objective) {
                    group_best = Some((gamma, e));
                }
            }
        }
        let Some((gamma, e)) = group_best else { continue };
        if let Some(cur) = &best {
            if e.objective < cur.delta_max {
                break;
            }
            if e.objective == cur.delta_max {
                continue;
            }
        }
        if e.objective > 0.0 {
            best = Some(GammaSearch {
                gamma,
                rho_gamma: v,
                group: gi,
                h: e.h,
                rho_min: e.rho_min,
                delta_prime: e.delta_prime,
                delta_max: e.objective,
            });
        }
    }
    best
}

#[derive(Clone, Copy, PartialEq)]
struct Fill(f64, u32);

impl Eq for Fill {}

impl PartialOrd for Fill {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Fill {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// `floor(x)` for `x >= 0`, avoiding the slow generic rounding paths.
fn floor_f(x: f64) -> f64 {
    if x < 4.0e15 {
        (x as i64) as f64
    } else {
        x
    }
}

fn floor_count(x: f64) -> u128 {
    if x < 4.0e15 {
        x as i64 as u128
    } else {
        x as u128
    }
}

/// Spreads `c` members of value `v` over `bins`, lowest fill first, at most `caps[i]` to
/// `bins[i]`. Requires `c <= Σ caps`.
fn level_fill(fill: &[f64], bins: &[u32], caps: &[u128], c: u128, v: f64) -> Vec<u128> {
    let n = bins.len();
    let mut give = vec![0u128; n];
    if c == 0 || n == 0 {
        return give;
    }
    let mut rest = c;
    if c > 4 * n as u128 {
        // Water level found in floating point, then counted exactly.
        let cap_f: Vec<f64> = caps.iter().map(|&x| x as f64).collect();
        let fills: Vec<f64> = bins.iter().map(|&b| fill[b as usize]).collect();
        let count_f = |level: f64| -> f64 {
            let mut total = 0.0;
            for i in 0..n {
                if level >= fills[i] {
                    total += floor_f((level - fills[i]) / v).min(cap_f[i]);
                }
            }
            total
        };
        let target = c as f64;
        let min_fill = fills.iter().copied().fold(f64::INFINITY, f64::min);
        let max_fill = fills.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut lo, mut hi) = (min_fill - v, max_fill + (target + 1.0) * v);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let at = count_f(mid);
            if at <= target {
                lo = mid;
                if target - at <= n as f64 {
                    break;
                }
            } else {
                hi = mid;
            }
        }
        loop {
            let mut total = 0u128;
            for i in 0..n {
                give[i] = if lo < fills[i] { 0 } else { floor_count((lo - fills[i]) / v).min(caps[i]) };
                total = total.saturating_add(give[i]);
            }
            if total <= c {
                rest -= total;
                break;
            }
            lo -= v.max(lo.abs() * 1e-12);
        }
        while rest > 4 * n as u128 {
            let open = (0..n).filter(|&i| give[i] < caps[i]).count() as u128;
            let share = rest / open.max(1);
            if share == 0 {
                break;
            }
            for i in 0..n {
                let add = share.min(caps[i] - give[i]).min(rest);
                give[i] += add;
                rest -= add;
            }
        }
    }
    if rest == 0 {
        return give;
    }
    // Only the `rest` lowest open bins can receive anything.
    let mut open: Vec<Fill> =
        (0..n).filter(|&i| give[i] < caps[i]).map(|i| Fill(fill[bins[i] as usize] + give[i] as f64 * v, i as u32)).collect();
    let keep = (rest.min(open.len() as u128)) as usize;
    if keep < open.len() {
        open.select_nth_unstable(keep);
        open.truncate(keep);
    }
    let mut heap: BinaryHeap<Reverse<Fill>> = open.into_iter().map(Reverse).collect();
    while rest > 0 {
        let Reverse(Fill(f, i)) = heap.pop().expect("level_fill capacity exhausted");
        let i = i as usize;
        give[i] += 1;
        rest -= 1;
        if give[i] < caps[i] {
            heap.push(Reverse(Fill(f + v, i as u32)));
        }
    }
    give
}

struct Allocation {
    labeling: Labeling,
    fill: Vec<f64>,
    crossing: Vec<f64>,
}

/// Greedy allocation of the state's groups into `2^depth` bins.
fn allocate(
    groups: &[Group],
    depth: u32,
    gamma: f64,
    bin_delta_max: f64,
    rho_gamma: f64,
) -> Result<Allocation, AllocFailure> {
    let b = 1usize << depth;
    let unit = 1.0 / b as f64;
    let threshold = gamma * unit;
    let ceiling = unit + bin_delta_max;
    let mut fill = vec![0.0_f64; b];
    let mut crossing = vec![f64::NAN; b];
    let mut uncrossed: Vec<u32> = (0..b as u32).collect();
    let mut slices: Vec<Slice> = Vec::new();
    let mut taken: Vec<(u32, u128)> = Vec::new();

    for (gi, g) in groups.iter().enumerate() {
        let v = g.value;
        let mut c = g.count;
        taken.clear();
        if v > ceiling {
            return Err(AllocFailure::Overflow { bin: 0, fill: v });
        }
        if !uncrossed.is_empty() {
            if v <= 0.0 {
                return Err(AllocFailure::NoCrossing { bin: uncrossed[0] });
            }
            let caps: Vec<u128> = uncrossed.iter().map(|&k| members_to_reach(fill[k as usize], threshold, v)).collect();
            let need = caps.iter().fold(0u128, |a, &x| a.saturating_add(x));
            let give = if c >= need { caps.clone() } else { level_fill(&fill, &uncrossed, &caps, c, v) };
            for (i, &k) in uncrossed.iter().enumerate() {
                if give[i] > 0 {
                    fill[k as usize] += give[i] as f64 * v;
                    taken.push((k, give[i]));
                    c -= give[i];
                }
                if give[i] == caps[i] {
                    crossing[k as usize] = v;
                }
            }
            uncrossed.retain(|&k| crossing[k as usize].is_nan());
        }
        if c > 0 {
            let all: Vec<u32> = (0..b as u32).collect();
            if v <= 0.0 {
                let k = (0..b).min_by(|&x, &y| fill[x].total_cmp(&fill[y])).unwrap_or(0);
                taken.push((k as u32, c));
            } else {
                let rooms: Vec<u128> =
                    fill.iter().map(|&f| if f < unit { floor_count((unit - f) / v) } else { 0 }).collect();
                let room = rooms.iter().fold(0u128, |a, &x| a.saturating_add(x));
                let mut give = if c <= room { level_fill(&fill, &all, &rooms, c, v) } else { rooms.clone() };
                if c > room {
                    let base: Vec<f64> = (0..b).map(|k| fill[k] + give[k] as f64 * v).collect();
                    let extra = level_fill(&base, &all, &vec![u128::MAX; b], c - room, v);
                    for k in 0..b {
                        give[k] += extra[k];
                    }
                }
                for k in 0..b {
                    if give[k] > 0 {
                        fill[k] += give[k] as f64 * v;
                        taken.push((k as u32, give[k]));
                    }
                }
            }
        }
        for &(k, _) in &taken {
            if fill[k as usize] > ceiling {
                return Err(AllocFailure::Overflow { bin: k, fill: fill[k as usize] });
            }
        }
        taken.sort_unstable_by_key(|&(k, _)| k);
        let mut start = 0u128;
        for &(k, n) in &taken {
            match slices.last_mut() {
                Some(s) if s.group == gi && s.label == k => s.len += n,
                _ => slices.push(Slice { group: gi, start, len: n, label: k }),
            }
            start += n;
        }
        debug_assert_eq!(start, g.count);
    }
    if let Some(&k) = uncrossed.first() {
        return Err(AllocFailure::NoCrossing { bin: k });
    }
    for k in 0..b {
        if crossing[k] < rho_gamma {
            return Err(AllocFailure::LowCrossing { bin: k as u32, value: crossing[k] });
        }
    }
    Ok(Allocation { labeling: Labeling::new(slices), fill, crossing })
}

/// Members of value `v` needed to lift `fill` to at least `threshold`.
fn members_to_reach(fill: f64, threshold: f64, v: f64) -> u128 {
    let mut n = (((threshold - fill) / v).ceil().max(1.0)) as u128;
    for _ in 0..4 {
        if n > 1 && fill + (n - 1) as f64 * v >= threshold {
            n -= 1;
        } else if fill + n as f64 * v < threshold {
            n = n.saturating_add(1);
        } else {
            break;
        }
    }
    n
}

/// Applies the channel likelihood `[[q, p], [p, q]]` along every axis of a `2^j` vector.
fn likelihood_transform(x: &mut [f64], p: f64, q: f64) {
    let n = x.len();
    let mut half = 1;
    while half < n {
        for base in (0..n).step_by(2 * half) {
            for i in base..base + half {
                let (a, b) = (x[i], x[i + half]);
                x[i] = q * a + p * b;
                x[i + half] = p * a + q * b;
            }
        }
        half *= 2;
    }
}

/// Worst slack `Δ_j(y)² - 0.4 L_j(y)` over all steps and prefixes, where `L_j(y)` is a
/// lower bound on the median after prefix `y`, derived from the exact bin masses.
///
/// After prefix `y` of length `j` the bins whose labels disagree with `y` in at most `h`
/// places keep posterior `Σ w_k P_k / N(y)`; the members that carried each of them past
/// `γ 2^-D` hold at least a `γ` share. Once that share reaches one half, every member in
/// it, each worth at least `min_crossing q^(j-h) p^h / N(y)`, lies above the median.
pub fn certify(
    masses: &[f64],
    depth: u32,
    gamma: f64,
    min_crossing: f64,
    median: f64,
    channel: &ChannelParams,
) -> f64 {
    let (p, q) = (channel.p(), channel.q());
    let b = 1usize << depth;
    let half = b / 2;
    let d0: f64 = masses[..half].iter().sum::<f64>() - masses[half..].iter().sum::<f64>();
    let mut worst = d0 * d0 - 0.4 * median * (1.0 - CERTIFICATE_MARGIN);
    let cum = cumulative_binomials(depth, channel);
    for j in 1..depth {
        let width = 1usize << j;
        let shift = depth - j;
        let mut total = vec![0.0; width];
        let mut diff = vec![0.0; width];
        for (k, &m) in masses.iter().enumerate() {
            let u = k >> shift;
            total[u] += m;
            if (k >> (shift - 1)) & 1 == 0 {
                diff[u] += m;
            } else {
                diff[u] -= m;
            }
        }
        likelihood_transform(&mut total, p, q);
        likelihood_transform(&mut diff, p, q);
        let scale = gamma / width as f64;
        for y in 0..width {
            let n = total[y];
            let delta = diff[y] / n;
            let slack = match cum[j as usize].iter().position(|&bj| scale * bj >= 0.5 * n) {
                None => f64::INFINITY,
                Some(h) => {
                    let bound = min_crossing * q.powi((j as usize - h) as i32) * p.powi(h as i32) / n;
                    delta * delta - 0.4 * bound * (1.0 - CERTIFICATE_MARGIN)
                }
            };
            worst = worst.max(slack);
        }
    }
    worst
}

/// Attempts a look-ahead plan of exactly `depth` symbols.
pub fn try_depth(state: &GroupedPosterior, depth: u32, channel: &ChannelParams) -> Result<PartitionPlan, AllocFailure> {
    let groups = state.groups();
    let unit = (-(depth as f64)).exp2();
    let median = state.median_value().value;
    let dw = (0.4 * median).sqrt();
    if state.top_value() > unit * (1.0 + dw) || state.total_count() < (1u128 << depth) {
        return Err(AllocFailure::Overflow { bin: 0, fill: state.top_value() });
    }
    let search = search_groups(groups, depth, channel).ok_or(AllocFailure::NoCrossing { bin: 0 })?;
    // Bin imbalance Δb keeps every realized step imbalance within Δb / (1 - Δb) = Δ.
    let budget = search.delta_max / (1.0 + search.delta_max);
    let alloc = allocate(groups, depth, search.gamma, budget * unit, search.rho_gamma)?;
    let bin_mass = alloc.labeling.masses(groups, 1 << depth);
    let mut delta_k = Vec::with_capacity(bin_mass.len());
    for (k, &m) in bin_mass.iter().enumerate() {
        let d = m - unit;
        if d.abs() > budget * unit {
            return Err(AllocFailure::Imbalance { bin: k as u32, delta: d });
        }
        delta_k.push(d);
    }
    let min_crossing = alloc.crossing.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = certify(&bin_mass, depth, search.gamma, min_crossing, median, channel);
    if !(slack <= 0.0) {
        return Err(AllocFailure::Imbalance { bin: 0, delta: slack });
    }
    debug_assert!(alloc.fill.iter().all(|f| f.is_finite()));
    Ok(PartitionPlan {
        kind: PlanKind::Lookahead,
        depth,
        labeling: alloc.labeling,
        bin_mass,
        delta_k,
        gamma: Some(search.gamma),
        rho_gamma_planned: Some(search.rho_gamma),
        crossing: alloc.crossing,
        h: search.h,
        rho_min_schedule: search.rho_min,
        delta_max: budget,
        bin_delta_max: budget * unit,
        certified_slack: slack,
    })
}

/// Deepest feasible plan up to `dmax`, falling back to the SEAD single-symbol plan.
pub fn plan_block(state: &GroupedPosterior, channel: &ChannelParams, dmax: u32) -> Result<PartitionPlan, LookaheadError> {
    if dmax == 0 || dmax > MAX_DEPTH {
        return Err(LookaheadError::BadDepth(dmax));
    }
    for depth in (2..=dmax).rev() {
        if let Ok(plan) = try_depth(state, depth, channel) {
            return Ok(plan);
        }
    }
    let part = build_sead_partition(state)?;
    Ok(PartitionPlan::single(PlanKind::Sead, &part, state.median_value().value))
}

/// Allocates with caller-chosen parameters; exposed for tests.
pub fn allocate_bins(
    state: &GroupedPosterior,
    depth: u32,
    gamma: f64,
    bin_delta_max: f64,
    rho_gamma: f64,
) -> Result<(Labeling, Vec<f64>), AllocFailure> {
    let alloc = allocate(state.groups(), depth, gamma, bin_delta_max, rho_gamma)?;
    let masses = alloc.labeling.masses(state.groups(), 1 << depth);
    Ok((alloc.labeling, masses))
}

/// Exhaustive check of a plan: for every step `j < D` and every received prefix, the
/// updated state's true median and the true imbalance of bit `j + 1`. Returns the worst
/// `Δ² - 0.4 ρ_m`.
pub fn enumerate_realized_delta(
    plan: &PartitionPlan,
    state: &GroupedPosterior,
    _channel: &ChannelParams,
) -> Result<f64, LookaheadError> {
    let depth = plan.depth();
    if depth > ENUMERATION_CAP {
        return Err(LookaheadError::EnumerationCap { depth, cap: ENUMERATION_CAP });
    }
    let mut worst = f64::NEG_INFINITY;
    for j in 0..depth {
        for y in 0..(1u32 << j) {
            let bits: Vec<u8> = (0..j).rev().map(|i| ((y >> i) & 1) as u8).collect();
            let (now, labeling) = if j == 0 {
                (state.clone(), plan.labeling().clone())
            } else {
                let next = state.update_block(plan, &bits)?;
                let carried = plan.labeling().transport(state, &next)?;
                (next, carried)
            };
            let shift = depth - j - 1;
            let mut delta = 0.0;
            for s in labeling.slices() {
                let m = s.len as f64 * now.groups()[s.group].value;
                if (s.label >> shift) & 1 == 0 {
                    delta += m;
                } else {
                    delta -= m;
                }
            }
            let median = now.median_value().value;
            worst = worst.max(delta * delta - 0.4 * median);
        }
    }
    Ok(worst)
}
