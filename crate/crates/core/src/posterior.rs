//! Grouped posterior over the `2^K` message space.
//!
//! A member's posterior is determined by its distance `d`, the number of channel outputs
//! so far that disagree with what the member would have produced. All members at the same
//! distance share one value `(p/q)^(d - d_min) / Z`, so a state is a short list of groups
//! keyed by distance and equal values merge by construction.
//!
//! Members inside a group are addressed by position `0..count`. Every update records a
//! [`Remap`] of position ranges from the old groups to the new ones. The encoder follows
//! its message forward through these remaps with a [`MessageLocator`]. The decoder traces
//! the winning position backwards to the root to recover the explicit word.

use std::hash::{Hash, Hasher};
use std::sync::{Arc, LazyLock};

use thiserror::Error;

use crate::lookahead::PartitionPlan;
use crate::model::ChannelParams;
use crate::partition::BinaryPartition;

/// Largest supported message length. Counts up to `2^K` must fit in `u128`.
pub const MAX_MESSAGE_BITS: u32 = 127;

/// A message of up to [`MAX_MESSAGE_BITS`] bits. The first transmitted bit is the most
/// significant of the low `K` bits.
pub type Word = u128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PosteriorError {
    #[error("message length {0} outside [1, {MAX_MESSAGE_BITS}]")]
    BadLength(u32),
    #[error("labeling leaves group {group} uncovered from position {position}")]
    Coverage { group: usize, position: u128 },
    #[error("labeling references group {0} which does not exist")]
    UnknownGroup(usize),
    #[error("received {got} bits but the block has {max}")]
    BlockTooLong { got: usize, max: u32 },
    #[error("received block is empty")]
    EmptyBlock,
    #[error("received symbol {0} is not a bit")]
    NotABit(u8),
    #[error("ordinal {ordinal} out of range for weight {class} among {k}-bit words")]
    OrdinalOutOfRange { k: u32, class: u32, ordinal: u128 },
    #[error("position {position} outside group at distance {distance}")]
    PositionOutOfRange { distance: u32, position: u128 },
    #[error("profile values must be positive, finite and strictly decreasing")]
    BadProfile,
    #[error("state built from an explicit profile cannot be updated or traced")]
    StaticProfile,
}

static BINOMIAL: LazyLock<Vec<Vec<u128>>> = LazyLock::new(|| {
    let n = MAX_MESSAGE_BITS as usize + 1;
    let mut rows = vec![vec![0u128; n]; n];
    for i in 0..n {
        rows[i][0] = 1;
        for j in 1..=i {
            rows[i][j] = rows[i - 1][j - 1] + if j < i { rows[i - 1][j] } else { 0 };
        }
    }
    rows
});

/// `n choose k` for `n <= 127`, zero when `k > n`.
pub fn binom(n: u32, k: u32) -> u128 {
    if k > n {
        return 0;
    }
    BINOMIAL[n as usize][k as usize]
}

fn low_mask(k: u32) -> Word {
    if k >= 128 {
        Word::MAX
    } else {
        (1u128 << k) - 1
    }
}

/// Lexicographic rank of `word` among the `k`-bit words of the same weight.
///
/// Uses the combinatorial number system on set-bit positions counted from the least
/// significant end, which orders equal-weight words numerically.
pub fn rank_word(word: Word) -> (u32, u128) {
    let mut rank = 0u128;
    let mut j = 0u32;
    let mut rest = word;
    while rest != 0 {
        let c = rest.trailing_zeros();
        j += 1;
        rank += binom(c, j);
        rest &= rest - 1;
    }
    (j, rank)
}

/// Inverse of [`rank_word`] for `k`-bit words.
pub fn unrank_word(k: u32, class: u32, ordinal: u128) -> Result<Word, PosteriorError> {
    if class > k || ordinal >= binom(k, class) {
        return Err(PosteriorError::OrdinalOutOfRange { k, class, ordinal });
    }
    let mut word = 0u128;
    let mut rest = ordinal;
    let mut limit = k;
    for j in (1..=class).rev() {
        // Largest c < limit with binom(c, j) <= rest.
        let mut c = limit - 1;
        while binom(c, j) > rest {
            c -= 1;
        }
        word |= 1u128 << c;
        rest -= binom(c, j);
        limit = c;
    }
    Ok(word)
}

/// Members sharing one posterior value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Group {
    /// Disagreements between the members' codewords and the received outputs.
    pub distance: u32,
    pub count: u128,
    /// Posterior of each member.
    pub value: f64,
}

impl Group {
    pub fn mass(&self) -> f64 {
        self.count as f64 * self.value
    }
}

/// A contiguous run of positions in one group carrying one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slice {
    pub group: usize,
    pub start: u128,
    pub len: u128,
    pub label: u32,
}

/// Assignment of every member of a state to a label, as slices sorted by group then start.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Labeling {
    slices: Vec<Slice>,
}

impl Labeling {
    /// Wraps slices that are already sorted by `(group, start)`.
    pub fn new(slices: Vec<Slice>) -> Self {
        Self { slices }
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    /// Checks that the slices tile every group of `groups` exactly once.
    pub fn validate(&self, groups: &[Group]) -> Result<(), PosteriorError> {
        let mut group = 0usize;
        let mut next = 0u128;
        for s in &self.slices {
            if s.group >= groups.len() {
                return Err(PosteriorError::UnknownGroup(s.group));
            }
            while group < s.group {
                if next != groups[group].count {
                    return Err(PosteriorError::Coverage { group, position: next });
                }
                group += 1;
                next = 0;
            }
            if s.group != group || s.start != next || s.len == 0 {
                return Err(PosteriorError::Coverage { group, position: next });
            }
            next += s.len;
            if next > groups[group].count {
                return Err(PosteriorError::Coverage { group, position: groups[group].count });
            }
        }
        while group < groups.len() {
            if next != groups[group].count {
                return Err(PosteriorError::Coverage { group, position: next });
            }
            group += 1;
            next = 0;
        }
        Ok(())
    }

    /// Label of the member at `position` of group `group`.
    pub fn label_of(&self, group: usize, position: u128) -> Option<u32> {
        let idx = self
            .slices
            .partition_point(|s| (s.group, s.start) <= (group, position))
            .checked_sub(1)?;
        let s = &self.slices[idx];
        (s.group == group && position < s.start + s.len).then_some(s.label)
    }

    /// Total posterior carried by each label `0..labels`.
    pub fn masses(&self, groups: &[Group], labels: usize) -> Vec<f64> {
        let mut out = vec![0.0; labels];
        for s in &self.slices {
            out[s.label as usize] += s.len as f64 * groups[s.group].value;
        }
        out
    }

    /// Carries the labels of `before` through the update that produced `after`.
    pub fn transport(
        &self,
        before: &GroupedPosterior,
        after: &GroupedPosterior,
    ) -> Result<Labeling, PosteriorError> {
        let remap = after.last_remap().ok_or(PosteriorError::StaticProfile)?;
        let mut out: Vec<Slice> = Vec::with_capacity(self.slices.len());
        for s in &self.slices {
            let d = before.groups[s.group].distance;
            let end = s.start + s.len;
            let mut idx = remap.pieces.partition_point(|p| (p.from_distance, p.from_start + p.len) <= (d, s.start));
            while idx < remap.pieces.len() {
                let p = &remap.pieces[idx];
                if p.from_distance != d || p.from_start >= end {
                    break;
                }
                let lo = p.from_start.max(s.start);
                let hi = (p.from_start + p.len).min(end);
                let group = after
                    .group_index(p.to_distance)
                    .ok_or(PosteriorError::UnknownGroup(p.to_distance as usize))?;
                out.push(Slice { group, start: p.to_start + (lo - p.from_start), len: hi - lo, label: s.label });
                idx += 1;
            }
        }
        out.sort_by_key(|s| (s.group, s.start));
        let mut merged: Vec<Slice> = Vec::with_capacity(out.len());
        for s in out {
            match merged.last_mut() {
                Some(m) if m.group == s.group && m.label == s.label && m.start + m.len == s.start => m.len += s.len,
                _ => merged.push(s),
            }
        }
        Ok(Labeling { slices: merged })
    }
}

/// A run of positions moved by one update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Piece {
    pub from_distance: u32,
    pub from_start: u128,
    pub len: u128,
    pub to_distance: u32,
    pub to_start: u128,
}

/// Position mapping recorded by one update. Pieces are sorted by source; `by_target`
/// lists them sorted by destination.
#[derive(Debug, Clone, Default)]
pub struct Remap {
    pieces: Vec<Piece>,
    by_target: Vec<u32>,
}

impl Remap {
    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    fn forward(&self, distance: u32, position: u128) -> Option<(u32, u128)> {
        let idx = self
            .pieces
            .partition_point(|p| (p.from_distance, p.from_start) <= (distance, position))
            .checked_sub(1)?;
        let p = &self.pieces[idx];
        (p.from_distance == distance && position < p.from_start + p.len)
            .then(|| (p.to_distance, p.to_start + (position - p.from_start)))
    }

    fn backward(&self, distance: u32, position: u128) -> Option<(u32, u128)> {
        let idx = self
            .by_target
            .partition_point(|&i| {
                let p = &self.pieces[i as usize];
                (p.to_distance, p.to_start) <= (distance, position)
            })
            .checked_sub(1)?;
        let p = &self.pieces[self.by_target[idx] as usize];
        (p.to_distance == distance && position < p.to_start + p.len)
            .then(|| (p.from_distance, p.from_start + (position - p.to_start)))
    }
}

#[derive(Debug)]
struct Step {
    remap: Remap,
    prev: Option<Arc<Step>>,
}

impl Drop for Step {
    // Unlink iteratively so long histories do not recurse on drop.
    fn drop(&mut self) {
        let mut next = self.prev.take();
        while let Some(arc) = next {
            match Arc::try_unwrap(arc) {
                Ok(mut step) => next = step.prev.take(),
                Err(_) => break,
            }
        }
    }
}

/// Where root positions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Root group at distance `h` holds the words at Hamming distance `h` from `y_sys`,
    /// ordered by [`rank_word`] of `word ^ y_sys`.
    Systematic { y_sys: Word },
    /// A single root group whose position is the message itself.
    Uniform,
    /// Built from explicit values; supports queries only.
    Profile,
}

/// Follows one message through successive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageLocator {
    /// Distance class at the root.
    pub root_class: u32,
    /// Position at the root.
    pub ordinal: u128,
    /// Current group's distance.
    pub distance: u32,
    /// Position inside the current group.
    pub position: u128,
}

impl MessageLocator {
    /// Moves the locator across the update that produced `after`.
    pub fn advance(&mut self, after: &GroupedPosterior) -> Result<(), PosteriorError> {
        let remap = after.last_remap().ok_or(PosteriorError::StaticProfile)?;
        let (d, pos) = remap.forward(self.distance, self.position).ok_or(PosteriorError::PositionOutOfRange {
            distance: self.distance,
            position: self.position,
        })?;
        self.distance = d;
        self.position = pos;
        Ok(())
    }

    /// Index of the group currently containing the message.
    pub fn group(&self, state: &GroupedPosterior) -> Option<usize> {
        state.group_index(self.distance)
    }
}

/// Locator of `theta` in the state built by [`GroupedPosterior::systematic_init`] from `y_sys`.
pub fn locate_message(theta: Word, y_sys: Word) -> MessageLocator {
    let (h, ordinal) = rank_word(theta ^ y_sys);
    MessageLocator { root_class: h, ordinal, distance: h, position: ordinal }
}

/// Inverse of [`locate_message`] using the root coordinates.
pub fn unrank(k: u32, locator: &MessageLocator, y_sys: Word) -> Result<Word, PosteriorError> {
    Ok(unrank_word(k, locator.root_class, locator.ordinal)? ^ y_sys)
}

/// Result of a descending cumulative scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantile {
    /// Value of the member where the scan first reaches the threshold.
    pub value: f64,
    pub group: usize,
    /// Members of `group` included up to and including the crossing member.
    pub taken: u128,
    /// Cumulative mass through the crossing member.
    pub cumulative: f64,
}

/// Scans members in descending order until the cumulative mass reaches `gamma`.
///
/// If rounding leaves the total just short of `gamma`, the last member of the last
/// nonzero group is returned.
pub fn quantile_of(groups: &[Group], gamma: f64) -> Quantile {
    let mut cum = 0.0;
    let mut last = None;
    for (i, g) in groups.iter().enumerate() {
        if g.value <= 0.0 {
            continue;
        }
        let mass = g.mass();
        if cum + mass >= gamma {
            let v = g.value;
            let mut n = (((gamma - cum) / v).ceil().max(1.0) as u128).min(g.count);
            for _ in 0..4 {
                if n > 1 && cum + (n - 1) as f64 * v >= gamma {
                    n -= 1;
                } else if n < g.count && cum + n as f64 * v < gamma {
                    n += 1;
                } else {
                    break;
                }
            }
            return Quantile { value: v, group: i, taken: n, cumulative: cum + n as f64 * v };
        }
        cum += mass;
        last = Some(i);
    }
    let i = last.expect("state has no positive mass");
    Quantile { value: groups[i].value, group: i, taken: groups[i].count, cumulative: cum }
}

/// Median scan: the quantile at one half plus `delta = 2 * cumulative - 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Median {
    pub value: f64,
    pub delta: f64,
    pub group: usize,
    pub taken: u128,
}

pub fn median_of(groups: &[Group]) -> Median {
    let q = quantile_of(groups, 0.5);
    Median { value: q.value, delta: 2.0 * q.cumulative - 1.0, group: q.group, taken: q.taken }
}

/// Log-likelihood ratio `log2(v / (1 - v))`, infinite at 0 and 1.
pub fn u_of(value: f64) -> f64 {
    if value <= 0.0 {
        f64::NEG_INFINITY
    } else if value >= 1.0 {
        f64::INFINITY
    } else {
        (value / (1.0 - value)).log2()
    }
}

/// Posterior over all `2^K` messages as groups sorted by distance (value descending).
#[derive(Debug, Clone)]
pub struct GroupedPosterior {
    k: u32,
    t: u64,
    ratio: f64,
    groups: Vec<Group>,
    origin: Origin,
    history: Option<Arc<Step>>,
}

impl GroupedPosterior {
    /// Posterior after the `K` systematic symbols produced `y_sys`.
    pub fn systematic_init(k: u32, channel: &ChannelParams, y_sys: Word) -> Result<Self, PosteriorError> {
        check_length(k)?;
        let groups = (0..=k).map(|h| Group { distance: h, count: binom(k, h), value: 0.0 }).collect();
        let mut state = Self {
            k,
            t: k as u64,
            ratio: channel.ratio(),
            groups,
            origin: Origin::Systematic { y_sys: y_sys & low_mask(k) },
            history: None,
        };
        state.renormalize();
        Ok(state)
    }

    /// Uniform prior over `2^K` messages before any symbol.
    pub fn uniform(k: u32, channel: &ChannelParams) -> Result<Self, PosteriorError> {
        check_length(k)?;
        let count = if k == 128 { u128::MAX } else { 1u128 << k };
        Ok(Self {
            k,
            t: 0,
            ratio: channel.ratio(),
            groups: vec![Group { distance: 0, count, value: 1.0 / count as f64 }],
            origin: Origin::Uniform,
            history: None,
        })
    }

    /// Query-only state from explicit `(value, count)` pairs in strictly decreasing value
    /// order. Values are renormalized to sum to one.
    pub fn from_profile(profile: &[(f64, u128)]) -> Result<Self, PosteriorError> {
        let ok = !profile.is_empty()
            && profile.iter().all(|&(v, c)| v.is_finite() && v > 0.0 && c > 0)
            && profile.windows(2).all(|w| w[0].0 > w[1].0);
        if !ok {
            return Err(PosteriorError::BadProfile);
        }
        let total: f64 = profile.iter().map(|&(v, c)| v * c as f64).sum();
        let groups = profile
            .iter()
            .enumerate()
            .map(|(i, &(v, c))| Group { distance: i as u32, count: c, value: v / total })
            .collect();
        Ok(Self { k: 0, t: 0, ratio: f64::NAN, groups, origin: Origin::Profile, history: None })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    /// Symbols observed so far.
    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// No update has been applied yet.
    pub fn is_root(&self) -> bool {
        self.history.is_none()
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    /// Largest member value.
    pub fn top_value(&self) -> f64 {
        self.groups[0].value
    }

    /// Confirmation phase: some member holds at least half the mass.
    pub fn is_confirming(&self) -> bool {
        self.top_value() >= 0.5
    }

    pub fn group_index(&self, distance: u32) -> Option<usize> {
        self.groups.binary_search_by_key(&distance, |g| g.distance).ok()
    }

    pub fn total_count(&self) -> u128 {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.groups.iter().map(Group::mass).sum()
    }

    pub fn median_value(&self) -> Median {
        median_of(&self.groups)
    }

    pub fn quantile_value(&self, gamma: f64) -> Quantile {
        quantile_of(&self.groups, gamma)
    }

    /// Remap recorded by the update that produced this state.
    pub fn last_remap(&self) -> Option<&Remap> {
        self.history.as_deref().map(|s| &s.remap)
    }

    /// Locator of `theta` valid in a freshly built root state.
    pub fn locate(&self, theta: Word) -> Result<MessageLocator, PosteriorError> {
        match self.origin {
            Origin::Systematic { y_sys } if self.history.is_none() => Ok(locate_message(theta, y_sys)),
            Origin::Uniform if self.history.is_none() => {
                Ok(MessageLocator { root_class: 0, ordinal: theta, distance: 0, position: theta })
            }
            _ => Err(PosteriorError::StaticProfile),
        }
    }

    /// Word of the member at `position` of group `group`, traced back to the root.
    pub fn member_word(&self, group: usize, position: u128) -> Result<Word, PosteriorError> {
        let g = self.groups.get(group).ok_or(PosteriorError::UnknownGroup(group))?;
        if position >= g.count {
            return Err(PosteriorError::PositionOutOfRange { distance: g.distance, position });
        }
        let (mut d, mut pos) = (g.distance, position);
        let mut node = self.history.as_deref();
        while let Some(step) = node {
            (d, pos) = step
                .remap
                .backward(d, pos)
                .ok_or(PosteriorError::PositionOutOfRange { distance: d, position: pos })?;
            node = step.prev.as_deref();
        }
        match self.origin {
            Origin::Systematic { y_sys } => Ok(unrank_word(self.k, d, pos)? ^ y_sys),
            Origin::Uniform => Ok(pos),
            Origin::Profile => Err(PosteriorError::StaticProfile),
        }
    }

    /// Stable digest of the distribution, for lockstep comparisons.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.t.hash(&mut h);
        for g in &self.groups {
            g.distance.hash(&mut h);
            g.count.hash(&mut h);
            g.value.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Bayes update for one symbol whose input was the partition label of the message.
    pub fn update_sequential(&self, partition: &BinaryPartition, y: u8) -> Result<Self, PosteriorError> {
        if y > 1 {
            return Err(PosteriorError::NotABit(y));
        }
        self.apply(partition.labeling(), 1, |label| (label != y as u32) as u32)
    }

    /// Bayes update for the first `y_block.len()` symbols of a planned block, where each
    /// member sent the bits of its bin label most significant first.
    pub fn update_block(&self, plan: &PartitionPlan, y_block: &[u8]) -> Result<Self, PosteriorError> {
        let j = y_block.len();
        let d = plan.depth();
        if j == 0 {
            return Err(PosteriorError::EmptyBlock);
        }
        if j > d as usize {
            return Err(PosteriorError::BlockTooLong { got: j, max: d });
        }
        let received = bits_to_word(y_block)? as u32;
        let shift = d - j as u32;
        self.apply(plan.labeling(), j as u32, |label| ((label >> shift) ^ received).count_ones())
    }

    /// Moves each labeled slice `extra(label)` distance classes further away.
    pub fn apply(
        &self,
        labeling: &Labeling,
        steps: u32,
        extra: impl Fn(u32) -> u32,
    ) -> Result<Self, PosteriorError> {
        if self.origin == Origin::Profile {
            return Err(PosteriorError::StaticProfile);
        }
        labeling.validate(&self.groups)?;
        let base = self.groups[0].distance;
        let span = (self.groups[self.groups.len() - 1].distance - base + steps + 1) as usize;
        let mut counts = vec![0u128; span];
        let mut pieces: Vec<Piece> = Vec::with_capacity(labeling.slices.len());
        for s in &labeling.slices {
            let from = self.groups[s.group].distance;
            let to = from + extra(s.label);
            let slot = &mut counts[(to - base) as usize];
            let to_start = *slot;
            *slot += s.len;
            match pieces.last_mut() {
                Some(p) if p.from_distance == from && p.to_distance == to && p.from_start + p.len == s.start && p.to_start + p.len == to_start => {
                    p.len += s.len
                }
                _ => pieces.push(Piece { from_distance: from, from_start: s.start, len: s.len, to_distance: to, to_start }),
            }
        }
        let groups: Vec<Group> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| Group { distance: base + i as u32, count: c, value: 0.0 })
            .collect();
        // Within one target class, pieces arrive in increasing `to_start`.
        let mut offsets = vec![0usize; span + 1];
        for p in &pieces {
            offsets[(p.to_distance - base) as usize + 1] += 1;
        }
        for i in 0..span {
            offsets[i + 1] += offsets[i];
        }
        let mut by_target = vec![0u32; pieces.len()];
        for (i, p) in pieces.iter().enumerate() {
            let slot = &mut offsets[(p.to_distance - base) as usize];
            by_target[*slot] = i as u32;
            *slot += 1;
        }
        let mut next = Self {
            k: self.k,
            t: self.t + steps as u64,
            ratio: self.ratio,
            groups,
            origin: self.origin,
            history: Some(Arc::new(Step { remap: Remap { pieces, by_target }, prev: self.history.clone() })),
        };
        next.renormalize();
        Ok(next)
    }

    fn renormalize(&mut self) {
        let ln_r = self.ratio.ln();
        let d0 = self.groups[0].distance;
        let mut z = 0.0;
        for g in &mut self.groups {
            g.value = ((g.distance - d0) as f64 * ln_r).exp();
            z += g.count as f64 * g.value;
        }
        for g in &mut self.groups {
            g.value /= z;
        }
    }
}

fn check_length(k: u32) -> Result<(), PosteriorError> {
    if k == 0 || k > MAX_MESSAGE_BITS {
        return Err(PosteriorError::BadLength(k));
    }
    Ok(())
}

/// Packs bits, first bit most significant.
pub fn bits_to_word(bits: &[u8]) -> Result<Word, PosteriorError> {
    bits.iter().try_fold(0u128, |acc, &b| {
        if b > 1 {
            Err(PosteriorError::NotABit(b))
        } else {
            Ok((acc << 1) | b as u128)
        }
    })
}

/// Unpacks the low `n` bits of `word`, most significant first.
pub fn word_to_bits(word: Word, n: u32) -> Vec<u8> {
    (0..n).rev().map(|i| ((word >> i) & 1) as u8).collect()
}
