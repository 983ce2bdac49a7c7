//! Encoder and decoder sessions for the sparse-feedback protocol.
//!
//! The encoder first sends the `K` message bits. The decoder answers every block with one
//! feedback packet holding what it received. Both sides then hold the same posterior and
//! derive the same plan for the next block on their own. A block is one look-ahead plan
//! in sparse mode and one symbol in dense mode or in the confirmation phase. The decoder
//! stops as soon as some member reaches `1 - ε`, even in the middle of a block.

use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use thiserror::Error;

use crate::lookahead::{plan_block, LookaheadError, PartitionPlan, PlanKind};
use crate::model::ChannelParams;
use crate::partition::{build_sed_partition, singleton_partition, wmad_holds, PartitionError};
use crate::posterior::{
    bits_to_word, median_of, word_to_bits, Group, GroupedPosterior, MessageLocator, Origin, PosteriorError, Slice, Word,
    MAX_MESSAGE_BITS,
};

pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Lookahead(#[from] LookaheadError),
    #[error("protocol violation: {0}")]
    Protocol(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("defect at time {time}: step imbalance {delta} exceeds WMAD bound for median {median}")]
    Defect { time: u64, delta: f64, median: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    Sed,
    Sead,
    WmadLookahead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeedbackMode {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Systematic,
    Communication,
    Confirmation,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Sed => "sed",
            Rule::Sead => "sead",
            Rule::WmadLookahead => "wmad-lookahead",
        })
    }
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedbackMode::Dense => "dense",
            FeedbackMode::Sparse => "sparse",
        })
    }
}

/// Session parameters shared by both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    pub k: u32,
    pub channel: ChannelParams,
    pub epsilon: f64,
    pub dmax: u32,
    pub rule: Rule,
    pub feedback: FeedbackMode,
}

impl CodecConfig {
    pub fn new(k: u32, channel: ChannelParams) -> Self {
        Self {
            k,
            channel,
            epsilon: DEFAULT_EPSILON,
            dmax: crate::lookahead::DEFAULT_DMAX,
            rule: Rule::WmadLookahead,
            feedback: FeedbackMode::Sparse,
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.k == 0 || self.k > MAX_MESSAGE_BITS {
            return Err(CodecError::Config(format!("K = {} outside [1, {MAX_MESSAGE_BITS}]", self.k)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(CodecError::Config(format!("epsilon = {} outside (0, 0.5)", self.epsilon)));
        }
        if self.dmax == 0 || self.dmax > crate::lookahead::MAX_DEPTH {
            return Err(CodecError::Config(format!("dmax = {} outside [1, {}]", self.dmax, crate::lookahead::MAX_DEPTH)));
        }
        Ok(())
    }

    fn threshold(&self) -> f64 {
        1.0 - self.epsilon
    }
}

/// Symbols sent between two feedback times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardBlock {
    /// Time index of the first symbol, counting from 1.
    pub start_time: u64,
    pub bits: Vec<u8>,
}

/// Received symbols echoed back to the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackPacket {
    pub start_time: u64,
    pub bits: Vec<u8>,
    pub stop: bool,
}

fn bit_string(bits: &[u8]) -> String {
    bits.iter().map(|b| if *b == 0 { '0' } else { '1' }).collect()
}

impl fmt::Display for ForwardBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} fwd {}", self.start_time, bit_string(&self.bits))
    }
}

impl fmt::Display for FeedbackPacket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} fb {}{}", self.start_time, bit_string(&self.bits), if self.stop { " stop" } else { "" })
    }
}

pub fn phase_of(state: &GroupedPosterior) -> Phase {
    if state.is_confirming() {
        Phase::Confirmation
    } else {
        Phase::Communication
    }
}

/// Plan both ends use for the next block from `state`.
pub fn next_plan(state: &GroupedPosterior, cfg: &CodecConfig) -> Result<PartitionPlan, CodecError> {
    if state.is_confirming() {
        let part = singleton_partition(state)?;
        return Ok(PartitionPlan::single(PlanKind::Singleton, &part, state.median_value().value));
    }
    let dmax = match cfg.feedback {
        FeedbackMode::Sparse if cfg.rule == Rule::WmadLookahead => cfg.dmax,
        _ => 1,
    };
    if cfg.rule == Rule::Sed {
        let part = build_sed_partition(state)?;
        return Ok(PartitionPlan::single(PlanKind::Sed, &part, state.median_value().value));
    }
    Ok(plan_block(state, &cfg.channel, dmax)?)
}

/// Plans shared between the two ends of a session and across sessions.
///
/// Plans depend only on the grouped posterior and the configuration, so both ends always
/// derive the same plan from the same state. The memo keeps the latest plan of a session,
/// keyed by the full group list, and the plan of the state right after the systematic
/// block, which has the same grouped form for every received systematic word.
#[derive(Debug, Clone, Default)]
pub struct PlanMemo {
    root: Arc<OnceLock<Arc<PartitionPlan>>>,
    last: Arc<Mutex<Option<(Vec<Group>, Arc<PartitionPlan>)>>>,
}

impl PlanMemo {
    /// Memo for a new session of the same configuration: shares the root plan only.
    pub fn for_session(&self) -> Self {
        Self { root: self.root.clone(), last: Arc::default() }
    }

    fn plan_for(&self, state: &GroupedPosterior, cfg: &CodecConfig) -> Result<Arc<PartitionPlan>, CodecError> {
        if state.is_root() && matches!(state.origin(), Origin::Systematic { .. }) {
            if let Some(plan) = self.root.get() {
                return Ok(plan.clone());
            }
            let plan = Arc::new(next_plan(state, cfg)?);
            return Ok(self.root.get_or_init(|| plan).clone());
        }
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((groups, plan)) = last.as_ref() {
            if groups.as_slice() == state.groups() {
                return Ok(plan.clone());
            }
        }
        let plan = Arc::new(next_plan(state, cfg)?);
        *last = Some((state.groups().to_vec(), plan.clone()));
        Ok(plan)
    }
}

#[derive(Debug, Clone)]
struct Pending {
    start_time: u64,
    plan: Option<Arc<PartitionPlan>>,
}

/// Transmitter holding the message and a replica of the decoder's posterior.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: CodecConfig,
    theta: Word,
    state: Option<GroupedPosterior>,
    locator: Option<MessageLocator>,
    pending: Option<Pending>,
    time: u64,
    done: bool,
    plan_memo: PlanMemo,
}

impl Encoder {
    pub fn new(cfg: CodecConfig, theta: Word) -> Result<Self, CodecError> {
        cfg.validate()?;
        if cfg.k < 128 && theta >> cfg.k != 0 {
            return Err(CodecError::Config(format!("message does not fit in {} bits", cfg.k)));
        }
        Ok(Self { cfg, theta, state: None, locator: None, pending: None, time: 0, done: false, plan_memo: PlanMemo::default() })
    }

    /// Shares plans through `memo`.
    pub fn with_plan_memo(mut self, memo: PlanMemo) -> Self {
        self.plan_memo = memo;
        self
    }

    pub fn posterior(&self) -> Option<&GroupedPosterior> {
        self.state.as_ref()
    }

    pub fn time(&self) -> u64 {
        self.time
    }

    /// Symbols for the next block, using only feedback absorbed so far.
    pub fn next_block(&mut self) -> Result<ForwardBlock, CodecError> {
        if self.pending.is_some() {
            return Err(CodecError::Protocol("previous block has not been acknowledged"));
        }
        if self.done {
            return Err(CodecError::Protocol("session already stopped"));
        }
        let start_time = self.time + 1;
        let Some(state) = &self.state else {
            self.pending = Some(Pending { start_time, plan: None });
            return Ok(ForwardBlock { start_time, bits: word_to_bits(self.theta, self.cfg.k) });
        };
        let plan = self.plan_memo.plan_for(state, &self.cfg)?;
        let loc = self.locator.as_ref().ok_or(CodecError::Protocol("message not located"))?;
        let group = loc.group(state).ok_or(CodecError::Protocol("message group missing"))?;
        let label = plan.label_of(group, loc.position).ok_or(CodecError::Protocol("message not in any bin"))?;
        let bits = word_to_bits(label as Word, plan.depth());
        self.pending = Some(Pending { start_time, plan: Some(plan) });
        Ok(ForwardBlock { start_time, bits })
    }

    pub fn absorb(&mut self, packet: &FeedbackPacket) -> Result<(), CodecError> {
        let pending = self.pending.take().ok_or(CodecError::Protocol("feedback without a block in flight"))?;
        if packet.start_time != pending.start_time {
            return Err(CodecError::Protocol("feedback for a different block"));
        }
        match (&self.state, pending.plan) {
            (None, _) => {
                if packet.bits.len() != self.cfg.k as usize {
                    return Err(CodecError::Protocol("systematic feedback length differs from K"));
                }
                let y = bits_to_word(&packet.bits)?;
                let state = GroupedPosterior::systematic_init(self.cfg.k, &self.cfg.channel, y)?;
                self.locator = Some(state.locate(self.theta)?);
                self.state = Some(state);
            }
            (Some(state), Some(plan)) => {
                let next = state.update_block(&plan, &packet.bits)?;
                if let Some(loc) = &mut self.locator {
                    loc.advance(&next)?;
                }
                self.state = Some(next);
            }
            (Some(_), None) => return Err(CodecError::Protocol("missing plan for block")),
        }
        self.time += packet.bits.len() as u64;
        self.done = packet.stop;
        Ok(())
    }
}

/// Per-block bookkeeping kept by the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    /// Symbols actually processed.
    pub used: u32,
    /// Planned block size.
    pub planned: u32,
    /// Block started while every member was below one half.
    pub communication: bool,
}

/// Receiver: updates the posterior, decides when to stop and produces the estimate.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: CodecConfig,
    state: Option<GroupedPosterior>,
    time: u64,
    stopped: bool,
    blocks: Vec<BlockInfo>,
    communication_symbols: u64,
    check_wmad: bool,
    plan_memo: PlanMemo,
}

impl Decoder {
    pub fn new(cfg: CodecConfig) -> Result<Self, CodecError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: None,
            time: 0,
            stopped: false,
            blocks: Vec::new(),
            communication_symbols: 0,
            check_wmad: true,
            plan_memo: PlanMemo::default(),
        })
    }

    /// Shares plans through `memo`.
    pub fn with_plan_memo(mut self, memo: PlanMemo) -> Self {
        self.plan_memo = memo;
        self
    }

    /// Turns the per-symbol WMAD assertion on or off.
    pub fn set_wmad_check(&mut self, on: bool) {
        self.check_wmad = on;
    }

    pub fn posterior(&self) -> Option<&GroupedPosterior> {
        self.state.as_ref()
    }

    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    /// Symbols received while every member was below one half, systematic ones included.
    pub fn communication_symbols(&self) -> u64 {
        self.communication_symbols
    }

    /// Size of the block the decoder expects next.
    pub fn expected_len(&self) -> Result<u32, CodecError> {
        match &self.state {
            None => Ok(self.cfg.k),
            Some(s) => Ok(self.plan_memo.plan_for(s, &self.cfg)?.depth()),
        }
    }

    pub fn absorb(&mut self, start_time: u64, y: &[u8]) -> Result<FeedbackPacket, CodecError> {
        if self.stopped {
            return Err(CodecError::Protocol("session already stopped"));
        }
        if start_time != self.time + 1 {
            return Err(CodecError::Protocol("block does not continue the session"));
        }
        let Some(state) = &self.state else {
            return self.absorb_systematic(start_time, y);
        };
        let plan = self.plan_memo.plan_for(state, &self.cfg)?;
        if y.len() != plan.depth() as usize {
            return Err(CodecError::Protocol("block length differs from the plan"));
        }
        let communication = !state.is_confirming();
        let check = self.check_wmad && matches!(plan.kind(), PlanKind::Lookahead | PlanKind::Sead) && communication;
        let walk = walk_block(state, &plan, y, self.cfg.channel.ratio().ln(), self.cfg.threshold(), check, self.time)?;
        let used = walk.used;
        let next = state.update_block(&plan, &y[..used as usize])?;
        self.communication_symbols += walk.communication_symbols;
        self.blocks.push(BlockInfo { used, planned: plan.depth(), communication });
        self.time += used as u64;
        self.state = Some(next);
        self.stopped = walk.stop;
        Ok(FeedbackPacket { start_time, bits: y[..used as usize].to_vec(), stop: walk.stop })
    }

    fn absorb_systematic(&mut self, start_time: u64, y: &[u8]) -> Result<FeedbackPacket, CodecError> {
        let k = self.cfg.k;
        if y.len() != k as usize {
            return Err(CodecError::Protocol("systematic block length differs from K"));
        }
        let state = GroupedPosterior::systematic_init(k, &self.cfg.channel, bits_to_word(y)?)?;
        // After i systematic symbols the leader holds q^i / 2^(K - i).
        let q = self.cfg.channel.q();
        self.communication_symbols += (0..k).filter(|&i| q.powi(i as i32) * (-((k - i) as f64)).exp2() < 0.5).count() as u64;
        self.blocks.push(BlockInfo { used: k, planned: k, communication: true });
        self.time = k as u64;
        self.stopped = state.top_value() >= self.cfg.threshold();
        self.state = Some(state);
        Ok(FeedbackPacket { start_time, bits: y.to_vec(), stop: self.stopped })
    }

    /// The decoded message. Requires a stopped session.
    pub fn estimate(&self) -> Result<Word, CodecError> {
        let state = self.state.as_ref().ok_or(CodecError::Protocol("nothing received"))?;
        if !self.stopped || state.top_value() < self.cfg.threshold() {
            return Err(CodecError::Protocol("estimate requested before the threshold was reached"));
        }
        if state.groups()[0].count != 1 {
            return Err(CodecError::Protocol("leading value is shared by several members"));
        }
        Ok(state.member_word(0, 0)?)
    }
}

struct Walk {
    used: u32,
    stop: bool,
    communication_symbols: u64,
}

/// Processes a block symbol by symbol without materializing intermediate states.
///
/// For every prefix this recomputes the distances of all labeled slices, from which the
/// leading value, the median and the imbalance of the next symbol's partition follow.
/// Member counts keyed by `group << 32 | label prefix`, one list per prefix length
/// `0..=depth`, each sorted by key.
fn prefix_levels(slices: &[Slice], depth: u32) -> Vec<Vec<(u64, u128)>> {
    let mut full: Vec<(u64, u128)> = slices.iter().map(|s| (((s.group as u64) << 32) | s.label as u64, s.len)).collect();
    full.sort_unstable_by_key(|e| e.0);
    let mut levels = vec![merge_equal(full)];
    for _ in 0..depth {
        let prev = levels.last().expect("nonempty");
        let shifted = prev.iter().map(|&(key, len)| ((key & !0xffff_ffff) | ((key as u32) >> 1) as u64, len)).collect();
        levels.push(merge_equal(shifted));
    }
    levels.reverse();
    levels
}

fn merge_equal(sorted: Vec<(u64, u128)>) -> Vec<(u64, u128)> {
    let mut out: Vec<(u64, u128)> = Vec::with_capacity(sorted.len());
    for (key, len) in sorted {
        match out.last_mut() {
            Some(last) if last.0 == key => last.1 += len,
            _ => out.push((key, len)),
        }
    }
    out
}

fn walk_block(
    state: &GroupedPosterior,
    plan: &PartitionPlan,
    y: &[u8],
    ln_r: f64,
    threshold: f64,
    check: bool,
    time: u64,
) -> Result<Walk, CodecError> {
    let depth = plan.depth();
    let groups = state.groups();
    let levels = prefix_levels(plan.labeling().slices(), depth);
    let base = groups[0].distance;
    let span = (groups[groups.len() - 1].distance - base + depth + 1) as usize;
    let mut counts = vec![0u128; span];
    let mut communication_symbols = 0;
    let mut received: u32 = 0;
    let mut scratch: Vec<Group> = Vec::with_capacity(span);
    let mut value_at = vec![0.0_f64; span];
    for j in 0..=depth {
        counts.iter_mut().for_each(|c| *c = 0);
        for &(key, len) in &levels[j as usize] {
            let d = groups[(key >> 32) as usize].distance + ((key as u32) ^ received).count_ones();
            counts[(d - base) as usize] += len;
        }
        scratch.clear();
        let d_min = counts.iter().position(|&c| c > 0).expect("empty state") as u32 + base;
        let mut z = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            if c > 0 {
                let d = base + i as u32;
                let w = ((d - d_min) as f64 * ln_r).exp();
                z += c as f64 * w;
                scratch.push(Group { distance: d, count: c, value: w });
            }
        }
        scratch.iter_mut().for_each(|g| g.value /= z);
        let top = scratch[0].value;
        if j > 0 && top >= threshold {
            return Ok(Walk { used: j, stop: true, communication_symbols });
        }
        if j == depth {
            break;
        }
        if top < 0.5 {
            communication_symbols += 1;
        }
        if check {
            let median = median_of(&scratch).value;
            let mut delta = 0.0;
            for g in &scratch {
                value_at[(g.distance - base) as usize] = g.value;
            }
            for &(key, len) in &levels[j as usize + 1] {
                let label = key as u32;
                let d = groups[(key >> 32) as usize].distance + ((label >> 1) ^ received).count_ones();
                let m = len as f64 * value_at[(d - base) as usize];
                if label & 1 == 0 {
                    delta += m;
                } else {
                    delta -= m;
                }
            }
            if !wmad_holds(delta, median) {
                return Err(CodecError::Defect { time: time + j as u64, delta, median });
            }
        }
        received = (received << 1) | y[j as usize] as u32;
    }
    Ok(Walk { used: depth, stop: false, communication_symbols })
}
