//! Single-symbol partitions `S0 / S1` and the rules bounding their imbalance.
//!
//! With `P0` and `P1` the masses of the two sets and `Δ = P0 - P1`:
//!
//! * SED: `0 <= Δ < min S0`
//! * SEAD: `-min S0 < Δ <= min S0`
//! * WMAD: `Δ² <= 0.4 ρ_m` where `ρ_m` is the median member value
//!
//! `min S0` is the smallest member value in `S0`. Label 0 means `S0`.

use thiserror::Error;

use crate::posterior::{median_of, Group, GroupedPosterior, Labeling, PosteriorError, Slice};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PartitionError {
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error("binary partition label {0} is not 0 or 1")]
    BadLabel(u32),
    #[error("singleton partition needs a member with value at least 0.5, top is {0}")]
    NoLeader(f64),
    #[error("constructed partition violates {rule}: delta {delta}, bound {bound}")]
    Violation { rule: &'static str, delta: f64, bound: f64 },
}

/// Two-way split of a state with its masses.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPartition {
    labeling: Labeling,
    p0: f64,
    p1: f64,
    delta: f64,
    min_s0: f64,
    min_s1: f64,
}

impl BinaryPartition {
    pub fn from_labeling(groups: &[Group], labeling: Labeling) -> Result<Self, PartitionError> {
        labeling.validate(groups)?;
        let (mut p0, mut p1) = (0.0, 0.0);
        let (mut min_s0, mut min_s1) = (f64::INFINITY, f64::INFINITY);
        for s in labeling.slices() {
            let v = groups[s.group].value;
            let mass = s.len as f64 * v;
            match s.label {
                0 => {
                    p0 += mass;
                    min_s0 = min_s0.min(v);
                }
                1 => {
                    p1 += mass;
                    min_s1 = min_s1.min(v);
                }
                other => return Err(PartitionError::BadLabel(other)),
            }
        }
        Ok(Self { labeling, p0, p1, delta: p0 - p1, min_s0, min_s1 })
    }

    pub fn labeling(&self) -> &Labeling {
        &self.labeling
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    pub fn p1(&self) -> f64 {
        self.p1
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Smallest member value in `S0`, infinite when `S0` is empty.
    pub fn min_s0(&self) -> f64 {
        self.min_s0
    }

    pub fn min_s1(&self) -> f64 {
        self.min_s1
    }

    /// Labels swapped.
    pub fn flipped(&self) -> Self {
        let slices = self.labeling.slices().iter().map(|s| Slice { label: 1 - s.label, ..*s }).collect();
        Self {
            labeling: Labeling::new(slices),
            p0: self.p1,
            p1: self.p0,
            delta: -self.delta,
            min_s0: self.min_s1,
            min_s1: self.min_s0,
        }
    }
}

pub fn sed_holds(delta: f64, min_s0: f64) -> bool {
    0.0 <= delta && delta < min_s0
}

pub fn sead_holds(delta: f64, min_s0: f64) -> bool {
    -min_s0 < delta && delta <= min_s0
}

pub fn wmad_holds(delta: f64, median: f64) -> bool {
    delta * delta <= 0.4 * median
}

pub fn check_sed(partition: &BinaryPartition) -> bool {
    sed_holds(partition.delta, partition.min_s0)
}

pub fn check_sead(partition: &BinaryPartition) -> bool {
    sead_holds(partition.delta, partition.min_s0)
}

pub fn check_wmad(state: &GroupedPosterior, partition: &BinaryPartition) -> bool {
    wmad_holds(partition.delta, state.median_value().value)
}

/// `S0` = every member before position `taken` of group `group` in descending order.
pub fn prefix_partition(groups: &[Group], group: usize, taken: u128) -> Result<BinaryPartition, PartitionError> {
    let mut slices = Vec::with_capacity(groups.len() + 1);
    for (i, g) in groups.iter().enumerate() {
        if i < group {
            slices.push(Slice { group: i, start: 0, len: g.count, label: 0 });
        } else if i == group && taken > 0 {
            slices.push(Slice { group: i, start: 0, len: taken, label: 0 });
            if taken < g.count {
                slices.push(Slice { group: i, start: taken, len: g.count - taken, label: 1 });
            }
        } else {
            slices.push(Slice { group: i, start: 0, len: g.count, label: 1 });
        }
    }
    BinaryPartition::from_labeling(groups, Labeling::new(slices))
}

/// Largest-first fill of `S0` up to the median member, dropping that member when the
/// overshoot exceeds its value. The result satisfies SEAD and WMAD, up to rounding when
/// `Δ = min S0` exactly.
pub fn build_sead_partition(state: &GroupedPosterior) -> Result<BinaryPartition, PartitionError> {
    sead_partition_of(state.groups())
}

pub fn sead_partition_of(groups: &[Group]) -> Result<BinaryPartition, PartitionError> {
    let m = median_of(groups);
    let passes = |part: &BinaryPartition| check_sead(part) && wmad_holds(part.delta, m.value);
    let through = prefix_partition(groups, m.group, m.taken)?;
    if passes(&through) && m.delta <= m.value {
        return Ok(through);
    }
    let shorter = match (m.group, m.taken) {
        (0, 1) => None,
        (g, 1) => Some((g - 1, groups[g - 1].count)),
        (g, n) => Some((g, n - 1)),
    };
    if let Some((group, taken)) = shorter {
        let part = prefix_partition(groups, group, taken)?;
        if passes(&part) {
            return Ok(part);
        }
    }
    // Equal members can put the split exactly on the boundary `Δ = min S0`, which
    // rounding may overshoot by an ulp.
    if through.delta <= through.min_s0 + 1e-12 && wmad_holds(through.delta, m.value) {
        return Ok(through);
    }
    Err(PartitionError::Violation { rule: "SEAD", delta: through.delta, bound: through.min_s0 })
}

/// Greedy largest-first split placing each member in the lighter set, with the heavier
/// set returned as `S0`. Gives `0 <= Δ <= min S0`; equality can make strict SED
/// unattainable, as for three equal members.
pub fn build_sed_partition(state: &GroupedPosterior) -> Result<BinaryPartition, PartitionError> {
    let groups = state.groups();
    let (mut a, mut b) = (0.0_f64, 0.0_f64);
    let mut slices = Vec::with_capacity(2 * groups.len());
    for (i, g) in groups.iter().enumerate() {
        let v = g.value;
        let mut n = [0u128; 2];
        if v <= 0.0 {
            n[if a <= b { 0 } else { 1 }] = g.count;
        } else {
            let lighter = if a <= b { 0 } else { 1 };
            let gap = (a - b).abs();
            let first = ((gap / v).ceil() as u128).min(g.count);
            n[lighter] += first;
            let mass = first as f64 * v;
            if lighter == 0 {
                a += mass;
            } else {
                b += mass;
            }
            let rest = g.count - first;
            let next = if a <= b { 0 } else { 1 };
            n[next] += rest.div_ceil(2);
            n[1 - next] += rest / 2;
            a += (if next == 0 { rest.div_ceil(2) } else { rest / 2 }) as f64 * v;
            b += (if next == 1 { rest.div_ceil(2) } else { rest / 2 }) as f64 * v;
        }
        if n[0] > 0 {
            slices.push(Slice { group: i, start: 0, len: n[0], label: 0 });
        }
        if n[1] > 0 {
            slices.push(Slice { group: i, start: n[0], len: n[1], label: 1 });
        }
    }
    let part = BinaryPartition::from_labeling(groups, Labeling::new(slices))?;
    Ok(if part.delta < 0.0 { part.flipped() } else { part })
}

/// `S0` is the single leading member; everyone else is in `S1`.
pub fn singleton_partition(state: &GroupedPosterior) -> Result<BinaryPartition, PartitionError> {
    let top = state.top_value();
    if top < 0.5 {
        return Err(PartitionError::NoLeader(top));
    }
    prefix_partition(state.groups(), 0, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_channel;
    use approx::assert_abs_diff_eq;

    fn profile(values: &[(f64, u128)]) -> GroupedPosterior {
        GroupedPosterior::from_profile(values).unwrap()
    }

    #[test]
    fn rule_predicates() {
        assert!(sed_holds(0.0, 0.01));
        assert!(!sed_holds(0.10, 0.05));
        assert!(sed_holds(0.03, 0.05));
        assert!(sead_holds(-0.04, 0.05));
        assert!(!sed_holds(-0.04, 0.05));
        assert!(sead_holds(0.05, 0.05));
        assert!(!sead_holds(-0.05, 0.05));
        assert!(wmad_holds(0.3, 0.25));
        assert!(!wmad_holds(0.4, 0.25));
        assert!(wmad_holds(0.0, 1e-300));
    }

    #[test]
    fn sead_two_members() {
        let ch = make_channel(0.1).unwrap();
        let state = GroupedPosterior::uniform(1, &ch).unwrap();
        let part = build_sead_partition(&state).unwrap();
        assert_eq!(part.delta(), 0.0);
        assert_eq!(part.labeling().slices().len(), 2);
    }

    #[test]
    fn sead_keeps_heaviest_alone_when_that_passes() {
        let state = profile(&[(0.4, 1), (0.3, 2)]);
        let part = build_sead_partition(&state).unwrap();
        assert_abs_diff_eq!(part.delta(), -0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(part.min_s0(), 0.4, epsilon = 1e-12);
        assert!(check_sead(&part));
        assert!(check_wmad(&state, &part));
    }

    #[test]
    fn sead_on_binomial_state() {
        let ch = make_channel(0.1).unwrap();
        let state = GroupedPosterior::systematic_init(3, &ch, 0).unwrap();
        let part = build_sead_partition(&state).unwrap();
        assert!(check_sead(&part));
        assert!(check_wmad(&state, &part));
    }

    #[test]
    fn sed_output_nonnegative() {
        let ch = make_channel(0.2).unwrap();
        for k in 1..12 {
            let state = GroupedPosterior::systematic_init(k, &ch, 0).unwrap();
            let part = build_sed_partition(&state).unwrap();
            assert!(part.delta() >= 0.0);
            assert!(part.delta() <= part.min_s0() + 1e-15);
        }
    }

    #[test]
    fn sed_three_equal_members_is_balanced_but_not_strict() {
        let state = profile(&[(1.0, 3)]);
        let part = build_sed_partition(&state).unwrap();
        assert_abs_diff_eq!(part.delta(), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(part.min_s0(), 1.0 / 3.0, epsilon = 1e-15);
        assert!(!check_sed(&part));
        assert!(check_sead(&part));
    }

    #[test]
    fn singleton_requires_leader() {
        let ch = make_channel(0.1).unwrap();
        let state = GroupedPosterior::systematic_init(8, &ch, 0).unwrap();
        assert!(matches!(singleton_partition(&state), Err(PartitionError::NoLeader(_))));
        let state = GroupedPosterior::systematic_init(1, &ch, 0).unwrap();
        let part = singleton_partition(&state).unwrap();
        assert_abs_diff_eq!(part.p0(), 0.9, epsilon = 1e-15);
    }

    #[test]
    fn flipped_swaps_sets() {
        let state = profile(&[(0.4, 1), (0.3, 2)]);
        let part = build_sead_partition(&state).unwrap();
        let f = part.flipped();
        assert_eq!(f.delta(), -part.delta());
        assert_eq!(f.min_s0(), part.min_s1());
    }
}
