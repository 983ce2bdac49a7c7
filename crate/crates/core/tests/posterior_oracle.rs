//! Grouped posterior against an explicit vector over all `2^K` messages.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsepm::lookahead::plan_block;
use sparsepm::model::make_channel;
use sparsepm::partition::BinaryPartition;
use sparsepm::posterior::{
    binom, locate_message, rank_word, unrank_word, word_to_bits, GroupedPosterior, Labeling, Slice, Word,
};

/// Unnormalized likelihood per word, renormalized on comparison.
struct Dense {
    weight: Vec<f64>,
}

impl Dense {
    fn systematic(k: u32, p: f64, y_sys: Word) -> Self {
        let q = 1.0 - p;
        let weight = (0..1u128 << k)
            .map(|w| {
                let d = (w ^ y_sys).count_ones() as i32;
                p.powi(d) * q.powi(k as i32 - d)
            })
            .collect();
        Self { weight }
    }

    /// Multiplies each word by `p` or `q` per symbol, given the bits it sent.
    fn observe(&mut self, p: f64, sent: impl Fn(usize) -> Vec<u8>, y: &[u8]) {
        let q = 1.0 - p;
        for (w, x) in self.weight.iter_mut().enumerate() {
            for (a, b) in sent(w).iter().zip(y) {
                *x *= if a == b { q } else { p };
            }
        }
    }

    fn normalized(&self) -> Vec<f64> {
        let z: f64 = self.weight.iter().sum();
        self.weight.iter().map(|x| x / z).collect()
    }
}

/// Word of every member, indexed by group and position.
fn members(state: &GroupedPosterior) -> Vec<Vec<Word>> {
    state
        .groups()
        .iter()
        .enumerate()
        .map(|(g, grp)| (0..grp.count).map(|pos| state.member_word(g, pos).unwrap()).collect())
        .collect()
}

fn assert_matches(state: &GroupedPosterior, dense: &Dense, k: u32) {
    let truth = dense.normalized();
    let mut seen = vec![false; 1 << k];
    for (g, words) in members(state).iter().enumerate() {
        let v = state.groups()[g].value;
        for &w in words {
            assert!(!seen[w as usize], "word {w} appears twice");
            seen[w as usize] = true;
            let t = truth[w as usize];
            assert!((v - t).abs() <= 1e-12 * t.max(1e-300) + 1e-300, "word {w}: grouped {v}, dense {t}");
        }
    }
    assert!(seen.iter().all(|&s| s), "some word is missing");
}

fn random_labeling(state: &GroupedPosterior, rng: &mut ChaCha8Rng) -> Labeling {
    let mut slices = Vec::new();
    for (g, grp) in state.groups().iter().enumerate() {
        let mut start = 0;
        while start < grp.count {
            let len = rng.random_range(1..=grp.count - start);
            slices.push(Slice { group: g, start, len, label: rng.random_range(0..2) });
            start += len;
        }
    }
    Labeling::new(slices)
}

fn run_sequential(k: u32, p: f64, seed: u64, steps: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = make_channel(p).unwrap();
    let y_sys: Word = rng.random_range(0..1u128 << k);
    let theta: Word = rng.random_range(0..1u128 << k);
    let mut state = GroupedPosterior::systematic_init(k, &ch, y_sys).unwrap();
    let mut dense = Dense::systematic(k, p, y_sys);
    let mut loc = locate_message(theta, y_sys);
    assert_matches(&state, &dense, k);
    for _ in 0..steps {
        let part = BinaryPartition::from_labeling(state.groups(), random_labeling(&state, &mut rng)).unwrap();
        let label: Vec<u8> = {
            let mut out = vec![0u8; 1 << k];
            for (g, words) in members(&state).iter().enumerate() {
                for (pos, &w) in words.iter().enumerate() {
                    out[w as usize] = part.labeling().label_of(g, pos as u128).unwrap() as u8;
                }
            }
            out
        };
        let y = rng.random_range(0..2u8);
        state = state.update_sequential(&part, y).unwrap();
        dense.observe(p, |w| vec![label[w]], &[y]);
        loc.advance(&state).unwrap();
        assert_matches(&state, &dense, k);
        let g = loc.group(&state).unwrap();
        assert_eq!(state.member_word(g, loc.position).unwrap(), theta);
    }
}

#[test]
fn sequential_updates_match_dense_vector() {
    for (k, seed) in [(1, 1), (2, 2), (5, 3), (8, 4), (10, 5)] {
        run_sequential(k, 0.13, seed, 12);
    }
}

#[test]
fn block_updates_match_dense_vector() {
    let p = 0.08;
    let ch = make_channel(p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in [4, 7, 10] {
        let y_sys: Word = rng.random_range(0..1u128 << k);
        let mut state = GroupedPosterior::systematic_init(k, &ch, y_sys).unwrap();
        let mut dense = Dense::systematic(k, p, y_sys);
        for _ in 0..8 {
            if state.is_confirming() {
                break;
            }
            let plan = plan_block(&state, &ch, 6).unwrap();
            let depth = plan.depth();
            let used = rng.random_range(1..=depth) as usize;
            let y: Vec<u8> = (0..used).map(|_| rng.random_range(0..2u8)).collect();
            let mut sent = vec![Vec::new(); 1 << k];
            for (g, words) in members(&state).iter().enumerate() {
                for (pos, &w) in words.iter().enumerate() {
                    let label = plan.label_of(g, pos as u128).unwrap();
                    sent[w as usize] = word_to_bits(label as Word, depth);
                }
            }
            state = state.update_block(&plan, &y).unwrap();
            dense.observe(p, |w| sent[w].clone(), &y);
            assert_matches(&state, &dense, k);
        }
    }
}

proptest! {
    #[test]
    fn rank_round_trip(k in 1u32..=127, raw in any::<u128>()) {
        let word = if k == 128 { raw } else { raw & ((1u128 << k) - 1) };
        let (class, ordinal) = rank_word(word);
        prop_assert_eq!(class, word.count_ones());
        prop_assert!(ordinal < binom(k, class));
        prop_assert_eq!(unrank_word(k, class, ordinal).unwrap(), word);
    }

    #[test]
    fn rank_orders_equal_weight_words(a in any::<u16>(), b in any::<u16>()) {
        let (ca, ra) = rank_word(a as Word);
        let (cb, rb) = rank_word(b as Word);
        if ca == cb {
            prop_assert_eq!(a.cmp(&b), ra.cmp(&rb));
        }
    }

    #[test]
    fn sequential_matches_dense(k in 1u32..=7, p in 0.01f64..0.45, seed in any::<u64>()) {
        run_sequential(k, p, seed, 6);
    }

    #[test]
    fn mass_is_conserved(k in 1u32..=60, p in 0.01f64..0.45, seed in any::<u64>()) {
        let ch = make_channel(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = GroupedPosterior::systematic_init(k, &ch, 0).unwrap();
        for _ in 0..5 {
            let part = BinaryPartition::from_labeling(state.groups(), random_labeling(&state, &mut rng)).unwrap();
            state = state.update_sequential(&part, rng.random_range(0..2)).unwrap();
            prop_assert!((state.total_mass() - 1.0).abs() < 1e-12);
            prop_assert_eq!(state.total_count(), 1u128 << k);
            prop_assert!(state.groups().windows(2).all(|w| w[0].distance < w[1].distance && w[0].value > w[1].value));
        }
    }
}
