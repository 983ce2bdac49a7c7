//! Closed-form bounds on the expected number of channel uses.
//!
//! With `M = 2^K` messages and stopping threshold `1 - ε`, the expected duration splits
//! into a communication part (until some message holds half the posterior) and a
//! confirmation part. The bounds below use `Y = (1 - (ε/(1-ε)) 2^-C2) / (1 - 2^-C2)` and
//! `2^-C2 = p/q`.

use statrs::function::gamma::ln_gamma;

use crate::model::ChannelParams;

/// All bounds for one `(K, p, ε)` point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsReport {
    pub tau_com: f64,
    pub tau_conf: f64,
    pub tau_prime_com: f64,
    pub tau_binomial_com: f64,
    /// `K + tau_binomial_com + tau_conf`.
    pub tau_b: f64,
    /// `K / (tau_prime_com + tau_conf)`.
    pub rate_lower_uniform: f64,
    /// `K / tau_b`.
    pub rate_lower_systematic: f64,
}

/// Neumaier compensated sum.
#[derive(Debug, Default, Clone, Copy)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// `log2(2^K - 1)` without forming `2^K`.
pub fn log2_messages_minus_one(k: u32) -> f64 {
    k as f64 + (-(-(k as f64)).exp2()).ln_1p() / std::f64::consts::LN_2
}

fn tail_factor(channel: &ChannelParams, eps: f64) -> f64 {
    let s = channel.p() / channel.q();
    (1.0 - eps / (1.0 - eps) * s) / (1.0 - s)
}

/// `log2(2q) / (q C)`, the per-step cost of the degraded process.
fn degraded_cost(channel: &ChannelParams) -> f64 {
    (2.0 * channel.q()).log2() / (channel.q() * channel.capacity())
}

pub fn tau_com(k: u32, channel: &ChannelParams, eps: f64) -> f64 {
    let c = channel.capacity();
    let ratio = channel.c2() / c;
    let s = channel.p() / channel.q();
    log2_messages_minus_one(k) / c + ratio + s * ratio * tail_factor(channel, eps)
}

pub fn tau_conf(channel: &ChannelParams, eps: f64) -> f64 {
    let steps = (((1.0 - eps) / eps).log2() / channel.c2()).ceil();
    let s = channel.p() / channel.q();
    channel.c2() / channel.c1() * (steps - s * tail_factor(channel, eps))
}

pub fn tau_prime_com(k: u32, channel: &ChannelParams, eps: f64) -> f64 {
    let s = channel.p() / channel.q();
    log2_messages_minus_one(k) / channel.capacity() + degraded_cost(channel) * (1.0 + s * tail_factor(channel, eps))
}

/// Communication bound averaged over the posterior left by the systematic symbols: the
/// decoder starts from the binomial distribution instead of the uniform one.
pub fn tau_binomial_com(k: u32, channel: &ChannelParams, eps: f64) -> f64 {
    let c = channel.capacity();
    let (lp, lq) = (channel.p().ln(), channel.q().ln());
    let cost = degraded_cost(channel);
    let lnk = ln_gamma(k as f64 + 1.0);
    let mut acc = Compensated::default();
    for h in 0..=k {
        let ln_rho = h as f64 * lp + (k - h) as f64 * lq;
        let rho = ln_rho.exp();
        if rho >= 0.5 {
            continue;
        }
        let ln_binom = lnk - ln_gamma(h as f64 + 1.0) - ln_gamma((k - h) as f64 + 1.0);
        let weight = (ln_binom + ln_rho).exp();
        let llr = ((-rho).ln_1p() - ln_rho) / std::f64::consts::LN_2;
        acc.add((llr / c + cost) * weight);
    }
    let s = channel.p() / channel.q();
    acc.add(cost * s * tail_factor(channel, eps));
    acc.value()
}

pub fn tau_b(k: u32, channel: &ChannelParams, eps: f64) -> f64 {
    k as f64 + tau_binomial_com(k, channel, eps) + tau_conf(channel, eps)
}

pub fn bounds_report(k: u32, channel: &ChannelParams, eps: f64) -> BoundsReport {
    let tau_com = tau_com(k, channel, eps);
    let tau_conf = tau_conf(channel, eps);
    let tau_prime_com = tau_prime_com(k, channel, eps);
    let tau_binomial_com = tau_binomial_com(k, channel, eps);
    let tau_b = k as f64 + tau_binomial_com + tau_conf;
    BoundsReport {
        tau_com,
        tau_conf,
        tau_prime_com,
        tau_binomial_com,
        tau_b,
        rate_lower_uniform: k as f64 / (tau_prime_com + tau_conf),
        rate_lower_systematic: k as f64 / tau_b,
    }
}
