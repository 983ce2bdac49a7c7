//! Run configuration from flags and an optional TOML file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use sparsepm::codec::{FeedbackMode, Rule, DEFAULT_EPSILON};
use sparsepm::lookahead::{DEFAULT_DMAX, MAX_DEPTH};
use sparsepm::model::{capacity, make_channel, solve_p_for_capacity, ChannelParams};
use sparsepm::posterior::MAX_MESSAGE_BITS;

pub const DEFAULT_SIM_TRIALS: u64 = 10_000;
pub const DEFAULT_VERIFY_TRIALS: u64 = 100_000;
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Bounds,
    Verify,
}

impl Command {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "simulate" => Command::Simulate,
            "bounds" => Command::Bounds,
            "verify" => Command::Verify,
            other => bail!("field `command`: unknown command `{other}` (simulate, bounds, verify)"),
        })
    }
}

/// Raw settings before validation. Field names match the config file keys.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub command: Option<String>,
    #[serde(rename = "K")]
    pub k: Option<ListValue>,
    pub p: Option<ListValue>,
    #[serde(rename = "C")]
    pub c: Option<ListValue>,
    pub epsilon: Option<f64>,
    pub trials: Option<u64>,
    #[serde(rename = "masterSeed")]
    pub master_seed: Option<u64>,
    #[serde(rename = "Dmax")]
    pub dmax: Option<u32>,
    pub rule: Option<String>,
    #[serde(rename = "feedbackMode")]
    pub feedback_mode: Option<String>,
    #[serde(rename = "outputPath")]
    pub output_path: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// A list written as a TOML array, a single number, or a list string such as `"1..8,16"`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ListValue {
    Text(String),
    Numbers(Vec<f64>),
    Number(f64),
}

impl ListValue {
    fn floats(&self, field: &str) -> Result<Vec<f64>> {
        match self {
            ListValue::Text(s) => parse_float_list(s).with_context(|| format!("field `{field}`")),
            ListValue::Numbers(v) => Ok(v.clone()),
            ListValue::Number(x) => Ok(vec![*x]),
        }
    }

    fn integers(&self, field: &str) -> Result<Vec<u32>> {
        let check = |x: f64| -> Result<u32> {
            if x.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&x) {
                bail!("field `{field}`: {x} is not a nonnegative integer");
            }
            Ok(x as u32)
        };
        match self {
            ListValue::Text(s) => parse_int_list(s).with_context(|| format!("field `{field}`")),
            ListValue::Numbers(v) => v.iter().map(|&x| check(x)).collect(),
            ListValue::Number(x) => Ok(vec![check(*x)?]),
        }
    }
}

impl RawConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fields set in `over` replace those in `self`. Giving either channel list drops the other.
    pub fn overlay(mut self, over: RawConfig) -> Self {
        if over.p.is_some() || over.c.is_some() {
            self.p = over.p;
            self.c = over.c;
        }
        macro_rules! take {
            ($($f:ident),*) => { $( if over.$f.is_some() { self.$f = over.$f; } )* };
        }
        take!(command, k, epsilon, trials, master_seed, dmax, rule, feedback_mode, output_path, threads);
        self
    }
}

/// Channel axis of a sweep: given directly or through a target capacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelPoint {
    pub p: f64,
    pub capacity: f64,
    pub channel: ChannelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub k: Vec<u32>,
    pub channels: Vec<ChannelPoint>,
    pub epsilon: f64,
    pub trials: u64,
    pub master_seed: u64,
    pub dmax: u32,
    pub rule: Rule,
    pub feedback_mode: FeedbackMode,
    pub output_path: Option<PathBuf>,
    pub threads: Option<usize>,
}

pub fn parse_rule(s: &str) -> Result<Rule> {
    Ok(match s {
        "sed" => Rule::Sed,
        "sead" => Rule::Sead,
        "wmad-lookahead" => Rule::WmadLookahead,
        other => bail!("field `rule`: unknown rule `{other}` (sed, sead, wmad-lookahead)"),
    })
}

pub fn parse_feedback(s: &str) -> Result<FeedbackMode> {
    Ok(match s {
        "dense" => FeedbackMode::Dense,
        "sparse" => FeedbackMode::Sparse,
        other => bail!("field `feedbackMode`: unknown mode `{other}` (dense, sparse)"),
    })
}

impl RunConfig {
    pub fn resolve(raw: RawConfig) -> Result<Self> {
        let command = Command::parse(raw.command.as_deref().context("field `command`: missing")?)?;
        let needs_sweep = command != Command::Verify;

        let k = match &raw.k {
            Some(v) => v.integers("K")?,
            None if needs_sweep => bail!("field `K`: missing"),
            None => Vec::new(),
        };
        if needs_sweep && k.is_empty() {
            bail!("field `K`: list is empty");
        }
        let k_max = if command == Command::Simulate { MAX_MESSAGE_BITS } else { u32::MAX };
        if let Some(&bad) = k.iter().find(|&&k| k == 0 || k > k_max) {
            bail!("field `K`: {bad} outside [1, {k_max}]");
        }

        let channels = match (&raw.p, &raw.c) {
            (Some(_), Some(_)) => bail!("fields `p` and `C`: give exactly one"),
            (Some(p), None) => channel_list(p.floats("p")?, "p", |p| Ok(p))?,
            (None, Some(c)) => channel_list(c.floats("C")?, "C", |c| {
                if !(c > 0.0 && c < 1.0) {
                    bail!("{c} outside (0, 1)");
                }
                Ok(solve_p_for_capacity(c)?)
            })?,
            (None, None) if needs_sweep => bail!("fields `p` and `C`: give exactly one"),
            (None, None) => Vec::new(),
        };

        let epsilon = raw.epsilon.unwrap_or(DEFAULT_EPSILON);
        if !(epsilon > 0.0 && epsilon < 0.5) {
            bail!("field `epsilon`: {epsilon} outside (0, 0.5)");
        }
        let default_trials = if command == Command::Verify { DEFAULT_VERIFY_TRIALS } else { DEFAULT_SIM_TRIALS };
        let trials = raw.trials.unwrap_or(default_trials);
        if trials == 0 {
            bail!("field `trials`: must be at least 1");
        }
        let dmax = raw.dmax.unwrap_or(DEFAULT_DMAX);
        if dmax == 0 || dmax > MAX_DEPTH {
            bail!("field `Dmax`: {dmax} outside [1, {MAX_DEPTH}]");
        }
        if raw.threads == Some(0) {
            bail!("field `threads`: must be at least 1");
        }
        Ok(Self {
            command,
            k,
            channels,
            epsilon,
            trials,
            master_seed: raw.master_seed.unwrap_or(DEFAULT_SEED),
            dmax,
            rule: parse_rule(raw.rule.as_deref().unwrap_or("wmad-lookahead"))?,
            feedback_mode: parse_feedback(raw.feedback_mode.as_deref().unwrap_or("sparse"))?,
            output_path: raw.output_path,
            threads: raw.threads,
        })
    }
}

fn channel_list(values: Vec<f64>, field: &str, to_p: impl Fn(f64) -> Result<f64>) -> Result<Vec<ChannelPoint>> {
    if values.is_empty() {
        bail!("field `{field}`: list is empty");
    }
    values
        .into_iter()
        .map(|x| {
            let p = to_p(x).with_context(|| format!("field `{field}`"))?;
            let channel = make_channel(p).with_context(|| format!("field `{field}`"))?;
            Ok(ChannelPoint { p, capacity: capacity(p), channel })
        })
        .collect()
}

/// Comma-separated integers and inclusive ranges `a..b`.
pub fn parse_int_list(s: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if let Some((a, b)) = item.split_once("..") {
            let a: u32 = a.trim().parse().with_context(|| format!("bad range start in `{item}`"))?;
            let b: u32 = b.trim().parse().with_context(|| format!("bad range end in `{item}`"))?;
            if a > b {
                bail!("empty range `{item}`");
            }
            out.extend(a..=b);
        } else {
            out.push(item.parse().with_context(|| format!("bad integer `{item}`"))?);
        }
    }
    Ok(out)
}

/// Comma-separated numbers. `a,b,...,z` expands to the progression from `a` in steps of
/// `b - a` up to `z`.
pub fn parse_float_list(s: &str) -> Result<Vec<f64>> {
    let items: Vec<&str> = s.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
    let number = |t: &str| -> Result<f64> { t.parse::<f64>().with_context(|| format!("bad number `{t}`")) };
    let Some(dots) = items.iter().position(|&t| t == "...") else {
        return items.iter().map(|t| number(t)).collect();
    };
    if dots != 2 || items.len() != 4 {
        bail!("progression must be written `a,b,...,z`");
    }
    let (a, b, z) = (number(items[0])?, number(items[1])?, number(items[3])?);
    let step = b - a;
    if !(step > 0.0) || z < a {
        bail!("progression `{s}` does not increase to its end");
    }
    let n = ((z - a) / step + 1e-9).floor() as u64;
    // Rounded to 12 digits so `0.25,0.3,...` gives 0.35 rather than 0.35000000000000003.
    let round = |x: f64| (x * 1e12).round() / 1e12;
    Ok((0..=n).map(|i| round(a + i as f64 * step)).collect())
}
