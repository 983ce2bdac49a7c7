//! CSV rows.
//!
//! Numbers use the shortest representation that round-trips. Missing intervals are written
//! as `NA`; a mean over no blocks is written as `NaN`.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use anyhow::{Context, Result};
use sparsepm::bounds::BoundsReport;
use sparsepm::montecarlo::SummaryStats;

use crate::config::{ChannelPoint, RunConfig};

pub struct Sink {
    writer: csv::Writer<Box<dyn Write>>,
}

impl Sink {
    pub fn open(path: Option<&Path>) -> Result<Self> {
        let out: Box<dyn Write> = match path {
            Some(p) => Box::new(io::BufWriter::new(File::create(p).with_context(|| format!("field `outputPath`: cannot create {}", p.display()))?)),
            None => Box::new(io::stdout().lock()),
        };
        Ok(Self { writer: csv::Writer::from_writer(out) })
    }

    pub fn header(&mut self, names: &[&str]) -> Result<()> {
        self.writer.write_record(names)?;
        Ok(())
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.writer.write_record(fields)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), num)
}

pub struct SimulateRow<'a> {
    pub k: u32,
    pub point: &'a ChannelPoint,
    pub cfg: &'a RunConfig,
    pub stats: &'a SummaryStats,
    pub bounds: &'a BoundsReport,
}

impl SimulateRow<'_> {
    pub const HEADER: &'static [&'static str] = &[
        "K",
        "p",
        "C",
        "epsilon",
        "rule",
        "feedback_mode",
        "trials",
        "rate",
        "mean_tau",
        "mean_eta",
        "meanD_all",
        "meanD_exsys",
        "meanD_comm",
        "fer",
        "rate_ci95",
        "ns_per_1000_symbols",
        "tau_B",
        "rate_bound_systematic",
        "rate_bound_uniform",
    ];

    pub fn fields(&self) -> Vec<String> {
        let s = self.stats;
        vec![
            self.k.to_string(),
            num(self.point.p),
            num(self.point.capacity),
            num(self.cfg.epsilon),
            self.cfg.rule.to_string(),
            self.cfg.feedback_mode.to_string(),
            s.trials.to_string(),
            num(s.rate),
            num(s.mean_tau),
            num(s.mean_eta),
            num(s.mean_d_all),
            num(s.mean_d_exsys),
            num(s.mean_d_comm),
            num(s.fer),
            opt(s.rate_ci95),
            format!("{:.1}", s.ns_per_1000_symbols),
            num(self.bounds.tau_b),
            num(self.bounds.rate_lower_systematic),
            num(self.bounds.rate_lower_uniform),
        ]
    }
}

pub struct BoundsRow<'a> {
    pub k: u32,
    pub point: &'a ChannelPoint,
    pub epsilon: f64,
    pub report: &'a BoundsReport,
}

impl BoundsRow<'_> {
    pub const HEADER: &'static [&'static str] = &[
        "K",
        "p",
        "C",
        "epsilon",
        "tau_com",
        "tau_conf",
        "tau_prime_com",
        "tau_binomial_com",
        "tau_B",
        "rate_bound_systematic",
        "rate_bound_uniform",
    ];

    pub fn fields(&self) -> Vec<String> {
        let r = self.report;
        vec![
            self.k.to_string(),
            num(self.point.p),
            num(self.point.capacity),
            num(self.epsilon),
            num(r.tau_com),
            num(r.tau_conf),
            num(r.tau_prime_com),
            num(r.tau_binomial_com),
            num(r.tau_b),
            num(r.rate_lower_systematic),
            num(r.rate_lower_uniform),
        ]
    }
}
