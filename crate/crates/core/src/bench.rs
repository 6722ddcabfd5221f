//! Time-to-first-token scaling: cached module reuse against full prefill.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{encode_schema, ModuleStore, Tier, TierCapacities};
use crate::engine::{serve, EngineError, ServeRequest};
use crate::layout::plan_layout;
use crate::model::{flops_decode_step, flops_prefill, ByteTokenizer, Model};
use crate::pml::{parse_prompt, parse_schema};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("length {len} needs positions up to {len}, beyond max_position {max}")]
    PositionOutOfRange { len: usize, max: usize },
    #[error("at least 3 trials are required, got {0}")]
    TooFewTrials(usize),
    #[error("no lengths given")]
    NoLengths,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub seq_len: usize,
    pub ttft_baseline_us: f64,
    pub ttft_cached_us: f64,
    pub copy_us: f64,
    pub speedup: f64,
    pub flops_baseline: u64,
    pub flops_cached_model: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub baseline_exp: f64,
    pub cached_exp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub tier: Tier,
    pub trials: usize,
    pub rows: Vec<ScalingRow>,
    /// Log-log slopes over the largest half of the lengths.
    pub exponents: Exponents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub trials: usize,
    pub tier: Tier,
    /// Run the trials of each length on separate threads.
    pub parallel: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            trials: 5,
            tier: Tier::Fast,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!(
                "unknown report format `{other}` (expected csv or json)"
            )),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Json => "json",
        })
    }
}

/// Deterministic filler text of exactly `n` single-byte tokens.
pub fn filler_text(n: usize) -> String {
    const WORDS: [&str; 12] = [
        "the",
        "cached",
        "module",
        "holds",
        "attention",
        "states",
        "for",
        "a",
        "long",
        "shared",
        "document",
        "segment",
    ];
    let mut s = String::with_capacity(n + 16);
    let mut i = 0;
    while s.len() < n {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(WORDS[i % WORDS.len()]);
        i += 1;
    }
    s.truncate(n);
    s
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

struct Sample {
    baseline: f64,
    cached: f64,
    copy: f64,
}

pub fn run_scaling(
    model: &Model,
    lengths: &[usize],
    trials: usize,
    tier: Tier,
) -> Result<ScalingReport, BenchError> {
    run_scaling_with(
        model,
        lengths,
        BenchOptions {
            trials,
            tier,
            parallel: false,
        },
    )
}

/// For each length, serves a prompt made of one cached module of that many
/// tokens plus a one-token suffix, with and without the cache, and records
/// the median time to first token. One warm-up run per length is discarded.
pub fn run_scaling_with(
    model: &Model,
    lengths: &[usize],
    opts: BenchOptions,
) -> Result<ScalingReport, BenchError> {
    if opts.trials < 3 {
        return Err(BenchError::TooFewTrials(opts.trials));
    }
    if lengths.is_empty() {
        return Err(BenchError::NoLengths);
    }
    let max = model.config().max_position;
    if let Some(&len) = lengths.iter().find(|&&n| n + 1 > max) {
        return Err(BenchError::PositionOutOfRange { len, max });
    }
    let mut lengths = lengths.to_vec();
    lengths.sort_unstable();
    lengths.dedup();

    let hidden = model.config().hidden as u64;
    let mut rows = Vec::with_capacity(lengths.len());
    for &n in &lengths {
        let src = format!(
            r#"<schema name="bench"><module name="context">{}</module></schema>"#,
            filler_text(n)
        );
        let schema = parse_schema(&src).expect("generated schema is well formed");
        let plan = plan_layout(&schema, &ByteTokenizer).expect("generated schema lays out");
        let store = ModuleStore::new(model.config(), TierCapacities::unbounded());
        encode_schema(model, &schema, &plan, &store, opts.tier).map_err(EngineError::from)?;
        let prompt =
            parse_prompt(r#"<prompt schema="bench"><context/>?</prompt>"#).expect("fixed prompt");
        let cached_req = ServeRequest::new(prompt, 1);
        let base_req = cached_req.clone().baseline();

        let trial = || -> Result<Sample, EngineError> {
            let c = serve(&cached_req, &schema, &plan, &store, model)?;
            let b = serve(&base_req, &schema, &plan, &store, model)?;
            Ok(Sample {
                baseline: b.timings.ttft_us,
                cached: c.timings.ttft_us,
                copy: c.timings.copy_us,
            })
        };
        trial()?;
        let samples: Vec<Sample> = if opts.parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..opts.trials).map(|_| s.spawn(trial)).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("trial thread panicked"))
                    .collect::<Result<_, _>>()
            })?
        } else {
            (0..opts.trials)
                .map(|_| trial())
                .collect::<Result<_, _>>()?
        };
        let mut b: Vec<f64> = samples.iter().map(|s| s.baseline).collect();
        let mut c: Vec<f64> = samples.iter().map(|s| s.cached).collect();
        let mut k: Vec<f64> = samples.iter().map(|s| s.copy).collect();
        let (tb, tc, tk) = (median(&mut b), median(&mut c), median(&mut k));
        rows.push(ScalingRow {
            seq_len: n,
            ttft_baseline_us: tb,
            ttft_cached_us: tc,
            copy_us: tk,
            speedup: tb / tc,
            flops_baseline: flops_prefill(n as u64, hidden),
            flops_cached_model: flops_decode_step(n as u64, hidden),
        });
    }

    let tail = &rows[rows.len() / 2..];
    let xs: Vec<f64> = tail.iter().map(|r| r.seq_len as f64).collect();
    let exponents = Exponents {
        baseline_exp: fit_exponent(
            &xs,
            &tail.iter().map(|r| r.ttft_baseline_us).collect::<Vec<_>>(),
        ),
        cached_exp: fit_exponent(
            &xs,
            &tail.iter().map(|r| r.ttft_cached_us).collect::<Vec<_>>(),
        ),
    };
    Ok(ScalingReport {
        tier: opts.tier,
        trials: opts.trials,
        rows,
        exponents,
    })
}

impl ScalingReport {
    pub fn to_csv(&self) -> Result<String, BenchError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn render(&self, format: ReportFormat) -> Result<String, BenchError> {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => Ok(self.to_json()),
        }
    }
}

pub fn export_report(
    report: &ScalingReport,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<(), BenchError> {
    std::fs::write(path, report.render(format)?)?;
    Ok(())
}
