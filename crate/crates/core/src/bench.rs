//! Wall-clock scaling of the bidirectional block with sequence length.
//!
//! Forward timings run without recording a graph, as inference does; the
//! training timings record it and run the backward sweep.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{BiBlock, ScanOptions, SsmConfig};
use crate::tensor::{backward, no_grad, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub channels: usize,
    pub batch: usize,
    pub repeats: usize,
    pub seed: u64,
    pub ssm: SsmConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![32, 64, 128, 256],
            channels: 16,
            batch: 4,
            repeats: 9,
            seed: 0,
            ssm: SsmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    pub forward_min_ms: f64,
    pub forward_median_ms: f64,
    pub train_min_ms: f64,
    pub train_median_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Log-log slope of the fastest forward time against length.
    pub forward_exponent: f64,
    /// Log-log slope of the fastest forward+backward time against length.
    pub train_exponent: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("slope fit needs at least two paired points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Invalid("slope fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("slope fit needs distinct lengths".into()));
    }
    Ok(sxy / sxx)
}

fn time_ms(f: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 || cfg.channels == 0 || cfg.batch == 0 || cfg.lengths.len() < 2 {
        return Err(Error::Config(
            "bench needs repeats, channels and batch of at least 1 and two or more lengths".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let block = BiBlock::new(cfg.channels, cfg.ssm, ScanOptions::default(), &mut rng);
    let mut rows = Vec::with_capacity(cfg.lengths.len());
    for &len in &cfg.lengths {
        let x = Tensor::randn(&[cfg.batch, len, cfg.channels], 1.0, &mut rng);
        let w = Tensor::randn(&[cfg.batch, len, cfg.channels], 1.0, &mut rng);
        // one untimed warm-up pass
        backward(&block.forward(&x)?.mul(&w)?.sum_all()?)?;
        let mut fwd = Vec::with_capacity(cfg.repeats);
        let mut train = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            fwd.push(time_ms(&mut || no_grad(|| block.forward(&x).map(|_| ())))?);
            train.push(time_ms(&mut || {
                backward(&block.forward(&x)?.mul(&w)?.sum_all()?)?;
                Ok(())
            })?);
        }
        rows.push(BenchRow {
            length: len,
            forward_min_ms: fwd.iter().cloned().fold(f64::INFINITY, f64::min),
            forward_median_ms: median(&mut fwd),
            train_min_ms: train.iter().cloned().fold(f64::INFINITY, f64::min),
            train_median_ms: median(&mut train),
        });
    }
    let lengths: Vec<f64> = rows.iter().map(|r| r.length as f64).collect();
    // best-of-N is the least noisy estimate of the cost itself
    let fm: Vec<f64> = rows.iter().map(|r| r.forward_min_ms).collect();
    let tm: Vec<f64> = rows.iter().map(|r| r.train_min_ms).collect();
    Ok(BenchReport {
        forward_exponent: loglog_slope(&lengths, &fm)?,
        train_exponent: loglog_slope(&lengths, &tm)?,
        rows,
    })
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("length,forward_min_ms,forward_median_ms,train_min_ms,train_median_ms\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{:.3},{:.3},{:.3},{:.3}",
                r.length, r.forward_min_ms, r.forward_median_ms, r.train_min_ms, r.train_median_ms
            )
            .unwrap();
        }
        writeln!(s, "# forward exponent {:.3}", self.forward_exponent).unwrap();
        writeln!(s, "# forward+backward exponent {:.3}", self.train_exponent).unwrap();
        s
    }
}
