//! Training losses and the JPE/APE evaluation metrics.
//!
//! Loss inputs are `(persons, J, 3, frames)` tensors. Metrics work on plain
//! values and never enter the autodiff graph.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_hist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            lambda_hist: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_hist", self.lambda_hist),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} = {v} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() || pred.ndim() != 4 || pred.dim(2) != 3 {
        return Err(shape_err(
            op,
            format!(
                "pred {:?} and gt {:?} must share a (persons, joints, 3, frames) shape",
                pred.shape(),
                gt.shape()
            ),
        ));
    }
    Ok(())
}

/// `λ·mean_hist ‖Δ‖² + mean_future ‖Δ‖²`, means taken over persons, joints
/// and the frames of each window.
pub fn spatial_loss(pred: &Tensor, gt: &Tensor, history: usize, w: &LossWeights) -> Result<Tensor> {
    check_pair("spatial_loss", pred, gt)?;
    let total = pred.dim(3);
    if history == 0 || history >= total {
        return Err(shape_err(
            "spatial_loss",
            format!("history {history} must lie in 1..{total}"),
        ));
    }
    let sq = pred.sub(gt)?.square()?.sum_axis(2)?;
    let hist = sq.slice(2, 0, history)?.mean_all()?;
    let fut = sq.slice(2, history, total)?.mean_all()?;
    hist.scale(w.lambda_hist)?.add(&fut)
}

/// Mean squared difference of first-order frame differences (kernel `[−1, 1]`).
pub fn temporal_consistency_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_pair("temporal_loss", pred, gt)?;
    let total = pred.dim(3);
    if total < 2 {
        return Err(shape_err(
            "temporal_loss",
            format!("needs at least 2 frames, got {total}"),
        ));
    }
    let e = pred.sub(gt)?;
    let v = e.slice(3, 1, total)?.sub(&e.slice(3, 0, total - 1)?)?;
    v.square()?.mean_all()
}

pub fn total_loss(pred: &Tensor, gt: &Tensor, history: usize, w: &LossWeights) -> Result<Tensor> {
    let ls = spatial_loss(pred, gt, history, w)?;
    let lt = temporal_consistency_loss(pred, gt)?;
    ls.scale(w.alpha)?.add(&lt.scale(w.beta)?)
}

fn check_frame(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() || pred.ndim() != 3 || pred.dim(2) != 3 {
        return Err(shape_err(
            op,
            format!(
                "pred {:?} and gt {:?} must share a (persons, joints, 3) shape",
                pred.shape(),
                gt.shape()
            ),
        ));
    }
    Ok(())
}

fn mean_distance(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() / 3;
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = p
        .chunks(3)
        .zip(g.chunks(3))
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .sum();
    sum / n as f64
}

fn root_aligned(x: &[f64], joints: usize, root: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for person in out.chunks_mut(joints * 3) {
        let r = [person[root * 3], person[root * 3 + 1], person[root * 3 + 2]];
        for j in person.chunks_mut(3) {
            for c in 0..3 {
                j[c] -= r[c];
            }
        }
    }
    out
}

/// Mean Euclidean joint error over persons and joints of one frame.
pub fn jpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_frame("jpe", pred, gt)?;
    Ok(mean_distance(pred.data(), gt.data()))
}

/// JPE after subtracting each person's root joint in both poses.
pub fn ape(pred: &Tensor, gt: &Tensor, root: usize) -> Result<f64> {
    check_frame("ape", pred, gt)?;
    let joints = pred.dim(1);
    if root >= joints {
        return Err(Error::Invalid(format!(
            "root joint {root} out of range for {joints} joints"
        )));
    }
    Ok(mean_distance(
        &root_aligned(pred.data(), joints, root),
        &root_aligned(gt.data(), joints, root),
    ))
}

/// Per-frame JPE/APE sums over any number of prediction windows.
#[derive(Clone, Debug)]
pub struct HorizonAccumulator {
    frames: usize,
    root: usize,
    jpe_sum: Vec<f64>,
    ape_sum: Vec<f64>,
    count: usize,
}

impl HorizonAccumulator {
    pub fn new(frames: usize, root: usize) -> Self {
        HorizonAccumulator {
            frames,
            root,
            jpe_sum: vec![0.0; frames],
            ape_sum: vec![0.0; frames],
            count: 0,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Adds `(persons, J, 3, frames)` future windows.
    pub fn add(&mut self, pred: &Tensor, gt: &Tensor) -> Result<()> {
        check_pair("horizon metrics", pred, gt)?;
        let (m, j, f) = (pred.dim(0), pred.dim(1), pred.dim(3));
        if f != self.frames {
            return Err(shape_err(
                "horizon metrics",
                format!("window has {f} frames, expected {}", self.frames),
            ));
        }
        if self.root >= j {
            return Err(Error::Invalid(format!(
                "root joint {} out of range for {j} joints",
                self.root
            )));
        }
        let frame = |x: &Tensor, t: usize| -> Vec<f64> { (0..m * j * 3).map(|i| x.data()[i * f + t]).collect() };
        for t in 0..f {
            let (p, g) = (frame(pred, t), frame(gt, t));
            self.jpe_sum[t] += mean_distance(&p, &g) * (m * j) as f64;
            self.ape_sum[t] +=
                mean_distance(&root_aligned(&p, j, self.root), &root_aligned(&g, j, self.root)) * (m * j) as f64;
        }
        self.count += m * j;
        Ok(())
    }

    /// Metrics at each horizon (seconds) and averaged over every frame.
    pub fn report(&self, fps: f64, horizons: &[f64]) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::Invalid("no windows accumulated".into()));
        }
        let n = self.count as f64;
        let mut jpe_at = Vec::with_capacity(horizons.len());
        let mut ape_at = Vec::with_capacity(horizons.len());
        for &h in horizons {
            let idx = horizon_frame(h, fps, self.frames)?;
            jpe_at.push((h, self.jpe_sum[idx - 1] / n));
            ape_at.push((h, self.ape_sum[idx - 1] / n));
        }
        let avg = |s: &[f64]| s.iter().sum::<f64>() / (n * self.frames as f64);
        Ok(MetricReport {
            jpe_at,
            ape_at,
            jpe_avg: avg(&self.jpe_sum),
            ape_avg: avg(&self.ape_sum),
        })
    }
}

/// 1-based frame index of `seconds` within a `frames`-long prediction window.
pub fn horizon_frame(seconds: f64, fps: f64, frames: usize) -> Result<usize> {
    let exact = seconds * fps;
    let idx = exact.round();
    if !(fps > 0.0) || (exact - idx).abs() > 1e-6 || idx < 1.0 || idx > frames as f64 {
        return Err(Error::Invalid(format!(
            "horizon {seconds}s at {fps} fps is not a frame in 1..={frames}"
        )));
    }
    Ok(idx as usize)
}

/// JPE/APE over `(persons, J, 3, frames)` future windows at the given horizons.
pub fn report_at_horizons(pred: &Tensor, gt: &Tensor, fps: f64, horizons: &[f64], root: usize) -> Result<MetricReport> {
    check_pair("report_at_horizons", pred, gt)?;
    let mut acc = HorizonAccumulator::new(pred.dim(3), root);
    acc.add(pred, gt)?;
    acc.report(fps, horizons)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `(seconds, value)` pairs in the requested order.
    pub jpe_at: Vec<(f64, f64)>,
    pub ape_at: Vec<(f64, f64)>,
    pub jpe_avg: f64,
    pub ape_avg: f64,
}

impl MetricReport {
    /// Comma-separated table: one header row, then JPE and APE rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for (h, _) in &self.jpe_at {
            write!(s, ",{h}s").unwrap();
        }
        s.push_str(",avg\n");
        for (name, row, avg) in [("JPE", &self.jpe_at, self.jpe_avg), ("APE", &self.ape_at, self.ape_avg)] {
            s.push_str(name);
            for (_, v) in row {
                write!(s, ",{v:.3}").unwrap();
            }
            writeln!(s, ",{avg:.3}").unwrap();
        }
        s
    }
}
