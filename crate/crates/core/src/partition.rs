//! Small-loss sample partitioning.
//!
//! A two-component univariate Gaussian mixture is fitted to per-sample losses;
//! the component with the smaller mean models clean samples. A sample enters
//! the consensus set only if its clean posterior exceeded the threshold in each
//! of the last `t_filter` epochs.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::percentile;

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    /// Index of the lower-mean component.
    pub clean_component: usize,
    /// Set when every loss was identical; all samples are then clean.
    pub degenerate: bool,
}

impl GmmModel {
    fn log_joint(&self, k: usize, x: f64) -> f64 {
        if self.weights[k] <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let v = self.variances[k];
        let r = x - self.means[k];
        self.weights[k].ln() - 0.5 * (std::f64::consts::TAU * v).ln() - r * r / (2.0 * v)
    }

    fn log_likelihood(&self, losses: &[f64]) -> f64 {
        losses
            .iter()
            .map(|&x| log_add_exp(self.log_joint(0, x), self.log_joint(1, x)))
            .sum()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// EM fit of a two-component 1-D mixture.
pub fn fit_gmm_1d(losses: &[f64], max_iters: usize, tol: f64) -> Result<GmmModel> {
    fit_gmm_1d_traced(losses, max_iters, tol).map(|(m, _)| m)
}

/// As [`fit_gmm_1d`], also returning the log-likelihood after initialization
/// and after every EM iteration.
pub fn fit_gmm_1d_traced(losses: &[f64], max_iters: usize, tol: f64) -> Result<(GmmModel, Vec<f64>)> {
    if losses.len() < 2 {
        return Err(Error::InsufficientData(losses.len()));
    }
    if let Some(bad) = losses.iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("non-finite loss {bad}")));
    }
    // Sorting makes every reduction independent of the caller's ordering.
    let mut xs = losses.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;

    if xs[0] == xs[xs.len() - 1] {
        let model = GmmModel {
            means: [xs[0], xs[0]],
            variances: [VARIANCE_FLOOR; 2],
            weights: [1.0, 0.0],
            clean_component: 0,
            degenerate: true,
        };
        return Ok((model, Vec::new()));
    }

    let mean = xs.iter().sum::<f64>() / n;
    let var = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);
    let mut model = GmmModel {
        means: [percentile(&xs, 10.0), percentile(&xs, 90.0)],
        variances: [var; 2],
        weights: [0.5, 0.5],
        clean_component: 0,
        degenerate: false,
    };
    let mut ll = model.log_likelihood(&xs);
    let mut trace = vec![ll];
    let mut resp = vec![0.0; xs.len()];

    for _ in 0..max_iters {
        // E-step: responsibility of component 0.
        for (r, &x) in resp.iter_mut().zip(&xs) {
            let (a, b) = (model.log_joint(0, x), model.log_joint(1, x));
            *r = (a - log_add_exp(a, b)).exp();
        }
        // M-step.
        let mut next = model.clone();
        for k in 0..2 {
            let w = |r: f64| if k == 0 { r } else { 1.0 - r };
            let nk: f64 = resp.iter().map(|&r| w(r)).sum();
            if nk <= 1e-12 {
                next.weights[k] = 0.0;
                continue;
            }
            let mk = resp.iter().zip(&xs).map(|(&r, &x)| w(r) * x).sum::<f64>() / nk;
            let vk = resp.iter().zip(&xs).map(|(&r, &x)| w(r) * (x - mk).powi(2)).sum::<f64>() / nk;
            next.weights[k] = nk / n;
            next.means[k] = mk;
            next.variances[k] = vk.max(VARIANCE_FLOOR);
        }
        let total = next.weights[0] + next.weights[1];
        next.weights = [next.weights[0] / total, next.weights[1] / total];

        let next_ll = next.log_likelihood(&xs);
        model = next;
        trace.push(next_ll);
        let improvement = next_ll - ll;
        ll = next_ll;
        if improvement < tol {
            break;
        }
    }
    model.clean_component = if model.means[1] < model.means[0] { 1 } else { 0 };
    Ok((model, trace))
}

/// Posterior probability that a sample with this loss belongs to the clean
/// component.
pub fn clean_posterior(model: &GmmModel, loss: f64) -> f64 {
    if model.degenerate {
        return 1.0;
    }
    let c = model.clean_component;
    let (a, b) = (model.log_joint(c, loss), model.log_joint(1 - c, loss));
    let p = (a - log_add_exp(a, b)).exp();
    if p.is_nan() {
        0.0
    } else {
        p.clamp(0.0, 1.0)
    }
}

/// Sliding per-sample history of clean flags over the last `t_filter` epochs.
#[derive(Clone, Debug)]
pub struct ConsensusWindow {
    t_filter: usize,
    history: Vec<VecDeque<bool>>,
    epochs: usize,
}

impl ConsensusWindow {
    pub fn new(n_samples: usize, t_filter: usize) -> Self {
        assert!(t_filter >= 1, "t_filter must be at least 1");
        ConsensusWindow {
            t_filter,
            history: vec![VecDeque::with_capacity(t_filter); n_samples],
            epochs: 0,
        }
    }

    pub fn t_filter(&self) -> usize {
        self.t_filter
    }

    pub fn n_samples(&self) -> usize {
        self.history.len()
    }

    pub fn epochs_recorded(&self) -> usize {
        self.epochs
    }

    /// Flags of sample `i`, oldest first.
    pub fn history(&self, i: usize) -> impl Iterator<Item = bool> + '_ {
        self.history[i].iter().copied()
    }

    /// Records one epoch of flags, dropping flags older than `t_filter` epochs.
    pub fn update(&mut self, flags: &[bool]) -> Result<()> {
        if flags.len() != self.history.len() {
            return Err(Error::DimensionMismatch {
                expected: self.history.len(),
                got: flags.len(),
            });
        }
        for (h, &f) in self.history.iter_mut().zip(flags) {
            if h.len() == self.t_filter {
                h.pop_front();
            }
            h.push_back(f);
        }
        self.epochs += 1;
        Ok(())
    }

    pub fn contains(&self, i: usize) -> bool {
        self.epochs >= self.t_filter && self.history[i].iter().all(|&f| f)
    }

    /// Samples flagged clean in every one of the last `t_filter` epochs.
    /// Empty until `t_filter` epochs have been recorded.
    pub fn consensus_set(&self) -> Vec<usize> {
        (0..self.history.len()).filter(|&i| self.contains(i)).collect()
    }
}

/// Pushes one epoch's flags (`posterior > clean_threshold`) into the window.
pub fn consensus_update(window: &mut ConsensusWindow, flags: &[bool]) -> Result<()> {
    window.update(flags)
}

pub fn consensus_set(window: &ConsensusWindow) -> Vec<usize> {
    window.consensus_set()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionRow {
    pub sample: usize,
    pub loss: f64,
    pub posterior: f64,
    pub flag: bool,
    pub in_consensus: bool,
}

pub fn write_partition_jsonl(rows: &[PartitionRow], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
