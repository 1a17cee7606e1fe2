//! Adaptive IoU-informed thresholding.
//!
//! From the confidences of teacher detections validated by the proxy, take the
//! ones strictly above their median, compute their mean `mu` and population
//! standard deviation `sigma`, and move the live threshold a fraction `gamma`
//! of the way toward `mu - 2 sigma`:
//!
//! ```text
//! tau <- clamp(tau + gamma * ((mu - 2 sigma) - tau), floor, 1)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.05;

/// `(mu, sigma)` of the matched confidences above their median, or `None`
/// for an empty input. When nothing lies strictly above the median the
/// result is `(median, 0)`.
pub fn matched_confidence_stats(matched: &[f64]) -> Option<(f64, f64)> {
    if matched.is_empty() {
        return None;
    }
    let mut sorted = matched.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let upper: Vec<f64> = sorted.into_iter().filter(|&c| c > median).collect();
    if upper.is_empty() {
        return Some((median, 0.0));
    }
    let k = upper.len() as f64;
    let mu = upper.iter().sum::<f64>() / k;
    let var = upper.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / k;
    Some((mu, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AitRecord {
    pub iteration: u64,
    pub tau: f64,
    /// `None` when the step had no matched confidences.
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    tau: f64,
    gamma: f64,
    floor: f64,
    history: Vec<AitRecord>,
}

impl ThresholdState {
    pub fn new(tau: f64, gamma: f64, floor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&floor) {
            return Err(Error::invalid("ait.floor", format!("{floor} outside [0, 1]")));
        }
        if !(floor..=1.0).contains(&tau) {
            return Err(Error::invalid(
                "ait.tau",
                format!("{tau} outside [floor = {floor}, 1]"),
            ));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid("ait.gamma", format!("{gamma} outside [0, 1]")));
        }
        Ok(ThresholdState {
            tau,
            gamma,
            floor,
            history: Vec::new(),
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn history(&self) -> &[AitRecord] {
        &self.history
    }

    /// One threshold update. `iteration` must exceed the last recorded one.
    /// An empty `matched` leaves `tau` unchanged but is still recorded.
    pub fn step(&mut self, matched: &[f64], iteration: u64) -> Result<f64> {
        if let Some(last) = self.history.last() {
            if iteration <= last.iteration {
                return Err(Error::invalid(
                    "ait.iteration",
                    format!("{iteration} does not follow {}", last.iteration),
                ));
            }
        }
        let stats = matched_confidence_stats(matched);
        if let Some((mu, sigma)) = stats {
            let step_target = mu - 2.0 * sigma;
            let deviation = self.gamma * (step_target - self.tau);
            self.tau = (self.tau + deviation).clamp(self.floor, 1.0);
        }
        self.history.push(AitRecord {
            iteration,
            tau: self.tau,
            mu: stats.map(|s| s.0),
            sigma: stats.map(|s| s.1),
        });
        Ok(self.tau)
    }

    pub fn write_history_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_history_csv(&self.history, w)
    }
}

/// CSV with columns `iteration,tau,mu,sigma`; `mu` and `sigma` are empty for
/// steps without matched confidences.
pub fn write_history_csv<W: std::io::Write>(history: &[AitRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["iteration", "tau", "mu", "sigma"])?;
    for r in history {
        wr.write_record([
            r.iteration.to_string(),
            r.tau.to_string(),
            r.mu.map(|v| v.to_string()).unwrap_or_default(),
            r.sigma.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
