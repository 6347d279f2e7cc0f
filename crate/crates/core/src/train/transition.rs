//! Detection of sudden drops in the masked loss.
//!
//! At every position `t` the median of the `window` values before `t` is
//! compared with the median of the `window` values from `t` on. A drop is
//! flagged where the two differ by at least `threshold` in log10 units;
//! consecutive flagged positions form one event, reported at its first
//! step. The window must be comparable to the expected drop duration: a
//! gradual decay that loses less than `threshold` decades per window is
//! not a drop.

use serde::{Deserialize, Serialize};

use super::{MetricSeries, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionConfig {
    pub window: usize,
    /// Minimum drop in log10 units.
    pub threshold: f64,
}

impl TransitionConfig {
    pub fn new(window: usize, threshold: f64) -> Self {
        Self { window, threshold }
    }

    /// Threshold 0.5 with a window of 5% of the series (at least 10).
    pub fn for_len(len: usize) -> Self {
        Self {
            window: (len / 20).max(10),
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropEvent {
    pub step: u64,
    /// Median before the drop.
    pub before: f64,
    /// Median right after the drop.
    pub after: f64,
    /// Largest log10 difference seen within the event.
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    /// Median masked loss before the first drop, or over the first window
    /// when there is none.
    pub plateau_level: f64,
    pub drop_step: Option<u64>,
    /// Median masked loss over the final window.
    pub post_drop_level: f64,
    /// `log10(plateau_level / post_drop_level)`.
    pub drop_magnitude: f64,
    pub window: usize,
    pub threshold: f64,
    pub events: Vec<DropEvent>,
}

impl TransitionReport {
    pub fn drop_count(&self) -> usize {
        self.events.len()
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Scans the masked loss (the total loss where a step has no masked
/// entries) for sudden drops.
pub fn detect_transition(series: &MetricSeries, config: TransitionConfig) -> Result<TransitionReport, TrainError> {
    if series.is_empty() {
        return Err(TrainError::EmptySeries);
    }
    let w = config.window;
    let len = series.len();
    if w == 0 || len <= w {
        return Err(TrainError::SeriesTooShort { len, window: w });
    }
    let values: Vec<f64> = series
        .records
        .iter()
        .map(|r| r.loss_mask.unwrap_or(r.loss).max(f64::MIN_POSITIVE))
        .collect();

    let mut events: Vec<DropEvent> = Vec::new();
    let mut in_event = false;
    for t in w..=len.saturating_sub(w).max(w) {
        let before = median(&values[t - w..t]);
        let after = median(&values[t..(t + w).min(len)]);
        let score = before.log10() - after.log10();
        if score >= config.threshold {
            if in_event {
                let e = events.last_mut().expect("open event");
                e.magnitude = e.magnitude.max(score);
            } else {
                events.push(DropEvent {
                    step: series.records[t].step,
                    before,
                    after,
                    magnitude: score,
                });
                in_event = true;
            }
        } else {
            in_event = false;
        }
    }

    let plateau_level = events
        .first()
        .map(|e| e.before)
        .unwrap_or_else(|| median(&values[..w]));
    let post_drop_level = median(&values[len - w..]);
    Ok(TransitionReport {
        plateau_level,
        drop_step: events.first().map(|e| e.step),
        post_drop_level,
        drop_magnitude: plateau_level.log10() - post_drop_level.log10(),
        window: w,
        threshold: config.threshold,
        events,
    })
}
