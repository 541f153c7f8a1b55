//! Probe placement sweep: fit one probe per tap of a frozen model and rank
//! taps by held-out origin accuracy.

use serde::{Deserialize, Serialize};

use super::{train_probe, Probe, ProbeConfig, ProbeError};
use crate::corpus::Sample;
use crate::segcore::{SegModel, TapPoint};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepConfig {
    pub probe: ProbeConfig,
}

/// One tap's sweep outcome. Rows come back in the model's canonical tap
/// order (encoder shallow→deep, bottleneck, decoder deep→shallow).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub tap: String,
    pub depth: usize,
    pub channels: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Fit a probe at every tap; report train and held-out accuracy per tap.
/// Returns the rows plus the fitted probes in the same order.
pub fn placement_sweep(
    model: &SegModel<f32>,
    train_samples: &[&Sample],
    val_samples: &[&Sample],
    cfg: &SweepConfig,
) -> Result<(Vec<SweepRow>, Vec<Probe>), ProbeError> {
    let mut rows = Vec::new();
    let mut probes = Vec::new();
    for info in model.taps() {
        let tap = TapPoint::parse(&info.name).expect("canonical tap name");
        let fit = train_probe(model, tap, train_samples, &cfg.probe)?;
        let val_accuracy = fit.probe.accuracy(model, val_samples)?;
        rows.push(SweepRow {
            tap: info.name,
            depth: info.depth,
            channels: info.channels,
            train_accuracy: fit.train_accuracy,
            val_accuracy,
            iters: fit.iters,
            converged: fit.converged,
        });
        probes.push(fit.probe);
    }
    Ok((rows, probes))
}

/// Index of the winning row: highest val accuracy, first in canonical order
/// on ties.
pub fn best_row(rows: &[SweepRow]) -> usize {
    let mut best = 0usize;
    for (i, r) in rows.iter().enumerate() {
        if r.val_accuracy > rows[best].val_accuracy {
            best = i;
        }
    }
    best
}
