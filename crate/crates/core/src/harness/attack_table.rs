//! Attack-success grid: PGD success rate per (ε, N) setting and target
//! style, with wall-clock throughput reported separately so the table
//! itself stays deterministic.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attack::{pgd_attack, AttackConfig};
use crate::corpus::Sample;
use crate::probe::Probe;
use crate::segcore::SegModel;

/// One (ε, N) attack configuration; the ball radius rides along unchanged.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackSetting {
    pub eps: f32,
    pub steps: usize,
}

/// Success rate of one (setting, target) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackCell {
    pub eps: f32,
    pub steps: usize,
    pub target: u16,
    pub n: usize,
    pub successes: usize,
    pub success_rate: f64,
}

/// Wall-clock throughput of one setting (all targets pooled). Lives outside
/// the table: timings are not reproducible, cells are.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingTiming {
    pub eps: f32,
    pub steps: usize,
    pub images_per_sec: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackTable {
    pub cells: Vec<AttackCell>,
    pub radius: f32,
}

/// Run every attack setting against every target over `samples`.
/// Success means the probe predicts the target on the attacked image.
/// `N = 0` rows degenerate to the unattacked base rate.
pub fn attack_success_table(
    model: &SegModel<f32>,
    probe: &Probe,
    samples: &[&Sample],
    settings: &[AttackSetting],
    targets: &[usize],
    radius: f32,
) -> Result<(AttackTable, Vec<SettingTiming>), HarnessError> {
    if samples.is_empty() || settings.is_empty() || targets.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    for &t in targets {
        if t >= probe.n_styles {
            return Err(HarnessError::OutOfRange {
                what: "target style",
                got: t,
                limit: probe.n_styles,
            });
        }
    }
    probe.check_backbone(model)?;

    let mut cells = Vec::with_capacity(settings.len() * targets.len());
    let mut timings = Vec::with_capacity(settings.len());
    for s in settings {
        let cfg = AttackConfig {
            eps: s.eps,
            steps: s.steps,
            radius,
        };
        let started = Instant::now();
        let mut attacked = 0usize;
        for &t in targets {
            let mut successes = 0usize;
            for sample in samples {
                let res = pgd_attack(model, probe, &sample.image, t, &cfg)?;
                if res.success {
                    successes += 1;
                }
                attacked += 1;
            }
            cells.push(AttackCell {
                eps: s.eps,
                steps: s.steps,
                target: t as u16,
                n: samples.len(),
                successes,
                success_rate: successes as f64 / samples.len() as f64,
            });
        }
        let secs = started.elapsed().as_secs_f64();
        timings.push(SettingTiming {
            eps: s.eps,
            steps: s.steps,
            images_per_sec: if secs > 0.0 {
                attacked as f64 / secs
            } else {
                f64::INFINITY
            },
        });
    }
    Ok((AttackTable { cells, radius }, timings))
}

/// Write `attack_table.csv` + `attack_table.json` under `dir`.
pub fn save_attack_table(
    dir: &std::path::Path,
    table: &AttackTable,
) -> Result<std::path::PathBuf, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| super::io_err(dir, e))?;
    let csv_path = dir.join("attack_table.csv");
    let mut text = String::from("eps,steps,target,n,successes,success_rate\n");
    for c in &table.cells {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.eps, c.steps, c.target, c.n, c.successes, c.success_rate
        ));
    }
    std::fs::write(&csv_path, text).map_err(|e| super::io_err(&csv_path, e))?;
    let json_path = dir.join("attack_table.json");
    let body = serde_json::to_string_pretty(table).expect("serializable");
    std::fs::write(&json_path, body).map_err(|e| super::io_err(&json_path, e))?;
    Ok(csv_path)
}
