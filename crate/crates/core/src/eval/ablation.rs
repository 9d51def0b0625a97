//! Surrogate/victim mismatch and ablation grids over attack settings.

use std::fmt::Write as _;
use std::time::Instant;

use crate::attack::{protect, AttackConfig, ProtectOutcome};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::encoder::IdentityEncoder;
use crate::eval::protection::{evaluate_arm, protected_arm, ArmReport, EvalConfig, ProtectionReport};
use crate::eval::subject::Subject;

/// Protection measured on the attack surrogate and on an independently
/// trained victim. Both arms share generation seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct MismatchReport {
    pub matched: ProtectionReport,
    pub mismatched: ProtectionReport,
}

/// Protects with `surrogate_base` and evaluates fine-tuning of both
/// `surrogate_base` and `victim_base`.
#[allow(clippy::too_many_arguments)]
pub fn mismatch_eval(
    surrogate_base: &Denoiser,
    victim_base: &Denoiser,
    sched: &NoiseSchedule,
    subject: &Subject,
    attack: &AttackConfig,
    encoder: &IdentityEncoder,
    victim_seed: u64,
    cfg: &EvalConfig,
) -> Result<MismatchReport> {
    let out = protect(surrogate_base, sched, &subject.train, Some(subject.id), attack)?;
    let pert = Some(&out.perturbation);
    let matched = crate::eval::evaluate_protection(surrogate_base, sched, subject, pert, encoder, victim_seed, cfg)?;
    let mismatched = if victim_base == surrogate_base {
        matched.clone()
    } else {
        crate::eval::evaluate_protection(victim_base, sched, subject, pert, encoder, victim_seed, cfg)?
    };
    Ok(MismatchReport { matched, mismatched })
}

/// Named decoder layer groups.
pub fn tap_group(name: &str) -> Result<Vec<usize>> {
    match name {
        "shallow" => Ok(vec![0, 1]),
        "mid" => Ok(vec![2, 3]),
        "deep" => Ok(vec![4, 5]),
        _ => Err(Error::invalid("ablation", format!("unknown tap group `{name}`"))),
    }
}

/// Axes of an ablation grid; cells are their Cartesian product.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub etas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub epochs: Vec<usize>,
    pub selection: Vec<bool>,
    pub tap_groups: Vec<String>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            etas: vec![4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0, 32.0 / 255.0],
            lambdas: vec![1.0],
            epochs: vec![50],
            selection: vec![true],
            tap_groups: vec!["deep".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub id: usize,
    pub tap_group: String,
    pub config: AttackConfig,
}

impl AblationGrid {
    pub fn cells(&self, base: &AttackConfig) -> Result<Vec<AblationCell>> {
        let mut cells = Vec::new();
        for group in &self.tap_groups {
            let layers = tap_group(group)?;
            for &eta in &self.etas {
                for &epochs in &self.epochs {
                    for &selection_enabled in &self.selection {
                        for &lambda in &self.lambdas {
                            let config = AttackConfig {
                                eta,
                                lambda,
                                epochs,
                                selection_enabled,
                                tap_layers: layers.clone(),
                                ..base.clone()
                            };
                            config.validate()?;
                            cells.push(AblationCell {
                                id: cells.len(),
                                tap_group: group.clone(),
                                config,
                            });
                        }
                    }
                }
            }
        }
        if cells.is_empty() {
            return Err(Error::invalid("ablation", "empty grid"));
        }
        Ok(cells)
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub report: ProtectionReport,
    pub outcome: ProtectOutcome,
    pub wallclock_s: f64,
}

pub const ABLATION_HEADER: &str = "cell,eta,lambda,epochs,selection,tap_layers,ism_proxy_clean,ism_proxy_protected,artifact_energy_clean,artifact_energy_protected,recon_gap,wallclock_s";

/// Runs protect and the protected victim for every cell. The clean arm is
/// evaluated once and shared, since it does not depend on the cell.
pub fn ablation_suite(
    base: &Denoiser,
    sched: &NoiseSchedule,
    subject: &Subject,
    cells: &[AblationCell],
    encoder: &IdentityEncoder,
    victim_seed: u64,
    cfg: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() {
        return Err(Error::invalid("ablation", "empty grid"));
    }
    let (clean, _): (ArmReport, _) = evaluate_arm(base, sched, subject, &subject.train, encoder, victim_seed, cfg)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let start = Instant::now();
        let outcome = protect(base, sched, &subject.train, Some(subject.id), &cell.config)?;
        let protected = protected_arm(base, sched, subject, Some(&outcome.perturbation), encoder, victim_seed, cfg)?;
        rows.push(AblationRow {
            cell: cell.clone(),
            report: ProtectionReport {
                clean: clean.clone(),
                protected,
            },
            outcome,
            wallclock_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let c = &r.cell.config;
        let layers: Vec<String> = c.tap_layers.iter().map(ToString::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            r.cell.id,
            c.eta,
            c.lambda,
            c.epochs,
            c.selection_enabled,
            layers.join(";"),
            r.report.clean.ism_proxy,
            r.report.protected.ism_proxy,
            r.report.clean.artifact_energy,
            r.report.protected.artifact_energy,
            r.report.recon_gap(),
            r.wallclock_s
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_a_cartesian_product() {
        let grid = AblationGrid {
            etas: vec![4.0 / 255.0, 8.0 / 255.0],
            lambdas: vec![0.0, 1.0],
            epochs: vec![10],
            selection: vec![true, false],
            tap_groups: vec!["deep".into(), "shallow".into()],
        };
        let cells = grid.cells(&AttackConfig::default()).unwrap();
        assert_eq!(cells.len(), 16);
        assert!(cells.iter().enumerate().all(|(i, c)| c.id == i));
        assert_eq!(cells[0].config.tap_layers, vec![4, 5]);
    }

    #[test]
    fn single_cell_grid() {
        let grid = AblationGrid {
            etas: vec![16.0 / 255.0],
            ..Default::default()
        };
        assert_eq!(grid.cells(&AttackConfig::default()).unwrap().len(), 1);
        let empty = AblationGrid {
            etas: vec![],
            ..Default::default()
        };
        assert!(empty.cells(&AttackConfig::default()).is_err());
        assert!(tap_group("middle").is_err());
    }
}
