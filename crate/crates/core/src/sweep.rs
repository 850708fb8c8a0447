//! Parameter sweeps: one run per value, in parallel, with a joint table of trend columns.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::error::{FsiError, Result};
use crate::pressure::{vanishing_fluid_sweep, VanishingReport};
use crate::stepper::{ExitStatus, Simulation};
use crate::verify::Check;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    H,
    Tau,
    K,
    Eps0,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::H => "h",
            SweepAxis::Tau => "tau",
            SweepAxis::K => "k",
            SweepAxis::Eps0 => "eps0",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = FsiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" => Ok(SweepAxis::H),
            "tau" => Ok(SweepAxis::Tau),
            "k" => Ok(SweepAxis::K),
            "eps0" => Ok(SweepAxis::Eps0),
            _ => Err(FsiError::InvalidParam(format!("unknown sweep axis `{s}`, expected h, tau, k or eps0"))),
        }
    }
}

/// Trend columns of one run. Columns that do not apply to an axis are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub status: String,
    pub windows: usize,
    pub steps: usize,
    pub delta0: f64,
    /// max over substeps of max|det∇Φ − 1|.
    pub max_det_dev: f64,
    /// Final ∫δ₀‖∇Δu‖² and max √δ₀/2‖∂ₓ³η‖².
    pub cum_hyper: f64,
    pub max_reg_third: f64,
    /// max √ε₀‖∂ₜ∂ₓ³η‖ and final ∫ε₀‖∂ₜ∂ₓ³η‖².
    pub max_eps_rate: f64,
    pub cum_eps: f64,
    pub max_upper_kinetic: f64,
    pub min_margin: f64,
    pub min_step_margin: f64,
    pub max_kappa: f64,
    pub lower_difference: f64,
    pub curve_difference: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// (value, error) for runs that could not start.
    pub failures: Vec<(f64, String)>,
    pub trends: Vec<Check>,
    pub vanishing: Option<VanishingReport>,
}

impl SweepReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.trends.iter().all(|c| c.passed)
    }
}

fn empty_row(value: f64, status: &str) -> SweepRow {
    SweepRow {
        value,
        status: status.into(),
        windows: 0,
        steps: 0,
        delta0: f64::NAN,
        max_det_dev: f64::NAN,
        cum_hyper: f64::NAN,
        max_reg_third: f64::NAN,
        max_eps_rate: f64::NAN,
        cum_eps: f64::NAN,
        max_upper_kinetic: f64::NAN,
        min_margin: f64::NAN,
        min_step_margin: f64::NAN,
        max_kappa: f64::NAN,
        lower_difference: f64::NAN,
        curve_difference: f64::NAN,
    }
}

fn configured(base: &ScenarioConfig, axis: SweepAxis, value: f64) -> Result<ScenarioConfig> {
    let mut cfg = base.clone();
    let st = &mut cfg.mms_stepper;
    match axis {
        SweepAxis::H => st.h = value,
        SweepAxis::Tau => {
            let n = (st.h / value).round();
            if !(n >= 1.0) || ((st.h / value) - n).abs() > 1e-9 * n {
                return Err(FsiError::InvalidParam(format!("tau = {value} does not divide h = {}", st.h)));
            }
            st.substeps = n as usize;
        }
        SweepAxis::Eps0 => st.eps0 = value,
        SweepAxis::K => unreachable!("the k axis is delegated"),
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_one(base: &ScenarioConfig, axis: SweepAxis, value: f64) -> Result<SweepRow> {
    let cfg = configured(base, axis, value)?;
    let mut sim = Simulation::new(&cfg.scenario()?)?;
    let status = sim.run();
    let l = &sim.ledger;
    let max = |f: &dyn Fn(&crate::stepper::LedgerRow) -> f64| l.iter().map(f).fold(f64::NAN, f64::max);
    let min = |f: &dyn Fn(&crate::stepper::LedgerRow) -> f64| l.iter().map(f).fold(f64::NAN, f64::min);
    let last = l.last();
    Ok(SweepRow {
        value,
        status: match status {
            ExitStatus::Completed => "completed".into(),
            ExitStatus::Collision { last_safe_time } => format!("collision at {last_safe_time}"),
            ExitStatus::SolverAbort => "solver_abort".into(),
        },
        windows: sim.windows.len(),
        steps: l.len(),
        delta0: sim.model.scheme.delta0(),
        max_det_dev: max(&|r| (r.det_max - 1.0).max(1.0 - r.det_min)),
        cum_hyper: last.map_or(0.0, |r| r.cum_hyper),
        max_reg_third: max(&|r| r.reg_third),
        max_eps_rate: max(&|r| r.eps_term.sqrt()),
        cum_eps: last.map_or(0.0, |r| r.cum_eps),
        max_upper_kinetic: max(&|r| r.upper_kinetic),
        min_margin: min(&|r| r.margin),
        min_step_margin: min(&|r| r.step_margin),
        max_kappa: max(&|r| r.kappa),
        lower_difference: f64::NAN,
        curve_difference: f64::NAN,
    })
}

/// Whether `col` decreases strictly along rows ordered by decreasing `value`.
fn decreasing(rows: &[SweepRow], name: &str, col: impl Fn(&SweepRow) -> f64) -> Check {
    let mut ordered: Vec<&SweepRow> = rows.iter().filter(|r| r.steps > 0).collect();
    ordered.sort_by(|a, b| b.value.total_cmp(&a.value));
    let vals: Vec<f64> = ordered.iter().map(|r| col(r)).collect();
    let ok = vals.len() >= 2 && vals.windows(2).all(|w| w[1] < w[0]);
    Check::holds(name, ok, format!("{vals:?} for values in decreasing order"))
}

/// One run per value of `axis`, in parallel; `k` delegates to the vanishing-fluid sweep.
pub fn sweep(base: &ScenarioConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(FsiError::InvalidParam("sweep needs at least one value".into()));
    }
    if axis == SweepAxis::K {
        let rep = vanishing_fluid_sweep(&base.scenario()?, values)?;
        let rows = rep
            .rows
            .iter()
            .map(|v| {
                let mut r = empty_row(v.k, if v.completed { "completed" } else { "stopped" });
                r.max_upper_kinetic = v.upper_kinetic;
                r.min_margin = v.one_sided_margin;
                r.lower_difference = v.lower_difference;
                r.curve_difference = v.curve_difference;
                r
            })
            .collect();
        let trends = vec![
            Check::holds("upper kinetic decreasing in k", rep.upper_decreasing, ""),
            Check::holds("lower-fluid differences decreasing", rep.differences_decreasing, ""),
            Check::holds("one-sided inequality", rep.one_sided_ok, ""),
        ];
        return Ok(SweepReport { axis, rows, failures: Vec::new(), trends, vanishing: Some(rep) });
    }
    let results: Vec<(f64, Result<SweepRow>)> = values.par_iter().map(|&v| (v, run_one(base, axis, v))).collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (v, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                failures.push((v, e.to_string()));
                rows.push(empty_row(v, "failed"));
            }
        }
    }
    let trends = match axis {
        SweepAxis::H => vec![
            decreasing(&rows, "delta0 decreasing as h shrinks", |r| r.delta0),
            decreasing(&rows, "max third-derivative regularizer decreasing as h shrinks", |r| r.max_reg_third),
        ],
        SweepAxis::Tau => vec![decreasing(&rows, "max|det - 1| decreasing as tau shrinks", |r| r.max_det_dev)],
        SweepAxis::Eps0 => vec![decreasing(&rows, "eps0 dissipation vanishing as eps0 shrinks", |r| r.cum_eps)],
        SweepAxis::K => unreachable!(),
    };
    Ok(SweepReport { axis, rows, failures, trends, vanishing: None })
}

/// Writes `sweep.csv` and `sweep.json` into `out`.
pub fn write_sweep(out: &Path, rep: &SweepReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv")).map_err(|e| FsiError::InvalidParam(e.to_string()))?;
    for r in &rep.rows {
        w.serialize(r).map_err(|e| FsiError::InvalidParam(e.to_string()))?;
    }
    w.flush()?;
    std::fs::write(out.join("sweep.json"), serde_json::to_string_pretty(rep)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::preset("swirl").unwrap();
        cfg.fluid_field.n = 8;
        cfg.geometry.m = 8;
        cfg.mms_stepper.substeps = 2;
        cfg.mms_stepper.t_final = 0.04;
        cfg
    }

    #[test]
    fn axis_names_round_trip() {
        for a in [SweepAxis::H, SweepAxis::Tau, SweepAxis::K, SweepAxis::Eps0] {
            assert_eq!(a.to_string().parse::<SweepAxis>().unwrap(), a);
        }
        assert!("mu".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn h_axis_lowers_delta0() {
        let rep = sweep(&small(), SweepAxis::H, &[0.04, 0.02, 0.01]).unwrap();
        assert!(rep.failures.is_empty());
        assert!(rep.trends[0].passed, "{:?}", rep.trends);
        assert_eq!(rep.rows.iter().map(|r| r.windows).collect::<Vec<_>>(), vec![1, 2, 4]);
    }

    #[test]
    fn bad_values_are_reported_not_fatal() {
        let rep = sweep(&small(), SweepAxis::Tau, &[0.01, 0.003]).unwrap();
        assert_eq!(rep.failures.len(), 1);
        assert_eq!(rep.failures[0].0, 0.003);
        assert_eq!(rep.rows[0].status, "completed");
        assert!(!rep.ok());
    }

    #[test]
    fn eps0_contribution_vanishes() {
        let rep = sweep(&small(), SweepAxis::Eps0, &[1e-3, 1e-4, 0.0]).unwrap();
        let cum: Vec<f64> = rep.rows.iter().map(|r| r.cum_eps).collect();
        assert_eq!(cum[2], 0.0);
        assert!(cum[0] > cum[1] && cum[1] > 0.0, "{cum:?}");
        assert!(rep.rows.iter().all(|r| r.max_eps_rate.is_finite()));
    }
}
