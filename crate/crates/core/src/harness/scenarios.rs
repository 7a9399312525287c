use std::fmt::Write as _;

use super::output::format_number;
use super::{ExperimentConfig, Result};
use crate::protosim::{
    drx_lifetime, format_trace, format_trace_tsv, lifetime_at_duty, run_scenario, safety_violations, Lifetime,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoOutput {
    /// `time kind from to payload` lines.
    pub text: String,
    /// Tab-separated dump with a header row.
    pub tsv: String,
    pub rejections: Vec<String>,
    pub violations: Vec<String>,
}

pub fn run_proto(cfg: &ExperimentConfig) -> Result<ProtoOutput> {
    let out = run_scenario(&cfg.proto, cfg.seed, &cfg.power.constants())?;
    Ok(ProtoOutput {
        text: format_trace(&out.trace),
        tsv: format_trace_tsv(&out.trace),
        violations: safety_violations(&out.trace, &out.enodeb),
        rejections: out.rejections,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerRow {
    pub label: String,
    pub duty: f64,
    pub lifetime: Lifetime,
}

/// Lifetime at every duty cycle of the grid, plus the configured DRX cycle.
pub fn run_power(cfg: &ExperimentConfig) -> Result<Vec<PowerRow>> {
    let constants = cfg.power.constants();
    let mut rows = cfg
        .power
        .duty_grid
        .iter()
        .map(|&duty| {
            Ok(PowerRow {
                label: "grid".into(),
                duty,
                lifetime: lifetime_at_duty(duty, &constants)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(drx) = &cfg.power.drx {
        rows.push(PowerRow {
            label: "drx".into(),
            duty: drx.duty_cycle(),
            lifetime: drx_lifetime(drx, &constants)?,
        });
    }
    Ok(rows)
}

pub fn render_power_csv(rows: &[PowerRow]) -> String {
    let mut out = String::from("source,duty,lifetime_days\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.label, format_number(r.duty), format_number(r.lifetime.days()))
            .expect("writing to a String");
    }
    out
}
