use std::fmt::Write as _;
use std::path::Path;

use super::{CurvePoint, HarnessError, Result};

/// Decimal rendering with six significant digits; zero prints as `0`.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let decimals = (5 - v.abs().log10().floor() as i64).max(0) as usize;
    format!("{v:.decimals$}")
}

/// CSV text with header `x,series,value,ci`, rows sorted by series then x.
pub fn render_csv(points: &[CurvePoint]) -> Result<String> {
    if points.is_empty() {
        return Err(HarnessError::EmptyCurve);
    }
    let mut rows: Vec<&CurvePoint> = points.iter().collect();
    rows.sort_by(|a, b| a.series.cmp(&b.series).then(a.x.total_cmp(&b.x)));
    let mut out = String::from("x,series,value,ci\n");
    for p in rows {
        writeln!(
            out,
            "{},{},{},{}",
            format_number(p.x),
            p.series,
            format_number(p.value),
            format_number(p.ci_halfwidth)
        )
        .expect("writing to a String");
    }
    Ok(out)
}

pub fn emit_csv(points: &[CurvePoint], path: &Path) -> Result<()> {
    let text = render_csv(points)?;
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}
