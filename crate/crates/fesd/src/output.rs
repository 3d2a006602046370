//! CSV and JSON artifacts.
//!
//! Floats are written in scientific notation with 17 significant digits so
//! that repeated runs produce byte-identical files.

use std::fs;
use std::path::Path;

use fesd_core::reformulate::ComplexityRow;
use fesd_core::simulate::{OrderStudyResult, Switch, Trajectory};

use crate::CliError;

pub fn num(v: f64) -> String {
    format!("{:.16e}", v)
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {}", path.display(), e)))?;
    let io = |e: csv::Error| CliError::Io(format!("{}: {}", path.display(), e));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {}", path.display(), e)))
}

fn owned(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

/// Element-boundary states, one row per grid point.
pub fn write_trajectory(path: &Path, grid: &[f64], states: &[Vec<f64>]) -> Result<(), CliError> {
    let n_x = states.first().map_or(0, |s| s.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..n_x).map(|i| format!("x{}", i)));
    let rows: Vec<Vec<String>> = grid
        .iter()
        .zip(states)
        .map(|(t, x)| std::iter::once(num(*t)).chain(x.iter().map(|v| num(*v))).collect())
        .collect();
    write_rows(path, &header, &rows)
}

pub fn write_switches(path: &Path, switches: &[Switch]) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> =
        switches.iter().map(|s| vec![num(s.t), s.psi_index.to_string(), s.kind.name().to_string()]).collect();
    write_rows(path, &owned(&["t_s", "psi_index", "kind"]), &rows)
}

pub fn write_order_study(path: &Path, res: &OrderStudyResult) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = res
        .rows
        .iter()
        .map(|r| {
            vec![
                r.scheme.clone(),
                r.order_nominal.to_string(),
                r.n_sim.to_string(),
                num(r.h_avg),
                num(r.err),
                opt_num(r.slope_fitted),
            ]
        })
        .collect();
    write_rows(path, &owned(&["scheme", "order_nominal", "n_sim", "h_avg", "err", "slope_fitted"]), &rows)
}

pub fn write_complexity(path: &Path, rows: &[ComplexityRow]) -> Result<(), CliError> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.variant.clone(),
                r.n_psi.to_string(),
                r.n_f.to_string(),
                r.n_beta.to_string(),
                r.n_alg.to_string(),
                r.n_comp_pairs.to_string(),
                r.n_comp_scalar.to_string(),
                r.n_eq.to_string(),
            ]
        })
        .collect();
    let header =
        owned(&["model", "variant", "n_psi", "n_f", "n_beta", "n_alg", "n_comp_pairs", "n_comp_scalar", "n_eq"]);
    write_rows(path, &header, &body)
}

/// One row per control interval: start, end, then the control values.
pub fn write_controls(path: &Path, grid: &[f64], controls: &[Vec<f64>]) -> Result<(), CliError> {
    let n_u = controls.first().map_or(0, |c| c.len());
    let mut header = owned(&["t_start", "t_end"]);
    header.extend((0..n_u).map(|i| format!("u{}", i)));
    let rows: Vec<Vec<String>> = controls
        .iter()
        .enumerate()
        .map(|(k, u)| [num(grid[k]), num(grid[k + 1])].into_iter().chain(u.iter().map(|v| num(*v))).collect())
        .collect();
    write_rows(path, &header, &rows)
}

/// Read a controls file: either the `t_start,t_end,u..` layout or bare control columns.
pub fn read_controls(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
    let header = r.headers().map_err(|e| CliError::Config(e.to_string()))?.clone();
    let skip = if header.get(0) == Some("t_start") { 2 } else { 0 };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
        let row = rec
            .iter()
            .skip(skip)
            .map(|s| s.parse::<f64>().map_err(|_| CliError::Config(format!("{}: bad number '{}'", path.display(), s))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialise");
    fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {}", path.display(), e)))
}

/// Trajectory summary shared by the `simulate` and `ocp` reports.
pub fn trajectory_summary(tr: &Trajectory) -> serde_json::Value {
    serde_json::json!({
        "terminal_state": tr.terminal(),
        "elements": tr.step_sizes().len(),
        "steps": tr.reports.len(),
        "exact_steps": tr.reports.iter().filter(|r| r.exact).count(),
        "max_complementarity": tr.reports.iter().map(|r| r.comp_residual).fold(0.0, f64::max),
        "switches": tr.switches.iter().map(|s| serde_json::json!({
            "t": s.t, "psi_index": s.psi_index, "kind": s.kind.name()
        })).collect::<Vec<_>>(),
        "failure": tr.failure.as_ref().map(|(k, m)| serde_json::json!({"step": k, "message": m})),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(num(1.0 / 3.0), "3.3333333333333331e-1");
        assert_eq!(num(2.0 / 3.0).parse::<f64>().unwrap(), 2.0 / 3.0);
        assert_eq!(num(-0.5), "-5.0000000000000000e-1");
    }

    #[test]
    fn controls_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("controls.csv");
        let u = vec![vec![0.25, -1.0], vec![1.0 / 3.0, 2.0]];
        write_controls(&p, &[0.0, 0.5, 1.0], &u).unwrap();
        assert_eq!(read_controls(&p).unwrap(), u);
    }
}
