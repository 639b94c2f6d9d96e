//! CSV-to-SVG rendering behind the `plot` subcommand.

use std::path::Path;

use crate::csvio::read_csv;
use crate::svg;
use crate::{CliError, Result};

/// Renders one artifact CSV as an SVG figure. `kind` is one of
/// `heatmap`, `scatter`, `line`, `ridgeline`; heat maps color by
/// `metric` and can overlay the predictability-time curve from the
/// sibling `lyapunov.csv`.
pub fn render_plot(input: &Path, kind: &str, metric: &str, overlay: bool) -> Result<String> {
    let table = read_csv(input)?;
    match kind {
        "heatmap" => {
            let a1_name = table.header[0].clone();
            let a2_name = table.header[1].clone();
            let metric_col = table.column(metric)?;
            let status_col = table.column("status").ok();
            let mut axis1: Vec<f64> = Vec::new();
            let mut axis2: Vec<f64> = Vec::new();
            for r in 0..table.rows.len() {
                let v1 = table.f64(r, 0)?;
                let v2 = table.f64(r, 1)?;
                if !axis1.contains(&v1) {
                    axis1.push(v1);
                }
                if !axis2.contains(&v2) {
                    axis2.push(v2);
                }
            }
            let mut cells: Vec<svg::HeatCell> = (0..axis1.len() * axis2.len())
                .map(|_| svg::HeatCell { value: None })
                .collect();
            for r in 0..table.rows.len() {
                let v1 = table.f64(r, 0)?;
                let v2 = table.f64(r, 1)?;
                let i = axis1.iter().position(|&v| v == v1).expect("present");
                let j = axis2.iter().position(|&v| v == v2).expect("present");
                let diverged = status_col
                    .map(|c| table.rows[r][c] != "ok")
                    .unwrap_or(false);
                let value = if diverged {
                    None
                } else {
                    table.f64(r, metric_col).ok().filter(|v| v.is_finite())
                };
                cells[j * axis1.len() + i] = svg::HeatCell { value };
            }
            let overlay_points = if overlay {
                lyapunov_overlay(input)?
            } else {
                None
            };
            Ok(svg::heatmap(
                &format!("{metric} over ({a1_name}, {a2_name})"),
                &a1_name,
                &axis1,
                &a2_name,
                &axis2,
                &cells,
                overlay_points.as_deref(),
            ))
        }
        "scatter" => {
            let points: Vec<(f64, f64)> = (0..table.rows.len())
                .map(|r| Ok((table.f64(r, 0)?, table.f64(r, 1)?)))
                .collect::<Result<_>>()?;
            Ok(svg::scatter(
                &format!("{} vs {}", table.header[1], table.header[0]),
                &table.header[0].clone(),
                &table.header[1].clone(),
                &[("data", "#2c4a8c", points)],
            ))
        }
        "line" => {
            let x_col = table.column("sn_ratio").unwrap_or(0);
            let y_col = table.column("mean_error").unwrap_or(1);
            let e_col = table.column("std_error").ok();
            let group_col = table.column("kind").ok();
            let mut groups: Vec<(String, Vec<(f64, f64, f64)>)> = Vec::new();
            for r in 0..table.rows.len() {
                let name = group_col
                    .map(|c| table.rows[r][c].clone())
                    .unwrap_or_else(|| "series".into());
                let x = table.f64(r, x_col)?.log10();
                let y = table.f64(r, y_col)?;
                let e = match e_col {
                    Some(c) => table.f64(r, c)?,
                    None => 0.0,
                };
                match groups.iter_mut().find(|g| g.0 == name) {
                    Some(g) => g.1.push((x, y, e)),
                    None => groups.push((name, vec![(x, y, e)])),
                }
            }
            let colors = ["#2c4a8c", "#b4311b", "#3a7d44", "#7a4a9e"];
            let series: Vec<(&str, &str, Vec<(f64, f64, f64)>)> = groups
                .iter()
                .enumerate()
                .map(|(i, g)| (g.0.as_str(), colors[i % colors.len()], g.1.clone()))
                .collect();
            Ok(svg::line_chart(
                "error vs log10 SN ratio",
                "log10(SN)",
                "1 - accuracy",
                &series,
            ))
        }
        "ridgeline" => {
            let layer_col = table.column("layer")?;
            let lambda_col = table.column("lambda")?;
            let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
            for r in 0..table.rows.len() {
                let name = table.rows[r][layer_col].clone();
                let v = table.f64(r, lambda_col)?;
                match groups.iter_mut().find(|g| g.0 == name) {
                    Some(g) => g.1.push(v),
                    None => groups.push((name, vec![v])),
                }
            }
            Ok(svg::ridgeline("FTMLE distributions", "lambda", &groups))
        }
        other => Err(CliError::Config(format!("unknown plot kind '{other}'"))),
    }
}

/// Reads `lyapunov.csv` next to a grid CSV into overlay points
/// `(axis1 value, predictability time)`.
pub fn lyapunov_overlay(grid_csv: &Path) -> Result<Option<Vec<(f64, f64)>>> {
    let path = match grid_csv.parent().map(|p| p.join("lyapunov.csv")) {
        Some(p) if p.exists() => p,
        _ => return Ok(None),
    };
    let lt = read_csv(&path)?;
    let ltc = lt.column("lyapunov_time")?;
    let mut pts = Vec::new();
    for r in 0..lt.rows.len() {
        let v = lt.f64(r, 0)?;
        let t = lt.f64(r, ltc)?;
        if t.is_finite() {
            pts.push((v, t));
        }
    }
    Ok(Some(pts))
}
