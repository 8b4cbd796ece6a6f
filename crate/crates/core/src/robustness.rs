//! Runs the detector across the perturbation grid. Each setting perturbs
//! every tile (train, validation and test alike) before training.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{model_size_report, train, DetectorConfig, Metrics, SizeReport};
use crate::error::Result;
use crate::image_io::{Perturbation, Tile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub setting: String,
    pub tile_size: usize,
    pub test: Metrics,
    pub selected: Vec<String>,
    pub model_size: SizeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub config: DetectorConfig,
    pub rows: Vec<RobustnessRow>,
}

/// Trains and evaluates one model per perturbation. `progress` receives
/// each finished row with its wall time in seconds.
pub fn run_grid(
    tiles: &[Tile],
    config: &DetectorConfig,
    grid: &[Perturbation],
    mut progress: impl FnMut(&RobustnessRow, f64),
) -> Result<RobustnessReport> {
    let mut rows = Vec::with_capacity(grid.len());
    for p in grid {
        let start = Instant::now();
        let perturbed = p.apply_all(tiles)?;
        let outcome = train(config, &perturbed, *p)?;
        let row = RobustnessRow {
            setting: p.to_string(),
            tile_size: outcome.model.tile_size.1,
            test: outcome.test_metrics,
            selected: outcome.model.selected.iter().map(ToString::to_string).collect(),
            model_size: model_size_report(&outcome.model),
        };
        progress(&row, start.elapsed().as_secs_f64());
        rows.push(row);
    }
    Ok(RobustnessReport { config: config.clone(), rows })
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn size(n: usize) -> String {
    if n >= 1000 {
        format!("{:.1}K", n as f64 / 1000.0)
    } else {
        n.to_string()
    }
}

impl RobustnessReport {
    /// Plain-text table: one row per setting with F1, precision, recall,
    /// channel count and model size.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let header = ["setting", "size", "F1", "precision", "recall", "N_ch", "params"];
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.setting.clone(),
                    format!("{0}x{0}", r.tile_size),
                    pct(r.test.f1),
                    pct(r.test.precision),
                    pct(r.test.recall),
                    r.model_size.selected_channels.to_string(),
                    size(r.model_size.total),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[&str], out: &mut String| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "| {} |", padded.join(" | "));
        };
        line(&header, &mut out);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        for r in &body {
            line(&r.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_formatting() {
        assert_eq!(size(827), "827");
        assert_eq!(size(9612), "9.6K");
        assert_eq!(pct(0.87083), "87.08%");
    }
}
