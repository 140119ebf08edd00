use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tempfile::NamedTempFile;

use ppmvt::selection::{GridCell, ThresholdGrid};

use crate::Failure;

/// Writes whole files into one directory, each via a temp file and rename.
pub struct OutDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(root).map_err(|e| io_failure(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.root.join(name);
        let dir = path.parent().unwrap_or(&self.root);
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        let mut tmp = NamedTempFile::new_in(dir).map_err(|e| io_failure(dir, e))?;
        tmp.write_all(bytes).map_err(|e| io_failure(&path, e))?;
        tmp.as_file().sync_all().map_err(|e| io_failure(&path, e))?;
        tmp.persist(&path).map_err(|e| io_failure(&path, e.error))?;
        self.written.push(path);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<(), Failure> {
        let mut text = String::new();
        for item in items {
            text.push_str(&serde_json::to_string(item).map_err(|e| Failure::Io(e.to_string()))?);
            text.push('\n');
        }
        self.write(name, text.as_bytes())
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

/// File-name-safe form of a row label.
pub fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Heatmap of a threshold grid: rows V2, columns V3, lower resolution darker.
pub fn grid_svg(grid: &ThresholdGrid) -> String {
    let (cell, ml, mt) = (56.0, 70.0, 50.0);
    let (nr, nc) = (grid.v2.len(), grid.v3.len());
    let (w, h) = (ml + cell * nc as f64 + 20.0, mt + cell * nr as f64 + 40.0);
    let values: Vec<f64> = grid
        .cells
        .iter()
        .flatten()
        .filter_map(GridCell::resolution)
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">Energy resolution (%), V1={} V4={} mV</text>"#,
        w / 2.0,
        grid.v1,
        grid.v4
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="38" text-anchor="middle">V3 (mV)</text>"#,
        ml + cell * nc as f64 / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">V2 (mV)</text>"#,
        mt + cell * nr as f64 / 2.0,
        mt + cell * nr as f64 / 2.0
    );
    for (j, v) in grid.v3.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{v}</text>"#,
            ml + cell * (j as f64 + 0.5),
            mt + cell * nr as f64 + 16.0
        );
    }
    for (i, row) in grid.cells.iter().enumerate() {
        let y = mt + cell * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            ml - 6.0,
            y + cell / 2.0 + 4.0,
            grid.v2[i]
        );
        for (j, c) in row.iter().enumerate() {
            let x = ml + cell * j as f64;
            let (fill, label) = match c {
                GridCell::Skipped => ("#eeeeee".to_string(), String::new()),
                GridCell::Failed { .. } => ("#555555".to_string(), "fail".to_string()),
                GridCell::Evaluated { resolution_pct } => {
                    let t = if hi > lo {
                        (resolution_pct - lo) / (hi - lo)
                    } else {
                        0.0
                    };
                    let g = (60.0 + 180.0 * t).round() as u8;
                    (
                        format!("#{:02x}{:02x}ff", g, g),
                        format!("{resolution_pct:.2}"),
                    )
                }
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="white"/>"#
            );
            if !label.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
                    x + cell / 2.0,
                    y + cell / 2.0 + 4.0
                );
            }
            if grid.best == Some((i, j)) {
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="red" stroke-width="2"/>"#,
                    x + 1.0,
                    y + 1.0,
                    cell - 2.0,
                    cell - 2.0
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}
