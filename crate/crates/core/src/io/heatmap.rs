// SPDX-License-Identifier: MIT OR Apache-2.0

//! Standalone SVG heatmaps of patching grids.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::PatchGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridView {
    Raw,
    #[default]
    Delta,
    Normalized,
}

impl GridView {
    pub fn values(self, grid: &PatchGrid) -> &[Vec<f64>] {
        match self {
            GridView::Raw => &grid.values_raw,
            GridView::Delta => &grid.values_delta,
            GridView::Normalized => &grid.values_normalized,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GridView::Raw => "raw",
            GridView::Delta => "delta",
            GridView::Normalized => "normalized",
        }
    }

    /// Delta and normalized values are signed effects centered on zero.
    fn diverging(self) -> bool {
        !matches!(self, GridView::Raw)
    }
}

impl std::str::FromStr for GridView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(GridView::Raw),
            "delta" => Ok(GridView::Delta),
            "normalized" => Ok(GridView::Normalized),
            other => Err(Error::InvalidArgument(format!("unknown grid view `{other}`"))),
        }
    }
}

const CELL: usize = 36;
const LEFT: usize = 70;
const TOP: usize = 40;
const BOTTOM: usize = 60;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn mix(a: (f64, f64, f64), b: (f64, f64, f64), t: f64) -> String {
    let c = |x: f64, y: f64| (x + (y - x) * t).round().clamp(0.0, 255.0) as u8;
    format!("#{:02x}{:02x}{:02x}", c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
}

const BLUE: (f64, f64, f64) = (33.0, 102.0, 172.0);
const WHITE: (f64, f64, f64) = (247.0, 247.0, 247.0);
const RED: (f64, f64, f64) = (178.0, 24.0, 43.0);

/// Fill color for `v`. Diverging views map `[-limit, limit]` blue-white-red;
/// the raw view maps `[lo, hi]` white-to-red. A degenerate range paints
/// every cell the middle color.
fn color(v: f64, diverging: bool, lo: f64, hi: f64) -> String {
    if diverging {
        let limit = lo.abs().max(hi.abs());
        if limit == 0.0 {
            return mix(WHITE, WHITE, 0.0);
        }
        let t = (v / limit).clamp(-1.0, 1.0);
        if t >= 0.0 {
            mix(WHITE, RED, t)
        } else {
            mix(WHITE, BLUE, -t)
        }
    } else if hi == lo {
        mix(WHITE, RED, 0.5)
    } else {
        mix(WHITE, RED, ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
    }
}

/// Renders one view of `grid` as an SVG document; each cell carries its
/// value in a `<title>`.
pub fn grid_to_svg(grid: &PatchGrid, view: GridView) -> Result<String> {
    let values = view.values(grid);
    let rows = values.len();
    let cols = values.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyGrid);
    }
    if values.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidArgument("ragged grid".into()));
    }
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} grid values", view.name())));
    }
    let lo = values.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let label = |labels: &[String], i: usize, fallback: String| labels.get(i).cloned().unwrap_or(fallback);

    let width = LEFT + cols * CELL + 20;
    let height = TOP + rows * CELL + BOTTOM;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{} ({})</text>"#,
        LEFT + cols * CELL / 2,
        escape(grid.family.name()),
        view.name()
    );
    for (r, row) in values.iter().enumerate() {
        let rl = escape(&label(&grid.row_labels, r, format!("{r}")));
        let y = TOP + r * CELL;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" dominant-baseline="middle">{rl}</text>"#, LEFT - 6, y + CELL / 2);
        for (c, &v) in row.iter().enumerate() {
            let cl = escape(&label(&grid.col_labels, c, format!("{c}")));
            let x = LEFT + c * CELL;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>{rl} {cl}: {v}</title></rect>"#,
                color(v, view.diverging(), lo, hi)
            );
        }
    }
    let base = TOP + rows * CELL;
    for c in 0..cols {
        let cl = escape(&label(&grid.col_labels, c, format!("{c}")));
        let x = LEFT + c * CELL + CELL / 2;
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="end" transform="rotate(-45 {x} {})">{cl}</text>"#, base + 14, base + 14);
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">layer</text>"#,
        TOP + rows * CELL / 2,
        TOP + rows * CELL / 2
    );
    s.push_str("</svg>\n");
    Ok(s)
}
