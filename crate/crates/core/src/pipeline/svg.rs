// SPDX-License-Identifier: MIT OR Apache-2.0

//! Standalone SVG heatmaps and bar charts.
//!
//! Heatmap fills interpolate linearly in RGB from white (`#ffffff`) at the
//! scale minimum to dark blue (`#08306b`) at the maximum; values outside the
//! scale are clamped. Absent or flagged cells are drawn light grey with a
//! diagonal stroke. Coordinates are printed with fixed precision, so equal
//! inputs give byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const LOW: (f64, f64, f64) = (255.0, 255.0, 255.0);
const HIGH: (f64, f64, f64) = (8.0, 48.0, 107.0);
const ABSENT_FILL: &str = "#d9d9d9";
const CELL: f64 = 24.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 56.0;
const LEGEND: f64 = 90.0;

/// Linear map from `[min, max]` onto the white-to-blue ramp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorScale {
    pub min: f64,
    pub max: f64,
}

impl ColorScale {
    /// Spans the present values; `None` when there are none.
    pub fn fit(matrix: &[Vec<Option<f64>>]) -> Option<Self> {
        let mut it = matrix.iter().flatten().flatten().copied();
        let first = it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(Self { min, max })
    }

    /// `#rrggbb` for `v`.
    pub fn color(&self, v: f64) -> String {
        let span = self.max - self.min;
        let t = if span > 0.0 {
            ((v - self.min) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
        format!(
            "#{:02x}{:02x}{:02x}",
            mix(LOW.0, HIGH.0),
            mix(LOW.1, HIGH.1),
            mix(LOW.2, HIGH.2)
        )
    }
}

/// Titles and axis labels for a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartLabels {
    pub title: String,
    pub x: String,
    pub y: String,
}

impl ChartLabels {
    /// Axis labels for a skipped-layer by affected-layer map.
    pub fn future_effect(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x: "l (affected layer)".into(),
            y: "s (skipped layer)".into(),
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Heatmap with row `i` drawn top to bottom and column `j` left to right.
/// `scale` defaults to [`ColorScale::fit`].
pub fn heatmap_svg(matrix: &[Vec<Option<f64>>], scale: Option<ColorScale>, labels: &ChartLabels) -> Result<String> {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::Param("heatmap matrix is empty".into()));
    }
    if matrix.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("heatmap rows differ in length".into()));
    }
    let scale = scale
        .or_else(|| ColorScale::fit(matrix))
        .unwrap_or(ColorScale { min: 0.0, max: 1.0 });
    let width = MARGIN_LEFT + cols as f64 * CELL + LEGEND;
    let height = MARGIN_TOP + rows as f64 * CELL + MARGIN_BOTTOM;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(&labels.title));
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN_LEFT:.1}" y="20" font-size="13">{}</text>"#,
        escape(&labels.title)
    );
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let x = MARGIN_LEFT + j as f64 * CELL;
            let y = MARGIN_TOP + i as f64 * CELL;
            match v {
                Some(v) => {
                    let _ = writeln!(
                        s,
                        r#"<rect class="cell" x="{x:.1}" y="{y:.1}" width="{CELL:.1}" height="{CELL:.1}" fill="{}"><title>({i}, {j}) {v:.6}</title></rect>"#,
                        scale.color(*v)
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        r##"<rect class="cell absent" x="{x:.1}" y="{y:.1}" width="{CELL:.1}" height="{CELL:.1}" fill="{ABSENT_FILL}" stroke="#ffffff"><title>({i}, {j}) absent</title></rect>"##
                    );
                    let _ = writeln!(
                        s,
                        r##"<line x1="{x:.1}" y1="{:.1}" x2="{:.1}" y2="{y:.1}" stroke="#9e9e9e"/>"##,
                        y + CELL,
                        x + CELL
                    );
                }
            }
        }
    }
    for i in 0..rows {
        let y = MARGIN_TOP + (i as f64 + 0.5) * CELL + 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">{i}</text>"#,
            MARGIN_LEFT - 4.0
        );
    }
    let grid_bottom = MARGIN_TOP + rows as f64 * CELL;
    for j in 0..cols {
        let x = MARGIN_LEFT + (j as f64 + 0.5) * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{j}</text>"#,
            grid_bottom + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="axis-x" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + cols as f64 * CELL / 2.0,
        grid_bottom + 36.0,
        escape(&labels.x)
    );
    let _ = writeln!(
        s,
        r#"<text class="axis-y" transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        MARGIN_TOP + rows as f64 * CELL / 2.0,
        escape(&labels.y)
    );
    let lx = MARGIN_LEFT + cols as f64 * CELL + 16.0;
    let _ = writeln!(
        s,
        r#"<defs><linearGradient id="ramp" x1="0" y1="1" x2="0" y2="0"><stop offset="0" stop-color="{}"/><stop offset="1" stop-color="{}"/></linearGradient></defs>"#,
        scale.color(scale.min),
        scale.color(scale.max)
    );
    let _ = writeln!(
        s,
        r##"<rect class="legend" x="{lx:.1}" y="{MARGIN_TOP:.1}" width="12" height="{:.1}" fill="url(#ramp)" stroke="#000000"/>"##,
        rows as f64 * CELL
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}">{:.3}</text>"#,
        lx + 16.0,
        MARGIN_TOP + 8.0,
        scale.max
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{grid_bottom:.1}">{:.3}</text>"#,
        lx + 16.0,
        scale.min
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Vertical bar chart around a zero baseline; `None` bars are omitted and
/// marked with a grey tick.
pub fn bar_chart_svg(values: &[Option<f64>], labels: &ChartLabels) -> Result<String> {
    if values.is_empty() {
        return Err(Error::Param("bar chart needs at least one value".into()));
    }
    let plot_h = 200.0;
    let bar = 20.0;
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let hi = present.iter().copied().fold(0.0f64, f64::max);
    let lo = present.iter().copied().fold(0.0f64, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y_of = |v: f64| MARGIN_TOP + (hi - v) / span * plot_h;
    let zero = y_of(0.0);
    let width = MARGIN_LEFT + values.len() as f64 * bar + 24.0;
    let height = MARGIN_TOP + plot_h + MARGIN_BOTTOM;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(&labels.title));
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN_LEFT:.1}" y="20" font-size="13">{}</text>"#,
        escape(&labels.title)
    );
    for (i, v) in values.iter().enumerate() {
        let x = MARGIN_LEFT + i as f64 * bar + 2.0;
        match v {
            Some(v) => {
                let (top, h) = if *v >= 0.0 {
                    (y_of(*v), zero - y_of(*v))
                } else {
                    (zero, y_of(*v) - zero)
                };
                let _ = writeln!(
                    s,
                    r##"<rect class="bar" x="{x:.1}" y="{top:.1}" width="{:.1}" height="{h:.1}" fill="#2171b5"><title>{i}: {v:.6}</title></rect>"##,
                    bar - 4.0
                );
            }
            None => {
                let _ = writeln!(
                    s,
                    r#"<rect class="bar absent" x="{x:.1}" y="{:.1}" width="{:.1}" height="2" fill="{ABSENT_FILL}"><title>{i}: absent</title></rect>"#,
                    zero - 1.0,
                    bar - 4.0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{i}</text>"#,
            x + (bar - 4.0) / 2.0,
            MARGIN_TOP + plot_h + 14.0
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{MARGIN_LEFT:.1}" y1="{zero:.1}" x2="{:.1}" y2="{zero:.1}" stroke="#000000"/>"##,
        width - 24.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{hi:.3}</text>"#,
        MARGIN_LEFT - 4.0,
        MARGIN_TOP + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{lo:.3}</text>"#,
        MARGIN_LEFT - 4.0,
        MARGIN_TOP + plot_h + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text class="axis-x" x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + values.len() as f64 * bar / 2.0,
        MARGIN_TOP + plot_h + 36.0,
        escape(&labels.x)
    );
    let _ = writeln!(
        s,
        r#"<text class="axis-y" transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        escape(&labels.y)
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes a heatmap to `path`.
pub fn emit_heatmap_svg(
    matrix: &[Vec<Option<f64>>],
    scale: Option<ColorScale>,
    labels: &ChartLabels,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let svg = heatmap_svg(matrix, scale, labels)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fills(svg: &str) -> Vec<&str> {
        svg.lines()
            .filter(|l| l.contains(r#"class="cell""#))
            .map(|l| l.split("fill=\"").nth(1).unwrap().split('"').next().unwrap())
            .collect()
    }

    #[test]
    fn single_cell() {
        let svg = heatmap_svg(&[vec![Some(0.5)]], None, &ChartLabels::future_effect("x")).unwrap();
        assert_eq!(svg.matches(r#"class="cell"#).count(), 1);
        assert!(svg.contains("s (skipped layer)") && svg.contains("l (affected layer)"));
    }

    #[test]
    fn equal_values_share_a_fill() {
        let m = vec![vec![Some(0.3); 3]; 2];
        let svg = heatmap_svg(&m, None, &ChartLabels::future_effect("x")).unwrap();
        let f = fills(&svg);
        assert_eq!(f.len(), 6);
        assert!(f.iter().all(|c| *c == f[0]));
    }

    #[test]
    fn absent_cells_are_distinct() {
        let m = vec![vec![None, Some(1.0)], vec![None, None]];
        let svg = heatmap_svg(
            &m,
            Some(ColorScale { min: 0.0, max: 1.0 }),
            &ChartLabels::future_effect("x"),
        )
        .unwrap();
        assert_eq!(svg.matches(r#"class="cell absent""#).count(), 3);
        assert_eq!(fills(&svg), vec!["#08306b"]);
    }

    #[test]
    fn color_scale_endpoints() {
        let c = ColorScale { min: -1.0, max: 1.0 };
        assert_eq!(c.color(-1.0), "#ffffff");
        assert_eq!(c.color(1.0), "#08306b");
        assert_eq!(c.color(5.0), "#08306b");
    }

    #[test]
    fn empty_inputs_rejected() {
        let l = ChartLabels::future_effect("x");
        assert!(heatmap_svg(&[], None, &l).is_err());
        assert!(heatmap_svg(&[vec![]], None, &l).is_err());
        assert!(bar_chart_svg(&[], &l).is_err());
    }

    #[test]
    fn bar_chart_handles_signs() {
        let l = ChartLabels {
            title: "t".into(),
            x: "layer".into(),
            y: "S".into(),
        };
        let svg = bar_chart_svg(&[Some(0.5), Some(-0.25), None], &l).unwrap();
        assert_eq!(svg.matches(r#"class="bar""#).count(), 2);
        assert_eq!(svg.matches(r#"class="bar absent""#).count(), 1);
        assert_eq!(svg, bar_chart_svg(&[Some(0.5), Some(-0.25), None], &l).unwrap());
    }
}
