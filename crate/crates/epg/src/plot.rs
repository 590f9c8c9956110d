//! Hand-emitted SVG: median line with quartile band for returns and KL,
//! a fitness curve for training logs, and a heat strip for sensitivities.

use std::fmt::Write as _;

use epg_core::sensitivity::SensitivityRow;

use crate::error::{CliError, Result};
use crate::traces::{summarize, TraceRow};

const WIDTH: f64 = 640.0;
const PANEL_HEIGHT: f64 = 220.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 40.0;

struct Series {
    x: Vec<f64>,
    mid: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Series {
    /// Drops points whose median is undefined.
    fn finite(self) -> Self {
        let keep: Vec<usize> = (0..self.x.len()).filter(|&i| self.mid[i].is_finite()).collect();
        let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect();
        Self { x: pick(&self.x), mid: pick(&self.mid), lo: pick(&self.lo), hi: pick(&self.hi) }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.1 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn panel(svg: &mut String, top: f64, title: &str, xlabel: &str, s: &Series) {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let (x0, x1) = range(s.x.iter().copied());
    let (y0, y1) = range(s.lo.iter().chain(&s.hi).chain(&s.mid).copied());
    let px = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| top + MARGIN_TOP + plot_h - (y - y0) / (y1 - y0) * plot_h;

    let _ = writeln!(
        svg,
        r##"<rect x="{:.2}" y="{:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#444"/>"##,
        MARGIN_LEFT,
        top + MARGIN_TOP
    );
    let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" font-size="14">{title}</text>"#, MARGIN_LEFT, top + 20.0);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{xlabel}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        top + PANEL_HEIGHT - 8.0
    );
    for (v, anchor_y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 4.0,
            anchor_y + 3.0,
            tick(v)
        );
    }
    for (v, anchor_x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(
            svg,
            r#"<text x="{anchor_x:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
            top + MARGIN_TOP + plot_h + 14.0,
            tick(v)
        );
    }
    if s.x.is_empty() {
        return;
    }
    let mut band = String::new();
    for i in 0..s.x.len() {
        let _ = write!(band, "{:.2},{:.2} ", px(s.x[i]), py(s.hi[i]));
    }
    for i in (0..s.x.len()).rev() {
        let _ = write!(band, "{:.2},{:.2} ", px(s.x[i]), py(s.lo[i]));
    }
    let _ =
        writeln!(svg, r##"<polygon points="{}" fill="#e8a0a0" fill-opacity="0.5" stroke="none"/>"##, band.trim_end());
    let line: Vec<String> = (0..s.x.len()).map(|i| format!("{:.2},{:.2}", px(s.x[i]), py(s.mid[i]))).collect();
    let _ =
        writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#b22222" stroke-width="1.5"/>"##, line.join(" "));
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn open(height: f64, comment: &str) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, "<!-- {comment} -->");
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    svg
}

/// Two stacked panels: return against environment steps and KL against
/// update index, each a median line over a quartile band.
pub fn traces_svg(traces: &[Vec<TraceRow>], config_hash: &str) -> Result<String> {
    if traces.iter().all(Vec::is_empty) {
        return Err(CliError::Config("cannot plot: every trace is empty".into()));
    }
    let rows = summarize(traces)?;
    let returns = Series {
        x: rows.iter().map(|r| r.step as f64).collect(),
        mid: rows.iter().map(|r| r.ret.0).collect(),
        lo: rows.iter().map(|r| r.ret.1).collect(),
        hi: rows.iter().map(|r| r.ret.2).collect(),
    }
    .finite();
    let kl = Series {
        x: rows.iter().map(|r| r.update_index as f64).collect(),
        mid: rows.iter().map(|r| r.kl.0).collect(),
        lo: rows.iter().map(|r| r.kl.1).collect(),
        hi: rows.iter().map(|r| r.kl.2).collect(),
    }
    .finite();
    let mut svg = open(2.0 * PANEL_HEIGHT, &format!("config_hash={config_hash} traces={}", traces.len()));
    panel(&mut svg, 0.0, "episodic return (median, quartile band)", "environment steps", &returns);
    panel(&mut svg, PANEL_HEIGHT, "KL(before || after) per update", "update", &kl);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Mean fitness per epoch with the min..max band.
pub fn training_svg(epochs: &[(u64, f64, f64, f64)], config_hash: &str) -> Result<String> {
    if epochs.is_empty() {
        return Err(CliError::Config("cannot plot: training log is empty".into()));
    }
    let s = Series {
        x: epochs.iter().map(|e| e.0 as f64).collect(),
        mid: epochs.iter().map(|e| e.1).collect(),
        lo: epochs.iter().map(|e| e.2).collect(),
        hi: epochs.iter().map(|e| e.3).collect(),
    };
    let mut svg = open(PANEL_HEIGHT, &format!("config_hash={config_hash}"));
    panel(&mut svg, 0.0, "mean worker fitness (min..max band)", "epoch", &s);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// One strip per channel kind, one cell per buffer timestep, shaded by
/// gradient norm relative to the largest; direct-path kinds get their own
/// strips holding a single cell at the evaluated step.
pub fn sensitivity_svg(rows: &[SensitivityRow], config_hash: &str) -> Result<String> {
    if rows.is_empty() {
        return Err(CliError::Config("cannot plot: no sensitivity rows".into()));
    }
    let mut kinds: Vec<&str> = Vec::new();
    for r in rows {
        if !kinds.contains(&r.kind.as_str()) {
            kinds.push(&r.kind);
        }
    }
    let steps = rows.iter().map(|r| r.timestep).max().unwrap_or(0) + 1;
    let max = rows.iter().map(|r| r.grad_norm).fold(0.0, f64::max);
    let strip_h = 18.0;
    let label_w = 120.0;
    let cell_w = (WIDTH - label_w - MARGIN_RIGHT) / steps as f64;
    let height = MARGIN_TOP + strip_h * kinds.len() as f64 + MARGIN_BOTTOM;
    let mut svg = open(height, &format!("config_hash={config_hash} max_grad_norm={}", tick(max)));
    let _ =
        writeln!(svg, r#"<text x="{label_w}" y="20" font-size="13">|dL_t/dx_i| by input kind and buffer step</text>"#);
    for (k, kind) in kinds.iter().enumerate() {
        let y = MARGIN_TOP + k as f64 * strip_h;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{kind}</text>"#,
            label_w - 4.0,
            y + strip_h * 0.7
        );
        for r in rows.iter().filter(|r| r.kind == *kind) {
            let shade = if max > 0.0 { r.grad_norm / max } else { 0.0 };
            let level = (255.0 * (1.0 - shade)).round() as u8;
            let _ = writeln!(
                svg,
                r##"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#ff{level:02x}{level:02x}"/>"##,
                label_w + r.timestep as f64 * cell_w,
                cell_w.max(0.5),
                strip_h - 2.0
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">buffer step (oldest to newest)</text>"#,
        label_w + (WIDTH - label_w - MARGIN_RIGHT) / 2.0,
        height - 12.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(values: &[f64]) -> Vec<TraceRow> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| TraceRow { step: 64 * (i + 1), episode_return: *v, update_index: i, kl: 0.01 })
            .collect()
    }

    #[test]
    fn flat_trace_gives_horizontal_line() {
        let svg = traces_svg(&[trace(&[3.0, 3.0, 3.0])], "h").unwrap();
        let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let ys: Vec<&str> = line.split('"').nth(1).unwrap().split(' ').map(|p| p.split(',').nth(1).unwrap()).collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("config_hash=h"));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(traces_svg(&[], "h").is_err());
        assert!(traces_svg(&[vec![]], "h").is_err());
        assert!(sensitivity_svg(&[], "h").is_err());
        assert!(training_svg(&[], "h").is_err());
    }

    #[test]
    fn output_is_deterministic() {
        let t = vec![trace(&[1.0, 2.0, 4.0]), trace(&[0.5, 2.5, 3.0])];
        assert_eq!(traces_svg(&t, "h").unwrap(), traces_svg(&t, "h").unwrap());
    }

    #[test]
    fn heat_strip_has_cell_per_row() {
        let rows: Vec<SensitivityRow> = (0..4)
            .map(|t| SensitivityRow { timestep: t, kind: "state".into(), grad_norm: t as f64 })
            .chain([SensitivityRow { timestep: 3, kind: "direct_state".into(), grad_norm: 6.0 }])
            .collect();
        let svg = sensitivity_svg(&rows, "h").unwrap();
        assert_eq!(svg.matches("<rect x=").count(), 5);
        assert!(svg.contains("#ff0000"));
    }
}
