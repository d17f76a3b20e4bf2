//! Self-contained SVG figures.

use std::fmt::Write as _;

use deltafm::data::LabeledPointCloud;
use deltafm::sampler::TrajectoryRecord;
use deltafm::trainer::LossRecord;

use crate::error::CliError;

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const NOISE_COLOR: &str = "#8a2be2";
const MAX_TRAJECTORIES: usize = 200;

pub fn class_color(c: usize) -> &'static str {
    PALETTE[c % PALETTE.len()]
}

/// Trajectories grouped by class: `groups[c]` holds the trajectories of class `c`.
pub type TrajectoryGroups = Vec<Vec<Vec<TrajectoryRecord>>>;

#[derive(Debug, Clone, Copy)]
struct Bounds {
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Bounds {
    fn of(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut b = Bounds { xmin: f64::INFINITY, xmax: f64::NEG_INFINITY, ymin: f64::INFINITY, ymax: f64::NEG_INFINITY };
        for (x, y) in points {
            if x.is_finite() && y.is_finite() {
                b.xmin = b.xmin.min(x);
                b.xmax = b.xmax.max(x);
                b.ymin = b.ymin.min(y);
                b.ymax = b.ymax.max(y);
            }
        }
        if !b.xmin.is_finite() {
            return Bounds { xmin: -1.0, xmax: 1.0, ymin: -1.0, ymax: 1.0 };
        }
        let pad_x = 0.05 * (b.xmax - b.xmin).max(1e-9);
        let pad_y = 0.05 * (b.ymax - b.ymin).max(1e-9);
        Bounds { xmin: b.xmin - pad_x, xmax: b.xmax + pad_x, ymin: b.ymin - pad_y, ymax: b.ymax + pad_y }
    }

    fn union(self, o: Bounds) -> Bounds {
        Bounds {
            xmin: self.xmin.min(o.xmin),
            xmax: self.xmax.max(o.xmax),
            ymin: self.ymin.min(o.ymin),
            ymax: self.ymax.max(o.ymax),
        }
    }
}

/// A rectangle of the canvas mapped to a data window.
#[derive(Debug, Clone, Copy)]
struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    b: Bounds,
}

impl Frame {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let px = self.left + (x - self.b.xmin) / (self.b.xmax - self.b.xmin) * self.width;
        let py = self.top + self.height - (y - self.b.ymin) / (self.b.ymax - self.b.ymin) * self.height;
        (px, py)
    }

    fn border(&self, out: &mut String, title: &str) {
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444" stroke-width="1"/>"##,
            self.left, self.top, self.width, self.height
        );
        if !title.is_empty() {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
                self.left + self.width / 2.0,
                self.top - 6.0,
                escape(title)
            );
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn require_2d(groups: &[Vec<Vec<TrajectoryRecord>>]) -> Result<(), CliError> {
    for traj in groups.iter().flatten() {
        for r in traj {
            if r.state.len() != 2 {
                return Err(CliError::UnsupportedDimension(format!(
                    "flow plots need 2-D states, got {}",
                    r.state.len()
                )));
            }
        }
    }
    Ok(())
}

fn trajectory_bounds(groups: &[Vec<Vec<TrajectoryRecord>>]) -> Bounds {
    Bounds::of(groups.iter().flatten().flatten().map(|r| (r.state[0], r.state[1])))
}

/// Gaussian kernel density shading of the data on a coarse grid.
fn density_shading(out: &mut String, frame: &Frame, data: &LabeledPointCloud) {
    const CELLS: usize = 40;
    let n = data.len().min(2000);
    if n == 0 {
        return;
    }
    let step = data.len() / n;
    let pts: Vec<&[f64]> = data.points().iter().step_by(step.max(1)).map(|p| p.as_slice()).collect();
    let sd = |k: usize| {
        let m = pts.iter().map(|p| p[k]).sum::<f64>() / pts.len() as f64;
        (pts.iter().map(|p| (p[k] - m).powi(2)).sum::<f64>() / pts.len() as f64).sqrt()
    };
    // Scott's rule in two dimensions.
    let factor = (pts.len() as f64).powf(-1.0 / 6.0);
    let (hx, hy) = ((sd(0) * factor).max(1e-6), (sd(1) * factor).max(1e-6));
    let b = frame.b;
    let (dx, dy) = ((b.xmax - b.xmin) / CELLS as f64, (b.ymax - b.ymin) / CELLS as f64);
    let mut grid = vec![0.0; CELLS * CELLS];
    for i in 0..CELLS {
        for j in 0..CELLS {
            let (x, y) = (b.xmin + (i as f64 + 0.5) * dx, b.ymin + (j as f64 + 0.5) * dy);
            grid[i * CELLS + j] = pts
                .iter()
                .map(|p| (-0.5 * (((p[0] - x) / hx).powi(2) + ((p[1] - y) / hy).powi(2))).exp())
                .sum();
        }
    }
    let top = grid.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return;
    }
    let _ = writeln!(out, r#"<g class="density">"#);
    for i in 0..CELLS {
        for j in 0..CELLS {
            let a = 0.35 * grid[i * CELLS + j] / top;
            if a < 0.01 {
                continue;
            }
            let (px, py) = frame.map(b.xmin + i as f64 * dx, b.ymin + (j + 1) as f64 * dy);
            let _ = writeln!(
                out,
                r##"<rect x="{px:.2}" y="{py:.2}" width="{:.2}" height="{:.2}" fill="#555" fill-opacity="{a:.3}"/>"##,
                frame.width / CELLS as f64,
                frame.height / CELLS as f64
            );
        }
    }
    let _ = writeln!(out, "</g>");
}

fn data_scatter(out: &mut String, frame: &Frame, data: &LabeledPointCloud) {
    let _ = writeln!(out, r#"<g class="data">"#);
    let step = (data.len() / 1000).max(1);
    for (p, &c) in data.points().iter().zip(data.labels()).step_by(step) {
        let (x, y) = frame.map(p[0], p[1]);
        let _ = writeln!(
            out,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.5" fill="{}" fill-opacity="0.35"/>"#,
            class_color(c)
        );
    }
    let _ = writeln!(out, "</g>");
}

fn flow_panel(
    out: &mut String,
    frame: &Frame,
    groups: &[Vec<Vec<TrajectoryRecord>>],
    data: Option<&LabeledPointCloud>,
    title: &str,
) {
    if let Some(d) = data {
        density_shading(out, frame, d);
        data_scatter(out, frame, d);
    }
    for (c, group) in groups.iter().enumerate() {
        let color = class_color(c);
        let _ = writeln!(out, r#"<g class="class-{c}">"#);
        for traj in group.iter().take(MAX_TRAJECTORIES) {
            let pts: Vec<String> = traj
                .iter()
                .map(|r| {
                    let (x, y) = frame.map(r.state[0], r.state[1]);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline class="traj" points="{}" fill="none" stroke="{color}" stroke-opacity="0.5" stroke-width="0.8"/>"#,
                pts.join(" ")
            );
            if let Some(first) = traj.first() {
                let (x, y) = frame.map(first.state[0], first.state[1]);
                let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.2" fill="{NOISE_COLOR}"/>"#);
            }
        }
        let _ = writeln!(out, "</g>");
    }
    frame.border(out, title);
}

fn data_bounds(data: Option<&LabeledPointCloud>) -> Option<Bounds> {
    data.filter(|d| d.dim() == 2)
        .map(|d| Bounds::of(d.points().iter().map(|p| (p[0], p[1]))))
}

fn check_data(data: Option<&LabeledPointCloud>) -> Result<(), CliError> {
    match data {
        Some(d) if d.dim() != 2 => Err(CliError::UnsupportedDimension(format!(
            "flow plots need 2-D data, got {}",
            d.dim()
        ))),
        _ => Ok(()),
    }
}

/// Class-coloured trajectories over the data.
pub fn flows(groups: &[Vec<Vec<TrajectoryRecord>>], data: Option<&LabeledPointCloud>) -> Result<String, CliError> {
    require_2d(groups)?;
    check_data(data)?;
    let mut b = trajectory_bounds(groups);
    if let Some(db) = data_bounds(data) {
        b = b.union(db);
    }
    let frame = Frame { left: 20.0, top: 30.0, width: 560.0, height: 560.0, b };
    let mut out = header(600.0, 610.0);
    flow_panel(&mut out, &frame, groups, data, "");
    out.push_str("</svg>\n");
    Ok(out)
}

/// Plain flow matching on top, contrastive below, on a shared window.
pub fn panels(
    fm: &[Vec<Vec<TrajectoryRecord>>],
    delta_fm: &[Vec<Vec<TrajectoryRecord>>],
    data: Option<&LabeledPointCloud>,
) -> Result<String, CliError> {
    require_2d(fm)?;
    require_2d(delta_fm)?;
    check_data(data)?;
    let mut b = trajectory_bounds(fm).union(trajectory_bounds(delta_fm));
    if let Some(db) = data_bounds(data) {
        b = b.union(db);
    }
    let top = Frame { left: 20.0, top: 30.0, width: 560.0, height: 400.0, b };
    let bottom = Frame { top: 470.0, ..top };
    let mut out = header(600.0, 890.0);
    let _ = writeln!(out, r#"<g id="fm">"#);
    flow_panel(&mut out, &top, fm, data, "FM");
    let _ = writeln!(out, "</g>\n<g id=\"delta-fm\">");
    flow_panel(&mut out, &bottom, delta_fm, data, "ΔFM");
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

/// One small panel per recorded step showing the posterior-mean estimates.
pub fn denoise_strip(groups: &[Vec<Vec<TrajectoryRecord>>]) -> Result<String, CliError> {
    require_2d(groups)?;
    let first = groups
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| CliError::Usage("no trajectories to plot".into()))?;
    let steps: Vec<(usize, f64)> = first.iter().map(|r| (r.step, r.t)).collect();
    let b = Bounds::of(groups.iter().flatten().flatten().map(|r| (r.expectation[0], r.expectation[1])));
    let size = 150.0;
    let gap = 12.0;
    let width = gap + steps.len() as f64 * (size + gap);
    let mut out = header(width, size + 50.0);
    for (k, &(step, t)) in steps.iter().enumerate() {
        let frame = Frame { left: gap + k as f64 * (size + gap), top: 30.0, width: size, height: size, b };
        let _ = writeln!(out, r#"<g class="snapshot" data-step="{step}">"#);
        for (c, group) in groups.iter().enumerate() {
            for traj in group.iter().take(MAX_TRAJECTORIES) {
                if let Some(r) = traj.get(k) {
                    let (x, y) = frame.map(r.expectation[0], r.expectation[1]);
                    let _ = writeln!(
                        out,
                        r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.5" fill="{}" fill-opacity="0.6"/>"#,
                        class_color(c)
                    );
                }
            }
        }
        frame.border(&mut out, &format!("t = {t:.2}"));
        let _ = writeln!(out, "</g>");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Loss terms against iteration, one stroke style per term and one colour per run.
pub fn loss_curves(runs: &[(String, Vec<LossRecord>)]) -> Result<String, CliError> {
    if runs.iter().all(|(_, h)| h.is_empty()) {
        return Err(CliError::Usage("no loss records to plot".into()));
    }
    let series = |r: &LossRecord| [r.fm_term, r.contrastive_term, r.total];
    let b = Bounds::of(runs.iter().flat_map(|(_, h)| {
        h.iter().flat_map(move |r| series(r).into_iter().map(move |v| (r.iteration as f64, v)))
    }));
    let frame = Frame { left: 60.0, top: 30.0, width: 620.0, height: 380.0, b };
    let mut out = header(760.0, 470.0);
    let dashes = ["", "6,3", "2,2"];
    let names = ["fm_term", "contrastive_term", "total"];
    for (ri, (label, history)) in runs.iter().enumerate() {
        // Long runs are thinned to at most ~2000 vertices per curve.
        let stride = (history.len() / 2000).max(1);
        for (s, dash) in dashes.iter().enumerate() {
            let pts: Vec<String> = history
                .iter()
                .step_by(stride)
                .map(|r| {
                    let (x, y) = frame.map(r.iteration as f64, series(r)[s]);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline class="loss {}" data-run="{}" points="{}" fill="none" stroke="{}" stroke-width="1" stroke-dasharray="{dash}"/>"#,
                names[s],
                escape(label),
                pts.join(" "),
                class_color(ri)
            );
        }
    }
    for (s, name) in names.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="450" font-family="sans-serif" font-size="12">{} {name}</text>"#,
            60 + 200 * s,
            ["solid", "dashed", "dotted"][s]
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="20" y="{:.2}" font-family="sans-serif" font-size="11">{:.3}</text><text x="20" y="{:.2}" font-family="sans-serif" font-size="11">{:.3}</text>"#,
        frame.top + 10.0,
        b.ymax,
        frame.top + frame.height,
        b.ymin
    );
    frame.border(&mut out, "loss");
    out.push_str("</svg>\n");
    Ok(out)
}
