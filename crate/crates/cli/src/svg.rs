//! Self-contained SVG rendering of a scene, its forecast, and the agent-map
//! attention of each mode.

use std::fmt::Write;

use mmtp::model::Prediction;
use mmtp::Scene;

pub const PX_PER_M: f64 = 8.0;
pub const MARGIN_M: f64 = 5.0;
/// Panels per row of the mode grid.
pub const COLUMNS: usize = 3;

pub const LANE: &str = "#9e9e9e";
pub const HISTORY: &str = "#d62728";
pub const NEIGHBOR: &str = "#1f4fd8";
pub const PREDICTION: &str = "#f2c200";
pub const TRUTH: &str = "#2ca02c";
pub const ATTENTION: &str = "#d62728";

/// Meters to pixels: fixed scale, y flipped, fitted to a bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mapping {
    pub min_x: f64,
    pub max_y: f64,
    pub width: f64,
    pub height: f64,
}

impl Mapping {
    /// Fits `points` with a [`MARGIN_M`] border.
    pub fn fit(points: impl IntoIterator<Item = [f64; 2]>) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if lo[0] > hi[0] {
            (lo, hi) = ([0.0; 2], [0.0; 2]);
        }
        Self {
            min_x: lo[0] - MARGIN_M,
            max_y: hi[1] + MARGIN_M,
            width: (hi[0] - lo[0] + 2.0 * MARGIN_M) * PX_PER_M,
            height: (hi[1] - lo[1] + 2.0 * MARGIN_M) * PX_PER_M,
        }
    }

    pub fn px(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.min_x) * PX_PER_M, (self.max_y - p[1]) * PX_PER_M]
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn polyline(out: &mut String, m: &Mapping, pts: &[[f64; 2]], color: &str, width: f64) {
    if pts.len() < 2 {
        return;
    }
    let coords: Vec<String> = pts
        .iter()
        .map(|&p| {
            let [x, y] = m.px(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}" stroke-linecap="round"/>"#,
        coords.join(" ")
    );
}

fn history(h: &mmtp::scene::AgentHistory) -> Vec<[f64; 2]> {
    h.states.iter().zip(&h.valid).filter(|(_, &ok)| ok).map(|(s, _)| [s.x, s.y]).collect()
}

/// Every point drawn for a scene, used to fit the view.
fn extent(scene: &Scene, pred: &Prediction) -> Vec<[f64; 2]> {
    let mut pts = history(&scene.target);
    for n in &scene.neighbors {
        pts.extend(history(n));
    }
    for l in scene.lanes.iter().filter(|l| l.valid) {
        pts.extend(l.waypoints.iter().map(|w| [w.x, w.y]));
    }
    pts.extend(pred.set.trajectories.iter().flatten().copied());
    pts.extend(scene.future.iter().flatten().copied());
    pts
}

/// One panel per mode, laid out [`COLUMNS`] to a row. Waypoints whose
/// attention exceeds `min_score` are red circles with opacity proportional
/// to the score.
pub fn render(scene: &Scene, pred: &Prediction, waypoints_per_lane: usize, min_score: f64) -> String {
    let m = Mapping::fit(extent(scene, pred));
    let k = pred.set.trajectories.len();
    let cols = k.clamp(1, COLUMNS);
    let rows = k.div_ceil(cols).max(1);
    let title = 20.0;
    let (pw, ph) = (m.width, m.height + title);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#,
        w = pw * cols as f64,
        h = ph * rows as f64
    );
    let _ = writeln!(out, "<title>{}</title>", escape(&scene.id));
    let start = [[0.0, 0.0]];
    for j in 0..k {
        let (ox, oy) = ((j % cols) as f64 * pw, (j / cols) as f64 * ph);
        let _ = writeln!(out, r#"<g transform="translate({ox:.2},{oy:.2})">"#);
        let _ = writeln!(out, r##"<rect width="{pw:.2}" height="{ph:.2}" fill="#ffffff" stroke="#cccccc"/>"##);
        let _ = writeln!(
            out,
            r#"<text x="6" y="14" font-family="sans-serif" font-size="12">mode {j}  p={:.3}</text>"#,
            pred.set.probs[j]
        );
        let _ = writeln!(out, r#"<g transform="translate(0,{title})">"#);
        for l in scene.lanes.iter().filter(|l| l.valid) {
            let pts: Vec<[f64; 2]> = l.waypoints.iter().map(|w| [w.x, w.y]).collect();
            polyline(&mut out, &m, &pts, LANE, 1.5);
        }
        for n in &scene.neighbors {
            polyline(&mut out, &m, &history(n), NEIGHBOR, 2.0);
        }
        polyline(&mut out, &m, &history(&scene.target), HISTORY, 2.5);
        if let Some(f) = &scene.future {
            polyline(&mut out, &m, &[&start[..], f].concat(), TRUTH, 2.5);
        }
        polyline(&mut out, &m, &[&start[..], &pred.set.trajectories[j]].concat(), PREDICTION, 2.5);
        if let Some(row) = pred.attention.get(j) {
            let top = row.iter().copied().fold(0.0, f64::max);
            for (slot, &score) in row.iter().enumerate() {
                if score <= min_score || top <= 0.0 {
                    continue;
                }
                let Some(w) =
                    scene.lanes.get(slot / waypoints_per_lane).and_then(|l| l.waypoints.get(slot % waypoints_per_lane))
                else {
                    continue;
                };
                let [x, y] = m.px([w.x, w.y]);
                let _ = writeln!(
                    out,
                    r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{ATTENTION}" fill-opacity="{:.3}"/>"#,
                    score / top
                );
            }
        }
        out.push_str("</g>\n</g>\n");
    }
    out.push_str("</svg>\n");
    out
}
