//! Bird's-eye SVG scatter plots of generated clouds.
//!
//! Points are filled and coloured by RCS from blue (low) to red (high);
//! optional ground truth is drawn as hollow grey circles underneath.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::synth::{RCS_MAX, RCS_MIN};
use crate::types::{GeneratedPoint, RadarPoint, SceneGeneration, ScenePair};

const SIZE: f64 = 640.0;
const MARGIN: f64 = 48.0;

/// Blue-to-red colour for an RCS value; values outside `[lo, hi]` saturate.
pub fn rcs_color(rcs: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo { ((rcs - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let r = (255.0 * t).round() as u8;
    let b = (255.0 * (1.0 - t)).round() as u8;
    let g = (96.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8;
    [r, g, b]
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let inner = SIZE - 2.0 * MARGIN;
        let px = MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * inner;
        let py = SIZE - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * inner;
        (px, py)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_scene_svg(scene_id: &str, points: &[GeneratedPoint], gt: Option<&[RadarPoint]>, grid: &GridConfig) -> String {
    let f = Frame {
        x_min: grid.x_min,
        x_max: grid.x_max,
        y_min: grid.y_min,
        y_max: grid.y_max,
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(scene_id));
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let (x0, y0) = f.map(f.x_min, f.y_max);
    let (x1, y1) = f.map(f.x_max, f.y_min);
    let _ = writeln!(
        s,
        r##"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="#000" stroke-width="1"/>"##,
        x1 - x0,
        y1 - y0
    );
    let _ = writeln!(s, r##"<g font-family="sans-serif" font-size="11" fill="#000">"##);
    let _ = writeln!(s, r#"<text x="{x0}" y="{}">{}</text>"#, y1 + 16.0, f.x_min);
    let _ = writeln!(s, r#"<text x="{x1}" y="{}" text-anchor="end">{}</text>"#, y1 + 16.0, f.x_max);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">x [m]</text>"#, 0.5 * (x0 + x1), y1 + 32.0);
    let _ = writeln!(s, r#"<text x="{}" y="{y1}" text-anchor="end">{}</text>"#, x0 - 6.0, f.y_min);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 6.0, y0 + 10.0, f.y_max);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">y [m]</text>"#, x0 - 24.0, 0.5 * (y0 + y1));
    let _ = writeln!(s, r#"<text x="{x0}" y="{}">{}</text>"#, y0 - 12.0, escape(scene_id));
    let _ = writeln!(s, "</g>");
    if let Some(gt) = gt {
        let _ = writeln!(s, r##"<g fill="none" stroke="#808080" stroke-width="0.8">"##);
        for p in gt {
            let (px, py) = f.map(p.x, p.y);
            let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="3"/>"#);
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "<g>");
    for p in points {
        let (px, py) = f.map(p.x, p.y);
        let [r, g, b] = rcs_color(p.rcs, RCS_MIN, RCS_MAX);
        let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.8" fill="rgb({r},{g},{b})"/>"#);
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

/// File name for a scene's plot: the scene id with anything outside
/// `[A-Za-z0-9_.-]` replaced by `_`.
pub fn plot_file_name(scene_id: &str) -> String {
    let stem: String = scene_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "_.-".contains(c) { c } else { '_' })
        .collect();
    format!("{stem}.svg")
}

/// One SVG per generated scene in `dir`. With `gt`, scene ids must match
/// those of `gens` one to one, in the same order.
pub fn write_plots(gens: &[SceneGeneration], gt: Option<&[ScenePair]>, grid: &GridConfig, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if let Some(gt) = gt {
        if gt.len() != gens.len() {
            return Err(Error::Invalid(format!("{} generated scenes but {} ground-truth scenes", gens.len(), gt.len())));
        }
        if let Some((a, b)) = gens.iter().zip(gt).find(|(a, b)| a.scene_id != b.scene_id) {
            return Err(Error::Invalid(format!("scene id mismatch: '{}' vs ground truth '{}'", a.scene_id, b.scene_id)));
        }
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(gens.len());
    for (i, g) in gens.iter().enumerate() {
        let target = gt.map(|t| &t[i].target.points[..]);
        let svg = render_scene_svg(&g.scene_id, &g.points, target, grid);
        let path = dir.join(plot_file_name(&g.scene_id));
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
