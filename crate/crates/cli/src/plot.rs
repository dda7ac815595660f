//! Minimal SVG line, scatter and heat plots.

use std::fmt::Write as _;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;

/// Axis-aligned data bounds with a small pad so flat series stay visible.
struct Bounds {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Bounds {
    fn of<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let mut b = Bounds { x0: f64::MAX, x1: f64::MIN, y0: f64::MAX, y1: f64::MIN };
        for &(x, y) in points {
            b.x0 = b.x0.min(x);
            b.x1 = b.x1.max(x);
            b.y0 = b.y0.min(y);
            b.y1 = b.y1.max(y);
        }
        if b.x0 > b.x1 {
            return Bounds { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        // equal scale on both axes keeps trajectories undistorted
        let span = (b.x1 - b.x0).max(b.y1 - b.y0).max(1e-9) * 1.05;
        let (cx, cy) = ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0);
        Bounds { x0: cx - span / 2.0, x1: cx + span / 2.0, y0: cy - span / 2.0, y1: cy + span / 2.0 }
    }

    fn map(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let inner = SIZE - 2.0 * MARGIN;
        (
            MARGIN + (x - self.x0) / (self.x1 - self.x0) * inner,
            SIZE - MARGIN - (y - self.y0) / (self.y1 - self.y0) * inner,
        )
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{MARGIN}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Blue-to-red ramp for `v` in [0, 1].
fn color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let (r, b) = ((255.0 * v) as u8, (255.0 * (1.0 - v)) as u8);
    format!("rgb({r},40,{b})")
}

/// Named polylines on shared, equally scaled axes.
pub fn lines(title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let bounds = Bounds::of(series.iter().flat_map(|(_, pts)| pts.iter()));
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut svg = header(title);
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = palette[i % palette.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|p| {
                let (x, y) = bounds.map(*p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{c}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            SIZE - MARGIN - 100.0,
            24.0 + 14.0 * i as f64,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Points colored by a value normalized over the set.
pub fn scatter(title: &str, points: &[((f64, f64), f64)]) -> String {
    let xy: Vec<(f64, f64)> = points.iter().map(|(p, _)| (p.0, -p.1)).collect();
    let bounds = Bounds::of(xy.iter());
    let (lo, hi) = points
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), (_, v)| (lo.min(*v), hi.max(*v)));
    let span = (hi - lo).max(1e-12);
    let mut svg = header(title);
    for (p, (_, v)) in xy.iter().zip(points) {
        let (x, y) = bounds.map(*p);
        let _ = writeln!(
            svg,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\" fill=\"{}\"/>",
            color((v - lo) / span)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Row-major `width x height` map as colored cells, first row on top.
pub fn heat(title: &str, width: usize, height: usize, data: &[f64]) -> String {
    let (lo, hi) = data
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let span = (hi - lo).max(1e-12);
    let inner = SIZE - 2.0 * MARGIN;
    let cell = inner / width.max(height).max(1) as f64;
    let mut svg = header(title);
    for y in 0..height {
        for x in 0..width {
            let _ = writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"{}\"/>",
                MARGIN + x as f64 * cell,
                MARGIN + y as f64 * cell,
                color((data[y * width + x] - lo) / span)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_emits_one_rect_per_cell() {
        let svg = heat("m", 3, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(svg.matches("<rect x=").count(), 6);
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn flat_series_stays_finite() {
        let svg = lines("flat", &[("a", vec![(1.0, 1.0), (1.0, 1.0)])]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn titles_are_escaped() {
        assert!(scatter("a<b", &[((0.0, 0.0), 1.0)]).contains("a&lt;b"));
    }
}
