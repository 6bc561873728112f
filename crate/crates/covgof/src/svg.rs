//! Static line charts as standalone SVG.

use std::fmt::Write;

pub struct Series {
    pub name: String,
    /// `(x, y, standard error)`.
    pub points: Vec<(f64, f64, f64)>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Dashed horizontal reference line, e.g. the nominal level.
    pub reference: Option<f64>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6a4c93", "#555555"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

/// Roughly `target` round tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last).map(|i| (i as f64 * step * 1e9).round() / 1e9).collect()
}

fn fmt_tick(x: f64) -> String {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        "0".into()
    } else {
        format!("{r}")
    }
}

impl Chart {
    pub fn render(&self) -> String {
        let xs = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            (x0, x1) = (x0 - 0.5, x1 + 0.5);
        }
        let (y0, y1) = (0.0, 1.0);
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y.clamp(y0, y1) - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"##
        );
        let _ = writeln!(s, r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"##);
        let _ = writeln!(
            s,
            r##"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"##,
            LEFT + pw / 2.0,
            escape(&self.title)
        );

        let _ = writeln!(s, r##"<g class="axes" stroke="#888" stroke-width="1">"##);
        for t in ticks(x0, x1, 6) {
            let x = sx(t);
            let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#eee"/>"##, TOP, TOP + ph);
        }
        for t in ticks(y0, y1, 5) {
            let y = sy(t);
            let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#eee"/>"##, LEFT + pw);
        }
        let _ = writeln!(s, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none"/>"##);
        let _ = writeln!(s, "</g>");

        let _ = writeln!(s, r##"<g class="ticks" fill="#333">"##);
        for t in ticks(x0, x1, 6) {
            let _ = writeln!(
                s,
                r##"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                sx(t),
                TOP + ph + 16.0,
                fmt_tick(t)
            );
        }
        for t in ticks(y0, y1, 5) {
            let _ = writeln!(
                s,
                r##"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                LEFT - 6.0,
                sy(t) + 4.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(s, "</g>");
        let _ = writeln!(
            s,
            r##"<text class="x-label" x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            LEFT + pw / 2.0,
            HEIGHT - 14.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r##"<text class="y-label" x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"##,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );

        if let Some(r) = self.reference {
            let y = sy(r);
            let _ = writeln!(
                s,
                r##"<line class="reference" x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#999" stroke-dasharray="4 3"/>"##,
                LEFT + pw
            );
        }

        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let name = escape(&series.name);
            let _ = writeln!(s, r##"<g class="series" data-name="{name}" stroke="{color}" fill="{color}">"##);
            for &(x, y, se) in &series.points {
                if se > 0.0 {
                    let _ = writeln!(
                        s,
                        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke-opacity="0.5"/>"##,
                        sx(x),
                        sy(y - 2.0 * se),
                        sx(x),
                        sy(y + 2.0 * se)
                    );
                }
            }
            let pts: Vec<String> = series.points.iter().map(|&(x, y, _)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke-width="2"/>"##, pts.join(" "));
            for &(x, y, _) in &series.points {
                let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3"/>"##, sx(x), sy(y));
            }
            let _ = writeln!(s, "</g>");
        }

        let _ = writeln!(s, r##"<g class="legend">"##);
        let lx = LEFT + pw + 16.0;
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let y = TOP + 12.0 + 20.0 * i as f64;
            let _ = writeln!(
                s,
                r##"<line x1="{lx:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/>"##,
                lx + 22.0
            );
            let _ = writeln!(s, r##"<text x="{:.2}" y="{:.2}">{}</text>"##, lx + 28.0, y + 4.0, escape(&series.name));
        }
        let _ = writeln!(s, "</g>");
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round_and_cover_the_range() {
        assert_eq!(ticks(0.0, 1.0, 5), vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        let t = ticks(0.2, 1.5, 6);
        assert!(t.first().unwrap() >= &0.2 && t.last().unwrap() <= &1.5);
        assert!(t.len() >= 4);
        assert_eq!(ticks(4.0, 12.0, 6), vec![4.0, 6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn labels_are_escaped() {
        assert_eq!(escape("a<b & \"c\""), "a&lt;b &amp; &quot;c&quot;");
    }
}
