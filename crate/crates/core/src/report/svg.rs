use std::fmt::Write;

use super::{hex, FigureSpec, OVERLAY};
use crate::error::Result;

pub const WIDTH: f64 = 520.0;
pub const HEIGHT: f64 = 560.0;
pub const MARGIN: f64 = 20.0;
/// Height of the title band above the plot square.
pub const TOP: f64 = 60.0;
pub const POINT_RADIUS: f64 = 2.0;

/// Data to pixel map. The bounding box of the points is scaled uniformly by
/// `s = side / max(span_x, span_y)` (`side = WIDTH - 2 MARGIN`; a zero span
/// counts as 1), centered in the plot square whose top-left corner is
/// `(MARGIN, TOP)`, and flipped so `y` grows upward:
///
/// `px = MARGIN + off_x + (x - x_min) s`
/// `py = TOP + side - off_y - (y - y_min) s`
///
/// with `off = (side - span s) / 2` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewport {
    pub x_min: f64,
    pub y_min: f64,
    pub scale: f64,
    pub off_x: f64,
    pub off_y: f64,
}

impl Viewport {
    pub fn side() -> f64 {
        WIDTH - 2.0 * MARGIN
    }

    pub fn fit(coords: &[[f64; 2]]) -> Viewport {
        if coords.is_empty() {
            return Viewport {
                x_min: 0.0,
                y_min: 0.0,
                scale: 1.0,
                off_x: 0.0,
                off_y: 0.0,
            };
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in coords {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let span = [hi[0] - lo[0], hi[1] - lo[1]];
        let widest = span[0].max(span[1]);
        let scale = Self::side() / if widest > 0.0 { widest } else { 1.0 };
        Viewport {
            x_min: lo[0],
            y_min: lo[1],
            scale,
            off_x: (Self::side() - span[0] * scale) / 2.0,
            off_y: (Self::side() - span[1] * scale) / 2.0,
        }
    }

    pub fn to_pixels(&self, p: [f64; 2]) -> [f64; 2] {
        [
            MARGIN + self.off_x + (p[0] - self.x_min) * self.scale,
            TOP + Self::side() - self.off_y - (p[1] - self.y_min) * self.scale,
        ]
    }

    pub fn to_data(&self, px: [f64; 2]) -> [f64; 2] {
        [
            (px[0] - MARGIN - self.off_x) / self.scale + self.x_min,
            (TOP + Self::side() - self.off_y - px[1]) / self.scale + self.y_min,
        ]
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// SVG 1.1 scatter plot: one circle per point in index order, overlay
/// points again in black on top, pixel values printed with 3 decimals.
pub fn render_scatter(fig: &FigureSpec) -> Result<String> {
    fig.validate()?;
    let e = fig.embedding;
    let colors = fig.scheme.colors(e)?;
    let vp = Viewport::fit(&e.coords);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(&fig.title));
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="16">{}</text>"#,
        escape(&fig.title)
    );
    if let Some(a) = &fig.annotation {
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN}" y="46" font-family="sans-serif" font-size="13">{}</text>"#,
            escape(a)
        );
    }
    let _ = writeln!(
        s,
        r#"<g id="points" stroke="none" data-scheme="{}" data-count="{}">"#,
        fig.scheme.name(),
        e.len()
    );
    for (p, c) in e.coords.iter().zip(&colors) {
        let [x, y] = vp.to_pixels(*p);
        let _ = writeln!(s, r#"<circle cx="{x:.3}" cy="{y:.3}" r="{POINT_RADIUS}" fill="{}"/>"#, hex(*c));
    }
    let _ = writeln!(s, "</g>");
    if !fig.overlay.is_empty() {
        let _ = writeln!(s, r#"<g id="overlay" stroke="none" fill="{}">"#, hex(OVERLAY));
        for &i in &fig.overlay {
            let [x, y] = vp.to_pixels(e.coords[i]);
            let _ = writeln!(s, r#"<circle cx="{x:.3}" cy="{y:.3}" r="{POINT_RADIUS}"/>"#);
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "</svg>");
    Ok(s)
}
