//! Grayscale canvas with anti-aliased shape drawing.

use serde::{Deserialize, Serialize};

/// Subsamples per pixel along each axis.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Square,
    /// One-pixel square outline.
    Ring,
    /// Plus sign with three-pixel bars.
    Cross,
    /// Square filled on every other row.
    Stripes,
}

impl Shape {
    /// Whether the point at offset `(dx, dy)` from the center lies inside a
    /// shape of half-extent `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => ax <= r && ay <= r,
            Shape::Ring => ax <= r && ay <= r && (ax > r - 1.0 || ay > r - 1.0),
            Shape::Cross => (ax <= r && ay <= 1.5) || (ay <= r && ax <= 1.5),
            Shape::Stripes => ax <= r && ay <= r && ((dy + r).floor() as i64) % 2 == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl Canvas {
    pub fn new(size: usize, background: f64) -> Self {
        Self {
            size,
            pixels: vec![background; size * size],
        }
    }

    /// Composites a shape centered at `(x, y)` (pixel `(i, j)` spans
    /// `[i, i+1) × [j, j+1)`), blending by covered area.
    pub fn draw(&mut self, shape: Shape, x: f64, y: f64, r: f64, intensity: f64) {
        let s = self.size as f64;
        let lo = |c: f64| (c - r - 1.0).floor().clamp(0.0, s) as usize;
        let hi = |c: f64| (c + r + 2.0).ceil().clamp(0.0, s) as usize;
        let step = 1.0 / SUPERSAMPLE as f64;
        for py in lo(y)..hi(y) {
            for px in lo(x)..hi(x) {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let dx = px as f64 + (sx as f64 + 0.5) * step - x;
                        let dy = py as f64 + (sy as f64 + 0.5) * step - y;
                        hits += shape.contains(dx, dy, r) as usize;
                    }
                }
                if hits > 0 {
                    let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                    let p = &mut self.pixels[py * self.size + px];
                    *p = if hits == SUPERSAMPLE * SUPERSAMPLE {
                        intensity
                    } else {
                        cover * intensity + (1.0 - cover) * *p
                    };
                }
            }
        }
    }

    /// One-pixel outline of the integer box enclosing `[x0, x1] × [y0, y1]`.
    pub fn outline(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, intensity: f64) {
        let n = self.size as i64;
        let (l, t) = (x0.floor() as i64, y0.floor() as i64);
        let (r, b) = (x1.ceil() as i64 - 1, y1.ceil() as i64 - 1);
        let mut put = |px: i64, py: i64| {
            if (0..n).contains(&px) && (0..n).contains(&py) {
                self.pixels[(py * n + px) as usize] = intensity;
            }
        };
        for px in l..=r {
            put(px, t);
            put(px, b);
        }
        for py in t..=b {
            put(l, py);
            put(r, py);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.size + x]
    }
}
