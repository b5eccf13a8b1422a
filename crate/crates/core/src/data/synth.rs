//! Procedural HR test images: smooth gradients, low-frequency waves, flat
//! shapes with anti-aliased edges, stroke glyphs and faint grain.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

const SUPERSAMPLE: usize = 4;

type Rgb = [f64; 3];

fn color(rng: &mut ChaCha8Rng) -> Rgb {
    [
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
    ]
}

enum Shape {
    /// Rotated rectangle: center, half extents, angle.
    Rect {
        cy: f64,
        cx: f64,
        hh: f64,
        hw: f64,
        cos: f64,
        sin: f64,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
    /// Polyline with a round-capped pen.
    Stroke {
        points: Vec<(f64, f64)>,
        half_width: f64,
    },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Rect {
                cy,
                cx,
                hh,
                hw,
                cos,
                sin,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                u.abs() <= *hw && v.abs() <= *hh
            }
            Shape::Ellipse { cy, cx, ry, rx } => {
                ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
            }
            Shape::Stroke { points, half_width } => points.windows(2).any(|seg| {
                let ((ay, ax), (by, bx)) = (seg[0], seg[1]);
                let (vy, vx) = (by - ay, bx - ax);
                let len2 = vy * vy + vx * vx;
                let t = if len2 > 0.0 {
                    (((y - ay) * vy + (x - ax) * vx) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (py, px) = (ay + t * vy - y, ax + t * vx - x);
                py * py + px * px <= half_width * half_width
            }),
        }
    }

    fn bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let (y0, y1, x0, x1) = match self {
            Shape::Rect { cy, cx, hh, hw, .. } => {
                let r = (hh * hh + hw * hw).sqrt();
                (cy - r, cy + r, cx - r, cx + r)
            }
            Shape::Ellipse { cy, cx, ry, rx } => (cy - ry, cy + ry, cx - rx, cx + rx),
            Shape::Stroke { points, half_width } => {
                let ys = points.iter().map(|p| p.0);
                let xs = points.iter().map(|p| p.1);
                (
                    ys.clone().fold(f64::INFINITY, f64::min) - half_width,
                    ys.fold(f64::NEG_INFINITY, f64::max) + half_width,
                    xs.clone().fold(f64::INFINITY, f64::min) - half_width,
                    xs.fold(f64::NEG_INFINITY, f64::max) + half_width,
                )
            }
        };
        let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n);
        (
            clamp(y0.floor(), h),
            clamp(y1.ceil() + 1.0, h),
            clamp(x0.floor(), w),
            clamp(x1.ceil() + 1.0, w),
        )
    }
}

fn random_shape(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Shape {
    let size = h.min(w) as f64;
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    match rng.random_range(0..3) {
        0 => {
            let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Shape::Rect {
                cy,
                cx,
                hh: rng.random_range(0.05..0.25) * size,
                hw: rng.random_range(0.05..0.25) * size,
                cos: a.cos(),
                sin: a.sin(),
            }
        }
        1 => Shape::Ellipse {
            cy,
            cx,
            ry: rng.random_range(0.05..0.2) * size,
            rx: rng.random_range(0.05..0.2) * size,
        },
        _ => {
            let n = rng.random_range(2..=4);
            let step = 0.15 * size;
            let mut points = vec![(cy, cx)];
            for _ in 1..n {
                let &(py, px) = points.last().expect("nonempty");
                points.push((
                    py + rng.random_range(-step..step),
                    px + rng.random_range(-step..step),
                ));
            }
            Shape::Stroke {
                points,
                half_width: rng.random_range(0.02..0.04) * size,
            }
        }
    }
}

/// A `(1, 3, h, w)` image in `[0, 1]`, fully determined by the RNG state.
pub fn synthetic_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let plane = h * w;
    let mut img = vec![0.0f64; 3 * plane];

    // background gradient between two colors
    let (c0, c1) = (color(rng), color(rng));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    let span = (h as f64 * st.abs() + w as f64 * ct.abs()).max(1.0);
    let offset = (0.0f64).min(w as f64 * ct) + (0.0f64).min(h as f64 * st);
    // low-frequency waves
    let size = h.min(w) as f64;
    let waves: Vec<(f64, f64, f64, Rgb)> = (0..2)
        .map(|_| {
            let period = rng.random_range(0.3..0.8) * size;
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = std::f64::consts::TAU / period;
            let amp = [
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
            ];
            (
                freq * a.cos(),
                freq * a.sin(),
                rng.random_range(0.0..std::f64::consts::TAU),
                amp,
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f64 * ct + y as f64 * st) - offset) / span;
            for c in 0..3 {
                let mut v = c0[c] + (c1[c] - c0[c]) * t;
                for (fx, fy, phase, amp) in &waves {
                    v += amp[c] * (fx * x as f64 + fy * y as f64 + phase).sin();
                }
                img[c * plane + y * w + x] = v;
            }
        }
    }

    // flat shapes and strokes, alpha-blended by supersampled coverage
    let count = rng.random_range(3..=6);
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for _ in 0..count {
        let shape = random_shape(rng, h, w);
        let col = color(rng);
        let (y0, y1, x0, x1) = shape.bounds(h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                        hits += shape.contains(py, px) as usize;
                    }
                }
                if hits > 0 {
                    let a = hits as f64 * inv;
                    for c in 0..3 {
                        let v = &mut img[c * plane + y * w + x];
                        *v = (1.0 - a) * *v + a * col[c];
                    }
                }
            }
        }
    }

    // faint grain
    for v in img.iter_mut() {
        *v = (*v + rng.random_range(-0.005..0.005)).clamp(0.0, 1.0);
    }
    Tensor::from_vec([1, 3, h, w], img.into_iter().map(|v| v as f32).collect())
        .expect("sized from extents")
}
