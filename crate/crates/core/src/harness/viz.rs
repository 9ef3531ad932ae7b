//! Raster figures: descriptor heatmaps, correspondence overlays, error CDFs and training curves.

use crate::desceval::DenseDescriptor;
use crate::descriptor::best_match;
use crate::error::{domain_err, Result};
use crate::geometry::Pixel;
use crate::grid::Grid;
use crate::policy::CurvePoint;
use crate::render::RGBDFrame;

pub type Rgb = [u8; 3];

pub const RED: Rgb = [230, 40, 40];
pub const GREEN: Rgb = [40, 200, 60];
pub const BLUE: Rgb = [40, 90, 230];
pub const ORANGE: Rgb = [240, 150, 30];
const AXIS: Rgb = [60, 60, 60];
const GRIDLINE: Rgb = [225, 225, 225];

/// Mutable RGB raster with clipped drawing primitives.
#[derive(Debug, Clone)]
pub struct Canvas {
    pub image: Grid<Rgb>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, background: Rgb) -> Canvas {
        Canvas {
            image: Grid::filled(width, height, background),
        }
    }

    pub fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.image.width() && (y as usize) < self.image.height() {
            self.image.set(x as usize, y as usize, c);
        }
    }

    pub fn dot(&mut self, x: i64, y: i64, radius: i64, c: Rgb) {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy <= radius * radius {
                    self.put(x + dx, y + dy, c);
                }
            }
        }
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn blit(&mut self, src: &Grid<Rgb>, ox: usize, oy: usize) {
        for y in 0..src.height() {
            for x in 0..src.width() {
                self.put((ox + x) as i64, (oy + y) as i64, *src.get(x, y));
            }
        }
    }
}

/// Maps `t ∈ [0, 1]` to a dark-blue → yellow ramp.
pub fn colormap(t: f64) -> Rgb {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let s = t * (STOPS.len() - 1) as f64;
    let i = (s.floor() as usize).min(STOPS.len() - 2);
    let f = s - i as f64;
    std::array::from_fn(|k| (STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f).round() as u8)
}

/// Query image with its dot, target image with the best-match dot, and the descriptor
/// distance heatmap over the target (bright = close), side by side.
pub fn descriptor_heatmap(
    frame_a: &RGBDFrame,
    frame_b: &RGBDFrame,
    descriptor: &dyn DenseDescriptor,
    query: Pixel,
) -> Result<Grid<Rgb>> {
    let map_a = descriptor.describe_frame(frame_a)?;
    let map_b = descriptor.describe_frame(frame_b)?;
    let (matched, dist) = best_match(&map_a, query, &map_b)?;
    let (w, h) = (frame_b.width(), frame_b.height());
    let max = dist.as_slice().iter().copied().fold(0.0f64, f64::max).max(1e-12);
    let heat = Grid::from_vec(w, h, dist.as_slice().iter().map(|d| colormap(1.0 - d / max)).collect());
    let gap = 4;
    let mut c = Canvas::new(frame_a.width() + 2 * w + 2 * gap, h.max(frame_a.height()), [255; 3]);
    c.blit(&frame_a.rgb, 0, 0);
    let ob = frame_a.width() + gap;
    c.blit(&frame_b.rgb, ob, 0);
    let oh = ob + w + gap;
    c.blit(&heat, oh, 0);
    let r = (w.min(h) / 64).max(1) as i64;
    c.dot(query.x as i64, query.y as i64, r + 1, RED);
    for o in [ob, oh] {
        c.dot(o as i64 + matched.x as i64, matched.y as i64, r + 1, GREEN);
    }
    Ok(c.image)
}

/// Both frames side by side with a line per matched pixel pair.
pub fn correspondence_overlay(frame_a: &RGBDFrame, frame_b: &RGBDFrame, matches: &[(Pixel, Pixel)]) -> Grid<Rgb> {
    let gap = 4;
    let ox = frame_a.width() + gap;
    let mut c = Canvas::new(ox + frame_b.width(), frame_a.height().max(frame_b.height()), [255; 3]);
    c.blit(&frame_a.rgb, 0, 0);
    c.blit(&frame_b.rgb, ox, 0);
    let palette = [RED, GREEN, BLUE, ORANGE];
    for (i, (a, b)) in matches.iter().enumerate() {
        let col = palette[i % palette.len()];
        let (bx, by) = (ox as i64 + b.x as i64, b.y as i64);
        c.line(a.x as i64, a.y as i64, bx, by, col);
        c.dot(a.x as i64, a.y as i64, 1, col);
        c.dot(bx, by, 1, col);
    }
    c.image
}

/// A plotted series: points and colour.
pub struct Series<'a> {
    pub points: &'a [(f64, f64)],
    pub color: Rgb,
}

/// Line plot over the union bounding box of all series, with a light 10×10 grid.
pub fn line_plot(series: &[Series], width: usize, height: usize) -> Result<Grid<Rgb>> {
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if all.is_empty() || width < 40 || height < 40 {
        return Err(domain_err!("nothing to plot or plot area too small"));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, 0.0f64, f64::MIN);
    for (x, y) in &all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let m = 20i64;
    let (pw, ph) = (width as i64 - 2 * m, height as i64 - 2 * m);
    let to_px = |x: f64, y: f64| {
        (
            m + ((x - x0) / (x1 - x0) * pw as f64).round() as i64,
            m + ph - ((y - y0) / (y1 - y0) * ph as f64).round() as i64,
        )
    };
    let mut c = Canvas::new(width, height, [255; 3]);
    for k in 0..=10 {
        let gx = m + pw * k / 10;
        let gy = m + ph * k / 10;
        c.line(gx, m, gx, m + ph, GRIDLINE);
        c.line(m, gy, m + pw, gy, GRIDLINE);
    }
    c.line(m, m + ph, m + pw, m + ph, AXIS);
    c.line(m, m, m, m + ph, AXIS);
    for s in series {
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| to_px(*x, *y))
            .collect();
        for w in pts.windows(2) {
            c.line(w[0].0, w[0].1, w[1].0, w[1].1, s.color);
        }
        if pts.len() == 1 {
            c.dot(pts[0].0, pts[0].1, 2, s.color);
        }
    }
    Ok(c.image)
}

/// Empirical CDF as a step curve.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out = Vec::with_capacity(2 * v.len() + 1);
    out.push((0.0, 0.0));
    for (i, x) in v.iter().enumerate() {
        out.push((*x, i as f64 / n));
        out.push((*x, (i + 1) as f64 / n));
    }
    out
}

/// CDF plot of several error sets.
pub fn error_cdf_plot(sets: &[(&[f64], Rgb)], width: usize, height: usize) -> Result<Grid<Rgb>> {
    let curves: Vec<Vec<(f64, f64)>> = sets.iter().map(|(v, _)| empirical_cdf(v)).collect();
    let series: Vec<Series> = curves
        .iter()
        .zip(sets)
        .map(|(c, (_, col))| Series { points: c, color: *col })
        .collect();
    line_plot(&series, width, height)
}

/// Completion rate (blue), all-runs success rate (green) and avg picked divided by
/// `initial_count` (orange) over episodes.
pub fn training_curves_plot(
    curve: &[CurvePoint],
    initial_count: usize,
    width: usize,
    height: usize,
) -> Result<Grid<Rgb>> {
    let col = |f: &dyn Fn(&CurvePoint) -> f64| -> Vec<(f64, f64)> {
        curve.iter().map(|p| (p.episode as f64, f(p))).collect()
    };
    let completion = col(&|p| p.completion_rate);
    let success = col(&|p| p.success_rate_all_runs);
    let picked = col(&|p| p.avg_picked / initial_count.max(1) as f64);
    // fixed [0, 1] range
    let frame = [(curve.first().map_or(0.0, |p| p.episode as f64), 1.0)];
    line_plot(
        &[
            Series {
                points: &frame,
                color: [255; 3],
            },
            Series {
                points: &completion,
                color: BLUE,
            },
            Series {
                points: &success,
                color: GREEN,
            },
            Series {
                points: &picked,
                color: ORANGE,
            },
        ],
        width,
        height,
    )
}
