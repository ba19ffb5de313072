//! X-Z (bird's-eye) trajectory plots.

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use tavo_core::Trajectory;

const PALETTE: [[u8; 3]; 6] = [
    [20, 20, 20],
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
];
const BACKGROUND: [u8; 3] = [255, 255, 255];
const GRID: [u8; 3] = [225, 225, 225];

pub fn color(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

/// Grid spacing in meters: 1, 2 or 5 times a power of ten, about eight lines
/// across the span.
fn grid_step(span: f64) -> f64 {
    let raw = (span / 8.0).max(1e-9);
    let p = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * p).find(|s| *s >= raw).unwrap_or(10.0 * p)
}

/// Each trajectory is drawn as a polyline in the X-Z plane, X to the right and
/// Z up, with equal axis scaling, a light metric grid and a dot at the start.
/// Colors follow the argument order: black, red, blue, green, orange, purple.
pub fn plot_xz(trajs: &[Trajectory], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb(BACKGROUND));
    let pts: Vec<Vec<(f64, f64)>> = trajs
        .iter()
        .map(|t| t.positions().iter().map(|p| (p.x, p.z)).collect())
        .collect();
    let all = pts.iter().flatten();
    let (mut x0, mut x1, mut z0, mut z1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, z) in all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        z0 = z0.min(*z);
        z1 = z1.max(*z);
    }
    if x0 > x1 {
        return img;
    }
    let span = (x1 - x0).max(z1 - z0).max(1e-6);
    let (cx, cz) = ((x0 + x1) / 2.0, (z0 + z1) / 2.0);
    let margin = size as f64 * 0.08;
    let scale = (size as f64 - 2.0 * margin) / span;
    let half = size as f64 / 2.0;
    let to_px = |x: f64, z: f64| ((half + (x - cx) * scale) as f32, (half - (z - cz) * scale) as f32);

    let step = grid_step(span);
    let extent = half / scale;
    let mut g = ((cx - extent) / step).floor() * step;
    while g <= cx + extent {
        let (px, _) = to_px(g, cz);
        draw_line_segment_mut(&mut img, (px, 0.0), (px, size as f32), Rgb(GRID));
        g += step;
    }
    let mut g = ((cz - extent) / step).floor() * step;
    while g <= cz + extent {
        let (_, pz) = to_px(cx, g);
        draw_line_segment_mut(&mut img, (0.0, pz), (size as f32, pz), Rgb(GRID));
        g += step;
    }
    draw_hollow_rect_mut(&mut img, Rect::at(0, 0).of_size(size, size), Rgb([120, 120, 120]));

    for (i, line) in pts.iter().enumerate() {
        let c = Rgb(color(i));
        for w in line.windows(2) {
            draw_line_segment_mut(&mut img, to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), c);
        }
        if let Some((x, z)) = line.first() {
            let (px, pz) = to_px(*x, *z);
            draw_filled_circle_mut(&mut img, (px as i32, pz as i32), 3, c);
        }
    }
    img
}
