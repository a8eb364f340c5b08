//! Minimal PNG line plots: axes, tick labels from a tiny bitmap font, and
//! one polyline per series. Enough to eyeball a loss curve or a sweep.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Result, T3Error};

const W: u32 = 900;
const H: u32 = 560;
const MARGIN: u32 = 60;

const COLORS: [[u8; 3]; 6] = [
    [202, 60, 60],
    [50, 100, 200],
    [40, 150, 80],
    [180, 130, 30],
    [130, 60, 180],
    [60, 160, 170],
];

// 3x5 glyphs for digits and a few symbols, rows packed LSB-first.
fn glyph(c: char) -> Option<[u8; 5]> {
    let g = match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        _ => return None,
    };
    Some(g)
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(g) = glyph(c) {
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        let (px, py) = (cx + col, y + row as u32);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, Rgb(color));
                        }
                    }
                }
            }
        }
        cx += 4;
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (0.001..10000.0).contains(&a) {
        format!("{v:.3}")
    } else {
        format!("{v:.1e}")
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) as u32).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

/// Render one or more (x, y) series to a PNG.
pub fn line_plot(
    path: &Path,
    series: &[(&str, &[(f64, f64)])],
    _x_label: &str,
    _y_label: &str,
) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let points: Vec<&(f64, f64)> = series.iter().flat_map(|(_, s)| s.iter()).collect();
    if points.is_empty() {
        return Err(T3Error::Config("cannot plot an empty series".into()));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &points {
        x0 = x0.min(p.0);
        x1 = x1.max(p.0);
        y0 = y0.min(p.1);
        y1 = y1.max(p.1);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let plot_w = (W - 2 * MARGIN) as f64;
    let plot_h = (H - 2 * MARGIN) as f64;
    let to_px = |x: f64, y: f64| {
        (
            MARGIN as f64 + (x - x0) / (x1 - x0) * plot_w,
            (H - MARGIN) as f64 - (y - y0) / (y1 - y0) * plot_h,
        )
    };

    let axis = [120u8, 120, 120];
    draw_line(&mut img, to_px(x0, y0), to_px(x1, y0), axis);
    draw_line(&mut img, to_px(x0, y0), to_px(x0, y1), axis);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let (px, py) = to_px(fx, y0);
        draw_line(&mut img, (px, py), (px, py + 4.0), axis);
        draw_text(&mut img, px as u32, (py + 7.0) as u32, &fmt_tick(fx), [60, 60, 60]);
        let (qx, qy) = to_px(x0, fy);
        draw_line(&mut img, (qx - 4.0, qy), (qx, qy), axis);
        draw_text(&mut img, 4, qy as u32, &fmt_tick(fy), [60, 60, 60]);
    }

    for (i, (_, s)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for pair in s.windows(2) {
            draw_line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), color);
        }
        // series key: a short colored bar in the top margin
        let y = 10 + 8 * i as u32;
        for x in 0..24 {
            img.put_pixel(MARGIN + x, y, Rgb(color));
        }
    }

    img.save(path)
        .map_err(|e| T3Error::Io(format!("cannot write plot {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let pts: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, (i as f64 * 0.2).sin())).collect();
        line_plot(&path, &[("wave", &pts)], "x", "y").unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), W);
    }

    #[test]
    fn empty_series_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(line_plot(&dir.path().join("e.png"), &[("none", &[])], "x", "y").is_err());
    }
}
