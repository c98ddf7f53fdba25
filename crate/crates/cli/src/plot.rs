//! Minimal raster line plots for experiment figures.

use onestep::Image;

/// One polyline with square markers, in RGB `[0, 1]`.
pub struct Series<'a> {
    pub points: &'a [(f64, f64)],
    pub color: [f64; 3],
}

const MARGIN: usize = 24;

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self { w, h, px: vec![1.0; w * h * 3] }
    }

    fn set(&mut self, x: i64, y: i64, c: [f64; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [f64; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            self.set(x, y + 1, c);
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

    fn marker(&mut self, (x, y): (i64, i64), c: [f64; 3]) {
        for dy in -2..=2 {
            for dx in -2..=2 {
                self.set(x + dx, y + dy, c);
            }
        }
    }
}

/// Plots all series on shared linear axes that include zero on the y axis.
pub fn line_plot(series: &[Series], w: usize, h: usize) -> Image {
    let mut c = Canvas::new(w, h);
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x_lo, mut x_hi, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &(x, y) in all {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_hi = y_hi.max(y);
    }
    if !(x_hi > x_lo) {
        x_hi = x_lo + 1.0;
    }
    if !(y_hi > 0.0) {
        y_hi = 1.0;
    }
    let (pw, ph) = ((w - 2 * MARGIN) as f64, (h - 2 * MARGIN) as f64);
    let map = |(x, y): (f64, f64)| {
        let px = MARGIN as f64 + (x - x_lo) / (x_hi - x_lo) * pw;
        let py = (h - MARGIN) as f64 - y / (1.05 * y_hi) * ph;
        (px.round() as i64, py.round() as i64)
    };
    let axis = [0.3; 3];
    let origin = (MARGIN as i64, (h - MARGIN) as i64);
    c.line(origin, ((w - MARGIN) as i64, origin.1), axis);
    c.line(origin, (origin.0, MARGIN as i64), axis);
    for s in series {
        let pts: Vec<(i64, i64)> = s.points.iter().map(|&p| map(p)).collect();
        for pair in pts.windows(2) {
            c.line(pair[0], pair[1], s.color);
        }
        for &p in &pts {
            c.marker(p, s.color);
        }
    }
    Image::from_fn(h, w, 3, |y, x, ch| c.px[(y * w + x) * 3 + ch])
}
