//! Minimal deterministic PNG charts for run logs and reports.
//!
//! Rendering is done directly on an RGB buffer with a built-in 5x7 bitmap
//! font, so charts come out byte-identical for identical inputs on every
//! platform. One image per metric keeps the files easy to diff and embed.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::evalharness::EvalReport;
use crate::training::EpochRecord;
use crate::Result;

pub const BLACK: [u8; 3] = [20, 20, 20];
pub const WHITE: [u8; 3] = [255, 255, 255];
pub const GRID: [u8; 3] = [220, 220, 220];
pub const SERIES: [u8; 3] = [30, 90, 180];
pub const BAR: [u8; 3] = [70, 130, 90];

/// 5x7 glyphs; text is uppercased before lookup.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        'A' => [0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'B' => [0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e],
        'C' => [0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e],
        'D' => [0x1c, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1c],
        'E' => [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f],
        'F' => [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x10],
        'G' => [0x0e, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0f],
        'H' => [0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'I' => [0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0c],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1f],
        'M' => [0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'P' => [0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10],
        'Q' => [0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d],
        'R' => [0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11],
        'S' => [0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e],
        'T' => [0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0a],
        'X' => [0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0a, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f],
        ' ' => [0; 7],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0c, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1f],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        ':' => [0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00],
        '=' => [0x00, 0x00, 0x1f, 0x00, 0x1f, 0x00, 0x00],
        '%' => [0x19, 0x1a, 0x02, 0x04, 0x08, 0x0b, 0x13],
        '>' => [0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08],
        '<' => [0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02],
        _ => [0x15, 0x0a, 0x15, 0x0a, 0x15, 0x0a, 0x15],
    }
}

/// Fixed-size drawing surface with pixel, line, rect, and text primitives.
pub struct Canvas {
    img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Self { img: RgbImage::from_pixel(width, height, Rgb(WHITE)) }
    }

    pub fn width(&self) -> u32 {
        self.img.width()
    }

    pub fn height(&self) -> u32 {
        self.img.height()
    }

    pub fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    /// Bresenham segment, endpoints included.
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, color);
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

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, color);
            }
        }
    }

    /// Draws `s` (uppercased) with its top-left corner at `(x, y)`.
    pub fn text(&mut self, x: i64, y: i64, s: &str, color: [u8; 3]) {
        let mut cx = x;
        for c in s.to_ascii_uppercase().chars() {
            let rows = glyph(c);
            for (ry, bits) in rows.iter().enumerate() {
                for col in 0..5 {
                    if bits >> (4 - col) & 1 == 1 {
                        self.set(cx + col, y + ry as i64, color);
                    }
                }
            }
            cx += 6;
        }
    }

    pub fn text_width(s: &str) -> i64 {
        6 * s.chars().count() as i64 - 1
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

/// Tick label: plain decimal in a readable range, scientific outside it.
pub fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

struct Frame {
    left: i64,
    top: i64,
    right: i64,
    bottom: i64,
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn px(&self, x: f64) -> i64 {
        let t = (x - self.x_lo) / (self.x_hi - self.x_lo);
        self.left + (t * (self.right - self.left) as f64).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        let t = (y - self.y_lo) / (self.y_hi - self.y_lo);
        self.bottom - (t * (self.bottom - self.top) as f64).round() as i64
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if lo == hi {
        let pad = if lo == 0.0 { 0.5 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn draw_frame(canvas: &mut Canvas, frame: &Frame, title: &str, x_label: &str, y_label: &str) {
    canvas.text(frame.left, frame.top - 18, title, BLACK);
    canvas.line(frame.left, frame.top, frame.left, frame.bottom, BLACK);
    canvas.line(frame.left, frame.bottom, frame.right, frame.bottom, BLACK);

    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let yv = frame.y_lo + t * (frame.y_hi - frame.y_lo);
        let y = frame.py(yv);
        canvas.line(frame.left + 1, y, frame.right, y, GRID);
        canvas.line(frame.left - 3, y, frame.left, y, BLACK);
        let label = format_tick(yv);
        canvas.text(frame.left - 6 - Canvas::text_width(&label), y - 3, &label, BLACK);

        let xv = frame.x_lo + t * (frame.x_hi - frame.x_lo);
        let x = frame.px(xv);
        canvas.line(x, frame.bottom, x, frame.bottom + 3, BLACK);
        let label = format_tick(xv);
        canvas.text(x - Canvas::text_width(&label) / 2, frame.bottom + 6, &label, BLACK);
    }
    canvas.text(
        (frame.left + frame.right) / 2 - Canvas::text_width(x_label) / 2,
        frame.bottom + 18,
        x_label,
        BLACK,
    );
    canvas.text(frame.left, frame.top - 9, y_label, BLACK);
}

/// Renders one polyline over finite `points` (x ascending not required).
/// An empty series still produces a framed chart with a notice.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
) -> Result<()> {
    let mut canvas = Canvas::new(640, 400);
    let finite: Vec<(f64, f64)> =
        points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let (x_lo, x_hi) = padded(
        finite.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        finite.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_lo, y_hi) = padded(
        finite.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        finite.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    if finite.is_empty() {
        canvas.text(40, 30, title, BLACK);
        canvas.text(240, 190, "NO FINITE SAMPLES", BLACK);
        return canvas.save(path);
    }
    let frame = Frame { left: 70, top: 30, right: 620, bottom: 350, x_lo, x_hi, y_lo, y_hi };
    draw_frame(&mut canvas, &frame, title, x_label, y_label);
    for pair in finite.windows(2) {
        canvas.line(
            frame.px(pair[0].0),
            frame.py(pair[0].1),
            frame.px(pair[1].0),
            frame.py(pair[1].1),
            SERIES,
        );
    }
    for p in &finite {
        let (x, y) = (frame.px(p.0), frame.py(p.1));
        canvas.fill_rect(x - 1, y - 1, 3, 3, SERIES);
    }
    canvas.save(path)
}

/// Renders labeled vertical bars with value captions.
pub fn bar_chart(path: &Path, title: &str, y_label: &str, bars: &[(String, f64)]) -> Result<()> {
    let mut canvas = Canvas::new(640, 400);
    if bars.is_empty() {
        canvas.text(40, 30, title, BLACK);
        canvas.text(260, 190, "NO DATA", BLACK);
        return canvas.save(path);
    }
    let hi = bars.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = bars.iter().map(|b| b.1).fold(f64::INFINITY, f64::min).min(0.0);
    let (y_lo, y_hi) = padded(lo, hi);
    let frame = Frame {
        left: 70,
        top: 30,
        right: 620,
        bottom: 350,
        x_lo: 0.0,
        x_hi: bars.len() as f64,
        y_lo,
        y_hi,
    };
    draw_frame(&mut canvas, &frame, title, "", y_label);

    let slot = (frame.right - frame.left) / bars.len() as i64;
    let bar_w = (slot * 3 / 5).max(2);
    let zero = frame.py(0.0f64.clamp(y_lo, y_hi));
    for (i, (label, value)) in bars.iter().enumerate() {
        let cx = frame.left + slot * i as i64 + slot / 2;
        let top = frame.py(*value);
        let (y0, h) = if top <= zero { (top, zero - top) } else { (zero, top - zero) };
        canvas.fill_rect(cx - bar_w / 2, y0, bar_w, h.max(1), BAR);
        let caption = format_tick(*value);
        canvas.text(cx - Canvas::text_width(&caption) / 2, top - 10, &caption, BLACK);
        canvas.text(cx - Canvas::text_width(label) / 2, frame.bottom + 6, label, BLACK);
    }
    canvas.save(path)
}

/// One PNG per logged metric, named `train_{metric}.png`.
pub fn plot_training_curves(records: &[EpochRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let metrics: [(&str, fn(&EpochRecord) -> f64); 6] = [
        ("lr", |r| r.lr),
        ("alpha", |r| r.alpha),
        ("l_msg", |r| r.l_msg),
        ("l_perc", |r| r.l_perc),
        ("entropy", |r| r.entropy),
        ("val_bit_error", |r| r.val_bit_error),
    ];
    let mut written = Vec::new();
    for (name, get) in metrics {
        let points: Vec<(f64, f64)> = records.iter().map(|r| (r.step as f64, get(r))).collect();
        let path = dir.join(format!("train_{name}.png"));
        line_chart(&path, name, "step", name, &points)?;
        written.push(path);
    }
    Ok(written)
}

/// Per-family accuracy and capacity bars for one report, named
/// `eval_{label}_{metric}.png`.
pub fn plot_family_bars(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let groups: Vec<(String, f64, f64)> = report
        .families
        .iter()
        .chain(std::iter::once(&report.overall))
        .map(|a| (a.label.clone(), a.bit_accuracy, a.capacity_bits))
        .collect();
    let acc: Vec<(String, f64)> = groups.iter().map(|g| (g.0.clone(), g.1)).collect();
    let cap: Vec<(String, f64)> = groups.iter().map(|g| (g.0.clone(), g.2)).collect();
    for (metric, bars) in [("accuracy", acc), ("capacity", cap)] {
        let path = dir.join(format!("eval_{}_{metric}.png", report.label));
        bar_chart(&path, &format!("{} {metric} by family", report.label), metric, &bars)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalharness::{Aggregate, CellRecord, EvalContext};

    #[test]
    fn tick_labels_cover_magnitudes() {
        assert_eq!(format_tick(0.0), "0");
        assert_eq!(format_tick(0.5), "0.5");
        assert_eq!(format_tick(0.7100), "0.71");
        assert_eq!(format_tick(12.0), "12");
        assert_eq!(format_tick(1e-6), "1.0e-6");
        assert_eq!(format_tick(-0.25), "-0.25");
        assert_eq!(format_tick(250000.0), "2.5e5");
    }

    #[test]
    fn lines_paint_their_endpoints() {
        let mut c = Canvas::new(20, 20);
        c.line(2, 3, 15, 11, BLACK);
        assert_eq!(c.img.get_pixel(2, 3).0, BLACK);
        assert_eq!(c.img.get_pixel(15, 11).0, BLACK);
        assert_eq!(c.img.get_pixel(19, 19).0, WHITE);
    }

    #[test]
    fn text_marks_pixels_and_ignores_out_of_bounds() {
        let mut c = Canvas::new(40, 12);
        c.text(1, 2, "A0.", BLACK);
        let dark =
            c.img.pixels().filter(|p| p.0 == BLACK).count();
        assert!(dark > 10);
        c.text(-100, -100, "X", BLACK);
        c.set(1000, 1000, BLACK);
    }

    #[test]
    fn training_curves_emit_one_file_per_metric() {
        let rec = |step: usize, entropy: f64| EpochRecord {
            step,
            lr: 1e-4 * step as f64,
            alpha: 1.0,
            l_msg: 0.7 / (step + 1) as f64,
            l_perc: 0.01,
            entropy,
            val_bit_error: 0.4,
        };
        let records = vec![rec(10, f64::NAN), rec(20, 2.1), rec(30, 1.9)];
        let dir = tempfile::tempdir().unwrap();
        let files = plot_training_curves(&records, dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        for f in &files {
            let img = image::open(f).unwrap();
            assert_eq!((img.width(), img.height()), (640, 400));
        }

        // all-NaN series still yields a (notice) chart
        let records = vec![rec(1, f64::NAN), rec(2, f64::NAN)];
        let files = plot_training_curves(&records, dir.path()).unwrap();
        assert!(files.iter().all(|f| f.exists()));
    }

    #[test]
    fn charts_are_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let points = vec![(0.0, 0.1), (1.0, 0.5), (2.0, 0.3)];
        line_chart(&d1.path().join("c.png"), "t", "x", "y", &points).unwrap();
        line_chart(&d2.path().join("c.png"), "t", "x", "y", &points).unwrap();
        let a = std::fs::read(d1.path().join("c.png")).unwrap();
        let b = std::fs::read(d2.path().join("c.png")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn family_bars_render_for_a_small_report() {
        let agg = |label: &str, acc: f64| Aggregate {
            label: label.into(),
            cells: 2,
            samples: 8,
            bit_accuracy: acc,
            capacity_bits: acc * 16.0,
            p_value: 0.01,
        };
        let report = EvalReport {
            label: "single".into(),
            context: EvalContext {
                seed: 1,
                samples: 4,
                alpha: 0.2,
                config_hash: "h".into(),
                checkpoint: "c".into(),
            },
            payload_bits: 16,
            cells: vec![CellRecord {
                index: 0,
                spec: "identity".into(),
                family: "Id".into(),
                samples: 4,
                bit_accuracy: 0.99,
                capacity_bits: 15.0,
                p_value: 1e-9,
            }],
            families: vec![agg("Id", 0.99), agg("Geom", 0.8)],
            overall: agg("Overall", 0.85),
        };
        let dir = tempfile::tempdir().unwrap();
        let files = plot_family_bars(&report, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        for f in files {
            assert!(f.exists(), "{f:?}");
            image::open(&f).unwrap();
        }
    }
}
