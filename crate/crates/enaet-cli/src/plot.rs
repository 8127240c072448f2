//! Curve rendering for metrics files. Everything here is a pure function of
//! the records, so identical inputs produce byte-identical PNGs.

use enaet::trainer::MetricsRecord;
use enaet::transforms::FAMILY_NAMES;
use image::{Rgb, RgbImage};

use crate::font::{draw_text, text_width, GLYPH_H};

const WIDTH: u32 = 960;
const HEIGHT: u32 = 600;
const MARGIN_LEFT: i64 = 70;
const MARGIN_RIGHT: i64 = 220;
const MARGIN_TOP: i64 = 24;
const MARGIN_BOTTOM: i64 = 48;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

const PALETTE: [[u8; 3]; 13] = [
    [0, 0, 0],       // total
    [214, 39, 40],   // labeled
    [31, 119, 180],  // unlabeled
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
    [188, 189, 34],
    [127, 127, 127],
    [105, 50, 160],
    [205, 140, 70],
];

pub struct Series {
    pub label: String,
    pub color: Rgb<u8>,
    pub points: Vec<(f64, f64)>,
}

/// One series per loss term that actually occurs in the stream: the labeled,
/// unlabeled and total terms always, plus each family's regression and
/// consistency term if any record carries a nonzero value for it.
pub fn loss_series(records: &[MetricsRecord]) -> Vec<Series> {
    let steps: Vec<(&MetricsRecord, &enaet::losses::LossBreakdown)> =
        records.iter().filter_map(|r| r.loss.as_ref().map(|l| (r, l))).collect();
    if steps.is_empty() {
        return Vec::new();
    }
    let mut series = Vec::new();
    let mut add = |label: String, color_idx: usize, pick: &dyn Fn(&enaet::losses::LossBreakdown) -> f64| {
        series.push(Series {
            label,
            color: Rgb(PALETTE[color_idx % PALETTE.len()]),
            points: steps.iter().map(|(r, l)| (r.step as f64, pick(l))).collect(),
        });
    };
    add("total".into(), 0, &|l| l.total);
    add("labeled".into(), 1, &|l| l.l_labeled);
    add("unlabeled".into(), 2, &|l| l.l_unlabeled);
    for k in 0..5 {
        if steps.iter().any(|(_, l)| l.l_aet[k] != 0.0) {
            add(format!("aet[{}]", FAMILY_NAMES[k]), 3 + k, &move |l| l.l_aet[k]);
        }
    }
    for k in 0..5 {
        if steps.iter().any(|(_, l)| l.l_cl[k] != 0.0) {
            add(format!("cl[{}]", FAMILY_NAMES[k]), 8 + k, &move |l| l.l_cl[k]);
        }
    }
    series
}

/// Student and teacher error trajectories from the evaluation records.
pub fn error_series(records: &[MetricsRecord]) -> Vec<Series> {
    let evals: Vec<&MetricsRecord> =
        records.iter().filter(|r| r.student_error.is_some() || r.teacher_error.is_some()).collect();
    if evals.is_empty() {
        return Vec::new();
    }
    let pick = |get: fn(&MetricsRecord) -> Option<f64>| {
        evals
            .iter()
            .filter_map(|r| get(r).map(|v| (r.step as f64, v)))
            .collect::<Vec<_>>()
    };
    vec![
        Series {
            label: "student error".into(),
            color: Rgb(PALETTE[2]),
            points: pick(|r| r.student_error),
        },
        Series {
            label: "teacher error".into(),
            color: Rgb(PALETTE[1]),
            points: pick(|r| r.teacher_error),
        },
    ]
}

pub fn render_loss_curves(records: &[MetricsRecord]) -> Option<RgbImage> {
    let series = loss_series(records);
    if series.is_empty() {
        return None;
    }
    Some(render(&series, "training loss", None))
}

pub fn render_error_curves(records: &[MetricsRecord]) -> Option<RgbImage> {
    let series = error_series(records);
    if series.is_empty() {
        return None;
    }
    Some(render(&series, "test error", Some((0.0, 1.0))))
}

fn render(series: &[Series], title: &str, y_range: Option<(f64, f64)>) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);
    let (x0, y0) = (MARGIN_LEFT, MARGIN_TOP);
    let (x1, y1) = (WIDTH as i64 - MARGIN_RIGHT, HEIGHT as i64 - MARGIN_BOTTOM);

    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (mut xmin, mut xmax) = min_max(xs).unwrap_or((0.0, 1.0));
    if xmin == xmax {
        xmin -= 0.5;
        xmax += 0.5;
    }
    let (ymin, ymax) = match y_range {
        Some(r) => r,
        None => {
            let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
            let (lo, hi) = min_max(ys).unwrap_or((0.0, 1.0));
            let pad = if lo == hi { 0.5 * lo.abs().max(1.0) } else { 0.05 * (hi - lo) };
            (lo - pad, hi + pad)
        }
    };

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let fx = (x - xmin) / (xmax - xmin);
        let fy = (y - ymin) / (ymax - ymin);
        (
            x0 + (fx * (x1 - x0) as f64).round() as i64,
            y1 - (fy * (y1 - y0) as f64).round() as i64,
        )
    };

    // Grid and tick labels, five divisions each way.
    for i in 0..=4 {
        let gx = x0 + (x1 - x0) * i / 4;
        let gy = y0 + (y1 - y0) * i / 4;
        vline(&mut img, gx, y0, y1, GRID);
        hline(&mut img, x0, x1, gy, GRID);
        let xv = xmin + (xmax - xmin) * i as f64 / 4.0;
        let yv = ymax - (ymax - ymin) * i as f64 / 4.0;
        let xlabel = format_tick(xv);
        draw_text(
            &mut img,
            gx - text_width(&xlabel) as i64 / 2,
            y1 + 6,
            &xlabel,
            AXIS,
        );
        let ylabel = format_tick(yv);
        draw_text(
            &mut img,
            x0 - 8 - text_width(&ylabel) as i64,
            gy - GLYPH_H as i64 / 2,
            &ylabel,
            AXIS,
        );
    }
    // Axes on top of the grid.
    hline(&mut img, x0, x1, y1, AXIS);
    vline(&mut img, x0, y0, y1, AXIS);

    for s in series {
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in &s.points {
            let p = to_px(x, y.clamp(ymin, ymax));
            if let Some(q) = prev {
                line(&mut img, q, p, s.color);
            } else {
                line(&mut img, p, p, s.color);
            }
            prev = Some(p);
        }
    }

    // Legend column on the right.
    let lx = x1 + 16;
    let mut ly = y0 + 8;
    for s in series {
        for dy in 0..4i64 {
            hline(&mut img, lx, lx + 14, ly + 2 + dy, s.color);
        }
        draw_text(&mut img, lx + 20, ly, &s.label, AXIS);
        ly += 16;
    }

    draw_text(&mut img, x0, 8, title, AXIS);
    draw_text(
        &mut img,
        (x0 + x1) / 2 - text_width("step") as i64 / 2,
        y1 + 22,
        "step",
        AXIS,
    );
    img
}

fn min_max(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let mut out: Option<(f64, f64)> = None;
    for v in vals {
        if !v.is_finite() {
            continue;
        }
        out = Some(match out {
            None => (v, v),
            Some((lo, hi)) => (lo.min(v), hi.max(v)),
        });
    }
    out
}

/// Short deterministic tick label: plain decimal in a comfortable range,
/// scientific notation outside it.
fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.3}");
    let trimmed = s.trim_end_matches('0').trim_end_matches('.');
    trimmed.to_string()
}

fn hline(img: &mut RgbImage, x0: i64, x1: i64, y: i64, color: Rgb<u8>) {
    for x in x0.min(x1)..=x0.max(x1) {
        put(img, x, y, color);
    }
}

fn vline(img: &mut RgbImage, x: i64, y0: i64, y1: i64, color: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        put(img, x, y, color);
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Integer Bresenham segment.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    loop {
        put(img, x, y, color);
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
