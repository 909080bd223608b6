//! Report emission: CSV tables and accuracy-versus-epsilon plot images.
//! Plots are views of the CSV values, never recomputations.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::attack::{EvalRow, TransferMatrix};
use crate::error::{Error, Result};

/// CSV schema shared by every evaluation report.
pub const CSV_HEADER: &str = "model_id,protocol,eps,accuracy,n_samples,seed,attack_inventory_hash";

fn check_field(s: &str) -> Result<()> {
    if s.contains(',') || s.contains('\n') {
        return Err(Error::Invalid(format!("csv field contains separators: {s:?}")));
    }
    Ok(())
}

pub fn write_rows_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    writeln!(f, "{CSV_HEADER}")?;
    for r in rows {
        check_field(&r.model_id)?;
        check_field(&r.protocol)?;
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.model_id, r.protocol, r.eps, r.accuracy, r.n_samples, r.seed, r.attack_inventory_hash
        )?;
    }
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != CSV_HEADER {
                return Err(Error::Data(format!("unexpected csv header: {line}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Data(format!("csv line {} has {} fields", i + 1, parts.len())));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Data(format!("line {}: {e}", i + 1)));
        let parse_u = |s: &str| s.parse::<u64>().map_err(|e| Error::Data(format!("line {}: {e}", i + 1)));
        rows.push(EvalRow {
            model_id: parts[0].into(),
            protocol: parts[1].into(),
            eps: parse_f(parts[2])?,
            accuracy: parse_f(parts[3])?,
            n_samples: parse_u(parts[4])? as usize,
            seed: parse_u(parts[5])?,
            attack_inventory_hash: parts[6].into(),
        });
    }
    Ok(rows)
}

/// Square source-by-target matrix of attack success rates.
pub fn write_transfer_csv(path: &Path, tm: &TransferMatrix) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    write!(f, "source\\target")?;
    for id in &tm.ids {
        check_field(id)?;
        write!(f, ",{id}")?;
    }
    writeln!(f)?;
    for (i, id) in tm.ids.iter().enumerate() {
        write!(f, "{id}")?;
        for v in &tm.rates[i] {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    writeln!(f, "# eps={}", tm.eps)?;
    Ok(())
}

/// One plotted curve.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Group per-epsilon rows into one series per (model, protocol).
pub fn rows_to_series(rows: &[EvalRow]) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows {
        let label = format!("{} {}", r.model_id, r.protocol);
        match out.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((r.eps, r.accuracy)),
            None => out.push(Series { label, points: vec![(r.eps, r.accuracy)] }),
        }
    }
    for s in &mut out {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

const PALETTE: [[u8; 3]; 8] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
    [140, 86, 75],
    [0, 0, 0],
];

/// 5x7 bitmap glyphs for the characters the charts need.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
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
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'P' => [0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10],
        'Q' => [0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d],
        'R' => [0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11],
        'S' => [0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e],
        'T' => [0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1b, 0x11],
        'X' => [0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0a, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1f],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '=' => [0x00, 0x00, 0x1f, 0x00, 0x1f, 0x00, 0x00],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        ':' => [0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        _ => [0x00; 7],
    }
}

fn draw_text(img: &mut RgbImage, x: i32, y: i32, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let g = glyph(c);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 {
                    let px = cx + col as i32;
                    let py = y + row as i32;
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height()
                    {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
        cx += 6;
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Render accuracy (y, in [0,1]) versus epsilon (x) curves to a PNG.
pub fn plot_accuracy_curves(path: &Path, title: &str, series: &[Series]) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Invalid("nothing to plot".into()));
    }
    let (w, h) = (640u32, 440u32);
    let (ml, mr, mt, mb) = (60i32, 20i32, 30i32, 50i32);
    let plot_w = w as i32 - ml - mr;
    let plot_h = h as i32 - mt - mb;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));

    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(x_min + 1e-9);
    let map_x = |v: f64| ml as f64 + (v - x_min) / (x_max - x_min) * plot_w as f64;
    let map_y = |v: f64| mt as f64 + (1.0 - v.clamp(0.0, 1.0)) * plot_h as f64;

    let axis = Rgb([60, 60, 60]);
    let grid = Rgb([225, 225, 225]);
    // horizontal grid + y ticks every 0.2
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = map_y(v);
        draw_line(&mut img, ml as f64, y, (ml + plot_w) as f64, y, grid);
        draw_text(&mut img, 8, y as i32 - 3, &format!("{:.1}", v), axis);
    }
    // x ticks at each distinct epsilon of the first series
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    for t in &ticks {
        let x = map_x(*t);
        draw_line(&mut img, x, (mt + plot_h) as f64, x, (mt + plot_h + 4) as f64, axis);
        draw_text(&mut img, x as i32 - 12, mt + plot_h + 8, &format!("{t}"), axis);
    }
    // axes
    draw_line(&mut img, ml as f64, mt as f64, ml as f64, (mt + plot_h) as f64, axis);
    draw_line(&mut img, ml as f64, (mt + plot_h) as f64, (ml + plot_w) as f64, (mt + plot_h) as f64, axis);
    draw_text(&mut img, ml, 10, title, axis);
    draw_text(&mut img, (ml + plot_w) / 2, mt + plot_h + 24, "EPS", axis);

    for (si, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[si % PALETTE.len()]);
        let mut prev: Option<(f64, f64)> = None;
        for &(x, y) in &s.points {
            let (px, py) = (map_x(x), map_y(y));
            for dx in -1..=1i32 {
                for dy in -1..=1i32 {
                    let (qx, qy) = (px as i32 + dx, py as i32 + dy);
                    if qx >= 0 && qy >= 0 && (qx as u32) < w && (qy as u32) < h {
                        img.put_pixel(qx as u32, qy as u32, color);
                    }
                }
            }
            if let Some((ox, oy)) = prev {
                draw_line(&mut img, ox, oy, px, py, color);
            }
            prev = Some((px, py));
        }
        // legend
        let ly = mt + 6 + 10 * si as i32;
        draw_line(&mut img, (ml + plot_w - 150) as f64, ly as f64 + 3.0, (ml + plot_w - 130) as f64, ly as f64 + 3.0, color);
        draw_text(&mut img, ml + plot_w - 125, ly, &s.label, axis);
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    img.save(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}
