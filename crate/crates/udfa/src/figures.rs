//! PNG figures: per-case overlay panels and a per-class DSC bar chart.
//!
//! Text is drawn with a built-in 5×7 bitmap font (upper case, digits, a few
//! symbols), so no font files are needed.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::{Rgb, RgbImage};

use crate::report::VolumeEvalReport;
use crate::{Result, UdfaError};

const GLYPH_W: u32 = 5;

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'B' => [0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e],
        'C' => [0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e],
        'D' => [0x1e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1e],
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
        'Y' => [0x11, 0x11, 0x11, 0x0a, 0x04, 0x04, 0x04],
        'Z' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f],
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
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        ':' => [0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1f],
        ' ' => [0; 7],
        _ => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04],
    }
}

/// Draws `text` with its top-left corner at `(x, y)`; pixels outside are clipped.
pub fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, scale: u32, color: Rgb<u8>) {
    for (i, c) in text.chars().enumerate() {
        let gx = x + i as u32 * (GLYPH_W + 1) * scale;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (0x10 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let px = gx + col * scale + dx;
                        let py = y + row as u32 * scale + dy;
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
    }
}

pub fn text_width(text: &str, scale: u32) -> u32 {
    text.chars().count() as u32 * (GLYPH_W + 1) * scale
}

fn fill_rect(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: Rgb<u8>) {
    for py in y..(y + h).min(img.height()) {
        for px in x..(x + w).min(img.width()) {
            img.put_pixel(px, py, color);
        }
    }
}

/// Class colour; the first eight follow the usual abdominal-organ palette.
pub fn class_color(class_id: usize) -> Rgb<u8> {
    const BASE: [[u8; 3]; 8] = [
        [0, 0, 255],
        [0, 255, 0],
        [255, 0, 0],
        [0, 255, 255],
        [255, 0, 255],
        [255, 255, 0],
        [63, 208, 244],
        [241, 240, 234],
    ];
    if (1..=8).contains(&class_id) {
        return Rgb(BASE[class_id - 1]);
    }
    // golden-angle hue walk for further classes
    let h = (class_id as f64 * 137.508) % 360.0;
    let x = 1.0 - ((h / 60.0) % 2.0 - 1.0).abs();
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

/// Legend rows: one swatch and name per foreground class. Returns the number of entries.
pub fn draw_legend(img: &mut RgbImage, x: u32, y: u32, names: &[String], max_width: u32) -> usize {
    let (mut cx, mut cy) = (x, y);
    for (i, name) in names.iter().enumerate() {
        let w = 14 + text_width(name, 1) + 12;
        if cx + w > x + max_width && cx > x {
            cx = x;
            cy += 12;
        }
        fill_rect(img, cx, cy, 9, 9, class_color(i + 1));
        draw_text(img, cx + 13, cy + 1, name, 1, Rgb([255, 255, 255]));
        cx += w;
    }
    names.len()
}

pub fn legend_height(names: &[String], max_width: u32) -> u32 {
    let mut rows = 1;
    let mut cx = 0;
    for name in names {
        let w = 14 + text_width(name, 1) + 12;
        if cx + w > max_width && cx > 0 {
            rows += 1;
            cx = 0;
        }
        cx += w;
    }
    rows * 12 + 8
}

/// One axial slice with its masks.
pub struct PanelSlice<'a> {
    pub image: &'a [f32],
    pub label: &'a [u8],
    pub pred: &'a [u8],
    pub h: usize,
    pub w: usize,
}

fn gray(v: f32, lo: f32, hi: f32) -> u8 {
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    (t.clamp(0.0, 1.0) * 255.0) as u8
}

/// Image, ground-truth overlay, and prediction overlay side by side with a legend.
pub fn overlay_panel(s: &PanelSlice<'_>, names: &[String], title: &str) -> RgbImage {
    let (h, w) = (s.h as u32, s.w as u32);
    let width = (3 * w + 4 * 4).max(160);
    let header = 14;
    let lh = legend_height(names, width - 8);
    let mut img = RgbImage::from_pixel(width, header + h + 8 + lh, Rgb([0, 0, 0]));
    let lo = s.image.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = s.image.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    draw_text(&mut img, 4, 3, title, 1, Rgb([255, 255, 255]));
    for (tile, mask) in [None, Some(s.label), Some(s.pred)].into_iter().enumerate() {
        let ox = 4 + tile as u32 * (w + 4);
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                let g = gray(s.image[i], lo, hi);
                let mut px = [g, g, g];
                if let Some(m) = mask {
                    if m[i] > 0 {
                        let c = class_color(m[i] as usize).0;
                        for k in 0..3 {
                            px[k] = ((px[k] as u16 + c[k] as u16) / 2) as u8;
                        }
                    }
                }
                img.put_pixel(ox + x, header + y, Rgb(px));
            }
        }
    }
    draw_legend(&mut img, 4, header + h + 6, names, width - 8);
    img
}

/// Vertical bars of per-class DSC (percent) with value labels.
pub fn dsc_bar_chart(names: &[String], dsc: &[f64], title: &str) -> RgbImage {
    let bar_w = 36u32;
    let gap = 12u32;
    let plot_h = 200u32;
    let n = dsc.len() as u32;
    let width = (40 + n * (bar_w + gap)).max(240);
    let lh = legend_height(names, width - 8);
    let top = 30u32;
    let mut img = RgbImage::from_pixel(width, top + plot_h + 10 + lh, Rgb([0, 0, 0]));
    draw_text(&mut img, 4, 4, title, 1, Rgb([255, 255, 255]));
    let axis = Rgb([180, 180, 180]);
    fill_rect(&mut img, 30, top, 1, plot_h, axis);
    fill_rect(&mut img, 30, top + plot_h, width - 34, 1, axis);
    for tick in [0u32, 50, 100] {
        let y = top + plot_h - plot_h * tick / 100;
        draw_text(&mut img, 4, y.saturating_sub(3), &tick.to_string(), 1, axis);
    }
    for (i, &d) in dsc.iter().enumerate() {
        let pct = (d * 100.0).clamp(0.0, 100.0);
        let bh = (plot_h as f64 * pct / 100.0).round() as u32;
        let x = 36 + i as u32 * (bar_w + gap);
        fill_rect(&mut img, x, top + plot_h - bh, bar_w, bh, class_color(i + 1));
        let label = format!("{pct:.1}");
        let ly = (top + plot_h - bh).saturating_sub(10);
        draw_text(&mut img, x, ly, &label, 1, Rgb([255, 255, 255]));
    }
    draw_legend(&mut img, 4, top + plot_h + 8, names, width - 8);
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)?;
    Ok(())
}

/// The slice with the most ground-truth foreground.
fn pick_slice(label: &[u8], d: usize, hw: usize) -> usize {
    (0..d)
        .max_by_key(|&z| (label[z * hw..(z + 1) * hw].iter().filter(|&&v| v > 0).count(), usize::MAX - z))
        .unwrap_or(0)
}

/// Prediction volume file of `case_id` under `dir`.
pub fn prediction_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}.npz"))
}

/// Writes one overlay panel per case with saved predictions plus one bar
/// chart. An empty report writes nothing.
pub fn figures(report: &VolumeEvalReport, out: &Path) -> Result<Vec<PathBuf>> {
    if report.cases.is_empty() {
        log::info!("report has no cases; no figures written");
        return Ok(Vec::new());
    }
    fs::create_dir_all(out).map_err(|e| UdfaError::io(out, e))?;
    let mut files = Vec::new();
    let pred_dir = report.prediction_dir.as_ref().map(PathBuf::from);
    for case in &report.cases {
        let Some(dir) = &pred_dir else { break };
        let p = prediction_path(dir, &case.case_id);
        if !p.is_file() {
            log::warn!("no saved prediction for {}; overlay skipped", case.case_id);
            continue;
        }
        let arrays: std::collections::HashMap<String, Tensor> =
            Tensor::read_npz(&p)?.into_iter().collect();
        let get = |k: &str| {
            arrays
                .get(k)
                .ok_or_else(|| UdfaError::Data(format!("{} has no array {k:?}", p.display())))
        };
        let image = get("image")?;
        let (d, h, w) = image.dims3()?;
        let image = image.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
        let label = get("label")?.flatten_all()?.to_vec1::<u8>()?;
        let pred = get("pred")?.flatten_all()?.to_vec1::<u8>()?;
        let z = pick_slice(&label, d, h * w);
        let r = z * h * w..(z + 1) * h * w;
        let panel = overlay_panel(
            &PanelSlice {
                image: &image[r.clone()],
                label: &label[r.clone()],
                pred: &pred[r],
                h,
                w,
            },
            &report.class_names,
            &format!("{} slice {z}  dsc {:.2}", case.case_id, 100.0 * case.mean_dsc),
        );
        let path = out.join(format!("overlay_{}.png", case.case_id));
        save(&panel, &path)?;
        files.push(path);
    }
    let chart = dsc_bar_chart(
        &report.class_names,
        &report.class_mean_dsc,
        &format!("{} mean dsc {:.2}", report.dataset, 100.0 * report.mean_dsc),
    );
    let path = out.join("dsc_per_class.png");
    save(&chart, &path)?;
    files.push(path);
    Ok(files)
}
