//! Report plots rendered as PNGs with a built-in 5x7 bitmap font: per-case
//! anomaly overlays and row curves, training trends, sweep tables, and
//! cross-validation box plots. Every plot is a pure function of artifacts
//! already on disk.

use crate::commands::CaseReport;
use crate::config::RunConfig;
use crate::rundir::{self, HistoryEntry, RunDir};
use image::{Rgb, RgbImage};
use ndarray::Array2;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use u2ad_core::error::{Error, Result};
use u2ad_core::eval::CvOutcome;
use u2ad_core::io::{dataset, raster};
use u2ad_core::Mask;

type Color = [u8; 3];

const BG: Color = [250, 250, 248];
const INK: Color = [40, 40, 48];
const GRID: Color = [210, 210, 214];
const BLUE: Color = [46, 100, 200];
const ORANGE: Color = [225, 130, 35];
const GREEN: Color = [40, 160, 90];
const MAGENTA: Color = [180, 60, 160];
const RED: Color = [220, 40, 40];

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Canvas { img: RgbImage::from_pixel(w, h, Rgb(BG)) }
    }

    fn from_gray(gray: &Array2<f32>) -> Self {
        let (h, w) = gray.dim();
        let mut img = RgbImage::new(w as u32, h as u32);
        for (y, x) in itertools_free_grid(h, w) {
            let v = (gray[(y, x)].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([v, v, v]));
        }
        Canvas { img }
    }

    fn set(&mut self, x: i64, y: i64, c: Color) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn blend(&mut self, x: i64, y: i64, c: Color, a: f32) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            let p = self.img.get_pixel(x as u32, y as u32).0;
            let mix = |b: u8, o: u8| (b as f32 * (1.0 - a) + o as f32 * a).round() as u8;
            let q = [mix(p[0], c[0]), mix(p[1], c[1]), mix(p[2], c[2])];
            self.img.put_pixel(x as u32, y as u32, Rgb(q));
        }
    }

    fn hline(&mut self, x0: i64, x1: i64, y: i64, c: Color) {
        for x in x0.min(x1)..=x0.max(x1) {
            self.set(x, y, c);
        }
    }

    fn vline(&mut self, x: i64, y0: i64, y1: i64, c: Color) {
        for y in y0.min(y1)..=y0.max(y1) {
            self.set(x, y, c);
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Color) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
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

    fn rect_outline(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Color) {
        self.hline(x0, x1, y0, c);
        self.hline(x0, x1, y1, c);
        self.vline(x0, y0, y1, c);
        self.vline(x1, y0, y1, c);
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: Color) {
        let mut cx = x;
        for ch in s.chars() {
            let rows = glyph(ch.to_ascii_uppercase());
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..5 {
                    if bits >> (4 - rx) & 1 == 1 {
                        self.set(cx + rx as i64, y + ry as i64, c);
                    }
                }
            }
            cx += 6;
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img
            .save(path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("png save: {e}"))))
    }
}

fn itertools_free_grid(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..h).flat_map(move |y| (0..w).map(move |x| (y, x)))
}

/// 5x7 glyphs, bit 4 is the left column. Unknown characters render hollow.
fn glyph(c: char) -> [u8; 7] {
    match c {
        ' ' => [0; 7],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

/// Grayscale image with the anomaly map blended in red and the retained
/// component boxes outlined.
fn overlay_plot(
    image: &Array2<f32>,
    ano: &Array2<f32>,
    boxes: &[(usize, usize, usize, usize)],
    path: &Path,
) -> Result<()> {
    let mut canvas = Canvas::from_gray(image);
    let peak = ano.iter().fold(0.0f32, |a, &v| a.max(v));
    if peak > 0.0 {
        let (h, w) = ano.dim();
        for (y, x) in itertools_free_grid(h, w) {
            let a = 0.65 * (ano[(y, x)] / peak).clamp(0.0, 1.0);
            if a > 0.0 {
                canvas.blend(x as i64, y as i64, RED, a);
            }
        }
    }
    for &(y0, x0, y1, x1) in boxes {
        canvas.rect_outline(x0 as i64 - 1, y0 as i64 - 1, x1 as i64 + 1, y1 as i64 + 1, GREEN);
    }
    canvas.save(path)
}

/// Rows at which the per-row segment label changes; x positions for the
/// boundary marks of the curve plot.
fn segment_boundaries(segments: &Mask) -> Vec<usize> {
    let (h, w) = segments.dim();
    let row_label = |y: usize| (0..w).map(|x| segments[(y, x)]).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut prev = row_label(0);
    for y in 1..h {
        let cur = row_label(y);
        if cur != prev && cur != 0 && prev != 0 {
            out.push(y);
        }
        if cur != 0 {
            prev = cur;
        }
    }
    out
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CurveMeta {
    /// Number of x positions; equals the image height.
    x_len: usize,
    boundaries: Vec<usize>,
}

/// Row anomaly curve: one x position per image row, segment boundaries as
/// vertical marks. Writes a sidecar meta JSON next to the PNG.
fn curve_plot(curve: &[f64], boundaries: &[usize], path: &Path, meta_path: &Path) -> Result<()> {
    let (ml, mr, mt, mb) = (44i64, 8i64, 8i64, 16i64);
    let plot_h = 140i64;
    let n = curve.len() as i64;
    let mut canvas = Canvas::new((ml + n + mr) as u32, (mt + plot_h + mb) as u32);
    let peak = curve.iter().fold(0.0f64, |a, &v| a.max(v)).max(1e-12);
    let y_of = |v: f64| mt + plot_h - 1 - ((v / peak) * (plot_h - 1) as f64).round() as i64;
    canvas.rect_outline(ml - 1, mt - 1, ml + n, mt + plot_h, GRID);
    for &b in boundaries {
        canvas.vline(ml + b as i64, mt, mt + plot_h - 1, GRID);
    }
    let mut prev: Option<(i64, i64)> = None;
    for (i, &v) in curve.iter().enumerate() {
        let p = (ml + i as i64, y_of(v));
        if let Some(q) = prev {
            canvas.line(q.0, q.1, p.0, p.1, BLUE);
        }
        prev = Some(p);
    }
    canvas.text(2, mt, &format!("{peak:.3}"), INK);
    canvas.text(2, mt + plot_h - 8, "0", INK);
    canvas.text(ml, mt + plot_h + 4, "ROW", INK);
    canvas.save(path)?;
    let meta = CurveMeta { x_len: curve.len(), boundaries: boundaries.to_vec() };
    fs::write(meta_path, serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Loss per epoch for both phases, and refresh-time mean EU/AU below.
fn trends_plot(history: &[HistoryEntry], path: &Path) -> Result<()> {
    // Keep the last record per (phase, epoch): an interrupted run that was
    // restarted may have logged a prefix twice.
    let mut epochs: BTreeMap<(u8, usize), f64> = BTreeMap::new();
    let mut refreshes: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for entry in history {
        match entry {
            HistoryEntry::Epoch(r) => {
                let phase = if r.phase == "pretrain" { 0u8 } else { 1u8 };
                epochs.insert((phase, r.epoch), r.mean_total);
            }
            HistoryEntry::RefreshSummary(r) => {
                refreshes.insert(r.epoch, (r.mean_eu, r.mean_au));
            }
            HistoryEntry::RefreshCase { .. } => {}
        }
    }
    let (w, panel_h, ml, mt, gap, mb) = (560i64, 140i64, 52i64, 20i64, 34i64, 18i64);
    let mut canvas = Canvas::new(w as u32, (mt + panel_h + gap + panel_h + mb) as u32);
    let plot_w = w - ml - 10;

    let series: Vec<(u8, Vec<f64>)> = [0u8, 1u8]
        .iter()
        .map(|&p| {
            (p, epochs.iter().filter(|((q, _), _)| *q == p).map(|(_, &v)| v).collect::<Vec<_>>())
        })
        .collect();
    let total: usize = series.iter().map(|(_, v)| v.len()).sum();
    let peak = epochs.values().fold(0.0f64, |a, &v| a.max(v)).max(1e-12);
    canvas.text(ml, 6, "LOSS PER EPOCH", INK);
    canvas.rect_outline(ml - 1, mt - 1, ml + plot_w, mt + panel_h, GRID);
    let mut x0 = 0usize;
    for (p, values) in &series {
        let color = if *p == 0 { BLUE } else { ORANGE };
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in values.iter().enumerate() {
            let x = ml + (((x0 + i) as f64 / total.max(2) as f64) * plot_w as f64) as i64;
            let y = mt + panel_h - 1 - ((v / peak) * (panel_h - 1) as f64).round() as i64;
            if let Some(q) = prev {
                canvas.line(q.0, q.1, x, y, color);
            }
            prev = Some((x, y));
        }
        x0 += values.len();
    }
    canvas.text(ml, mt + panel_h + 4, "PRETRAIN", BLUE);
    canvas.text(ml + 60, mt + panel_h + 4, "ADAPT", ORANGE);
    canvas.text(2, mt, &format!("{peak:.3}"), INK);

    let top2 = mt + panel_h + gap;
    canvas.text(ml, top2 - 14, "REFRESH MEAN EU / AU OVER ROI", INK);
    canvas.rect_outline(ml - 1, top2 - 1, ml + plot_w, top2 + panel_h, GRID);
    if refreshes.is_empty() {
        canvas.text(ml + 8, top2 + 8, "NO REFRESHES LOGGED", INK);
    } else {
        let peak2 = refreshes
            .values()
            .fold(0.0f64, |a, &(e, u)| a.max(e).max(u))
            .max(1e-12);
        let last_epoch = *refreshes.keys().next_back().expect("nonempty") as f64;
        for (pick, color, label, dx) in
            [(0usize, GREEN, "EU", 0i64), (1usize, MAGENTA, "AU", 30i64)]
        {
            let mut prev: Option<(i64, i64)> = None;
            for (&e, &(eu, au)) in &refreshes {
                let v = if pick == 0 { eu } else { au };
                let x = ml + ((e as f64 / last_epoch.max(1.0)) * (plot_w - 1) as f64) as i64;
                let y = top2 + panel_h - 1 - ((v / peak2) * (panel_h - 1) as f64).round() as i64;
                canvas.rect_outline(x - 1, y - 1, x + 1, y + 1, color);
                if let Some(q) = prev {
                    canvas.line(q.0, q.1, x, y, color);
                }
                prev = Some((x, y));
            }
            canvas.text(ml + dx, top2 + panel_h + 4, label, color);
        }
        canvas.text(2, top2, &format!("{peak2:.4}"), INK);
    }
    canvas.save(path)
}

/// Render aligned text rows (a header line per table) into one image.
fn table_plot(tables: &[(&str, Vec<Vec<String>>)], path: &Path) -> Result<()> {
    let mut lines: Vec<(String, Color)> = Vec::new();
    for (title, rows) in tables {
        lines.push((title.to_string(), INK));
        let widths: Vec<usize> = (0..rows.iter().map(Vec::len).max().unwrap_or(0))
            .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
            .collect();
        for row in rows {
            let mut line = String::new();
            for (c, cell) in row.iter().enumerate() {
                line.push_str(&format!("{cell:>width$}  ", width = widths[c]));
            }
            lines.push((line.trim_end().to_string(), INK));
        }
        lines.push((String::new(), INK));
    }
    let w = lines.iter().map(|(l, _)| l.len()).max().unwrap_or(1).max(1) * 6 + 16;
    let h = lines.len() * 10 + 16;
    let mut canvas = Canvas::new(w as u32, h as u32);
    for (i, (line, color)) in lines.iter().enumerate() {
        canvas.text(8, 8 + (i as i64) * 10, line, *color);
    }
    canvas.save(path)
}

fn five_numbers(values: &mut Vec<f64>) -> Option<[f64; 5]> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let idx = p * (values.len() - 1) as f64;
        let (lo, hi) = (idx.floor() as usize, idx.ceil() as usize);
        values[lo] + (values[hi] - values[lo]) * (idx - lo as f64)
    };
    Some([values[0], q(0.25), q(0.5), q(0.75), values[values.len() - 1]])
}

/// Box-and-whisker summary of per-fold F1 for each group.
fn box_plot(groups: &[(&str, Vec<f64>)], path: &Path) -> Result<()> {
    let (per, ml, mt, plot_h, mb) = (90i64, 40i64, 18i64, 160i64, 22i64);
    let w = ml + per * groups.len() as i64 + 10;
    let mut canvas = Canvas::new(w as u32, (mt + plot_h + mb) as u32);
    canvas.rect_outline(ml - 1, mt - 1, w - 6, mt + plot_h, GRID);
    let y_of = |v: f64| mt + plot_h - 1 - (v.clamp(0.0, 1.0) * (plot_h - 1) as f64).round() as i64;
    for i in 0..=4 {
        let v = i as f64 * 0.25;
        canvas.hline(ml - 4, ml - 1, y_of(v), INK);
        canvas.text(2, y_of(v) - 3, &format!("{v:.2}"), INK);
    }
    for (g, (label, values)) in groups.iter().enumerate() {
        let cx = ml + per * g as i64 + per / 2;
        let mut vals = values.clone();
        if let Some([min, q1, med, q3, max]) = five_numbers(&mut vals) {
            let half = 16i64;
            canvas.vline(cx, y_of(max), y_of(q3), INK);
            canvas.vline(cx, y_of(q1), y_of(min), INK);
            canvas.hline(cx - half / 2, cx + half / 2, y_of(max), INK);
            canvas.hline(cx - half / 2, cx + half / 2, y_of(min), INK);
            canvas.rect_outline(cx - half, y_of(q3), cx + half, y_of(q1), BLUE);
            canvas.hline(cx - half, cx + half, y_of(med), RED);
        } else {
            canvas.text(cx - 20, mt + plot_h / 2, "EMPTY", INK);
        }
        canvas.text(cx - 3 * label.len() as i64, mt + plot_h + 8, label, INK);
    }
    canvas.save(path)
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(u2ad_core::io::table::into_io)?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(u2ad_core::io::table::into_io)?;
        rows.push(record.iter().map(|s| s.to_string()).collect());
    }
    Ok(rows)
}

pub fn plot(cfg: &RunConfig) -> Result<()> {
    let run = RunDir::open(cfg)?;
    let root = run.root();
    let summary_path = root.join("detect").join("summary.json");
    if !summary_path.exists() {
        return Err(Error::precondition(format!(
            "detection summary missing at {}; run detect first",
            summary_path.display()
        )));
    }
    let summary: crate::commands::DetectSummary =
        serde_json::from_slice(&fs::read(&summary_path)?)?;
    let dir = root.join("plots");
    fs::create_dir_all(&dir)?;
    let mut written = 0usize;

    for id in &summary.cases {
        let case_dir = root.join("detect").join(id);
        let report: CaseReport = serde_json::from_slice(&fs::read(case_dir.join("report.json"))?)?;
        let record = dataset::load_case::<f32>(&cfg.io.data_dir.join(id))?;
        let (h, w) = record.image.dim();
        let ano = raster::read_f32::<f32>(&case_dir.join("ano_map.f32"), h, w)?;
        let boxes: Vec<_> = report.components.iter().map(|c| c.bbox).collect();
        overlay_plot(&record.image, &ano, &boxes, &dir.join(format!("overlay_{id}.png")))?;
        curve_plot(
            &report.curve,
            &segment_boundaries(&record.segments),
            &dir.join(format!("curve_{id}.png")),
            &dir.join(format!("curve_{id}.meta.json")),
        )?;
        written += 2;
    }

    if root.join("history.jsonl").exists() {
        trends_plot(&rundir::read_history(root)?, &dir.join("training_trends.png"))?;
        written += 1;
    }

    let sweep_dir = root.join("sweep");
    if sweep_dir.join("robustness.csv").exists() && sweep_dir.join("k_sweep.csv").exists() {
        let tables = [
            ("ROBUSTNESS", read_csv_rows(&sweep_dir.join("robustness.csv"))?),
            ("K SWEEP", read_csv_rows(&sweep_dir.join("k_sweep.csv"))?),
        ];
        table_plot(&tables, &dir.join("sweep_tables.png"))?;
        written += 1;
    }

    let eval_dir = root.join("eval");
    if eval_dir.join("cv_patient.json").exists() {
        let patient: CvOutcome = serde_json::from_slice(&fs::read(eval_dir.join("cv_patient.json"))?)?;
        let segment: CvOutcome = serde_json::from_slice(&fs::read(eval_dir.join("cv_segment.json"))?)?;
        let f1s = |o: &CvOutcome| o.evals.iter().map(|e| e.metrics.f1).collect::<Vec<_>>();
        box_plot(
            &[("PATIENT", f1s(&patient)), ("SEGMENT", f1s(&segment))],
            &dir.join("cv_box.png"),
        )?;
        written += 1;
    }

    println!("wrote {written} plots into {}", dir.display());
    Ok(())
}
