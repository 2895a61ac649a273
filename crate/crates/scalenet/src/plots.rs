//! PNG plots of an evaluation: error histogram, trajectories colored by
//! error, per-frame distance curves and a montage of the worst pairs.

use std::collections::BTreeMap;
use std::path::Path;

use scalenet_core::evaluation::{histogram, worst_k, PairRecord};
use scalenet_core::imaging::Rgb8Image;

use crate::error::Result;
use crate::images::write_png;
use crate::run::Evaluation;

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.02;
pub const WORST_K: usize = 8;

const BLACK: [u8; 3] = [0, 0, 0];
const GRAY: [u8; 3] = [200, 200, 200];
const RED: [u8; 3] = [210, 40, 40];
const BLUE: [u8; 3] = [40, 80, 200];

/// 3×5 glyphs, one row per `u8` (low three bits, leftmost pixel highest).
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        'm' => [0, 0, 7, 7, 5],
        _ => return None,
    })
}

struct Canvas {
    img: Rgb8Image,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        let mut img = Rgb8Image::new(width, height);
        img.data.fill(255);
        Self { img }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.img.width && (y as usize) < self.img.height {
            self.img.put(x as usize, y as usize, c);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            self.put(x0 + ((x1 - x0) as f64 * t).round() as i64, y0 + ((y1 - y0) as f64 * t).round() as i64, c);
        }
    }

    /// Draws `text` at scale 2; unsupported characters become blanks.
    fn text(&mut self, x: i64, y: i64, text: &str, c: [u8; 3]) {
        for (k, ch) in text.chars().enumerate() {
            let Some(rows) = glyph(ch) else { continue };
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits & (4 >> col) != 0 {
                        let (px, py) = (x + 8 * k as i64 + 2 * col, y + 2 * r as i64);
                        self.rect(px, py, px + 1, py + 1, c);
                    }
                }
            }
        }
    }

    fn blit(&mut self, x: usize, y: usize, src: &Rgb8Image) {
        for sy in 0..src.height {
            for sx in 0..src.width {
                self.put((x + sx) as i64, (y + sy) as i64, src.pixel(sx, sy));
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        write_png(path, &self.img)
    }
}

/// Blue through green and yellow to red for `t` in `[0, 1]`.
pub fn heat_color(t: f64) -> [u8; 3] {
    let stops: [[f64; 3]; 4] = [[40.0, 60.0, 220.0], [40.0, 190.0, 80.0], [240.0, 220.0, 40.0], [220.0, 30.0, 30.0]];
    let t = t.clamp(0.0, 1.0) * 3.0;
    let k = (t.floor() as usize).min(2);
    let f = t - k as f64;
    let (a, b) = (stops[k], stops[k + 1]);
    [0, 1, 2].map(|i| (a[i] + f * (b[i] - a[i])).round() as u8)
}

fn file_stem(sequence: &str) -> String {
    sequence.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

pub fn write_all(dir: &Path, eval: &Evaluation) -> Result<()> {
    let records = &eval.report.records;
    plot_histogram(&dir.join("error_histogram.png"), &eval.report.errors())?;
    let mut by_sequence: BTreeMap<&str, Vec<&PairRecord>> = BTreeMap::new();
    for r in records {
        by_sequence.entry(r.sequence_id.as_str()).or_default().push(r);
    }
    for (seq, recs) in &by_sequence {
        let stem = file_stem(seq);
        plot_trajectory(&dir.join(format!("trajectory_{stem}.png")), recs)?;
        plot_frames(&dir.join(format!("frames_{stem}.png")), recs)?;
    }
    plot_worst(&dir.join("worst_pairs.png"), eval)
}

fn plot_histogram(path: &Path, errors: &[f64]) -> Result<()> {
    let h = histogram(errors, HISTOGRAM_BIN_WIDTH)?;
    let bins = h.counts.len();
    let bar = (600 / bins.max(1)).clamp(2, 40);
    let (w, ht, base) = (bar * bins + 40, 260, 220i64);
    let mut c = Canvas::new(w, ht);
    let peak = h.counts.iter().copied().max().unwrap_or(1).max(1);
    for (slot, &n) in h.counts.iter().enumerate() {
        let x0 = 20 + (slot * bar) as i64;
        let top = base - (n as f64 / peak as f64 * 190.0).round() as i64;
        if n > 0 {
            c.rect(x0, top, x0 + bar as i64 - 2, base, BLUE);
        }
    }
    c.line((10, base + 1), (w as i64 - 10, base + 1), BLACK);
    // Zero-error marker and the range of bin centers.
    let zero_slot = (-h.first_index) as usize;
    let zx = 20 + (zero_slot * bar + bar / 2) as i64;
    c.line((zx, base + 1), (zx, base + 8), RED);
    c.text(10, base + 14, &format!("{:.2}", h.center(0)), BLACK);
    let last = format!("{:.2}", h.center(bins - 1));
    c.text(w as i64 - 10 - 8 * last.len() as i64, base + 14, &last, BLACK);
    c.text(10, 6, &peak.to_string(), BLACK);
    c.save(path)
}

fn plot_trajectory(path: &Path, recs: &[&PairRecord]) -> Result<()> {
    // Top-down view on the two axes with the largest extent.
    let range = |i: usize| {
        let lo = recs.iter().map(|r| r.position[i]).fold(f64::INFINITY, f64::min);
        let hi = recs.iter().map(|r| r.position[i]).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let ranges = [range(0), range(1), range(2)];
    let mut axes = [0, 1, 2];
    axes.sort_by(|&a, &b| (ranges[b].1 - ranges[b].0).total_cmp(&(ranges[a].1 - ranges[a].0)));
    let (ax, ay) = (axes[0].min(axes[1]), axes[0].max(axes[1]));
    let span = (ranges[ax].1 - ranges[ax].0).max(ranges[ay].1 - ranges[ay].0).max(1e-6);
    let size = 400.0;
    let (w, h) = (480, 440);
    let mut c = Canvas::new(w, h);
    let max_err = recs.iter().map(|r| r.error().abs()).fold(0.0, f64::max).max(1e-9);
    for r in recs {
        let x = 20.0 + (r.position[ax] - ranges[ax].0) / span * size;
        let y = 20.0 + size - (r.position[ay] - ranges[ay].0) / span * size;
        let col = heat_color(r.error().abs() / max_err);
        c.rect(x as i64 - 1, y as i64 - 1, x as i64 + 1, y as i64 + 1, col);
    }
    for k in 0..=200 {
        let y = 220 - k as i64;
        c.rect(440, y, 455, y, heat_color(k as f64 / 200.0));
    }
    c.text(424, 4, &format!("{max_err:.2}m"), BLACK);
    c.text(440, 226, "0", BLACK);
    c.save(path)
}

fn plot_frames(path: &Path, recs: &[&PairRecord]) -> Result<()> {
    let first_camera = recs[0].camera_id;
    let mut series: Vec<&PairRecord> = recs.iter().copied().filter(|r| r.camera_id == first_camera).collect();
    series.sort_by_key(|r| r.frame_i);
    let n = series.len();
    let w = n.clamp(200, 1600) + 40;
    let h = 240;
    let mut c = Canvas::new(w, h);
    let top = series.iter().map(|r| r.gt.max(r.pred)).fold(0.0, f64::max).max(1e-6) * 1.1;
    let px = |k: usize| 20 + (k as f64 / (n.max(2) - 1) as f64 * (w - 40) as f64).round() as i64;
    let py = |v: f64| 210 - (v.max(0.0) / top * 190.0).round() as i64;
    c.line((20, 210), (w as i64 - 20, 210), GRAY);
    for k in 1..n {
        c.line((px(k - 1), py(series[k - 1].gt)), (px(k), py(series[k].gt)), BLACK);
        c.line((px(k - 1), py(series[k - 1].pred)), (px(k), py(series[k].pred)), RED);
    }
    c.text(22, 4, &format!("{top:.2}m"), BLACK);
    c.save(path)
}

fn plot_worst(path: &Path, eval: &Evaluation) -> Result<()> {
    let worst = worst_k(&eval.report.records, WORST_K);
    let store = &eval.data.store;
    let Some(&first) = worst.first() else {
        return Canvas::new(1, 1).save(path);
    };
    let sample = store.image(eval.pairs[first].first)?;
    let (iw, ih) = (sample.width, sample.height);
    let label_w = 90;
    let mut c = Canvas::new(label_w + 2 * iw + 12, worst.len() * (ih + 6) + 6);
    for (row, &k) in worst.iter().enumerate() {
        let p = &eval.pairs[k];
        let y = 6 + row * (ih + 6);
        c.text(4, y as i64 + 2, &format!("{:.3}", eval.report.records[k].error()), RED);
        c.blit(label_w, y, &store.image(p.first)?.to_rgb8());
        c.blit(label_w + iw + 6, y, &store.image(p.second)?.to_rgb8());
    }
    c.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_color_endpoints() {
        assert_eq!(heat_color(0.0), [40, 60, 220]);
        assert_eq!(heat_color(1.0), [220, 30, 30]);
        assert_eq!(heat_color(-3.0), heat_color(0.0));
    }

    #[test]
    fn sequence_names_become_file_names() {
        assert_eq!(file_stem("map1/ep000"), "map1_ep000");
    }

    #[test]
    fn digits_render() {
        let mut c = Canvas::new(40, 12);
        c.text(0, 0, "1.5", BLACK);
        assert!(c.img.data.iter().any(|&v| v == 0));
        assert_eq!(c.img.pixel(39, 11), [255, 255, 255]);
    }
}
