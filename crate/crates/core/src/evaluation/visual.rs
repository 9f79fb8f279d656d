//! PNG-ready panels: image grids, LBP side-by-sides and small line charts.
//! Charts carry no text; their numbers live in the accompanying CSV files.

use crate::dataio::ImageTensor;
use crate::error::{config, Result};

use super::metrics::lbp_map;

const GAP: usize = 2;
const BACKDROP: f32 = 1.0;

fn rgb_at(img: &ImageTensor, y: usize, x: usize) -> [f32; 3] {
    if img.channels == 1 {
        [img.get(y, x, 0); 3]
    } else {
        [img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2)]
    }
}

/// Tile rows of images into one RGB image with a white gap between cells.
pub fn image_grid(rows: &[Vec<ImageTensor>]) -> Result<ImageTensor> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| config("empty image grid"))?;
    let (ch, cw) = (first.height, first.width);
    if rows.iter().flatten().any(|i| i.height != ch || i.width != cw) {
        return Err(config("grid cells must share one size"));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let h = rows.len() * ch + (rows.len() + 1) * GAP;
    let w = cols * cw + (cols + 1) * GAP;
    let mut data = vec![BACKDROP; h * w * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let (oy, ox) = (GAP + r * (ch + GAP), GAP + c * (cw + GAP));
            for y in 0..ch {
                for x in 0..cw {
                    let at = ((oy + y) * w + ox + x) * 3;
                    data[at..at + 3].copy_from_slice(&rgb_at(img, y, x));
                }
            }
        }
    }
    ImageTensor::new(h, w, 3, data)
}

/// Rows of `[clean, infected, LBP(clean), LBP(infected)]`.
pub fn lbp_side_by_side(pairs: &[(ImageTensor, ImageTensor)]) -> Result<ImageTensor> {
    let rows: Vec<Vec<ImageTensor>> = pairs
        .iter()
        .map(|(a, b)| vec![a.clone(), b.clone(), lbp_map(a), lbp_map(b)])
        .collect();
    image_grid(&rows)
}

const SERIES_COLOURS: [[f32; 3]; 6] = [
    [0.85, 0.15, 0.1],
    [0.1, 0.35, 0.8],
    [0.1, 0.6, 0.2],
    [0.8, 0.55, 0.0],
    [0.5, 0.2, 0.7],
    [0.3, 0.3, 0.3],
];

/// Raster line chart of `(x, y)` series on shared axes.
pub fn line_plot(series: &[Vec<(f64, f64)>], width: usize, height: usize) -> Result<ImageTensor> {
    let pts: Vec<(f64, f64)> = series.iter().flatten().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if pts.is_empty() || width < 32 || height < 32 {
        return Err(config("a plot needs finite points and at least 32×32 pixels"));
    }
    let span = |v: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) }
    };
    let (x0, x1) = span(&mut pts.iter().map(|p| p.0));
    let (y0, y1) = span(&mut pts.iter().map(|p| p.1));
    let m = 6usize;
    let (pw, ph) = ((width - 2 * m) as f64, (height - 2 * m) as f64);
    let to_px = |(x, y): (f64, f64)| {
        let px = m as f64 + (x - x0) / (x1 - x0) * pw;
        let py = (height - m) as f64 - (y - y0) / (y1 - y0) * ph;
        (px, py)
    };
    let mut data = vec![1.0f32; width * height * 3];
    let mut put = |x: isize, y: isize, c: [f32; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            let at = (y as usize * width + x as usize) * 3;
            data[at..at + 3].copy_from_slice(&c);
        }
    };
    let axis = [0.0, 0.0, 0.0];
    for x in m..width - m {
        put(x as isize, (height - m) as isize, axis);
    }
    for y in m..=height - m {
        put(m as isize, y as isize, axis);
    }
    for (k, s) in series.iter().enumerate() {
        let c = SERIES_COLOURS[k % SERIES_COLOURS.len()];
        let px: Vec<(f64, f64)> = s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).map(to_px).collect();
        for w in px.windows(2) {
            let (a, b) = (w[0], w[1]);
            let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for t in 0..=n {
                let f = t as f64 / n as f64;
                put((a.0 + f * (b.0 - a.0)).round() as isize, (a.1 + f * (b.1 - a.1)).round() as isize, c);
            }
        }
        for &(x, y) in &px {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    put(x.round() as isize + dx, y.round() as isize + dy, c);
                }
            }
        }
    }
    ImageTensor::new(height, width, 3, data)
}
