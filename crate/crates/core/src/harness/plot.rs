use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::metrics::read_metrics;
use super::{HarnessError, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round();
        let y = (y0 + t * (y1 - y0)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Turns a metrics CSV into `<prefix>.dat` (whitespace columns: iteration,
/// env_steps, mean_return, std_return), a gnuplot script `<prefix>.gp` and
/// a line plot of mean return per iteration, `<prefix>.png`, with a shaded
/// one-standard-deviation band. Returns the three paths.
pub fn plot(metrics_csv: &Path, prefix: &Path) -> Result<[PathBuf; 3]> {
    let rows = read_metrics(metrics_csv)?;
    let dat = with_suffix(prefix, ".dat");
    let gp = with_suffix(prefix, ".gp");
    let png = with_suffix(prefix, ".png");

    let mut text = String::from("# iteration env_steps mean_return std_return\n");
    for r in &rows {
        text.push_str(&format!(
            "{} {} {:.9e} {:.9e}\n",
            r.iteration, r.env_steps, r.mean_return, r.std_return
        ));
    }
    write(&dat, &text)?;
    let name = dat.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write(
        &gp,
        &format!(
            "set xlabel 'iteration'\nset ylabel 'mean return'\nset key off\n\
             plot '{name}' using 1:($3-$4):($3+$4) with filledcurves lc rgb '#c8d8f0', \\\n     \
             '{name}' using 1:3 with lines lw 2 lc rgb '#1f4e9c'\n"
        ),
    )?;

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let pts: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter(|r| r.mean_return.is_finite())
        .map(|r| (r.iteration as f64, r.mean_return, if r.std_return.is_finite() { r.std_return } else { 0.0 }))
        .collect();
    let (l, t) = (MARGIN as f64, MARGIN as f64 / 2.0);
    let (r, b) = ((WIDTH - MARGIN / 2) as f64, (HEIGHT - MARGIN) as f64);
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (l, t), (l, b), axis);
    line(&mut img, (l, b), (r, b), axis);
    if !pts.is_empty() {
        let x_lo = pts.first().unwrap().0;
        let x_hi = pts.last().unwrap().0.max(x_lo + 1.0);
        let y_lo = pts.iter().map(|p| p.1 - p.2).fold(f64::INFINITY, f64::min);
        let mut y_hi = pts.iter().map(|p| p.1 + p.2).fold(f64::NEG_INFINITY, f64::max);
        if y_hi - y_lo < 1e-12 {
            y_hi = y_lo + 1.0;
        }
        let sx = |x: f64| l + (x - x_lo) / (x_hi - x_lo) * (r - l);
        let sy = |y: f64| b - (y - y_lo) / (y_hi - y_lo) * (b - t);
        for p in &pts {
            line(&mut img, (sx(p.0), sy(p.1 - p.2)), (sx(p.0), sy(p.1 + p.2)), Rgb([200, 216, 240]));
        }
        for w in pts.windows(2) {
            line(&mut img, (sx(w[0].0), sy(w[0].1)), (sx(w[1].0), sy(w[1].1)), Rgb([31, 78, 156]));
        }
        if pts.len() == 1 {
            let (x, y) = (sx(pts[0].0), sy(pts[0].1));
            line(&mut img, (x - 2.0, y), (x + 2.0, y), Rgb([31, 78, 156]));
        }
    }
    img.save(&png).map_err(|e| HarnessError::Image(e.to_string()))?;
    Ok([dat, gp, png])
}
