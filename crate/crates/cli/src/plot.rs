use image::{Rgb, RgbImage};
use wxrestore::eval::EvalReport;

const BAR: u32 = 24;
const GAP: u32 = 16;
const HEIGHT: u32 = 200;
const MARGIN: u32 = 10;

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, c: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

/// Paired bars per row (input PSNR grey, restored PSNR blue), tag rows first
/// and the average last, scaled to the largest value. Horizontal guides
/// every 10 dB.
pub fn bar_plot(report: &EvalReport) -> RgbImage {
    let mut rows: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.degraded.psnr, r.restored.psnr)).collect();
    rows.push((report.average_degraded.psnr, report.average.psnr));
    let top = rows.iter().flat_map(|&(a, b)| [a, b]).fold(1.0f64, f64::max);
    let width = 2 * MARGIN + rows.len() as u32 * (2 * BAR + GAP) - GAP;
    let mut img = RgbImage::from_pixel(width, HEIGHT + 2 * MARGIN, Rgb([255, 255, 255]));
    let scale = HEIGHT as f64 / top;
    let mut db = 10.0;
    while db < top {
        let y = MARGIN + HEIGHT - (db * scale) as u32;
        fill(&mut img, 0, y, width, 1, Rgb([225, 225, 225]));
        db += 10.0;
    }
    for (i, &(before, after)) in rows.iter().enumerate() {
        let x = MARGIN + i as u32 * (2 * BAR + GAP);
        for (k, (v, c)) in [(before, Rgb([150, 150, 150])), (after, Rgb([40, 90, 200]))].into_iter().enumerate() {
            let h = (v.max(0.0) * scale).round() as u32;
            fill(&mut img, x + k as u32 * BAR, MARGIN + HEIGHT - h, BAR - 2, h, c);
        }
    }
    fill(&mut img, 0, MARGIN + HEIGHT, width, 1, Rgb([0, 0, 0]));
    img
}
