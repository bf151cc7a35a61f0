use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 24;
const MAG: Rgb<u8> = Rgb([52, 101, 164]);
const PHA: Rgb<u8> = Rgb([230, 126, 34]);

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

/// Grouped bars: magnitude-path weight left, phase-path weight right, one
/// group per layer, heights scaled to the largest weight.
pub fn layer_weight_chart(mag: &[f64], pha: &[f64]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let layers = mag.len().max(pha.len()).max(1) as u32;
    let top = mag.iter().chain(pha).copied().fold(0.0f64, f64::max).max(1e-12);
    let plot_h = HEIGHT - 2 * MARGIN;
    let group = (WIDTH - 2 * MARGIN) / layers;
    let bar = (group / 3).max(1);
    let base = HEIGHT - MARGIN;
    for l in 0..layers {
        let x = MARGIN + l * group + group / 6;
        for (k, (vals, color)) in [(mag, MAG), (pha, PHA)].into_iter().enumerate() {
            if let Some(&v) = vals.get(l as usize) {
                let h = ((v / top) * plot_h as f64).round() as u32;
                let left = x + k as u32 * bar;
                fill(&mut img, left, base - h, left + bar - 1, base, color);
            }
        }
    }
    fill(&mut img, MARGIN, base, WIDTH - MARGIN, base + 1, Rgb([0, 0, 0]));
    img
}
