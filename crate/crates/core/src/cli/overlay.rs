//! Grayscale slice with truth and prediction contours as binary PPM/PGM.

pub const TRUTH_RGB: [u8; 3] = [0, 220, 0];
pub const PRED_RGB: [u8; 3] = [230, 0, 0];
pub const BOTH_RGB: [u8; 3] = [255, 220, 0];

/// Truth contour pixels in a PGM are white, prediction contour pixels black.
pub const TRUTH_GRAY: u8 = 255;
pub const PRED_GRAY: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Raster {
    Ppm,
    Pgm,
}

/// Foreground pixels with a 4-neighbour outside the mask or the image.
pub fn contour(plane: &[u8], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && plane[y as usize * w + x as usize] > 0
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// `background` holds values in `[0, 1]` for an `h x w` slice.
pub fn render(background: &[f32], truth: &[u8], pred: &[u8], h: usize, w: usize, raster: Raster) -> Vec<u8> {
    let t = contour(truth, h, w);
    let p = contour(pred, h, w);
    let gray = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (magic, channels) = match raster {
        Raster::Ppm => ("P6", 3),
        Raster::Pgm => ("P5", 1),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * channels);
    for i in 0..h * w {
        match raster {
            Raster::Ppm => {
                let rgb = match (t[i], p[i]) {
                    (true, true) => BOTH_RGB,
                    (true, false) => TRUTH_RGB,
                    (false, true) => PRED_RGB,
                    (false, false) => [gray(background[i]); 3],
                };
                out.extend_from_slice(&rgb);
            }
            Raster::Pgm => out.push(match (t[i], p[i]) {
                (true, _) => TRUTH_GRAY,
                (false, true) => PRED_GRAY,
                (false, false) => gray(background[i]),
            }),
        }
    }
    out
}
