//! Resampling of 8-bit grids and float planes.
//!
//! Resizes use half-pixel centers: output pixel `d` samples source
//! coordinate `(d + 0.5)·in/out − 0.5`. Bilinear interpolation is written
//! in the `a + (b − a)·t` form so constant regions stay exactly constant.

use super::pnm::RawImage;

/// Source taps `(i0, i1, t)` for output index `d` of a bilinear resize.
pub(crate) fn bilinear_taps(d: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let s = (d as f64 + 0.5) * (input as f64 / output as f64) - 0.5;
    let s = s.clamp(0.0, (input - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(input - 1);
    (i0, i1, s - i0 as f64)
}

/// Source index for output index `d` of a nearest-neighbour resize.
pub(crate) fn nearest_index(d: usize, input: usize, output: usize) -> usize {
    (((2 * d + 1) * input) / (2 * output)).min(input - 1)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bilinear resize to `width × height`, returning unrounded values in the
/// source range `[0, 255]`, row-major with interleaved channels.
pub fn resize_bilinear(img: &RawImage, width: usize, height: usize) -> Vec<f64> {
    let c = img.channels;
    let xs: Vec<_> = (0..width).map(|x| bilinear_taps(x, img.width, width)).collect();
    let mut out = Vec::with_capacity(width * height * c);
    for y in 0..height {
        let (y0, y1, ty) = bilinear_taps(y, img.height, height);
        for &(x0, x1, tx) in &xs {
            for ch in 0..c {
                let p = |yy, xx| img.get(yy, xx, ch) as f64;
                let top = lerp(p(y0, x0), p(y0, x1), tx);
                let bot = lerp(p(y1, x0), p(y1, x1), tx);
                out.push(lerp(top, bot, ty));
            }
        }
    }
    out
}

pub fn resize_nearest(img: &RawImage, width: usize, height: usize) -> RawImage {
    let mut px = Vec::with_capacity(width * height * img.channels);
    for y in 0..height {
        let sy = nearest_index(y, img.height, height);
        for x in 0..width {
            let sx = nearest_index(x, img.width, width);
            for ch in 0..img.channels {
                px.push(img.get(sy, sx, ch));
            }
        }
    }
    RawImage { width, height, channels: img.channels, pixels: px }
}

/// A float plane `[H, W, C]` viewed for sampling.
pub(crate) struct Plane<'a> {
    pub data: &'a [f32],
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Plane<'_> {
    fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear sample at fractional `(y, x)`; taps outside the plane
    /// read `fill`.
    pub fn bilinear(&self, y: f64, x: f64, c: usize, fill: f32) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (ty, tx) = (y - y0, x - x0);
        let tap = |yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                fill as f64
            } else {
                self.at(yy as usize, xx as usize, c) as f64
            }
        };
        let top = lerp(tap(y0, x0), tap(y0, x0 + 1.0), tx);
        let bot = lerp(tap(y0 + 1.0, x0), tap(y0 + 1.0, x0 + 1.0), tx);
        lerp(top, bot, ty) as f32
    }

    /// Nearest sample at fractional `(y, x)`, `fill` outside the plane.
    pub fn nearest(&self, y: f64, x: f64, c: usize, fill: f32) -> f32 {
        let (yy, xx) = (y.round(), x.round());
        if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
            fill
        } else {
            self.at(yy as usize, xx as usize, c)
        }
    }
}
