//! Training-time augmentations.
//!
//! Geometric operations move image and mask with the same parameters;
//! images are resampled bilinearly and masks by nearest neighbour, so
//! masks stay binary. CutOut touches the image only, CutMix both.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::resize::{bilinear_taps, nearest_index, Plane};
use super::Sample;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::kv::KvConfig;

/// Image fill for pixels rotated in from outside the frame.
const IMAGE_FILL: f32 = -1.0;

/// Probabilities and ranges of each augmentation. A probability of zero
/// disables the operation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub center_crop_p: f64,
    /// Smallest kept side fraction of a center crop.
    pub crop_min: f64,
    pub rotate_p: f64,
    /// Rotations are drawn from `±rotate_max_deg`.
    pub rotate_max_deg: f64,
    pub grid_p: f64,
    pub grid_cells: usize,
    pub grid_magnitude: f64,
    pub cutout_p: f64,
    /// Largest hole side as a fraction of the image side.
    pub cutout_max_frac: f64,
    pub cutmix_p: f64,
    pub cutmix_beta: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            center_crop_p: 0.5,
            crop_min: 0.8,
            rotate_p: 0.5,
            rotate_max_deg: 90.0,
            grid_p: 0.5,
            grid_cells: 5,
            grid_magnitude: 0.3,
            cutout_p: 0.5,
            cutout_max_frac: 0.25,
            cutmix_p: 0.5,
            cutmix_beta: 1.0,
            hflip_p: 0.5,
            vflip_p: 0.5,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "center_crop_p",
    "crop_min",
    "rotate_p",
    "rotate_max_deg",
    "grid_p",
    "grid_cells",
    "grid_magnitude",
    "cutout_p",
    "cutout_max_frac",
    "cutmix_p",
    "cutmix_beta",
    "hflip_p",
    "vflip_p",
    "seed",
];

impl AugmentConfig {
    /// Every operation switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            center_crop_p: 0.0,
            rotate_p: 0.0,
            grid_p: 0.0,
            cutout_p: 0.0,
            cutmix_p: 0.0,
            hflip_p: 0.0,
            vflip_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("center_crop_p", self.center_crop_p),
            ("rotate_p", self.rotate_p),
            ("grid_p", self.grid_p),
            ("cutout_p", self.cutout_p),
            ("cutmix_p", self.cutmix_p),
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("aug.{name} = {p} is not a probability")));
            }
        }
        if !(self.crop_min > 0.0 && self.crop_min <= 1.0) {
            return Err(Error::Config(format!("aug.crop_min = {} must be in (0, 1]", self.crop_min)));
        }
        if !(self.cutout_max_frac > 0.0 && self.cutout_max_frac <= 1.0) {
            return Err(Error::Config(format!("aug.cutout_max_frac = {} must be in (0, 1]", self.cutout_max_frac)));
        }
        if !(0.0..180.0).contains(&self.rotate_max_deg) {
            return Err(Error::Config(format!("aug.rotate_max_deg = {} must be in [0, 180)", self.rotate_max_deg)));
        }
        if self.grid_cells == 0 || !(0.0..1.0).contains(&self.grid_magnitude) {
            return Err(Error::Config("aug.grid_cells must be positive and aug.grid_magnitude in [0, 1)".into()));
        }
        if self.cutmix_beta <= 0.0 || !self.cutmix_beta.is_finite() {
            return Err(Error::Config(format!("aug.cutmix_beta = {} must be positive", self.cutmix_beta)));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("aug.center_crop_p", self.center_crop_p);
        kv.set("aug.crop_min", self.crop_min);
        kv.set("aug.rotate_p", self.rotate_p);
        kv.set("aug.rotate_max_deg", self.rotate_max_deg);
        kv.set("aug.grid_p", self.grid_p);
        kv.set("aug.grid_cells", self.grid_cells);
        kv.set("aug.grid_magnitude", self.grid_magnitude);
        kv.set("aug.cutout_p", self.cutout_p);
        kv.set("aug.cutout_max_frac", self.cutout_max_frac);
        kv.set("aug.cutmix_p", self.cutmix_p);
        kv.set("aug.cutmix_beta", self.cutmix_beta);
        kv.set("aug.hflip_p", self.hflip_p);
        kv.set("aug.vflip_p", self.vflip_p);
        kv.set("aug.seed", self.seed);
    }

    /// Reads `aug.*` keys over the defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.reject_unknown("aug.", KEYS)?;
        let mut c = AugmentConfig::default();
        let f64s: [(&str, &mut f64); 12] = [
            ("aug.center_crop_p", &mut c.center_crop_p),
            ("aug.crop_min", &mut c.crop_min),
            ("aug.rotate_p", &mut c.rotate_p),
            ("aug.rotate_max_deg", &mut c.rotate_max_deg),
            ("aug.grid_p", &mut c.grid_p),
            ("aug.grid_magnitude", &mut c.grid_magnitude),
            ("aug.cutout_p", &mut c.cutout_p),
            ("aug.cutout_max_frac", &mut c.cutout_max_frac),
            ("aug.cutmix_p", &mut c.cutmix_p),
            ("aug.cutmix_beta", &mut c.cutmix_beta),
            ("aug.hflip_p", &mut c.hflip_p),
            ("aug.vflip_p", &mut c.vflip_p),
        ];
        for (key, slot) in f64s {
            if let Some(v) = kv.parsed(key)? {
                *slot = v;
            }
        }
        if let Some(v) = kv.parsed("aug.grid_cells")? {
            c.grid_cells = v;
        }
        if let Some(v) = kv.parsed("aug.seed")? {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }
}

/// An axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    fn clamped(self, h: usize, w: usize) -> Rect {
        let top = self.top.min(h);
        let left = self.left.min(w);
        Rect { top, left, height: self.height.min(h - top), width: self.width.min(w - left) }
    }
}

fn rebuild(s: &Sample, image: Vec<f32>, mask: Vec<f32>) -> Sample {
    Sample {
        id: s.id.clone(),
        image: Tensor::new(s.image.shape().to_vec(), image).expect("same shape"),
        mask: Tensor::new(s.mask.shape().to_vec(), mask).expect("same shape"),
    }
}

/// Resamples image and mask through `map(y, x) -> (sy, sx)`.
fn warp(s: &Sample, fill: f32, map: impl Fn(usize, usize) -> (f64, f64)) -> Sample {
    let (h, w) = (s.height(), s.width());
    let img = Plane { data: s.image.data(), height: h, width: w, channels: 3 };
    let msk = Plane { data: s.mask.data(), height: h, width: w, channels: 1 };
    let mut image = Vec::with_capacity(h * w * 3);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y, x);
            for c in 0..3 {
                image.push(img.bilinear(sy, sx, c, fill));
            }
            mask.push(msk.nearest(sy, sx, 0, 0.0));
        }
    }
    rebuild(s, image, mask)
}

/// Keeps the central `frac` of each side and scales it back to full size.
pub fn center_crop(s: &Sample, frac: f64) -> Sample {
    let (h, w) = (s.height(), s.width());
    let frac = frac.clamp(f64::MIN_POSITIVE, 1.0);
    let ch = ((frac * h as f64).round() as usize).clamp(1, h);
    let cw = ((frac * w as f64).round() as usize).clamp(1, w);
    let (top, left) = ((h - ch) / 2, (w - cw) / 2);
    let img = Plane { data: s.image.data(), height: h, width: w, channels: 3 };
    let mut image = Vec::with_capacity(h * w * 3);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, ty) = bilinear_taps(y, ch, h);
        let my = top + nearest_index(y, ch, h);
        for x in 0..w {
            let (x0, x1, tx) = bilinear_taps(x, cw, w);
            let mx = left + nearest_index(x, cw, w);
            for c in 0..3 {
                let sy = (top + y0) as f64 + ty * (y1 - y0) as f64;
                let sx = (left + x0) as f64 + tx * (x1 - x0) as f64;
                image.push(img.bilinear(sy, sx, c, IMAGE_FILL));
            }
            mask.push(s.mask.data()[my * w + mx]);
        }
    }
    rebuild(s, image, mask)
}

/// Rotates counter-clockwise by `degrees` about the image center.
pub fn rotate(s: &Sample, degrees: f64) -> Sample {
    let (h, w) = (s.height(), s.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    warp(s, IMAGE_FILL, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx)
    })
}

/// Piecewise-linear source positions of `cells` grid cells along an axis
/// of `len` pixels, each cell stretched by a factor in `1 ± magnitude`.
fn distorted_axis(len: usize, cells: usize, magnitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    let last = (len - 1) as f64;
    let steps: Vec<f64> = (0..cells).map(|_| 1.0 + rng.random_range(-magnitude..=magnitude)).collect();
    let total: f64 = steps.iter().sum();
    let mut knots = vec![0.0];
    for s in &steps {
        knots.push(knots.last().expect("nonempty") + s / total * last);
    }
    (0..len)
        .map(|p| {
            let u = p as f64 / last.max(1.0) * cells as f64;
            let i = (u.floor() as usize).min(cells - 1);
            let t = u - i as f64;
            knots[i] + (knots[i + 1] - knots[i]) * t
        })
        .collect()
}

/// Grid distortion: each axis is split into `cells` cells whose widths are
/// jittered by up to `magnitude`.
pub fn grid_distortion(s: &Sample, cells: usize, magnitude: f64, rng: &mut impl Rng) -> Sample {
    let cells = cells.max(1);
    let ys = distorted_axis(s.height(), cells, magnitude, rng);
    let xs = distorted_axis(s.width(), cells, magnitude, rng);
    warp(s, IMAGE_FILL, |y, x| (ys[y], xs[x]))
}

/// Zeroes `rect` in the image; the mask is unchanged.
pub fn cutout(s: &Sample, rect: Rect) -> Sample {
    let (h, w) = (s.height(), s.width());
    let rect = rect.clamped(h, w);
    let mut image = s.image.data().to_vec();
    for y in rect.top..rect.top + rect.height {
        for x in rect.left..rect.left + rect.width {
            image[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(0.0);
        }
    }
    rebuild(s, image, s.mask.data().to_vec())
}

/// Pastes `rect` of `donor` (image and mask) into `s`.
pub fn cutmix(s: &Sample, donor: &Sample, rect: Rect) -> Result<Sample> {
    if s.image.shape() != donor.image.shape() || s.mask.shape() != donor.mask.shape() {
        return Err(Error::Dimension(format!(
            "cutmix: donor {:?} does not match {:?}",
            donor.image.shape(),
            s.image.shape()
        )));
    }
    let (h, w) = (s.height(), s.width());
    let rect = rect.clamped(h, w);
    let mut image = s.image.data().to_vec();
    let mut mask = s.mask.data().to_vec();
    for y in rect.top..rect.top + rect.height {
        for x in rect.left..rect.left + rect.width {
            let i = y * w + x;
            image[i * 3..i * 3 + 3].copy_from_slice(&donor.image.data()[i * 3..i * 3 + 3]);
            mask[i] = donor.mask.data()[i];
        }
    }
    Ok(rebuild(s, image, mask))
}

pub fn hflip(s: &Sample) -> Sample {
    let w = s.width();
    warp(s, IMAGE_FILL, |y, x| (y as f64, (w - 1 - x) as f64))
}

pub fn vflip(s: &Sample) -> Sample {
    let h = s.height();
    warp(s, IMAGE_FILL, |y, x| ((h - 1 - y) as f64, x as f64))
}

fn cutout_rect(h: usize, w: usize, max_frac: f64, rng: &mut impl Rng) -> Rect {
    let mh = ((max_frac * h as f64) as usize).max(1);
    let mw = ((max_frac * w as f64) as usize).max(1);
    let height = rng.random_range(1..=mh);
    let width = rng.random_range(1..=mw);
    Rect { top: rng.random_range(0..=h - height), left: rng.random_range(0..=w - width), height, width }
}

/// CutMix box: side ratio `sqrt(1 − λ)` with `λ ~ Beta(β, β)`, centered
/// uniformly and clipped to the frame.
fn cutmix_rect(h: usize, w: usize, beta: f64, rng: &mut impl Rng) -> Rect {
    let lambda: f64 = Beta::new(beta, beta).expect("validated beta").sample(rng);
    let r = (1.0 - lambda).max(0.0).sqrt();
    let (rh, rw) = ((h as f64 * r) as usize, (w as f64 * r) as usize);
    let (cy, cx) = (rng.random_range(0..h), rng.random_range(0..w));
    let top = cy.saturating_sub(rh / 2);
    let left = cx.saturating_sub(rw / 2);
    let bottom = (cy + rh - rh / 2).min(h);
    let right = (cx + rw - rw / 2).min(w);
    Rect { top, left, height: bottom - top, width: right - left }
}

/// Applies the configured pipeline: center crop, rotation, grid
/// distortion, flips, CutOut, then CutMix with `donor` when given.
pub fn augment(s: &Sample, donor: Option<&Sample>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    let mut out = s.clone();
    if rng.random_bool(cfg.center_crop_p) {
        let frac = rng.random_range(cfg.crop_min..=1.0);
        out = center_crop(&out, frac);
    }
    if rng.random_bool(cfg.rotate_p) {
        let deg = rng.random_range(-cfg.rotate_max_deg..=cfg.rotate_max_deg);
        out = rotate(&out, deg);
    }
    if rng.random_bool(cfg.grid_p) {
        out = grid_distortion(&out, cfg.grid_cells, cfg.grid_magnitude, rng);
    }
    if rng.random_bool(cfg.hflip_p) {
        out = hflip(&out);
    }
    if rng.random_bool(cfg.vflip_p) {
        out = vflip(&out);
    }
    if rng.random_bool(cfg.cutout_p) {
        let rect = cutout_rect(out.height(), out.width(), cfg.cutout_max_frac, rng);
        out = cutout(&out, rect);
    }
    if let Some(d) = donor {
        if rng.random_bool(cfg.cutmix_p) {
            let rect = cutmix_rect(out.height(), out.width(), cfg.cutmix_beta, rng);
            out = cutmix(&out, d, rect)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample(seed: u64, h: usize, w: usize) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sample {
            id: format!("s{seed}"),
            image: Tensor::from_fn(vec![h, w, 3], |_| rng.random_range(-1.0f32..1.0)).unwrap(),
            mask: Tensor::from_fn(vec![h, w, 1], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).unwrap(),
        }
    }

    fn is_binary(s: &Sample) -> bool {
        s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    #[test]
    fn flips_are_involutions() {
        let s = sample(1, 6, 9);
        assert_eq!(hflip(&hflip(&s)), s);
        assert_eq!(vflip(&vflip(&s)), s);
        assert_ne!(hflip(&s), s);
    }

    #[test]
    fn hflip_mirrors_columns() {
        let s = sample(2, 3, 4);
        let f = hflip(&s);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(f.mask.data()[y * 4 + x], s.mask.data()[y * 4 + 3 - x]);
            }
        }
    }

    #[test]
    fn zero_rotation_and_full_crop_are_identity() {
        let s = sample(3, 8, 8);
        assert_eq!(rotate(&s, 0.0), s);
        assert_eq!(center_crop(&s, 1.0), s);
    }

    #[test]
    fn quarter_turn_moves_corners() {
        let mut s = sample(4, 4, 4);
        s.mask = Tensor::from_fn(vec![4, 4, 1], |i| if i == 0 { 1.0 } else { 0.0 }).unwrap();
        let r = rotate(&s, 90.0);
        // Counter-clockwise: the top-left corner lands bottom-left.
        assert_eq!(r.mask.data()[12], 1.0);
        assert_eq!(r.mask.data().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn cutout_touches_only_the_image_rect() {
        let s = sample(5, 8, 8);
        let rect = Rect { top: 2, left: 3, height: 3, width: 2 };
        let c = cutout(&s, rect);
        assert_eq!(c.mask, s.mask);
        for y in 0..8 {
            for x in 0..8 {
                let i = (y * 8 + x) * 3;
                if rect.contains(y, x) {
                    assert_eq!(&c.image.data()[i..i + 3], &[0.0; 3]);
                } else {
                    assert_eq!(&c.image.data()[i..i + 3], &s.image.data()[i..i + 3]);
                }
            }
        }
    }

    #[test]
    fn cutmix_pastes_exactly_the_rect_area() {
        let s = sample(6, 10, 12);
        let mut donor = sample(7, 10, 12);
        donor.mask = Tensor::full(vec![10, 12, 1], 1.0).unwrap();
        let mut base = s.clone();
        base.mask = Tensor::zeros(vec![10, 12, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let rect = cutmix_rect(10, 12, 1.0, &mut rng);
            let m = cutmix(&base, &donor, rect).unwrap();
            assert_eq!(m.mask.data().iter().filter(|&&v| v == 1.0).count(), rect.area());
        }
    }

    #[test]
    fn cutmix_rejects_mismatched_donor() {
        assert!(matches!(cutmix(&sample(1, 4, 4), &sample(2, 4, 5), Rect { top: 0, left: 0, height: 1, width: 1 }), Err(Error::Dimension(_))));
    }

    #[test]
    fn augmented_masks_stay_binary_and_shaped() {
        let cfg = AugmentConfig { center_crop_p: 1.0, rotate_p: 1.0, grid_p: 1.0, cutout_p: 1.0, cutmix_p: 1.0, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let s = sample(seed, 16, 16);
            let d = sample(seed + 100, 16, 16);
            let a = augment(&s, Some(&d), &cfg, &mut rng).unwrap();
            assert!(is_binary(&a));
            assert_eq!(a.image.shape(), s.image.shape());
            assert!(a.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn disabled_pipeline_is_identity() {
        let s = sample(8, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&s, Some(&sample(9, 8, 8)), &AugmentConfig::disabled(), &mut rng).unwrap(), s);
    }

    #[test]
    fn grid_distortion_with_zero_magnitude_is_identity() {
        let s = sample(10, 9, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grid_distortion(&s, 4, 0.0, &mut rng);
        assert_eq!(g.mask, s.mask);
        for (a, b) in g.image.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn config_kv_roundtrip_and_validation() {
        let cfg = AugmentConfig { hflip_p: 0.25, grid_cells: 3, seed: 42, ..AugmentConfig::default() };
        let mut kv = KvConfig::new();
        cfg.write_kv(&mut kv);
        assert_eq!(AugmentConfig::from_kv(&kv).unwrap(), cfg);
        kv.set("aug.hflip_p", 1.5);
        assert!(matches!(AugmentConfig::from_kv(&kv), Err(Error::Config(_))));
        let mut kv = KvConfig::new();
        kv.set("aug.mixup", 1);
        assert!(matches!(AugmentConfig::from_kv(&kv), Err(Error::Config(_))));
    }
}
