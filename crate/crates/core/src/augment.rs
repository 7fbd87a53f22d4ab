//! Training augmentation and evaluation preprocessing.
//!
//! The training chain (resize, flip, brightness, contrast, rotation, crop,
//! resize, normalize) is evaluated as one inverse mapping from each output
//! pixel back to the source image, followed by a single bilinear sample.
//! Brightness and contrast act on that sample. The contrast mean is the
//! mean of the brightness-adjusted image at the intermediate resolution.
//!
//! Coordinates are kept relative to image centres, so a flip is an exact
//! sign change and horizontally symmetric images give bitwise-identical
//! flipped and unflipped outputs.

use octmh_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub resize_to: usize,
    pub hflip_prob: f64,
    pub brightness_range: [f64; 2],
    pub contrast_range: [f64; 2],
    /// Degrees, counter-clockwise positive.
    pub rotation_range: [f64; 2],
    /// Side-length ratio of the crop to the resized image.
    pub crop_ratio_range: [f64; 2],
    pub final_size: usize,
    pub channel_means: [f64; 3],
    pub channel_stds: [f64; 3],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            resize_to: 256,
            hflip_prob: 0.5,
            brightness_range: [-0.3, 0.3],
            contrast_range: [-0.3, 0.3],
            rotation_range: [-10.0, 10.0],
            crop_ratio_range: [0.7, 1.0],
            final_size: 224,
            channel_means: [0.485, 0.456, 0.406],
            channel_stds: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentationConfig {
    /// Default chain scaled to a smaller output, keeping the 256:224 ratio
    /// between the intermediate and final sizes.
    pub fn at_size(final_size: usize) -> Self {
        Self {
            resize_to: ((final_size as f64) * 256.0 / 224.0).round() as usize,
            final_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
            ("rotation_range", self.rotation_range),
            ("crop_ratio_range", self.crop_ratio_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} [{lo}, {hi}] is not an ordered range")));
            }
        }
        let [lo, hi] = self.crop_ratio_range;
        if lo <= 0.0 || hi > 1.0 {
            return Err(Error::Config(format!("crop_ratio_range [{lo}, {hi}] must lie in (0, 1]")));
        }
        if self.brightness_range[0] < -1.0 || self.contrast_range[0] < -1.0 {
            return Err(Error::Config("brightness and contrast factors must be >= -1".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        if self.final_size == 0 || self.final_size > self.resize_to {
            return Err(Error::Config(format!(
                "final_size {} must be in 1..={}",
                self.final_size, self.resize_to
            )));
        }
        if self.channel_stds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("channel_stds must be positive".into()));
        }
        Ok(())
    }

    /// Elements of one `3 x F x F` output.
    pub fn output_len(&self) -> usize {
        3 * self.final_size * self.final_size
    }
}

/// The random choices of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraws {
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub angle_deg: f64,
    pub crop_ratio: f64,
    /// Crop position as fractions of the free range, in `[0, 1)`.
    pub crop_x: f64,
    pub crop_y: f64,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

impl AugmentDraws {
    /// Draws in chain order: flip, brightness, contrast, angle, crop.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> Self {
        let flip = rng.random::<f64>() < cfg.hflip_prob;
        let brightness = uniform(rng, cfg.brightness_range);
        let contrast = uniform(rng, cfg.contrast_range);
        let angle_deg = uniform(rng, cfg.rotation_range);
        let crop_ratio = uniform(rng, cfg.crop_ratio_range);
        let crop_x = rng.random::<f64>();
        let crop_y = rng.random::<f64>();
        Self {
            flip,
            brightness,
            contrast,
            angle_deg,
            crop_ratio,
            crop_x,
            crop_y,
        }
    }

    pub fn identity() -> Self {
        Self {
            flip: false,
            brightness: 0.0,
            contrast: 0.0,
            angle_deg: 0.0,
            crop_ratio: 1.0,
            crop_x: 0.0,
            crop_y: 0.0,
        }
    }
}

/// Bilinear sample at offsets `(v, u)` from the image centre, in source
/// pixels, with edge clamping. Negative `u` reads the mirrored image at `|u|`,
/// which is the same value in exact arithmetic and makes mirroring exact.
#[inline]
fn sample(img: &ImageBuffer, v: f64, u: f64, c: usize) -> f64 {
    let (h, w) = (img.height(), img.width());
    let (yi, fy) = split(v.abs() + (h as f64 - 1.0) / 2.0, h);
    let (xi, fx) = split(u.abs() + (w as f64 - 1.0) / 2.0, w);
    let ry = |i: usize| if v < 0.0 { h - 1 - i } else { i };
    let rx = |i: usize| if u < 0.0 { w - 1 - i } else { i };
    let p = |y: usize, x: usize| img.get(ry(y), rx(x), c) as f64;
    let (y0, y1) = yi;
    let (x0, x1) = xi;
    let top = lerp(p(y0, x0), p(y0, x1), fx);
    let bottom = lerp(p(y1, x0), p(y1, x1), fx);
    lerp(top, bottom, fy)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Neighbouring indices and weight for a position, clamped to `0..n`.
#[inline]
fn split(x: f64, n: usize) -> ((usize, usize), f64) {
    let max = (n - 1) as f64;
    let x = x.clamp(0.0, max);
    let i = x.floor();
    let i0 = i as usize;
    ((i0, (i0 + 1).min(n - 1)), x - i)
}

/// Validates the image and returns its channel count to process.
fn check(img: &ImageBuffer, cfg: &AugmentationConfig, out: &[f32]) -> Result<()> {
    if img.is_empty() {
        return Err(Error::Image("zero-sized image".into()));
    }
    if out.len() != cfg.output_len() {
        return Err(Error::Image(format!("output buffer {} != {}", out.len(), cfg.output_len())));
    }
    Ok(())
}

fn write_normalized(out: &mut [f32], cfg: &AugmentationConfig, idx: usize, values: [f64; 3]) {
    let plane = cfg.final_size * cfg.final_size;
    for c in 0..3 {
        out[c * plane + idx] = ((values[c] / 255.0 - cfg.channel_means[c]) / cfg.channel_stds[c]) as f32;
    }
}

fn pixel(img: &ImageBuffer, v: f64, u: f64) -> [f64; 3] {
    if img.channels() == 1 {
        let g = sample(img, v, u, 0);
        [g; 3]
    } else {
        [sample(img, v, u, 0), sample(img, v, u, 1), sample(img, v, u, 2)]
    }
}

/// Resize to `F x F` and normalize.
pub fn preprocess_eval_into(img: &ImageBuffer, cfg: &AugmentationConfig, out: &mut [f32]) -> Result<()> {
    check(img, cfg, out)?;
    let f = cfg.final_size;
    let centre = (f as f64 - 1.0) / 2.0;
    let sy = img.height() as f64 / f as f64;
    let sx = img.width() as f64 / f as f64;
    for i in 0..f {
        let v = (i as f64 - centre) * sy;
        for j in 0..f {
            let u = (j as f64 - centre) * sx;
            write_normalized(out, cfg, i * f + j, pixel(img, v, u));
        }
    }
    Ok(())
}

pub fn preprocess_eval(img: &ImageBuffer, cfg: &AugmentationConfig) -> Result<Tensor<f32>> {
    let mut out = vec![0.0; cfg.output_len()];
    preprocess_eval_into(img, cfg, &mut out)?;
    Ok(Tensor::new(vec![3, cfg.final_size, cfg.final_size], out)?)
}

pub fn augment_into(img: &ImageBuffer, cfg: &AugmentationConfig, d: &AugmentDraws, out: &mut [f32]) -> Result<()> {
    check(img, cfg, out)?;
    let r = cfg.resize_to;
    let rf = r as f64;
    let f = cfg.final_size;
    let (sy, sx) = (img.height() as f64 / rf, img.width() as f64 / rf);
    let bright = 1.0 + d.brightness;
    let contrast = 1.0 + d.contrast;
    let adjust_b = |x: f64| if d.brightness == 0.0 { x } else { (x * bright).clamp(0.0, 255.0) };

    // Per-image mean after brightness, over the intermediate R x R image.
    let mean = if d.contrast == 0.0 {
        0.0
    } else {
        let centre = (rf - 1.0) / 2.0;
        let mut sum = 0.0;
        for y in 0..r {
            let v = (y as f64 - centre) * sy;
            for x in 0..r {
                let u = (x as f64 - centre) * sx;
                sum += pixel(img, v, u).iter().map(|&p| adjust_b(p)).sum::<f64>();
            }
        }
        sum / (3 * r * r) as f64
    };
    let adjust = |x: f64| {
        let b = adjust_b(x);
        if d.contrast == 0.0 {
            b
        } else {
            ((b - mean) * contrast + mean).clamp(0.0, 255.0)
        }
    };

    let crop = ((d.crop_ratio * rf).floor() as usize).clamp(1, r);
    let free = (r - crop) as f64;
    let ox = (d.crop_x * (free + 1.0)).floor().min(free);
    let oy = (d.crop_y * (free + 1.0)).floor().min(free);
    let cf = crop as f64;
    // Crop centre relative to the centre of the intermediate image.
    let cx = ox + (cf - 1.0) / 2.0 - (rf - 1.0) / 2.0;
    let cy = oy + (cf - 1.0) / 2.0 - (rf - 1.0) / 2.0;
    let scale = cf / f as f64;
    let theta = d.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let half = rf / 2.0;
    let out_centre = (f as f64 - 1.0) / 2.0;

    for i in 0..f {
        let yr = cy + (i as f64 - out_centre) * scale;
        for j in 0..f {
            let xr = cx + (j as f64 - out_centre) * scale;
            // Undo a counter-clockwise rotation (y axis pointing down).
            let (xp, yp) = if theta == 0.0 {
                (xr, yr)
            } else {
                (xr * cos - yr * sin, xr * sin + yr * cos)
            };
            let idx = i * f + j;
            if xp.abs() > half || yp.abs() > half {
                write_normalized(out, cfg, idx, [0.0; 3]);
                continue;
            }
            let xp = if d.flip { -xp } else { xp };
            let p = pixel(img, yp * sy, xp * sx);
            write_normalized(out, cfg, idx, [adjust(p[0]), adjust(p[1]), adjust(p[2])]);
        }
    }
    Ok(())
}

pub fn augment_with(img: &ImageBuffer, cfg: &AugmentationConfig, d: &AugmentDraws) -> Result<Tensor<f32>> {
    let mut out = vec![0.0; cfg.output_len()];
    augment_into(img, cfg, d, &mut out)?;
    Ok(Tensor::new(vec![3, cfg.final_size, cfg.final_size], out)?)
}

pub fn augment_train<R: Rng + ?Sized>(img: &ImageBuffer, cfg: &AugmentationConfig, rng: &mut R) -> Result<Tensor<f32>> {
    let d = AugmentDraws::sample(cfg, rng);
    augment_with(img, cfg, &d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::gray(h, w, (0..h * w).map(|i| ((i * 37) % 256) as u8).collect()).unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        AugmentationConfig::default().validate().unwrap();
        let small = AugmentationConfig::at_size(64);
        small.validate().unwrap();
        assert_eq!(small.resize_to, 73);
    }

    #[test]
    fn bad_ranges_rejected() {
        let c = AugmentationConfig {
            rotation_range: [5.0, -5.0],
            ..AugmentationConfig::default()
        };
        assert!(c.validate().is_err());
        let c = AugmentationConfig {
            final_size: 300,
            ..AugmentationConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_size_eval_is_pure_normalization() {
        let img = ramp(8, 8);
        let mut cfg = AugmentationConfig::at_size(8);
        cfg.resize_to = 8;
        let t = preprocess_eval(&img, &cfg).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = ((img.get(y, x, 0) as f64 / 255.0 - cfg.channel_means[1]) / cfg.channel_stds[1]) as f32;
                assert_eq!(t.data()[64 + y * 8 + x], want);
            }
        }
    }

    #[test]
    fn full_rotation_keeps_centre() {
        let img = ImageBuffer::gray(16, 16, vec![200; 256]).unwrap();
        let cfg = AugmentationConfig::at_size(16);
        let mut d = AugmentDraws::identity();
        d.angle_deg = 45.0;
        let t = augment_with(&img, &cfg, &d).unwrap();
        let black = ((0.0 - cfg.channel_means[0]) / cfg.channel_stds[0]) as f32;
        let bright = ((200.0 / 255.0 - cfg.channel_means[0]) / cfg.channel_stds[0]) as f32;
        assert_eq!(t.data()[0], black, "corner falls outside the rotated frame");
        assert_eq!(t.data()[8 * 16 + 8], bright);
    }

    #[test]
    fn empty_image_rejected() {
        let img = ImageBuffer::gray(0, 5, vec![]).unwrap();
        assert!(preprocess_eval(&img, &AugmentationConfig::at_size(4)).is_err());
    }
}
