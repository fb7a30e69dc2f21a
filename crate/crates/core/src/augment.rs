//! Zoom-and-crop view augmentation.
//!
//! Image magnification is directly proportional to the focal length, so a
//! center crop resampled to the original size is exactly the view of a camera
//! with the focal lengths scaled by the zoom factor and the principal point
//! remapped accordingly; the pose is untouched. An optional Gaussian blur
//! softens the resampled views.

use crate::error::{Error, Result};
use crate::scene::{ImageEntry, Raster, Split};

#[derive(Debug, Clone, Copy)]
pub struct AugmentSpec {
    /// Magnification, >= 1.
    pub zoom: f64,
    pub out_width: u32,
    pub out_height: u32,
    /// 0 disables the blur.
    pub blur_sigma: f64,
}

impl AugmentSpec {
    pub fn validate(&self, src_width: u32, src_height: u32) -> Result<()> {
        if self.zoom < 1.0 {
            return Err(Error::Config(format!("zoom factor {} must be >= 1", self.zoom)));
        }
        if self.out_width > src_width || self.out_height > src_height {
            return Err(Error::Config(format!(
                "output {}x{} exceeds source {}x{}",
                self.out_width, self.out_height, src_width, src_height
            )));
        }
        if self.out_width == 0 || self.out_height == 0 {
            return Err(Error::Config("output size must be positive".into()));
        }
        if self.blur_sigma < 0.0 {
            return Err(Error::Config("blur sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[inline]
fn bilinear(src: &Raster, x: f64, y: f64) -> [f32; 3] {
    let xc = x.clamp(0.0, (src.width - 1) as f64);
    let yc = y.clamp(0.0, (src.height - 1) as f64);
    let x0 = xc.floor() as u32;
    let y0 = yc.floor() as u32;
    let x1 = (x0 + 1).min(src.width - 1);
    let y1 = (y0 + 1).min(src.height - 1);
    let fx = (xc - x0 as f64) as f32;
    let fy = (yc - y0 as f64) as f32;
    let p00 = src.at(x0, y0);
    let p10 = src.at(x1, y0);
    let p01 = src.at(x0, y1);
    let p11 = src.at(x1, y1);
    let mut out = [0.0f32; 3];
    for ch in 0..3 {
        let top = p00[ch] * (1.0 - fx) + p10[ch] * fx;
        let bot = p01[ch] * (1.0 - fx) + p11[ch] * fx;
        out[ch] = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Center-anchored zoom-and-crop. The new entry keeps the pose, scales the
/// focal lengths by the zoom factor and remaps the principal point so the ray
/// through any augmented pixel coincides with the source camera's ray through
/// the corresponding source location. Marked as an augmented train view.
pub fn zoom_and_crop(
    entry: &ImageEntry,
    pixels: &Raster,
    spec: &AugmentSpec,
) -> Result<(Raster, ImageEntry)> {
    spec.validate(entry.width, entry.height)?;
    if (pixels.width, pixels.height) != (entry.width, entry.height) {
        return Err(Error::Config("raster does not match the manifest entry".into()));
    }
    let crop_w = spec.out_width as f64 / spec.zoom;
    let crop_h = spec.out_height as f64 / spec.zoom;
    let crop_x0 = (entry.width as f64 - crop_w) / 2.0;
    let crop_y0 = (entry.height as f64 - crop_h) / 2.0;
    if crop_x0 < 0.0 || crop_y0 < 0.0 {
        return Err(Error::Config("crop window exceeds the source bounds".into()));
    }

    let mut out = Raster::new(spec.out_width, spec.out_height);
    for v in 0..spec.out_height {
        for u in 0..spec.out_width {
            let sx = crop_x0 + (u as f64 + 0.5) / spec.zoom - 0.5;
            let sy = crop_y0 + (v as f64 + 0.5) / spec.zoom - 0.5;
            *out.at_mut(u, v) = bilinear(pixels, sx, sy);
        }
    }
    if spec.blur_sigma > 0.0 {
        out = gaussian_blur(&out, spec.blur_sigma);
    }

    let mut new_entry = entry.clone();
    new_entry.width = spec.out_width;
    new_entry.height = spec.out_height;
    new_entry.fx = entry.fx * spec.zoom;
    new_entry.fy = entry.fy * spec.zoom;
    new_entry.cx = (entry.cx - crop_x0) * spec.zoom;
    new_entry.cy = (entry.cy - crop_y0) * spec.zoom;
    new_entry.split = Split::Train;
    new_entry.augmented = true;
    Ok((out, new_entry))
}

/// Separable Gaussian blur, kernel radius ⌈3σ⌉, symmetric reflection at the
/// image border. σ = 0 returns the input unchanged.
pub fn gaussian_blur(src: &Raster, sigma: f64) -> Raster {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return src.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for j in -radius..=radius {
        let w = (-(j as f64 * j as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in kernel.iter_mut() {
        *w /= sum;
    }

    let reflect = |i: i64, n: i64| -> usize {
        // symmetric: -1 -> 0, n -> n-1
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };

    let w = src.width as i64;
    let h = src.height as i64;
    let mut tmp = Raster::new(src.width, src.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (ki, &kw) in kernel.iter().enumerate() {
                let sx = reflect(x + ki as i64 - radius, w);
                let p = src.at(sx as u32, y as u32);
                for ch in 0..3 {
                    acc[ch] += kw * p[ch] as f64;
                }
            }
            *tmp.at_mut(x as u32, y as u32) = [acc[0] as f32, acc[1] as f32, acc[2] as f32];
        }
    }
    let mut out = Raster::new(src.width, src.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (ki, &kw) in kernel.iter().enumerate() {
                let sy = reflect(y + ki as i64 - radius, h);
                let p = tmp.at(x as u32, sy as u32);
                for ch in 0..3 {
                    acc[ch] += kw * p[ch] as f64;
                }
            }
            *out.at_mut(x as u32, y as u32) = [acc[0] as f32, acc[1] as f32, acc[2] as f32];
        }
    }
    out
}
