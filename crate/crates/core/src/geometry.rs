//! Camera rays, altitude-bounded ray parameterization, and the two-stage
//! sampling scheme: stratified coarse bins plus weight-guided fine samples
//! drawn by inverse-transform sampling of the coarse-bin PDF.

use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Padding added to every coarse weight before normalization so the fine
/// sampler never collapses onto a degenerate PDF.
pub const WEIGHT_PAD: f64 = 0.01;

/// Minimum |direction_z| below which a ray is treated as parallel to the
/// ground plane and rejected by the altitude clip.
const MIN_DIR_Z: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: [f64; 3],
    /// Unit direction.
    pub dir: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    #[inline]
    pub fn point_at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

/// Pinhole camera: +x right, +y up, looking down -z in the camera frame.
#[derive(Debug, Clone)]
pub struct Camera {
    /// Camera-to-world rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub origin: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Ray through the continuous image point `(x, y)` (pixel units, origin at
    /// the top-left corner of the top-left pixel). No ray bounds are set.
    pub fn ray_through(&self, x: f64, y: f64) -> Ray {
        let dc = [(x - self.cx) / self.fx, -(y - self.cy) / self.fy, -1.0];
        let r = &self.rotation;
        let mut d = [
            r[0][0] * dc[0] + r[0][1] * dc[1] + r[0][2] * dc[2],
            r[1][0] * dc[0] + r[1][1] * dc[1] + r[1][2] * dc[2],
            r[2][0] * dc[0] + r[2][1] * dc[1] + r[2][2] * dc[2],
        ];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        d = [d[0] / n, d[1] / n, d[2] / n];
        Ray { origin: self.origin, dir: d, t_near: 0.0, t_far: f64::INFINITY }
    }

    /// Ray through the center of integer pixel `(u, v)`.
    #[inline]
    pub fn ray_through_pixel(&self, u: u32, v: u32) -> Ray {
        self.ray_through(u as f64 + 0.5, v as f64 + 0.5)
    }
}

/// One ray per requested pixel. Pixels outside the image are rejected.
pub fn generate_rays(cam: &Camera, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
    let mut rays = Vec::with_capacity(pixels.len());
    for &(u, v) in pixels {
        if u >= cam.width || v >= cam.height {
            return Err(Error::Geometry(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                cam.width, cam.height
            )));
        }
        rays.push(cam.ray_through_pixel(u, v));
    }
    Ok(rays)
}

/// Restrict the ray to the altitude slab [alt_min, alt_max]: t_near solves
/// altitude(t) = alt_max, t_far solves altitude(t) = alt_min for descending
/// rays. Rays parallel to the ground plane are rejected.
pub fn clip_to_altitude(ray: &Ray, alt_min: f64, alt_max: f64) -> Result<Ray> {
    if ray.dir[2].abs() < MIN_DIR_Z {
        return Err(Error::Geometry(
            "ray parallel to ground plane, cannot clip to altitude bounds".into(),
        ));
    }
    let t_hi = (alt_max - ray.origin[2]) / ray.dir[2];
    let t_lo = (alt_min - ray.origin[2]) / ray.dir[2];
    let (t_near, t_far) = if t_hi < t_lo { (t_hi, t_lo) } else { (t_lo, t_hi) };
    Ok(Ray { t_near, t_far, ..*ray })
}

/// Sample positions along [t_near, t_far] as `t` values plus spacings.
#[derive(Debug, Clone)]
pub struct SampleTs {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Split [t_near, t_far] into `n` equal bins and draw one t per bin: the bin
/// midpoint when `rng` is `None`, uniform within the bin otherwise. Spacings
/// are consecutive differences, with the last set to the bin width.
pub fn stratified_samples(
    t_near: f64,
    t_far: f64,
    n: usize,
    mut rng: Option<&mut CounterRng>,
) -> Result<SampleTs> {
    if n < 2 {
        return Err(Error::Geometry(format!("need at least 2 samples per ray, got {n}")));
    }
    if !(t_near < t_far) {
        return Err(Error::Geometry(format!("degenerate ray interval [{t_near}, {t_far}]")));
    }
    let bin = (t_far - t_near) / n as f64;
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let u = match rng.as_deref_mut() {
            Some(r) => r.next_f64(),
            None => 0.5,
        };
        t.push(t_near + (i as f64 + u) * bin);
    }
    let mut delta = Vec::with_capacity(n);
    for i in 0..n - 1 {
        delta.push(t[i + 1] - t[i]);
    }
    delta.push(bin);
    Ok(SampleTs { t, delta })
}

/// Bin edges used by `stratified_samples`, shared with the fine sampler.
pub fn bin_edges(t_near: f64, t_far: f64, n: usize) -> Vec<f64> {
    let bin = (t_far - t_near) / n as f64;
    (0..=n).map(|i| t_near + i as f64 * bin).collect()
}

/// Draw `n_fine` t values by inverse-transform sampling of the piecewise
/// constant PDF proportional to `weights + WEIGHT_PAD` over the coarse bins.
/// `rng = None` uses midpoint u values (deterministic evaluation mode).
/// Returned values are sorted.
pub fn hierarchical_samples(
    edges: &[f64],
    weights: &[f64],
    n_fine: usize,
    mut rng: Option<&mut CounterRng>,
) -> Vec<f64> {
    debug_assert_eq!(edges.len(), weights.len() + 1);
    let n_bins = weights.len();
    // cdf over padded weights; padding guarantees a strictly increasing cdf
    let mut cdf = Vec::with_capacity(n_bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &w in weights {
        acc += w.max(0.0) + WEIGHT_PAD;
        cdf.push(acc);
    }
    for v in cdf.iter_mut() {
        *v /= acc;
    }

    let mut out = Vec::with_capacity(n_fine);
    for k in 0..n_fine {
        let u = match rng.as_deref_mut() {
            Some(r) => r.next_f64(),
            None => (k as f64 + 0.5) / n_fine as f64,
        };
        // find bin with cdf[i] <= u < cdf[i+1]
        let mut i = match cdf.binary_search_by(|x| x.partial_cmp(&u).unwrap()) {
            Ok(j) => j,
            Err(j) => j.saturating_sub(1),
        };
        if i >= n_bins {
            i = n_bins - 1;
        }
        let span = cdf[i + 1] - cdf[i];
        let frac = if span > 0.0 { (u - cdf[i]) / span } else { 0.5 };
        out.push(edges[i] + frac * (edges[i + 1] - edges[i]));
    }
    out.sort_unstable_by(f64::total_cmp);
    out
}

/// Merge sorted coarse and fine t values into one strictly increasing set
/// with spacings; the final spacing runs to `t_far`, floored at a tiny
/// fraction of the interval so every spacing stays positive.
pub fn merge_samples(coarse: &[f64], fine: &[f64], t_far: f64) -> SampleTs {
    let mut t = Vec::with_capacity(coarse.len() + fine.len());
    let (mut i, mut j) = (0, 0);
    while i < coarse.len() || j < fine.len() {
        let take_coarse = match (coarse.get(i), fine.get(j)) {
            (Some(a), Some(b)) => a <= b,
            (Some(_), None) => true,
            _ => false,
        };
        if take_coarse {
            t.push(coarse[i]);
            i += 1;
        } else {
            t.push(fine[j]);
            j += 1;
        }
    }
    let range = (t_far - t.first().copied().unwrap_or(0.0)).abs().max(f64::MIN_POSITIVE);
    let tiny = range * 1e-12;
    for k in 1..t.len() {
        if t[k] <= t[k - 1] {
            t[k] = t[k - 1] + tiny;
        }
    }
    let n = t.len();
    let mut delta = Vec::with_capacity(n);
    for k in 0..n - 1 {
        delta.push(t[k + 1] - t[k]);
    }
    delta.push((t_far - t[n - 1]).max(tiny));
    SampleTs { t, delta }
}
