//! Analytic scene generator and verification oracle.
//!
//! Procedurally builds box-and-plane scenes, ray-traces reference views with
//! Lambertian shading and hard sun shadows (visibility s ∈ {0, 1}), and emits
//! a complete scene directory: manifest, PNGs and the ground-truth altitude
//! grid. The same geometry doubles as a piecewise-constant density field with
//! closed-form transmittance/radiance for quadrature tests, and the module
//! hosts the finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::geometry::{Camera, Ray};
use crate::real::Real;
use crate::scene::{
    save_dsm, save_manifest, save_raster, DsmGrid, ImageEntry, Raster,
    SceneManifest, Split,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

const EPS_T: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub albedo: [f32; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RingSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Camera altitude in meters.
    pub camera_altitude: f64,
    pub off_nadir_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSceneSpec {
    pub scene_id: String,
    /// Ground square spans [-half_extent, half_extent]² in x and y, meters.
    pub half_extent: f64,
    pub ground_altitude: f64,
    pub ground_albedo: [f32; 3],
    pub boxes: Vec<BoxSpec>,
    pub sky_color: [f32; 3],
    /// (azimuth, elevation) degrees, cycled across views.
    pub sun_angles: Vec<[f64; 2]>,
    pub ring: RingSpec,
    pub image_size: u32,
    pub focal_px: f64,
    pub alt_min: f64,
    pub alt_max: f64,
    /// Normalization half-extent written into the manifest.
    pub scene_scale: f64,
    pub dsm_cells: u32,
    /// Interior density used when the boxes act as a finite-σ medium.
    pub box_sigma: f64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        SynthSceneSpec {
            scene_id: "synthbox".into(),
            half_extent: 50.0,
            ground_altitude: 0.0,
            // bright albedos: the sigmoid color cap then forces rays to
            // become nearly opaque, which keeps surfaces (and depth) crisp.
            // each structure is a wall body plus a roof slab with its own
            // albedo, so roofs cannot be explained by wall-colored fog
            ground_albedo: [0.85, 0.78, 0.70],
            boxes: vec![
                BoxSpec { min: [-32.0, -30.0, 0.0], max: [-8.0, -6.0, 19.0], albedo: [0.88, 0.38, 0.33] },
                BoxSpec { min: [-32.0, -30.0, 19.0], max: [-8.0, -6.0, 20.0], albedo: [0.92, 0.82, 0.38] },
                BoxSpec { min: [8.0, 5.0, 0.0], max: [30.0, 29.0, 9.0], albedo: [0.40, 0.52, 0.88] },
                BoxSpec { min: [8.0, 5.0, 9.0], max: [30.0, 29.0, 10.0], albedo: [0.84, 0.86, 0.88] },
            ],
            sky_color: [0.35, 0.45, 0.75],
            sun_angles: vec![[120.0, 55.0], [210.0, 45.0], [330.0, 60.0]],
            ring: RingSpec { n_train: 9, n_test: 2, camera_altitude: 120.0, off_nadir_deg: 25.0 },
            image_size: 64,
            focal_px: 48.0,
            alt_min: -2.0,
            alt_max: 24.0,
            scene_scale: 60.0,
            dsm_cells: 64,
            box_sigma: std::f64::consts::LN_2,
        }
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ring.off_nadir_deg > 35.0 {
            return Err(Error::Config(format!(
                "off-nadir angle {} exceeds the 35 degree ceiling",
                self.ring.off_nadir_deg
            )));
        }
        if self.ring.n_train == 0 || self.ring.n_test == 0 {
            return Err(Error::Config("ring needs at least one train and one test view".into()));
        }
        if self.sun_angles.is_empty() {
            return Err(Error::Config("need at least one sun position".into()));
        }
        for (i, [_, el]) in self.sun_angles.iter().enumerate() {
            if !(*el > 0.0 && *el <= 90.0) {
                return Err(Error::Config(format!("sun_angles[{i}]: elevation {el} not in (0, 90]")));
            }
        }
        let in_unit = |a: &[f32; 3]| a.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.ground_albedo) || !in_unit(&self.sky_color) {
            return Err(Error::Config("albedo/sky channels must lie in [0, 1]".into()));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !in_unit(&b.albedo) {
                return Err(Error::Config(format!("boxes[{i}]: albedo out of [0, 1]")));
            }
            for a in 0..3 {
                if !(b.min[a] < b.max[a]) {
                    return Err(Error::Config(format!("boxes[{i}]: empty extent on axis {a}")));
                }
            }
            if b.min[0] < -self.half_extent
                || b.min[1] < -self.half_extent
                || b.max[0] > self.half_extent
                || b.max[1] > self.half_extent
            {
                return Err(Error::Config(format!("boxes[{i}]: outside the ground square")));
            }
            for (j, other) in self.boxes.iter().enumerate().skip(i + 1) {
                let disjoint = (0..3).any(|a| b.max[a] <= other.min[a] || other.max[a] <= b.min[a]);
                if !disjoint {
                    return Err(Error::Config(format!("boxes[{i}] and boxes[{j}] overlap")));
                }
            }
        }
        Ok(())
    }

    /// Tallest surface in the scene.
    pub fn top_altitude(&self) -> f64 {
        self.boxes.iter().map(|b| b.max[2]).fold(self.ground_altitude, f64::max)
    }
}

pub fn load_synth_spec(path: &Path) -> Result<SynthSceneSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SynthSceneSpec =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
    spec.validate()?;
    Ok(spec)
}

/// Slab intersection; returns the (enter, exit) interval when it is non-empty.
pub fn ray_box_intersect(o: [f64; 3], d: [f64; 3], bmin: [f64; 3], bmax: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < bmin[a] || o[a] > bmax[a] {
                return None;
            }
        } else {
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((bmin[a] - o[a]) * inv, (bmax[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
    }
    Some((t0, t1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Ground,
    Box(usize),
}

/// Nearest forward intersection with the ground square or a box.
pub fn first_hit(spec: &SynthSceneSpec, o: [f64; 3], d: [f64; 3]) -> Option<(f64, Surface)> {
    let mut best: Option<(f64, Surface)> = None;
    if d[2].abs() > 1e-15 {
        let t = (spec.ground_altitude - o[2]) / d[2];
        if t > EPS_T {
            let x = o[0] + t * d[0];
            let y = o[1] + t * d[1];
            if x.abs() <= spec.half_extent && y.abs() <= spec.half_extent {
                best = Some((t, Surface::Ground));
            }
        }
    }
    for (i, b) in spec.boxes.iter().enumerate() {
        if let Some((t0, t1)) = ray_box_intersect(o, d, b.min, b.max) {
            let t = if t0 > EPS_T { t0 } else { t1 };
            if t > EPS_T && best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, Surface::Box(i)));
            }
        }
    }
    best
}

/// Hard shadow test: 1.0 when the sun is visible from `p`, 0.0 otherwise.
pub fn sun_visibility(spec: &SynthSceneSpec, p: [f64; 3], sun: [f64; 3]) -> f64 {
    let o = [p[0] + 1e-6 * sun[0], p[1] + 1e-6 * sun[1], p[2] + 1e-6 * sun[2]];
    for b in &spec.boxes {
        if let Some((t0, t1)) = ray_box_intersect(o, sun, b.min, b.max) {
            if t1 > EPS_T && t0 < t1 && t1 > 0.0 && t0 > EPS_T {
                return 0.0;
            }
        }
    }
    1.0
}

/// Shadow state of the ground point (x, y) under `sun`.
pub fn ground_shadowed(spec: &SynthSceneSpec, x: f64, y: f64, sun: [f64; 3]) -> bool {
    sun_visibility(spec, [x, y, spec.ground_altitude], sun) == 0.0
}

/// Reference radiance for a camera ray: albedo of the first hit times the
/// irradiance, black where nothing is hit.
pub fn trace_color(spec: &SynthSceneSpec, o: [f64; 3], d: [f64; 3], sun: [f64; 3]) -> [f32; 3] {
    match first_hit(spec, o, d) {
        None => [0.0, 0.0, 0.0],
        Some((t, surface)) => {
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            let albedo = match surface {
                Surface::Ground => spec.ground_albedo,
                Surface::Box(i) => spec.boxes[i].albedo,
            };
            let s = sun_visibility(spec, p, sun) as f32;
            let sky = spec.sky_color;
            [
                albedo[0] * (s + (1.0 - s) * sky[0]),
                albedo[1] * (s + (1.0 - s) * sky[1]),
                albedo[2] * (s + (1.0 - s) * sky[2]),
            ]
        }
    }
}

/// Pinhole projection of a world point: the inverse of `Camera::ray_through`.
/// Returns continuous pixel coordinates, or `None` behind the camera.
pub fn project(cam: &Camera, p: [f64; 3]) -> Option<(f64, f64)> {
    let v = [p[0] - cam.origin[0], p[1] - cam.origin[1], p[2] - cam.origin[2]];
    let r = &cam.rotation;
    // world -> camera with the transpose
    let x = r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2];
    let y = r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2];
    let z = r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2];
    if z >= -1e-12 {
        return None;
    }
    Some((cam.cx + cam.fx * (x / -z), cam.cy - cam.fy * (y / -z)))
}

/// Rigid look-at pose: camera at `eye` with -z toward `target`, +y screen-up.
pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> [[f64; 3]; 3] {
    let mut f = [target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]];
    let n = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
    f = [f[0] / n, f[1] / n, f[2] / n];
    // +y world as the up hint; our cameras always pitch well away from it
    let up = [0.0, 1.0, 0.0];
    let mut right = [
        f[1] * up[2] - f[2] * up[1],
        f[2] * up[0] - f[0] * up[2],
        f[0] * up[1] - f[1] * up[0],
    ];
    let rn = (right[0] * right[0] + right[1] * right[1] + right[2] * right[2]).sqrt();
    right = [right[0] / rn, right[1] / rn, right[2] / rn];
    let zc = [-f[0], -f[1], -f[2]];
    let upc = [
        zc[1] * right[2] - zc[2] * right[1],
        zc[2] * right[0] - zc[0] * right[2],
        zc[0] * right[1] - zc[1] * right[0],
    ];
    // columns are the camera axes
    [
        [right[0], upc[0], zc[0]],
        [right[1], upc[1], zc[1]],
        [right[2], upc[2], zc[2]],
    ]
}

fn ring_entry(spec: &SynthSceneSpec, azimuth_deg: f64, sun: [f64; 2], split: Split, file: String) -> ImageEntry {
    let h = spec.ring.camera_altitude - spec.ground_altitude;
    let radius = h * spec.ring.off_nadir_deg.to_radians().tan();
    let az = azimuth_deg.to_radians();
    let eye = [radius * az.sin(), radius * az.cos(), spec.ring.camera_altitude];
    let rot = look_at(eye, [0.0, 0.0, spec.ground_altitude]);
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = rot[i][j];
        }
        m[i][3] = eye[i];
    }
    m[3] = [0.0, 0.0, 0.0, 1.0];
    let size = spec.image_size;
    ImageEntry {
        file: file.into(),
        width: size,
        height: size,
        fx: spec.focal_px,
        fy: spec.focal_px,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        camera_to_world: m,
        sun_azimuth: sun[0],
        sun_elevation: sun[1],
        split,
        augmented: false,
    }
}

/// All view entries: train cameras equally spaced on the ring, test cameras
/// between them, sun positions cycled across views.
pub fn plan_views(spec: &SynthSceneSpec) -> Vec<ImageEntry> {
    let mut entries = Vec::new();
    let n_train = spec.ring.n_train;
    for i in 0..n_train {
        let az = 360.0 * i as f64 / n_train as f64;
        let sun = spec.sun_angles[i % spec.sun_angles.len()];
        entries.push(ring_entry(spec, az, sun, Split::Train, format!("train_{i:02}.png")));
    }
    for j in 0..spec.ring.n_test {
        // halfway between two train azimuths, spread around the ring
        let step = 360.0 / n_train as f64;
        let az = step * 0.5 + 360.0 * j as f64 / spec.ring.n_test as f64;
        let sun = spec.sun_angles[j % spec.sun_angles.len()];
        entries.push(ring_entry(spec, az, sun, Split::Test, format!("test_{j:02}.png")));
    }
    entries
}

/// Render one view to a float raster (pre-quantization).
pub fn render_reference_view(spec: &SynthSceneSpec, entry: &ImageEntry) -> Raster {
    let cam = entry.camera();
    let sun = entry.sun_direction();
    let mut raster = Raster::new(entry.width, entry.height);
    for v in 0..entry.height {
        for u in 0..entry.width {
            let ray = cam.ray_through_pixel(u, v);
            *raster.at_mut(u, v) = trace_color(spec, ray.origin, ray.dir, sun);
        }
    }
    raster
}

/// Ground-truth surface model: max surface height per cell, sampled at cell
/// centers over the ground square.
pub fn render_dsm(spec: &SynthSceneSpec) -> DsmGrid {
    let n = spec.dsm_cells;
    let cell = 2.0 * spec.half_extent / n as f64;
    let mut grid = DsmGrid::new(n, n, cell, -spec.half_extent, -spec.half_extent, -9999.0);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = grid.cell_center(col, row);
            let mut z = spec.ground_altitude as f32;
            for b in &spec.boxes {
                if x >= b.min[0] && x <= b.max[0] && y >= b.min[1] && y <= b.max[1] {
                    z = z.max(b.max[2] as f32);
                }
            }
            grid.set(col, row, z);
        }
    }
    grid
}

/// Generate the full scene directory: PNG per view, `scene.json`, `dsm.dsm`.
pub fn synth_scene(spec: &SynthSceneSpec, out_dir: &Path) -> Result<SceneManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = plan_views(spec);
    for entry in &entries {
        let raster = render_reference_view(spec, entry);
        save_raster(&raster, &out_dir.join(&entry.file))?;
    }
    let manifest = SceneManifest {
        scene_id: spec.scene_id.clone(),
        images: entries,
        alt_min: spec.alt_min,
        alt_max: spec.alt_max,
        scene_origin: [0.0, 0.0, (spec.alt_min + spec.alt_max) / 2.0],
        scene_scale: spec.scene_scale,
        base_dir: out_dir.to_path_buf(),
    };
    save_manifest(&manifest, &out_dir.join("scene.json"))?;
    save_dsm(&render_dsm(spec), &out_dir.join("dsm.dsm"))?;
    manifest.validate(true)?;
    Ok(manifest)
}

/// Piecewise-constant medium view of the scene: σ = box_sigma inside boxes,
/// 0 elsewhere; emission color is the box albedo.
pub fn field_at(spec: &SynthSceneSpec, p: [f64; 3]) -> (f64, [f64; 3]) {
    for b in &spec.boxes {
        if (0..3).all(|a| p[a] >= b.min[a] && p[a] <= b.max[a]) {
            return (spec.box_sigma, [b.albedo[0] as f64, b.albedo[1] as f64, b.albedo[2] as f64]);
        }
    }
    (0.0, [0.0, 0.0, 0.0])
}

/// Closed-form transmittance from `ray.t_near` to `t` through the
/// piecewise-constant medium.
pub fn analytic_transmittance(spec: &SynthSceneSpec, ray: &Ray, t: f64) -> f64 {
    let mut optical_depth = 0.0;
    for b in &spec.boxes {
        if let Some((b0, b1)) = ray_box_intersect(ray.origin, ray.dir, b.min, b.max) {
            let lo = b0.max(ray.t_near);
            let hi = b1.min(t);
            if hi > lo {
                optical_depth += spec.box_sigma * (hi - lo);
            }
        }
    }
    (-optical_depth).exp()
}

/// Closed-form emitted radiance of the medium along [t_near, t_far]:
/// Σ over box segments of albedo · (T(segment start) - T(segment end)).
pub fn analytic_radiance(spec: &SynthSceneSpec, ray: &Ray) -> [f64; 3] {
    // collect disjoint box segments clipped to the ray interval
    let mut segments: Vec<(f64, f64, [f64; 3])> = Vec::new();
    for b in &spec.boxes {
        if let Some((b0, b1)) = ray_box_intersect(ray.origin, ray.dir, b.min, b.max) {
            let lo = b0.max(ray.t_near);
            let hi = b1.min(ray.t_far);
            if hi > lo {
                segments.push((lo, hi, [b.albedo[0] as f64, b.albedo[1] as f64, b.albedo[2] as f64]));
            }
        }
    }
    segments.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut color = [0.0; 3];
    let mut trans = 1.0;
    for (lo, hi, albedo) in segments {
        let absorbed = 1.0 - (-spec.box_sigma * (hi - lo)).exp();
        for ch in 0..3 {
            color[ch] += trans * absorbed * albedo[ch];
        }
        trans *= 1.0 - absorbed;
    }
    color
}

/// Central-difference gradient of `f` at `params`.
pub fn fd_gradient<F: Real>(
    f: &mut dyn FnMut(&[F]) -> F,
    params: &[F],
    h: f64,
) -> Vec<F> {
    let mut grad = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    let hf = F::from_f64(h);
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + hf;
        let hi = f(&work);
        work[i] = orig - hf;
        let lo = f(&work);
        work[i] = orig;
        grad.push((hi - lo) / (F::from_f64(2.0) * hf));
    }
    grad
}

/// Forward-difference stencil, used to cross-check the central one.
pub fn fd_gradient_forward<F: Real>(
    f: &mut dyn FnMut(&[F]) -> F,
    params: &[F],
    h: f64,
) -> Vec<F> {
    let mut grad = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    let hf = F::from_f64(h);
    let base = f(&work);
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + hf;
        let hi = f(&work);
        work[i] = orig;
        grad.push((hi - base) / hf);
    }
    grad
}
