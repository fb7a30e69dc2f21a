//! Scene manifest, image rasters and surface-model grids.
//!
//! A scene lives in a directory holding `scene.json`, the referenced PNGs and
//! (optionally) a ground-truth `.dsm` grid. All geometry is in meters in a
//! local frame; `scene_origin`/`scene_scale` define the normalization box
//! mapping scene positions into [-1, 1] for the field's positional encoding.

use crate::error::{Error, Result};
use crate::geometry::Camera;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const ROTATION_ORTHO_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    /// Image path, relative to the manifest directory.
    pub file: PathBuf,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rigid camera-to-world transform, row-major. Camera looks down -z,
    /// +x right, +y up.
    pub camera_to_world: [[f64; 4]; 4],
    /// Sun azimuth in degrees, clockwise from +y (north).
    pub sun_azimuth: f64,
    /// Sun elevation above the horizon in degrees, in (0, 90].
    pub sun_elevation: f64,
    pub split: Split,
    /// Set on views produced by the zoom-and-crop augmenter.
    #[serde(default)]
    pub augmented: bool,
}

impl ImageEntry {
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.camera_to_world;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn camera_origin(&self) -> [f64; 3] {
        let m = &self.camera_to_world;
        [m[0][3], m[1][3], m[2][3]]
    }

    pub fn camera(&self) -> Camera {
        Camera {
            rotation: self.rotation(),
            origin: self.camera_origin(),
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }

    /// Unit vector pointing from the scene toward the sun.
    pub fn sun_direction(&self) -> [f64; 3] {
        sun_direction(self.sun_azimuth, self.sun_elevation)
    }
}

/// Azimuth/elevation in degrees to a unit vector pointing toward the sun.
/// Azimuth is measured clockwise from +y (north).
pub fn sun_direction(azimuth_deg: f64, elevation_deg: f64) -> [f64; 3] {
    let az = azimuth_deg.to_radians();
    let el = elevation_deg.to_radians();
    [az.sin() * el.cos(), az.cos() * el.cos(), el.sin()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    pub images: Vec<ImageEntry>,
    /// Lower altitude bound for ray sampling, meters.
    pub alt_min: f64,
    /// Upper altitude bound for ray sampling, meters.
    pub alt_max: f64,
    /// Center of the normalization box, meters.
    pub scene_origin: [f64; 3],
    /// Half-extent of the normalization box: meters per normalized scene unit.
    pub scene_scale: f64,
    /// Directory the manifest was loaded from; image paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SceneManifest {
    pub fn image_path(&self, entry: &ImageEntry) -> PathBuf {
        self.base_dir.join(&entry.file)
    }

    pub fn train_entries(&self) -> impl Iterator<Item = &ImageEntry> {
        self.images.iter().filter(|e| e.split == Split::Train)
    }

    pub fn test_entries(&self) -> impl Iterator<Item = &ImageEntry> {
        self.images.iter().filter(|e| e.split == Split::Test)
    }

    /// Structural invariants; `probe_files` additionally checks that every
    /// image exists and decodes to its declared dimensions.
    pub fn validate(&self, probe_files: bool) -> Result<()> {
        if self.alt_min >= self.alt_max {
            return Err(Error::manifest(
                "alt_min",
                format!("altitude bounds inverted: alt_min={} >= alt_max={}", self.alt_min, self.alt_max),
            ));
        }
        if !(self.scene_scale > 0.0) {
            return Err(Error::manifest("scene_scale", "must be positive"));
        }
        if self.train_entries().count() == 0 {
            return Err(Error::manifest("images", "need at least one train image"));
        }
        if self.test_entries().count() == 0 {
            return Err(Error::manifest("images", "need at least one test image"));
        }
        for (i, e) in self.images.iter().enumerate() {
            let field = |name: &str| format!("images[{i}].{name}");
            if !(e.fx > 0.0 && e.fy > 0.0) {
                return Err(Error::manifest(field("fx"), "focal lengths must be positive"));
            }
            if !(e.sun_elevation > 0.0 && e.sun_elevation <= 90.0) {
                return Err(Error::manifest(
                    field("sun_elevation"),
                    format!("must be in (0, 90], got {}", e.sun_elevation),
                ));
            }
            let r = e.rotation();
            // max |RᵀR - I|
            let mut dev: f64 = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][a] * r[k][b]).sum();
                    let id = if a == b { 1.0 } else { 0.0 };
                    dev = dev.max((dot - id).abs());
                }
            }
            if dev > ROTATION_ORTHO_TOL {
                return Err(Error::manifest(
                    field("camera_to_world"),
                    format!("rotation block not orthonormal (deviation {dev:.2e})"),
                ));
            }
            let bottom = e.camera_to_world[3];
            if bottom != [0.0, 0.0, 0.0, 1.0] {
                return Err(Error::manifest(
                    field("camera_to_world"),
                    "last row must be [0, 0, 0, 1]",
                ));
            }
            if probe_files {
                let path = self.image_path(e);
                let (w, h) = image::image_dimensions(&path).map_err(|err| Error::Image {
                    path: path.clone(),
                    message: format!("cannot probe dimensions: {err}"),
                })?;
                if (w, h) != (e.width, e.height) {
                    return Err(Error::manifest(
                        field("file"),
                        format!("image is {w}x{h}, manifest declares {}x{}", e.width, e.height),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: SceneManifest =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
    manifest.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    manifest.validate(true)?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &SceneManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Json { path: path.into(), source: e })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// RGB raster with channels in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f32; 3]>,
}

impl Raster {
    pub fn new(width: u32, height: u32) -> Self {
        Raster { width, height, data: vec![[0.0; 3]; (width * height) as usize] }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> [f32; 3] {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn at_mut(&mut self, x: u32, y: u32) -> &mut [f32; 3] {
        &mut self.data[(y * self.width + x) as usize]
    }
}

/// Decode an 8- or 16-bit RGB PNG and normalize by the bit-depth maximum.
pub fn load_raster(path: &Path) -> Result<Raster> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
    let (width, height) = (img.width(), img.height());
    let data = match img {
        image::DynamicImage::ImageRgb8(buf) => {
            buf.pixels().map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]).collect()
        }
        image::DynamicImage::ImageRgb16(buf) => buf
            .pixels()
            .map(|p| {
                [p[0] as f32 / 65535.0, p[1] as f32 / 65535.0, p[2] as f32 / 65535.0]
            })
            .collect(),
        other => {
            return Err(Error::Image {
                path: path.into(),
                message: format!("unsupported pixel format {:?}, need 8- or 16-bit RGB", other.color()),
            })
        }
    };
    Ok(Raster { width, height, data })
}

/// Load the raster for a manifest entry, checking dimensions.
pub fn load_image(manifest: &SceneManifest, entry: &ImageEntry) -> Result<Raster> {
    let path = manifest.image_path(entry);
    let raster = load_raster(&path)?;
    if (raster.width, raster.height) != (entry.width, entry.height) {
        return Err(Error::Image {
            path,
            message: format!(
                "decoded {}x{} but manifest declares {}x{}",
                raster.width, raster.height, entry.width, entry.height
            ),
        });
    }
    Ok(raster)
}

/// Write as 8-bit RGB PNG, rounding to the nearest code value.
pub fn save_raster(raster: &Raster, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(raster.width, raster.height);
    for (i, px) in raster.data.iter().enumerate() {
        let x = i as u32 % raster.width;
        let y = i as u32 / raster.width;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        buf.put_pixel(x, y, image::Rgb([q(px[0]), q(px[1]), q(px[2])]));
    }
    buf.save(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}

/// Regular altitude grid in meters. Row-major; row 0 is the southernmost
/// (lowest y). Cell (col, row) has its center at
/// `(x0 + (col+0.5)·cell_size, y0 + (row+0.5)·cell_size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmGrid {
    pub ncols: u32,
    pub nrows: u32,
    pub cell_size: f64,
    pub x0: f64,
    pub y0: f64,
    pub nodata: f32,
    pub values: Vec<f32>,
}

impl DsmGrid {
    pub fn new(ncols: u32, nrows: u32, cell_size: f64, x0: f64, y0: f64, nodata: f32) -> Self {
        DsmGrid {
            ncols,
            nrows,
            cell_size,
            x0,
            y0,
            nodata,
            values: vec![nodata; (ncols * nrows) as usize],
        }
    }

    #[inline]
    pub fn at(&self, col: u32, row: u32) -> f32 {
        self.values[(row * self.ncols + col) as usize]
    }

    #[inline]
    pub fn set(&mut self, col: u32, row: u32, v: f32) {
        self.values[(row * self.ncols + col) as usize] = v;
    }

    /// Bit-pattern comparison so a NaN nodata marker also works.
    #[inline]
    pub fn is_nodata(&self, v: f32) -> bool {
        v.to_bits() == self.nodata.to_bits()
    }

    pub fn cell_center(&self, col: u32, row: u32) -> (f64, f64) {
        (
            self.x0 + (col as f64 + 0.5) * self.cell_size,
            self.y0 + (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Same geometry (dims, cell size, corner) as `other`.
    pub fn aligned_with(&self, other: &DsmGrid) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && (self.cell_size - other.cell_size).abs() < 1e-9
            && (self.x0 - other.x0).abs() < 1e-6
            && (self.y0 - other.y0).abs() < 1e-6
    }
}

const DSM_MAGIC: &[u8; 4] = b"DSM1";
const DSM_VERSION: u32 = 1;
const DSM_HEADER_LEN: usize = 48;

/// 48-byte header (magic, version, ncols, nrows, cell_size, x0, y0, nodata,
/// reserved — all little-endian) followed by row-major f32 values.
pub fn save_dsm(grid: &DsmGrid, path: &Path) -> Result<()> {
    if grid.values.len() != (grid.ncols * grid.nrows) as usize {
        return Err(Error::Dsm {
            path: path.into(),
            message: format!(
                "value count {} does not match {}x{}",
                grid.values.len(),
                grid.ncols,
                grid.nrows
            ),
        });
    }
    let mut bytes = Vec::with_capacity(DSM_HEADER_LEN + grid.values.len() * 4);
    bytes.extend_from_slice(DSM_MAGIC);
    bytes.extend_from_slice(&DSM_VERSION.to_le_bytes());
    bytes.extend_from_slice(&grid.ncols.to_le_bytes());
    bytes.extend_from_slice(&grid.nrows.to_le_bytes());
    bytes.extend_from_slice(&grid.cell_size.to_le_bytes());
    bytes.extend_from_slice(&grid.x0.to_le_bytes());
    bytes.extend_from_slice(&grid.y0.to_le_bytes());
    bytes.extend_from_slice(&grid.nodata.to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes()); // reserved
    debug_assert_eq!(bytes.len(), DSM_HEADER_LEN);
    for v in &grid.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn load_dsm(path: &Path) -> Result<DsmGrid> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let err = |message: String| Error::Dsm { path: path.into(), message };
    if bytes.len() < DSM_HEADER_LEN {
        return Err(err(format!("file too short for header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != DSM_MAGIC {
        return Err(err("bad magic, not a DSM file".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != DSM_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let ncols = u32_at(8);
    let nrows = u32_at(12);
    let cell_size = f64_at(16);
    let x0 = f64_at(24);
    let y0 = f64_at(32);
    let nodata = f32::from_le_bytes(bytes[40..44].try_into().unwrap());
    let expected = (ncols as usize) * (nrows as usize) * 4;
    let payload = &bytes[DSM_HEADER_LEN..];
    if payload.len() != expected {
        return Err(err(format!(
            "payload is {} bytes, {}x{} grid needs {expected}",
            payload.len(),
            ncols,
            nrows
        )));
    }
    let values =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(DsmGrid { ncols, nrows, cell_size, x0, y0, nodata, values })
}

/// Write to a sibling temp file, then atomically rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
