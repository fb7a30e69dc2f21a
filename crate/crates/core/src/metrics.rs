//! Quantitative evaluation: PSNR and SSIM against held-out views, and
//! altitude MAE against a ground-truth surface grid.

use crate::error::{Error, Result};
use crate::scene::{DsmGrid, Raster};
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize};

/// PSNR in dB over all pixels and channels; +∞ when the images are identical.
pub fn psnr(pred: &Raster, gt: &Raster) -> Result<f64> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Metrics(format!(
            "dimension mismatch: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut se = 0.0f64;
    for (p, g) in pred.data.iter().zip(&gt.data) {
        for ch in 0..3 {
            let e = p[ch] as f64 - g[ch] as f64;
            se += e * e;
        }
    }
    let mse = se / (pred.data.len() as f64 * 3.0);
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn to_gray(img: &Raster) -> Vec<f64> {
    img.data.iter().map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0).collect()
}

/// Mean SSIM over valid 11x11 Gaussian windows (σ = 1.5, K1 = 0.01,
/// K2 = 0.03, dynamic range 1) of the grayscale channel means.
pub fn ssim(pred: &Raster, gt: &Raster) -> Result<f64> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Metrics("dimension mismatch".into()));
    }
    let (w, h) = (pred.width as usize, pred.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Metrics(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let a = to_gray(pred);
    let b = to_gray(gt);
    let k = ssim_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for wy in 0..=(h - SSIM_WINDOW) {
        for wx in 0..=(w - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = k[dy] * k[dx];
                    let va = a[(wy + dy) * w + wx + dx];
                    let vb = b[(wy + dy) * w + wx + dx];
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaeStats {
    pub mae_m: f64,
    pub cells_evaluated: u64,
    pub cells_excluded: u64,
}

/// Mean |ẑ - z_gt| over cells valid in both grids; both grids must share
/// their geometry (same registration). Cells are visited in row-major order.
pub fn altitude_mae(pred: &DsmGrid, gt: &DsmGrid) -> Result<MaeStats> {
    if !pred.aligned_with(gt) {
        return Err(Error::Metrics("depth grid is not registered to the ground-truth grid".into()));
    }
    let mut sum = 0.0f64;
    let mut n = 0u64;
    let mut excluded = 0u64;
    for (p, g) in pred.values.iter().zip(&gt.values) {
        if pred.is_nodata(*p) || gt.is_nodata(*g) {
            excluded += 1;
            continue;
        }
        sum += (*p as f64 - *g as f64).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metrics("no overlapping valid cells".into()));
    }
    Ok(MaeStats { mae_m: sum / n as f64, cells_evaluated: n, cells_excluded: excluded })
}

/// PSNR value that serializes as a JSON number, or the string "+inf" for the
/// infinite (zero-error) sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsnrDb(pub f64);

impl Serialize for PsnrDb {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("+inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for PsnrDb {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(PsnrDb(v)),
            Raw::Str(s) if s == "+inf" => Ok(PsnrDb(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad psnr value {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEval {
    pub file: String,
    pub psnr_db: PsnrDb,
    pub ssim: f64,
    /// Rendered image path, when the evaluation wrote one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rendered: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scene_id: String,
    pub per_image: Vec<ImageEval>,
    pub depth: Option<MaeStats>,
}

impl Serialize for EvalReport {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("EvalReport", 6)?;
        st.serialize_field("scene_id", &self.scene_id)?;
        st.serialize_field("per_image", &self.per_image)?;
        st.serialize_field("depth_mae_m", &self.depth.map(|d| d.mae_m))?;
        st.serialize_field("dsm_cells_evaluated", &self.depth.map_or(0, |d| d.cells_evaluated))?;
        st.serialize_field("dsm_cells_excluded", &self.depth.map_or(0, |d| d.cells_excluded))?;
        let mean = self.per_image.iter().map(|e| e.psnr_db.0).sum::<f64>()
            / self.per_image.len().max(1) as f64;
        st.serialize_field("mean_psnr_db", &PsnrDb(mean))?;
        st.end()
    }
}

impl EvalReport {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Json { path: path.into(), source: e })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
