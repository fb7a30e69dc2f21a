//! Differentiable alpha compositing, the shadow-aware irradiance combination,
//! expected-altitude extraction, and both loss functions with analytic
//! gradients.
//!
//! Everything here is per-ray over plain slices; sample `i` of a ray owns
//! opacity `α_i = 1 - exp(-σ_i δ_i)`, transmittance `T_i = Π_{j<i}(1 - α_j)`
//! and weight `w_i = T_i α_i`. The σ-gradient of any loss expressed through
//! weights and transmittances reduces to
//! `dL/dσ_k = δ_k (g_k T_k (1-α_k) - Σ_{i>k}(g_i w_i + h_i T_i))`
//! where `g` and `h` are the cotangents on `w` and `T`; the suffix form needs
//! no division by `1-α`, so saturated samples stay numerically safe.

use crate::real::{c, Real};

/// Below this accumulated weight a ray is flagged empty and its altitude
/// falls back to the scene's lower bound.
pub const EMPTY_RAY_WEIGHT_FLOOR: f64 = 0.05;
/// Normalizer guard for the expected-altitude division.
pub const ALTITUDE_EPS: f64 = 1e-6;

#[inline]
pub fn alpha_from_sigma<F: Real>(sigma: F, delta: F) -> F {
    F::one() - (-sigma * delta).exp()
}

/// Fill `alpha` from densities and spacings.
pub fn alphas_from_sigma<F: Real>(sigma: &[F], delta: &[F], alpha: &mut [F]) {
    for i in 0..sigma.len() {
        alpha[i] = alpha_from_sigma(sigma[i], delta[i]);
    }
}

/// Per-ray compositing state retained for the backward pass.
#[derive(Debug, Clone)]
pub struct CompositeTrace<F> {
    pub alpha: Vec<F>,
    pub trans: Vec<F>,
    pub weight: Vec<F>,
    /// Composited ray color.
    pub color: [F; 3],
    /// Σ w_i.
    pub acc_weight: F,
    /// Transmittance left after the last sample.
    pub final_trans: F,
}

/// Front-to-back compositing of per-sample colors (rows of 3 in `rgb`).
pub fn composite<F: Real>(alpha: &[F], rgb: &[F]) -> CompositeTrace<F> {
    let n = alpha.len();
    debug_assert_eq!(rgb.len(), 3 * n);
    let mut trans = vec![F::zero(); n];
    let mut weight = vec![F::zero(); n];
    let mut t = F::one();
    let mut color = [F::zero(); 3];
    let mut acc = F::zero();
    for i in 0..n {
        trans[i] = t;
        let w = t * alpha[i];
        weight[i] = w;
        acc = acc + w;
        color[0] = color[0] + w * rgb[3 * i];
        color[1] = color[1] + w * rgb[3 * i + 1];
        color[2] = color[2] + w * rgb[3 * i + 2];
        t = t * (F::one() - alpha[i]);
    }
    CompositeTrace { alpha: alpha.to_vec(), trans, weight, color, acc_weight: acc, final_trans: t }
}

/// Weighted sum of a per-sample scalar with the trace's weights.
pub fn composite_scalar<F: Real>(weight: &[F], vals: &[F]) -> F {
    weight.iter().zip(vals).map(|(&w, &v)| w * v).sum()
}

/// Irradiance: white sunlight blended with diffuse sky by the sun visibility.
#[inline]
pub fn irradiance<F: Real>(s: F, sky: [F; 3]) -> [F; 3] {
    let one = F::one();
    [s + (one - s) * sky[0], s + (one - s) * sky[1], s + (one - s) * sky[2]]
}

/// Weight-averaged sample altitude. Rays with too little accumulated weight
/// are flagged empty and report `alt_min`.
pub fn expected_altitude<F: Real>(weight: &[F], z: &[F], acc_weight: F, alt_min: F) -> (F, bool) {
    if acc_weight.as_f64() < EMPTY_RAY_WEIGHT_FLOOR {
        return (alt_min, true);
    }
    let num: F = weight.iter().zip(z).map(|(&w, &zi)| w * zi).sum();
    let den = if acc_weight > c(ALTITUDE_EPS) { acc_weight } else { c(ALTITUDE_EPS) };
    (num / den, false)
}

/// Squared color error for one ray; writes the cotangent 2(pred - gt).
#[inline]
pub fn color_loss_and_grad<F: Real>(pred: [F; 3], gt: [F; 3], d_pred: &mut [F; 3]) -> F {
    let two = c::<F>(2.0);
    let mut l = F::zero();
    for ch in 0..3 {
        let e = pred[ch] - gt[ch];
        l = l + e * e;
        d_pred[ch] = two * e;
    }
    l
}

/// Σ over rays of ‖pred - gt‖²; cotangents per ray are produced by
/// `color_loss_and_grad`. Losses over both coarse and fine passes simply add.
pub fn nerf_loss<F: Real>(pred: &[[F; 3]], gt: &[[F; 3]]) -> F {
    debug_assert_eq!(pred.len(), gt.len());
    let mut scratch = [F::zero(); 3];
    pred.iter().zip(gt).map(|(p, g)| color_loss_and_grad(*p, *g, &mut scratch)).sum()
}

/// Solar-correction terms along one solar ray: Σ_i (T_i - s_i)² and
/// 1 - Σ_i w_i s_i.
pub fn solar_terms<F: Real>(trace: &CompositeTrace<F>, sun_vis: &[F]) -> (F, F) {
    let mut transparency = F::zero();
    let mut absorbed = F::zero();
    for i in 0..sun_vis.len() {
        let d = trace.trans[i] - sun_vis[i];
        transparency = transparency + d * d;
        absorbed = absorbed + trace.weight[i] * sun_vis[i];
    }
    (transparency, F::one() - absorbed)
}

/// Loss components; `total = color + λ_s (transparency + absorption)`.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<F> {
    pub color: F,
    pub solar_transparency: F,
    pub solar_absorption: F,
    pub lambda_s: F,
    pub total: F,
}

impl<F: Real> LossBreakdown<F> {
    pub fn new(color: F, solar_transparency: F, solar_absorption: F, lambda_s: F) -> Self {
        let total = color + lambda_s * (solar_transparency + solar_absorption);
        LossBreakdown { color, solar_transparency, solar_absorption, lambda_s, total }
    }

    pub fn color_only(color: F) -> Self {
        // keep `total` bitwise equal to the color term when there is no
        // solar path at all
        LossBreakdown {
            color,
            solar_transparency: F::zero(),
            solar_absorption: F::zero(),
            lambda_s: F::zero(),
            total: color,
        }
    }
}

/// Shadow-aware loss over already-composited predictions. `solar` carries the
/// per-ray traces and sun visibilities along the solar rays; the two solar
/// terms are normalized by the solar ray count. With `lambda_s == 0` the
/// total reduces bitwise to the plain color loss.
pub fn snerf_loss<F: Real>(
    pred: &[[F; 3]],
    gt: &[[F; 3]],
    solar: &[(&CompositeTrace<F>, &[F])],
    lambda_s: F,
) -> LossBreakdown<F> {
    let color = nerf_loss(pred, gt);
    if lambda_s == F::zero() {
        return LossBreakdown::color_only(color);
    }
    let mut transparency = F::zero();
    let mut absorption = F::zero();
    for (trace, s) in solar {
        let (p, q) = solar_terms(trace, s);
        transparency = transparency + p;
        absorption = absorption + q;
    }
    let norm = c::<F>(1.0 / solar.len().max(1) as f64);
    LossBreakdown::new(color, transparency * norm, absorption * norm, lambda_s)
}

/// σ-gradient through weights and transmittances via the suffix form.
/// `g_w[i]` is dL/dw_i, `g_t[i]` (optional) is the direct dL/dT_i.
/// Accumulates into `d_sigma`.
pub fn backward_sigma<F: Real>(
    trace: &CompositeTrace<F>,
    delta: &[F],
    g_w: &[F],
    g_t: Option<&[F]>,
    d_sigma: &mut [F],
) {
    let n = delta.len();
    let mut suffix = F::zero();
    for k in (0..n).rev() {
        let term = g_w[k] * trace.trans[k] * (F::one() - trace.alpha[k]) - suffix;
        d_sigma[k] = d_sigma[k] + delta[k] * term;
        suffix = suffix + g_w[k] * trace.weight[k];
        if let Some(gt) = g_t {
            suffix = suffix + gt[k] * trace.trans[k];
        }
    }
}

/// Backward of color compositing for one ray: given dL/d(ray color), produce
/// dL/dw_i (into `g_w`) and dL/d(rgb_i) (accumulated into `d_rgb`).
pub fn backward_composite_color<F: Real>(
    trace: &CompositeTrace<F>,
    rgb: &[F],
    d_color: [F; 3],
    g_w: &mut [F],
    d_rgb: &mut [F],
) {
    let n = trace.alpha.len();
    for i in 0..n {
        let w = trace.weight[i];
        g_w[i] = g_w[i]
            + d_color[0] * rgb[3 * i]
            + d_color[1] * rgb[3 * i + 1]
            + d_color[2] * rgb[3 * i + 2];
        d_rgb[3 * i] = d_rgb[3 * i] + w * d_color[0];
        d_rgb[3 * i + 1] = d_rgb[3 * i + 1] + w * d_color[1];
        d_rgb[3 * i + 2] = d_rgb[3 * i + 2] + w * d_color[2];
    }
}

/// Cotangents of the two solar terms for one solar ray, scaled by `scale`
/// (λ_s / solar batch size): accumulates dL/ds into `d_s` and the w/T
/// cotangents into `g_w`/`g_t` for `backward_sigma`.
pub fn backward_solar<F: Real>(
    trace: &CompositeTrace<F>,
    sun_vis: &[F],
    scale: F,
    d_s: &mut [F],
    g_w: &mut [F],
    g_t: &mut [F],
) {
    let two = c::<F>(2.0);
    for i in 0..sun_vis.len() {
        let diff = trace.trans[i] - sun_vis[i];
        // transparency term
        d_s[i] = d_s[i] - scale * two * diff;
        g_t[i] = g_t[i] + scale * two * diff;
        // absorption term 1 - Σ w s
        d_s[i] = d_s[i] - scale * trace.weight[i];
        g_w[i] = g_w[i] - scale * sun_vis[i];
    }
}
