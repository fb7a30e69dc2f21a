//! The radiance-field function: fixed-architecture fully-connected networks
//! with hand-derived forward and backward passes.
//!
//! Two variants share a trunk of ReLU layers over the encoded position (with
//! the encoding re-injected at a skip layer):
//!
//! * plain: density head (softplus) and a view-conditioned RGB head (sigmoid);
//! * shadow-aware: the RGB head predicts albedo from position only, a sun
//!   head maps trunk features + encoded sun direction (+ optionally the view
//!   direction) to a scalar sun visibility, and a sky head maps the sun
//!   direction alone to an RGB sky color.
//!
//! Samples are processed as row batches so every layer is one GEMM; gradients
//! accumulate into a flat buffer with the same canonical layout as the
//! parameter vector (layer order, weights row-major then bias).

use crate::encoding::{encoded_dim, EncodingConfig};
use crate::error::{Error, Result};
use crate::real::{c, Real};
use crate::rng::{stream, CounterRng};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Nerf,
    Snerf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kind: ModelKind,
    pub trunk_depth: usize,
    pub trunk_width: usize,
    /// Trunk layer whose input re-concatenates the encoded position.
    pub skip_layer: Option<usize>,
    /// Hidden width of the color/albedo head.
    pub head_width: usize,
    pub use_viewdirs: bool,
    /// Shadow-aware only: feed the encoded view direction to the sun head.
    pub sun_head_uses_viewdirs: bool,
    /// Total linear layers in the sun head (the last outputs the scalar).
    pub sun_depth: usize,
    pub sun_width: usize,
    pub sky_width: usize,
    pub enc: EncodingConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            kind: ModelKind::Nerf,
            trunk_depth: 8,
            trunk_width: 256,
            skip_layer: Some(4),
            head_width: 128,
            use_viewdirs: true,
            sun_head_uses_viewdirs: true,
            sun_depth: 3,
            sun_width: 50,
            sky_width: 50,
            enc: EncodingConfig::default(),
        }
    }
}

impl ArchConfig {
    pub fn x_dim(&self) -> usize {
        encoded_dim(3, self.enc.l_pos, self.enc.include_identity)
    }

    /// Encoded view-direction width, 0 when view directions are unused.
    pub fn dir_dim(&self) -> usize {
        if self.use_viewdirs {
            encoded_dim(3, self.enc.l_dir, self.enc.include_identity)
        } else {
            0
        }
    }

    pub fn sun_dim(&self) -> usize {
        match self.kind {
            ModelKind::Nerf => 0,
            ModelKind::Snerf => encoded_dim(3, self.enc.l_dir, self.enc.include_identity),
        }
    }

    fn sun_in_dim(&self) -> usize {
        let dirs = if self.sun_head_uses_viewdirs { self.dir_dim() } else { 0 };
        self.trunk_width + self.sun_dim() + dirs
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk_depth < 1 {
            return Err(Error::Config("trunk_depth must be >= 1".into()));
        }
        for (name, v) in [
            ("trunk_width", self.trunk_width),
            ("head_width", self.head_width),
            ("sun_width", self.sun_width),
            ("sky_width", self.sky_width),
            ("sun_depth", self.sun_depth),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if let Some(skip) = self.skip_layer {
            if skip == 0 || skip >= self.trunk_depth {
                return Err(Error::Config(format!(
                    "skip_layer {skip} must lie in 1..trunk_depth ({})",
                    self.trunk_depth
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
    Linear,
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
    pub w_offset: usize,
    pub b_offset: usize,
}

/// Canonical parameter layout for one network: trunk layers, density head,
/// color/albedo head (hidden, out), then for the shadow-aware variant the sun
/// head layers and the sky head (hidden, out). Within a layer: weights
/// (out x in, row-major), then bias.
#[derive(Debug, Clone)]
pub struct FieldLayout {
    pub specs: Vec<LayerSpec>,
    pub total_len: usize,
    trunk_depth: usize,
    sun_depth: usize,
    is_snerf: bool,
}

impl FieldLayout {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut dims: Vec<(usize, usize, Activation)> = Vec::new();
        let w = arch.trunk_width;
        for i in 0..arch.trunk_depth {
            let in_dim = if i == 0 {
                arch.x_dim()
            } else if arch.skip_layer == Some(i) {
                w + arch.x_dim()
            } else {
                w
            };
            dims.push((in_dim, w, Activation::Relu));
        }
        dims.push((w, 1, Activation::Softplus)); // density
        let head_in = match arch.kind {
            ModelKind::Nerf => w + arch.dir_dim(),
            ModelKind::Snerf => w, // albedo depends on position only
        };
        dims.push((head_in, arch.head_width, Activation::Relu));
        dims.push((arch.head_width, 3, Activation::Sigmoid));
        if arch.kind == ModelKind::Snerf {
            let d = arch.sun_depth;
            for i in 0..d {
                let in_dim = if i == 0 { arch.sun_in_dim() } else { arch.sun_width };
                let out_dim = if i == d - 1 { 1 } else { arch.sun_width };
                let act = if i == d - 1 { Activation::Sigmoid } else { Activation::Relu };
                dims.push((in_dim, out_dim, act));
            }
            dims.push((arch.sun_dim(), arch.sky_width, Activation::Linear));
            dims.push((arch.sky_width, 3, Activation::Sigmoid));
        }

        let mut specs = Vec::with_capacity(dims.len());
        let mut offset = 0;
        for (in_dim, out_dim, act) in dims {
            let w_offset = offset;
            let b_offset = offset + in_dim * out_dim;
            offset = b_offset + out_dim;
            specs.push(LayerSpec { in_dim, out_dim, act, w_offset, b_offset });
        }
        FieldLayout {
            specs,
            total_len: offset,
            trunk_depth: arch.trunk_depth,
            sun_depth: arch.sun_depth,
            is_snerf: arch.kind == ModelKind::Snerf,
        }
    }

    pub fn trunk(&self, i: usize) -> usize {
        debug_assert!(i < self.trunk_depth);
        i
    }
    pub fn sigma(&self) -> usize {
        self.trunk_depth
    }
    pub fn head_hidden(&self) -> usize {
        self.trunk_depth + 1
    }
    pub fn head_out(&self) -> usize {
        self.trunk_depth + 2
    }
    pub fn sun(&self, i: usize) -> usize {
        debug_assert!(self.is_snerf && i < self.sun_depth);
        self.trunk_depth + 3 + i
    }
    pub fn sky_hidden(&self) -> usize {
        debug_assert!(self.is_snerf);
        self.trunk_depth + 3 + self.sun_depth
    }
    pub fn sky_out(&self) -> usize {
        self.sky_hidden() + 1
    }
}

/// Immutable view of one network's parameters inside a flat buffer.
#[derive(Clone, Copy)]
pub struct FieldView<'a, F> {
    pub arch: &'a ArchConfig,
    pub layout: &'a FieldLayout,
    pub data: &'a [F],
}

impl<'a, F: Real> FieldView<'a, F> {
    pub fn w(&self, layer: usize) -> ArrayView2<'a, F> {
        let sp = &self.layout.specs[layer];
        ArrayView2::from_shape(
            (sp.out_dim, sp.in_dim),
            &self.data[sp.w_offset..sp.w_offset + sp.out_dim * sp.in_dim],
        )
        .unwrap()
    }

    pub fn b(&self, layer: usize) -> ArrayView1<'a, F> {
        let sp = &self.layout.specs[layer];
        ArrayView1::from_shape(sp.out_dim, &self.data[sp.b_offset..sp.b_offset + sp.out_dim])
            .unwrap()
    }
}

/// Sky-head output bias that saturates the sigmoid to exactly 1.0 in both
/// f32 and f64 (1 + e^-104 rounds to 1 in either precision).
pub const SKY_SATURATION_BIAS: f64 = 104.0;

/// Build a shadow-aware model that computes exactly the same radiance as the
/// given plain model: trunk, density and color/albedo heads are copied (the
/// plain model must not use view directions, so the head input shapes match),
/// the sun head is zeroed (s ≡ 0.5 exactly) and the sky head is zeroed with a
/// saturating output bias (sky ≡ 1), making the irradiance exactly 1 and the
/// albedo path bitwise equal to the color path. Useful for warm-starting the
/// shadow-aware variant and for reduction/ablation tests.
pub fn snerf_equivalent_to_nerf<F: Real>(nerf: &Model<F>) -> Result<Model<F>> {
    if nerf.arch.kind != ModelKind::Nerf {
        return Err(Error::Config("source model must be the plain variant".into()));
    }
    if nerf.arch.use_viewdirs {
        return Err(Error::Config(
            "equivalence requires use_viewdirs = false so head input shapes match".into(),
        ));
    }
    let arch = ArchConfig { kind: ModelKind::Snerf, ..nerf.arch.clone() };
    let layout = FieldLayout::new(&arch);
    let nets = if nerf.has_fine { 2 } else { 1 };
    let mut params = vec![F::zero(); layout.total_len * nets];
    let shared_layers = nerf.arch.trunk_depth + 3; // trunk + sigma + head
    for net in 0..nets {
        let src = &nerf.params[net * nerf.layout.total_len..(net + 1) * nerf.layout.total_len];
        let dst = &mut params[net * layout.total_len..(net + 1) * layout.total_len];
        for li in 0..shared_layers {
            let ssp = &nerf.layout.specs[li];
            let dsp = &layout.specs[li];
            assert_eq!((ssp.in_dim, ssp.out_dim), (dsp.in_dim, dsp.out_dim));
            dst[dsp.w_offset..dsp.w_offset + dsp.in_dim * dsp.out_dim]
                .copy_from_slice(&src[ssp.w_offset..ssp.w_offset + ssp.in_dim * ssp.out_dim]);
            dst[dsp.b_offset..dsp.b_offset + dsp.out_dim]
                .copy_from_slice(&src[ssp.b_offset..ssp.b_offset + ssp.out_dim]);
        }
        // sun head stays zero: s = sigmoid(0) = 0.5 exactly
        // sky head: zero weights, saturating bias -> sky = 1.0 exactly
        let sky_out = &layout.specs[layout.sky_out()];
        for i in 0..sky_out.out_dim {
            dst[sky_out.b_offset + i] = c(SKY_SATURATION_BIAS);
        }
    }
    Ok(Model { arch, layout, has_fine: nerf.has_fine, params })
}

/// Glorot-uniform weights, zero biases. Deterministic in (seed, net_id).
pub fn init_net_params<F: Real>(arch: &ArchConfig, seed: u64, net_id: u64) -> Vec<F> {
    let layout = FieldLayout::new(arch);
    let mut data = vec![F::zero(); layout.total_len];
    for (li, sp) in layout.specs.iter().enumerate() {
        let mut rng = CounterRng::new(seed, stream::INIT, (net_id << 32) | li as u64);
        let bound = (6.0 / (sp.in_dim + sp.out_dim) as f64).sqrt();
        for w in data[sp.w_offset..sp.w_offset + sp.in_dim * sp.out_dim].iter_mut() {
            *w = c(rng.uniform(-bound, bound));
        }
        // biases stay exactly zero
    }
    data
}

/// Full model: coarse network plus an optional fine network with identical
/// architecture, stored as one flat parameter vector [coarse | fine].
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub arch: ArchConfig,
    pub layout: FieldLayout,
    pub has_fine: bool,
    pub params: Vec<F>,
}

impl<F: Real> Model<F> {
    pub fn init(arch: ArchConfig, has_fine: bool, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = FieldLayout::new(&arch);
        let mut params = init_net_params::<F>(&arch, seed, 0);
        if has_fine {
            params.extend(init_net_params::<F>(&arch, seed, 1));
        }
        Ok(Model { arch, layout, has_fine, params })
    }

    pub fn net_len(&self) -> usize {
        self.layout.total_len
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn coarse(&self) -> FieldView<'_, F> {
        FieldView { arch: &self.arch, layout: &self.layout, data: &self.params[..self.net_len()] }
    }

    pub fn fine(&self) -> Option<FieldView<'_, F>> {
        self.has_fine.then(|| FieldView {
            arch: &self.arch,
            layout: &self.layout,
            data: &self.params[self.net_len()..],
        })
    }

    /// Gradient-buffer range for the coarse (0) or fine (1) network.
    pub fn grad_range(&self, net: usize) -> std::ops::Range<usize> {
        let n = self.net_len();
        match net {
            0 => 0..n,
            1 => n..2 * n,
            _ => panic!("net index {net} out of range"),
        }
    }
}

#[inline]
fn softplus<F: Real>(x: F) -> F {
    let m = if x > F::zero() { x } else { F::zero() };
    m + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

fn apply_activation<F: Real>(act: Activation, y: &mut Array2<F>) {
    match act {
        Activation::Relu => y.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() }),
        Activation::Sigmoid => y.mapv_inplace(sigmoid),
        Activation::Softplus => y.mapv_inplace(softplus),
        Activation::Linear => {}
    }
}

/// `d` arrives as d(post-activation) and leaves as d(pre-activation).
fn activation_backward<F: Real>(act: Activation, post: &Array2<F>, d: &mut Array2<F>) {
    match act {
        Activation::Relu => Zip::from(d).and(post).for_each(|g, &y| {
            if y <= F::zero() {
                *g = F::zero();
            }
        }),
        Activation::Sigmoid => Zip::from(d).and(post).for_each(|g, &y| {
            *g = *g * y * (F::one() - y);
        }),
        // d softplus/d pre = sigmoid(pre) = 1 - exp(-post)
        Activation::Softplus => Zip::from(d).and(post).for_each(|g, &y| {
            *g = *g * (-((-y).exp_m1()));
        }),
        Activation::Linear => {}
    }
}

/// One dense layer over concatenated input parts (the parts are never
/// materialized as one matrix; the weight matrix is sliced instead).
fn dense_forward<F: Real>(
    view: &FieldView<F>,
    layer: usize,
    parts: &[ArrayView2<F>],
) -> Array2<F> {
    let sp = &view.layout.specs[layer];
    let rows = parts[0].nrows();
    let w = view.w(layer);
    let mut y = Array2::zeros((rows, sp.out_dim));
    let mut col = 0;
    for p in parts {
        debug_assert_eq!(p.nrows(), rows);
        let k = p.ncols();
        let wp = w.slice(s![.., col..col + k]);
        general_mat_mul(F::one(), p, &wp.t(), F::one(), &mut y);
        col += k;
    }
    assert_eq!(col, sp.in_dim, "layer {layer}: input dim mismatch");
    y += &view.b(layer);
    apply_activation(sp.act, &mut y);
    y
}

/// Backward through one dense layer. `d_pre` must already be the gradient at
/// the pre-activation. Weight/bias gradients accumulate into `grads`;
/// `d_parts[i]`, when present, receives `+= d_pre · W_part`.
fn dense_backward<F: Real>(
    view: &FieldView<F>,
    layer: usize,
    parts: &[ArrayView2<F>],
    d_pre: &Array2<F>,
    grads: &mut [F],
    d_parts: &mut [Option<&mut Array2<F>>],
) {
    let sp = &view.layout.specs[layer];
    let w = view.w(layer);
    let mut gw = ArrayViewMut2::from_shape(
        (sp.out_dim, sp.in_dim),
        &mut grads[sp.w_offset..sp.w_offset + sp.out_dim * sp.in_dim],
    )
    .unwrap();
    let mut col = 0;
    for (i, p) in parts.iter().enumerate() {
        let k = p.ncols();
        {
            let mut gw_part = gw.slice_mut(s![.., col..col + k]);
            general_mat_mul(F::one(), &d_pre.t(), p, F::one(), &mut gw_part);
        }
        if let Some(dp) = d_parts[i].as_deref_mut() {
            let wp = w.slice(s![.., col..col + k]);
            general_mat_mul(F::one(), d_pre, &wp, F::one(), dp);
        }
        col += k;
    }
    let gb = &mut grads[sp.b_offset..sp.b_offset + sp.out_dim];
    for (j, s) in d_pre.sum_axis(Axis(0)).iter().enumerate() {
        gb[j] = gb[j] + *s;
    }
}

/// Cached activations of one batched forward pass through the per-sample
/// network (everything except the per-ray sky head).
pub struct FieldForward<F> {
    pub x_enc: Array2<F>,
    pub dir_enc: Option<Array2<F>>,
    pub sun_enc: Option<Array2<F>>,
    trunk: Vec<Array2<F>>,
    /// Post-softplus density, shape [S, 1].
    pub sigma: Array2<F>,
    head_hidden: Array2<F>,
    /// Color (plain) or albedo (shadow-aware), shape [S, 3], post-sigmoid.
    pub rgb: Array2<F>,
    sun_layers: Vec<Array2<F>>,
}

impl<F: Real> FieldForward<F> {
    pub fn n_samples(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma_slice(&self) -> &[F] {
        self.sigma.as_slice().unwrap()
    }

    pub fn rgb_slice(&self) -> &[F] {
        self.rgb.as_slice().unwrap()
    }

    /// Sun visibility per sample, shadow-aware networks only.
    pub fn sun_vis(&self) -> Option<&Array2<F>> {
        self.sun_layers.last()
    }

    pub fn sun_vis_slice(&self) -> Option<&[F]> {
        self.sun_layers.last().map(|a| a.as_slice().unwrap())
    }
}

/// Batched forward pass. Inputs are encoded rows per sample; per-ray inputs
/// (view/sun direction) must be pre-tiled to sample rows.
pub fn forward<F: Real>(
    view: &FieldView<F>,
    x_enc: Array2<F>,
    dir_enc: Option<Array2<F>>,
    sun_enc: Option<Array2<F>>,
) -> FieldForward<F> {
    forward_with_noise(view, x_enc, dir_enc, sun_enc, None)
}

/// `forward` with additive noise on the raw (pre-softplus) density, used
/// during training to destabilize semi-transparent solutions. The backward
/// pass needs no changes: the softplus derivative is recovered from the
/// post-activation value, noise included.
pub fn forward_with_noise<F: Real>(
    view: &FieldView<F>,
    x_enc: Array2<F>,
    dir_enc: Option<Array2<F>>,
    sun_enc: Option<Array2<F>>,
    sigma_noise: Option<&Array2<F>>,
) -> FieldForward<F> {
    let arch = view.arch;
    let lay = view.layout;
    assert_eq!(x_enc.ncols(), arch.x_dim(), "encoded position width mismatch");
    assert_eq!(
        dir_enc.is_some(),
        arch.use_viewdirs,
        "view-direction input must match use_viewdirs"
    );
    if let Some(d) = &dir_enc {
        assert_eq!(d.ncols(), arch.dir_dim());
        assert_eq!(d.nrows(), x_enc.nrows());
    }
    assert_eq!(sun_enc.is_some(), arch.kind == ModelKind::Snerf, "sun input mismatch");
    if let Some(s) = &sun_enc {
        assert_eq!(s.ncols(), arch.sun_dim());
        assert_eq!(s.nrows(), x_enc.nrows());
    }

    let mut trunk: Vec<Array2<F>> = Vec::with_capacity(arch.trunk_depth);
    for i in 0..arch.trunk_depth {
        let y = if i == 0 {
            dense_forward(view, lay.trunk(0), &[x_enc.view()])
        } else if arch.skip_layer == Some(i) {
            dense_forward(view, lay.trunk(i), &[trunk[i - 1].view(), x_enc.view()])
        } else {
            dense_forward(view, lay.trunk(i), &[trunk[i - 1].view()])
        };
        trunk.push(y);
    }
    let feature = trunk.last().unwrap();

    let sigma = match sigma_noise {
        None => dense_forward(view, lay.sigma(), &[feature.view()]),
        Some(noise) => {
            let sp = &lay.specs[lay.sigma()];
            let rows = feature.nrows();
            let w = view.w(lay.sigma());
            let mut raw = Array2::zeros((rows, sp.out_dim));
            general_mat_mul(F::one(), feature, &w.t(), F::one(), &mut raw);
            raw += &view.b(lay.sigma());
            debug_assert_eq!(noise.dim(), raw.dim());
            raw = raw + noise;
            apply_activation(Activation::Softplus, &mut raw);
            raw
        }
    };

    let head_hidden = match arch.kind {
        ModelKind::Nerf => match &dir_enc {
            Some(d) => dense_forward(view, lay.head_hidden(), &[feature.view(), d.view()]),
            None => dense_forward(view, lay.head_hidden(), &[feature.view()]),
        },
        ModelKind::Snerf => dense_forward(view, lay.head_hidden(), &[feature.view()]),
    };
    let rgb = dense_forward(view, lay.head_out(), &[head_hidden.view()]);

    let mut sun_layers = Vec::new();
    if arch.kind == ModelKind::Snerf {
        let sun = sun_enc.as_ref().unwrap();
        let mut parts: Vec<ArrayView2<F>> = vec![feature.view(), sun.view()];
        if arch.sun_head_uses_viewdirs {
            if let Some(d) = &dir_enc {
                parts.push(d.view());
            }
        }
        let mut y = dense_forward(view, lay.sun(0), &parts);
        sun_layers.push(y);
        for i in 1..arch.sun_depth {
            y = dense_forward(view, lay.sun(i), &[sun_layers[i - 1].view()]);
            sun_layers.push(y);
        }
    }

    FieldForward { x_enc, dir_enc, sun_enc, trunk, sigma, head_hidden, rgb, sun_layers }
}

/// Reverse pass matching `forward`. Cotangents arrive on the outputs; exact
/// parameter gradients accumulate (+=) into `grads`, which must cover this
/// network's slice of the flat buffer. Batch accumulation is summation.
pub fn backward<F: Real>(
    view: &FieldView<F>,
    fwd: &FieldForward<F>,
    d_sigma: &Array2<F>,
    d_rgb: &Array2<F>,
    d_sun_vis: Option<&Array2<F>>,
    grads: &mut [F],
) {
    let arch = view.arch;
    let lay = view.layout;
    assert_eq!(grads.len(), lay.total_len, "gradient buffer length mismatch");
    assert_eq!(d_sigma.dim(), fwd.sigma.dim());
    assert_eq!(d_rgb.dim(), fwd.rgb.dim());

    let n = fwd.n_samples();
    let feature = fwd.trunk.last().unwrap();
    let mut d_feature = Array2::<F>::zeros((n, arch.trunk_width));

    // density head
    let mut d = d_sigma.clone();
    activation_backward(Activation::Softplus, &fwd.sigma, &mut d);
    dense_backward(view, lay.sigma(), &[feature.view()], &d, grads, &mut [Some(&mut d_feature)]);

    // color / albedo head
    let mut d = d_rgb.clone();
    activation_backward(Activation::Sigmoid, &fwd.rgb, &mut d);
    let mut d_hidden = Array2::<F>::zeros(fwd.head_hidden.dim());
    dense_backward(
        view,
        lay.head_out(),
        &[fwd.head_hidden.view()],
        &d,
        grads,
        &mut [Some(&mut d_hidden)],
    );
    activation_backward(Activation::Relu, &fwd.head_hidden, &mut d_hidden);
    match arch.kind {
        ModelKind::Nerf => match &fwd.dir_enc {
            Some(dir) => dense_backward(
                view,
                lay.head_hidden(),
                &[feature.view(), dir.view()],
                &d_hidden,
                grads,
                &mut [Some(&mut d_feature), None],
            ),
            None => dense_backward(
                view,
                lay.head_hidden(),
                &[feature.view()],
                &d_hidden,
                grads,
                &mut [Some(&mut d_feature)],
            ),
        },
        ModelKind::Snerf => dense_backward(
            view,
            lay.head_hidden(),
            &[feature.view()],
            &d_hidden,
            grads,
            &mut [Some(&mut d_feature)],
        ),
    }

    // sun head
    if let Some(d_s) = d_sun_vis {
        assert_eq!(arch.kind, ModelKind::Snerf, "sun cotangent on a plain network");
        let depth = arch.sun_depth;
        let mut d = d_s.clone();
        for i in (0..depth).rev() {
            let post = &fwd.sun_layers[i];
            activation_backward(view.layout.specs[lay.sun(i)].act, post, &mut d);
            if i > 0 {
                let mut d_prev = Array2::<F>::zeros(fwd.sun_layers[i - 1].dim());
                dense_backward(
                    view,
                    lay.sun(i),
                    &[fwd.sun_layers[i - 1].view()],
                    &d,
                    grads,
                    &mut [Some(&mut d_prev)],
                );
                d = d_prev;
            } else {
                let sun = fwd.sun_enc.as_ref().unwrap();
                let mut parts: Vec<ArrayView2<F>> = vec![feature.view(), sun.view()];
                let mut d_parts: Vec<Option<&mut Array2<F>>> = Vec::new();
                if arch.sun_head_uses_viewdirs {
                    if let Some(dir) = &fwd.dir_enc {
                        parts.push(dir.view());
                    }
                }
                d_parts.push(Some(&mut d_feature));
                for _ in 1..parts.len() {
                    d_parts.push(None);
                }
                dense_backward(view, lay.sun(0), &parts, &d, grads, &mut d_parts);
            }
        }
    }

    // trunk, walking back from the feature layer
    let mut d_y = d_feature;
    for i in (0..arch.trunk_depth).rev() {
        activation_backward(Activation::Relu, &fwd.trunk[i], &mut d_y);
        if i == 0 {
            dense_backward(view, lay.trunk(0), &[fwd.x_enc.view()], &d_y, grads, &mut [None]);
        } else {
            let mut d_prev = Array2::<F>::zeros((n, arch.trunk_width));
            if arch.skip_layer == Some(i) {
                dense_backward(
                    view,
                    lay.trunk(i),
                    &[fwd.trunk[i - 1].view(), fwd.x_enc.view()],
                    &d_y,
                    grads,
                    &mut [Some(&mut d_prev), None],
                );
            } else {
                dense_backward(
                    view,
                    lay.trunk(i),
                    &[fwd.trunk[i - 1].view()],
                    &d_y,
                    grads,
                    &mut [Some(&mut d_prev)],
                );
            }
            d_y = d_prev;
        }
    }
}

/// Cached sky-head forward pass (per ray, not per sample).
pub struct SkyForward<F> {
    pub sun_enc: Array2<F>,
    hidden: Array2<F>,
    /// Post-sigmoid sky color, [R, 3].
    pub sky: Array2<F>,
}

impl<F: Real> SkyForward<F> {
    pub fn sky_slice(&self) -> &[F] {
        self.sky.as_slice().unwrap()
    }
}

pub fn sky_forward<F: Real>(view: &FieldView<F>, sun_enc: Array2<F>) -> SkyForward<F> {
    assert_eq!(view.arch.kind, ModelKind::Snerf, "sky head exists on shadow-aware networks only");
    assert_eq!(sun_enc.ncols(), view.arch.sun_dim());
    let hidden = dense_forward(view, view.layout.sky_hidden(), &[sun_enc.view()]);
    let sky = dense_forward(view, view.layout.sky_out(), &[hidden.view()]);
    SkyForward { sun_enc, hidden, sky }
}

pub fn sky_backward<F: Real>(
    view: &FieldView<F>,
    fwd: &SkyForward<F>,
    d_sky: &Array2<F>,
    grads: &mut [F],
) {
    let lay = view.layout;
    let mut d = d_sky.clone();
    activation_backward(Activation::Sigmoid, &fwd.sky, &mut d);
    let mut d_hidden = Array2::<F>::zeros(fwd.hidden.dim());
    dense_backward(view, lay.sky_out(), &[fwd.hidden.view()], &d, grads, &mut [Some(&mut d_hidden)]);
    // sky hidden layer is linear: no activation backward
    dense_backward(view, lay.sky_hidden(), &[fwd.sun_enc.view()], &d_hidden, grads, &mut [None]);
}

/// Per-sample field outputs, convenience form for single evaluations.
#[derive(Debug, Clone)]
pub struct FieldOutput<F> {
    pub sigma: F,
    /// Color (plain) or albedo (shadow-aware).
    pub rgb: [F; 3],
    pub sun_vis: Option<F>,
}

/// Evaluate a single sample; checked dimensions.
pub fn forward_one<F: Real>(
    view: &FieldView<F>,
    x_enc: &[F],
    dir_enc: Option<&[F]>,
    sun_enc: Option<&[F]>,
) -> Result<FieldOutput<F>> {
    let arch = view.arch;
    if x_enc.len() != arch.x_dim() {
        return Err(Error::Config(format!(
            "encoded position has {} values, architecture expects {}",
            x_enc.len(),
            arch.x_dim()
        )));
    }
    if dir_enc.map_or(0, |d| d.len()) != arch.dir_dim() {
        return Err(Error::Config("encoded view-direction width mismatch".into()));
    }
    if sun_enc.map_or(0, |s| s.len()) != arch.sun_dim() {
        return Err(Error::Config("encoded sun-direction width mismatch".into()));
    }
    let row = |v: &[F]| Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
    let fwd = forward(view, row(x_enc), dir_enc.map(row), sun_enc.map(row));
    Ok(FieldOutput {
        sigma: fwd.sigma[[0, 0]],
        rgb: [fwd.rgb[[0, 0]], fwd.rgb[[0, 1]], fwd.rgb[[0, 2]]],
        sun_vis: fwd.sun_vis().map(|s| s[[0, 0]]),
    })
}

/// Evaluate the sky head for a single sun direction.
pub fn sky_one<F: Real>(view: &FieldView<F>, sun_enc: &[F]) -> [F; 3] {
    let fwd = sky_forward(view, Array2::from_shape_vec((1, sun_enc.len()), sun_enc.to_vec()).unwrap());
    [fwd.sky[[0, 0]], fwd.sky[[0, 1]], fwd.sky[[0, 2]]]
}
