//! Sinusoidal positional encoding.
//!
//! Each input component `p` (pre-normalized to roughly [-1, 1]) is lifted to
//! `(p,) sin(2^0 πp), cos(2^0 πp), …, sin(2^{L-1} πp), cos(2^{L-1} πp)`;
//! vector inputs are encoded component-wise and concatenated. The encoding is
//! a fixed input transform — no gradient flows upstream of it during training.

use crate::error::{Error, Result};
use crate::real::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Frequency count for positions.
    pub l_pos: usize,
    /// Frequency count for view and sun directions.
    pub l_dir: usize,
    /// Prefix each component's block with the raw value.
    pub include_identity: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig { l_pos: 10, l_dir: 4, include_identity: true }
    }
}

/// Output dimension for a `d_in`-vector at `l` frequencies.
pub fn encoded_dim(d_in: usize, l: usize, include_identity: bool) -> usize {
    d_in * (2 * l + include_identity as usize)
}

/// Encode `p` into `out` (length must be `encoded_dim(p.len(), l, identity)`).
///
/// Frequencies are generated by angle doubling from the base sin/cos pair, in
/// f64, so one `sin_cos` per component covers all `l` octaves.
pub fn encode_into<F: Real>(p: &[f64], l: usize, include_identity: bool, out: &mut [F]) {
    debug_assert_eq!(out.len(), encoded_dim(p.len(), l, include_identity));
    let mut k = 0;
    for &x in p {
        debug_assert!(x.is_finite());
        if include_identity {
            out[k] = F::from_f64(x);
            k += 1;
        }
        if l == 0 {
            continue;
        }
        let (mut s, mut co) = (std::f64::consts::PI * x).sin_cos();
        for _ in 0..l {
            out[k] = F::from_f64(s);
            out[k + 1] = F::from_f64(co);
            k += 2;
            let ns = 2.0 * s * co;
            let nc = co * co - s * s;
            s = ns;
            co = nc;
        }
    }
}

/// Checked encode for external callers; rejects non-finite inputs.
pub fn encode<F: Real>(p: &[f64], l: usize, include_identity: bool) -> Result<Vec<F>> {
    if let Some(bad) = p.iter().position(|x| !x.is_finite()) {
        return Err(Error::Other(format!("encode: non-finite input at component {bad}")));
    }
    let mut out = vec![F::zero(); encoded_dim(p.len(), l, include_identity)];
    encode_into(p, l, include_identity, &mut out);
    Ok(out)
}

/// Derivative of each encoded output with respect to its source component.
///
/// The encoding is block-diagonal per component, so the jacobian is fully
/// described by one value per output. Used only by the analytic-oracle tests;
/// in training the encoding is a leaf.
pub fn encode_grad(p: &[f64], l: usize, include_identity: bool) -> Vec<f64> {
    let mut out = vec![0.0; encoded_dim(p.len(), l, include_identity)];
    let mut k = 0;
    for &x in p {
        if include_identity {
            out[k] = 1.0;
            k += 1;
        }
        if l == 0 {
            continue;
        }
        let (mut s, mut co) = (std::f64::consts::PI * x).sin_cos();
        let mut freq = std::f64::consts::PI;
        for _ in 0..l {
            // d/dp sin(fp) = f cos(fp); d/dp cos(fp) = -f sin(fp)
            out[k] = freq * co;
            out[k + 1] = -freq * s;
            k += 2;
            let ns = 2.0 * s * co;
            let nc = co * co - s * s;
            s = ns;
            co = nc;
            freq *= 2.0;
        }
    }
    out
}
