//! Binary model checkpoints.
//!
//! Layout (all little-endian): magic `SNRF`, format version, an architecture
//! block, an FNV-1a hash of that block, the iteration counter, then the flat
//! f32 parameter vector in canonical order (coarse network then fine; per
//! layer weights row-major then bias) followed by the optimizer state (lr
//! schedule, step counter, first/second moments in the same order). Loading
//! is bit-exact and rejects any architecture mismatch via the hash and
//! explicit field comparison; writes go to a temp file and rename into place.

use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::field::{ArchConfig, FieldLayout, Model, ModelKind};
use crate::optim::{AdamHyper, AdamState};
use crate::scene::write_atomic;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SNRF";
const VERSION: u32 = 1;

fn arch_block(arch: &ArchConfig, has_fine: bool) -> Vec<u8> {
    let mut b = Vec::with_capacity(64);
    b.push(match arch.kind {
        ModelKind::Nerf => 0u8,
        ModelKind::Snerf => 1u8,
    });
    b.push(arch.use_viewdirs as u8);
    b.push(arch.sun_head_uses_viewdirs as u8);
    b.push(arch.enc.include_identity as u8);
    b.extend_from_slice(&(arch.trunk_depth as u32).to_le_bytes());
    b.extend_from_slice(&(arch.trunk_width as u32).to_le_bytes());
    b.extend_from_slice(&(arch.skip_layer.map_or(-1i32, |s| s as i32)).to_le_bytes());
    b.extend_from_slice(&(arch.head_width as u32).to_le_bytes());
    b.extend_from_slice(&(arch.sun_depth as u32).to_le_bytes());
    b.extend_from_slice(&(arch.sun_width as u32).to_le_bytes());
    b.extend_from_slice(&(arch.sky_width as u32).to_le_bytes());
    b.extend_from_slice(&(arch.enc.l_pos as u32).to_le_bytes());
    b.extend_from_slice(&(arch.enc.l_dir as u32).to_le_bytes());
    b.push(has_fine as u8);
    b
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save_checkpoint(
    model: &Model<f32>,
    adam: &AdamState<f32>,
    iteration: u64,
    path: &Path,
) -> Result<()> {
    assert_eq!(adam.m.len(), model.params.len(), "optimizer state does not match model");
    let block = arch_block(&model.arch, model.has_fine);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(block.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&block);
    bytes.extend_from_slice(&fnv1a(&block).to_le_bytes());
    bytes.extend_from_slice(&iteration.to_le_bytes());
    bytes.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    bytes.extend_from_slice(&adam.hyper.lr0.to_le_bytes());
    bytes.extend_from_slice(&adam.hyper.decay_rate.to_le_bytes());
    bytes.extend_from_slice(&adam.hyper.decay_steps.to_le_bytes());
    bytes.extend_from_slice(&adam.t.to_le_bytes());
    for v in adam.m.iter().chain(adam.v.iter()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                path: self.path.into(),
                message: format!(
                    "truncated: need {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, AdamState<f32>, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    let fail = |message: String| Error::Checkpoint { path: path.into(), message };

    if cur.take(4)? != MAGIC {
        return Err(fail("bad magic, not a checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let block_len = cur.u32()? as usize;
    let block_start = cur.pos;
    let kind = match cur.u8()? {
        0 => ModelKind::Nerf,
        1 => ModelKind::Snerf,
        other => return Err(fail(format!("unknown model kind {other}"))),
    };
    let use_viewdirs = cur.u8()? != 0;
    let sun_head_uses_viewdirs = cur.u8()? != 0;
    let include_identity = cur.u8()? != 0;
    let trunk_depth = cur.u32()? as usize;
    let trunk_width = cur.u32()? as usize;
    let skip = cur.i32()?;
    let head_width = cur.u32()? as usize;
    let sun_depth = cur.u32()? as usize;
    let sun_width = cur.u32()? as usize;
    let sky_width = cur.u32()? as usize;
    let l_pos = cur.u32()? as usize;
    let l_dir = cur.u32()? as usize;
    let has_fine = cur.u8()? != 0;
    if cur.pos - block_start != block_len {
        return Err(fail("architecture block length mismatch".into()));
    }
    let stored_hash = cur.u64()?;
    let arch = ArchConfig {
        kind,
        trunk_depth,
        trunk_width,
        skip_layer: (skip >= 0).then_some(skip as usize),
        head_width,
        use_viewdirs,
        sun_head_uses_viewdirs,
        sun_depth,
        sun_width,
        sky_width,
        enc: EncodingConfig { l_pos, l_dir, include_identity },
    };
    let block = arch_block(&arch, has_fine);
    if fnv1a(&block) != stored_hash {
        return Err(fail("architecture hash mismatch (corrupt or incompatible header)".into()));
    }
    arch.validate().map_err(|e| fail(format!("invalid stored architecture: {e}")))?;

    let iteration = cur.u64()?;
    let n_params = cur.u64()? as usize;
    let layout = FieldLayout::new(&arch);
    let expected = layout.total_len * if has_fine { 2 } else { 1 };
    if n_params != expected {
        return Err(fail(format!(
            "parameter count {n_params} does not match architecture (expects {expected})"
        )));
    }
    let params = cur.f32_vec(n_params)?;
    let lr0 = cur.f64()?;
    let decay_rate = cur.f64()?;
    let decay_steps = cur.u64()?;
    let t = cur.u64()?;
    let m = cur.f32_vec(n_params)?;
    let v = cur.f32_vec(n_params)?;
    if cur.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    let model = Model { arch, layout, has_fine, params };
    let mut hyper = AdamHyper::new(lr0, decay_rate, decay_steps);
    hyper.eps = AdamHyper::default().eps;
    let mut adam = AdamState::new(n_params, hyper);
    adam.m = m;
    adam.v = v;
    adam.t = t;
    Ok((model, adam, iteration))
}

/// Resume guard: the checkpoint must carry exactly this architecture.
pub fn ensure_arch_matches(model: &Model<f32>, expected: &ArchConfig, has_fine: bool, path: &Path) -> Result<()> {
    if &model.arch != expected || model.has_fine != has_fine {
        return Err(Error::Checkpoint {
            path: path.into(),
            message: "checkpoint architecture does not match the configured model".into(),
        });
    }
    Ok(())
}
