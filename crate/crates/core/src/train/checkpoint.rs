//! Binary checkpoints of a reference network, its localization map and the
//! optimizer state.
//!
//! Layout (little endian): magic `CGCK`, `u32` version, then the topology
//! `u32 n_freqs, n_sources, context, hidden, n_dirs`, the two parameter
//! vectors (`u64` length + `f64` values each), the optimizer
//! (`f64 lr, beta1, beta2, eps`, `u64 step`, `u64` length + first moments
//! + second moments) and a `u32` epoch counter.

use std::fs;
use std::path::Path;

use super::adam::Adam;
use super::network::{DirectionalSoftmax, LocalizationMap, MaskNetwork, ReferenceMaskNet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ReferenceMaskNet,
    pub map: DirectionalSoftmax,
    pub optimizer: Adam,
    pub epoch: u32,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        ck.net.n_freqs,
        ck.net.n_sources,
        ck.net.context,
        ck.net.hidden,
        ck.map.n_dirs(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    put_vec(&mut out, ck.net.params());
    put_vec(&mut out, ck.map.params());
    let o = &ck.optimizer;
    for v in [o.lr, o.beta1, o.beta2, o.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&o.step.to_le_bytes());
    put_vec(&mut out, &o.m);
    out.extend(o.v.iter().flat_map(|v| v.to_le_bytes()));
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Checkpoint(format!("{}: {reason}", path.display()));
    let mut r = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4).ok_or_else(|| bad("truncated header".into()))? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = r.u32().ok_or_else(|| bad("truncated topology".into()))? as usize;
    }
    let [n_freqs, n_sources, context, hidden, n_dirs] = dims;
    let net_params = r
        .vec()
        .ok_or_else(|| bad("truncated network parameters".into()))?;
    let map_params = r.vec().ok_or_else(|| bad("truncated map parameters".into()))?;
    let net = ReferenceMaskNet::from_params(n_freqs, n_sources, context, hidden, net_params)
        .map_err(|e| bad(e.to_string()))?;
    let map = DirectionalSoftmax::from_params(n_dirs, map_params).map_err(|e| bad(e.to_string()))?;
    let mut head = [0.0; 4];
    for v in head.iter_mut() {
        *v = r.f64().ok_or_else(|| bad("truncated optimizer".into()))?;
    }
    let step = r.u64().ok_or_else(|| bad("truncated optimizer".into()))?;
    let m = r.vec().ok_or_else(|| bad("truncated optimizer moments".into()))?;
    let v = (0..m.len())
        .map(|_| r.f64())
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| bad("truncated optimizer moments".into()))?;
    let epoch = r.u32().ok_or_else(|| bad("missing epoch counter".into()))?;
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if m.len() != net.params().len() + map.params().len() {
        return Err(bad("optimizer state does not match the networks".into()));
    }
    let optimizer = Adam {
        lr: head[0],
        beta1: head[1],
        beta2: head[2],
        eps: head[3],
        step,
        m,
        v,
    };
    Ok(Checkpoint {
        net,
        map,
        optimizer,
        epoch,
    })
}

fn put_vec(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    out.extend(v.iter().flat_map(|x| x.to_le_bytes()));
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn vec(&mut self) -> Option<Vec<f64>> {
        let n = usize::try_from(self.u64()?).ok()?;
        if n > (self.bytes.len() - self.pos) / 8 {
            return None;
        }
        (0..n).map(|_| self.f64()).collect()
    }
}
