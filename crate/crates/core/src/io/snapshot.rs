//! Dynamic memory snapshots.
//!
//! ```text
//! "EMBS", u32 version, u32 D, u32 C, u32 L
//! C*L*D f32   slot features, class-major (zeros for empty slots)
//! C*L   u8    occupied flags
//! C*L   f32   slot entropies (0 for empty slots)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::embf::Reader;
use crate::memory::{DynamicMemory, MemorySlot};
use crate::scalar::{cast_slice, Scalar};

const MAGIC: [u8; 4] = *b"EMBS";
const VERSION: u32 = 1;

pub fn snapshot_bytes<T: Scalar>(mem: &DynamicMemory<T>) -> Vec<u8> {
    let (c, l, d) = (mem.num_classes(), mem.capacity(), mem.dim());
    let mut out = Vec::with_capacity(20 + c * l * (4 * d + 5));
    out.extend_from_slice(&MAGIC);
    for x in [VERSION, d as u32, c as u32, l as u32] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let zero = vec![T::zero(); d];
    let slots = || (0..c).flat_map(move |y| (0..l).map(move |i| mem.slot(y, i)));
    for s in slots() {
        for x in s.map_or(zero.as_slice(), |s| s.feature.as_slice()) {
            out.extend_from_slice(&x.as_f32().to_le_bytes());
        }
    }
    out.extend(slots().map(|s| u8::from(s.is_some())));
    for s in slots() {
        out.extend_from_slice(&s.map_or(0.0, |s| s.entropy.as_f32()).to_le_bytes());
    }
    out
}

pub fn memory_from_snapshot<T: Scalar>(bytes: &[u8]) -> Result<DynamicMemory<T>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let d = r.u32()? as usize;
    let c = r.u32()? as usize;
    let l = r.u32()? as usize;
    let n = c * l;
    let features = r.f32s(n * d, "slot features")?;
    let occupied = r.u8s(n, "occupied flags")?.to_vec();
    let entropies = r.f32s(n, "slot entropies")?;
    r.finish()?;
    let mut slots: Vec<Vec<Option<MemorySlot<T>>>> = vec![Vec::with_capacity(l); c];
    for (y, bank) in slots.iter_mut().enumerate() {
        for i in 0..l {
            let k = y * l + i;
            let slot = (occupied[k] != 0).then(|| MemorySlot {
                feature: cast_slice(&features[k * d..(k + 1) * d]),
                entropy: T::from_f32_lossless(entropies[k]),
            });
            bank.push(slot);
        }
    }
    Ok(DynamicMemory::from_slots(d, l, slots))
}

pub fn save_memory_snapshot<T: Scalar>(mem: &DynamicMemory<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, snapshot_bytes(mem)).map_err(|e| Error::io(path, e))
}

pub fn load_memory_snapshot<T: Scalar>(path: impl AsRef<Path>) -> Result<DynamicMemory<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    memory_from_snapshot(&bytes)
}
