//! Weight checkpoints: magic `FLQW`, version, a tensor table, then
//! little-endian `f32` payloads in table order.

use std::io::{Read, Write};

use super::model::Network;
use super::NetworkError;

pub const MAGIC: &[u8; 4] = b"FLQW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Tensors of a network in checkpoint order. Branch weights are named
/// `<layer>.weight` for single-kernel layers and `<layer>.weight.k<k>` otherwise.
pub fn export_tensors(net: &Network) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for layer in net.weight_layers() {
        let multi = layer.branches.len() > 1;
        for b in &layer.branches {
            let name = match (multi, b.kernel) {
                (true, Some(k)) => format!("{}.weight.k{k}", layer.name),
                _ => format!("{}.weight", layer.name),
            };
            out.push(NamedTensor {
                name,
                dims: b.weight.shape().to_vec(),
                data: b.weight.data().iter().map(|&v| v as f32).collect(),
            });
        }
        out.push(NamedTensor {
            name: format!("{}.bias", layer.name),
            dims: vec![layer.bias.len()],
            data: layer.bias.iter().map(|&v| v as f32).collect(),
        });
    }
    out
}

pub fn write_tensors<W: Write>(tensors: &[NamedTensor], mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for t in tensors {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, NetworkError> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| {
            NetworkError::Checkpoint(format!("truncated {what} at byte offset {}", self.offset))
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NetworkError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_tensors<R: Read>(r: R) -> Result<Vec<NamedTensor>, NetworkError> {
    let mut c = Cursor { inner: r, offset: 0 };
    if c.bytes(4, "magic")? != MAGIC {
        return Err(NetworkError::Checkpoint("bad magic, expected FLQW".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(NetworkError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32("tensor count")? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        if len > 1 << 16 {
            return Err(NetworkError::Checkpoint(format!("name length {len} at byte offset {}", c.offset - 4)));
        }
        let name = String::from_utf8(c.bytes(len, "name")?)
            .map_err(|_| NetworkError::Checkpoint(format!("non-UTF-8 name before byte offset {}", c.offset)))?;
        let rank = c.u32("rank")? as usize;
        if rank > 8 {
            return Err(NetworkError::Checkpoint(format!("rank {rank} for `{name}`")));
        }
        let dims = (0..rank).map(|_| c.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        table.push((name, dims));
    }
    table
        .into_iter()
        .map(|(name, dims)| {
            let n: usize = dims.iter().product();
            let raw = c.bytes(n * 4, "payload")?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            Ok(NamedTensor { name, dims, data })
        })
        .collect()
}

pub fn save_checkpoint<W: Write>(net: &Network, w: W) -> Result<(), NetworkError> {
    write_tensors(&export_tensors(net), w).map_err(|e| NetworkError::Checkpoint(e.to_string()))
}

/// Loads weights into a network built from the same model config.
pub fn load_checkpoint<R: Read>(net: &mut Network, r: R) -> Result<(), NetworkError> {
    let tensors = read_tensors(r)?;
    let expected = export_tensors(net);
    if tensors.len() != expected.len() {
        return Err(NetworkError::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            expected.len()
        )));
    }
    for (t, e) in tensors.iter().zip(&expected) {
        if t.name != e.name || t.dims != e.dims {
            return Err(NetworkError::Checkpoint(format!(
                "tensor `{}` {:?} does not match model tensor `{}` {:?}",
                t.name, t.dims, e.name, e.dims
            )));
        }
    }
    let mut it = tensors.into_iter();
    for layer in net.weight_layers_mut() {
        for b in &mut layer.branches {
            let t = it.next().expect("counted");
            b.weight.data_mut().iter_mut().zip(&t.data).for_each(|(d, &s)| *d = s as f64);
        }
        let t = it.next().expect("counted");
        layer.bias.iter_mut().zip(&t.data).for_each(|(d, &s)| *d = s as f64);
    }
    Ok(())
}

/// Rounds every stored weight to `f32` so the in-memory network matches
/// what a checkpoint round-trip produces.
pub fn round_to_f32(net: &mut Network) {
    for layer in net.weight_layers_mut() {
        for b in &mut layer.branches {
            b.weight.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        layer.bias.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
