//! Single-file model checkpoint: magic, format version, scalar width tag,
//! step counters, architecture as key-value text, then every parameter and
//! batch-norm running statistic as a named little-endian tensor. Loading
//! rebuilds the exact bundle bit for bit; any structural mismatch is an
//! error rather than a silent partial restore.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{build_models, ArchConfig, ModelBundle};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"VEILFACE";
const VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// ArchConfig <-> key-value text
// ---------------------------------------------------------------------------

fn arch_to_text(a: &ArchConfig) -> String {
    format!(
        "image_size={}\nbase_channels={}\nlatent_dim={}\nn_identities={}\n\
         n_expressions={}\nleaky_slope={}\nscale_factor={}\n",
        a.image_size, a.base_channels, a.latent_dim, a.n_identities, a.n_expressions,
        a.leaky_slope, a.scale_factor
    )
}

fn arch_from_text(text: &str) -> Result<ArchConfig> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad arch line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let take = |map: &mut BTreeMap<String, String>, k: &str| -> Result<String> {
        map.remove(k).ok_or_else(|| Error::Checkpoint(format!("arch text missing key {k:?}")))
    };
    let parse_usize = |s: String, k: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Checkpoint(format!("bad value {s:?} for {k}")))
    };
    let arch = ArchConfig {
        image_size: parse_usize(take(&mut map, "image_size")?, "image_size")?,
        base_channels: parse_usize(take(&mut map, "base_channels")?, "base_channels")?,
        latent_dim: parse_usize(take(&mut map, "latent_dim")?, "latent_dim")?,
        n_identities: parse_usize(take(&mut map, "n_identities")?, "n_identities")?,
        n_expressions: parse_usize(take(&mut map, "n_expressions")?, "n_expressions")?,
        leaky_slope: take(&mut map, "leaky_slope")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad leaky_slope".into()))?,
        scale_factor: parse_usize(take(&mut map, "scale_factor")?, "scale_factor")?,
    };
    if let Some(k) = map.into_keys().next() {
        return Err(Error::Checkpoint(format!("unknown arch key {k:?}")));
    }
    Ok(arch)
}

// ---------------------------------------------------------------------------
// Byte helpers
// ---------------------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 string field".into()))
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

// ---------------------------------------------------------------------------
// Save / load
// ---------------------------------------------------------------------------

fn visit_all_tensors<F: Scalar>(
    model: &ModelBundle<F>,
    f: &mut dyn FnMut(&str, &[usize], &[F]),
) {
    model.encoder.for_each_tensor(f);
    model.decoder.for_each_tensor(f);
    model.discriminator.for_each_tensor(f);
}

/// Write the bundle to `path` atomically (temp file + rename).
pub fn save_checkpoint<F: Scalar>(model: &ModelBundle<F>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_string(&mut out, F::DTYPE);
    out.extend_from_slice(&model.d_steps.to_le_bytes());
    out.extend_from_slice(&model.g_steps.to_le_bytes());
    push_string(&mut out, &arch_to_text(&model.arch));

    let mut count: u32 = 0;
    visit_all_tensors(model, &mut |_, _, _| count += 1);
    out.extend_from_slice(&count.to_le_bytes());
    visit_all_tensors(model, &mut |name, shape, data| {
        push_string(&mut out, name);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            v.write_le(&mut out);
        }
    });

    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &out).map_err(|e| Error::storage(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))?;
    Ok(())
}

/// Restore a bundle; the architecture comes from the file itself.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<ModelBundle<F>> {
    let buf = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{path:?} is not a checkpoint file")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let dtype = r.string()?;
    if dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {dtype} tensors, loader expects {}",
            F::DTYPE
        )));
    }
    let d_steps = r.u64()?;
    let g_steps = r.u64()?;
    let arch = arch_from_text(&r.string()?)?;

    let count = r.u32()? as usize;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<F>)> = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let bytes = r.take(len * F::BYTES)?;
        let data = bytes.chunks_exact(F::BYTES).map(F::read_le).collect();
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
    }

    let mut model = build_models::<F>(&arch, 0)?;
    model.d_steps = d_steps;
    model.g_steps = g_steps;
    let mut missing = Vec::new();
    let mut fill = |name: &str, shape: &[usize], data: &mut [F]| match tensors.remove(name) {
        Some((s, vals)) if s == shape && vals.len() == data.len() => {
            data.copy_from_slice(&vals);
        }
        Some((s, _)) => missing.push(format!("{name} shape {s:?} != {shape:?}")),
        None => missing.push(format!("{name} absent")),
    };
    model.encoder.for_each_tensor_mut(&mut fill);
    model.decoder.for_each_tensor_mut(&mut fill);
    model.discriminator.for_each_tensor_mut(&mut fill);
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("tensor mismatches: {}", missing.join("; "))));
    }
    if let Some(extra) = tensors.into_keys().next() {
        return Err(Error::Checkpoint(format!("checkpoint has unknown tensor {extra:?}")));
    }
    Ok(model)
}

/// Restore a bundle and fail unless its architecture equals `expected`.
pub fn load_checkpoint_expecting<F: Scalar>(
    path: &Path,
    expected: &ArchConfig,
) -> Result<ModelBundle<F>> {
    let model = load_checkpoint::<F>(path)?;
    if model.arch != *expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {:?} does not match expected {:?}",
            model.arch, expected
        )));
    }
    Ok(model)
}
