//! `ICLM` checkpoint files, little-endian:
//!
//! ```text
//! b"ICLM"  version:u32  kind:u32 (0 transformer, 1 mlp)
//! transformer: embed_dim n_layers n_heads n_points (u32)  dropout:f64
//! mlp:         n_points input_dim n_hidden (u32)  hidden[n_hidden]:u32  activation:u32
//! n_tensors:u32
//! per tensor: name_len:u32 name  rank:u32 dims[rank]:u32  f32 data, row-major
//! ```

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{Activation, MlpConfig, ModelConfig, ModelParams, Scalar, TransformerConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ICLM";
const VERSION: u32 = 1;

type Msg<T> = std::result::Result<T, String>;

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, params: &ModelParams<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    match params.config() {
        ModelConfig::Transformer(c) => {
            put_u32(&mut w, 0)?;
            for v in [c.embed_dim, c.n_layers, c.n_heads, c.n_points] {
                put_u32(&mut w, to_u32(v)?)?;
            }
            w.write_all(&c.dropout.to_le_bytes())?;
        }
        ModelConfig::Mlp(c) => {
            put_u32(&mut w, 1)?;
            for v in [c.n_points, c.input_dim, c.hidden.len()] {
                put_u32(&mut w, to_u32(v)?)?;
            }
            for &h in &c.hidden {
                put_u32(&mut w, to_u32(h)?)?;
            }
            put_u32(&mut w, 0)?;
        }
    }
    put_u32(&mut w, to_u32(params.tensors().len())?)?;
    for spec in params.tensors() {
        put_u32(&mut w, to_u32(spec.name.len())?)?;
        w.write_all(spec.name.as_bytes())?;
        put_u32(&mut w, to_u32(spec.shape.len())?)?;
        for &dim in &spec.shape {
            put_u32(&mut w, to_u32(dim)?)?;
        }
        let mut buf = Vec::with_capacity(spec.len() * 4);
        for v in &params.data()[spec.range()] {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ModelParams<f32>> {
    read_inner(r).map_err(|message| Error::Checkpoint { path: PathBuf::from("<stream>"), message })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint { path: path.to_path_buf(), message: e.to_string() })?;
    read_inner(BufReader::new(file)).map_err(|message| Error::Checkpoint { path: path.to_path_buf(), message })
}

/// One line per tensor (`name shape count`) followed by the total.
pub fn describe<T: Scalar>(params: &ModelParams<T>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model: {}", params.config().kind_name());
    for spec in params.tensors() {
        let _ = writeln!(out, "{:<28} {:<12} {}", spec.name, format!("{:?}", spec.shape), spec.len());
    }
    let _ = writeln!(out, "total parameters: {}", params.count());
    out
}

fn read_inner<R: Read>(mut r: R) -> Msg<ModelParams<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(format!("unsupported version {version} (expected {VERSION})"));
    }
    let config = match get_u32(&mut r)? {
        0 => {
            let mut v = [0usize; 4];
            for slot in &mut v {
                *slot = get_u32(&mut r)? as usize;
            }
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            ModelConfig::Transformer(TransformerConfig {
                embed_dim: v[0],
                n_layers: v[1],
                n_heads: v[2],
                n_points: v[3],
                dropout: f64::from_le_bytes(b),
            })
        }
        1 => {
            let n_points = get_u32(&mut r)? as usize;
            let input_dim = get_u32(&mut r)? as usize;
            let n_hidden = get_u32(&mut r)? as usize;
            let hidden = (0..n_hidden).map(|_| get_u32(&mut r).map(|v| v as usize)).collect::<Msg<_>>()?;
            let activation = match get_u32(&mut r)? {
                0 => Activation::Relu,
                a => return Err(format!("unknown activation code {a}")),
            };
            ModelConfig::Mlp(MlpConfig { n_points, input_dim, hidden, activation })
        }
        k => return Err(format!("unknown model kind {k}")),
    };
    let mut params = ModelParams::<f32>::zeros(config).map_err(|e| e.to_string())?;
    let n_tensors = get_u32(&mut r)? as usize;
    if n_tensors != params.tensors().len() {
        return Err(format!("{n_tensors} tensors stored, config needs {}", params.tensors().len()));
    }
    for spec in params.tensors().to_vec() {
        let len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| e.to_string())?;
        let rank = get_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| get_u32(&mut r).map(|v| v as usize)).collect::<Msg<Vec<_>>>()?;
        if name != spec.name || shape != spec.shape {
            return Err(format!(
                "tensor `{name}` {shape:?} does not match expected `{}` {:?}",
                spec.name, spec.shape
            ));
        }
        let mut buf = vec![0u8; spec.len() * 4];
        r.read_exact(&mut buf).map_err(io)?;
        let dst = &mut params.data_mut()[spec.range()];
        for (v, chunk) in dst.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(params)
}

fn io(e: std::io::Error) -> String {
    format!("truncated or unreadable: {e}")
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Msg<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io)?;
    Ok(u32::from_le_bytes(b))
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::config(format!("{v} does not fit in u32")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_kinds() {
        let configs = [
            ModelConfig::Transformer(TransformerConfig {
                embed_dim: 8,
                n_layers: 1,
                n_heads: 2,
                n_points: 4,
                dropout: 0.0,
            }),
            ModelConfig::Mlp(MlpConfig { hidden: vec![5, 3], ..MlpConfig::for_points(4) }),
        ];
        for cfg in configs {
            let p = ModelParams::<f32>::init(cfg, 9).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &p).unwrap();
            assert_eq!(&buf[..4], b"ICLM");
            let back = read_checkpoint(&buf[..]).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn rejects_version_and_truncation() {
        let cfg = ModelConfig::Mlp(MlpConfig { hidden: vec![2], ..MlpConfig::for_points(2) });
        let p = ModelParams::<f32>::init(cfg, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Checkpoint { .. })));
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn describe_lists_every_tensor() {
        let cfg = ModelConfig::Mlp(MlpConfig { hidden: vec![4], ..MlpConfig::for_points(3) });
        let p = ModelParams::<f32>::zeros(cfg).unwrap();
        let text = describe(&p);
        assert!(text.contains("layers.0.weight"));
        assert!(text.contains("[5, 4]"));
        assert!(text.contains(&format!("total parameters: {}", p.count())));
    }
}
