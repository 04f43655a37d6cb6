//! Batch containers.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! b"ICLG"  version:u32  n_sequences:u32  n_points:u32
//! per sequence:
//!   template_len:u32  template bytes (UTF-8 canonical text)
//!   n_points × (x:f64  y:f64  flag:u8)
//! ```
//!
//! The template stored is the weight-free canonical text, so reading a batch
//! back yields template leaves in `truth`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Point, PointFlag, PromptSequence};
use crate::error::{Error, Result};
use crate::funcspace::CompositeExpr;

const MAGIC: &[u8; 4] = b"ICLG";
const VERSION: u32 = 1;

pub fn write_batch<W: Write>(mut w: W, batch: &[PromptSequence]) -> Result<()> {
    let n_points = batch.first().map_or(0, |s| s.len());
    if batch.iter().any(|s| s.len() != n_points) {
        return Err(Error::Container("sequences differ in length".into()));
    }
    w.write_all(MAGIC)?;
    for v in [VERSION, u32_len(batch.len())?, u32_len(n_points)?] {
        w.write_all(&v.to_le_bytes())?;
    }
    for seq in batch {
        let text = seq.truth.template_text();
        w.write_all(&u32_len(text.len())?.to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        for p in &seq.points {
            w.write_all(&p.x.to_le_bytes())?;
            w.write_all(&p.y.to_le_bytes())?;
            w.write_all(&[p.flag.code()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_batch<R: Read>(mut r: R) -> Result<Vec<PromptSequence>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Container(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let n_seq = read_u32(&mut r)? as usize;
    let n_points = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(n_seq);
    for _ in 0..n_seq {
        let len = read_u32(&mut r)? as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|e| Error::Container(e.to_string()))?;
        let truth: CompositeExpr = text.parse()?;
        let mut points = Vec::with_capacity(n_points);
        for _ in 0..n_points {
            let x = read_f64(&mut r)?;
            let y = read_f64(&mut r)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let flag = PointFlag::from_code(flag[0])
                .ok_or_else(|| Error::Container(format!("bad flag byte {}", flag[0])))?;
            points.push(Point { x, y, flag });
        }
        out.push(PromptSequence { points, truth });
    }
    Ok(out)
}

pub fn write_batch_file(path: &Path, batch: &[PromptSequence]) -> Result<()> {
    write_batch(BufWriter::new(File::create(path)?), batch)
}

pub fn read_batch_file(path: &Path) -> Result<Vec<PromptSequence>> {
    read_batch(BufReader::new(File::open(path)?))
}

/// Debug export: `seq_id,pos,x,y,flag,template`, positions 1-based.
pub fn write_batch_csv<W: Write>(mut w: W, batch: &[PromptSequence]) -> Result<()> {
    writeln!(w, "seq_id,pos,x,y,flag,template")?;
    for (id, seq) in batch.iter().enumerate() {
        let template = csv_quote(&seq.truth.template_text());
        for (pos, p) in seq.points.iter().enumerate() {
            writeln!(
                w,
                "{id},{},{},{},{},{template}",
                pos + 1,
                p.x,
                p.y,
                p.flag.name()
            )?;
        }
    }
    Ok(())
}

pub(crate) fn csv_quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Container(format!("{n} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
