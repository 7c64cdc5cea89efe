//! Checkpoint and mask files, CSV reports.
//!
//! Both binary formats share one layout: a 4-byte magic, `u32` version,
//! `u32` entry count, then per entry a `u32` name length, the UTF-8 name,
//! `u32` rank, `u32` extents and the payload. All integers are little-endian.
//! Checkpoints (`VARW`) store `f32` values; masks (`VARM`) one byte per weight.

use std::fs;
use std::path::Path;

use varprune_core::diagnostics::Histogram;
use varprune_core::model::ParamSet;
use varprune_core::prune::{Mask, MaskEntry};
use varprune_core::train::EpochRow;
use varprune_core::Tensor;

use crate::error::{HarnessError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VARW";
pub const MASK_MAGIC: &[u8; 4] = b"VARM";
pub const FORMAT_VERSION: u32 = 1;

pub const TRAIN_LOG_HEADER: [&str; 6] = ["epoch", "train_loss", "psi", "lr", "var_w", "eval_metric"];
pub const SWEEP_HEADER: [&str; 8] =
    ["method", "lambda", "seed", "prune_rate", "metric_name", "metric_value", "var_w", "dense_metric"];
pub const HISTOGRAM_HEADER: [&str; 3] = ["bin_left", "bin_right", "count"];

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_entry_header(out: &mut Vec<u8>, name: &str, shape: &[usize]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len());
    for &d in shape {
        put_u32(out, d);
    }
}

fn preamble(magic: &[u8; 4], count: usize) -> Vec<u8> {
    let mut out = magic.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, count);
    out
}

pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut out = preamble(CHECKPOINT_MAGIC, params.len());
    for e in params.entries() {
        put_entry_header(&mut out, &e.name, e.value.shape());
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = preamble(MASK_MAGIC, mask.entries.len());
    for e in &mask.entries {
        put_entry_header(&mut out, &e.name, &e.shape);
        out.extend_from_slice(&e.keep);
    }
    out
}

/// Byte cursor that reports the offset of the first malformed field.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

/// Decoding failure at a byte offset; the caller attaches the path.
#[derive(Debug, Clone, PartialEq)]
pub struct FormatError {
    pub offset: usize,
    pub message: String,
}

type Decoded<T> = std::result::Result<T, FormatError>;

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Decoded<T> {
        Err(FormatError { offset: self.pos, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Decoded<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Decoded<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Decoded<usize> {
        if self.take(4, "magic")? != magic {
            self.pos = 0;
            return self.fail(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION as usize {
            self.pos -= 4;
            return self.fail(format!("unsupported version {version}"));
        }
        self.u32("entry count")
    }

    fn entry(&mut self) -> Decoded<(String, Vec<usize>, usize)> {
        let len = self.u32("name length")?;
        let at = self.pos;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| FormatError { offset: at, message: "name is not UTF-8".into() })?
            .to_string();
        let rank = self.u32("rank")?;
        if rank == 0 || rank > 4 {
            self.pos -= 4;
            return self.fail(format!("rank {rank} outside 1..=4"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.u32("extent")?;
            if d == 0 {
                self.pos -= 4;
                return self.fail("zero extent");
            }
            count = count.checked_mul(d).ok_or(FormatError { offset: self.pos, message: "extent overflow".into() })?;
            shape.push(d);
        }
        Ok((name, shape, count))
    }

    fn finish(&self) -> Decoded<()> {
        if self.pos != self.bytes.len() {
            return self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

/// Decodes a checkpoint. The format carries no prunable flag; entries of
/// rank 2 or more (weight matrices) are marked prunable.
pub fn decode_checkpoint(bytes: &[u8]) -> Decoded<ParamSet> {
    let mut r = Reader { bytes, pos: 0 };
    let n = r.header(CHECKPOINT_MAGIC)?;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let start = r.pos;
        let (name, shape, count) = r.entry()?;
        let raw = r.take(count.saturating_mul(4), "values")?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let prunable = shape.len() >= 2;
        let tensor = Tensor::new(shape, data).map_err(|e| FormatError { offset: start, message: e.to_string() })?;
        params.push(name, tensor, prunable).map_err(|e| FormatError { offset: start, message: e.to_string() })?;
    }
    r.finish()?;
    Ok(params)
}

pub fn decode_mask(bytes: &[u8]) -> Decoded<Mask> {
    let mut r = Reader { bytes, pos: 0 };
    let n = r.header(MASK_MAGIC)?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let (name, shape, count) = r.entry()?;
        let at = r.pos;
        let keep = r.take(count, "mask values")?.to_vec();
        if let Some(i) = keep.iter().position(|&b| b > 1) {
            return Err(FormatError { offset: at + i, message: format!("mask byte {} is not 0 or 1", keep[i]) });
        }
        entries.push(MaskEntry { name, shape, keep });
    }
    r.finish()?;
    Ok(Mask { entries })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn read_decoded<T>(path: &Path, decode: impl Fn(&[u8]) -> Decoded<T>) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode(&bytes).map_err(|f| HarnessError::Format { path: path.to_path_buf(), offset: f.offset, message: f.message })
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    write_bytes(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    read_decoded(path, decode_checkpoint)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    write_bytes(path, &encode_mask(mask))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    read_decoded(path, decode_mask)
}

/// Writes a header and rows of already-formatted fields.
pub fn write_csv<const N: usize>(path: &Path, header: [&str; N], rows: &[[String; N]]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let csv_err = |source| HarnessError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_train_log(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let rows: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.psi.to_string(),
                r.lr.to_string(),
                r.var_w.to_string(),
                r.eval_metric.to_string(),
            ]
        })
        .collect();
    write_csv(path, TRAIN_LOG_HEADER, &rows)
}

pub fn write_histogram(path: &Path, hist: &Histogram) -> Result<()> {
    let rows: Vec<[String; 3]> = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, c)| [hist.edges[i].to_string(), hist.edges[i + 1].to_string(), c.to_string()])
        .collect();
    write_csv(path, HISTOGRAM_HEADER, &rows)
}
