//! On-disk formats and calibration ingestion.
//!
//! QMAT (dense `f64` matrix), all integers little-endian:
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 6    | magic `QMAT1\0`                     |
//! | 6      | 1    | version = 1                         |
//! | 7      | 1    | element type = 0 (`f64` LE)         |
//! | 8      | 17   | reserved, zero                      |
//! | 25     | 8    | rows (`u64`)                        |
//! | 33     | 8    | cols (`u64`)                        |
//! | 41     | 8·rc | payload, row-major                  |
//!
//! QZ (quantized layer): magic `QUIPZ\0`, version `u8` = 1, bits `u8`,
//! `m`, `n` (`u64`), scale (`f64`), alpha (`f64`), seed (`u64`), Kronecker
//! shapes `p1, p2, q1, q2` (`u32` each, all zero when incoherence is off),
//! row permutation (`m` × `u32`), column permutation (`n` × `u32`), diagonal
//! rescaler (`n` × `f64`), codes (`m·n` × `u16`, row-major).

use std::fs;
use std::path::Path;

use crate::error::{data_err, Error, Result};
use crate::incoherence::{postprocess, IncoherenceMeta};
use crate::linalg::Permutation;
use crate::matrix::{Matrix, SymmetricPsd};
use crate::rounding::max_code;

const QMAT_MAGIC: &[u8; 6] = b"QMAT1\0";
const QMAT_VERSION: u8 = 1;
const QMAT_HEADER: usize = 41;
const QZ_MAGIC: &[u8; 6] = b"QUIPZ\0";
const QZ_VERSION: u8 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Bounds-checked little-endian reader.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => format_err("truncated file"),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return format_err(format!(
                "{} unexpected trailing bytes",
                self.buf.len() - self.pos
            ));
        }
        Ok(())
    }
}

fn dims(rows: u64, cols: u64) -> Result<(usize, usize, usize)> {
    let r = usize::try_from(rows).or_else(|_| format_err("row count too large"))?;
    let c = usize::try_from(cols).or_else(|_| format_err("column count too large"))?;
    let len = r
        .checked_mul(c)
        .filter(|l| l.checked_mul(8).is_some())
        .ok_or_else(|| Error::Format("matrix dimensions overflow".into()))?;
    Ok((r, c, len))
}

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(QMAT_HEADER + 8 * m.as_slice().len());
    out.extend_from_slice(QMAT_MAGIC);
    out.push(QMAT_VERSION);
    out.push(0);
    out.extend_from_slice(&[0u8; 17]);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(6).ok() != Some(&QMAT_MAGIC[..]) {
        return format_err("bad QMAT magic");
    }
    let version = r.u8()?;
    if version != QMAT_VERSION {
        return format_err(format!("unsupported QMAT version {version}"));
    }
    let eltype = r.u8()?;
    if eltype != 0 {
        return format_err(format!("unsupported element type {eltype}"));
    }
    if r.take(17)?.iter().any(|&b| b != 0) {
        return format_err("reserved header bytes are not zero");
    }
    let (rows, cols, len) = dims(r.u64()?, r.u64()?)?;
    if bytes.len() - r.pos != 8 * len {
        return format_err(format!(
            "payload has {} bytes, expected {} for a {rows}x{cols} matrix",
            bytes.len() - r.pos,
            8 * len
        ));
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.f64()?);
    }
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return data_err("matrix contains NaN or infinite values");
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    decode_matrix(&fs::read(path)?)
}

pub fn write_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_matrix(m))?;
    Ok(())
}

/// `X^T X / N` for calibration rows `X` (`N x n`).
pub fn hessian_from_calibration(x: &Matrix) -> Result<SymmetricPsd> {
    let samples = x.rows();
    if samples == 0 {
        return data_err("need at least one calibration vector");
    }
    if !x.all_finite() {
        return data_err("calibration data contains NaN or infinite values");
    }
    SymmetricPsd::new(x.gram().scale(1.0 / samples as f64))
}

/// Integer codes in `{0..2^b - 1}` plus the metadata that de-quantizes them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    codes: Vec<u16>,
    meta: IncoherenceMeta,
}

impl QuantizedLayer {
    pub fn new(codes: Vec<u16>, meta: IncoherenceMeta) -> Result<Self> {
        meta.validate()?;
        if codes.len() != meta.rows() * meta.cols() {
            return data_err("code count does not match layer shape");
        }
        let top = max_code(meta.bits) as u32;
        if codes.iter().any(|&c| c as u32 > top) {
            return data_err(format!("code exceeds {top} for {} bits", meta.bits));
        }
        Ok(QuantizedLayer { codes, meta })
    }

    /// Takes codes held as floats; each must be an integer on the grid.
    pub fn from_grid(grid: &Matrix, meta: IncoherenceMeta) -> Result<Self> {
        if grid.shape() != (meta.rows(), meta.cols()) {
            return data_err("grid shape does not match metadata");
        }
        let top = max_code(meta.bits);
        let mut codes = Vec::with_capacity(grid.as_slice().len());
        for &v in grid.as_slice() {
            if !(v >= 0.0 && v <= top && v == v.trunc()) {
                return data_err(format!("value {v} is not on the {}-bit grid", meta.bits));
            }
            codes.push(v as u16);
        }
        Self::new(codes, meta)
    }

    pub fn rows(&self) -> usize {
        self.meta.rows()
    }

    pub fn cols(&self) -> usize {
        self.meta.cols()
    }

    pub fn bits(&self) -> u32 {
        self.meta.bits
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn meta(&self) -> &IncoherenceMeta {
        &self.meta
    }

    pub fn grid(&self) -> Matrix {
        Matrix::from_vec(
            self.rows(),
            self.cols(),
            self.codes.iter().map(|&c| c as f64).collect(),
        )
        .expect("length checked at construction")
    }

    pub fn dequantize(&self) -> Result<Matrix> {
        postprocess(&self.grid(), &self.meta)
    }
}

pub fn encode_quantized(layer: &QuantizedLayer) -> Vec<u8> {
    let meta = layer.meta();
    let (m, n) = (layer.rows(), layer.cols());
    let mut out = Vec::with_capacity(64 + 4 * (m + n) + 8 * n + 2 * m * n);
    out.extend_from_slice(QZ_MAGIC);
    out.push(QZ_VERSION);
    out.push(meta.bits as u8);
    out.extend_from_slice(&(m as u64).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&meta.scale.to_le_bytes());
    out.extend_from_slice(&meta.alpha.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    for s in [meta.u_shapes.0, meta.u_shapes.1, meta.v_shapes.0, meta.v_shapes.1] {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for &p in meta.row_perm.as_slice().iter().chain(meta.col_perm.as_slice()) {
        out.extend_from_slice(&(p as u32).to_le_bytes());
    }
    for d in &meta.d_tilde {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for c in layer.codes() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedLayer> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(6).ok() != Some(&QZ_MAGIC[..]) {
        return format_err("bad QZ magic");
    }
    let version = r.u8()?;
    if version != QZ_VERSION {
        return format_err(format!("unsupported QZ version {version}"));
    }
    let bits = r.u8()? as u32;
    if !(2..=16).contains(&bits) {
        return format_err(format!("bits must be in 2..=16, got {bits}"));
    }
    let (m, n, len) = dims(r.u64()?, r.u64()?)?;
    let scale = r.f64()?;
    let alpha = r.f64()?;
    let seed = r.u64()?;
    let mut shapes = [0usize; 4];
    for s in &mut shapes {
        *s = r.u32()? as usize;
    }
    // fixed part is 66 bytes; check the rest before allocating
    let expected = 4 * (m + n) + 8 * n + 2 * len;
    if bytes.len() - r.pos != expected {
        return format_err(format!(
            "body has {} bytes, expected {expected} for a {m}x{n} layer",
            bytes.len() - r.pos
        ));
    }
    let mut perm = |k: usize| -> Result<Permutation> {
        let mut p = Vec::with_capacity(k);
        for _ in 0..k {
            p.push(r.u32()? as usize);
        }
        Permutation::from_vec(p).map_err(|_| Error::Format("invalid permutation".into()))
    };
    let row_perm = perm(m)?;
    let col_perm = perm(n)?;
    let mut d_tilde = Vec::with_capacity(n);
    for _ in 0..n {
        d_tilde.push(r.f64()?);
    }
    let top = max_code(bits) as u16;
    let mut codes = Vec::with_capacity(len);
    for _ in 0..len {
        let c = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if c > top {
            return format_err(format!("code {c} out of range for {bits} bits"));
        }
        codes.push(c);
    }
    r.finish()?;
    let meta = IncoherenceMeta {
        seed,
        bits,
        alpha,
        scale,
        d_tilde,
        u_shapes: (shapes[0], shapes[1]),
        v_shapes: (shapes[2], shapes[3]),
        row_perm,
        col_perm,
    };
    meta.validate().map_err(|e| Error::Format(format!("invalid metadata: {e}")))?;
    QuantizedLayer::new(codes, meta)
}

pub fn read_quantized(path: impl AsRef<Path>) -> Result<QuantizedLayer> {
    decode_quantized(&fs::read(path)?)
}

pub fn write_quantized(layer: &QuantizedLayer, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_quantized(layer))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_layout() {
        let bytes = encode_matrix(&Matrix::from_rows(&[&[3.5]]));
        assert_eq!(bytes.len(), 49);
        assert_eq!(&bytes[..6], b"QMAT1\0");
        assert_eq!(bytes[6], 1);
        assert_eq!(bytes[7], 0);
        assert!(bytes[8..25].iter().all(|&b| b == 0));
        assert_eq!(&bytes[25..33], &1u64.to_le_bytes());
        assert_eq!(&bytes[33..41], &1u64.to_le_bytes());
        assert_eq!(&bytes[41..], &3.5f64.to_le_bytes());
    }

    #[test]
    fn identity_decodes() {
        let m = decode_matrix(&encode_matrix(&Matrix::identity(2))).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn malformed_qmat() {
        let good = encode_matrix(&Matrix::zeros(2, 4));
        // 7 payload values for a declared 2x4
        assert!(matches!(decode_matrix(&good[..good.len() - 8]), Err(Error::Format(_))));
        let mut extra = good.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_matrix(&extra), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_matrix(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[6] = 2;
        assert!(matches!(decode_matrix(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[41..49].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_matrix(&bad), Err(Error::Data(_))));
        assert!(matches!(decode_matrix(&good[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn calibration_examples() {
        let x = Matrix::from_rows(&[&[1.0, 0.0, 0.0]]);
        let h = hessian_from_calibration(&x).unwrap();
        assert_eq!(h.matrix(), &Matrix::from_fn(3, 3, |i, j| if i == 0 && j == 0 { 1.0 } else { 0.0 }));
        let h = hessian_from_calibration(&Matrix::identity(4)).unwrap();
        assert_eq!(h.matrix(), &Matrix::identity(4).scale(0.25));
        assert!(hessian_from_calibration(&Matrix::zeros(0, 3)).is_err());
    }
}
