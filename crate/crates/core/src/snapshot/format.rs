//! SDMS v1: one span per file, little-endian.
//!
//! ```text
//! 0   magic "SDMS"
//! 4   u32 version (= 1)
//! 8   u32 d, t_kept, B, p, i, L, n_register, cls_index
//! 40  u8 dtype (0 = f32)
//! 41  u8 flags (bit0 anchor present, bit1 mlp_tap present)
//! 42  zero padding up to 64
//! 64  X_i .. X_{i+p}, then anchor, then mlp_tap
//! ```
//!
//! Every array is `d · t_kept · B` f32 values at index `(b·t_kept + τ)·d + f`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{SnapshotSpan, SpanDims};
use crate::{Error, Result, Scalar};

pub const MAGIC: [u8; 4] = *b"SDMS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

const DTYPE_F32: u8 = 0;
const FLAG_ANCHOR: u8 = 0b01;
const FLAG_MLP_TAP: u8 = 0b10;

#[derive(Debug, Clone, Copy)]
pub struct ReadOptions {
    /// Reject NaN and infinite payload values.
    pub strict: bool,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self { strict: true }
    }
}

/// Writes `span` as SDMS and returns the number of bytes emitted.
pub fn write_span<T: Scalar, W: Write>(span: &SnapshotSpan<T>, mut sink: W) -> Result<usize> {
    let dims = span.dims();
    dims.validate()?;
    let field = |v: usize, name: &str| -> Result<u32> {
        u32::try_from(v).map_err(|_| Error::validation(format!("{name} = {v} does not fit in u32")))
    };

    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(&MAGIC);
    header[4..8].copy_from_slice(&VERSION.to_le_bytes());
    let fields = [
        field(dims.d, "d")?,
        field(dims.t_kept(), "t_kept")?,
        field(dims.images, "B")?,
        field(dims.p, "p")?,
        field(dims.i, "i")?,
        field(dims.depth, "L")?,
        field(dims.n_register, "n_register")?,
        field(dims.cls_index, "cls_index")?,
    ];
    for (k, v) in fields.iter().enumerate() {
        header[8 + 4 * k..12 + 4 * k].copy_from_slice(&v.to_le_bytes());
    }
    header[40] = DTYPE_F32;
    let mut flags = 0u8;
    if span.anchor().is_some() {
        flags |= FLAG_ANCHOR;
    }
    if span.mlp_tap().is_some() {
        flags |= FLAG_MLP_TAP;
    }
    header[41] = flags;
    sink.write_all(&header)?;

    let mut written = HEADER_LEN;
    let arrays = span
        .states()
        .iter()
        .chain(span.anchor())
        .chain(span.mlp_tap());
    let mut buf = Vec::new();
    for m in arrays {
        buf.clear();
        buf.reserve(m.len() * 4);
        // Column-major storage already matches the file index order.
        for v in m.iter() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len();
    }
    sink.flush()?;
    Ok(written)
}

pub fn write_span_file<T: Scalar>(span: &SnapshotSpan<T>, path: impl AsRef<Path>) -> Result<usize> {
    let f = File::create(path)?;
    write_span(span, BufWriter::new(f))
}

fn read_u32(h: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([h[at], h[at + 1], h[at + 2], h[at + 3]])
}

fn read_array<R: Read>(src: &mut R, d: usize, cols: usize, name: &str) -> Result<DMatrix<f32>> {
    let mut bytes = vec![0u8; d * cols * 4];
    src.read_exact(&mut bytes).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Truncated {
            array: name.to_string(),
        },
        _ => Error::Io(e),
    })?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(DMatrix::from_vec(d, cols, values))
}

/// Reads one SDMS span; trailing bytes are rejected.
pub fn read_span<R: Read>(mut src: R, opts: ReadOptions) -> Result<SnapshotSpan<f32>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match src.read(&mut header[got..])? {
            0 => break,
            n => got += n,
        }
    }
    if got < 4 || header[0..4] != MAGIC {
        let mut found = [0u8; 4];
        found[..got.min(4)].copy_from_slice(&header[..got.min(4)]);
        return Err(Error::BadMagic { found });
    }
    if got < HEADER_LEN {
        return Err(Error::Truncated {
            array: "header".into(),
        });
    }
    let version = read_u32(&header, 4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let f: Vec<usize> = (0..8)
        .map(|k| read_u32(&header, 8 + 4 * k) as usize)
        .collect();
    let (d, t_kept, images, p, i, depth, n_register, cls_index) =
        (f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7]);
    if header[40] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(header[40]));
    }
    let flags = header[41];
    if flags & !(FLAG_ANCHOR | FLAG_MLP_TAP) != 0 {
        return Err(Error::validation(format!("unknown flag bits {flags:#04b}")));
    }
    let dims = SpanDims {
        d,
        t: t_kept + n_register,
        images,
        p,
        i,
        depth,
        n_register,
        cls_index,
    };
    dims.validate()?;
    let cols = dims.columns();

    let mut states = Vec::with_capacity(p + 1);
    for q in 0..=p {
        states.push(read_array(
            &mut src,
            d,
            cols,
            &format!("layer {} (X_{{i+{q}}})", i + q),
        )?);
    }
    let anchor = if flags & FLAG_ANCHOR != 0 {
        Some(read_array(&mut src, d, cols, "anchor")?)
    } else {
        None
    };
    let mlp_tap = if flags & FLAG_MLP_TAP != 0 {
        Some(read_array(&mut src, d, cols, "mlp_tap")?)
    } else {
        None
    };

    let mut rest = Vec::new();
    src.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::TrailingBytes(rest.len()));
    }

    let span = SnapshotSpan::new(dims, states, anchor, mlp_tap)?;
    if opts.strict {
        if let Some((array, index)) = span.first_non_finite() {
            return Err(Error::NonFinite { array, index });
        }
    }
    Ok(span)
}

pub fn read_span_file(path: impl AsRef<Path>, opts: ReadOptions) -> Result<SnapshotSpan<f32>> {
    let f = File::open(path)?;
    read_span(BufReader::new(f), opts)
}
