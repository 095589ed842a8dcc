//! The tensor container every other on-disk format builds on.
//!
//! Layout: the magic bytes `HMT1\n`, one ASCII header line
//! `ndim d0 d1 ... dn dtype` terminated by `\n` with dtype one of `f32`,
//! `f64`, `u8`, then the raw payload, little-endian and row-major.
//! Round-trips are bit-exact, which the rest of the tooling leans on for
//! reproducibility checks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use hmseg_core::Tensor;

pub const MAGIC: &[u8; 5] = b"HMT1\n";

/// Longest header line accepted when reading, so a file that is not
/// actually a container fails fast instead of being scanned for a newline.
const MAX_HEADER: u64 = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::F64(_) => "f64",
            Payload::U8(_) => "u8",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Container {
    /// Interpret an f64 container as a tensor.
    pub fn into_tensor(self) -> Result<Tensor> {
        match self.payload {
            Payload::F64(data) => Tensor::new(self.shape, data).context("container shape rejected"),
            other => bail!("expected an f64 container, found {}", other.dtype()),
        }
    }
}

pub fn write<W: Write>(w: &mut W, shape: &[usize], payload: &Payload) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != payload.len() {
        bail!(
            "shape {shape:?} holds {numel} elements but the payload has {}",
            payload.len()
        );
    }
    w.write_all(MAGIC)?;
    let mut header = shape.len().to_string();
    for d in shape {
        header.push(' ');
        header.push_str(&d.to_string());
    }
    header.push(' ');
    header.push_str(payload.dtype());
    header.push('\n');
    w.write_all(header.as_bytes())?;
    match payload {
        Payload::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Payload::F64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Payload::U8(v) => w.write_all(v)?,
    }
    Ok(())
}

pub fn write_tensor<W: Write>(w: &mut W, tensor: &Tensor) -> Result<()> {
    write(w, tensor.shape(), &Payload::F64(tensor.data().to_vec()))
}

/// Read one container, consuming exactly its bytes so containers can be
/// concatenated in a larger stream.
pub fn read<R: BufRead>(r: &mut R) -> Result<Container> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .context("reading container magic")?;
    if &magic != MAGIC {
        bail!("bad container magic {:?}", String::from_utf8_lossy(&magic));
    }
    let header = read_header_line(r)?;
    let mut tokens = header.split_whitespace();
    let ndim: usize = tokens
        .next()
        .context("empty container header")?
        .parse()
        .context("container header rank")?;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let dim: usize = tokens
            .next()
            .with_context(|| format!("header promises {ndim} dims, stops after {i}"))?
            .parse()
            .with_context(|| format!("container header dim {i}"))?;
        shape.push(dim);
    }
    let dtype = tokens.next().context("container header missing dtype")?;
    if tokens.next().is_some() {
        bail!("trailing tokens in container header {header:?}");
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .context("container shape overflows")?;
    let payload = match dtype {
        "f32" => Payload::F32(read_scalars(r, numel, 4, |b| {
            f32::from_le_bytes(b.try_into().expect("4-byte chunk"))
        })?),
        "f64" => Payload::F64(read_scalars(r, numel, 8, |b| {
            f64::from_le_bytes(b.try_into().expect("8-byte chunk"))
        })?),
        "u8" => {
            let mut buf = vec![0u8; numel];
            r.read_exact(&mut buf)
                .context("container payload truncated")?;
            Payload::U8(buf)
        }
        other => bail!("unknown container dtype {other:?}"),
    };
    Ok(Container { shape, payload })
}

fn read_scalars<R: Read, T>(
    r: &mut R,
    numel: usize,
    width: usize,
    decode: impl Fn(&[u8]) -> T,
) -> Result<Vec<T>> {
    let mut buf = vec![0u8; numel.checked_mul(width).context("payload size overflows")?];
    r.read_exact(&mut buf)
        .context("container payload truncated")?;
    Ok(buf.chunks_exact(width).map(decode).collect())
}

fn read_header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = Vec::new();
    let n = r
        .by_ref()
        .take(MAX_HEADER)
        .read_until(b'\n', &mut line)
        .context("reading container header")?;
    if n == 0 {
        bail!("container ends before its header");
    }
    if line.last() != Some(&b'\n') {
        bail!("container header unterminated within {MAX_HEADER} bytes");
    }
    line.pop();
    String::from_utf8(line).context("container header is not UTF-8")
}

pub fn write_file(path: &Path, shape: &[usize], payload: &Payload) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write(&mut w, shape, payload)?;
    w.flush()?;
    Ok(())
}

/// Read a file holding exactly one container; trailing bytes are an error.
pub fn read_file(path: &Path) -> Result<Container> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = BufReader::new(file);
    let container =
        read(&mut r).with_context(|| format!("reading container {}", path.display()))?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        bail!(
            "trailing bytes after container payload in {}",
            path.display()
        );
    }
    Ok(container)
}
