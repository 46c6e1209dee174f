//! Binary checkpoint format.
//!
//! Little-endian layout:
//!   magic "AVAE" | version u32 | descriptor text (u32 length + UTF-8)
//!   | tensor count u32 | per tensor: name (u32 length + UTF-8), rank u32,
//!   dims u32[rank], data f64[product(dims)]
//!
//! Round-trips are bit-exact; the same container also carries raw image
//! datasets (a single rank-4 tensor named "images").

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ModelDescriptor, ModelParameters};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AVAE";
pub const VERSION: u32 = 1;

/// Serialize named tensors plus a descriptor string.
pub fn write_tensors(
    path: &Path,
    descriptor: &str,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_string(&mut w, descriptor)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        write_string(&mut w, name)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read back a descriptor string and named tensors.
pub fn read_tensors(path: &Path) -> Result<(String, BTreeMap<String, Tensor>)> {
    let mut r = Cursor::new(path)?;
    let mut magic = [0u8; 4];
    r.read(&mut magic)?;
    if &magic != MAGIC {
        return Err(r.err(format!(
            "bad magic {magic:?}, expected {:?}",
            MAGIC
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported format version {version}")));
    }
    let descriptor = r.string()?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.err(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        tensors.insert(name, Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))?);
    }
    Ok((descriptor, tensors))
}

/// Persist trained model weights.
pub fn save_model(path: &Path, params: &ModelParameters) -> Result<()> {
    write_tensors(path, &params.descriptor().to_text(), params.tensors())
}

/// Load model weights, validating tensor names and shapes against the
/// stored architecture descriptor.
pub fn load_model(path: &Path) -> Result<ModelParameters> {
    let (descriptor, tensors) = read_tensors(path)?;
    let desc = ModelDescriptor::from_text(&descriptor)?;
    ModelParameters::from_parts(desc, tensors)
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Buffered reader that tracks the byte offset for parse errors.
struct Cursor {
    reader: BufReader<File>,
    offset: u64,
    path: String,
}

impl Cursor {
    fn new(path: &Path) -> Result<Self> {
        Ok(Cursor {
            reader: BufReader::new(File::open(path)?),
            offset: 0,
            path: path.display().to_string(),
        })
    }

    fn err(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset: self.offset,
            message,
        }
    }

    fn read(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.reader.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(self.err(format!(
                "file truncated: wanted {} more bytes",
                buf.len()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(self.err(format!("implausible string length {len}")));
        }
        let mut b = vec![0u8; len];
        self.read(&mut b)?;
        String::from_utf8(b).map_err(|e| self.err(format!("invalid UTF-8: {e}")))
    }
}
