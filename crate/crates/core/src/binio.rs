//! Little-endian primitives shared by the weight, probe, label and
//! hidden-state file formats.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn read_err(what: &str, e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::format(format!("truncated file while reading {what}"))
    } else {
        Error::format(format!("cannot read {what}: {e}"))
    }
}

pub(crate) fn write_err(e: io::Error) -> Error {
    Error::format(format!("write failed: {e}"))
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(|e| read_err("magic header", e))?;
    if &found != magic {
        return Err(Error::format(format!(
            "bad magic header: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&found)
        )));
    }
    Ok(())
}

pub(crate) fn read_u8(r: &mut impl Read, what: &str) -> Result<u8> {
    r.read_u8().map_err(|e| read_err(what, e))
}

pub(crate) fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    r.read_u16::<LittleEndian>().map_err(|e| read_err(what, e))
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(|e| read_err(what, e))
}

pub(crate) fn read_bytes(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| read_err(what, e))?;
    Ok(buf)
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)
        .map_err(|e| read_err(what, e))?;
    Ok(out)
}

pub(crate) fn read_name(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u16(r, what)? as usize;
    let bytes = read_bytes(r, len, what)?;
    String::from_utf8(bytes).map_err(|_| Error::format(format!("{what} is not valid UTF-8")))
}

pub(crate) fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::format(format!("name `{name}` too long")))?;
    w.write_u16::<LittleEndian>(len).map_err(write_err)?;
    w.write_all(name.as_bytes()).map_err(write_err)
}

pub(crate) fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_u16::<LittleEndian>(v).map_err(write_err)
}

pub(crate) fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(format!("value {v} exceeds u32")))?;
    w.write_u32::<LittleEndian>(v).map_err(write_err)
}

pub(crate) fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    for &v in data {
        w.write_f32::<LittleEndian>(v).map_err(write_err)?;
    }
    Ok(())
}

/// Tensor record: name (u16 length + UTF-8), rank u8, dims u32 each, then
/// row-major f32 values.
pub(crate) fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_name(w, name)?;
    let rank = u8::try_from(t.dims.len()).map_err(|_| Error::format("tensor rank exceeds 255"))?;
    w.write_u8(rank).map_err(write_err)?;
    for &d in &t.dims {
        write_u32(w, d)?;
    }
    write_f32s(w, &t.data)
}

pub(crate) fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name = read_name(r, "tensor name")?;
    let rank = read_u8(r, "tensor rank")? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r, "tensor dims")? as usize);
    }
    let n: usize = dims.iter().product();
    let data = read_f32s(r, n, &format!("data of tensor `{name}`"))?;
    Ok((name, Tensor { dims, data }))
}

/// Fails unless the reader is exhausted.
pub(crate) fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::format("trailing bytes after end of record")),
        Err(e) => Err(Error::format(format!("cannot read: {e}"))),
    }
}
