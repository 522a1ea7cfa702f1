//! `TMC1` named-tensor container.
//!
//! Layout (little-endian): magic `TMC1`, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u64` rows, `u64` cols, `rows*cols` `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor2;
use crate::error::{Result, TmlpError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMC1";

pub fn write_checkpoint<'a, I>(path: &Path, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor2)>,
{
    let tensors: Vec<_> = tensors.into_iter().collect();
    let file = File::create(path).map_err(|e| TmlpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| TmlpError::io(path, e));
    write(CHECKPOINT_MAGIC)?;
    write(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        write(&(name.len() as u32).to_le_bytes())?;
        write(name.as_bytes())?;
        write(&(t.nrows() as u64).to_le_bytes())?;
        write(&(t.ncols() as u64).to_le_bytes())?;
        for v in t.iter() {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| TmlpError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor2)>> {
    let file = File::open(path).map_err(|e| TmlpError::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| TmlpError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| TmlpError::io(path, e));

    let mut magic = [0u8; 4];
    read(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("missing TMC1 magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        read(&mut b4)?;
        let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
        read(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        read(&mut b8)?;
        let rows = u64::from_le_bytes(b8) as usize;
        read(&mut b8)?;
        let cols = u64::from_le_bytes(b8) as usize;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            read(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        let t = Tensor2::from_shape_vec((rows, cols), values).map_err(|_| bad("bad tensor shape"))?;
        out.push((name, t));
    }
    Ok(out)
}
