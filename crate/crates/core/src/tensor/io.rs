//! Raw tensor files: little-endian `u64` rank, `u64` dims, then row-major
//! `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Result, Tensor, TensorError};

// Refuse absurd headers before allocating.
const MAX_RANK: u64 = 16;
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_raw<S: Real, W: Write>(mut out: W, t: &Tensor<S>) -> Result<()> {
    out.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&v.f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raw<S: Real, R: Read>(mut input: R) -> Result<Tensor<S>> {
    let mut word = [0u8; 8];
    input.read_exact(&mut word)?;
    let rank = u64::from_le_bytes(word);
    if rank > MAX_RANK {
        return Err(TensorError::Format(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: u64 = 1;
    for _ in 0..rank {
        input.read_exact(&mut word)?;
        let d = u64::from_le_bytes(word);
        count = count
            .checked_mul(d)
            .filter(|&c| c <= MAX_ELEMENTS)
            .ok_or_else(|| TensorError::Format("element count overflows".into()))?;
        shape.push(d as usize);
    }
    let mut data = Vec::with_capacity(count as usize);
    for _ in 0..count {
        input.read_exact(&mut word)?;
        data.push(S::of(f64::from_le_bytes(word)));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(TensorError::Format("trailing bytes after payload".into()));
    }
    Tensor::from_vec(&shape, data)
}

pub fn write_raw_file<S: Real>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_raw(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_raw_file<S: Real>(path: &Path) -> Result<Tensor<S>> {
    read_raw(BufReader::new(File::open(path)?))
}
