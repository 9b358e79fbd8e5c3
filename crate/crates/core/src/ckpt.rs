//! Versioned binary checkpoint container: a config snapshot plus named
//! f64 tensors (little-endian), used for both model weights and
//! optimizer state.

use crate::error::{Error, Result};
use crate::tensor::NdArray;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"DCKP1\n";

pub fn save(path: &Path, config_text: &str, blobs: &[(String, NdArray)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    let cfg = config_text.as_bytes();
    w.write_all(&(cfg.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(cfg).map_err(io)?;
    w.write_all(&(blobs.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, arr) in blobs {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(nb).map_err(io)?;
        w.write_all(&(arr.rank() as u64).to_le_bytes()).map_err(io)?;
        for &d in arr.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in arr.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<(String, Vec<(String, NdArray)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    let bad = |p: &str| Error::format(path, p);

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        Ok(u64::from_le_bytes(b))
    };
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg).map_err(io)?;
    let config_text =
        String::from_utf8(cfg).map_err(|_| bad("config snapshot is not valid UTF-8"))?;

    let n = read_u64(&mut r)? as usize;
    let mut blobs = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u64(&mut r)? as usize;
        if name_len > 1 << 16 {
            return Err(bad("blob name length is implausible"));
        }
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb).map_err(io)?;
        let name = String::from_utf8(nb).map_err(|_| bad("blob name is not valid UTF-8"))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(bad("blob rank is implausible"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let count: usize = shape.iter().product();
        if count > 1 << 30 {
            return Err(bad("blob size is implausible"));
        }
        let mut data = vec![0.0f64; count];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            *v = f64::from_le_bytes(b);
        }
        blobs.push((name, NdArray::from_vec(&shape, data)));
    }
    Ok((config_text, blobs))
}
