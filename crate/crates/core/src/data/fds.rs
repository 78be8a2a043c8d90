//! `FDS1` flat binary datasets.
//!
//! Layout, all little endian: magic `FDS1`, `u32` class count, `u32` sample
//! count, `u32` rank followed by one `u32` per dimension, then per sample the
//! `f32` pixels, a `u16` label and a `u8` provenance (0 real, 1 synthetic).
//! Soft labels are not stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, Provenance, Sample};
use crate::error::{Error, Result};
use crate::model::codec::{read_u32, write_u32};

const MAGIC: &[u8; 4] = b"FDS1";

pub fn write_fds<W: Write>(w: &mut W, dataset: &Dataset) -> Result<()> {
    if dataset.class_count > u16::MAX as usize + 1 {
        return Err(Error::Format("too many classes for a u16 label".into()));
    }
    w.write_all(MAGIC)?;
    write_u32(w, dataset.class_count)?;
    write_u32(w, dataset.len())?;
    write_u32(w, dataset.shape.len())?;
    for &d in &dataset.shape {
        write_u32(w, d)?;
    }
    for s in &dataset.samples {
        for &p in &s.image {
            w.write_all(&p.to_le_bytes())?;
        }
        w.write_all(&(s.label as u16).to_le_bytes())?;
        w.write_all(&[match s.provenance {
            Provenance::Real => 0,
            Provenance::Synthetic => 1,
        }])?;
    }
    Ok(())
}

pub fn read_fds<R: Read>(r: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an FDS1 file".into()));
    }
    let classes = read_u32(r)?;
    let count = read_u32(r)?;
    let rank = read_u32(r)?;
    if rank > 8 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    let per: usize = shape.iter().product();
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    let mut buf = vec![0u8; per * 4];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        let image = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut lb = [0u8; 2];
        r.read_exact(&mut lb)?;
        let mut pb = [0u8; 1];
        r.read_exact(&mut pb)?;
        let provenance = match pb[0] {
            0 => Provenance::Real,
            1 => Provenance::Synthetic,
            other => return Err(Error::Format(format!("unknown provenance byte {other}"))),
        };
        samples.push(Sample {
            image,
            label: u16::from_le_bytes(lb) as usize,
            provenance,
            soft_label: None,
        });
    }
    Dataset::new(classes, shape, samples)
}

pub fn write_fds_file(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fds(&mut w, dataset)?;
    w.flush()?;
    Ok(())
}

pub fn read_fds_file(path: &Path) -> Result<Dataset> {
    read_fds(&mut BufReader::new(File::open(path)?))
}
