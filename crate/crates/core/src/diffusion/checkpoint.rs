//! `DDPM1` checkpoints: magic, schedule constants, class count, image shape,
//! step-embedding width, then the noise network and its EMA shadow, each
//! with its own schema.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ddpm::Ddpm;
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::model::codec::{read_f64, read_model, read_u32, write_f64, write_model, write_u32};

const MAGIC: &[u8; 5] = b"DDPM1";

pub fn write_ddpm<W: Write>(w: &mut W, ddpm: &Ddpm) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, ddpm.schedule.timesteps())?;
    write_f64(w, ddpm.schedule.beta_start())?;
    write_f64(w, ddpm.schedule.beta_end())?;
    write_u32(w, ddpm.classes)?;
    write_u32(w, ddpm.image_shape.len())?;
    for &d in &ddpm.image_shape {
        write_u32(w, d)?;
    }
    write_u32(w, ddpm.time_dim)?;
    write_model(w, &ddpm.noise_net)?;
    write_model(w, &ddpm.ema_net)
}

pub fn read_ddpm<R: Read>(r: &mut R) -> Result<Ddpm> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a DDPM1 checkpoint".into()));
    }
    let timesteps = read_u32(r)?;
    let beta_start = read_f64(r)?;
    let beta_end = read_f64(r)?;
    let schedule = DiffusionSchedule::linear(timesteps, beta_start, beta_end)
        .map_err(|e| Error::Format(e.to_string()))?;
    let classes = read_u32(r)?;
    let rank = read_u32(r)?;
    if rank > 8 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let image_shape = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    let time_dim = read_u32(r)?;
    let noise_net = read_model(r)?;
    let ema_net = read_model(r)?;
    if !noise_net.same_schema(&ema_net) {
        return Err(Error::Format("EMA network schema differs from the noise network".into()));
    }
    Ok(Ddpm {
        noise_net,
        ema_net,
        schedule,
        classes,
        image_shape,
        time_dim,
    })
}

pub fn write_ddpm_file(path: &Path, ddpm: &Ddpm) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ddpm(&mut w, ddpm)?;
    w.flush()?;
    Ok(())
}

pub fn read_ddpm_file(path: &Path) -> Result<Ddpm> {
    read_ddpm(&mut BufReader::new(File::open(path)?))
}
