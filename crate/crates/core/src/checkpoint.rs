//! Binary checkpoint format for [`DenoiserParams`].
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"CLDM1"
//! u64 x 7    d_in, d_time, d_class, d_hidden, d_latent, classes, activation (0 = silu, 1 = identity)
//! f64 ...    class_embed, encoder.{0,1,2}.{weight,bias}, decoder.{0,1,2}.{weight,bias}
//! ```
//!
//! Matrices are row-major; weights are stored `(fan_in, fan_out)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::denoiser::{Activation, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CLDM1";

pub fn write_params<W: Write>(params: &DenoiserParams, mut w: W) -> Result<()> {
    let c = &params.config;
    w.write_all(MAGIC)?;
    for v in [
        c.d_in,
        c.d_time,
        c.d_class,
        c.d_hidden,
        c.d_latent,
        c.classes,
    ] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&c.activation.code().to_le_bytes())?;
    for tensor in params.tensors() {
        for v in tensor {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_params<R: Read>(mut r: R) -> Result<DenoiserParams> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for checkpoint magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = usize::try_from(read_u64(&mut r)?)
            .map_err(|_| Error::Format("dimension overflows usize".into()))?;
    }
    let activation = Activation::from_code(read_u64(&mut r)?)?;
    let config = DenoiserConfig {
        d_in: dims[0],
        d_time: dims[1],
        d_class: dims[2],
        d_hidden: dims[3],
        d_latent: dims[4],
        classes: dims[5],
        activation,
    };
    let mut params = DenoiserParams::zeros(config)
        .map_err(|e| Error::Format(format!("invalid checkpoint config: {e}")))?;
    let mut buf = [0u8; 8];
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated checkpoint tensors".into()))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
    }
    Ok(params)
}

pub fn save(params: &DenoiserParams, path: &Path) -> Result<()> {
    write_params(params, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<DenoiserParams> {
    read_params(BufReader::new(File::open(path)?))
}
