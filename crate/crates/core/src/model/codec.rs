//! Little-endian binary encoding of a model's schema and values.

use std::io::{Read, Write};

use super::state::{Activation, Layer, LayerOp, ModelBuilder, ModelState};
use crate::error::{Error, Result};

pub(crate) fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn write_op<W: Write>(w: &mut W, op: &LayerOp) -> Result<()> {
    match *op {
        LayerOp::Dense { inputs, outputs } => {
            w.write_all(&[0])?;
            write_u32(w, inputs)?;
            write_u32(w, outputs)?;
        }
        LayerOp::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            w.write_all(&[1])?;
            write_u32(w, in_channels)?;
            write_u32(w, out_channels)?;
            write_u32(w, kernel)?;
        }
        LayerOp::BatchNorm {
            features,
            momentum,
            eps,
        } => {
            w.write_all(&[2])?;
            write_u32(w, features)?;
            write_f64(w, momentum)?;
            write_f64(w, eps)?;
        }
        LayerOp::Activation(a) => {
            let code = match a {
                Activation::Relu => 0,
                Activation::Tanh => 1,
                Activation::Silu => 2,
            };
            w.write_all(&[3, code])?;
        }
        LayerOp::GlobalAvgPool => w.write_all(&[4])?,
    }
    Ok(())
}

fn read_op<R: Read>(r: &mut R) -> Result<LayerOp> {
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    Ok(match tag[0] {
        0 => LayerOp::Dense {
            inputs: read_u32(r)?,
            outputs: read_u32(r)?,
        },
        1 => LayerOp::Conv2d {
            in_channels: read_u32(r)?,
            out_channels: read_u32(r)?,
            kernel: read_u32(r)?,
        },
        2 => LayerOp::BatchNorm {
            features: read_u32(r)?,
            momentum: read_f64(r)?,
            eps: read_f64(r)?,
        },
        3 => {
            r.read_exact(&mut tag)?;
            LayerOp::Activation(match tag[0] {
                0 => Activation::Relu,
                1 => Activation::Tanh,
                2 => Activation::Silu,
                t => return Err(Error::Format(format!("unknown activation {t}"))),
            })
        }
        4 => LayerOp::GlobalAvgPool,
        t => return Err(Error::Format(format!("unknown layer tag {t}"))),
    })
}

/// Writes the schema (input shape, representation tap, layers) and then
/// every parameter value as f64.
pub fn write_model<W: Write>(w: &mut W, model: &ModelState) -> Result<()> {
    write_u32(w, model.input_shape.len())?;
    for d in &model.input_shape {
        write_u32(w, *d)?;
    }
    write_u32(w, model.representation_layer)?;
    write_u32(w, model.layers.len())?;
    for layer in &model.layers {
        write_str(w, &layer.name)?;
        write_op(w, &layer.op)?;
    }
    for (_, p) in model.params() {
        for v in &p.values {
            write_f64(w, *v)?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<ModelState> {
    let rank = read_u32(r)?;
    let input_shape = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    let representation_layer = read_u32(r)?;
    let count = read_u32(r)?;
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        specs.push((read_str(r)?, read_op(r)?));
    }
    let mut builder = ModelBuilder::new(input_shape);
    for (name, op) in &specs {
        builder = match *op {
            LayerOp::Dense { outputs, .. } => builder.dense(name, outputs),
            LayerOp::Conv2d {
                out_channels,
                kernel,
                ..
            } => builder.conv(name, out_channels, kernel),
            LayerOp::BatchNorm { .. } => builder.batch_norm(name),
            LayerOp::Activation(a) => builder.activation(name, a),
            LayerOp::GlobalAvgPool => builder.global_avg_pool(name),
        };
    }
    let mut model = builder.build(&mut crate::rng::stream(0, 0, 0, crate::rng::Purpose::Init))?;
    for (layer, (_, op)) in model.layers.iter_mut().zip(&specs) {
        if layer.op != *op {
            set_op(layer, op)?;
        }
    }
    if representation_layer >= model.layers.len() {
        return Err(Error::Format("representation layer out of range".into()));
    }
    model.representation_layer = representation_layer;
    for layer in &mut model.layers {
        for p in &mut layer.params {
            for v in &mut p.values {
                *v = read_f64(r)?;
            }
        }
    }
    Ok(model)
}

fn set_op(layer: &mut Layer, op: &LayerOp) -> Result<()> {
    match (&mut layer.op, op) {
        (
            LayerOp::BatchNorm {
                features,
                momentum,
                eps,
            },
            LayerOp::BatchNorm {
                features: f,
                momentum: m,
                eps: e,
            },
        ) if features == f => {
            *momentum = *m;
            *eps = *e;
            Ok(())
        }
        _ => Err(Error::Format(format!(
            "layer `{}` is inconsistent with its input shape",
            layer.name
        ))),
    }
}
