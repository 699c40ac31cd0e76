//! Binary model format.
//!
//! ```text
//! magic      "3DSR"
//! version    u32
//! depth      u32
//! channels   u32
//! kernel     u32
//! residual   u8
//! layers     for each layer: weights (c_out·c_in·k³ f32), bias (c_out f32)
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Conv3dLayer, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::volume::write_atomic;

pub const MODEL_MAGIC: &[u8; 4] = b"3DSR";
pub const MODEL_FORMAT_VERSION: u32 = 1;

fn write_model(net: &Network<f32>, w: &mut dyn Write) -> std::io::Result<()> {
    let cfg = net.config();
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(MODEL_FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(cfg.depth as u32)?;
    w.write_u32::<LittleEndian>(cfg.channels as u32)?;
    w.write_u32::<LittleEndian>(cfg.kernel as u32)?;
    w.write_u8(u8::from(cfg.residual))?;
    for layer in net.layers() {
        for &v in layer.weights.iter().chain(&layer.bias) {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn model_to_bytes(net: &Network<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    write_model(net, &mut out).expect("writing to a Vec cannot fail");
    out
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated model: {e}"))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format(format!("bad model magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let depth = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let channels = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let kernel = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let residual = match r.read_u8().map_err(truncated)? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format(format!(
                "residual flag must be 0 or 1, got {other}"
            )))
        }
    };
    let config = NetworkConfig {
        depth,
        channels,
        kernel,
        residual,
    };
    config.validate()?;
    let expected = config.param_count() * 4;
    let remaining = bytes.len() - r.position() as usize;
    if remaining != expected {
        return Err(Error::Format(format!(
            "model body is {remaining} bytes, config needs {expected}"
        )));
    }
    let k3 = kernel.pow(3);
    let mut layers = Vec::with_capacity(depth);
    for c in config.channel_chain().windows(2) {
        let mut weights = vec![0f32; c[0] * c[1] * k3];
        let mut bias = vec![0f32; c[1]];
        r.read_f32_into::<LittleEndian>(&mut weights)
            .map_err(truncated)?;
        r.read_f32_into::<LittleEndian>(&mut bias)
            .map_err(truncated)?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Format("model contains non-finite parameters".into()));
        }
        layers.push(Conv3dLayer::new(c[0], c[1], kernel, weights, bias)?);
    }
    Network::from_layers(config, layers)
}

pub fn save_model(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |w| write_model(net, w))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
