//! Binary parameter snapshots.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        7 bytes  "WMPGNN1"
//! layer_count  u32
//! per layer    u32 input_width, u32 output_width, u8 activation tag
//! param_count  u64
//! parameters   param_count x f64
//! ```

use std::io::{Read, Write};

use super::{Activation, LayerSpec, Network};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"WMPGNN1";

fn read_array<const N: usize>(reader: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    reader.read_exact(&mut buf)?;
    Ok(buf)
}

impl Network {
    pub fn save(&self, mut writer: impl Write) -> Result<()> {
        writer.write_all(MAGIC)?;
        writer.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            writer.write_all(&(layer.input_width as u32).to_le_bytes())?;
            writer.write_all(&(layer.output_width as u32).to_le_bytes())?;
            writer.write_all(&[layer.activation.tag()])?;
        }
        writer.write_all(&(self.parameters.len() as u64).to_le_bytes())?;
        for p in &self.parameters {
            writer.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(mut reader: impl Read) -> Result<Network> {
        let magic: [u8; 7] = read_array(&mut reader)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let layer_count = u32::from_le_bytes(read_array(&mut reader)?) as usize;
        let mut layers = Vec::with_capacity(layer_count.min(1024));
        for _ in 0..layer_count {
            let input_width = u32::from_le_bytes(read_array(&mut reader)?) as usize;
            let output_width = u32::from_le_bytes(read_array(&mut reader)?) as usize;
            let [tag] = read_array::<1>(&mut reader)?;
            let activation = Activation::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("unknown activation tag {tag}")))?;
            layers.push(LayerSpec::new(input_width, output_width, activation));
        }
        let count = u64::from_le_bytes(read_array(&mut reader)?) as usize;
        let expected: usize = layers.iter().map(LayerSpec::parameter_count).sum();
        if count != expected {
            return Err(Error::Format(format!(
                "header declares {count} parameters but layers need {expected}"
            )));
        }
        let mut parameters = Vec::with_capacity(count);
        for _ in 0..count {
            parameters.push(f64::from_le_bytes(read_array(&mut reader)?));
        }
        Network::from_parameters(layers, parameters)
    }
}
