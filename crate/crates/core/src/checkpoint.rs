//! Binary model checkpoints: versioned header, then each parameter tensor as
//! shape followed by little-endian f64 data, in `ModelParams::tensors` order.

use std::io::{Read, Write};
use std::path::Path;

use crate::captioner::{ModelDims, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PROPHLAB";
const FORMAT_VERSION: u32 = 1;

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for dim in [
        params.dims.vocab,
        params.dims.embed,
        params.dims.feat,
        params.dims.hidden,
        params.dims.attn,
    ] {
        file.write_all(&(dim as u32).to_le_bytes())?;
    }
    for tensor in params.tensors() {
        file.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &extent in tensor.shape() {
            file.write_all(&(extent as u32).to_le_bytes())?;
        }
        for &value in tensor.data() {
            file.write_all(&value.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic string".into()));
    }
    let version = read_u32(&mut file)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let dims = ModelDims {
        vocab: read_u32(&mut file)? as usize,
        embed: read_u32(&mut file)? as usize,
        feat: read_u32(&mut file)? as usize,
        hidden: read_u32(&mut file)? as usize,
        attn: read_u32(&mut file)? as usize,
    };

    // Shapes come from a template with the same dims; the file must agree.
    let mut params = ModelParams::init(dims, 0);
    let names = params.tensor_names();
    for (tensor, name) in params.tensors_mut().into_iter().zip(names) {
        let rank = read_u32(&mut file)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut file)? as usize);
        }
        if shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} does not match expected {:?}",
                shape,
                tensor.shape()
            )));
        }
        for value in tensor.data_mut() {
            let mut buf = [0u8; 8];
            file.read_exact(&mut buf)?;
            *value = f64::from_le_bytes(buf);
        }
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            rest.len()
        )));
    }
    Ok(params)
}

fn read_u32(file: &mut std::fs::File) -> Result<u32> {
    let mut buf = [0u8; 4];
    file.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
