//! Model checkpoint: versioned header, JSON hyperparameter block, then named
//! parameter tensors in declaration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::backbone::{Backbone, ModelParams};
use super::{BackboneConfig, ModelError};
use crate::tensor::io as tio;

const MAGIC: &[u8; 8] = b"SAUGCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &Backbone<f32>) -> Result<(), ModelError> {
    let file = File::create(path).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let hyper = serde_json::to_vec(&model.cfg).expect("config serializes");
        w.write_all(&(hyper.len() as u32).to_le_bytes())?;
        w.write_all(&hyper)?;
        for (name, tensor) in model.params.named() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            tio::write_tensor(w, tensor)?;
        }
        Ok(())
    };
    write(&mut w).map_err(|e| ModelError::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Backbone<f32>, ModelError> {
    let file = File::open(path).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    read(&mut r, &mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    read(&mut r, &mut b4)?;
    let hyper_len = u32::from_le_bytes(b4) as usize;
    let mut hyper = vec![0u8; hyper_len];
    read(&mut r, &mut hyper)?;
    let cfg: BackboneConfig =
        serde_json::from_slice(&hyper).map_err(|e| ModelError::Checkpoint(e.to_string()))?;

    // read tensors into a zero-initialized parameter set, checking names
    let mut params = ModelParams::<f32>::zeros(&cfg);
    for (name, tensor) in params.named_mut() {
        read(&mut r, &mut b4)?;
        let name_len = u32::from_le_bytes(b4) as usize;
        let mut name_buf = vec![0u8; name_len];
        read(&mut r, &mut name_buf)?;
        let got = String::from_utf8(name_buf).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if got != name {
            return Err(ModelError::Checkpoint(format!(
                "parameter order mismatch: found {got}, expected {name}"
            )));
        }
        let loaded: crate::tensor::Tensor<f32> =
            tio::read_tensor(&mut r).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if loaded.shape() != tensor.shape() {
            return Err(ModelError::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                loaded.shape(),
                tensor.shape()
            )));
        }
        tensor.data_mut().copy_from_slice(loaded.data());
    }
    Ok(Backbone::new(cfg, params))
}

fn read<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))
}
