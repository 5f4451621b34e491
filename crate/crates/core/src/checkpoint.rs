//! Model checkpoints: a directory holding the architecture as text, the
//! parameters as one flat little-endian f64 blob, and a manifest mapping
//! tensor names to value offsets within the blob.

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::nn::state::layer_tensors_mut;
use crate::nn::{Mode, ModelSpec, ModelState};

pub const SPEC_FILE: &str = "model.spec";
pub const BLOB_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Writes `model.spec`, `params.bin`, and `manifest.csv` into `dir`
/// (created if missing). Tensors are laid out in the model's fixed named
/// order; manifest offsets and lengths count f64 values, not bytes.
pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SPEC_FILE), state.spec.to_text())?;

    let mut blob: Vec<u8> = Vec::new();
    let mut manifest =
        csv::Writer::from_path(dir.join(MANIFEST_FILE)).map_err(|e| CoreError::format(e.to_string()))?;
    manifest
        .write_record(["name", "offset", "len"])
        .map_err(|e| CoreError::format(e.to_string()))?;
    let mut offset = 0usize;
    for (name, tensor, _) in state.named_tensors() {
        manifest
            .write_record([name, offset.to_string(), tensor.numel().to_string()])
            .map_err(|e| CoreError::format(e.to_string()))?;
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.numel();
    }
    manifest.flush()?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

/// Reads a checkpoint directory back into a model in eval mode. The
/// manifest must agree exactly with the architecture's tensor names,
/// offsets, and sizes, and the blob length must match.
pub fn load_checkpoint(dir: &Path) -> Result<ModelState> {
    let spec_text = fs::read_to_string(dir.join(SPEC_FILE))?;
    let spec = ModelSpec::from_text(&spec_text)?;
    let mut state = ModelState::init(&spec, 0)?;

    let mut reader = csv::Reader::from_path(dir.join(MANIFEST_FILE))
        .map_err(|e| CoreError::format(e.to_string()))?;
    let mut entries: Vec<(String, usize, usize)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CoreError::format(e.to_string()))?;
        if record.len() != 3 {
            return Err(CoreError::format("manifest rows must be name,offset,len"));
        }
        let offset: usize = record[1]
            .parse()
            .map_err(|_| CoreError::format(format!("bad manifest offset {:?}", &record[1])))?;
        let len: usize = record[2]
            .parse()
            .map_err(|_| CoreError::format(format!("bad manifest length {:?}", &record[2])))?;
        entries.push((record[0].to_string(), offset, len));
    }

    let expected: Vec<(String, usize, usize)> = {
        let mut offset = 0usize;
        state
            .named_tensors()
            .into_iter()
            .map(|(name, t, _)| {
                let e = (name, offset, t.numel());
                offset += t.numel();
                e
            })
            .collect()
    };
    if entries != expected {
        return Err(CoreError::format(
            "manifest does not match the architecture's tensor layout",
        ));
    }

    let blob = fs::read(dir.join(BLOB_FILE))?;
    let total_values: usize = expected.iter().map(|(_, _, len)| len).sum();
    if blob.len() != total_values * 8 {
        return Err(CoreError::format(format!(
            "parameter blob is {} bytes, expected {}",
            blob.len(),
            total_values * 8
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::format("parameter blob contains non-finite values"));
    }

    let mut cursor = 0usize;
    for lp in state.params.iter_mut() {
        for tensor in layer_tensors_mut(lp) {
            let n = tensor.numel();
            tensor
                .data_mut()
                .copy_from_slice(&values[cursor..cursor + n]);
            cursor += n;
        }
    }
    Ok(state.with_mode(Mode::Eval))
}
