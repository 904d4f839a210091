//! Versioned binary checkpoint container: magic "SKD1", a JSON metadata
//! block (config echo, normalization statistics, provenance), and a named
//! tensor table with 32-bit data. Round trips are bit-exact.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams, ParamTensor};
use crate::error::{Error, Result};
use crate::polsar::FeatureNorm;

const MAGIC: &[u8; 4] = b"SKD1";
const VERSION: u32 = 1;

/// Everything a checkpoint needs besides the weights: the architecture, the
/// training-split normalization, and how the model is meant to be fed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub norm: FeatureNorm,
    /// "band1", "band2", or "dual".
    pub input: String,
    /// Look count used for rectification draws.
    pub looks: u32,
    /// Whether sample rectification is active for this model.
    pub sdsr: bool,
    pub seed: u64,
}

pub fn save(path: &Path, params: &ModelParams<f32>, meta: &CheckpointMeta) -> Result<()> {
    params.validate_layout()?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta_json = serde_json::to_vec(meta)?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    w.write_all(&meta_json)?;
    w.write_all(&(params.tensors.len() as u32).to_le_bytes())?;
    for t in &params.tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[u8::from(t.trainable)])?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "{}: truncated at offset {}: wanted {n} more bytes, {} remain",
                self.path,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path: path.display().to_string() };
    if r.take(4)? != MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic at offset 0, expected \"SKD1\"",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::format(format!("{}: tensor name not UTF-8: {e}", path.display())))?;
        let trainable = r.take(1)?[0] != 0;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(ParamTensor { name, shape, data, trainable });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!(
            "{}: {} trailing bytes after tensor table",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    let params = ModelParams { config: meta.config.clone(), tensors };
    params.validate_layout()?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::build_forward;
    use crate::nn::model::ForwardOutput;
    use crate::nn::Tape;
    use rand::Rng;
    use tempfile::tempdir;

    fn meta(config: ModelConfig) -> CheckpointMeta {
        CheckpointMeta {
            config,
            norm: FeatureNorm { mean: vec![0.0; 9], std: vec![1.0; 9] },
            input: "band1".into(),
            looks: 4,
            sdsr: true,
            seed: 7,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.skd");
        let cfg = ModelConfig::new(9, 3);
        let params = ModelParams::<f32>::init(cfg.clone(), 5).unwrap();
        save(&path, &params, &meta(cfg)).unwrap();
        let bytes1 = fs::read(&path).unwrap();
        let (loaded, m) = load(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(m.looks, 4);
        save(&path, &loaded, &m).unwrap();
        assert_eq!(bytes1, fs::read(&path).unwrap());
    }

    #[test]
    fn saved_model_forwards_bit_identically() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.skd");
        let cfg = ModelConfig {
            in_channels: 9,
            window: 6,
            patch: 3,
            conv_channels: [4, 6, 6],
            embed_dim: 8,
            depth: 1,
            mlp_ratio: 2,
            num_classes: 3,
        };
        let params = ModelParams::<f32>::init(cfg.clone(), 9).unwrap();
        let mut rng = crate::seed::stream(1, &[70]);
        let input: Vec<f32> = (0..cfg.window * cfg.window * 9)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();

        let mut tape = Tape::new(false);
        let g = build_forward(&mut tape, &params, input.clone(), 1, false).unwrap();
        let before = ForwardOutput::from_graph(&tape, &g);

        save(&path, &params, &meta(cfg)).unwrap();
        let (loaded, _) = load(&path).unwrap();
        let mut tape = Tape::new(false);
        let g = build_forward(&mut tape, &loaded, input, 1, false).unwrap();
        let after = ForwardOutput::from_graph(&tape, &g);
        assert_eq!(before, after);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.skd");
        let cfg = ModelConfig::new(9, 3);
        let params = ModelParams::<f32>::init(cfg.clone(), 5).unwrap();
        save(&path, &params, &meta(cfg)).unwrap();

        let good = fs::read(&path).unwrap();
        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("truncated"));

        let mut bad = good.clone();
        bad[0] = b'Z';
        fs::write(&path, &bad).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("bad magic"));

        let mut extra = good;
        extra.push(0);
        fs::write(&path, &extra).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("trailing"));
    }
}
