//! Little-endian binary container for named float32 tensors.
//!
//! ```text
//! magic        8 bytes  "SHFLCKPT"
//! version      u32
//! header_len   u32, then that many bytes of UTF-8 header text
//! count        u32
//! count x entry:
//!     name_len u32, name bytes
//!     dtype    u8   (0 = float32)
//!     ndim     u32, then ndim x u64 extents
//!     offset   u64  byte offset of the values inside the payload
//! payload      raw float32 values, entries back to back
//! ```
//!
//! For checkpoints the header is the model configuration in its `key = value`
//! form; standalone tensor files use the same container.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::config::ModelConfig;
use crate::model::network::Model;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"SHFLCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub header: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::checkpoint(what, "file is truncated"));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::checkpoint(what, "text is not UTF-8"))
    }
}

impl Checkpoint {
    pub fn new(header: impl Into<String>, tensors: Vec<(String, Tensor<f32>)>) -> Self {
        Checkpoint {
            version: VERSION,
            header: header.into(),
            tensors,
        }
    }

    /// Every parameter and buffer of `model`, cast to float32.
    pub fn from_model<T: Element>(model: &Model<T>) -> Self {
        let tensors = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.cast::<f32>()))
            .collect();
        Self::new(model.cfg.to_text(), tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn config(&self) -> Result<ModelConfig> {
        ModelConfig::parse(&self.header).map_err(|e| Error::checkpoint("<config>", e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.numel() as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "<magic>")? != MAGIC {
            return Err(Error::checkpoint("<magic>", "not a checkpoint file"));
        }
        let version = r.u32("<version>")?;
        if version != VERSION {
            return Err(Error::checkpoint(
                "<version>",
                format!("unsupported version {version} (expected {VERSION})"),
            ));
        }
        let header_len = r.u32("<header>")? as usize;
        let header = r.string(header_len, "<header>")?;
        let count = r.u32("<table>")? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32("<table>")? as usize;
            let name = r.string(name_len, "<table>")?;
            let dtype = r.u8(&name)?;
            if dtype != DTYPE_F32 {
                return Err(Error::checkpoint(&name, format!("unsupported dtype code {dtype}")));
            }
            let ndim = r.u32(&name)? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64(&name)?;
            table.push((name, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut tensors = Vec::with_capacity(table.len());
        let mut expected_offset = 0u64;
        for (name, shape, offset) in table {
            if offset != expected_offset {
                return Err(Error::checkpoint(
                    &name,
                    format!("offset {offset}, expected {expected_offset}"),
                ));
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(numel) = numel.filter(|n| n.checked_mul(4).is_some()) else {
                return Err(Error::checkpoint(&name, format!("shape {shape:?} overflows")));
            };
            let start = offset as usize;
            let Some(raw) = payload.get(start..start + 4 * numel) else {
                return Err(Error::checkpoint(&name, "payload is truncated"));
            };
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::checkpoint(&name, e.to_string()))?;
            expected_offset += 4 * numel as u64;
            tensors.push((name, tensor));
        }
        if expected_offset as usize != payload.len() {
            return Err(Error::checkpoint(
                "<payload>",
                format!("{} trailing bytes", payload.len() - expected_offset as usize),
            ));
        }
        Ok(Checkpoint {
            version,
            header,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copy the stored values into `model`, requiring exactly its parameter set
    /// with matching shapes.
    pub fn load_into<T: Element>(&self, model: &mut Model<T>) -> Result<()> {
        let mut seen = vec![false; self.tensors.len()];
        for p in model.params_mut() {
            let Some(i) = self.tensors.iter().position(|(n, _)| n == &p.name) else {
                return Err(Error::checkpoint(&p.name, "missing from checkpoint"));
            };
            let t = &self.tensors[i].1;
            if t.shape() != p.value.shape() {
                return Err(Error::checkpoint(
                    &p.name,
                    format!(
                        "shape {:?} does not match the configured {:?}",
                        t.shape(),
                        p.value.shape()
                    ),
                ));
            }
            p.value = t.cast();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::checkpoint(
                &self.tensors[i].0,
                "not a parameter of the configured model",
            ));
        }
        Ok(())
    }

    /// Rebuild the model the checkpoint describes.
    pub fn to_model<T: Element>(&self) -> Result<Model<T>> {
        let cfg = self.config()?;
        let mut model = Model::new(&cfg, &mut Rng::new(0))?;
        self.load_into(&mut model)?;
        Ok(model)
    }
}

pub fn save_checkpoint<T: Element>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<Model<T>> {
    Checkpoint::load(path)?.to_model()
}

/// Write one named tensor in the checkpoint container.
pub fn write_tensor_file(path: impl AsRef<Path>, name: &str, tensor: &Tensor<f32>) -> Result<()> {
    Checkpoint::new("", vec![(name.to_string(), tensor.clone())]).save(path)
}

/// Read a file holding exactly one tensor.
pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<(String, Tensor<f32>)> {
    let mut ck = Checkpoint::load(path)?;
    if ck.tensors.len() != 1 {
        return Err(Error::checkpoint(
            "<table>",
            format!("expected one tensor, found {}", ck.tensors.len()),
        ));
    }
    Ok(ck.tensors.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::build_variant;

    fn small() -> Model<f32> {
        let cfg = ModelConfig {
            channels: 8,
            depths: vec![2],
            window: 2,
            head_dim: 4,
            num_classes: 3,
            resolution: 8,
            nwc_padding: crate::layers::NwcPadding::Same,
            ..build_variant("T").unwrap()
        };
        let mut m = Model::new(&cfg, &mut Rng::new(1)).unwrap();
        m.randomize(&mut Rng::new(2), 0.1);
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = small();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&model, &a).unwrap();
        let loaded: Model<f32> = load_checkpoint(&a).unwrap();
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let img = Rng::new(3).normal_tensor::<f32>(&[1, 3, 8, 8], 1.0).unwrap();
        assert_eq!(model.predict(&img).unwrap(), loaded.predict(&img).unwrap());
    }

    #[test]
    fn tampered_shape_names_the_parameter() {
        let mut ck = Checkpoint::from_model(&small());
        let i = ck.tensors.iter().position(|(n, _)| n == "head.weight").unwrap();
        ck.tensors[i].1 = Tensor::zeros([3, 32]).unwrap();
        let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        match ck.to_model::<f32>() {
            Err(Error::Checkpoint { param, .. }) => assert_eq!(param, "head.weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_and_extra_parameters() {
        let mut ck = Checkpoint::from_model(&small());
        let removed = ck.tensors.remove(5).0;
        match ck.to_model::<f32>() {
            Err(Error::Checkpoint { param, message }) => {
                assert_eq!(param, removed);
                assert!(message.contains("missing"));
            }
            other => panic!("{other:?}"),
        }
        let mut ck = Checkpoint::from_model(&small());
        ck.tensors.push(("stray".into(), Tensor::zeros([1]).unwrap()));
        assert!(matches!(ck.to_model::<f32>(), Err(Error::Checkpoint { param, .. }) if param == "stray"));
    }

    #[test]
    fn corrupted_bytes_rejected() {
        let bytes = Checkpoint::from_model(&small()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { param, .. }) if param == "<version>"));
        let mut longer = bytes;
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let t = Tensor::from_fn([2, 3], |i| i as f32 * 0.5).unwrap();
        write_tensor_file(&p, "input", &t).unwrap();
        assert_eq!(read_tensor_file(&p).unwrap(), ("input".to_string(), t));
    }
}
