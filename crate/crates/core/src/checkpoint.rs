//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "AVSC"
//! format_version   u32
//! metadata_len     u64
//! metadata         metadata_len bytes of UTF-8 JSON (keys sorted)
//! tensor_count     u32
//! per tensor:
//!   name_len       u32
//!   name           name_len bytes UTF-8
//!   dtype          u8       0 = f32
//!   ndim           u32
//!   shape          ndim x u64
//!   payload        product(shape) x f32
//! ```

use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{ClassifierHead, EncoderModel, ModelConfig};

pub const MAGIC: &[u8; 4] = b"AVSC";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointContainer {
    pub metadata: Value,
    pub tensors: Vec<NamedTensor>,
}

impl CheckpointContainer {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        self.tensors.push(NamedTensor { name, shape, data });
        Ok(())
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Result<()> {
        self.push(name, shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let metadata: Value = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut c = CheckpointContainer::new(metadata);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            c.push(name, shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Packs every model tensor plus `metadata`. The keys `model_config` and
/// `classifier` are filled in from the model.
pub fn model_checkpoint(model: &EncoderModel, mut metadata: Map<String, Value>) -> Result<CheckpointContainer> {
    metadata.insert("model_config".into(), serde_json::to_value(model.config())?);
    metadata.insert("classifier".into(), serde_json::to_value(model.classifier())?);
    let mut c = CheckpointContainer::new(Value::Object(metadata));
    for t in model.params().tensors() {
        c.push_f64(t.name.clone(), t.shape.clone(), &t.data)?;
    }
    Ok(c)
}

/// Rebuilds the model stored by [`model_checkpoint`].
pub fn model_from_checkpoint(c: &CheckpointContainer) -> Result<EncoderModel> {
    let cfg_value = c
        .metadata
        .get("model_config")
        .ok_or_else(|| Error::Checkpoint("metadata has no `model_config`".into()))?;
    let config: ModelConfig = serde_json::from_value(cfg_value.clone())?;
    config.validate()?;
    let head: Option<ClassifierHead> = match c.metadata.get("classifier") {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v.clone())?),
    };
    let lookup = |name: &str| {
        c.get(name)
            .map(|t| (t.shape.clone(), t.data.iter().map(|&v| v as f64).collect()))
    };
    EncoderModel::from_tensors(config, head.map(|h| (h.mode, h.classes)), &lookup)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn sample() -> CheckpointContainer {
        let mut c = CheckpointContainer::new(json!({"stage": 2, "seed": 7, "b": [1.5, -0.25]}));
        c.push("a.weight", vec![2, 3], vec![0.5, -1.0, 2.0, 3.25, 0.0, -0.0]).unwrap();
        c.push("a.bias", vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        c
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"AVSC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    }

    #[test]
    fn save_load_save_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.avsc");
        sample().save(&p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let loaded = CheckpointContainer::load(&p).unwrap();
        assert_eq!(loaded, sample());
        loaded.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(CheckpointContainer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CheckpointContainer::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(CheckpointContainer::from_bytes(&extra).is_err());
    }

    #[test]
    fn duplicate_and_misshapen_tensors_rejected() {
        let mut c = sample();
        assert!(c.push("a.bias", vec![1], vec![0.0]).is_err());
        assert!(c.push("c", vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn model_round_trip_is_forward_identical() {
        use crate::audio::AudioClip;
        use crate::model::HeadMode;
        let mut m = EncoderModel::new(ModelConfig::tiny(), 9).unwrap();
        m.attach_classifier(HeadMode::SigmoidBce, vec!["a".into(), "b".into()], 3).unwrap();
        let clip = AudioClip::new((0..4000).map(|i| ((i as f32) * 0.01).sin()).collect(), 16_000, "c").unwrap();
        let c = model_checkpoint(&m, Map::new()).unwrap();
        let back = model_from_checkpoint(&CheckpointContainer::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.params().tensors(), m.params().tensors());
        assert_eq!(back.forward(&clip, None).unwrap().hidden, m.forward(&clip, None).unwrap().hidden);
        assert_eq!(back.classify(&clip).unwrap(), m.classify(&clip).unwrap());
        let mut missing = c.clone();
        missing.tensors.retain(|t| t.name != "mask_embedding");
        assert!(model_from_checkpoint(&missing).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 1..64), meta in -1e9f64..1e9) {
            let mut c = CheckpointContainer::new(json!({"x": meta}));
            let n = values.len();
            c.push("t", vec![n], values).unwrap();
            let bytes = c.to_bytes().unwrap();
            let back = CheckpointContainer::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert_eq!(back, c);
        }
    }
}
