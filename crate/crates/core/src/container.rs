//! Named-array container files (safetensors layout) with string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

/// A dense little-endian array.
#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
}

impl Array {
    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F32 { shape, .. } | Array::F64 { shape, .. } => shape,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        Ok(match t.dtype() {
            DType::F64 => Array::F64 { shape, data: flat.to_vec1()? },
            _ => Array::F32 { shape, data: flat.to_dtype(DType::F32)?.to_vec1()? },
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(match self {
            Array::F32 { shape, data } => Tensor::from_vec(data.clone(), shape.as_slice(), &Device::Cpu)?,
            Array::F64 { shape, data } => Tensor::from_vec(data.clone(), shape.as_slice(), &Device::Cpu)?,
        })
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            Array::F32 { data, .. } => data.clone(),
            Array::F64 { data, .. } => data.iter().map(|v| *v as f32).collect(),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Array::F32 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Array::F64 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            Array::F32 { .. } => Dtype::F32,
            Array::F64 { .. } => Dtype::F64,
        }
    }
}

/// Arrays plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub arrays: BTreeMap<String, Array>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn insert(&mut self, name: impl Into<String>, a: Array) {
        self.arrays.insert(name.into(), a);
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Data(format!("array {name:?} missing from container")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>)> = self.arrays.iter().map(|(k, a)| (k.clone(), a.bytes())).collect();
        let views = self
            .arrays
            .iter()
            .zip(&bytes)
            .map(|((k, a), (_, b))| Ok((k.clone(), TensorView::new(a.dtype(), a.shape().to_vec(), b)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        Ok(safetensors::tensor::serialize(views, Some(meta))?)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(buf)?;
        let (_, header) = SafeTensors::read_metadata(buf)?;
        let metadata = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let raw = view.data();
            let a = match view.dtype() {
                Dtype::F32 => Array::F32 {
                    shape,
                    data: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                },
                Dtype::F64 => Array::F64 {
                    shape,
                    data: raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                },
                other => return Err(Error::Data(format!("array {name:?} has unsupported dtype {other:?}"))),
            };
            arrays.insert(name, a);
        }
        Ok(Self { arrays, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }
}
