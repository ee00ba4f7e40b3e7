//! Named-array container files (safetensors layout: little-endian tensors
//! behind a JSON header, plus a string metadata block).

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::geometry::Point3;

pub const FORMAT_VERSION: &str = "1";

#[derive(Default)]
pub struct ArrayWriter {
    arrays: Vec<(String, Dtype, Vec<usize>, Vec<u8>)>,
    metadata: HashMap<String, String>,
}

impl ArrayWriter {
    pub fn new(kind: &str) -> Self {
        let mut w = Self::default();
        w.meta("format", kind);
        w.meta("version", FORMAT_VERSION);
        w
    }

    pub fn meta(&mut self, key: &str, value: impl Into<String>) -> &mut Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn f32s(&mut self, name: &str, shape: Vec<usize>, values: impl IntoIterator<Item = f32>) -> &mut Self {
        let bytes = values.into_iter().flat_map(f32::to_le_bytes).collect();
        self.arrays.push((name.to_string(), Dtype::F32, shape, bytes));
        self
    }

    pub fn f64s(&mut self, name: &str, shape: Vec<usize>, values: impl IntoIterator<Item = f64>) -> &mut Self {
        let bytes = values.into_iter().flat_map(f64::to_le_bytes).collect();
        self.arrays.push((name.to_string(), Dtype::F64, shape, bytes));
        self
    }

    pub fn i32s(&mut self, name: &str, shape: Vec<usize>, values: impl IntoIterator<Item = i32>) -> &mut Self {
        let bytes = values.into_iter().flat_map(i32::to_le_bytes).collect();
        self.arrays.push((name.to_string(), Dtype::I32, shape, bytes));
        self
    }

    pub fn u8s(&mut self, name: &str, shape: Vec<usize>, values: impl IntoIterator<Item = u8>) -> &mut Self {
        self.arrays
            .push((name.to_string(), Dtype::U8, shape, values.into_iter().collect()));
        self
    }

    pub fn points(&mut self, name: &str, pts: &[Point3]) -> &mut Self {
        self.f32s(name, vec![pts.len(), 3], pts.iter().flatten().copied())
    }

    pub fn indices(&mut self, name: &str, idx: &[usize]) -> &mut Self {
        self.i32s(name, vec![idx.len()], idx.iter().map(|&i| i as i32))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut views = Vec::with_capacity(self.arrays.len());
        for (name, dtype, shape, bytes) in &self.arrays {
            let view = TensorView::new(*dtype, shape.clone(), bytes)
                .map_err(|e| Error::parse(name.clone(), e.to_string()))?;
            views.push((name.clone(), view));
        }
        safetensors::serialize(views, Some(self.metadata.clone()))
            .map_err(|e| Error::parse("header", e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub struct ArrayReader {
    bytes: Vec<u8>,
    metadata: HashMap<String, String>,
}

impl ArrayReader {
    pub fn open(path: &Path, kind: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(bytes, kind)
    }

    pub fn from_bytes(bytes: Vec<u8>, kind: &str) -> Result<Self> {
        let (_, header) =
            SafeTensors::read_metadata(&bytes).map_err(|e| Error::parse("header", e.to_string()))?;
        let metadata = header.metadata().clone().unwrap_or_default();
        // Validate offsets once up front.
        SafeTensors::deserialize(&bytes).map_err(|e| Error::parse("header", e.to_string()))?;
        let reader = Self { bytes, metadata };
        let format = reader.meta("format")?;
        if format != kind {
            return Err(Error::parse("format", format!("expected `{kind}`, found `{format}`")));
        }
        let version = reader.meta("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::parse("version", format!("unsupported version `{version}`")));
        }
        Ok(reader)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::parse(key, "missing metadata entry"))
    }

    pub fn meta_opt(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn has(&self, name: &str) -> bool {
        SafeTensors::deserialize(&self.bytes)
            .map(|t| t.tensor(name).is_ok())
            .unwrap_or(false)
    }

    pub fn names(&self) -> Vec<String> {
        SafeTensors::deserialize(&self.bytes)
            .map(|t| t.names().into_iter().map(str::to_string).collect())
            .unwrap_or_default()
    }

    fn view(&self, name: &str, dtype: Dtype) -> Result<(Vec<usize>, &[u8])> {
        let tensors =
            SafeTensors::deserialize(&self.bytes).map_err(|e| Error::parse("header", e.to_string()))?;
        let view = tensors
            .tensor(name)
            .map_err(|_| Error::parse(name, "missing array"))?;
        if view.dtype() != dtype {
            return Err(Error::parse(
                name,
                format!("expected dtype {dtype:?}, found {:?}", view.dtype()),
            ));
        }
        Ok((view.shape().to_vec(), view.data()))
    }

    pub fn f32s(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let (shape, data) = self.view(name, Dtype::F32)?;
        let values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((shape, values))
    }

    pub fn f64s(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (shape, data) = self.view(name, Dtype::F64)?;
        let values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((shape, values))
    }

    pub fn i32s(&self, name: &str) -> Result<(Vec<usize>, Vec<i32>)> {
        let (shape, data) = self.view(name, Dtype::I32)?;
        let values = data
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((shape, values))
    }

    pub fn u8s(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        let (shape, data) = self.view(name, Dtype::U8)?;
        Ok((shape, data.to_vec()))
    }

    /// An `n x 3` float32 array.
    pub fn points(&self, name: &str) -> Result<Vec<Point3>> {
        let (shape, values) = self.f32s(name)?;
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::parse(name, format!("expected shape [n, 3], found {shape:?}")));
        }
        Ok(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// A rank-1 int32 array of length `expected` (when given).
    pub fn i32_vec(&self, name: &str, expected: Option<usize>) -> Result<Vec<i32>> {
        let (shape, values) = self.i32s(name)?;
        if shape.len() != 1 {
            return Err(Error::parse(name, format!("expected rank 1, found shape {shape:?}")));
        }
        if let Some(n) = expected {
            if values.len() != n {
                return Err(Error::parse(name, format!("expected {n} entries, found {}", values.len())));
            }
        }
        Ok(values)
    }

    pub fn index_vec(&self, name: &str, bound: usize) -> Result<Vec<usize>> {
        self.i32_vec(name, None)?
            .into_iter()
            .map(|v| {
                if v < 0 || v as usize >= bound {
                    Err(Error::parse(name, format!("index {v} outside [0, {bound})")))
                } else {
                    Ok(v as usize)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_kind_and_missing_field_are_named() {
        let mut w = ArrayWriter::new("thing");
        w.i32s("a", vec![2], [1, 2]);
        let bytes = w.to_bytes().unwrap();
        let err = ArrayReader::from_bytes(bytes.clone(), "other").err().unwrap();
        assert!(err.to_string().contains("format"));
        let r = ArrayReader::from_bytes(bytes, "thing").unwrap();
        assert_eq!(r.i32_vec("a", Some(2)).unwrap(), vec![1, 2]);
        assert!(r.i32_vec("b", None).unwrap_err().to_string().contains("`b`"));
        assert!(r.f32s("a").unwrap_err().to_string().contains("dtype"));
    }

    #[test]
    fn garbage_is_a_header_error() {
        let err = ArrayReader::from_bytes(vec![1, 2, 3], "x").err().unwrap();
        assert!(matches!(err, Error::Parse { .. }));
    }
}
