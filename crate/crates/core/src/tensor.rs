//! Tensor values and the shape contracts models declare for them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    /// Wire code used by the model-server protocol.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U8),
            _ => None,
        }
    }
}

/// One axis of a [`TensorSpec`]. `Batch` stands for the batch axis whose
/// extent is chosen at serving time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dim {
    Batch,
    Fixed(u32),
}

impl Serialize for Dim {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Dim::Batch => s.serialize_str("batch"),
            Dim::Fixed(n) => s.serialize_u32(*n),
        }
    }
}

impl<'de> Deserialize<'de> for Dim {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(Dim::Fixed(n)),
            Raw::Str(s) if s == "batch" => Ok(Dim::Batch),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "expected positive integer or \"batch\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorSpec {
    pub dtype: DType,
    pub dims: Vec<Dim>,
}

impl TensorSpec {
    pub fn new(dtype: DType, dims: Vec<Dim>) -> Self {
        Self { dtype, dims }
    }

    /// At most one batch axis, every concrete axis at least 1.
    pub fn validate(&self) -> Result<(), String> {
        let batch_dims = self.dims.iter().filter(|d| **d == Dim::Batch).count();
        if batch_dims > 1 {
            return Err(format!("{batch_dims} batch dims, at most one allowed"));
        }
        if self.dims.contains(&Dim::Fixed(0)) {
            return Err("concrete dims must be >= 1".into());
        }
        Ok(())
    }

    /// Shape of a single item: the declared dims with the batch axis removed.
    pub fn item_dims(&self) -> Vec<u32> {
        self.dims
            .iter()
            .filter_map(|d| match d {
                Dim::Batch => None,
                Dim::Fixed(n) => Some(*n),
            })
            .collect()
    }

    pub fn accepts(&self, t: &Tensor) -> bool {
        t.dtype() == self.dtype && t.dims == self.item_dims()
    }
}

impl fmt::Display for TensorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dtype = match self.dtype {
            DType::F32 => "f32",
            DType::U8 => "u8",
        };
        write!(f, "{dtype}:")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match d {
                Dim::Batch => f.write_str("batch")?,
                Dim::Fixed(n) => write!(f, "{n}")?,
            }
        }
        Ok(())
    }
}

/// Parses the CLI notation `f32:batch,64,64,3`.
impl FromStr for TensorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (dtype, dims) = s
            .split_once(':')
            .ok_or_else(|| format!("expected <dtype>:<dims>, got {s:?}"))?;
        let dtype = match dtype {
            "f32" => DType::F32,
            "u8" => DType::U8,
            other => return Err(format!("unknown dtype {other:?}")),
        };
        let dims = dims
            .split(',')
            .map(|d| match d.trim() {
                "batch" => Ok(Dim::Batch),
                n => n
                    .parse::<u32>()
                    .map(Dim::Fixed)
                    .map_err(|e| format!("bad dim {n:?}: {e}")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let spec = TensorSpec { dtype, dims };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Tensor {
    /// Builds a tensor, checking that the element count matches the dims.
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Self, String> {
        let expected: usize = dims.iter().map(|&d| d as usize).product();
        if expected != data.len() {
            return Err(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<u32>, values: Vec<f32>) -> Result<Self, String> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn u8(dims: Vec<u32>, values: Vec<u8>) -> Result<Self, String> {
        Self::new(dims, TensorData::U8(values))
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Bitwise equality; unlike `PartialEq` this treats NaN payloads as equal
    /// to themselves, which is what wire round-trips need.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.dims != other.dims {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parse_and_display() {
        let spec: TensorSpec = "f32:batch,64,64,3".parse().unwrap();
        assert_eq!(spec.dims[0], Dim::Batch);
        assert_eq!(spec.item_dims(), vec![64, 64, 3]);
        assert_eq!(spec.to_string(), "f32:batch,64,64,3");
    }

    #[test]
    fn spec_rejects_two_batch_dims_and_zero() {
        assert!("f32:batch,batch".parse::<TensorSpec>().is_err());
        assert!("u8:0,3".parse::<TensorSpec>().is_err());
    }

    #[test]
    fn spec_json_uses_batch_string() {
        let spec: TensorSpec = "u8:batch,4".parse().unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"dtype":"u8","dims":["batch",4]}"#);
        let back: TensorSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn tensor_checks_element_count() {
        assert!(Tensor::u8(vec![2, 2], vec![0; 3]).is_err());
        let t = Tensor::u8(vec![2, 2], vec![0; 4]).unwrap();
        let spec: TensorSpec = "u8:batch,2,2".parse().unwrap();
        assert!(spec.accepts(&t));
    }
}
