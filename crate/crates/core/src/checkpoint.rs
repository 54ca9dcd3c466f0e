//! Checkpoints and the on-disk tensor format.
//!
//! Tensor files use the safetensors byte layout (u64 little-endian header
//! length, JSON header, raw little-endian payload). Checkpoint structure lives
//! in a sidecar `<name>.manifest.json`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensorError, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{PmqError, Result};
use crate::matrix::Matrix;

pub const FORMAT_VERSION: u32 = 1;

/// Key under which this crate stores its JSON attributes in the safetensors
/// `__metadata__` map. A single key keeps the header byte-deterministic.
pub const METADATA_KEY: &str = "pmq";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    fn tag(self) -> Dtype {
        match self {
            DType::F32 => Dtype::F32,
            DType::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: String,
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
    pub has_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub version: u32,
    pub layers: Vec<LayerSpec>,
    pub dtype: DType,
}

impl ModelManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(PmqError::Manifest(format!(
                "unsupported version {}",
                self.version
            )));
        }
        let mut seen = HashSet::new();
        for (i, l) in self.layers.iter().enumerate() {
            if !seen.insert(l.id.as_str()) {
                return Err(PmqError::Manifest(format!("duplicate layer id `{}`", l.id)));
            }
            if i > 0 && self.layers[i - 1].d_out != l.d_in {
                return Err(PmqError::Manifest(format!(
                    "layer `{}` has d_in {} but previous layer emits {}",
                    l.id,
                    l.d_in,
                    self.layers[i - 1].d_out
                )));
            }
        }
        Ok(())
    }

    /// Architecture equality, ignoring storage dtype.
    pub fn same_architecture(&self, other: &ModelManifest) -> bool {
        self.layers == other.layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    /// `d_out × d_in`.
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
    pub activation: Activation,
}

impl Layer {
    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            id: self.id.clone(),
            d_in: self.d_in(),
            d_out: self.d_out(),
            activation: self.activation,
            has_bias: self.bias.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    layers: Vec<Layer>,
    dtype: DType,
}

impl Checkpoint {
    pub fn new(layers: Vec<Layer>, dtype: DType) -> Result<Self> {
        for l in &layers {
            if let Some(b) = &l.bias {
                if b.len() != l.d_out() {
                    return Err(PmqError::shape("checkpoint bias", l.d_out(), b.len()));
                }
            }
        }
        let ck = Checkpoint { layers, dtype };
        ck.manifest().validate()?;
        Ok(ck)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &Layer {
        &self.layers[idx]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            version: FORMAT_VERSION,
            layers: self.layers.iter().map(Layer::spec).collect(),
            dtype: self.dtype,
        }
    }

    /// Applies `f` to every weight and bias, producing a checkpoint with the
    /// same architecture.
    pub(crate) fn map_tensors(
        &self,
        mut f_weight: impl FnMut(usize, &Layer) -> Matrix,
        mut f_bias: impl FnMut(usize, &Layer) -> Option<Vec<f64>>,
    ) -> Checkpoint {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| Layer {
                id: l.id.clone(),
                weight: f_weight(i, l),
                bias: f_bias(i, l),
                activation: l.activation,
            })
            .collect();
        Checkpoint {
            layers,
            dtype: self.dtype,
        }
    }
}

/// Path of the manifest sidecar for a tensor file: `dir/name.safetensors`
/// maps to `dir/name.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

// ---------------------------------------------------------------------------
// raw tensor files

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    fn dtype(&self) -> Dtype {
        match self {
            TensorData::F64(_) => Dtype::F64,
            TensorData::F32(_) => Dtype::F32,
            TensorData::U8(_) => Dtype::U8,
            TensorData::I32(_) => Dtype::I32,
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
            TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_view(view: &TensorView<'_>) -> Option<TensorData> {
        let b = view.data();
        Some(match view.dtype() {
            Dtype::F64 => TensorData::F64(
                b.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F32 => TensorData::F32(
                b.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => TensorData::U8(b.to_vec()),
            Dtype::I32 => TensorData::I32(
                b.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl RawTensor {
    pub fn matrix(m: &Matrix, dtype: DType) -> Self {
        let data = match dtype {
            DType::F64 => TensorData::F64(m.data().to_vec()),
            DType::F32 => TensorData::F32(m.data().iter().map(|v| *v as f32).collect()),
        };
        RawTensor {
            shape: vec![m.rows(), m.cols()],
            data,
        }
    }

    pub fn vector(v: &[f64], dtype: DType) -> Self {
        let data = match dtype {
            DType::F64 => TensorData::F64(v.to_vec()),
            DType::F32 => TensorData::F32(v.iter().map(|x| *x as f32).collect()),
        };
        RawTensor {
            shape: vec![v.len()],
            data,
        }
    }

    fn dtype_name(&self) -> String {
        format!("{:?}", self.data.dtype())
    }

    /// Reads a float tensor of the expected storage dtype as f64 values.
    pub fn floats(&self, name: &str, expected: DType) -> Result<Vec<f64>> {
        let values: Vec<f64> = match (&self.data, expected) {
            (TensorData::F64(v), DType::F64) => v.clone(),
            (TensorData::F32(v), DType::F32) => v.iter().map(|x| *x as f64).collect(),
            _ => {
                return Err(PmqError::DtypeMismatch {
                    name: name.to_string(),
                    expected: format!("{:?}", expected.tag()),
                    found: self.dtype_name(),
                })
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PmqError::NonFinite("tensor file"));
        }
        Ok(values)
    }

    pub fn to_matrix(&self, name: &str, expected: DType) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(PmqError::shape("tensor rank", 2, self.shape.len()));
        }
        Matrix::from_vec(self.shape[0], self.shape[1], self.floats(name, expected)?)
    }
}

fn map_safetensors_error(e: SafeTensorError) -> PmqError {
    match e {
        SafeTensorError::HeaderTooSmall
        | SafeTensorError::InvalidHeaderLength
        | SafeTensorError::MetadataIncompleteBuffer
        | SafeTensorError::InvalidTensorView(..) => PmqError::TruncatedPayload(format!("{e:?}")),
        SafeTensorError::IoError(io) => PmqError::Io(io),
        other => PmqError::MalformedHeader(format!("{other:?}")),
    }
}

/// Serializes named tensors with an optional JSON attribute string.
pub fn encode_tensors(
    tensors: &BTreeMap<String, RawTensor>,
    attrs: Option<&str>,
) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            (
                name.clone(),
                t.data.dtype(),
                t.shape.clone(),
                t.data.to_le_bytes(),
            )
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, dt, shape, b)| {
            TensorView::new(*dt, shape.clone(), b)
                .map(|v| (name.clone(), v))
                .map_err(map_safetensors_error)
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = attrs.map(|a| HashMap::from([(METADATA_KEY.to_string(), a.to_string())]));
    safetensors::serialize(views, &meta).map_err(map_safetensors_error)
}

pub fn decode_tensors(buf: &[u8]) -> Result<(BTreeMap<String, RawTensor>, Option<String>)> {
    if buf.len() >= 8 {
        let n = u64::from_le_bytes(buf[..8].try_into().unwrap());
        if n.saturating_add(8) > buf.len() as u64 {
            return Err(PmqError::TruncatedPayload(format!(
                "header length {n} exceeds file size {}",
                buf.len()
            )));
        }
    }
    let st = SafeTensors::deserialize(buf).map_err(map_safetensors_error)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let data = TensorData::from_view(&view).ok_or_else(|| PmqError::DtypeMismatch {
            name: name.clone(),
            expected: "F64/F32/U8/I32".into(),
            found: format!("{:?}", view.dtype()),
        })?;
        out.insert(
            name,
            RawTensor {
                shape: view.shape().to_vec(),
                data,
            },
        );
    }
    let (_, meta) = SafeTensors::read_metadata(buf).map_err(map_safetensors_error)?;
    let attrs = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY).cloned());
    Ok((out, attrs))
}

pub fn write_tensor_file(
    path: &Path,
    tensors: &BTreeMap<String, RawTensor>,
    attrs: Option<&str>,
) -> Result<()> {
    let bytes = encode_tensors(tensors, attrs)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<(BTreeMap<String, RawTensor>, Option<String>)> {
    let buf = fs::read(path)?;
    decode_tensors(&buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<ModelManifest> {
    let text = fs::read_to_string(manifest_path(path))?;
    let m: ModelManifest =
        serde_json::from_str(&text).map_err(|e| PmqError::Manifest(e.to_string()))?;
    m.validate()?;
    Ok(m)
}

pub(crate) fn take_tensor<'a>(
    tensors: &'a BTreeMap<String, RawTensor>,
    name: &str,
) -> Result<&'a RawTensor> {
    tensors
        .get(name)
        .ok_or_else(|| PmqError::MissingTensor(name.to_string()))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for l in ck.layers() {
        tensors.insert(
            format!("{}.weight", l.id),
            RawTensor::matrix(&l.weight, ck.dtype),
        );
        if let Some(b) = &l.bias {
            tensors.insert(format!("{}.bias", l.id), RawTensor::vector(b, ck.dtype));
        }
    }
    write_tensor_file(path, &tensors, None)?;
    write_json(&manifest_path(path), &ck.manifest())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(path)?;
    let (tensors, _) = read_tensor_file(path)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for spec in &manifest.layers {
        let wname = format!("{}.weight", spec.id);
        let weight = take_tensor(&tensors, &wname)?.to_matrix(&wname, manifest.dtype)?;
        if weight.shape() != (spec.d_out, spec.d_in) {
            return Err(PmqError::Manifest(format!(
                "`{wname}` has shape {:?}, manifest says {:?}",
                weight.shape(),
                (spec.d_out, spec.d_in)
            )));
        }
        let bias = if spec.has_bias {
            let bname = format!("{}.bias", spec.id);
            let b = take_tensor(&tensors, &bname)?.floats(&bname, manifest.dtype)?;
            Some(b)
        } else {
            None
        };
        layers.push(Layer {
            id: spec.id.clone(),
            weight,
            bias,
            activation: spec.activation,
        });
    }
    Checkpoint::new(layers, manifest.dtype)
}
