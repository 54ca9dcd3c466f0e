//! Sequential feed-forward models whose layers hold either full-precision or
//! quantized weights.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{
    manifest_path, read_manifest, read_tensor_file, take_tensor, write_json, write_tensor_file,
    Activation, Checkpoint, DType, Layer, LayerSpec, ModelManifest, RawTensor, FORMAT_VERSION,
};
use crate::error::{PmqError, Result};
use crate::matrix::Matrix;
use crate::quant::{QuantAttrs, QuantizedLayer};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
        }
    }

    /// Derivative of [`Activation::apply`] at `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_K * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    Full(Matrix),
    Quantized {
        layer: QuantizedLayer,
        dequantized: Matrix,
    },
}

impl WeightSource {
    pub fn quantized(layer: QuantizedLayer) -> Self {
        let dequantized = layer.dequantize();
        WeightSource::Quantized { layer, dequantized }
    }

    /// The weight actually used in the forward pass.
    pub fn realized(&self) -> &Matrix {
        match self {
            WeightSource::Full(w) => w,
            WeightSource::Quantized { dequantized, .. } => dequantized,
        }
    }

    pub fn as_quantized(&self) -> Option<&QuantizedLayer> {
        match self {
            WeightSource::Quantized { layer, .. } => Some(layer),
            WeightSource::Full(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealizedLayer {
    pub id: String,
    pub weight: WeightSource,
    pub bias: Option<Vec<f64>>,
    pub activation: Activation,
}

impl RealizedLayer {
    pub fn d_in(&self) -> usize {
        self.weight.realized().cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.realized().rows()
    }
}

/// `act(W x + b)` for one layer.
pub fn propagate_through_layer(x: &Matrix, layer: &RealizedLayer) -> Result<Matrix> {
    let w = layer.weight.realized();
    if x.rows() != w.cols() {
        return Err(
            PmqError::shape("propagate_through_layer", w.cols(), x.rows()).in_layer(&layer.id),
        );
    }
    let mut z = w.matmul(x)?;
    if let Some(b) = &layer.bias {
        z.add_column_broadcast(b)?;
    }
    let act = layer.activation;
    if act != Activation::Identity {
        for v in z.data_mut() {
            *v = act.apply(*v);
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<RealizedLayer>,
    dtype: DType,
}

impl Model {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Model {
            layers: ck
                .layers()
                .iter()
                .map(|l| RealizedLayer {
                    id: l.id.clone(),
                    weight: WeightSource::Full(l.weight.clone()),
                    bias: l.bias.clone(),
                    activation: l.activation,
                })
                .collect(),
            dtype: ck.dtype(),
        }
    }

    pub fn layers(&self) -> &[RealizedLayer] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &RealizedLayer {
        &self.layers[idx]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, RealizedLayer::d_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, RealizedLayer::d_out)
    }

    /// Swaps in a new weight source for layer `idx`; shapes must match.
    pub fn replace_weight(&mut self, idx: usize, weight: WeightSource) -> Result<()> {
        let len = self.layers.len();
        let layer = self
            .layers
            .get_mut(idx)
            .ok_or(PmqError::OutOfRange { index: idx, len })?;
        if layer.weight.realized().shape() != weight.realized().shape() {
            return Err(PmqError::shape(
                "replace_weight",
                format!("{:?}", layer.weight.realized().shape()),
                format!("{:?}", weight.realized().shape()),
            )
            .in_layer(&layer.id));
        }
        layer.weight = weight;
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_to_layer(x, self.layers.len())
    }

    /// Input activation of layer `idx` (0-based): the output of layers
    /// `0..idx`. `idx == 0` returns `x`; `idx == num_layers()` is the model
    /// output.
    pub fn forward_to_layer(&self, x: &Matrix, idx: usize) -> Result<Matrix> {
        if idx > self.layers.len() {
            return Err(PmqError::OutOfRange {
                index: idx,
                len: self.layers.len() + 1,
            });
        }
        if x.rows() != self.input_dim() {
            return Err(PmqError::shape("forward", self.input_dim(), x.rows()));
        }
        let mut a = x.clone();
        for layer in &self.layers[..idx] {
            a = propagate_through_layer(&a, layer)?;
        }
        Ok(a)
    }

    /// Input of layer `idx`, which must name an existing layer.
    pub fn layer_input(&self, x: &Matrix, idx: usize) -> Result<Matrix> {
        if idx >= self.layers.len() {
            return Err(PmqError::OutOfRange {
                index: idx,
                len: self.layers.len(),
            });
        }
        self.forward_to_layer(x, idx)
    }

    /// SHA-256 over the realized weights and biases of layers `0..upto`.
    pub fn prefix_checksum(&self, upto: usize) -> [u8; 32] {
        let mut h = Sha256::new();
        for l in &self.layers[..upto.min(self.layers.len())] {
            h.update(l.id.as_bytes());
            for v in l.weight.realized().data() {
                h.update(v.to_le_bytes());
            }
            if let Some(b) = &l.bias {
                for v in b {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }

    /// Full-precision checkpoint with every layer's realized weight.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(
            self.layers
                .iter()
                .map(|l| Layer {
                    id: l.id.clone(),
                    weight: l.weight.realized().clone(),
                    bias: l.bias.clone(),
                    activation: l.activation,
                })
                .collect(),
            self.dtype,
        )
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            version: FORMAT_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    id: l.id.clone(),
                    d_in: l.d_in(),
                    d_out: l.d_out(),
                    activation: l.activation,
                    has_bias: l.bias.is_some(),
                })
                .collect(),
            dtype: self.dtype,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantizedFileAttrs {
    quantized: BTreeMap<String, QuantAttrs>,
}

/// Writes a model whose quantized layers are stored as packed codes plus
/// f32 scales and i32 zero points; full-precision layers keep `.weight`.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut attrs = BTreeMap::new();
    for l in model.layers() {
        match &l.weight {
            WeightSource::Full(w) => {
                tensors.insert(
                    format!("{}.weight", l.id),
                    RawTensor::matrix(w, model.dtype),
                );
            }
            WeightSource::Quantized { layer, .. } => {
                layer.to_tensors(&l.id, &mut tensors);
                attrs.insert(l.id.clone(), layer.attrs());
            }
        }
        if let Some(b) = &l.bias {
            tensors.insert(format!("{}.bias", l.id), RawTensor::vector(b, model.dtype));
        }
    }
    let meta = serde_json::to_string(&QuantizedFileAttrs { quantized: attrs })?;
    write_tensor_file(path, &tensors, Some(&meta))?;
    write_json(&manifest_path(path), &model.manifest())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let manifest = read_manifest(path)?;
    let (tensors, meta) = read_tensor_file(path)?;
    let attrs: QuantizedFileAttrs = match meta {
        Some(m) => {
            serde_json::from_str(&m).map_err(|e| PmqError::MalformedHeader(e.to_string()))?
        }
        None => QuantizedFileAttrs {
            quantized: BTreeMap::new(),
        },
    };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for spec in &manifest.layers {
        let weight = match attrs.quantized.get(&spec.id) {
            Some(a) => WeightSource::quantized(QuantizedLayer::from_tensors(
                &spec.id, &tensors, spec.d_out, spec.d_in, *a,
            )?),
            None => {
                let name = format!("{}.weight", spec.id);
                let w = take_tensor(&tensors, &name)?.to_matrix(&name, manifest.dtype)?;
                if w.shape() != (spec.d_out, spec.d_in) {
                    return Err(PmqError::Manifest(format!(
                        "`{name}` shape disagrees with manifest"
                    )));
                }
                WeightSource::Full(w)
            }
        };
        let bias = if spec.has_bias {
            let name = format!("{}.bias", spec.id);
            Some(take_tensor(&tensors, &name)?.floats(&name, manifest.dtype)?)
        } else {
            None
        };
        layers.push(RealizedLayer {
            id: spec.id.clone(),
            weight,
            bias,
            activation: spec.activation,
        });
    }
    Ok(Model {
        layers,
        dtype: manifest.dtype,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{rtn_quantize, QuantConfig};

    fn single(w: Matrix, act: Activation) -> Model {
        Model::from_checkpoint(
            &Checkpoint::new(
                vec![Layer {
                    id: "l0".into(),
                    weight: w,
                    bias: None,
                    activation: act,
                }],
                DType::F64,
            )
            .unwrap(),
        )
    }

    #[test]
    fn identity_layer_passes_through() {
        let m = single(Matrix::identity(3), Activation::Identity);
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.0], vec![3.0, 4.0]]);
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn relu_hand_example() {
        let m = single(
            Matrix::from_rows(&[vec![1.0], vec![-1.0]]),
            Activation::Relu,
        );
        let y = m.forward(&Matrix::from_rows(&[vec![2.0]])).unwrap();
        assert_eq!(y, Matrix::from_rows(&[vec![2.0], vec![0.0]]));
    }

    #[test]
    fn forward_to_layer_bounds() {
        let m = single(Matrix::identity(2), Activation::Relu);
        let x = Matrix::from_rows(&[vec![-1.0], vec![1.0]]);
        assert_eq!(m.forward_to_layer(&x, 0).unwrap(), x);
        assert_eq!(m.layer_input(&x, 0).unwrap(), x);
        assert!(matches!(
            m.layer_input(&x, 1),
            Err(PmqError::OutOfRange { .. })
        ));
        assert!(m.forward_to_layer(&x, 2).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let m = single(Matrix::identity(2), Activation::Relu);
        assert!(matches!(
            m.forward(&Matrix::zeros(3, 1)),
            Err(PmqError::Shape { .. })
        ));
    }

    #[test]
    fn gelu_reference_values() {
        // values of the tanh approximation
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert!((Activation::Gelu.apply(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((Activation::Gelu.apply(-1.0) + 0.158_808_009_391_723_2).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn representable_weights_survive_quantization() {
        // every row spans 15 steps of 0.25, so 4-bit grids hit each entry
        let w = Matrix::from_rows(&[vec![-2.0, -0.25, 0.0, 1.75], vec![0.5, 1.0, -2.5, 1.25]]);
        let mut m = single(w.clone(), Activation::Gelu);
        let x = Matrix::from_fn(4, 3, |i, j| (i as f64 - 1.5) * (j as f64 + 0.5));
        let before = m.forward(&x).unwrap();
        let cfg = QuantConfig::default().with_bits(4);
        let q = rtn_quantize(&w, &cfg).unwrap();
        assert_eq!(q.dequantize(), w);
        m.replace_weight(0, WeightSource::quantized(q)).unwrap();
        assert_eq!(m.forward(&x).unwrap(), before);
    }

    #[test]
    fn quantized_model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.safetensors");
        let w = Matrix::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
        let mut m = single(w.clone(), Activation::Relu);
        let q = rtn_quantize(&w, &QuantConfig::default().with_bits(3).with_group_size(2)).unwrap();
        m.replace_weight(0, WeightSource::quantized(q)).unwrap();
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back, m);
    }
}
