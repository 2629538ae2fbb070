//! Layer and network descriptions shared by the reference and crossbar paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{im2col, ConvGeometry, QuantTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Fc { inputs: usize, outputs: usize },
    Conv(ConvGeometry),
}

impl LayerKind {
    pub fn input_len(&self) -> usize {
        match self {
            LayerKind::Fc { inputs, .. } => *inputs,
            LayerKind::Conv(g) => g.input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            LayerKind::Fc { outputs, .. } => *outputs,
            LayerKind::Conv(g) => g.output_len(),
        }
    }

    /// `(rows, cols)` of the matrix the layer's VMMs run against.
    pub fn vmm_dims(&self) -> (usize, usize) {
        match self {
            LayerKind::Fc { inputs, outputs } => (*inputs, *outputs),
            LayerKind::Conv(g) => (g.patch_len(), g.out_channels),
        }
    }
}

/// One layer: its VMM geometry, weights and the inter-layer requantization.
///
/// After the VMM, a `Relu` layer emits `min(max(y, 0) >> shift, 2^bits - 1)`
/// as the next layer's unsigned input. `None` is only legal on the last
/// layer, whose raw scores are returned as-is.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub weight: QuantTensor,
    pub activation: Activation,
    pub shift: u32,
}

impl LayerSpec {
    pub fn fc(weight: QuantTensor, activation: Activation, shift: u32) -> Result<Self> {
        let (inputs, outputs) = weight.dims2()?;
        if !weight.signed() {
            return Err(Error::shape("layer weights must be signed"));
        }
        Ok(Self {
            kind: LayerKind::Fc { inputs, outputs },
            weight,
            activation,
            shift,
        })
    }

    /// `weight` is laid out `[out_channels, in_channels, kernel_h, kernel_w]`.
    pub fn conv(
        weight: QuantTensor,
        input_chw: [usize; 3],
        stride: usize,
        padding: usize,
        activation: Activation,
        shift: u32,
    ) -> Result<Self> {
        let &[oc, ic, kh, kw] = weight.shape() else {
            return Err(Error::shape(format!(
                "conv kernel must be 4-D, got {:?}",
                weight.shape()
            )));
        };
        if ic != input_chw[0] {
            return Err(Error::shape(format!(
                "kernel expects {ic} input channels, input has {}",
                input_chw[0]
            )));
        }
        if !weight.signed() {
            return Err(Error::shape("layer weights must be signed"));
        }
        let geom = ConvGeometry {
            in_channels: ic,
            in_height: input_chw[1],
            in_width: input_chw[2],
            out_channels: oc,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        geom.validate()?;
        Ok(Self {
            kind: LayerKind::Conv(geom),
            weight,
            activation,
            shift,
        })
    }

    /// The weights as the 2-D matrix driven by VMMs: FC weights unchanged,
    /// conv kernels as `[C*kh*kw, out_channels]`.
    pub fn vmm_matrix(&self) -> QuantTensor {
        match self.kind {
            LayerKind::Fc { .. } => self.weight.clone(),
            LayerKind::Conv(g) => {
                let plen = g.patch_len();
                let oc = g.out_channels;
                let src = self.weight.data();
                let mut data = vec![0i32; plen * oc];
                for o in 0..oc {
                    for e in 0..plen {
                        data[e * oc + o] = src[o * plen + e];
                    }
                }
                QuantTensor::new(vec![plen, oc], data, self.weight.bits(), true)
                    .expect("same element count and range")
            }
        }
    }

    /// Same layer with weights replaced by a VMM-layout matrix, the inverse
    /// of [`LayerSpec::vmm_matrix`].
    pub fn with_vmm_matrix(&self, matrix: QuantTensor) -> Result<Self> {
        let (rows, cols) = matrix.dims2()?;
        if (rows, cols) != self.kind.vmm_dims() {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} does not fit layer expecting {:?}",
                self.kind.vmm_dims()
            )));
        }
        let weight = match self.kind {
            LayerKind::Fc { .. } => matrix,
            LayerKind::Conv(g) => {
                let src = matrix.data();
                let mut data = vec![0i32; rows * cols];
                for o in 0..cols {
                    for e in 0..rows {
                        data[o * rows + e] = src[e * cols + o];
                    }
                }
                QuantTensor::new(
                    vec![cols, g.in_channels, g.kernel_h, g.kernel_w],
                    data,
                    matrix.bits(),
                    matrix.signed(),
                )?
            }
        };
        Ok(Self {
            weight,
            ..self.clone()
        })
    }

    /// Lowers a conv input to patch rows. Errors for FC layers.
    pub fn im2col(&self, input: &QuantTensor) -> Result<QuantTensor> {
        match &self.kind {
            LayerKind::Conv(g) => im2col(input, g),
            LayerKind::Fc { .. } => Err(Error::shape("im2col applies to conv layers only")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    pub input_shape: Vec<usize>,
    pub input_bits: u32,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkModel {
    pub fn new(
        input_shape: Vec<usize>,
        input_bits: u32,
        num_classes: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let model = Self {
            input_shape,
            input_bits,
            num_classes,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::EmptyInput);
        }
        if self.input_bits == 0 || self.input_bits > crate::tensor::MAX_BITS {
            return Err(Error::InvalidPrecision(self.input_bits));
        }
        let mut width = self.input_len();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.kind.input_len() != width {
                return Err(Error::shape(format!(
                    "layer {i} expects {} inputs but receives {width}",
                    layer.kind.input_len()
                )));
            }
            if layer.weight.dims2().is_ok() != matches!(layer.kind, LayerKind::Fc { .. }) {
                return Err(Error::shape(format!(
                    "layer {i} weight rank does not match its kind"
                )));
            }
            if i != last && layer.activation != Activation::Relu {
                return Err(Error::shape(format!(
                    "layer {i}: only the final layer may skip the ReLU requantizer"
                )));
            }
            width = layer.kind.output_len();
        }
        if width != self.num_classes {
            return Err(Error::shape(format!(
                "network emits {width} scores for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}
