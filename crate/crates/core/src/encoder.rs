//! Fully-connected view encoders and their weight file.
//!
//! # Encoder weight format
//!
//! Little-endian:
//!
//! ```text
//! magic    "CENC"
//! version  u32 = 1
//! e        u32                     embedding width
//! 2 × encoder:
//!   layers u32
//!   layers × (rows u32, cols u32, rows·cols f64 weights row-major, rows f64 biases)
//! ```
//!
//! A layer maps `cols` inputs to `rows` outputs.

use std::fs;
use std::path::Path;

use crate::dataset::Reader;
use crate::error::{check_dim, Error, Result};
use crate::linalg::Matrix;
use crate::rng::{uniform_symmetric, TaskRng};
use crate::scalar::{dot, Scalar};

pub const ENCODER_MAGIC: &[u8; 4] = b"CENC";
pub const ENCODER_VERSION: u32 = 1;

/// Affine layer `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![T::zero(); outputs],
        }
    }

    /// Glorot-uniform weights `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut TaskRng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| uniform_symmetric(rng, limit))
            .collect();
        Self {
            weight: Matrix::from_vec(outputs, inputs, data),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        self.weight
            .row_iter()
            .zip(&self.bias)
            .map(|(w, &b)| dot(w, x) + b)
            .collect()
    }
}

/// Multi-layer perceptron with rectifiers between layers and a linear
/// output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

/// Per-layer inputs recorded during a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// `inputs[l]` is what layer `l` consumed (post-rectifier for `l > 0`).
    inputs: Vec<Vec<T>>,
    pub output: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    /// Builds layers for `widths = [in, hidden..., out]`.
    pub fn glorot(widths: &[usize], rng: &mut TaskRng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    /// Checks that layer widths chain.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::param("encoder", "has no layers"));
        }
        for w in self.layers.windows(2) {
            check_dim("encoder layer chain", w[0].outputs(), w[1].inputs())?;
        }
        for l in &self.layers {
            check_dim("encoder bias width", l.outputs(), l.bias.len())?;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &[T]) -> Result<ForwardTrace<T>> {
        check_dim("encoder input", self.input_dim(), x.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.apply(&h);
            if l < last {
                for v in &mut y {
                    *v = v.max(T::zero());
                }
            }
            inputs.push(std::mem::replace(&mut h, y));
        }
        Ok(ForwardTrace { inputs, output: h })
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂output`.
    pub fn backward(&self, trace: &ForwardTrace<T>, grad_out: &[T], grads: &mut Mlp<T>) {
        let mut delta = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let input = &trace.inputs[l];
            let g = &mut grads.layers[l];
            for (r, &d) in delta.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                g.bias[r] += d;
                for (gw, &x) in g.weight.row_mut(r).iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            if l == 0 {
                break;
            }
            let mut back = self.layers[l]
                .weight
                .vecmat(&delta)
                .expect("trace shapes match layer");
            // inputs to layer l are rectified outputs of layer l-1
            for (b, &a) in back.iter_mut().zip(input) {
                if a <= T::zero() {
                    *b = T::zero();
                }
            }
            delta = back;
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters in layer order, each layer's weights then biases.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[at..at + w.len()]);
            at += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }
}

/// The two view encoders. Features are `concat(phi1(view1), phi2(view2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub phi1: Mlp<T>,
    pub phi2: Mlp<T>,
    pub embed_dim: usize,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn validate(&self) -> Result<()> {
        self.phi1.validate()?;
        self.phi2.validate()?;
        check_dim("phi1 output width", self.embed_dim, self.phi1.output_dim())?;
        check_dim("phi2 output width", self.embed_dim, self.phi2.output_dim())
    }

    /// Concatenated feature of one split sample, width `2e`.
    pub fn features(&self, view1: &[T], view2: &[T]) -> Result<Vec<T>> {
        let mut f = self.phi1.forward(view1)?;
        f.extend(self.phi2.forward(view2)?);
        Ok(f)
    }
}

/// Forward pass of one encoder on one view.
pub fn encode<T: Scalar>(params: &Mlp<T>, view: &[T]) -> Result<Vec<T>> {
    params.forward(view)
}

pub fn encode_encoders<T: Scalar>(params: &EncoderParams<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ENCODER_MAGIC);
    buf.extend_from_slice(&ENCODER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.embed_dim as u32).to_le_bytes());
    for mlp in [&params.phi1, &params.phi2] {
        buf.extend_from_slice(&(mlp.layers.len() as u32).to_le_bytes());
        for l in &mlp.layers {
            buf.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
            buf.extend_from_slice(&(l.inputs() as u32).to_le_bytes());
            for x in l.weight.as_slice().iter().chain(&l.bias) {
                buf.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
    }
    buf
}

pub fn save_encoders<T: Scalar>(params: &EncoderParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_encoders(params)).map_err(|e| Error::io(path, e))
}

pub fn load_encoders<T: Scalar>(path: impl AsRef<Path>) -> Result<EncoderParams<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rd = Reader::new(&bytes, path);
    rd.magic("CENC")?;
    let version = rd.u32("version")?;
    if version != ENCODER_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            expected: ENCODER_VERSION,
            found: version,
        });
    }
    let embed_dim = rd.u32("embedding width")? as usize;
    let read_mlp = |rd: &mut Reader| -> Result<Mlp<T>> {
        let count = rd.u32("layer count")? as usize;
        let mut layers = Vec::new();
        for _ in 0..count {
            let rows = rd.u32("layer rows")? as usize;
            let cols = rd.u32("layer cols")? as usize;
            if rd.remaining() / 8 < rows * cols + rows {
                return Err(Error::Truncated {
                    path: path.to_path_buf(),
                    context: format!("{rows}x{cols} layer"),
                });
            }
            let mut read_vals = |n: usize| -> Result<Vec<T>> {
                (0..n)
                    .map(|_| {
                        let x = rd.f64("layer value")?;
                        if x.is_finite() {
                            Ok(T::lit(x))
                        } else {
                            Err(rd.malformed("non-finite encoder weight"))
                        }
                    })
                    .collect()
            };
            let weight = Matrix::from_vec(rows, cols, read_vals(rows * cols)?);
            let bias = read_vals(rows)?;
            layers.push(Dense { weight, bias });
        }
        Ok(Mlp { layers })
    };
    let phi1 = read_mlp(&mut rd)?;
    let phi2 = read_mlp(&mut rd)?;
    rd.finish()?;
    let params = EncoderParams {
        phi1,
        phi2,
        embed_dim,
    };
    params
        .validate()
        .map_err(|e| rd.malformed(format!("inconsistent encoder shapes: {e}")))?;
    Ok(params)
}
