//! Flat named parameter storage and the dense MLP built on top of it.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, Tape};
use crate::error::TensorError;
use crate::tensor::{bias_add_kernel, matmul_kernel, Tensor};

/// One named slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All learnable parameters of one network component, stored contiguously.
///
/// Gradients are carried alongside as plain `Vec<f64>` buffers with the same
/// flat layout as [`ParamVector::values`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector {
    segments: Vec<Segment>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a named segment. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if self.segments.iter().any(|s| s.name == name) {
            return Err(TensorError::Contract(format!("duplicate segment {name}")));
        }
        self.segments.push(Segment {
            name,
            shape: tensor.shape().to_vec(),
            offset: self.values.len(),
        });
        self.values.extend_from_slice(tensor.data());
        Ok(())
    }

    /// Rebuilds a vector from a segment table and payload, checking consistency.
    pub fn from_parts(segments: Vec<Segment>, values: Vec<f64>) -> Result<Self, TensorError> {
        let mut offset = 0;
        for (i, seg) in segments.iter().enumerate() {
            if seg.offset != offset {
                return Err(TensorError::Contract(format!(
                    "segment {} starts at {} but expected {offset}",
                    seg.name, seg.offset
                )));
            }
            if segments[..i].iter().any(|s| s.name == seg.name) {
                return Err(TensorError::Contract(format!("duplicate segment {}", seg.name)));
            }
            offset += seg.len();
        }
        if offset != values.len() {
            return Err(TensorError::shape(
                "param_vector",
                format!("segments cover {offset} values, payload has {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("param_vector"));
        }
        Ok(Self { segments, values })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Copy of this vector with the payload replaced by `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self, TensorError> {
        if flat.len() != self.values.len() {
            return Err(TensorError::shape(
                "unflatten",
                format!("expected {} values, got {}", self.values.len(), flat.len()),
            ));
        }
        Ok(Self {
            segments: self.segments.clone(),
            values: flat.to_vec(),
        })
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    pub fn tensor(&self, index: usize) -> Tensor {
        let seg = &self.segments[index];
        Tensor::from_raw(
            seg.shape.clone(),
            self.values[seg.offset..seg.offset + seg.len()].to_vec(),
        )
    }

    /// Hex SHA-256 over segment names, shapes and the exact bit patterns of the values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for seg in &self.segments {
            h.update(seg.name.as_bytes());
            for d in &seg.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }
}

/// Dense network `widths[0] → widths[1] → … → widths[L]`.
///
/// The activation follows every hidden layer, and the output layer too when
/// `activate_output` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub activate_output: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, activate_output: bool) -> Self {
        Self {
            widths,
            activation,
            activate_output,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.widths.len() < 2 {
            return Err(format!("need at least two widths, got {:?}", self.widths));
        }
        if self.widths.contains(&0) {
            return Err(format!("widths must be positive, got {:?}", self.widths));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers() || self.activate_output
    }

    /// Uniform fan-in initialization `U(±√(3/fan_in))` for weights, zero biases.
    pub fn init<R: Rng>(&self, prefix: &str, rng: &mut R) -> ParamVector {
        let mut pv = ParamVector::new();
        for (l, pair) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (3.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            pv.push(
                format!("{prefix}.{l}.weight"),
                Tensor::from_raw(vec![fan_in, fan_out], w),
            )
            .expect("generated names are unique");
            pv.push(format!("{prefix}.{l}.bias"), Tensor::zeros(vec![fan_out]))
                .expect("generated names are unique");
        }
        pv
    }

    /// Checks that `params` has exactly this network's segment shapes.
    pub fn check(&self, params: &ParamVector) -> Result<(), TensorError> {
        let segs = params.segments();
        let ok = segs.len() == 2 * self.layers()
            && self.widths.windows(2).enumerate().all(|(l, pair)| {
                segs[2 * l].shape == [pair[0], pair[1]] && segs[2 * l + 1].shape == [pair[1]]
            });
        if ok {
            Ok(())
        } else {
            Err(TensorError::shape(
                "mlp",
                format!("parameters do not match widths {:?}", self.widths),
            ))
        }
    }

    /// Registers every segment of `params` as a tape leaf.
    pub fn register(&self, tape: &mut Tape, params: &ParamVector, requires_grad: bool) -> Vec<NodeId> {
        (0..params.segments().len())
            .map(|i| tape.leaf(params.tensor(i), requires_grad))
            .collect()
    }

    /// Records the forward pass on `tape` using leaves from [`MlpSpec::register`].
    pub fn forward_tape(&self, tape: &mut Tape, leaves: &[NodeId], x: NodeId) -> Result<NodeId, TensorError> {
        if leaves.len() != 2 * self.layers() {
            return Err(TensorError::Contract("leaf count does not match layers".into()));
        }
        let mut h = x;
        for l in 0..self.layers() {
            h = tape.matmul(h, leaves[2 * l])?;
            h = tape.bias_add(h, leaves[2 * l + 1])?;
            if self.activated(l) {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h)?,
                    Activation::Relu => tape.relu(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Inference-only forward pass; bit-identical to the taped version.
    pub fn forward(&self, params: &ParamVector, x: &Tensor) -> Result<Tensor, TensorError> {
        self.check(params)?;
        let (rows, cols) = match x.shape() {
            [r, c] => (*r, *c),
            s => return Err(TensorError::shape("mlp", format!("input {s:?}"))),
        };
        if cols != self.input_dim() {
            return Err(TensorError::shape(
                "mlp",
                format!("input width {cols}, expected {}", self.input_dim()),
            ));
        }
        let mut h = x.data().to_vec();
        for (l, pair) in self.widths.windows(2).enumerate() {
            let w = params.segment(&params.segments()[2 * l].name).unwrap();
            let b = params.segment(&params.segments()[2 * l + 1].name).unwrap();
            h = matmul_kernel(&h, w, rows, pair[0], pair[1]);
            h = bias_add_kernel(&h, b);
            if self.activated(l) {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        let out = Tensor::from_raw(vec![rows, self.output_dim()], h);
        if out.all_finite() {
            Ok(out)
        } else {
            Err(TensorError::NonFinite("mlp"))
        }
    }
}
