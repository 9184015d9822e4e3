//! Dense f32 tensors, a tape-based reverse-mode autodiff graph, and the
//! optimizer pieces needed to train MobileNet-style networks on a CPU.
//!
//! Trainable weights live in a [`ParamSet`] outside the tape. Operations refer
//! to them through a [`ParamView`], which selects a leading sub-block of the
//! stored tensor (first `out` rows, first `inp` columns, centred `k x k`
//! kernel window). Gradients for a view land in the matching region of a
//! full-size buffer, so everything outside the view receives exactly zero.

mod graph;
mod kernels;
mod optim;
mod schedule;

pub use graph::{BnMode, BnRecord, ConvSpec, Gradients, Graph, Var};
pub use optim::{is_decay_exempt, sgd_step, OptimizerState};
pub use schedule::cosine_warmup_lr;

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Row-major f32 tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[1], value)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[O, I, K, K]` interpretation used by weight views; missing trailing
    /// dimensions are treated as 1.
    fn as_oikk(&self) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            [o] => Ok([*o, 1, 1]),
            [o, i] => Ok([*o, *i, 1]),
            [o, i, kh, kw] if kh == kw => Ok([*o, *i, *kh]),
            s => Err(Error::Dimension(format!(
                "tensor of shape {s:?} cannot back a weight view"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Moves the parameter gradients of a backward pass into the tensors.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (i, g) in grads.params.iter().enumerate() {
            if let Some(g) = g {
                self.tensors[i].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Full view of a parameter.
    pub fn view(&self, id: ParamId) -> ParamView {
        let [o, i, k] = self.tensors[id.0]
            .as_oikk()
            .expect("parameter shape is not view-compatible");
        ParamView {
            id,
            out: o,
            inp: i,
            k,
        }
    }
}

/// Leading sub-block of a parameter: first `out` rows, first `inp` input
/// channels, and the centred `k x k` window of the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamView {
    pub id: ParamId,
    pub out: usize,
    pub inp: usize,
    pub k: usize,
}

impl ParamView {
    pub fn sliced(self, out: usize, inp: usize, k: usize) -> Self {
        Self {
            id: self.id,
            out,
            inp,
            k,
        }
    }

    pub fn rows(self, out: usize) -> Self {
        Self { out, ..self }
    }

    pub fn numel(&self) -> usize {
        self.out * self.inp * self.k * self.k
    }
}

/// Resolved addressing for a view over a concrete tensor.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ViewLayout {
    pub out: usize,
    pub inp: usize,
    pub k: usize,
    pub full_k: usize,
    /// Distance between consecutive output rows in the backing buffer.
    pub row_stride: usize,
    /// Offset of the crop window inside each `full_k x full_k` kernel.
    pub offset: usize,
}

impl ViewLayout {
    pub fn resolve(view: &ParamView, tensor: &Tensor) -> Result<Self> {
        let [o, i, kk] = tensor.as_oikk()?;
        if view.out > o || view.inp > i || view.k > kk || view.out == 0 || view.inp == 0 {
            return Err(Error::Dimension(format!(
                "view {}x{}x{k}x{k} exceeds parameter {:?}",
                view.out,
                view.inp,
                tensor.shape,
                k = view.k
            )));
        }
        if (kk - view.k) % 2 != 0 {
            return Err(Error::Dimension(format!(
                "kernel {} cannot be centre-cropped from {}",
                view.k, kk
            )));
        }
        Ok(Self {
            out: view.out,
            inp: view.inp,
            k: view.k,
            full_k: kk,
            row_stride: i * kk * kk,
            offset: (kk - view.k) / 2,
        })
    }

    /// Index into the backing buffer of element `(o, i, ky, kx)`.
    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        o * self.row_stride
            + i * self.full_k * self.full_k
            + (ky + self.offset) * self.full_k
            + kx
            + self.offset
    }

    /// True when each view row is a contiguous prefix of a backing row.
    pub fn rows_contiguous(&self) -> bool {
        self.k == self.full_k
    }

    pub fn row_len(&self) -> usize {
        self.inp * self.k * self.k
    }

    /// Copies the view into a dense `[out, inp*k*k]` buffer.
    pub fn pack(&self, data: &[f32]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.out * self.row_len());
        for o in 0..self.out {
            for i in 0..self.inp {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        out.push(data[self.index(o, i, ky, kx)]);
                    }
                }
            }
        }
        out
    }

    /// Adds a dense `[out, inp*k*k]` buffer into the backing layout.
    pub fn scatter_add(&self, packed: &[f32], full: &mut [f32]) {
        let mut it = packed.iter();
        for o in 0..self.out {
            for i in 0..self.inp {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        full[self.index(o, i, ky, kx)] += it.next().unwrap();
                    }
                }
            }
        }
    }
}

/// Numerically stable row-wise softmax of a `[rows, classes]` buffer.
pub fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = (z - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}
