//! Dense layers over a flat parameter buffer, with hand-written reverse-mode
//! gradients.
//!
//! Every network in the crate keeps its weights in one contiguous `Vec<f64>`.
//! Layers only hold offsets into it, so the same architecture can be run
//! against raw weights, EMA weights, or a perturbed copy during a gradient
//! check without cloning the structure.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{gemm, gemm_slice, GemmOperand, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }

    pub fn apply_matrix(self, pre: &Matrix) -> Matrix {
        let mut out = pre.clone();
        if self != Activation::Identity {
            out.as_mut_slice().iter_mut().for_each(|v| *v = self.apply(*v));
        }
        out
    }

    /// `grad_out ⊙ f'(pre)`, in place on `grad_out`.
    pub fn backprop(self, pre: &Matrix, grad_out: &mut Matrix) {
        if self == Activation::Identity {
            return;
        }
        for (g, &p) in grad_out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            *g *= self.derivative(p);
        }
    }
}

/// Allocates named tensors inside a flat parameter vector.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamLayout {
    tensors: Vec<Range<usize>>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, size: usize) -> Range<usize> {
        let r = self.len..self.len + size;
        self.len += size;
        self.tensors.push(r.clone());
        r
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// One range per weight matrix or bias vector; these are the "layers" a
    /// LAMB trust ratio is computed over.
    pub fn tensors(&self) -> &[Range<usize>] {
        &self.tensors
    }
}

/// `y = x W^T + b` with `W` stored row-major as `out x inp`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub weight: Range<usize>,
    pub bias: Option<Range<usize>>,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, inp: usize, out: usize, bias: bool) -> Self {
        let weight = layout.alloc(inp * out);
        let bias = bias.then(|| layout.alloc(out));
        Self {
            inp,
            out,
            weight,
            bias,
        }
    }

    pub fn param_count(&self) -> usize {
        self.inp * self.out + if self.bias.is_some() { self.out } else { 0 }
    }

    /// Uniform(-1/sqrt(inp), 1/sqrt(inp)) for weights and biases.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        let bound = 1.0 / (self.inp.max(1) as f64).sqrt();
        for w in &mut params[self.weight.clone()] {
            *w = rng.random_range(-bound..bound);
        }
        if let Some(b) = &self.bias {
            for w in &mut params[b.clone()] {
                *w = rng.random_range(-bound..bound);
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &Matrix) -> Matrix {
        assert_eq!(x.cols(), self.inp, "linear input width mismatch");
        let mut y = Matrix::zeros(x.rows(), self.out);
        if let Some(b) = &self.bias {
            let bias = &params[b.clone()];
            for r in 0..y.rows() {
                y.row_mut(r).copy_from_slice(bias);
            }
        }
        gemm(
            1.0,
            GemmOperand::new(x.as_slice(), x.rows(), x.cols(), false),
            GemmOperand::new(&params[self.weight.clone()], self.out, self.inp, true),
            if self.bias.is_some() { 1.0 } else { 0.0 },
            &mut y,
        );
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx` when
    /// requested.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Matrix,
        dy: &Matrix,
        grads: &mut [f64],
        want_dx: bool,
    ) -> Option<Matrix> {
        assert_eq!(dy.cols(), self.out);
        assert_eq!(dy.rows(), x.rows());
        // dW += dy^T x
        gemm_slice(
            1.0,
            GemmOperand::new(dy.as_slice(), dy.rows(), dy.cols(), true),
            GemmOperand::new(x.as_slice(), x.rows(), x.cols(), false),
            1.0,
            &mut grads[self.weight.clone()],
        );
        if let Some(b) = &self.bias {
            let gb = &mut grads[b.clone()];
            for row in dy.iter_rows() {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        want_dx.then(|| {
            let mut dx = Matrix::zeros(dy.rows(), self.inp);
            gemm(
                1.0,
                GemmOperand::new(dy.as_slice(), dy.rows(), dy.cols(), false),
                GemmOperand::new(&params[self.weight.clone()], self.out, self.inp, false),
                0.0,
                &mut dx,
            );
            dx
        })
    }
}

/// A plain feed-forward network: `Linear -> act -> Linear -> act ... -> Linear -> act_last`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpNet {
    widths: Vec<usize>,
    layers: Vec<Linear>,
    activations: Vec<Activation>,
    layout: ParamLayout,
}

/// Intermediate values kept for the backward pass.
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl MlpNet {
    /// `widths` lists every layer width including input and output;
    /// `activations` has one entry per linear layer.
    pub fn new(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        let mut layout = ParamLayout::new();
        let net = Self::with_layout(&mut layout, widths, activations)?;
        Ok(Self { layout, ..net })
    }

    /// Builds the network inside an existing layout, so it can share a
    /// parameter vector with other components.
    pub fn with_layout(
        layout: &mut ParamLayout,
        widths: &[usize],
        activations: &[Activation],
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output widths"));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::invalid(format!(
                "{} activations given for {} layers",
                activations.len(),
                widths.len() - 1
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(layout, w[0], w[1], true))
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            activations: activations.to_vec(),
            layout: ParamLayout::new(),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Layout of a standalone network (empty when built via `with_layout`).
    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        for l in &self.layers {
            l.init(params, rng);
        }
    }

    pub fn forward(&self, params: &[f64], x: &Matrix) -> (Matrix, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let z = layer.forward(params, &h);
            let next = act.apply_matrix(&z);
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        (h, MlpCache { inputs, pre })
    }

    /// Backpropagates `d_out`, accumulating into `grads`; returns `dL/dx`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        d_out: &Matrix,
        grads: &mut [f64],
        want_dx: bool,
    ) -> Option<Matrix> {
        let mut g = d_out.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            self.activations[i].backprop(&cache.pre[i], &mut g);
            let need = i > 0 || want_dx;
            match layer.backward(params, &cache.inputs[i], &g, grads, need) {
                Some(dx) => g = dx,
                None => debug_assert!(i == 0 || i == last),
            }
        }
        want_dx.then_some(g)
    }
}
