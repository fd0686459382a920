//! Small fully connected networks with hand-written reverse mode.
//!
//! Parameters are stored as one flat `f32` vector (per layer: row-major
//! `out × in` weights followed by `out` biases) so optimizers and file
//! formats can treat them as a single buffer. Evaluation happens in `f64`
//! through [`MlpEval`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::sigmoid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Silu => 3,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Silu,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// `(out, in)` per layer.
    shapes: Vec<(usize, usize)>,
    params: Vec<f32>,
    hidden: Activation,
    output: Activation,
}

impl Mlp {
    /// Zero-initialized network with layer widths `widths[0] → … → widths[n]`.
    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::param(format!("invalid MLP widths {widths:?}")));
        }
        let shapes: Vec<_> = widths.windows(2).map(|w| (w[1], w[0])).collect();
        let n = shapes.iter().map(|(o, i)| o * i + o).sum();
        Ok(Self {
            shapes,
            params: vec![0.0; n],
            hidden,
            output,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(widths, hidden, output)?;
        let mut offset = 0;
        for &(out, inp) in &mlp.shapes {
            let limit = (6.0 / (inp + out) as f64).sqrt();
            for w in &mut mlp.params[offset..offset + out * inp] {
                *w = rng.gen_range(-limit..=limit) as f32;
            }
            offset += out * inp + out;
        }
        Ok(mlp)
    }

    pub fn from_parts(
        shapes: Vec<(usize, usize)>,
        params: Vec<f32>,
        hidden: Activation,
        output: Activation,
    ) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::param("MLP needs at least one layer"));
        }
        for pair in shapes.windows(2) {
            if pair[1].1 != pair[0].0 {
                return Err(Error::param(format!(
                    "layer widths do not chain: {:?} -> {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        if shapes.iter().any(|&(o, i)| o == 0 || i == 0) {
            return Err(Error::param("zero-width MLP layer"));
        }
        let n: usize = shapes.iter().map(|(o, i)| o * i + o).sum();
        if params.len() != n {
            return Err(Error::param(format!(
                "MLP expects {n} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::param("MLP parameters must be finite"));
        }
        Ok(Self {
            shapes,
            params,
            hidden,
            output,
        })
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn input_width(&self) -> usize {
        self.shapes[0].1
    }

    pub fn output_width(&self) -> usize {
        self.shapes[self.shapes.len() - 1].0
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Offset of the first weight of `layer` inside [`Mlp::params`].
    pub fn layer_offset(&self, layer: usize) -> usize {
        self.shapes[..layer].iter().map(|(o, i)| o * i + o).sum()
    }

    pub fn evaluator(&self) -> MlpEval {
        MlpEval {
            shapes: self.shapes.clone(),
            params: self.params.iter().map(|&p| p as f64).collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }

    /// Convenience single-input forward pass.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let eval = self.evaluator();
        let mut scratch = eval.scratch();
        eval.forward(x, &mut scratch).to_vec()
    }
}

/// `f64` copy of an [`Mlp`] for repeated evaluation.
#[derive(Clone, Debug)]
pub struct MlpEval {
    shapes: Vec<(usize, usize)>,
    params: Vec<f64>,
    hidden: Activation,
    output: Activation,
}

/// Per-thread activation storage for [`MlpEval`].
#[derive(Clone, Debug)]
pub struct MlpScratch {
    /// `acts[0]` is the input; `acts[l + 1]` the post-activation output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl MlpEval {
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_width(&self) -> usize {
        self.shapes[0].1
    }

    pub fn output_width(&self) -> usize {
        self.shapes[self.shapes.len() - 1].0
    }

    pub fn scratch(&self) -> MlpScratch {
        let mut acts = vec![vec![0.0; self.shapes[0].1]];
        acts.extend(self.shapes.iter().map(|&(o, _)| vec![0.0; o]));
        let widest = self.shapes.iter().map(|&(o, i)| o.max(i)).max().unwrap_or(0);
        MlpScratch {
            acts,
            pre: self.shapes.iter().map(|&(o, _)| vec![0.0; o]).collect(),
            delta: vec![0.0; widest],
            delta_next: vec![0.0; widest],
        }
    }

    pub fn forward<'s>(&self, x: &[f64], scratch: &'s mut MlpScratch) -> &'s [f64] {
        debug_assert_eq!(x.len(), self.input_width());
        scratch.acts[0].copy_from_slice(x);
        let last = self.shapes.len() - 1;
        let mut offset = 0;
        for (l, &(out, inp)) in self.shapes.iter().enumerate() {
            let act = if l == last { self.output } else { self.hidden };
            let (w, rest) = self.params[offset..].split_at(out * inp);
            let b = &rest[..out];
            let (before, after) = scratch.acts.split_at_mut(l + 1);
            let input = &before[l];
            let output = &mut after[0];
            let pre = &mut scratch.pre[l];
            for o in 0..out {
                let row = &w[o * inp..(o + 1) * inp];
                let z = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                pre[o] = z;
                output[o] = act.apply(z);
            }
            offset += out * inp + out;
        }
        &scratch.acts[self.shapes.len()]
    }

    /// Accumulates `d(grad_out · y)/dθ` into `grad_params` for the input last
    /// passed to [`MlpEval::forward`] with this scratch. Optionally writes the
    /// input gradient.
    pub fn backward(
        &self,
        scratch: &mut MlpScratch,
        grad_out: &[f64],
        grad_params: &mut [f64],
        mut grad_input: Option<&mut [f64]>,
    ) {
        debug_assert_eq!(grad_params.len(), self.params.len());
        let last = self.shapes.len() - 1;
        let mut offset = self.params.len();
        let MlpScratch {
            acts,
            pre,
            delta,
            delta_next,
        } = scratch;
        delta[..grad_out.len()].copy_from_slice(grad_out);
        for l in (0..self.shapes.len()).rev() {
            let (out, inp) = self.shapes[l];
            offset -= out * inp + out;
            let act = if l == last { self.output } else { self.hidden };
            for o in 0..out {
                delta[o] *= act.derivative(pre[l][o], acts[l + 1][o]);
            }
            let w = &self.params[offset..offset + out * inp];
            let (gw, gb) = grad_params[offset..offset + out * inp + out].split_at_mut(out * inp);
            let input = &acts[l];
            for o in 0..out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, x) in gw[o * inp..(o + 1) * inp].iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            let needs_input = l > 0 || grad_input.is_some();
            if needs_input {
                let next = &mut delta_next[..inp];
                next.fill(0.0);
                for o in 0..out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (n, wv) in next.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                        *n += d * wv;
                    }
                }
                if l == 0 {
                    if let Some(gi) = grad_input.as_deref_mut() {
                        gi.copy_from_slice(next);
                    }
                } else {
                    delta[..inp].copy_from_slice(next);
                }
            }
        }
    }
}
