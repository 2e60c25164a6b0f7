//! Small fully connected network with leaky-ReLU hidden layers and a linear
//! scalar output, plus batched backpropagation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    /// Negative slope of the leaky ReLU after each hidden layer.
    pub slopes: Vec<f64>,
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Activations retained by [`Mlp::forward_batch`] for the backward pass.
pub struct Tape {
    /// Layer inputs, one matrix per layer, columns are samples.
    inputs: Vec<DMatrix<f64>>,
    /// Hidden pre-activations.
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// Zero network with the given layer widths, e.g. `[8, 128, 128, 1]`.
    pub fn zeros(widths: &[usize], slopes: &[f64]) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        assert_eq!(*widths.last().unwrap(), 1, "output must be scalar");
        assert_eq!(slopes.len(), widths.len() - 2, "one slope per hidden layer");
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self {
            layers,
            slopes: slopes.to_vec(),
        }
    }

    /// Uniform fan-in initialization scaled by `scale`; biases start at zero.
    pub fn random<R: Rng>(widths: &[usize], slopes: &[f64], scale: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(widths, slopes);
        for layer in &mut net.layers {
            let bound = scale * (3.0 / layer.inputs() as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> f64 {
        let mut h = DVector::from_column_slice(input);
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            h = &layer.weight * h + &layer.bias;
            if k < last {
                let s = self.slopes[k];
                h.apply(|x| *x = leaky(*x, s));
            }
        }
        h[0]
    }

    /// Forward pass over a batch (`input_dim x batch`). Returns the outputs
    /// and the activations needed for [`Mlp::backward_batch`].
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> (DVector<f64>, Tape) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &h;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            inputs.push(h);
            if k < last {
                let s = self.slopes[k];
                let act = z.map(|v| leaky(v, s));
                pre.push(z);
                h = act;
            } else {
                h = z;
            }
        }
        let out = DVector::from_iterator(h.ncols(), h.row(0).iter().copied());
        (out, Tape { inputs, pre })
    }

    /// Gradient of `sum_k dl_dout[k] * out[k]` with respect to every
    /// parameter, in the layout of [`Mlp::params`].
    pub fn backward_batch(&self, tape: &Tape, dl_dout: &DVector<f64>) -> Vec<f64> {
        let n = self.layers.len();
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(n);
        let mut delta = DMatrix::from_row_slice(1, dl_dout.len(), dl_dout.as_slice());
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let gw = &delta * tape.inputs[k].transpose();
            let gb = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            grads.push((gw, gb));
            if k > 0 {
                let mut back = layer.weight.transpose() * &delta;
                let s = self.slopes[k - 1];
                back.zip_apply(&tape.pre[k - 1], |b, z| {
                    if z <= 0.0 {
                        *b *= s;
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.param_count());
        for (gw, gb) in grads {
            flat.extend(gw.transpose().iter().copied());
            flat.extend(gb.iter().copied());
        }
        flat
    }

    /// Flat parameter vector: per layer, row-major weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.transpose().iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        for l in &mut self.layers {
            let (rows, cols) = l.weight.shape();
            for r in 0..rows {
                for c in 0..cols {
                    l.weight[(r, c)] = flat[at];
                    at += 1;
                }
            }
            for b in l.bias.iter_mut() {
                *b = flat[at];
                at += 1;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite()) && self.slopes.iter().all(|s| s.is_finite())
    }
}
