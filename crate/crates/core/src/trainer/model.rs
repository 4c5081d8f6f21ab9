//! Per-pixel toy network: encoder `h`, segmentation head `f`, representation head `g`.
//!
//! `h` is either the identity (`hidden = 0`) or one affine layer with tanh.
//! `f` is affine into class logits. `g` is affine followed by tanh. Both
//! heads read the encoder output. Parameters live in one flat vector.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    pub repr: usize,
}

impl ModelShape {
    pub fn encoded(&self) -> usize {
        if self.hidden == 0 {
            self.input
        } else {
            self.hidden
        }
    }

    fn encoder_params(&self) -> usize {
        if self.hidden == 0 {
            0
        } else {
            self.hidden * (self.input + 1)
        }
    }

    pub fn param_count(&self) -> usize {
        let e = self.encoded();
        self.encoder_params() + self.classes * (e + 1) + self.repr * (e + 1)
    }

    /// Offsets of `[W_h, b_h, W_f, b_f, W_g, b_g]` in the flat vector.
    fn offsets(&self) -> [usize; 6] {
        let e = self.encoded();
        let w_h = 0;
        let b_h = w_h + self.hidden * self.input;
        let w_f = self.encoder_params();
        let b_f = w_f + self.classes * e;
        let w_g = b_f + self.classes;
        let b_g = w_g + self.repr * e;
        [w_h, b_h, w_f, b_f, w_g, b_g]
    }
}

/// Cached forward pass over `P` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub pixels: usize,
    /// `[P, E]`; a copy of the input when the encoder is the identity.
    pub encoded: Vec<f64>,
    /// `[P, C]`.
    pub logits: Vec<f64>,
    /// `[P, D]`, after tanh.
    pub reprs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    shape: ModelShape,
    params: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (row, &bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

impl ToyModel {
    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Self {
        let mut params = vec![0.0; shape.param_count()];
        let [w_h, b_h, w_f, b_f, w_g, b_g] = shape.offsets();
        let e = shape.encoded();
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let sd = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = sd * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(w_h..b_h, shape.input);
        fill(w_f..b_f, e);
        fill(w_g..b_g, e);
        Self { shape, params }
    }

    pub fn from_params(shape: ModelShape, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.param_count() {
            return Err(Error::Shape(format!(
                "model needs {} parameters, got {}",
                shape.param_count(),
                params.len()
            )));
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, x: &[f64]) -> Activations {
        let s = self.shape;
        let pixels = x.len() / s.input;
        let e = s.encoded();
        let [w_h, b_h, w_f, b_f, w_g, b_g] = s.offsets();
        let p = &self.params;
        let mut encoded = vec![0.0; pixels * e];
        let mut logits = vec![0.0; pixels * s.classes];
        let mut reprs = vec![0.0; pixels * s.repr];
        for i in 0..pixels {
            let xi = &x[i * s.input..(i + 1) * s.input];
            let enc = &mut encoded[i * e..(i + 1) * e];
            if s.hidden == 0 {
                enc.copy_from_slice(xi);
            } else {
                affine(&p[w_h..b_h], &p[b_h..w_f], xi, enc);
                enc.iter_mut().for_each(|v| *v = v.tanh());
            }
            let enc = &encoded[i * e..(i + 1) * e];
            affine(&p[w_f..b_f], &p[b_f..w_g], enc, &mut logits[i * s.classes..(i + 1) * s.classes]);
            let z = &mut reprs[i * s.repr..(i + 1) * s.repr];
            affine(&p[w_g..b_g], &p[b_g..], enc, z);
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        Activations {
            pixels,
            encoded,
            logits,
            reprs,
        }
    }

    /// Parameter gradient given upstream gradients on logits and (optionally) representations.
    pub fn backward(
        &self,
        x: &[f64],
        act: &Activations,
        d_logits: &[f64],
        d_reprs: Option<&[f64]>,
    ) -> Vec<f64> {
        let s = self.shape;
        let e = s.encoded();
        let [w_h, b_h, w_f, b_f, w_g, b_g] = s.offsets();
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let mut d_enc = vec![0.0; e];
        let mut d_pre_g = vec![0.0; s.repr];
        for i in 0..act.pixels {
            let enc = &act.encoded[i * e..(i + 1) * e];
            let dl = &d_logits[i * s.classes..(i + 1) * s.classes];
            d_enc.iter_mut().for_each(|v| *v = 0.0);

            for (k, &g) in dl.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = w_f + k * e;
                for j in 0..e {
                    grad[row + j] += g * enc[j];
                    d_enc[j] += g * p[row + j];
                }
                grad[b_f + k] += g;
            }

            let mut any_repr = false;
            if let Some(dz) = d_reprs {
                let dz = &dz[i * s.repr..(i + 1) * s.repr];
                let z = &act.reprs[i * s.repr..(i + 1) * s.repr];
                for k in 0..s.repr {
                    d_pre_g[k] = dz[k] * (1.0 - z[k] * z[k]);
                    any_repr |= d_pre_g[k] != 0.0;
                }
            }
            if any_repr {
                for (k, &g) in d_pre_g.iter().enumerate() {
                    let row = w_g + k * e;
                    for j in 0..e {
                        grad[row + j] += g * enc[j];
                        d_enc[j] += g * p[row + j];
                    }
                    grad[b_g + k] += g;
                }
            }

            if s.hidden > 0 {
                let xi = &x[i * s.input..(i + 1) * s.input];
                for j in 0..e {
                    let g = d_enc[j] * (1.0 - enc[j] * enc[j]);
                    if g == 0.0 {
                        continue;
                    }
                    let row = w_h + j * s.input;
                    for (gw, &xv) in grad[row..row + s.input].iter_mut().zip(xi) {
                        *gw += g * xv;
                    }
                    grad[b_h + j] += g;
                }
            }
        }
        grad
    }

    pub fn predict(&self, x: &[f64]) -> Vec<i32> {
        let act = self.forward(x);
        act.logits
            .chunks_exact(self.shape.classes)
            .map(|row| crate::partition::argmax(row) as i32)
            .collect()
    }
}
