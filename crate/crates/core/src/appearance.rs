//! Per-image appearance embeddings and the MLP decoding them into the
//! environment light (degree 4) and sky color (degree 1) SH coefficients.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::sh::{ShCoefficients, DC_UNIT_RADIANCE};
use crate::shading::{LIGHT_DEGREE, LIGHT_PARAMS, SKY_DEGREE, SKY_PARAMS};

pub const EMBEDDING_DIM: usize = 128;
pub const HIDDEN_DIM: usize = 256;
pub const LIGHT_HIDDEN_DIM: usize = 128;
pub const INITIAL_LIGHT_RADIANCE: f64 = 0.5;
pub const INITIAL_SKY_VALUE: f64 = 0.5;
const EMBEDDING_INIT_STD: f64 = 0.1;
const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum AppearanceError {
    #[error("embedding has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("image index {0} is outside the embedding table")]
    UnknownImage(usize),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    input: usize,
    output: usize,
    offset: usize,
}

impl Layer {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.input * self.output
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let b = self.offset + self.input * self.output;
        b..b + self.output
    }

    fn size(&self) -> usize {
        (self.input + 1) * self.output
    }
}

const TRUNK: [(usize, usize); 3] = [(EMBEDDING_DIM, HIDDEN_DIM), (HIDDEN_DIM, HIDDEN_DIM), (HIDDEN_DIM, HIDDEN_DIM)];
const L_TRUNK0: usize = 0;
const L_SKY: usize = 3;
const L_LIGHT_HIDDEN: usize = 4;
const L_LIGHT: usize = 5;

fn layers() -> [Layer; 6] {
    let shapes = [
        TRUNK[0],
        TRUNK[1],
        TRUNK[2],
        (HIDDEN_DIM, SKY_PARAMS),
        (HIDDEN_DIM, LIGHT_HIDDEN_DIM),
        (LIGHT_HIDDEN_DIM, LIGHT_PARAMS),
    ];
    let mut offset = 0;
    shapes.map(|(input, output)| {
        let l = Layer { input, output, offset };
        offset += l.size();
        l
    })
}

/// Total number of MLP scalars.
pub fn mlp_param_count() -> usize {
    layers().iter().map(Layer::size).sum()
}

/// ReLU trunk of three 256-unit layers, a linear sky head, and a light
/// branch of one 128-unit ReLU layer followed by a linear head.
/// Parameters live in one flat vector (per layer: row-major weights, then bias).
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceMlp {
    pub params: Vec<f64>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Vec<f64>,
    trunk: [Vec<f64>; 3],
    light_hidden: Vec<f64>,
}

fn affine(params: &[f64], layer: &Layer, x: &[f64], relu: bool) -> Vec<f64> {
    let w = &params[layer.weights()];
    let b = &params[layer.bias()];
    (0..layer.output)
        .map(|o| {
            let row = &w[o * layer.input..(o + 1) * layer.input];
            let v = b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
            if relu {
                v.max(0.0)
            } else {
                v
            }
        })
        .collect()
}

/// Accumulates parameter gradients of `y = W x + b` and returns `dL/dx`.
fn affine_backward(params: &[f64], grad: &mut [f64], layer: &Layer, x: &[f64], d_y: &[f64]) -> Vec<f64> {
    let mut d_x = vec![0.0; layer.input];
    let w = &params[layer.weights()];
    let wr = layer.weights();
    let br = layer.bias();
    for o in 0..layer.output {
        let g = d_y[o];
        if g == 0.0 {
            continue;
        }
        grad[br.start + o] += g;
        let gw = &mut grad[wr.start + o * layer.input..wr.start + (o + 1) * layer.input];
        for (gi, xi) in gw.iter_mut().zip(x) {
            *gi += g * xi;
        }
        for (dx, wi) in d_x.iter_mut().zip(&w[o * layer.input..(o + 1) * layer.input]) {
            *dx += g * wi;
        }
    }
    d_x
}

fn relu_mask(d: &mut [f64], activation: &[f64]) {
    for (g, a) in d.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

impl AppearanceMlp {
    /// Uniform `±1/√fan_in` init; heads are scaled down and biased toward a
    /// uniform gray light and a mid-gray sky.
    pub fn new(rng: &mut impl Rng) -> Self {
        let ls = layers();
        let mut params = vec![0.0; mlp_param_count()];
        for (i, l) in ls.iter().enumerate() {
            let bound = 1.0 / (l.input as f64).sqrt();
            let scale = if i == L_SKY || i == L_LIGHT { HEAD_INIT_SCALE } else { 1.0 };
            for v in &mut params[l.weights()] {
                *v = scale * rng.random_range(-bound..bound);
            }
            for v in &mut params[l.bias()] {
                *v = if i == L_SKY || i == L_LIGHT { 0.0 } else { rng.random_range(-bound..bound) };
            }
        }
        for c in 0..3 {
            params[ls[L_LIGHT].bias().start + c * 25] = INITIAL_LIGHT_RADIANCE * DC_UNIT_RADIANCE;
            params[ls[L_SKY].bias().start + c * 4] = INITIAL_SKY_VALUE * DC_UNIT_RADIANCE;
        }
        Self { params }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self, AppearanceError> {
        if params.len() != mlp_param_count() {
            return Err(AppearanceError::ParamCount { expected: mlp_param_count(), got: params.len() });
        }
        Ok(Self { params })
    }

    /// Named `(name, shape, range)` views of the flat parameter vector.
    pub fn tensors() -> Vec<(String, [usize; 2], std::ops::Range<usize>)> {
        let names = ["trunk0", "trunk1", "trunk2", "sky_head", "light_hidden", "light_head"];
        layers()
            .iter()
            .zip(names)
            .flat_map(|(l, n)| {
                [
                    (format!("{n}.weight"), [l.output, l.input], l.weights()),
                    (format!("{n}.bias"), [l.output, 1], l.bias()),
                ]
            })
            .collect()
    }

    /// Raw head outputs (75 light, 12 sky) and the activation cache.
    pub fn forward_raw(&self, embedding: &[f64]) -> Result<([f64; LIGHT_PARAMS], [f64; SKY_PARAMS], MlpCache), AppearanceError> {
        if embedding.len() != EMBEDDING_DIM {
            return Err(AppearanceError::Dimension { expected: EMBEDDING_DIM, got: embedding.len() });
        }
        let ls = layers();
        let h0 = affine(&self.params, &ls[L_TRUNK0], embedding, true);
        let h1 = affine(&self.params, &ls[1], &h0, true);
        let h2 = affine(&self.params, &ls[2], &h1, true);
        let sky = affine(&self.params, &ls[L_SKY], &h2, false);
        let lh = affine(&self.params, &ls[L_LIGHT_HIDDEN], &h2, true);
        let light = affine(&self.params, &ls[L_LIGHT], &lh, false);
        let cache = MlpCache { input: embedding.to_vec(), trunk: [h0, h1, h2], light_hidden: lh };
        Ok((light.try_into().unwrap(), sky.try_into().unwrap(), cache))
    }

    pub fn forward(&self, embedding: &[f64]) -> Result<(ShCoefficients, ShCoefficients), AppearanceError> {
        let (light, sky, _) = self.forward_raw(embedding)?;
        Ok((
            ShCoefficients::from_flat(LIGHT_DEGREE, &light).expect("light head shape"),
            ShCoefficients::from_flat(SKY_DEGREE, &sky).expect("sky head shape"),
        ))
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/d embedding`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        d_light: &[f64; LIGHT_PARAMS],
        d_sky: &[f64; SKY_PARAMS],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let ls = layers();
        let [h0, h1, h2] = &cache.trunk;
        let mut d_lh = affine_backward(&self.params, grad, &ls[L_LIGHT], &cache.light_hidden, d_light);
        relu_mask(&mut d_lh, &cache.light_hidden);
        let mut d_h2 = affine_backward(&self.params, grad, &ls[L_LIGHT_HIDDEN], h2, &d_lh);
        let d_h2_sky = affine_backward(&self.params, grad, &ls[L_SKY], h2, d_sky);
        for (a, b) in d_h2.iter_mut().zip(&d_h2_sky) {
            *a += b;
        }
        relu_mask(&mut d_h2, h2);
        let mut d_h1 = affine_backward(&self.params, grad, &ls[2], h1, &d_h2);
        relu_mask(&mut d_h1, h1);
        let mut d_h0 = affine_backward(&self.params, grad, &ls[1], h0, &d_h1);
        relu_mask(&mut d_h0, h0);
        affine_backward(&self.params, grad, &ls[L_TRUNK0], &cache.input, &d_h0)
    }
}

/// One embedding row per training image.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// Row-major `rows × EMBEDDING_DIM`.
    pub values: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(rows: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid std");
        Self { values: (0..rows * EMBEDDING_DIM).map(|_| normal.sample(rng)).collect() }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self, AppearanceError> {
        if values.len() % EMBEDDING_DIM != 0 {
            return Err(AppearanceError::Dimension { expected: EMBEDDING_DIM, got: values.len() % EMBEDDING_DIM });
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.len() / EMBEDDING_DIM
    }

    pub fn row(&self, i: usize) -> Result<&[f64], AppearanceError> {
        if i >= self.rows() {
            return Err(AppearanceError::UnknownImage(i));
        }
        Ok(&self.values[i * EMBEDDING_DIM..(i + 1) * EMBEDDING_DIM])
    }
}
