//! Feature extractor and proxy set.
//!
//! The extractor is a small MLP whose output is L2-normalized onto the unit
//! sphere. Proxies are learnable unit vectors, one or more per class, living
//! in the same embedding space. Similarity is the cosine; the distance used
//! by the EVT machinery is `1 - cos`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::{Tape, Var};
use crate::par;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// MLP feature extractor with a unit-norm output layer.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

/// Tape handles for the model parameters, in the flattening order used by
/// the trainer (per layer: weights then bias).
pub struct ModelVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl EmbeddingModel {
    /// Random initialization with weights scaled by `1/sqrt(fan_in)`.
    pub fn new_random<R: Rng>(
        layer_dims: Vec<usize>,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "layer_dims needs at least input and output dims".into(),
            ));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale
                })
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
            activation,
        })
    }

    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != layer_dims.len() - 1 || biases.len() != weights.len() {
            return Err(Error::DimensionMismatch("layer count mismatch".into()));
        }
        for (i, pair) in layer_dims.windows(2).enumerate() {
            if weights[i].len() != pair[0] * pair[1] || biases[i].len() != pair[1] {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i} shape mismatch"
                )));
            }
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
            activation,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Map a raw feature vector to a unit-norm embedding.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "embed: input has dim {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let n_layers = self.weights.len();
        let mut cur = x.to_vec();
        for l in 0..n_layers {
            let rows = self.layer_dims[l + 1];
            let cols = self.layer_dims[l];
            let mut out = self.biases[l].clone();
            for (r, o) in out.iter_mut().enumerate().take(rows) {
                let row = &self.weights[l][r * cols..(r + 1) * cols];
                *o += row.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 < n_layers {
                for v in out.iter_mut() {
                    *v = match self.activation {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                    };
                }
            }
            cur = out;
        }
        Ok(normalize(&cur))
    }

    /// Embed a whole dataset, parallel when the `parallel` feature is on.
    pub fn embed_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let out = par::map(xs, |x| self.embed(x));
        out.into_iter().collect()
    }

    /// Always-sequential twin of [`EmbeddingModel::embed_batch`].
    pub fn embed_batch_seq(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let out = par::map_seq(xs, |x| self.embed(x));
        out.into_iter().collect()
    }

    /// Register the model parameters on a tape, in flattening order.
    pub fn register_params(&self, tape: &mut Tape) -> Result<ModelVars> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..self.weights.len() {
            weights.push(tape.param(&self.weights[l])?);
            biases.push(tape.param(&self.biases[l])?);
        }
        Ok(ModelVars { weights, biases })
    }

    /// Forward pass on the tape; mirrors [`EmbeddingModel::embed`] exactly.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &ModelVars, x: &[f64]) -> Result<Var> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "forward: input has dim {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let n_layers = self.weights.len();
        let mut cur = tape.constant(x)?;
        for l in 0..n_layers {
            let rows = self.layer_dims[l + 1];
            let cols = self.layer_dims[l];
            cur = tape.affine(vars.weights[l], vars.biases[l], cur, rows, cols)?;
            if l + 1 < n_layers {
                cur = match self.activation {
                    Activation::Tanh => tape.tanh(cur)?,
                    Activation::Relu => tape.relu(cur)?,
                };
            }
        }
        tape.normalize(cur)
    }

    /// Flatten weights and biases in the same order as `register_params`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    /// Inverse of [`EmbeddingModel::flatten`]; returns the number of values
    /// consumed.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<usize> {
        let mut offset = 0;
        for l in 0..self.weights.len() {
            let wn = self.weights[l].len();
            let bn = self.biases[l].len();
            if offset + wn + bn > flat.len() {
                return Err(Error::DimensionMismatch(
                    "unflatten: vector too short".into(),
                ));
            }
            self.weights[l].copy_from_slice(&flat[offset..offset + wn]);
            offset += wn;
            self.biases[l].copy_from_slice(&flat[offset..offset + bn]);
            offset += bn;
        }
        Ok(offset)
    }
}

/// L2-normalize with the 1e-12 norm floor.
pub fn normalize(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_eff = if norm < 1e-12 { norm + 1e-12 } else { norm };
    x.iter().map(|v| v / norm_eff).collect()
}

/// Cosine similarity of two unit vectors (their dot product).
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Distance used by the EVT machinery: `1 - cos`, in [0, 2].
pub fn proxy_distance(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - cosine_sim(a, b)).max(0.0)
}

/// Where a proxy came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProxyOrigin {
    Initial,
    Discovered { step: usize },
}

/// A learnable class representative on the unit sphere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Proxy {
    pub vector: Vec<f64>,
    pub class_id: usize,
    pub origin: ProxyOrigin,
}

impl Proxy {
    pub fn new(vector: Vec<f64>, class_id: usize, origin: ProxyOrigin) -> Self {
        Self {
            vector: normalize(&vector),
            class_id,
            origin,
        }
    }
}

/// The full set of proxies with the running class count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxySet {
    pub proxies: Vec<Proxy>,
    pub class_count: usize,
}

impl ProxySet {
    pub fn new(proxies: Vec<Proxy>, class_count: usize) -> Result<Self> {
        let set = Self {
            proxies,
            class_count,
        };
        set.validate()?;
        Ok(set)
    }

    /// Every class id in `[0, class_count)` must have at least one proxy.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.class_count];
        for p in &self.proxies {
            if p.class_id >= self.class_count {
                return Err(Error::InvalidConfig(format!(
                    "proxy class id {} out of range (class_count {})",
                    p.class_id, self.class_count
                )));
            }
            seen[p.class_id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidConfig(format!(
                "class {missing} has no proxy"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.proxies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proxies.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.proxies.first().map(|p| p.vector.len()).unwrap_or(0)
    }

    /// Indices of proxies belonging to a class.
    pub fn proxies_of_class(&self, class_id: usize) -> Vec<usize> {
        self.proxies
            .iter()
            .enumerate()
            .filter(|(_, p)| p.class_id == class_id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn has_class(&self, class_id: usize) -> bool {
        class_id < self.class_count
    }

    /// Re-project every proxy onto the unit sphere.
    pub fn renormalize(&mut self) {
        for p in self.proxies.iter_mut() {
            p.vector = normalize(&p.vector);
        }
    }

    /// Flatten proxy coordinates (proxy order).
    pub fn flatten(&self) -> Vec<f64> {
        self.proxies
            .iter()
            .flat_map(|p| p.vector.iter().copied())
            .collect()
    }

    /// Overwrite proxy coordinates from a flat vector and re-project.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<usize> {
        let dim = self.embedding_dim();
        if flat.len() < dim * self.proxies.len() {
            return Err(Error::DimensionMismatch(
                "proxy unflatten: vector too short".into(),
            ));
        }
        for (i, p) in self.proxies.iter_mut().enumerate() {
            p.vector.copy_from_slice(&flat[i * dim..(i + 1) * dim]);
        }
        self.renormalize();
        Ok(dim * self.proxies.len())
    }

    /// Register every proxy as a tape parameter, in proxy order.
    pub fn register_params(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.proxies.iter().map(|p| tape.param(&p.vector)).collect()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.proxies.iter().map(|p| p.class_id).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn embed_output_is_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = EmbeddingModel::new_random(vec![8, 16, 4], Activation::Tanh, &mut rng).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..8)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            let z = model.embed(&x).unwrap();
            let norm: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn embed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = EmbeddingModel::new_random(vec![4, 6, 3], Activation::Relu, &mut rng).unwrap();
        let x = vec![0.5, -0.1, 0.3, 0.9];
        assert_eq!(model.embed(&x).unwrap(), model.embed(&x).unwrap());
    }

    #[test]
    fn identity_network_passes_basis_vector() {
        let dim = 3;
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        let model = EmbeddingModel::from_parts(
            vec![dim, dim],
            vec![w],
            vec![vec![0.0; dim]],
            Activation::Tanh,
        )
        .unwrap();
        let out = model.embed(&e(0, dim)).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12 && out[2].abs() < 1e-12);
    }

    #[test]
    fn embed_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = EmbeddingModel::new_random(vec![4, 3], Activation::Tanh, &mut rng).unwrap();
        assert!(model.embed(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_embed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = EmbeddingModel::new_random(vec![5, 7, 4], Activation::Tanh, &mut rng).unwrap();
        let x: Vec<f64> = (0..5)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let mut tape = Tape::new();
        let vars = model.register_params(&mut tape).unwrap();
        let z = model.forward_on_tape(&mut tape, &vars, &x).unwrap();
        let plain = model.embed(&x).unwrap();
        for (a, b) in tape.value(z).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_and_distance_basics() {
        let a = e(0, 4);
        let b = e(1, 4);
        let na: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(cosine_sim(&a, &a), 1.0);
        assert_eq!(cosine_sim(&a, &na), -1.0);
        assert_eq!(cosine_sim(&a, &b), 0.0);
        assert_eq!(proxy_distance(&a, &a), 0.0);
        assert_eq!(proxy_distance(&a, &b), 1.0);
        assert_eq!(proxy_distance(&a, &na), 2.0);
    }

    #[test]
    fn normalize_floors_tiny_vectors() {
        let z = normalize(&[0.0, 0.0]);
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn proxy_set_validation() {
        let p0 = Proxy::new(e(0, 3), 0, ProxyOrigin::Initial);
        assert!(ProxySet::new(vec![p0.clone()], 1).is_ok());
        assert!(ProxySet::new(vec![p0], 2).is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model =
            EmbeddingModel::new_random(vec![3, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let flat = model.flatten();
        let consumed = model.unflatten(&flat).unwrap();
        assert_eq!(consumed, flat.len());
        assert_eq!(model.flatten(), flat);
    }
}
