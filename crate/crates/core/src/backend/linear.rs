use serde::{Deserialize, Serialize};

use super::{DiffusionBackend, NoiseSchedule};
use crate::error::{Error, Result};
use crate::text::{fnv1a, tokens};

pub(crate) const KIND: &str = "toy-linear";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearConfig {
    latent_shape: Vec<usize>,
    embed_dim: usize,
    vocab_buckets: usize,
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
}

/// Affine noise predictor `eps = W x + C h(text) + b`, ignoring the timestep.
///
/// `h` is the mean of hashed token embeddings (zero without text). All
/// parameters start at zero; tests set the blocks they need.
#[derive(Debug, Clone)]
pub struct LinearBackend {
    cfg: LinearConfig,
    schedule: NoiseSchedule,
    params: Vec<f64>,
}

impl LinearBackend {
    pub fn zeros(dim: usize, embed_dim: usize, t_max: usize) -> Self {
        let cfg = LinearConfig {
            latent_shape: vec![dim],
            embed_dim,
            vocab_buckets: 64,
            t_max,
            beta_start: 0.01,
            beta_end: 0.2,
        };
        Self::with_config(cfg)
    }

    /// `eps = W x` with the given row-major weights.
    pub fn from_weights(weights: &[Vec<f64>]) -> Self {
        let dim = weights.len();
        let mut b = Self::zeros(dim, 2, 50);
        for (i, row) in weights.iter().enumerate() {
            assert_eq!(row.len(), dim, "weights must be square");
            b.weight_mut()[i * dim..(i + 1) * dim].copy_from_slice(row);
        }
        b
    }

    fn with_config(cfg: LinearConfig) -> Self {
        let schedule = NoiseSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end);
        let n = Self::param_count(&cfg);
        Self {
            cfg,
            schedule,
            params: vec![0.0; n],
        }
    }

    fn param_count(cfg: &LinearConfig) -> usize {
        let d: usize = cfg.latent_shape.iter().product();
        d * d + d * cfg.embed_dim + cfg.vocab_buckets * cfg.embed_dim + d
    }

    pub(crate) fn from_parts(config: &serde_json::Value, params: Vec<f64>) -> Result<Self> {
        let cfg: LinearConfig = serde_json::from_value(config.clone())
            .map_err(|e| Error::Backend(format!("bad linear config: {e}")))?;
        if params.len() != Self::param_count(&cfg) {
            return Err(Error::Backend("linear backend parameter count mismatch".into()));
        }
        let mut b = Self::with_config(cfg);
        b.params = params;
        Ok(b)
    }

    fn dim(&self) -> usize {
        self.cfg.latent_shape.iter().product()
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let d = self.dim();
        let e = self.cfg.embed_dim;
        let w = 0;
        let c = d * d;
        let emb = c + d * e;
        let b = emb + self.cfg.vocab_buckets * e;
        (w, c, emb, b)
    }

    /// Row-major `D x D` latent weights.
    pub fn weight_mut(&mut self) -> &mut [f64] {
        let (w, c, _, _) = self.offsets();
        &mut self.params[w..c]
    }

    /// Row-major `D x E` conditioning projection.
    pub fn projection_mut(&mut self) -> &mut [f64] {
        let (_, c, emb, _) = self.offsets();
        &mut self.params[c..emb]
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        let (_, _, _, b) = self.offsets();
        &mut self.params[b..]
    }

    /// Sets the embedding row that `token` hashes to.
    pub fn set_token_embedding(&mut self, token: &str, row: &[f64]) {
        let e = self.cfg.embed_dim;
        assert_eq!(row.len(), e);
        let (_, _, emb, _) = self.offsets();
        let id = self.bucket(token);
        self.params[emb + id * e..emb + (id + 1) * e].copy_from_slice(row);
    }

    fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.to_lowercase().as_bytes()) % self.cfg.vocab_buckets as u64) as usize
    }

    fn pooled(&self, text: Option<&str>) -> (Vec<usize>, Vec<f64>) {
        let e = self.cfg.embed_dim;
        let (_, _, emb, _) = self.offsets();
        let ids: Vec<usize> = text
            .map(|s| tokens(s).iter().map(|t| self.bucket(t)).collect())
            .unwrap_or_default();
        let mut h = vec![0.0; e];
        if !ids.is_empty() {
            for &id in &ids {
                for (hk, w) in h.iter_mut().zip(&self.params[emb + id * e..emb + (id + 1) * e]) {
                    *hk += w;
                }
            }
            let n = ids.len() as f64;
            h.iter_mut().for_each(|v| *v /= n);
        }
        (ids, h)
    }
}

impl DiffusionBackend for LinearBackend {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn latent_shape(&self) -> &[usize] {
        &self.cfg.latent_shape
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn forward(&self, x: &[f64], _t: usize, text: Option<&str>) -> Vec<f64> {
        let d = self.dim();
        let e = self.cfg.embed_dim;
        let (w, c, _, b) = self.offsets();
        let (_, h) = self.pooled(text);
        (0..d)
            .map(|i| {
                let wx: f64 = (0..d).map(|j| self.params[w + i * d + j] * x[j]).sum();
                let ch: f64 = (0..e).map(|k| self.params[c + i * e + k] * h[k]).sum();
                wx + ch + self.params[b + i]
            })
            .collect()
    }

    fn backward(&self, x: &[f64], _t: usize, text: Option<&str>, upstream: &[f64], grad: &mut [f64]) {
        let d = self.dim();
        let e = self.cfg.embed_dim;
        let (w, c, emb, b) = self.offsets();
        let (ids, h) = self.pooled(text);
        let mut gh = vec![0.0; e];
        for i in 0..d {
            let g = upstream[i];
            grad[b + i] += g;
            for j in 0..d {
                grad[w + i * d + j] += g * x[j];
            }
            for k in 0..e {
                grad[c + i * e + k] += g * h[k];
                gh[k] += g * self.params[c + i * e + k];
            }
        }
        let n = ids.len() as f64;
        for &id in &ids {
            for k in 0..e {
                grad[emb + id * e + k] += gh[k] / n;
            }
        }
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn config(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("linear config serializes")
    }

    fn boxed_clone(&self) -> Box<dyn DiffusionBackend> {
        Box::new(self.clone())
    }
}
