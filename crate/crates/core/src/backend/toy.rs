use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DiffusionBackend, NoiseSchedule};
use crate::error::{Error, Result};
use crate::text::{fnv1a, tokens};

pub(crate) const KIND: &str = "toy";

/// Architecture of the desk-scale denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub latent_shape: Vec<usize>,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Hashed token vocabulary size.
    pub vocab_buckets: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Scale of the random off-identity part of the latent mixing matrix.
    pub mixing: f64,
    /// Whether training updates the mixing matrix `A`. It is shared by every
    /// prompt, so leaving it frozen confines edits to the text pathway.
    pub train_mixing: bool,
    pub init_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            latent_shape: vec![2, 8, 8],
            t_max: 50,
            beta_start: 0.01,
            beta_end: 0.2,
            vocab_buckets: 512,
            embed_dim: 16,
            hidden: 32,
            mixing: 0.05,
            train_mixing: false,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    dim: usize,
    embed: usize,
    hidden: usize,
    emb: usize,
    u: usize,
    w_t: usize,
    b1: usize,
    v: usize,
    b2: usize,
    a: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &ToyConfig) -> Self {
        let dim: usize = cfg.latent_shape.iter().product();
        let (embed, hidden) = (cfg.embed_dim, cfg.hidden);
        let emb = 0;
        let u = emb + cfg.vocab_buckets * embed;
        let w_t = u + hidden * embed;
        let b1 = w_t + hidden;
        let v = b1 + hidden;
        let b2 = v + dim * hidden;
        let a = b2 + dim;
        let total = a + dim * dim;
        Self {
            dim,
            embed,
            hidden,
            emb,
            u,
            w_t,
            b1,
            v,
            b2,
            a,
            total,
        }
    }
}

/// Small nonlinear noise predictor.
///
/// The text is pooled into `h` (mean of hashed token embeddings), mapped to a
/// clean-latent estimate `m = V tanh(U h + w_t tau + b1) + b2`, and the noise
/// estimate is `(A x - sqrt(abar_t) m) / sqrt(1 - abar_t)`. With `A = I` this
/// is the exact denoiser for a point mass at `m`, so DDIM sampling lands on
/// `m`; the random part of `A` adds seed-dependent variation.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    cfg: ToyConfig,
    layout: Layout,
    schedule: NoiseSchedule,
    params: Vec<f64>,
}

struct Activations {
    ids: Vec<usize>,
    h: Vec<f64>,
    tau: f64,
    z: Vec<f64>,
}

impl ToyBackend {
    /// Randomly initialized model; `cfg.init_seed` fixes the weights.
    pub fn new(cfg: ToyConfig) -> Self {
        let layout = Layout::new(&cfg);
        let schedule = NoiseSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
        let mut params = vec![0.0; layout.total];
        let l = layout;
        let u_scale = 2.0 / (l.embed as f64).sqrt();
        let v_scale = 1.5 / (l.hidden as f64).sqrt();
        let a_scale = cfg.mixing / (l.dim as f64).sqrt();
        for p in &mut params[l.emb..l.u] {
            *p = normal();
        }
        for p in &mut params[l.u..l.w_t] {
            *p = u_scale * normal();
        }
        for p in &mut params[l.w_t..l.b1] {
            *p = normal();
        }
        for p in &mut params[l.b1..l.v] {
            *p = 0.1 * normal();
        }
        for p in &mut params[l.v..l.b2] {
            *p = v_scale * normal();
        }
        for p in &mut params[l.b2..l.a] {
            *p = 0.3 * normal();
        }
        for i in 0..l.dim {
            for j in 0..l.dim {
                let eye = if i == j { 1.0 } else { 0.0 };
                params[l.a + i * l.dim + j] = eye + a_scale * normal();
            }
        }
        Self {
            cfg,
            layout,
            schedule,
            params,
        }
    }

    pub(crate) fn from_parts(config: &serde_json::Value, params: Vec<f64>) -> Result<Self> {
        let cfg: ToyConfig = serde_json::from_value(config.clone())
            .map_err(|e| Error::Backend(format!("bad toy config: {e}")))?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::Backend(format!(
                "toy backend expects {} parameters, blob has {}",
                layout.total,
                params.len()
            )));
        }
        let schedule = NoiseSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end);
        Ok(Self {
            cfg,
            layout,
            schedule,
            params,
        })
    }

    pub fn config_ref(&self) -> &ToyConfig {
        &self.cfg
    }

    fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.cfg.vocab_buckets as u64) as usize
    }

    fn activations(&self, t: usize, text: Option<&str>) -> Activations {
        let l = self.layout;
        let p = &self.params;
        let ids: Vec<usize> = text
            .map(|s| tokens(s).iter().map(|tok| self.bucket(tok)).collect())
            .unwrap_or_default();
        let mut h = vec![0.0; l.embed];
        if !ids.is_empty() {
            for &id in &ids {
                let row = &p[l.emb + id * l.embed..l.emb + (id + 1) * l.embed];
                for (hk, r) in h.iter_mut().zip(row) {
                    *hk += r;
                }
            }
            let n = ids.len() as f64;
            h.iter_mut().for_each(|v| *v /= n);
        }
        let tau = t as f64 / self.cfg.t_max as f64;
        let z = (0..l.hidden)
            .map(|k| {
                let row = &p[l.u + k * l.embed..l.u + (k + 1) * l.embed];
                let pre: f64 = row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()
                    + p[l.w_t + k] * tau
                    + p[l.b1 + k];
                pre.tanh()
            })
            .collect();
        Activations { ids, h, tau, z }
    }

    /// Clean-latent estimate `m` for a prompt at timestep `t`.
    pub fn clean_estimate(&self, t: usize, text: Option<&str>) -> Vec<f64> {
        let act = self.activations(t, text);
        self.clean_from(&act.z)
    }

    fn clean_from(&self, z: &[f64]) -> Vec<f64> {
        let l = self.layout;
        let p = &self.params;
        (0..l.dim)
            .map(|i| {
                let row = &p[l.v + i * l.hidden..l.v + (i + 1) * l.hidden];
                row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + p[l.b2 + i]
            })
            .collect()
    }
}

impl DiffusionBackend for ToyBackend {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn latent_shape(&self) -> &[usize] {
        &self.cfg.latent_shape
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn forward(&self, x: &[f64], t: usize, text: Option<&str>) -> Vec<f64> {
        let l = self.layout;
        let act = self.activations(t, text);
        let m = self.clean_from(&act.z);
        let (sa, sb) = (self.schedule.signal(t), self.schedule.noise(t));
        (0..l.dim)
            .map(|i| {
                let row = &self.params[l.a + i * l.dim..l.a + (i + 1) * l.dim];
                let ax: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                (ax - sa * m[i]) / sb
            })
            .collect()
    }

    fn backward(&self, x: &[f64], t: usize, text: Option<&str>, upstream: &[f64], grad: &mut [f64]) {
        let l = self.layout;
        let p = &self.params;
        let act = self.activations(t, text);
        let (sa, sb) = (self.schedule.signal(t), self.schedule.noise(t));

        // eps = (A x - sa m) / sb
        for i in (0..l.dim).filter(|_| self.cfg.train_mixing) {
            let gi = upstream[i] / sb;
            if gi != 0.0 {
                let row = &mut grad[l.a + i * l.dim..l.a + (i + 1) * l.dim];
                for (g, xj) in row.iter_mut().zip(x) {
                    *g += gi * xj;
                }
            }
        }
        let gm: Vec<f64> = upstream.iter().map(|g| -sa / sb * g).collect();

        // m = V z + b2
        let mut gz = vec![0.0; l.hidden];
        for i in 0..l.dim {
            grad[l.b2 + i] += gm[i];
            let off = l.v + i * l.hidden;
            for k in 0..l.hidden {
                grad[off + k] += gm[i] * act.z[k];
                gz[k] += p[off + k] * gm[i];
            }
        }

        // z = tanh(U h + w_t tau + b1)
        let gpre: Vec<f64> = gz.iter().zip(&act.z).map(|(g, z)| g * (1.0 - z * z)).collect();
        let mut gh = vec![0.0; l.embed];
        for k in 0..l.hidden {
            grad[l.w_t + k] += gpre[k] * act.tau;
            grad[l.b1 + k] += gpre[k];
            let off = l.u + k * l.embed;
            for j in 0..l.embed {
                grad[off + j] += gpre[k] * act.h[j];
                gh[j] += p[off + j] * gpre[k];
            }
        }

        // h = mean of token embeddings
        if !act.ids.is_empty() {
            let n = act.ids.len() as f64;
            for &id in &act.ids {
                let off = l.emb + id * l.embed;
                for j in 0..l.embed {
                    grad[off + j] += gh[j] / n;
                }
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
        serde_json::to_value(&self.cfg).expect("toy config serializes")
    }

    fn boxed_clone(&self) -> Box<dyn DiffusionBackend> {
        Box::new(self.clone())
    }
}
