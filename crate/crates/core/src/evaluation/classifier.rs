//! Per-concept binary classifiers for the classifier-based removal rate.
//!
//! The reference implementation is logistic regression over 2x2
//! average-pooled latent features. Label 1 means the concept is ABSENT, so a
//! prediction of 1 on an edited model's output counts as a removal.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::slug;

/// 2x2 average pooling over the last two axes of a `[.., H, W]` latent.
/// Odd trailing rows or columns are dropped; 1-D inputs pass through.
pub fn pool_features(image: &[f64], shape: &[usize]) -> Vec<f64> {
    if shape.len() < 2 {
        return image.to_vec();
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let channels = image.len() / (h * w).max(1);
    let (ph, pw) = (h / 2, w / 2);
    if ph == 0 || pw == 0 {
        return image.to_vec();
    }
    let mut out = Vec::with_capacity(channels * ph * pw);
    for c in 0..channels {
        let plane = &image[c * h * w..(c + 1) * h * w];
        for i in 0..ph {
            for j in 0..pw {
                let s = plane[2 * i * w + 2 * j]
                    + plane[2 * i * w + 2 * j + 1]
                    + plane[(2 * i + 1) * w + 2 * j]
                    + plane[(2 * i + 1) * w + 2 * j + 1];
                out.push(s / 4.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Fraction of the pool used for training.
    pub split: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            split: 0.8,
            epochs: 300,
            learning_rate: 0.5,
            l2: 1e-3,
            seed: 0,
        }
    }
}

/// Standardised logistic regression on pooled features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptClassifier {
    pub concept: String,
    pub backend_kind: String,
    pub latent_shape: Vec<usize>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ConceptClassifier {
    fn features(&self, image: &[f64]) -> Vec<f64> {
        pool_features(image, &self.latent_shape)
            .into_iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(f, (m, s))| (f - m) / s)
            .collect()
    }

    /// Probability that the concept is absent.
    pub fn prob_absent(&self, image: &[f64]) -> f64 {
        let z: f64 = self.features(image).iter().zip(&self.weights).map(|(f, w)| f * w).sum::<f64>() + self.bias;
        sigmoid(z)
    }

    /// 1 when the concept is judged absent, else 0.
    pub fn predict(&self, image: &[f64]) -> u8 {
        u8::from(self.prob_absent(image) >= 0.5)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn accuracy(model: &ConceptClassifier, xs: &[&Vec<f64>], ys: &[u8]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let hits = xs.iter().zip(ys).filter(|(x, y)| model.predict(x) == **y).count();
    hits as f64 / xs.len() as f64
}

/// Trains a classifier separating `present` (label 0) from `absent` (label 1) images.
pub fn train_concept_classifier(
    concept: &str,
    present: &[Vec<f64>],
    absent: &[Vec<f64>],
    latent_shape: &[usize],
    cfg: &ClassifierConfig,
) -> Result<ConceptClassifier> {
    if present.is_empty() || absent.is_empty() {
        return Err(Error::Data(format!(
            "classifier for `{concept}` needs both classes (present={}, absent={})",
            present.len(),
            absent.len()
        )));
    }
    if !(cfg.split > 0.0 && cfg.split < 1.0) {
        return Err(Error::config("split", format!("must lie in (0, 1), got {}", cfg.split)));
    }
    let dim: usize = latent_shape.iter().product();
    if present.iter().chain(absent).any(|x| x.len() != dim) {
        return Err(Error::Input(format!("every image must have shape {latent_shape:?}")));
    }
    let mut pool: Vec<(Vec<f64>, u8)> = present
        .iter()
        .map(|x| (pool_features(x, latent_shape), 0))
        .chain(absent.iter().map(|x| (pool_features(x, latent_shape), 1)))
        .collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n = pool.len();
    let n_train = ((n as f64 * cfg.split).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (train, test) = pool.split_at(n_train);

    let f = train[0].0.len();
    let mut mean = vec![0.0; f];
    for (x, _) in train {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / train.len() as f64);
    }
    let mut scale = vec![0.0; f];
    for (x, _) in train {
        scale
            .iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m).powi(2) / train.len() as f64);
    }
    scale.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    let standardized: Vec<Vec<f64>> = train
        .iter()
        .map(|(x, _)| x.iter().zip(mean.iter().zip(&scale)).map(|(v, (m, s))| (v - m) / s).collect())
        .collect();

    let mut w = vec![0.0; f];
    let mut b = 0.0;
    let inv_n = 1.0 / train.len() as f64;
    for _ in 0..cfg.epochs {
        let mut gw: Vec<f64> = w.iter().map(|wi| cfg.l2 * wi).collect();
        let mut gb = 0.0;
        for (x, (_, y)) in standardized.iter().zip(train) {
            let z: f64 = x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let err = sigmoid(z) - f64::from(*y);
            gw.iter_mut().zip(x).for_each(|(g, a)| *g += err * a * inv_n);
            gb += err * inv_n;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= cfg.learning_rate * g);
        b -= cfg.learning_rate * gb;
    }

    let mut model = ConceptClassifier {
        concept: concept.to_string(),
        backend_kind: "pooled-logistic".into(),
        latent_shape: latent_shape.to_vec(),
        train_accuracy: 0.0,
        test_accuracy: 0.0,
        train_size: train.len(),
        test_size: test.len(),
        mean,
        scale,
        weights: w,
        bias: b,
    };
    // the split holds pooled features already, so score it with a pass-through shape
    let unpool = |set: &[(Vec<f64>, u8)]| -> (Vec<Vec<f64>>, Vec<u8>) {
        set.iter().map(|(x, y)| (x.clone(), *y)).unzip()
    };
    let (tx, ty) = unpool(train);
    let (vx, vy) = unpool(test);
    let pooled_model = ConceptClassifier {
        latent_shape: vec![f],
        ..model.clone()
    };
    model.train_accuracy = accuracy(&pooled_model, &tx.iter().collect::<Vec<_>>(), &ty);
    model.test_accuracy = if vx.is_empty() {
        model.train_accuracy
    } else {
        accuracy(&pooled_model, &vx.iter().collect::<Vec<_>>(), &vy)
    };
    log::info!(
        "classifier `{concept}`: train acc {:.3} (n={}), test acc {:.3} (n={})",
        model.train_accuracy,
        model.train_size,
        model.test_accuracy,
        model.test_size
    );
    Ok(model)
}

/// Concept name to classifier, backed by `<dir>/<slug>.json` artifacts.
#[derive(Debug)]
pub struct ClassifierRegistry {
    dir: PathBuf,
    loaded: HashMap<String, ConceptClassifier>,
}

impl ClassifierRegistry {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            loaded: HashMap::new(),
        }
    }

    pub fn artifact_path(&self, concept: &str) -> PathBuf {
        self.dir.join(format!("{}.json", slug(concept)))
    }

    /// Returns the cached classifier, loading it from disk or training it with `train` on first use.
    pub fn get_or_train(
        &mut self,
        concept: &str,
        train: impl FnOnce() -> Result<ConceptClassifier>,
    ) -> Result<&ConceptClassifier> {
        if !self.loaded.contains_key(concept) {
            let path = self.artifact_path(concept);
            let model = if path.exists() {
                ConceptClassifier::load(&path)?
            } else {
                let m = train()?;
                m.save(&path)?;
                m
            };
            self.loaded.insert(concept.to_string(), model);
        }
        Ok(&self.loaded[concept])
    }
}
