use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cosine, dot, norm, Matrix};

use super::{Model, MultimodalInput, Params, NO, YES};

/// A labelled prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: MultimodalInput,
    pub yes: bool,
}

/// Two-way cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: [f64; 2], yes: bool) -> (f64, [f64; 2]) {
    let target = if yes { YES } else { NO };
    let max = logits[0].max(logits[1]);
    let lse = max + ((logits[0] - max).exp() + (logits[1] - max).exp()).ln();
    let probs = [(logits[0] - lse).exp(), (logits[1] - lse).exp()];
    let mut grad = probs;
    grad[target] -= 1.0;
    (lse - logits[target], grad)
}

/// Mean cross-entropy over the batch and its exact gradient with respect to
/// every parameter.
pub fn loss_and_grads(model: &Model, batch: &[Example]) -> Result<(f64, Params)> {
    let refs: Vec<&Example> = batch.iter().collect();
    batch_loss_and_grads(model, &refs)
}

fn batch_loss_and_grads(model: &Model, batch: &[&Example]) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(Error::data("loss over an empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = model.params().zeros_like();
    let mut total = 0.0;
    for &ex in batch {
        let (logits, cache, _) = model.run(&ex.input, false)?;
        let (loss, d) = cross_entropy(logits, ex.yes);
        total += loss;
        model.backward(&ex.input, &cache, [d[0] * scale, d[1] * scale], &mut grads);
    }
    Ok((total * scale, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over an ordered list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: Vec<&Matrix>) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (k, (w, &gk)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
}

/// Mini-batch Adam over `examples`, visiting them in reshuffled epochs.
/// `on_step` sees every log entry as it is produced.
pub fn train(
    model: &mut Model,
    examples: &[Example],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainLogEntry),
) -> Result<Vec<TrainLogEntry>> {
    if examples.is_empty() {
        return Err(Error::data("no training examples"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_loss_and_grads(model, &batch)?;
        let g = grads.named_tensors().into_iter().map(|(_, m)| m).collect();
        adam.step(model.params_mut().tensors_mut(), g);
        let entry = TrainLogEntry { step, loss };
        on_step(&entry);
        log.push(entry);
    }
    if !model.params().is_finite() {
        return Err(Error::Degenerate("training diverged to non-finite parameters".into()));
    }
    Ok(log)
}

/// Trains only the projector so that the mean-pooled image embedding of each
/// grid points toward the embedding of its caption token. Returns the mean
/// cosine similarity before each step and after the last one.
pub fn align_projector(
    model: &mut Model,
    pairs: &[(Matrix, usize, usize)],
    steps: usize,
    adam: AdamConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::data("no alignment pairs"));
    }
    let e = model.config().embed_dim;
    // Encoder features do not depend on the projector.
    let mut pooled_features = Vec::with_capacity(pairs.len());
    for (patches, grid_cols, caption) in pairs {
        model.encode_image(patches, *grid_cols)?;
        model.embed_token(*caption)?;
        let (_, cache) = model.encode_cached(patches, *grid_cols);
        let mut mean = vec![0.0; e];
        for r in 0..cache.features.rows() {
            for (m, f) in mean.iter_mut().zip(cache.features.row(r)) {
                *m += f;
            }
        }
        let k = cache.features.rows() as f64;
        mean.iter_mut().for_each(|m| *m /= k);
        pooled_features.push(mean);
    }

    let project = |p: &Params, feat: &[f64]| {
        let mut a = p.proj_b.as_slice().to_vec();
        for (c, &f) in feat.iter().enumerate() {
            for (o, w) in a.iter_mut().zip(p.proj_w.row(c)) {
                *o += f * w;
            }
        }
        a
    };
    let mut opt = Adam::new(adam);
    let mut history = Vec::with_capacity(steps + 1);
    let scale = 1.0 / pairs.len() as f64;
    for _ in 0..steps {
        let p = model.params();
        let mut gw = Matrix::zeros(e, e);
        let mut gb = Matrix::zeros(1, e);
        let mut mean_cos = 0.0;
        for (feat, (_, _, caption)) in pooled_features.iter().zip(pairs) {
            let target = p.tok_emb.row(*caption);
            let a = project(p, feat);
            let (na, nt) = (norm(&a), norm(target));
            if na == 0.0 || nt == 0.0 {
                return Err(Error::Degenerate("zero-norm embedding during alignment".into()));
            }
            let cos = dot(&a, target) / (na * nt);
            mean_cos += cos * scale;
            // d(-cos)/da = -(t / (|a||t|) - cos a / |a|²)
            let da: Vec<f64> = a
                .iter()
                .zip(target)
                .map(|(ai, ti)| -(ti / (na * nt) - cos * ai / (na * na)) * scale)
                .collect();
            for (c, &f) in feat.iter().enumerate() {
                for (g, d) in gw.row_mut(c).iter_mut().zip(&da) {
                    *g += f * d;
                }
            }
            for (g, d) in gb.as_mut_slice().iter_mut().zip(&da) {
                *g += d;
            }
        }
        history.push(mean_cos);
        let params = model.params_mut();
        opt.step(vec![&mut params.proj_w, &mut params.proj_b], vec![&gw, &gb]);
    }
    let p = model.params();
    let mut last = 0.0;
    for (feat, (_, _, caption)) in pooled_features.iter().zip(pairs) {
        last += cosine(&project(p, feat), p.tok_emb.row(*caption))? * scale;
    }
    history.push(last);
    Ok(history)
}
