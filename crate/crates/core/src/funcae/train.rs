use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor};
use crate::netrep::MlpSpec;
use crate::scalar::Scalar;

use super::graph::{encode_batch, Binder, Gates};
use super::loss::{batch_graph, LossKind};
use super::{AeError, AutoencoderParams, EmbeddingStats};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Networks per tape. Batches are cut into chunks of this size that are
    /// differentiated independently and summed in order, so results do not
    /// depend on the number of worker threads.
    pub chunk: usize,
    pub gates: Gates,
}

impl TrainConfig {
    pub fn new(loss: LossKind, seed: u64) -> Self {
        Self {
            batch: 32,
            epochs: 1,
            lr: 3e-4,
            loss,
            seed,
            chunk: 8,
            gates: Gates::StraightThrough,
        }
    }

    pub fn validate(&self) -> Result<(), AeError> {
        if self.batch == 0 || self.epochs == 0 || self.chunk == 0 {
            return Err(AeError::Invalid("batch, epochs and chunk must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(AeError::Invalid(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-network loss over the epoch, measured before each update.
    pub mean_loss: f64,
    pub batches: usize,
}

#[derive(Debug, Error)]
pub enum TrainError<S: Scalar> {
    #[error(transparent)]
    Ae(#[from] AeError),
    #[error("loss became non-finite in epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        /// Parameters at the end of the last completed epoch.
        last_good: Box<AutoencoderParams<S>>,
    },
    #[error("checkpoint failed: {0}")]
    Checkpoint(#[source] std::io::Error),
}

/// First-order adaptive-moment optimiser with the usual decay constants.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(shapes: impl Iterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = shapes.collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    /// Applies one update; `grads[j] = None` means a zero gradient.
    pub fn update(&mut self, params: &mut [Arc<Tensor<S>>], grads: &[Option<Tensor<S>>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = S::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (S::lit(lr), S::lit(self.eps));
        for (j, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[j], &mut self.v[j]);
            let g = grads[j].as_ref().map(|g| g.data());
            if lr == S::zero() {
                // Still advance the moments, but leave the values alone.
                for k in 0..m.len() {
                    let gk = g.map_or(S::zero(), |g| g[k]);
                    m[k] = b1 * m[k] + (S::one() - b1) * gk;
                    v[k] = b2 * v[k] + (S::one() - b2) * gk * gk;
                }
                continue;
            }
            let data = Arc::make_mut(p).data_mut();
            for k in 0..data.len() {
                let gk = g.map_or(S::zero(), |g| g[k]);
                m[k] = b1 * m[k] + (S::one() - b1) * gk;
                v[k] = b2 * v[k] + (S::one() - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                data[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Loss and parameter gradients of one batch, chunked and reduced in order.
pub(crate) fn batch_gradients<S: Scalar>(
    params: &AutoencoderParams<S>,
    batch: &[(&MlpSpec<S>, &Tensor<S>)],
    x: &Arc<Tensor<S>>,
    kind: LossKind,
    gates: Gates,
    chunk: usize,
) -> Result<(S, Vec<Option<Tensor<S>>>), AeError> {
    let parts: Vec<(S, Vec<(usize, Tensor<S>)>)> = batch
        .par_chunks(chunk)
        .map(|c| {
            let mut tape = Tape::new();
            let mut b = Binder::new(params, true);
            let g = batch_graph(&mut tape, &mut b, c, x, kind, gates)?;
            tape.check_finite()?;
            let loss = tape.value(g.total).item();
            let mut grads = tape.backward(g.total, &Tensor::scalar(S::one()))?;
            let out = b.bound().filter_map(|(i, v)| grads.take(v).map(|t| (i, t))).collect();
            Ok((loss, out))
        })
        .collect::<Result<_, AeError>>()?;
    let mut total = S::zero();
    let mut grads: Vec<Option<Tensor<S>>> = vec![None; params.tensors.len()];
    for (loss, gs) in parts {
        total += loss;
        for (i, g) in gs {
            match &mut grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
    }
    Ok((total, grads))
}

/// Summed loss of `batch` and its gradient wrt every parameter tensor
/// (`None` for tensors the batch does not reach).
pub fn loss_and_gradients<S: Scalar>(
    params: &AutoencoderParams<S>,
    batch: &[(MlpSpec<S>, Tensor<S>)],
    grid: &Tensor<S>,
    kind: LossKind,
    gates: Gates,
) -> Result<(S, Vec<Option<Tensor<S>>>), AeError> {
    let refs: Vec<(&MlpSpec<S>, &Tensor<S>)> = batch.iter().map(|(s, y)| (s, y)).collect();
    batch_gradients(params, &refs, &Arc::new(grid.clone()), kind, gates, batch.len().max(1))
}

/// Mean and population standard deviation of the embeddings of `specs`.
pub fn embedding_stats<S: Scalar>(params: &AutoencoderParams<S>, specs: &[MlpSpec<S>]) -> Result<EmbeddingStats, AeError> {
    if specs.is_empty() {
        return Err(AeError::Invalid("no networks to summarise".into()));
    }
    let zs = encode_batch(params, specs)?;
    let d = params.config.d_z;
    let n = zs.len() as f64;
    let mut mean = vec![0.0; d];
    for z in &zs {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v.to_f64_lossy() / n;
        }
    }
    let mut std = vec![0.0; d];
    for z in &zs {
        for ((s, v), m) in std.iter_mut().zip(z).zip(&mean) {
            *s += (v.to_f64_lossy() - m).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt();
    }
    Ok(EmbeddingStats { mean, std })
}

/// Trains `params` on `corpus` (networks with their outputs on `grid`).
///
/// After every epoch the parameters are rounded to 32-bit values, the
/// embedding statistics are refreshed over the corpus and `on_epoch` is
/// called, typically to write a checkpoint. A non-finite loss aborts and
/// hands back the state of the last completed epoch.
pub fn train_autoencoder<S, F>(
    cfg: &TrainConfig,
    corpus: &[(MlpSpec<S>, Tensor<S>)],
    grid: &Tensor<S>,
    mut params: AutoencoderParams<S>,
    mut on_epoch: F,
) -> Result<(AutoencoderParams<S>, Vec<EpochLog>), TrainError<S>>
where
    S: Scalar,
    F: FnMut(&EpochLog, &AutoencoderParams<S>) -> std::io::Result<()>,
{
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(AeError::Invalid("empty corpus".into()).into());
    }
    let x = Arc::new(grid.clone());
    let specs: Vec<MlpSpec<S>> = corpus.iter().map(|(s, _)| s.clone()).collect();
    let mut adam = Adam::new(params.tensors.iter().map(|t| t.numel()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut last_good = params.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<(&MlpSpec<S>, &Tensor<S>)> = idx.iter().map(|&i| (&corpus[i].0, &corpus[i].1)).collect();
            let (loss, grads) = match batch_gradients(&params, &batch, &x, cfg.loss, cfg.gates, cfg.chunk) {
                Ok(r) => r,
                Err(AeError::Diff(DiffError::NonFinite { .. })) => {
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch: bi,
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let grads_finite = grads.iter().flatten().all(|g| g.is_finite());
            if !loss.is_finite() || !grads_finite {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    last_good: Box::new(last_good),
                });
            }
            sum += loss.to_f64_lossy();
            batches += 1;
            adam.update(&mut params.tensors, &grads, cfg.lr);
        }
        params.snap_to_f32();
        params.stats = Some(embedding_stats(&params, &specs)?);
        params.snap_to_f32();
        let log = EpochLog {
            epoch,
            mean_loss: sum / corpus.len() as f64,
            batches,
        };
        on_epoch(&log, &params).map_err(TrainError::Checkpoint)?;
        logs.push(log);
        last_good = params.clone();
    }
    Ok((params, logs))
}

/// Mean per-network loss of `corpus` under `params`, without updates.
pub fn corpus_loss<S: Scalar>(
    params: &AutoencoderParams<S>,
    corpus: &[(MlpSpec<S>, Tensor<S>)],
    grid: &Tensor<S>,
    kind: LossKind,
    gates: Gates,
    chunk: usize,
) -> Result<f64, AeError> {
    let x = Arc::new(grid.clone());
    let refs: Vec<(&MlpSpec<S>, &Tensor<S>)> = corpus.iter().map(|(s, y)| (s, y)).collect();
    let parts: Vec<S> = refs
        .par_chunks(chunk.max(1))
        .map(|c| {
            let mut tape = Tape::new();
            let mut b = Binder::new(params, false);
            let g = batch_graph(&mut tape, &mut b, c, &x, kind, gates)?;
            tape.check_finite()?;
            Ok(tape.value(g.total).item())
        })
        .collect::<Result<_, AeError>>()?;
    Ok(parts.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / corpus.len() as f64)
}
