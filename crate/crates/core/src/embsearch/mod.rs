//! Gradient search in the embedding space for a network that fits a dataset.
//!
//! For decoder `i` the loss is the squared error of the decoded network on a
//! minibatch plus `alpha * (0.1 * |W|_1 + SoftCount(W, t))`. The embedding
//! moves along the full gradient; the threshold `t` moves along the gradient
//! of the penalty only and is projected back to `t >= 0`. The returned
//! network is hard-decoded and pruned at the final `t`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{logistic, DiffError, Tape, Tensor, Var};
use crate::funcae::graph::{decode_graph, sample_matrix, tape_net, tape_net_forward, Binder};
use crate::funcae::{decode_all, mpe, AeError, AutoencoderParams, Gates, MPE_EPS};
use crate::genlab::{FunctionalDataset, Part};
use crate::netrep::MlpSpec;
use crate::scalar::Scalar;

/// Scale of the L1 term inside the penalty.
pub const L1_SCALE: f64 = 0.1;
/// Height and steepness of each SoftCount sigmoid.
pub const SOFT_COUNT_HEIGHT: f64 = 0.5;
pub const SOFT_COUNT_STEEPNESS: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error(transparent)]
    Ae(#[from] AeError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint has no embedding statistics")]
    MissingStats,
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite search loss at iteration {iteration} (decoder {decoder}, restart {restart})")]
    NonFinite {
        decoder: usize,
        restart: usize,
        iteration: usize,
    },
}

/// Which reading of the SoftCount term to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftCountForm {
    /// `0.5 * sum_j sigmoid(10 (|w_j| - t))`: a smooth count of weights above `t`.
    #[default]
    PerElement,
    /// `0.5 * sigmoid(10 * sum_j |w_j - t|)`: one sigmoid of the aggregate.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// `z <- z - lr * grad`.
    #[default]
    Gd,
    /// Adaptive moments on `z` (the threshold always uses plain steps).
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub iterations: usize,
    pub lr_z: f64,
    pub lr_t: f64,
    pub alpha: f64,
    /// Rows per step; `None` uses the whole train split every step.
    pub minibatch: Option<usize>,
    /// 1-based decoder depths to search; empty means all.
    pub decoders: Vec<usize>,
    pub restarts: usize,
    pub seed: u64,
    pub soft_count: SoftCountForm,
    pub gates: Gates,
    pub optimizer: Optimizer,
    /// Validation MPE is recorded every this many iterations (0 = never).
    pub val_every: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            lr_z: 1e-2,
            lr_t: 1e-3,
            alpha: 0.0,
            minibatch: Some(256),
            decoders: Vec::new(),
            restarts: 1,
            seed: 0,
            soft_count: SoftCountForm::PerElement,
            gates: Gates::StraightThrough,
            optimizer: Optimizer::Gd,
            val_every: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.lr_z >= 0.0 && self.lr_t >= 0.0 && self.lr_z.is_finite() && self.lr_t.is_finite()) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if self.minibatch == Some(0) {
            return bad("minibatch must be positive");
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        Ok(())
    }
}

/// Draws `mean + std * N(0, 1)` per dimension from the stored statistics.
pub fn sample_embedding<S: Scalar, R: Rng + ?Sized>(params: &AutoencoderParams<S>, rng: &mut R) -> Result<Vec<S>, SearchError> {
    let stats = params.stats.as_ref().ok_or(SearchError::MissingStats)?;
    Ok(stats
        .mean
        .iter()
        .zip(&stats.std)
        .map(|(m, s)| {
            let e: f64 = rng.sample(StandardNormal);
            S::lit(m + s * e)
        })
        .collect())
}

/// SoftCount of `weights` at threshold `t`.
pub fn soft_count(weights: &[f64], t: f64, form: SoftCountForm) -> f64 {
    match form {
        SoftCountForm::PerElement => weights
            .iter()
            .map(|w| SOFT_COUNT_HEIGHT * logistic(SOFT_COUNT_STEEPNESS * (w.abs() - t)))
            .sum(),
        SoftCountForm::Literal => {
            let l1: f64 = weights.iter().map(|w| (w - t).abs()).sum();
            SOFT_COUNT_HEIGHT * logistic(SOFT_COUNT_STEEPNESS * l1)
        }
    }
}

/// `alpha * (0.1 * sum |w| + SoftCount(W, t))`.
pub fn sparsity_penalty(weights: &[f64], t: f64, alpha: f64, form: SoftCountForm) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    let l1: f64 = weights.iter().map(|w| w.abs()).sum();
    alpha * (L1_SCALE * l1 + soft_count(weights, t, form))
}

/// Records the penalty of `weights` (any shapes) at threshold `t` (shape `[1]`).
pub(crate) fn penalty_graph<S: Scalar>(tape: &mut Tape<S>, weights: &[Var], t: Var, alpha: f64, form: SoftCountForm) -> Var {
    let flat: Vec<Var> = weights
        .iter()
        .map(|&w| {
            let n = tape.value(w).numel();
            tape.reshape(w, &[n, 1])
        })
        .collect();
    let w = if flat.len() == 1 { flat[0] } else { tape.concat(&flat, 0) };
    let neg_t = tape.scale(t, -S::one());
    let abs = tape.abs(w);
    let l1 = tape.sum(abs);
    let l1 = tape.scale(l1, S::lit(L1_SCALE));
    let count = match form {
        SoftCountForm::PerElement => {
            let shifted = tape.add_bias(abs, neg_t);
            let steep = tape.scale(shifted, S::lit(SOFT_COUNT_STEEPNESS));
            let s = tape.sigmoid(steep);
            tape.sum(s)
        }
        SoftCountForm::Literal => {
            let shifted = tape.add_bias(w, neg_t);
            let a = tape.abs(shifted);
            let total = tape.sum(a);
            let steep = tape.scale(total, S::lit(SOFT_COUNT_STEEPNESS));
            tape.sigmoid(steep)
        }
    };
    let count = tape.scale(count, S::lit(SOFT_COUNT_HEIGHT));
    let inner = tape.add(l1, count);
    tape.scale(inner, S::lit(alpha))
}

/// One recorded evaluation of the search loss.
pub struct SearchEval<S> {
    pub loss: S,
    pub data_term: S,
    pub penalty: S,
    pub grad_z: Vec<S>,
    /// Derivative of the penalty alone wrt `t`.
    pub grad_t: S,
}

/// Search loss of decoder `decoder` at `(z, t)` on rows `(x, y)`, with gradients.
#[allow(clippy::too_many_arguments)]
pub fn search_loss<S: Scalar>(
    params: &AutoencoderParams<S>,
    z: &[S],
    t: S,
    decoder: usize,
    x: &Arc<Tensor<S>>,
    y: &Arc<Tensor<S>>,
    alpha: f64,
    form: SoftCountForm,
    gates: Gates,
) -> Result<SearchEval<S>, SearchError> {
    let cfg = &params.config;
    if z.len() != cfg.d_z {
        return Err(AeError::EmbeddingLength {
            expected: cfg.d_z,
            found: z.len(),
        }
        .into());
    }
    if decoder == 0 || decoder > cfg.l_max {
        return Err(SearchError::Config(format!("decoder {decoder} outside 1..={}", cfg.l_max)));
    }
    let mut tape = Tape::new();
    let mut b = Binder::new(params, false);
    let zv = tape.var(Tensor::from_shape_vec(&[1, cfg.d_z], z.to_vec()));
    let tv = tape.var(Tensor::vector(vec![t]));
    let raw = decode_graph(&mut tape, &mut b, zv, &[decoder])[0];
    let m = sample_matrix(&mut tape, raw, 0);
    let net = tape_net(&mut tape, cfg, m, decoder, gates);
    let xv = tape.constant_shared(x.clone());
    let yv = tape.constant_shared(y.clone());
    let pred = tape_net_forward(&mut tape, &net, xv, S::lit(cfg.leaky_slope));
    let d = tape.sub(pred, yv);
    let sq = tape.mul(d, d);
    let data = tape.sum(sq);
    let (total, pen) = if alpha > 0.0 {
        let eff = net.effective_weights(&mut tape);
        let pen = penalty_graph(&mut tape, &eff, tv, alpha, form);
        (tape.add(data, pen), Some(pen))
    } else {
        (data, None)
    };
    tape.check_finite()?;
    let grads = tape.backward(total, &Tensor::scalar(S::one()))?;
    let grad_t = grads.get(tv).map_or(S::zero(), |g| g.data()[0]);
    Ok(SearchEval {
        loss: tape.value(total).item(),
        data_term: tape.value(data).item(),
        penalty: pen.map_or(S::zero(), |p| tape.value(p).item()),
        grad_z: grads.wrt(&tape, zv).into_data(),
        grad_t,
    })
}

/// Hard-decoded network of depth `decoder` at `z`, pruned at `t`.
pub fn decode_pruned<S: Scalar>(params: &AutoencoderParams<S>, z: &[S], decoder: usize, t: S) -> Result<MlpSpec<S>, SearchError> {
    let mut nets = decode_all(params, z, false)?;
    Ok(nets.swap_remove(decoder - 1).prune(t))
}

/// MPE of `spec` on the rows of `data`.
pub fn dataset_mpe<S: Scalar>(spec: &MlpSpec<S>, data: &FunctionalDataset<S>) -> Result<f64, SearchError> {
    let pred = spec.forward_batch(&data.inputs).map_err(AeError::from)?;
    Ok(mpe(pred.data(), data.outputs.data(), MPE_EPS)?)
}

/// Evolution of one search run.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState<S> {
    pub z: Vec<S>,
    pub t: S,
    pub iteration: usize,
    pub train_loss: Vec<f64>,
    /// `(iteration, validation MPE)` pairs.
    pub val_mpe: Vec<(usize, f64)>,
    /// Threshold after every step; never negative.
    pub t_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderResult<S> {
    pub decoder: usize,
    pub restart: usize,
    pub spec: MlpSpec<S>,
    pub val_mpe: f64,
    pub test_mpe: f64,
    pub non_zero_count: usize,
    pub t: S,
    pub z: Vec<S>,
    pub z0: Vec<S>,
    pub train_loss: Vec<f64>,
    pub diverged: bool,
}

impl<S: Scalar> DecoderResult<S> {
    /// `MPE (non-zero count)`.
    pub fn table_cell(&self) -> String {
        format!("{:.4} ({})", self.test_mpe, self.non_zero_count)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult<S> {
    /// One entry per searched decoder, in increasing decoder order.
    pub decoders: Vec<DecoderResult<S>>,
}

impl<S: Scalar> SearchResult<S> {
    /// The decoder with the lowest validation MPE (lowest depth on ties).
    pub fn best(&self) -> &DecoderResult<S> {
        self.decoders
            .iter()
            .reduce(|a, b| if b.val_mpe < a.val_mpe { b } else { a })
            .expect("search result without decoders")
    }

    /// `decoder,result` rows, one per decoder.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("decoder,result\n");
        for d in &self.decoders {
            out.push_str(&format!("D{},{}\n", d.decoder, d.table_cell()));
        }
        out
    }
}

fn check_dataset<S: Scalar>(params: &AutoencoderParams<S>, data: &FunctionalDataset<S>) -> Result<(), SearchError> {
    let cfg = &params.config;
    let splits = data.splits.ok_or_else(|| SearchError::Dataset("dataset has no train/val/test splits".into()))?;
    if splits.train == 0 || splits.val == 0 || splits.test == 0 {
        return Err(SearchError::Dataset(format!("empty split in {splits:?}")));
    }
    if data.input_dim() != cfg.input_dim || data.output_dim() != cfg.output_dim {
        return Err(SearchError::Dataset(format!(
            "dataset is {}->{}, model expects {}->{}",
            data.input_dim(),
            data.output_dim(),
            cfg.input_dim,
            cfg.output_dim
        )));
    }
    Ok(())
}

fn rows<S: Scalar>(t: &Tensor<S>, idx: &[usize]) -> Tensor<S> {
    let w = t.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * w);
    for &r in idx {
        out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
    }
    Tensor::from_shape_vec(&[idx.len(), w], out)
}

/// Runs one search from `z0` and returns the final state and whether it
/// stopped on a non-finite loss (in which case the last finite state is kept).
pub fn run_search<S: Scalar>(
    params: &AutoencoderParams<S>,
    data: &FunctionalDataset<S>,
    cfg: &SearchConfig,
    decoder: usize,
    z0: Vec<S>,
    rng: &mut ChaCha8Rng,
) -> Result<(SearchState<S>, bool), SearchError> {
    let train = data.part(Part::Train);
    let val = data.part(Part::Val);
    let n = train.len();
    let full = (Arc::new(train.inputs.clone()), Arc::new(train.outputs.clone()));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut state = SearchState {
        z: z0,
        t: S::zero(),
        iteration: 0,
        train_loss: Vec::with_capacity(cfg.iterations),
        val_mpe: Vec::new(),
        t_history: Vec::with_capacity(cfg.iterations),
    };
    let d = params.config.d_z;
    let (mut m, mut v) = (vec![0.0; d], vec![0.0; d]);
    let mut diverged = false;
    for it in 0..cfg.iterations {
        let (x, y) = match cfg.minibatch {
            Some(bs) if bs < n => {
                if cursor + bs > n {
                    order.shuffle(rng);
                    cursor = 0;
                }
                let idx = &order[cursor..cursor + bs];
                cursor += bs;
                (Arc::new(rows(&train.inputs, idx)), Arc::new(rows(&train.outputs, idx)))
            }
            _ => full.clone(),
        };
        let eval = match search_loss(params, &state.z, state.t, decoder, &x, &y, cfg.alpha, cfg.soft_count, cfg.gates) {
            Ok(e) if e.loss.is_finite() && e.grad_z.iter().all(|g| g.is_finite()) && e.grad_t.is_finite() => e,
            Ok(_) | Err(SearchError::Diff(DiffError::NonFinite { .. })) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        state.train_loss.push(eval.loss.to_f64_lossy());
        match cfg.optimizer {
            Optimizer::Gd => {
                let lr = S::lit(cfg.lr_z);
                for (zi, gi) in state.z.iter_mut().zip(&eval.grad_z) {
                    *zi -= lr * *gi;
                }
            }
            Optimizer::Adam => {
                let step = (it + 1) as i32;
                let (c1, c2) = (1.0 - 0.9f64.powi(step), 1.0 - 0.999f64.powi(step));
                for k in 0..d {
                    let g = eval.grad_z[k].to_f64_lossy();
                    m[k] = 0.9 * m[k] + 0.1 * g;
                    v[k] = 0.999 * v[k] + 0.001 * g * g;
                    let delta = cfg.lr_z * (m[k] / c1) / ((v[k] / c2).sqrt() + 1e-8);
                    state.z[k] -= S::lit(delta);
                }
            }
        }
        let t_next = state.t - S::lit(cfg.lr_t) * eval.grad_t;
        state.t = if t_next > S::zero() { t_next } else { S::zero() };
        state.t_history.push(state.t.to_f64_lossy());
        state.iteration = it + 1;
        if cfg.val_every > 0 && (it + 1) % cfg.val_every == 0 {
            let spec = decode_pruned(params, &state.z, decoder, state.t)?;
            state.val_mpe.push((it + 1, dataset_mpe(&spec, &val)?));
        }
    }
    Ok((state, diverged))
}

fn decoders_of(cfg: &SearchConfig, l_max: usize) -> Result<Vec<usize>, SearchError> {
    let mut ds = if cfg.decoders.is_empty() {
        (1..=l_max).collect()
    } else {
        cfg.decoders.clone()
    };
    ds.sort_unstable();
    ds.dedup();
    if let Some(&bad) = ds.iter().find(|&&i| i == 0 || i > l_max) {
        return Err(SearchError::Config(format!("decoder {bad} outside 1..={l_max}")));
    }
    Ok(ds)
}

/// Generator for restart `restart` of decoder `decoder`.
fn restart_rng(seed: u64, decoder: usize, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((decoder as u64) << 32) | restart as u64);
    rng
}

/// Searches every configured decoder with every restart in parallel and
/// keeps, per decoder, the restart with the lowest validation MPE.
pub fn search_optimal<S: Scalar>(
    params: &AutoencoderParams<S>,
    data: &FunctionalDataset<S>,
    cfg: &SearchConfig,
) -> Result<SearchResult<S>, SearchError> {
    cfg.validate()?;
    check_dataset(params, data)?;
    if params.stats.is_none() {
        return Err(SearchError::MissingStats);
    }
    let decoders = decoders_of(cfg, params.config.l_max)?;
    let val = data.part(Part::Val);
    let test = data.part(Part::Test);
    let jobs: Vec<(usize, usize)> = decoders
        .iter()
        .flat_map(|&i| (0..cfg.restarts).map(move |r| (i, r)))
        .collect();
    let runs: Vec<DecoderResult<S>> = jobs
        .par_iter()
        .map(|&(decoder, restart)| {
            let mut rng = restart_rng(cfg.seed, decoder, restart);
            let z0 = sample_embedding(params, &mut rng)?;
            let (state, diverged) = run_search(params, data, cfg, decoder, z0.clone(), &mut rng)?;
            let spec = decode_pruned(params, &state.z, decoder, state.t)?;
            Ok(DecoderResult {
                decoder,
                restart,
                val_mpe: dataset_mpe(&spec, &val)?,
                test_mpe: dataset_mpe(&spec, &test)?,
                non_zero_count: spec.non_zero_count(),
                spec,
                t: state.t,
                z: state.z,
                z0,
                train_loss: state.train_loss,
                diverged,
            })
        })
        .collect::<Result<_, SearchError>>()?;
    let mut best: Vec<DecoderResult<S>> = Vec::with_capacity(decoders.len());
    for run in runs {
        match best.last_mut() {
            Some(b) if b.decoder == run.decoder => {
                if run.val_mpe < b.val_mpe {
                    *b = run;
                }
            }
            _ => best.push(run),
        }
    }
    Ok(SearchResult { decoders: best })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TradeoffPoint {
    pub alpha: f64,
    pub nonzero: usize,
    pub mpe: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffCurve {
    pub dataset: String,
    pub decoder: usize,
    pub points: Vec<TradeoffPoint>,
}

impl TradeoffCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,nonzero,mpe\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.alpha, p.nonzero, p.mpe));
        }
        out
    }
}

/// One search per `alpha` on decoder `decoder`, all with the seed of `cfg`.
pub fn tradeoff_scan<S: Scalar>(
    params: &AutoencoderParams<S>,
    data: &FunctionalDataset<S>,
    dataset: &str,
    decoder: usize,
    alphas: &[f64],
    cfg: &SearchConfig,
) -> Result<TradeoffCurve, SearchError> {
    if alphas.is_empty() {
        return Err(SearchError::Config("empty alpha list".into()));
    }
    if alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SearchError::Config("alpha values must be strictly increasing".into()));
    }
    let points = alphas
        .iter()
        .map(|&alpha| {
            let c = SearchConfig {
                alpha,
                decoders: vec![decoder],
                ..cfg.clone()
            };
            let r = search_optimal(params, data, &c)?;
            let d = &r.decoders[0];
            Ok(TradeoffPoint {
                alpha,
                nonzero: d.non_zero_count,
                mpe: d.test_mpe,
            })
        })
        .collect::<Result<_, SearchError>>()?;
    Ok(TradeoffCurve {
        dataset: dataset.to_string(),
        decoder,
        points,
    })
}

/// Test MPE of always predicting the median train output.
pub fn constant_baseline_mpe<S: Scalar>(data: &FunctionalDataset<S>) -> Result<f64, SearchError> {
    let train = data.part(Part::Train);
    let test = data.part(Part::Test);
    if train.is_empty() || test.is_empty() {
        return Err(SearchError::Dataset("baseline needs train and test rows".into()));
    }
    let mut ys: Vec<f64> = train.outputs.data().iter().map(|v| v.to_f64_lossy()).collect();
    ys.sort_by(f64::total_cmp);
    let k = ys.len();
    let med = if k % 2 == 1 { ys[k / 2] } else { 0.5 * (ys[k / 2 - 1] + ys[k / 2]) };
    let preds = vec![med; test.outputs.numel()];
    let truth: Vec<f64> = test.outputs.data().iter().map(|v| v.to_f64_lossy()).collect();
    Ok(mpe(&preds, &truth, MPE_EPS)?)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}
