//! Random sparse-MLP generation and functional datasets.
//!
//! A generated network gets a uniform depth, uniform hidden sizes (first
//! `h` slots active), one fixed input-to-output path per input, and then a
//! single removal fraction applied to the remaining links.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::netrep::{layer_shape, ActivationKind, MlpSpec, NetError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("sink failed after {written} networks: {source}")]
    Sink {
        written: usize,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub activation: ActivationKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub n_max: usize,
    pub l_max: usize,
    /// Inclusive range of hidden-layer sizes.
    pub hidden_min: usize,
    pub hidden_max: usize,
    pub removal_fractions: Vec<f64>,
    /// Surviving weights are uniform in `[-weight_range, weight_range]`.
    pub weight_range: f64,
    pub seed: u64,
}

impl GenConfig {
    /// Full-size defaults: 3 inputs, 1 output, 1..=4 hidden layers of 3..=7 neurons.
    pub fn new(activation: ActivationKind, seed: u64) -> Self {
        Self {
            activation,
            input_dim: 3,
            output_dim: 1,
            n_max: 7,
            l_max: 4,
            hidden_min: 3,
            hidden_max: 7,
            removal_fractions: vec![0.5, 0.7, 0.8, 0.9],
            weight_range: activation.weight_range(),
            seed,
        }
    }

    /// Smaller networks for desk-scale runs: `n_max = 5`, hidden sizes 2..=5.
    pub fn desk(activation: ActivationKind, l_max: usize, seed: u64) -> Self {
        Self {
            n_max: 5,
            l_max,
            hidden_min: 2,
            hidden_max: 5,
            ..Self::new(activation, seed)
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let fail = |m: String| Err(GenError::Config(m));
        if self.input_dim == 0 || self.output_dim == 0 {
            return fail("input and output dims must be positive".into());
        }
        if self.input_dim > self.n_max || self.output_dim > self.n_max {
            return fail(format!("input/output dims must not exceed n_max = {}", self.n_max));
        }
        if self.l_max == 0 {
            return fail("l_max must be positive".into());
        }
        if self.hidden_min == 0 || self.hidden_min > self.hidden_max || self.hidden_max > self.n_max {
            return fail(format!(
                "hidden sizes {}..={} must satisfy 1 <= min <= max <= n_max = {}",
                self.hidden_min, self.hidden_max, self.n_max
            ));
        }
        if self.removal_fractions.is_empty() {
            return fail("no removal fractions".into());
        }
        if let Some(f) = self.removal_fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
            return fail(format!("removal fraction {f} outside [0, 1)"));
        }
        if !(self.weight_range > 0.0 && self.weight_range.is_finite()) {
            return fail(format!("weight range {} must be positive", self.weight_range));
        }
        Ok(())
    }

    /// Generator for network `index` of the corpus seeded by `self.seed`.
    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// Links of the fully connected topology, as `(layer, from, to)`.
fn all_links(input_dim: usize, output_dim: usize, hidden: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut widths = vec![input_dim];
    widths.extend_from_slice(hidden);
    widths.push(output_dim);
    let mut out = Vec::new();
    for k in 0..widths.len() - 1 {
        for a in 0..widths[k] {
            for b in 0..widths[k + 1] {
                out.push((k, a, b));
            }
        }
    }
    out
}

/// Number of links kept when removing `fraction` of `total`, never fewer
/// than the fixed ones.
pub fn kept_links(total: usize, fraction: f64, fixed: usize) -> usize {
    (((1.0 - fraction) * total as f64).round() as usize).max(fixed).min(total)
}

pub fn random_mlp<S: Scalar, R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Result<MlpSpec<S>, GenError> {
    cfg.validate()?;
    let depth = rng.random_range(1..=cfg.l_max);
    let hidden: Vec<usize> = (0..depth)
        .map(|_| rng.random_range(cfg.hidden_min..=cfg.hidden_max))
        .collect();

    let links = all_links(cfg.input_dim, cfg.output_dim, &hidden);
    let mut fixed = vec![false; links.len()];
    let index_of = |k: usize, a: usize, b: usize| links.iter().position(|&l| l == (k, a, b)).unwrap();
    for input in 0..cfg.input_dim {
        let mut from = input;
        for (k, &h) in hidden.iter().enumerate() {
            let to = rng.random_range(0..h);
            fixed[index_of(k, from, to)] = true;
            from = to;
        }
        let out = rng.random_range(0..cfg.output_dim);
        fixed[index_of(depth, from, out)] = true;
    }

    let fraction = cfg.removal_fractions[rng.random_range(0..cfg.removal_fractions.len())];
    let n_fixed = fixed.iter().filter(|&&f| f).count();
    let keep = kept_links(links.len(), fraction, n_fixed);
    let mut free: Vec<usize> = (0..links.len()).filter(|&j| !fixed[j]).collect();
    free.shuffle(rng);
    let mut chosen: Vec<usize> = (0..links.len()).filter(|&j| fixed[j]).collect();
    chosen.extend_from_slice(&free[..keep - n_fixed]);
    chosen.sort_unstable();

    let mut spec = MlpSpec::<S>::zeros(cfg.activation, cfg.input_dim, cfg.output_dim, cfg.n_max, &hidden)?;
    let r = cfg.weight_range;
    for j in chosen {
        let (k, a, b) = links[j];
        let cols = layer_shape(k, depth, cfg.input_dim, cfg.output_dim, cfg.n_max)[1];
        let w = loop {
            let w: f64 = rng.random_range(-r..=r);
            if w != 0.0 {
                break w;
            }
        };
        spec.weights_mut()[k].data_mut()[a * cols + b] = S::lit(w);
    }
    Ok(spec)
}

/// Draws from `cfg` until a network has `depth` hidden layers and a
/// non-zero count in `nonzero`, giving up after `tries` draws.
pub fn random_mlp_matching<S: Scalar, R: Rng + ?Sized>(
    cfg: &GenConfig,
    depth: usize,
    nonzero: std::ops::RangeInclusive<usize>,
    tries: usize,
    rng: &mut R,
) -> Result<MlpSpec<S>, GenError> {
    if depth == 0 || depth > cfg.l_max {
        return Err(GenError::Config(format!("depth {depth} outside 1..={}", cfg.l_max)));
    }
    for _ in 0..tries {
        let spec = random_mlp::<S, R>(cfg, rng)?;
        if spec.depth() == depth && nonzero.contains(&spec.non_zero_count()) {
            return Ok(spec);
        }
    }
    Err(GenError::Config(format!(
        "no depth-{depth} network with {}..={} non-zero weights in {tries} draws",
        nonzero.start(),
        nonzero.end()
    )))
}

/// Row counts of the train/val/test blocks. Rows are stored in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Splits {
    /// `floor(n * a / total)`, `floor(n * b / total)` and the remainder.
    pub fn from_ratio(n: usize, ratio: (usize, usize, usize)) -> Self {
        let total = ratio.0 + ratio.1 + ratio.2;
        let train = n * ratio.0 / total;
        let val = n * ratio.1 / total;
        Self {
            train,
            val,
            test: n - train - val,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalDataset<S = f64> {
    pub inputs: Tensor<S>,
    pub outputs: Tensor<S>,
    pub splits: Option<Splits>,
}

impl<S: Scalar> FunctionalDataset<S> {
    pub fn new(inputs: Tensor<S>, outputs: Tensor<S>, splits: Option<Splits>) -> Result<Self, GenError> {
        if inputs.rank() != 2 || outputs.rank() != 2 || inputs.shape()[0] != outputs.shape()[0] {
            return Err(GenError::Config(format!(
                "inputs {:?} and outputs {:?} disagree",
                inputs.shape(),
                outputs.shape()
            )));
        }
        if let Some(s) = splits {
            if s.total() != inputs.shape()[0] {
                return Err(GenError::Config(format!(
                    "splits sum to {}, dataset has {} rows",
                    s.total(),
                    inputs.shape()[0]
                )));
            }
        }
        Ok(Self { inputs, outputs, splits })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.shape()[1]
    }

    /// Row range of a split; the whole dataset when there are no splits.
    pub fn range(&self, part: Part) -> std::ops::Range<usize> {
        match self.splits {
            None => 0..self.len(),
            Some(s) => match part {
                Part::Train => 0..s.train,
                Part::Val => s.train..s.train + s.val,
                Part::Test => s.train + s.val..s.total(),
            },
        }
    }

    /// Copies rows `range` into a new dataset without splits.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let take = |t: &Tensor<S>| {
            let w = t.shape()[1];
            Tensor::from_shape_vec(&[range.len(), w], t.data()[range.start * w..range.end * w].to_vec())
        };
        Self {
            inputs: take(&self.inputs),
            outputs: take(&self.outputs),
            splits: None,
        }
    }

    pub fn part(&self, part: Part) -> Self {
        self.slice(self.range(part))
    }
}

/// Cartesian grid with `per_dim` evenly spaced values per axis, both ends
/// included; the last dimension varies fastest.
pub fn grid_inputs<S: Scalar>(dims: usize, per_dim: usize, lo: f64, hi: f64) -> Tensor<S> {
    assert!(per_dim >= 2, "grid needs at least two values per axis");
    let axis: Vec<f64> = (0..per_dim)
        .map(|j| {
            if j == per_dim - 1 {
                hi
            } else {
                lo + (hi - lo) * j as f64 / (per_dim - 1) as f64
            }
        })
        .collect();
    let rows = per_dim.pow(dims as u32);
    let mut data = Vec::with_capacity(rows * dims);
    for r in 0..rows {
        let mut digits = vec![0; dims];
        let mut rest = r;
        for d in (0..dims).rev() {
            digits[d] = rest % per_dim;
            rest /= per_dim;
        }
        data.extend(digits.iter().map(|&j| S::lit(axis[j])));
    }
    Tensor::from_shape_vec(&[rows, dims], data)
}

/// The default 10-per-axis grid over `[-1, 1]^3`.
pub fn default_grid<S: Scalar>() -> Tensor<S> {
    grid_inputs(3, 10, -1.0, 1.0)
}

pub fn make_functional_dataset<S: Scalar>(spec: &MlpSpec<S>, inputs: &Tensor<S>) -> Result<FunctionalDataset<S>, GenError> {
    let outputs = spec.forward_batch(inputs)?;
    FunctionalDataset::new(inputs.clone(), outputs, None)
}

/// Uniform inputs in `[-1, 1]^i` labelled by `spec`, split by `ratio`.
pub fn make_search_dataset<S: Scalar, R: Rng + ?Sized>(
    spec: &MlpSpec<S>,
    n: usize,
    ratio: (usize, usize, usize),
    rng: &mut R,
) -> Result<FunctionalDataset<S>, GenError> {
    if n == 0 {
        return Err(GenError::Config("dataset needs at least one row".into()));
    }
    let i = spec.input_dim();
    let data = (0..n * i).map(|_| S::lit(rng.random_range(-1.0..=1.0))).collect();
    let inputs = Tensor::from_shape_vec(&[n, i], data);
    let outputs = spec.forward_batch(&inputs)?;
    FunctionalDataset::new(inputs, outputs, Some(Splits::from_ratio(n, ratio)))
}

/// Generates `count` networks and their outputs on the shared `grid`,
/// handing them to `sink` in index order.
///
/// Network `j` draws from its own stream of the config seed, so the corpus
/// does not depend on how generation is scheduled across threads.
pub fn gen_corpus<S, F>(cfg: &GenConfig, count: usize, grid: &Tensor<S>, mut sink: F) -> Result<usize, GenError>
where
    S: Scalar,
    F: FnMut(usize, MlpSpec<S>, Tensor<S>) -> std::io::Result<()>,
{
    cfg.validate()?;
    if count == 0 {
        return Err(GenError::Config("count must be positive".into()));
    }
    const CHUNK: usize = 256;
    let mut written = 0;
    for start in (0..count).step_by(CHUNK) {
        let end = (start + CHUNK).min(count);
        let batch: Vec<(MlpSpec<S>, Tensor<S>)> = (start..end)
            .into_par_iter()
            .map(|j| {
                let spec = random_mlp::<S, _>(cfg, &mut cfg.rng_for(j as u64))?;
                let y = spec.forward_batch(grid)?;
                Ok((spec, y))
            })
            .collect::<Result<_, GenError>>()?;
        for (spec, y) in batch {
            sink(written, spec, y).map_err(|source| GenError::Sink { written, source })?;
            written += 1;
        }
    }
    Ok(written)
}

/// Collects a corpus in memory.
pub fn corpus_vec<S: Scalar>(cfg: &GenConfig, count: usize, grid: &Tensor<S>) -> Result<Vec<(MlpSpec<S>, Tensor<S>)>, GenError> {
    let mut out = Vec::with_capacity(count);
    gen_corpus(cfg, count, grid, |_, s, y| {
        out.push((s, y));
        Ok(())
    })?;
    Ok(out)
}
