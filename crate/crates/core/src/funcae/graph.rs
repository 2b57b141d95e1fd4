use rayon::prelude::*;

use crate::diffcore::{Tape, Tensor, Var};
use crate::netrep::{from_matrix, to_matrix, ActivationKind, MatrixMeta, MlpMatrix, MlpSpec};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

use super::{AeConfig, AeError, AutoencoderParams};

/// Puts parameters on a tape on first use.
pub(crate) struct Binder<'a, S> {
    params: &'a AutoencoderParams<S>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, S: Scalar> Binder<'a, S> {
    pub(crate) fn new(params: &'a AutoencoderParams<S>, trainable: bool) -> Self {
        Self {
            params,
            vars: vec![None; params.tensors.len()],
            trainable,
        }
    }

    pub(crate) fn get(&mut self, tape: &mut Tape<S>, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let t = self.params.tensors[idx].clone();
        let v = if self.trainable {
            tape.var_shared(t)
        } else {
            tape.constant_shared(t)
        };
        self.vars[idx] = Some(v);
        v
    }

    /// Parameters that were placed on the tape, by index.
    pub(crate) fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    pub(crate) fn config(&self) -> &'a AeConfig {
        &self.params.config
    }
}

fn check_spec<S: Scalar>(cfg: &AeConfig, spec: &MlpSpec<S>) -> Result<(), AeError> {
    if spec.activation() != cfg.activation {
        return Err(AeError::Incompatible(format!(
            "{} network, model is {}",
            spec.activation(),
            cfg.activation
        )));
    }
    if spec.input_dim() != cfg.input_dim || spec.output_dim() != cfg.output_dim {
        return Err(AeError::Incompatible(format!(
            "dims {}->{}, model expects {}->{}",
            spec.input_dim(),
            spec.output_dim(),
            cfg.input_dim,
            cfg.output_dim
        )));
    }
    if spec.depth() == 0 || spec.depth() > cfg.l_max {
        return Err(AeError::Depth {
            depth: spec.depth(),
            l_max: cfg.l_max,
        });
    }
    Ok(())
}

/// Encoder image `[N, n_max, cols, 1]` for networks that all have `depth` hidden layers.
pub(crate) fn encoder_input<S: Scalar>(cfg: &AeConfig, specs: &[&MlpSpec<S>], depth: usize) -> Result<Tensor<S>, AeError> {
    let cols = cfg.cols(depth);
    let weight_cols = (depth + 1) * cfg.n_max;
    let inv = S::lit(1.0 / cfg.weight_scale);
    let mut data = Vec::with_capacity(specs.len() * cfg.n_max * cols);
    for spec in specs {
        check_spec(cfg, spec)?;
        if spec.depth() != depth {
            return Err(AeError::Depth {
                depth: spec.depth(),
                l_max: cfg.l_max,
            });
        }
        let m = to_matrix(spec, cfg.l_max, cfg.n_max)?;
        for (j, &v) in m.values().data().iter().enumerate() {
            data.push(if j % cols < weight_cols { v * inv } else { v });
        }
    }
    Ok(Tensor::from_shape_vec(&[specs.len(), cfg.n_max, cols, 1], data))
}

/// Runs the depth-`depth` encoder and returns the pre-trunk vector
/// `[N, pre_trunk_width]` with zero segments for the other depths.
pub(crate) fn pre_trunk_graph<S: Scalar>(tape: &mut Tape<S>, b: &mut Binder<'_, S>, image: Var, depth: usize) -> Var {
    let cfg = b.config();
    let slope = S::lit(cfg.leaky_slope);
    let n = tape.shape(image)[0];
    let mut h = image;
    for li in &b.params.layout.enc[depth - 1] {
        let w = b.get(tape, li.w);
        let bias = b.get(tape, li.b);
        h = tape.conv2d(h, w);
        h = tape.add_bias(h, bias);
        h = tape.leaky_relu(h, slope);
    }
    let h = tape.reshape(h, &[n, cfg.segment_width(depth)]);
    if cfg.l_max == 1 {
        return h;
    }
    let parts: Vec<Var> = (1..=cfg.l_max)
        .map(|l| {
            if l == depth {
                h
            } else {
                tape.constant(Tensor::zeros(&[n, cfg.segment_width(l)]))
            }
        })
        .collect();
    tape.concat(&parts, 1)
}

/// Fully connected stack; leaky-ReLU after every layer but the last.
fn dense_stack<S: Scalar>(tape: &mut Tape<S>, b: &mut Binder<'_, S>, x: Var, layers: &[super::LayerIdx]) -> Var {
    let slope = S::lit(b.config().leaky_slope);
    let mut h = x;
    for (j, li) in layers.iter().enumerate() {
        let w = b.get(tape, li.w);
        let bias = b.get(tape, li.b);
        h = tape.matmul(h, w);
        h = tape.add_bias(h, bias);
        if j + 1 < layers.len() {
            h = tape.leaky_relu(h, slope);
        }
    }
    h
}

/// Embeddings `[N, d_z]` of an encoder image batch of one depth.
pub(crate) fn encode_graph<S: Scalar>(tape: &mut Tape<S>, b: &mut Binder<'_, S>, image: Var, depth: usize) -> Var {
    let pre = pre_trunk_graph(tape, b, image, depth);
    let layers = b.params.layout.enc_fc.clone();
    dense_stack(tape, b, pre, &layers)
}

/// Raw decoder outputs `[N, n_max, cols(l)]` for each depth in `depths`.
pub(crate) fn decode_graph<S: Scalar>(tape: &mut Tape<S>, b: &mut Binder<'_, S>, z: Var, depths: &[usize]) -> Vec<Var> {
    let cfg = b.config();
    let slope = S::lit(cfg.leaky_slope);
    let n = tape.shape(z)[0];
    let layers = b.params.layout.dec_fc.clone();
    let expanded = dense_stack(tape, b, z, &layers);
    let widths: Vec<usize> = (1..=cfg.l_max).map(|l| cfg.segment_width(l)).collect();
    let mut starts = vec![0; cfg.l_max];
    for l in 1..cfg.l_max {
        starts[l] = starts[l - 1] + widths[l - 1];
    }
    let c = cfg.last_channels();
    depths
        .iter()
        .map(|&l| {
            let sub = tape.narrow(expanded, 1, starts[l - 1], widths[l - 1]);
            let mut h = tape.reshape(sub, &[n, cfg.n_max, cfg.cols(l), c]);
            let stack = &b.params.layout.dec[l - 1];
            for (j, li) in stack.iter().enumerate() {
                let w = b.get(tape, li.w);
                let bias = b.get(tape, li.b);
                h = tape.conv_transpose2d(h, w);
                h = tape.add_bias(h, bias);
                if j + 1 < stack.len() {
                    h = tape.leaky_relu(h, slope);
                }
            }
            tape.reshape(h, &[n, cfg.n_max, cfg.cols(l)])
        })
        .collect()
}

/// How decoded mask columns gate neurons on a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gates {
    /// Continuous gates `sigmoid(m)`.
    #[default]
    Soft,
    /// Forward pass uses the hard gate `[sigmoid(m) > 0.5]`, exactly as the
    /// evaluated network does; gradients flow as if the gate were `sigmoid(m)`.
    StraightThrough,
}

/// A decoded network living on a tape.
///
/// With soft gates the weights are stored gated, `W_k * g_k(rows) *
/// g_{k+1}(cols)`, matching a softly decoded [`MlpSpec`]. With hard gates
/// that is redundant (a neuron whose output is multiplied by 0 contributes
/// nothing), so the weights stay ungated and only neuron outputs are gated;
/// this also keeps the gradient wrt a closed gate from vanishing.
pub(crate) struct TapeNet {
    pub weights: Vec<Var>,
    pub gates: Vec<Var>,
    pub activation: ActivationKind,
    pub weights_gated: bool,
}

impl TapeNet {
    /// Weights with every gate applied, as in the decoded network.
    pub(crate) fn effective_weights<S: Scalar>(&self, tape: &mut Tape<S>) -> Vec<Var> {
        if self.weights_gated {
            return self.weights.clone();
        }
        let depth = self.gates.len();
        self.weights
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let mut w = w;
                if k > 0 {
                    w = tape.scale_first(w, self.gates[k - 1]);
                }
                if k < depth {
                    w = tape.scale_last(w, self.gates[k]);
                }
                w
            })
            .collect()
    }
}

/// Splits one raw decoded matrix `[n_max, cols]` into a gated network.
pub(crate) fn tape_net<S: Scalar>(tape: &mut Tape<S>, cfg: &AeConfig, raw: Var, depth: usize, gates: Gates) -> TapeNet {
    let mode = gates;
    let n = cfg.n_max;
    let gates: Vec<Var> = (0..depth)
        .map(|j| {
            let col = tape.narrow(raw, 1, (depth + 1) * n + j, 1);
            let col = tape.reshape(col, &[n]);
            let soft = tape.sigmoid(col);
            match mode {
                Gates::Soft => soft,
                Gates::StraightThrough => {
                    // soft + (hard - soft) with the correction held constant;
                    // both sums are exact, so the value is exactly 0 or 1.
                    let fix = tape.value(soft).map(|g| if g > S::lit(0.5) { S::one() - g } else { -g });
                    let fix = tape.constant(fix);
                    tape.add(soft, fix)
                }
            }
        })
        .collect();
    let scale = S::lit(cfg.weight_scale);
    let weights = (0..=depth)
        .map(|k| {
            let mut w = tape.narrow(raw, 1, k * n, n);
            if k == 0 {
                w = tape.narrow(w, 0, 0, cfg.input_dim);
            }
            if k == depth {
                w = tape.narrow(w, 1, 0, cfg.output_dim);
            }
            w = tape.scale(w, scale);
            if mode == Gates::StraightThrough {
                return w;
            }
            if k > 0 {
                w = tape.scale_first(w, gates[k - 1]);
            }
            if k < depth {
                w = tape.scale_last(w, gates[k]);
            }
            w
        })
        .collect();
    TapeNet {
        weights,
        gates,
        activation: cfg.activation,
        weights_gated: mode == Gates::Soft,
    }
}

/// Network outputs `[P, o]` for inputs `x` of shape `[P, i]`.
pub(crate) fn tape_net_forward<S: Scalar>(tape: &mut Tape<S>, net: &TapeNet, x: Var, slope: S) -> Var {
    let depth = net.gates.len();
    let mut h = x;
    for (k, &w) in net.weights.iter().enumerate() {
        let a = tape.matmul(h, w);
        if k < depth {
            let act = match net.activation {
                ActivationKind::Sigmoid => tape.sigmoid(a),
                ActivationKind::LeakyRelu => tape.leaky_relu(a, slope),
                ActivationKind::Linear => a,
            };
            h = tape.scale_last(act, net.gates[k]);
        } else {
            h = if net.activation.squashes_output() { tape.sigmoid(a) } else { a };
        }
    }
    h
}

/// Raw decoded matrix of sample `s` in a `[N, n_max, cols]` batch.
pub(crate) fn sample_matrix<S: Scalar>(tape: &mut Tape<S>, batch: Var, s: usize) -> Var {
    let shape = tape.shape(batch).to_vec();
    let one = tape.narrow(batch, 0, s, 1);
    tape.reshape(one, &shape[1..])
}

fn check_z<S: Scalar>(cfg: &AeConfig, z: &[S]) -> Result<(), AeError> {
    if z.len() != cfg.d_z {
        return Err(AeError::EmbeddingLength {
            expected: cfg.d_z,
            found: z.len(),
        });
    }
    Ok(())
}

/// Concatenated encoder segments fed to the trunk.
pub fn pre_trunk<S: Scalar>(params: &AutoencoderParams<S>, spec: &MlpSpec<S>) -> Result<Vec<S>, AeError> {
    let depth = spec.depth();
    let image = encoder_input(&params.config, &[spec], depth)?;
    let mut tape = Tape::new();
    let mut b = Binder::new(params, false);
    let x = tape.constant(image);
    let out = pre_trunk_graph(&mut tape, &mut b, x, depth);
    tape.check_finite()?;
    Ok(tape.value(out).data().to_vec())
}

pub fn encode<S: Scalar>(params: &AutoencoderParams<S>, spec: &MlpSpec<S>) -> Result<Vec<S>, AeError> {
    Ok(encode_batch(params, std::slice::from_ref(spec))?.remove(0))
}

/// Embeds many networks; output order follows `specs`.
pub fn encode_batch<S: Scalar>(params: &AutoencoderParams<S>, specs: &[MlpSpec<S>]) -> Result<Vec<Vec<S>>, AeError> {
    const CHUNK: usize = 64;
    let cfg = &params.config;
    let mut jobs: Vec<(usize, Vec<usize>)> = Vec::new();
    for depth in 1..=cfg.l_max {
        let idx: Vec<usize> = (0..specs.len()).filter(|&i| specs[i].depth() == depth).collect();
        jobs.extend(idx.chunks(CHUNK).map(|c| (depth, c.to_vec())));
    }
    if let Some(s) = specs.iter().find(|s| s.depth() == 0 || s.depth() > cfg.l_max) {
        return Err(AeError::Depth {
            depth: s.depth(),
            l_max: cfg.l_max,
        });
    }
    let results: Vec<Vec<(usize, Vec<S>)>> = jobs
        .par_iter()
        .map(|(depth, idx)| {
            let group: Vec<&MlpSpec<S>> = idx.iter().map(|&i| &specs[i]).collect();
            let image = encoder_input(cfg, &group, *depth)?;
            let mut tape = Tape::new();
            let mut b = Binder::new(params, false);
            let x = tape.constant(image);
            let z = encode_graph(&mut tape, &mut b, x, *depth);
            tape.check_finite()?;
            let data = tape.value(z).data();
            Ok(idx
                .iter()
                .enumerate()
                .map(|(r, &i)| (i, data[r * cfg.d_z..(r + 1) * cfg.d_z].to_vec()))
                .collect())
        })
        .collect::<Result<_, AeError>>()?;
    let mut out = vec![Vec::new(); specs.len()];
    for (i, z) in results.into_iter().flatten() {
        out[i] = z;
    }
    Ok(out)
}

/// Decoded matrices for depths `1..=l_max`, with sigmoid applied to the
/// mask columns and weights in network space.
pub fn decode_matrices<S: Scalar>(params: &AutoencoderParams<S>, z: &[S]) -> Result<Vec<MlpMatrix<S>>, AeError> {
    let cfg = &params.config;
    check_z(cfg, z)?;
    let mut tape = Tape::new();
    let mut b = Binder::new(params, false);
    let zv = tape.constant(Tensor::from_shape_vec(&[1, cfg.d_z], z.to_vec()));
    let depths: Vec<usize> = (1..=cfg.l_max).collect();
    let raws = decode_graph(&mut tape, &mut b, zv, &depths);
    tape.check_finite()?;
    let scale = S::lit(cfg.weight_scale);
    raws.iter()
        .zip(&depths)
        .map(|(&raw, &depth)| {
            let cols = cfg.cols(depth);
            let weight_cols = (depth + 1) * cfg.n_max;
            let data = tape
                .value(raw)
                .data()
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    if j % cols < weight_cols {
                        v * scale
                    } else {
                        crate::diffcore::logistic(v)
                    }
                })
                .collect();
            Ok(MlpMatrix::from_tensor(depth, cfg.n_max, Tensor::from_shape_vec(&[cfg.n_max, cols], data))?)
        })
        .collect()
}

pub(crate) fn meta(cfg: &AeConfig, depth: usize) -> MatrixMeta {
    MatrixMeta {
        activation: cfg.activation,
        input_dim: cfg.input_dim,
        output_dim: cfg.output_dim,
        depth,
        n_max: cfg.n_max,
    }
}

/// One network per decoder, depths `1..=l_max`.
pub fn decode_all<S: Scalar>(params: &AutoencoderParams<S>, z: &[S], soft: bool) -> Result<Vec<MlpSpec<S>>, AeError> {
    let cfg = &params.config;
    decode_matrices(params, z)?
        .iter()
        .map(|m| Ok(from_matrix(m, meta(cfg, m.depth()), soft)?))
        .collect()
}
