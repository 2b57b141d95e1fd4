use std::sync::Arc;

use crate::diffcore::{Tape, Tensor, Var};
use crate::netrep::MlpSpec;
use crate::scalar::Scalar;

use super::graph::{Gates, decode_graph, encode_graph, encoder_input, sample_matrix, tape_net, tape_net_forward, Binder};
use super::{AeError, AutoencoderParams};

/// Floor added to per-decoder errors before a negative power.
pub const P_FLOOR: f64 = 1e-12;

/// How per-decoder errors of one network are combined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// Smallest per-decoder error; only the arg-min decoder gets gradient.
    Min,
    /// `(sum_i a_i^p)^(1/p)`.
    P(f64),
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Min => f.write_str("min"),
            LossKind::P(p) => write!(f, "p:{p}"),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "min" {
            return Ok(LossKind::Min);
        }
        let p: f64 = s
            .strip_prefix("p:")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("loss must be `min` or `p:<number>`, got `{s}`"))?;
        if p == 0.0 || !p.is_finite() {
            return Err(format!("p must be finite and non-zero, got {p}"));
        }
        Ok(LossKind::P(p))
    }
}

/// `(sum_i a_i^p)^(1/p)`, with [`P_FLOOR`] added to each term when `p < 0`.
pub fn aggregate_p(a: &[f64], p: f64) -> f64 {
    let floor = if p < 0.0 { P_FLOOR } else { 0.0 };
    a.iter().map(|&v| (v + floor).powf(p)).sum::<f64>().powf(1.0 / p)
}

fn combine<S: Scalar>(tape: &mut Tape<S>, a: &[Var], kind: LossKind) -> Var {
    match kind {
        LossKind::Min => tape.min(a),
        LossKind::P(p) => {
            let mut acc: Option<Var> = None;
            for &v in a {
                let base = if p < 0.0 { tape.add_scalar(v, S::lit(P_FLOOR)) } else { v };
                let term = tape.pow(base, S::lit(p));
                acc = Some(match acc {
                    None => term,
                    Some(prev) => tape.add(prev, term),
                });
            }
            tape.pow(acc.unwrap(), S::lit(1.0 / p))
        }
    }
}

fn sum_vars<S: Scalar>(tape: &mut Tape<S>, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v);
    }
    acc
}

/// Recorded loss of a batch: the scalar total plus, per network, the
/// per-decoder error nodes.
pub(crate) struct BatchGraph {
    pub total: Var,
    pub per_decoder: Vec<Vec<Var>>,
}

/// Builds the functional loss of `batch` on `tape`. Networks are grouped by
/// depth so each encoder runs once; results are summed in batch order.
pub(crate) fn batch_graph<S: Scalar>(
    tape: &mut Tape<S>,
    b: &mut Binder<'_, S>,
    batch: &[(&MlpSpec<S>, &Tensor<S>)],
    x: &Arc<Tensor<S>>,
    kind: LossKind,
    gates: Gates,
) -> Result<BatchGraph, AeError> {
    let cfg = b.config();
    if batch.is_empty() {
        return Err(AeError::Invalid("empty batch".into()));
    }
    let points = x.shape()[0];
    let xv = tape.constant_shared(x.clone());
    let slope = S::lit(cfg.leaky_slope);
    let depths: Vec<usize> = (1..=cfg.l_max).collect();
    let mut per_sample: Vec<Option<(Var, Vec<Var>)>> = vec![None; batch.len()];
    for depth in 1..=cfg.l_max {
        let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].0.depth() == depth).collect();
        if idx.is_empty() {
            continue;
        }
        let specs: Vec<&MlpSpec<S>> = idx.iter().map(|&i| batch[i].0).collect();
        let image = encoder_input(cfg, &specs, depth)?;
        let image = tape.constant(image);
        let z = encode_graph(tape, b, image, depth);
        let raws = decode_graph(tape, b, z, &depths);
        for (r, &i) in idx.iter().enumerate() {
            let y = batch[i].1;
            if y.shape() != [points, cfg.output_dim] {
                return Err(AeError::Incompatible(format!(
                    "targets {:?}, expected [{points}, {}]",
                    y.shape(),
                    cfg.output_dim
                )));
            }
            let yv = tape.constant(y.clone());
            let a: Vec<Var> = raws
                .iter()
                .zip(&depths)
                .map(|(&raw, &l)| {
                    let m = sample_matrix(tape, raw, r);
                    let net = tape_net(tape, cfg, m, l, gates);
                    let pred = tape_net_forward(tape, &net, xv, slope);
                    let d = tape.sub(pred, yv);
                    let sq = tape.mul(d, d);
                    tape.sum(sq)
                })
                .collect();
            let loss = combine(tape, &a, kind);
            per_sample[i] = Some((loss, a));
        }
    }
    if let Some(i) = batch.iter().position(|(s, _)| s.depth() == 0 || s.depth() > cfg.l_max) {
        return Err(AeError::Depth {
            depth: batch[i].0.depth(),
            l_max: cfg.l_max,
        });
    }
    let (losses, per_decoder): (Vec<Var>, Vec<Vec<Var>>) = per_sample.into_iter().map(Option::unwrap).unzip();
    let total = sum_vars(tape, &losses);
    Ok(BatchGraph { total, per_decoder })
}

fn evaluate<S: Scalar>(
    params: &AutoencoderParams<S>,
    batch: &[(MlpSpec<S>, Tensor<S>)],
    x: &Tensor<S>,
    kind: LossKind,
) -> Result<(S, Vec<Vec<S>>), AeError> {
    let refs: Vec<(&MlpSpec<S>, &Tensor<S>)> = batch.iter().map(|(s, y)| (s, y)).collect();
    let mut tape = Tape::new();
    let mut b = Binder::new(params, false);
    let g = batch_graph(&mut tape, &mut b, &refs, &Arc::new(x.clone()), kind, Gates::Soft)?;
    tape.check_finite()?;
    let a = g
        .per_decoder
        .iter()
        .map(|vs| vs.iter().map(|&v| tape.value(v).item()).collect())
        .collect();
    Ok((tape.value(g.total).item(), a))
}

/// Squared-error sums `a_i` of each decoder, per network, under soft decoding.
pub fn per_decoder_sse<S: Scalar>(
    params: &AutoencoderParams<S>,
    batch: &[(MlpSpec<S>, Tensor<S>)],
    x: &Tensor<S>,
) -> Result<Vec<Vec<S>>, AeError> {
    Ok(evaluate(params, batch, x, LossKind::Min)?.1)
}

/// Sum over the batch of the p-aggregated per-decoder errors.
pub fn functional_loss_p<S: Scalar>(
    params: &AutoencoderParams<S>,
    batch: &[(MlpSpec<S>, Tensor<S>)],
    x: &Tensor<S>,
    p: f64,
) -> Result<S, AeError> {
    if p == 0.0 {
        return Err(AeError::Invalid("p must be non-zero".into()));
    }
    Ok(evaluate(params, batch, x, LossKind::P(p))?.0)
}

/// Sum over the batch of each network's smallest per-decoder error.
pub fn functional_loss_min<S: Scalar>(
    params: &AutoencoderParams<S>,
    batch: &[(MlpSpec<S>, Tensor<S>)],
    x: &Tensor<S>,
) -> Result<S, AeError> {
    Ok(evaluate(params, batch, x, LossKind::Min)?.0)
}
