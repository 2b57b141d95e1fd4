use rayon::prelude::*;

use crate::diffcore::Tensor;
use crate::netrep::MlpSpec;
use crate::scalar::Scalar;

use super::graph::{decode_all, encode_batch};
use super::{AeError, AutoencoderParams};

/// Default denominator guard of the percentage error.
pub const MPE_EPS: f64 = 1e-8;

pub(crate) fn median(mut v: Vec<f64>) -> f64 {
    for x in &mut v {
        if x.is_nan() {
            *x = f64::INFINITY;
        }
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over points of `|truth - pred| / (|truth| + eps)`.
///
/// For an even number of points the two middle ratios are averaged.
pub fn mpe<S: Scalar>(preds: &[S], truths: &[S], eps: f64) -> Result<f64, AeError> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(AeError::Invalid(format!(
            "mpe needs equal, non-zero lengths (got {} and {})",
            preds.len(),
            truths.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(AeError::Invalid("mpe eps must be positive".into()));
    }
    let ratios = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| {
            let (p, t) = (p.to_f64_lossy(), t.to_f64_lossy());
            (t - p).abs() / (t.abs() + eps)
        })
        .collect();
    Ok(median(ratios))
}

/// MPE of every hard-decoded network against `truth`, one value per decoder.
pub fn mpe_per_decoder<S: Scalar>(
    params: &AutoencoderParams<S>,
    z: &[S],
    truth: &Tensor<S>,
    grid: &Tensor<S>,
) -> Result<Vec<f64>, AeError> {
    decode_all(params, z, false)?
        .iter()
        .map(|net| {
            let pred = net.forward_batch(grid)?;
            mpe(pred.data(), truth.data(), MPE_EPS)
        })
        .collect()
}

/// `[network][decoder]` MPE table of a corpus.
pub(crate) fn mpe_table<S: Scalar>(
    params: &AutoencoderParams<S>,
    corpus: &[(MlpSpec<S>, Tensor<S>)],
    grid: &Tensor<S>,
) -> Result<Vec<Vec<f64>>, AeError> {
    let specs: Vec<MlpSpec<S>> = corpus.iter().map(|(s, _)| s.clone()).collect();
    let zs = encode_batch(params, &specs)?;
    zs.par_iter()
        .zip(corpus.par_iter())
        .map(|(z, (_, y))| mpe_per_decoder(params, z, y, grid))
        .collect()
}

/// Median over networks of the best decoder's MPE.
pub fn best_decoder_mpe<S: Scalar>(
    params: &AutoencoderParams<S>,
    corpus: &[(MlpSpec<S>, Tensor<S>)],
    grid: &Tensor<S>,
) -> Result<f64, AeError> {
    if corpus.is_empty() {
        return Err(AeError::Invalid("empty corpus".into()));
    }
    let table = mpe_table(params, corpus, grid)?;
    Ok(median(table.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).collect()))
}

/// `cells[j][i]`: median MPE of decoder `i + 1` over test networks of depth `j + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MpeGrid {
    pub cells: Vec<Vec<f64>>,
}

impl MpeGrid {
    pub fn l_max(&self) -> usize {
        self.cells.len()
    }

    /// Rows are decoders, columns encoders: `decoder,E1,E2,...`.
    pub fn to_csv(&self) -> String {
        let l = self.l_max();
        let mut out = String::from("decoder");
        for j in 1..=l {
            out.push_str(&format!(",E{j}"));
        }
        out.push('\n');
        for i in 0..l {
            out.push_str(&format!("D{}", i + 1));
            for j in 0..l {
                out.push_str(&format!(",{}", self.cells[j][i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Median MPE per (encoder depth, decoder); `corpora[j]` holds depth-`j + 1` networks.
pub fn eval_mpe_grid<S: Scalar>(
    params: &AutoencoderParams<S>,
    corpora: &[Vec<(MlpSpec<S>, Tensor<S>)>],
    grid: &Tensor<S>,
) -> Result<MpeGrid, AeError> {
    let l = params.config.l_max;
    if corpora.len() != l {
        return Err(AeError::Invalid(format!("{} corpora for {l} depths", corpora.len())));
    }
    let mut cells = Vec::with_capacity(l);
    for (j, corpus) in corpora.iter().enumerate() {
        if let Some((s, _)) = corpus.iter().find(|(s, _)| s.depth() != j + 1) {
            return Err(AeError::Invalid(format!("depth-{} network in corpus {}", s.depth(), j + 1)));
        }
        if corpus.is_empty() {
            return Err(AeError::Invalid(format!("no test networks of depth {}", j + 1)));
        }
        let table = mpe_table(params, corpus, grid)?;
        cells.push((0..l).map(|i| median(table.iter().map(|r| r[i]).collect())).collect());
    }
    Ok(MpeGrid { cells })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceRow {
    pub x1: f64,
    pub x2: f64,
    pub ya: f64,
    pub yb: f64,
}

/// Sweeps the two free inputs of two 3-input networks over `[-1, 1]^2`
/// with input `fixed_dim` held at `value`; first output only.
pub fn export_surface<S: Scalar>(
    a: &MlpSpec<S>,
    b: &MlpSpec<S>,
    fixed_dim: usize,
    value: f64,
    grid_n: usize,
) -> Result<Vec<SurfaceRow>, AeError> {
    if a.input_dim() != 3 || b.input_dim() != 3 || a.output_dim() != b.output_dim() {
        return Err(AeError::Incompatible("surfaces need two 3-input networks with equal outputs".into()));
    }
    if fixed_dim >= 3 {
        return Err(AeError::Invalid(format!("fixed dimension {fixed_dim} outside 0..3")));
    }
    if grid_n < 2 {
        return Err(AeError::Invalid("surface grid needs at least 2 points per axis".into()));
    }
    let free: Vec<usize> = (0..3).filter(|&d| d != fixed_dim).collect();
    let axis: Vec<f64> = (0..grid_n)
        .map(|j| if j == grid_n - 1 { 1.0 } else { -1.0 + 2.0 * j as f64 / (grid_n - 1) as f64 })
        .collect();
    let mut xs = Vec::with_capacity(grid_n * grid_n * 3);
    for &u in &axis {
        for &v in &axis {
            let mut p = [S::lit(value); 3];
            p[free[0]] = S::lit(u);
            p[free[1]] = S::lit(v);
            xs.extend_from_slice(&p);
        }
    }
    let xs = Tensor::from_shape_vec(&[grid_n * grid_n, 3], xs);
    let ya = a.forward_batch(&xs)?;
    let yb = b.forward_batch(&xs)?;
    let o = a.output_dim();
    Ok((0..grid_n * grid_n)
        .map(|r| SurfaceRow {
            x1: axis[r / grid_n],
            x2: axis[r % grid_n],
            ya: ya.data()[r * o].to_f64_lossy(),
            yb: yb.data()[r * o].to_f64_lossy(),
        })
        .collect())
}
