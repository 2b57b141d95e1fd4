//! Multi-scale autoencoder over MLP matrices.
//!
//! One convolutional encoder per depth feeds a shared fully connected trunk
//! (the encoders act as a multiplexer: only the one matching the input's
//! depth produces a non-zero segment). The decoder trunk expands an
//! embedding into one sub-vector per depth, and each depth-specific stack of
//! transposed convolutions turns its sub-vector back into an MLP matrix.
//!
//! Images are channels-last `[batch, n_max, cols, channels]`. Weight columns
//! enter the encoder divided by the activation's weight range and leave the
//! decoder multiplied by it, so both ends work with values of order one.

mod eval;
pub(crate) mod graph;
mod loss;
mod train;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tensor, LEAKY_SLOPE};
use crate::netrep::{matrix_cols, ActivationKind, NetError};
use crate::scalar::Scalar;

pub use eval::{MPE_EPS, best_decoder_mpe, eval_mpe_grid, export_surface, mpe, mpe_per_decoder, MpeGrid, SurfaceRow};
pub use graph::{Gates, decode_all, decode_matrices, encode, encode_batch, pre_trunk};
pub use loss::{P_FLOOR, aggregate_p, functional_loss_min, functional_loss_p, per_decoder_sse, LossKind};
pub use train::{corpus_loss, embedding_stats, loss_and_gradients, train_autoencoder, Adam, EpochLog, TrainConfig, TrainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AeError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("network depth {depth} outside 1..={l_max}")]
    Depth { depth: usize, l_max: usize },
    #[error("network does not fit the model: {0}")]
    Incompatible(String),
    #[error("embedding has length {found}, model expects {expected}")]
    EmbeddingLength { expected: usize, found: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Shape hyperparameters of the autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub activation: ActivationKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub n_max: usize,
    pub l_max: usize,
    pub d_z: usize,
    /// Output channels of the encoder convolutions; decoders mirror them.
    pub channels: Vec<usize>,
    /// Hidden widths of the encoder trunk; the decoder trunk mirrors them.
    pub trunk: Vec<usize>,
    pub kernel: usize,
    pub leaky_slope: f64,
    /// Scale between matrix weight values and network-space values.
    pub weight_scale: f64,
    /// Multiplier on the initial spread of each decoder's last kernel. Small
    /// values start every decoded matrix near zero, which keeps early
    /// training from pushing all gates shut.
    #[serde(default = "default_out_init_scale")]
    pub out_init_scale: f64,
}

fn default_out_init_scale() -> f64 {
    0.1
}

impl AeConfig {
    pub fn new(activation: ActivationKind, n_max: usize, l_max: usize, d_z: usize) -> Self {
        Self {
            activation,
            input_dim: 3,
            output_dim: 1,
            n_max,
            l_max,
            d_z,
            channels: vec![8, 16, 32, 32, 32, 32, 32],
            trunk: vec![256, 128, 64],
            kernel: 3,
            leaky_slope: LEAKY_SLOPE,
            weight_scale: activation.weight_range(),
            out_init_scale: default_out_init_scale(),
        }
    }

    pub fn validate(&self) -> Result<(), AeError> {
        let bad = |m: &str| Err(AeError::Invalid(m.to_string()));
        if self.n_max == 0 || self.l_max == 0 || self.d_z == 0 {
            return bad("n_max, l_max and d_z must be positive");
        }
        if self.input_dim == 0 || self.input_dim > self.n_max || self.output_dim == 0 || self.output_dim > self.n_max {
            return bad("input/output dims must lie in 1..=n_max");
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.trunk.contains(&0) {
            return bad("layer widths must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if !(self.weight_scale > 0.0) {
            return bad("weight scale must be positive");
        }
        if !(self.out_init_scale > 0.0 && self.out_init_scale.is_finite()) {
            return bad("output init scale must be positive");
        }
        Ok(())
    }

    /// Matrix column count for depth `l` (1-based).
    pub fn cols(&self, depth: usize) -> usize {
        matrix_cols(depth, self.n_max)
    }

    fn last_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// Flattened encoder output width for depth `l`.
    pub fn segment_width(&self, depth: usize) -> usize {
        self.n_max * self.cols(depth) * self.last_channels()
    }

    /// Width of the concatenated pre-trunk vector.
    pub fn pre_trunk_width(&self) -> usize {
        (1..=self.l_max).map(|l| self.segment_width(l)).sum()
    }

    /// Trunk layer widths from the pre-trunk vector down to `d_z`.
    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.pre_trunk_width()];
        w.extend_from_slice(&self.trunk);
        w.push(self.d_z);
        w
    }

    /// Conv channel chain `1 -> c_1 -> ... -> c_last`.
    fn channel_chain(&self) -> Vec<usize> {
        let mut c = vec![1];
        c.extend_from_slice(&self.channels);
        c
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Weight and bias indices of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIdx {
    pub w: usize,
    pub b: usize,
}

/// Where every layer's tensors live in the flat parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub infos: Vec<ParamInfo>,
    /// `enc[l - 1][j]`: convolution `j` of the depth-`l` encoder.
    pub enc: Vec<Vec<LayerIdx>>,
    pub enc_fc: Vec<LayerIdx>,
    pub dec_fc: Vec<LayerIdx>,
    /// `dec[l - 1][j]`: transposed convolution `j` of the depth-`l` decoder.
    pub dec: Vec<Vec<LayerIdx>>,
}

impl Layout {
    pub fn new(cfg: &AeConfig) -> Self {
        let mut infos = Vec::new();
        let mut push = |name: String, wshape: Vec<usize>, bshape: Vec<usize>| {
            infos.push(ParamInfo {
                name: format!("{name}.w"),
                shape: wshape,
            });
            infos.push(ParamInfo {
                name: format!("{name}.b"),
                shape: bshape,
            });
            LayerIdx {
                w: infos.len() - 2,
                b: infos.len() - 1,
            }
        };
        let k = cfg.kernel;
        let chain = cfg.channel_chain();
        let enc = (1..=cfg.l_max)
            .map(|l| {
                chain
                    .windows(2)
                    .enumerate()
                    .map(|(j, c)| push(format!("enc{l}.conv{j}"), vec![k, k, c[0], c[1]], vec![c[1]]))
                    .collect()
            })
            .collect();
        let widths = cfg.encoder_widths();
        let enc_fc = widths
            .windows(2)
            .enumerate()
            .map(|(j, w)| push(format!("enc_fc{j}"), vec![w[0], w[1]], vec![w[1]]))
            .collect();
        let mut dec_widths: Vec<usize> = widths.iter().rev().copied().collect();
        *dec_widths.last_mut().unwrap() = (1..=cfg.l_max).map(|l| cfg.segment_width(l)).sum();
        let dec_fc = dec_widths
            .windows(2)
            .enumerate()
            .map(|(j, w)| push(format!("dec_fc{j}"), vec![w[0], w[1]], vec![w[1]]))
            .collect();
        let rev: Vec<usize> = chain.iter().rev().copied().collect();
        let dec = (1..=cfg.l_max)
            .map(|l| {
                rev.windows(2)
                    .enumerate()
                    .map(|(j, c)| push(format!("dec{l}.deconv{j}"), vec![k, k, c[0], c[1]], vec![c[1]]))
                    .collect()
            })
            .collect();
        Self {
            infos,
            enc,
            enc_fc,
            dec_fc,
            dec,
        }
    }

    /// Whether parameter `idx` belongs to the encoder of depth `l`.
    pub fn in_encoder(&self, idx: usize, depth: usize) -> bool {
        self.enc[depth - 1].iter().any(|li| li.w == idx || li.b == idx)
    }
}

/// Per-dimension mean and standard deviation of training embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// All trainable tensors of the autoencoder plus embedding statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderParams<S = f64> {
    pub config: AeConfig,
    pub layout: Layout,
    pub tensors: Vec<Arc<Tensor<S>>>,
    pub stats: Option<EmbeddingStats>,
}

impl<S: Scalar> AutoencoderParams<S> {
    /// He-style normal initialisation with zero biases.
    pub fn init(config: AeConfig, seed: u64) -> Result<Self, AeError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last_deconv: Vec<String> = (1..=config.l_max)
            .map(|l| format!("dec{l}.deconv{}.w", config.channels.len() - 1))
            .collect();
        let tensors = layout
            .infos
            .iter()
            .map(|info| {
                if info.name.ends_with(".b") {
                    return Arc::new(Tensor::zeros(&info.shape));
                }
                let fan_in: usize = info.shape[..info.shape.len() - 1].iter().product();
                let mut std = (2.0 / fan_in as f64).sqrt();
                if last_deconv.contains(&info.name) {
                    std *= config.out_init_scale;
                }
                let normal = Normal::new(0.0, std).unwrap();
                let n: usize = info.shape.iter().product();
                Arc::new(Tensor::from_shape_vec(
                    &info.shape,
                    (0..n).map(|_| S::lit(normal.sample(&mut rng))).collect(),
                ))
            })
            .collect();
        Ok(Self {
            config,
            layout,
            tensors,
            stats: None,
        })
    }

    /// Rebuilds parameters from stored tensors, checking every shape.
    pub fn from_parts(config: AeConfig, tensors: Vec<Tensor<S>>, stats: Option<EmbeddingStats>) -> Result<Self, AeError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if tensors.len() != layout.infos.len() {
            return Err(AeError::Invalid(format!(
                "{} tensors for {} parameters",
                tensors.len(),
                layout.infos.len()
            )));
        }
        for (t, info) in tensors.iter().zip(&layout.infos) {
            if t.shape() != info.shape {
                return Err(AeError::Invalid(format!(
                    "{} has shape {:?}, expected {:?}",
                    info.name,
                    t.shape(),
                    info.shape
                )));
            }
        }
        if let Some(s) = &stats {
            if s.mean.len() != config.d_z || s.std.len() != config.d_z {
                return Err(AeError::EmbeddingLength {
                    expected: config.d_z,
                    found: s.mean.len(),
                });
            }
        }
        Ok(Self {
            config,
            layout,
            tensors: tensors.into_iter().map(Arc::new).collect(),
            stats,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Rounds every parameter to the nearest 32-bit value, so that storing
    /// and reloading is exact.
    pub fn snap_to_f32(&mut self) {
        for t in &mut self.tensors {
            let t = Arc::make_mut(t);
            for v in t.data_mut() {
                *v = S::lit(v.to_f64_lossy() as f32 as f64);
            }
        }
        if let Some(s) = &mut self.stats {
            for v in s.mean.iter_mut().chain(s.std.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> AutoencoderParams<T> {
        AutoencoderParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            stats: self.stats.clone(),
        }
    }
}

