//! Dense kernels behind the tape primitives.
//!
//! Image tensors are channels-last: `[batch, height, width, channels]`.
//! Convolution kernels are `[k, k, in_channels, out_channels]` with odd `k`,
//! stride 1 and "same" zero padding of `k / 2`.

use crate::scalar::{gemm, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn from_shapes(x: &[usize], w: &[usize]) -> Option<Self> {
        if x.len() != 4 || w.len() != 4 || w[0] != w[1] || w[0] % 2 == 0 || w[2] != x[3] {
            return None;
        }
        Some(Self {
            batch: x[0],
            height: x[1],
            width: x[2],
            in_ch: x[3],
            out_ch: w[3],
            k: w[0],
        })
    }

    fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.in_ch
    }

    /// Source pixel for output `(oh, ow)` under kernel tap `(kh, kw)`.
    ///
    /// A plain convolution gathers from `o + tap - pad`; the transposed
    /// convolution scatters `i -> i - pad + tap`, i.e. gathers from
    /// `o + pad - tap`.
    #[inline]
    fn source(&self, oh: usize, ow: usize, kh: usize, kw: usize, transposed: bool) -> Option<(usize, usize)> {
        let pad = (self.k / 2) as isize;
        let (dh, dw) = if transposed {
            (pad - kh as isize, pad - kw as isize)
        } else {
            (kh as isize - pad, kw as isize - pad)
        };
        let ih = oh as isize + dh;
        let iw = ow as isize + dw;
        if ih < 0 || iw < 0 || ih >= self.height as isize || iw >= self.width as isize {
            None
        } else {
            Some((ih as usize, iw as usize))
        }
    }
}

fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], transposed: bool) -> Vec<S> {
    let patch = g.patch();
    let mut cols = vec![S::zero(); g.rows() * patch];
    let c = g.in_ch;
    for n in 0..g.batch {
        for oh in 0..g.height {
            for ow in 0..g.width {
                let row = (n * g.height + oh) * g.width + ow;
                let dst_row = &mut cols[row * patch..(row + 1) * patch];
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        if let Some((ih, iw)) = g.source(oh, ow, kh, kw, transposed) {
                            let src = ((n * g.height + ih) * g.width + iw) * c;
                            let dst = (kh * g.k + kw) * c;
                            dst_row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S], transposed: bool) -> Vec<S> {
    let patch = g.patch();
    let c = g.in_ch;
    let mut x = vec![S::zero(); g.batch * g.height * g.width * c];
    for n in 0..g.batch {
        for oh in 0..g.height {
            for ow in 0..g.width {
                let row = (n * g.height + oh) * g.width + ow;
                let src_row = &cols[row * patch..(row + 1) * patch];
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        if let Some((ih, iw)) = g.source(oh, ow, kh, kw, transposed) {
                            let dst = ((n * g.height + ih) * g.width + iw) * c;
                            let src = (kh * g.k + kw) * c;
                            for (d, &s) in x[dst..dst + c].iter_mut().zip(&src_row[src..src + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn conv_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], transposed: bool) -> Vec<S> {
    let cols = im2col(g, x, transposed);
    let mut y = vec![S::zero(); g.rows() * g.out_ch];
    gemm(false, false, g.rows(), g.out_ch, g.patch(), S::one(), &cols, w, S::zero(), &mut y);
    y
}

/// Gradients of a convolution wrt its input and kernel.
pub fn conv_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    dy: &[S],
    transposed: bool,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let dw = need_dw.then(|| {
        let cols = im2col(g, x, transposed);
        let mut dw = vec![S::zero(); g.patch() * g.out_ch];
        gemm(true, false, g.patch(), g.out_ch, g.rows(), S::one(), &cols, dy, S::zero(), &mut dw);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![S::zero(); g.rows() * g.patch()];
        gemm(false, true, g.rows(), g.patch(), g.out_ch, S::one(), dy, w, S::zero(), &mut dcols);
        col2im(g, &dcols, transposed)
    });
    (dx, dw)
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn narrow<S: Scalar>(x: &[S], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<S> {
    let (outer, alen, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * alen + start) * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

pub fn narrow_backward<S: Scalar>(
    dy: &[S],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<S> {
    let (outer, alen, inner) = axis_split(shape, axis);
    let mut dx = vec![S::zero(); outer * alen * inner];
    for o in 0..outer {
        let base = (o * alen + start) * inner;
        let src = o * len * inner;
        dx[base..base + len * inner].copy_from_slice(&dy[src..src + len * inner]);
    }
    dx
}

pub fn concat<S: Scalar>(parts: &[(&[S], &[usize])], axis: usize) -> (Vec<S>, Vec<usize>) {
    let mut shape = parts[0].1.to_vec();
    shape[axis] = parts.iter().map(|(_, s)| s[axis]).sum();
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for (data, s) in parts {
            let chunk = s[axis] * inner;
            out.extend_from_slice(&data[o * chunk..(o + 1) * chunk]);
        }
    }
    (out, shape)
}
