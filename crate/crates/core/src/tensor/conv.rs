//! Convolution and pooling kernels over channel-last (`B x H x W x C`) maps.

use crate::scalar::Scalar;

/// Output spatial extent of a stride-1 valid cross-correlation.
pub fn conv2d_output_shape(h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
    (h >= kh && w >= kw && kh > 0 && kw > 0).then(|| (h - kh + 1, w - kw + 1))
}

/// `(output extent, padding before)` for "same" pooling along one axis.
///
/// The output is `ceil(input / stride)`; the total padding needed to reach it
/// is split with the smaller half first, so any odd cell goes bottom/right.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

pub fn maxpool_same_output_shape(h: usize, w: usize, stride: usize) -> (usize, usize) {
    (h.div_ceil(stride), w.div_ceil(stride))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfold every receptive field into a row: `[B*Ho*Wo] x [kh*kw*C_in]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.patch_len());
    let run = g.kw * g.c_in;
    let mut cols = vec![T::zero(); g.out_positions() * k];
    let mut row = 0;
    for b in 0..g.batch {
        for i in 0..oh {
            for j in 0..ow {
                let dst = &mut cols[row * k..(row + 1) * k];
                for di in 0..g.kh {
                    // a kernel row is contiguous in the source: kw pixels x C_in channels
                    let src = ((b * g.h + i + di) * g.w + j) * g.c_in;
                    dst[di * run..(di + 1) * run].copy_from_slice(&x[src..src + run]);
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add unfolded rows back onto the input map.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.patch_len());
    let run = g.kw * g.c_in;
    let mut row = 0;
    for b in 0..g.batch {
        for i in 0..oh {
            for j in 0..ow {
                let src = &cols[row * k..(row + 1) * k];
                for di in 0..g.kh {
                    let dst = ((b * g.h + i + di) * g.w + j) * g.c_in;
                    for (d, &s) in dx[dst..dst + run]
                        .iter_mut()
                        .zip(&src[di * run..(di + 1) * run])
                    {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward cross-correlation. Returns `(output, unfolded input)`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    filters: &[T],
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let (m, k, n) = (g.out_positions(), g.patch_len(), g.c_out);
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &cols,
        (k as isize, 1),
        filters,
        (n as isize, 1),
        T::zero(),
        &mut out,
        (n as isize, 1),
    );
    (out, cols)
}

/// Accumulate filter and input gradients given the upstream gradient `dy`.
pub(crate) fn conv2d_backward<T: Scalar>(
    dy: &[T],
    cols: &[T],
    filters: &[T],
    g: &ConvGeometry,
    dfilters: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    let (m, k, n) = (g.out_positions(), g.patch_len(), g.c_out);
    if let Some(df) = dfilters {
        // dF[k x n] += cols^T[k x m] * dy[m x n]
        T::gemm(
            k,
            m,
            n,
            T::one(),
            cols,
            (1, k as isize),
            dy,
            (n as isize, 1),
            T::one(),
            df,
            (n as isize, 1),
        );
    }
    if let Some(dx) = dx {
        // dcols[m x k] = dy[m x n] * F^T[n x k]
        let mut dcols = vec![T::zero(); m * k];
        T::gemm(
            m,
            n,
            k,
            T::one(),
            dy,
            (n as isize, 1),
            filters,
            (1, n as isize),
            T::zero(),
            &mut dcols,
            (k as isize, 1),
        );
        col2im_add(&dcols, g, dx);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeometry {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        maxpool_same_output_shape(self.h, self.w, self.stride)
    }
}

/// Max pooling with "same" padding. Padded cells act as negative infinity and
/// never win. Ties resolve to the first cell in row-major window order.
/// Returns `(output, flat input index of each winner)`.
pub(crate) fn maxpool_same_forward<T: Scalar>(x: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    let (oh, pad_top) = same_padding(g.h, g.kernel, g.stride);
    let (ow, pad_left) = same_padding(g.w, g.kernel, g.stride);
    let c = g.c;
    let n = g.batch * oh * ow * c;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    // clipped window bounds along one axis
    let window = |o: usize, pad: usize, len: usize| {
        let lo = (o * g.stride).saturating_sub(pad);
        let hi = (o * g.stride + g.kernel).saturating_sub(pad).min(len);
        lo..hi
    };
    for b in 0..g.batch {
        for i in 0..oh {
            let rows = window(i, pad_top, g.h);
            for j in 0..ow {
                let cols = window(j, pad_left, g.w);
                let base = out.len();
                let first = ((b * g.h + rows.start) * g.w + cols.start) * c;
                out.extend_from_slice(&x[first..first + c]);
                arg.extend(first..first + c);
                let (best, best_at) = (&mut out[base..base + c], &mut arg[base..base + c]);
                for r in rows.clone() {
                    for s in cols.clone() {
                        let src = ((b * g.h + r) * g.w + s) * c;
                        if src == first {
                            continue;
                        }
                        for (ch, &v) in x[src..src + c].iter().enumerate() {
                            if v > best[ch] {
                                best[ch] = v;
                                best_at[ch] = src + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_places_odd_cell_after() {
        assert_eq!(same_padding(16, 3, 2), (8, 0));
        assert_eq!(same_padding(254, 3, 2), (127, 0));
        assert_eq!(same_padding(125, 3, 2), (63, 1));
        assert_eq!(same_padding(1, 3, 2), (1, 1));
    }

    #[test]
    fn maxpool_tie_prefers_first_cell() {
        let g = PoolGeometry {
            batch: 1,
            h: 2,
            w: 2,
            c: 1,
            kernel: 3,
            stride: 2,
        };
        let (out, arg) = maxpool_same_forward(&[1.0f64, 1.0, 1.0, 1.0], &g);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let g = ConvGeometry {
            batch: 1,
            h: 3,
            w: 3,
            c_in: 1,
            kh: 3,
            kw: 3,
            c_out: 1,
        };
        let (out, _) = conv2d_forward(&[1.0f64; 9], &[1.0; 9], &g);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeometry {
            batch: 2,
            h: 5,
            w: 4,
            c_in: 2,
            kh: 3,
            kw: 2,
            c_out: 3,
        };
        let x: Vec<f64> = (0..2 * 5 * 4 * 2)
            .map(|i| ((i * 37 % 11) as f64) - 5.0)
            .collect();
        let f: Vec<f64> = (0..3 * 2 * 2 * 3)
            .map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0)
            .collect();
        let (out, _) = conv2d_forward(&x, &f, &g);
        let (oh, ow) = (g.out_h(), g.out_w());
        for b in 0..2 {
            for i in 0..oh {
                for j in 0..ow {
                    for co in 0..3 {
                        let mut acc = 0.0;
                        for di in 0..3 {
                            for dj in 0..2 {
                                for ci in 0..2 {
                                    acc += x[((b * 5 + i + di) * 4 + j + dj) * 2 + ci]
                                        * f[((di * 2 + dj) * 2 + ci) * 3 + co];
                                }
                            }
                        }
                        let got = out[((b * oh + i) * ow + j) * 3 + co];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
