//! Forward and backward kernels for the layer types of the U-Net.
//!
//! Convolutions lower to `im2col` + GEMM per sample. Samples run in
//! parallel, but every reduction across samples (kernel and bias gradients)
//! is summed sequentially in sample order, so results are bit-identical
//! regardless of the thread count.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Output probabilities of [`sigmoid`] are clamped to `[SIGMOID_EPS, 1 - SIGMOID_EPS]`.
pub const SIGMOID_EPS: f64 = 1e-7;

#[allow(clippy::type_complexity)]
fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kcin != cin {
        return shape_err(format!(
            "conv2d: input has {cin} channels, kernel expects {kcin}"
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return shape_err(format!(
            "conv2d: kernel must be square and odd, got {kh}x{kw}"
        ));
    }
    if bias.len() != cout {
        return shape_err(format!(
            "conv2d: bias has {} entries, expected {cout}",
            bias.len()
        ));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return shape_err(format!(
            "conv2d: {h}x{w} input too small for {kh}x{kw} kernel"
        ));
    }
    let ho = h + 2 * padding - kh + 1;
    let wo = w + 2 * padding - kw + 1;
    Ok((n, cin, h, w, cout, kh, ho, wo))
}

/// Lowers one sample `[cin, h, w]` into a `[cin*k*k, ho*wo]` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..ho {
                    let iy = y as isize + ki as isize - pad as isize;
                    let out = &mut dst[y * wo..(y + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (x_out, o) in out.iter_mut().enumerate() {
                        let ix = x_out as isize + kj as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    dx.fill(T::ZERO);
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..ho {
                    let iy = y as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for x_out in 0..wo {
                        let ix = x_out as isize + kj as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[y * wo + x_out];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with zero padding and per-channel bias.
///
/// `input` is `[N, Cin, H, W]`, `kernel` is `[Cout, Cin, k, k]` with odd `k`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, w, cout, k, ho, wo) = check_conv_shapes(input, kernel, bias, padding)?;
    let ckk = cin * k * k;
    let hw = ho * wo;
    let in_per = cin * h * w;
    let mut out = vec![T::ZERO; n * cout * hw];
    let direct = k == 1 && padding == 0;
    out.par_chunks_mut(cout * hw)
        .enumerate()
        .for_each(|(s, out_s)| {
            let x = &input.data()[s * in_per..(s + 1) * in_per];
            for (co, row) in out_s.chunks_mut(hw).enumerate() {
                row.fill(bias.data()[co]);
            }
            if direct {
                T::gemm(false, false, cout, hw, ckk, kernel.data(), x, T::ONE, out_s);
            } else {
                let mut cols = vec![T::ZERO; ckk * hw];
                im2col(x, cin, h, w, k, padding, ho, wo, &mut cols);
                T::gemm(
                    false,
                    false,
                    cout,
                    hw,
                    ckk,
                    kernel.data(),
                    &cols,
                    T::ONE,
                    out_s,
                );
            }
        });
    Tensor::new([n, cout, ho, wo], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: usize,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, _, k, _) = kernel.dims4()?;
    let ho = h + 2 * padding + 1 - k;
    let wo = w + 2 * padding + 1 - k;
    if grad_out.shape() != [n, cout, ho, wo] {
        return shape_err(format!(
            "conv2d backward: gradient shape {:?} does not match output [{n}, {cout}, {ho}, {wo}]",
            grad_out.shape()
        ));
    }
    let ckk = cin * k * k;
    let hw = ho * wo;
    let in_per = cin * h * w;
    let direct = k == 1 && padding == 0;

    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let x = &input.data()[s * in_per..(s + 1) * in_per];
            let g = &grad_out.data()[s * cout * hw..(s + 1) * cout * hw];
            let owned_cols;
            let cols: &[T] = if direct {
                x
            } else {
                let mut c = vec![T::ZERO; ckk * hw];
                im2col(x, cin, h, w, k, padding, ho, wo, &mut c);
                owned_cols = c;
                &owned_cols
            };
            let mut dw = vec![T::ZERO; cout * ckk];
            T::gemm(false, true, cout, ckk, hw, g, cols, T::ZERO, &mut dw);
            let dx = need_input_grad.then(|| {
                let mut dcols = vec![T::ZERO; ckk * hw];
                T::gemm(
                    true,
                    false,
                    ckk,
                    hw,
                    cout,
                    kernel.data(),
                    g,
                    T::ZERO,
                    &mut dcols,
                );
                if direct {
                    dcols
                } else {
                    let mut dx = vec![T::ZERO; in_per];
                    col2im(&dcols, cin, h, w, k, padding, ho, wo, &mut dx);
                    dx
                }
            });
            (dw, dx)
        })
        .collect();

    let mut dkernel = vec![T::ZERO; cout * ckk];
    let mut dinput = need_input_grad.then(|| Vec::with_capacity(n * in_per));
    for (dw, dx) in per_sample {
        for (a, b) in dkernel.iter_mut().zip(dw) {
            *a += b;
        }
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    let dbias = channel_sums(grad_out.data(), n, cout, hw);
    Ok(ConvGrads {
        input: dinput
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        kernel: Tensor::new(kernel.shape().to_vec(), dkernel)?,
        bias: Tensor::new([cout], dbias)?,
    })
}

fn channel_sums<T: Scalar>(g: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; c];
    for s in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let start = (s * c + ch) * hw;
            for &v in &g[start..start + hw] {
                *acc += v;
            }
        }
    }
    out
}

fn check_convt_shapes<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = input.dims4()?;
    let (kcin, cout, kh, kw) = kernel.dims4()?;
    if kcin != cin {
        return shape_err(format!(
            "conv_transpose2d: input has {cin} channels, kernel expects {kcin}"
        ));
    }
    if (kh, kw) != (2, 2) {
        return shape_err(format!(
            "conv_transpose2d: kernel must be 2x2, got {kh}x{kw}"
        ));
    }
    if bias.len() != cout {
        return shape_err(format!(
            "conv_transpose2d: bias has {} entries, expected {cout}",
            bias.len()
        ));
    }
    Ok((n, cin, h, w, cout))
}

/// 2x2 transposed convolution with stride 2; doubles both spatial dims.
///
/// `kernel` is `[Cin, Cout, 2, 2]`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, cin, h, w, cout) = check_convt_shapes(input, kernel, bias)?;
    let hw = h * w;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::ZERO; n * cout * ho * wo];
    out.par_chunks_mut(cout * ho * wo)
        .enumerate()
        .for_each(|(s, out_s)| {
            let x = &input.data()[s * cin * hw..(s + 1) * cin * hw];
            let mut y = vec![T::ZERO; cout * 4 * hw];
            T::gemm(
                true,
                false,
                cout * 4,
                hw,
                cin,
                kernel.data(),
                x,
                T::ZERO,
                &mut y,
            );
            for co in 0..cout {
                let b = bias.data()[co];
                for d in 0..4 {
                    let (di, dj) = (d / 2, d % 2);
                    let row = &y[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                    for i in 0..h {
                        for j in 0..w {
                            out_s[(co * ho + 2 * i + di) * wo + 2 * j + dj] = row[i * w + j] + b;
                        }
                    }
                }
            }
        });
    Tensor::new([n, cout, ho, wo], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (n, cin, h, w) = input.dims4()?;
    let (_, cout, _, _) = kernel.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    if grad_out.shape() != [n, cout, ho, wo] {
        return shape_err(format!(
            "conv_transpose2d backward: gradient shape {:?} does not match output [{n}, {cout}, {ho}, {wo}]",
            grad_out.shape()
        ));
    }
    let hw = h * w;
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let x = &input.data()[s * cin * hw..(s + 1) * cin * hw];
            let g = &grad_out.data()[s * cout * ho * wo..(s + 1) * cout * ho * wo];
            let mut gy = vec![T::ZERO; cout * 4 * hw];
            for co in 0..cout {
                for d in 0..4 {
                    let (di, dj) = (d / 2, d % 2);
                    let row = &mut gy[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                    for i in 0..h {
                        for j in 0..w {
                            row[i * w + j] = g[(co * ho + 2 * i + di) * wo + 2 * j + dj];
                        }
                    }
                }
            }
            let mut dw = vec![T::ZERO; cin * cout * 4];
            T::gemm(false, true, cin, cout * 4, hw, x, &gy, T::ZERO, &mut dw);
            let dx = need_input_grad.then(|| {
                let mut dx = vec![T::ZERO; cin * hw];
                T::gemm(
                    false,
                    false,
                    cin,
                    hw,
                    cout * 4,
                    kernel.data(),
                    &gy,
                    T::ZERO,
                    &mut dx,
                );
                dx
            });
            (dw, dx)
        })
        .collect();

    let mut dkernel = vec![T::ZERO; cin * cout * 4];
    let mut dinput = need_input_grad.then(|| Vec::with_capacity(n * cin * hw));
    for (dw, dx) in per_sample {
        for (a, b) in dkernel.iter_mut().zip(dw) {
            *a += b;
        }
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    let dbias = channel_sums(grad_out.data(), n, cout, ho * wo);
    Ok(ConvGrads {
        input: dinput
            .map(|d| Tensor::new(input.shape().to_vec(), d))
            .transpose()?,
        kernel: Tensor::new(kernel.shape().to_vec(), dkernel)?,
        bias: Tensor::new([cout], dbias)?,
    })
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat input index of the maximum (first occurrence in
/// row-major window order on ties).
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("maxpool2d: spatial dims {h}x{w} must be even"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, ho, wo], out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return shape_err("maxpool2d backward: argmax/gradient length mismatch");
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Gradient is 1 where `x > 0` and 0 elsewhere, including at the kink.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let s = if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    };
    let lo = T::lit(SIGMOID_EPS);
    let hi = T::lit(1.0 - SIGMOID_EPS);
    if s < lo {
        lo
    } else if s > hi {
        hi
    } else {
        s
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Backward from the forward output: `s * (1 - s)`.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::ONE - s))
        .collect();
    Tensor::new(output.shape().to_vec(), data).expect("same shape")
}

/// Concatenates along the channel axis: channels of `a` first, then `b`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return shape_err(format!(
            "concat_channels: {:?} and {:?} differ outside the channel axis",
            a.shape(),
            b.shape()
        ));
    }
    let (pa, pb) = (ca * ha * wa, cb * hb * wb);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for s in 0..na {
        out.extend_from_slice(&a.data()[s * pa..(s + 1) * pa]);
        out.extend_from_slice(&b.data()[s * pb..(s + 1) * pb]);
    }
    Tensor::new([na, ca + cb, ha, wa], out)
}

/// Inverse of [`concat_channels`]: splits off the first `ca` channels.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if ca > c {
        return shape_err(format!("split_channels: {ca} exceeds {c} channels"));
    }
    let cb = c - ca;
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * pa);
    let mut b = Vec::with_capacity(n * pb);
    for s in 0..n {
        let chunk = &x.data()[s * (pa + pb)..(s + 1) * (pa + pb)];
        a.extend_from_slice(&chunk[..pa]);
        b.extend_from_slice(&chunk[pa..]);
    }
    Ok((
        Tensor::new([n, ca, h, w], a)?,
        Tensor::new([n, cb, h, w], b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct quadruple-loop cross-correlation used as an oracle.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4().unwrap();
        let (cout, _, kk, _) = k.dims4().unwrap();
        let ho = h + 2 * pad + 1 - kk;
        let wo = w + 2 * pad + 1 - kk;
        Tensor::from_fn([n, cout, ho, wo], |idx| {
            let (s, rest) = (idx / (cout * ho * wo), idx % (cout * ho * wo));
            let (co, rest) = (rest / (ho * wo), rest % (ho * wo));
            let (y, xo) = (rest / wo, rest % wo);
            let mut acc = b.data()[co];
            for ci in 0..cin {
                for ki in 0..kk {
                    for kj in 0..kk {
                        let iy = y as isize + ki as isize - pad as isize;
                        let ix = xo as isize + kj as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x.data()[((s * cin + ci) * h + iy as usize) * w + ix as usize]
                                * k.data()[((co * cin + ci) * kk + ki) * kk + kj];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_all_ones_matches_hand_result() {
        let x = Tensor::<f64>::ones([1, 1, 3, 3]);
        let k = Tensor::<f64>::ones([1, 1, 3, 3]);
        let b = Tensor::<f64>::zeros([1]);
        let y = conv2d(&x, &k, &b, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        assert_eq!(conv_oracle(&x, &k, &b, 1).data(), y.data());
    }

    #[test]
    fn conv_identity_1x1() {
        let x = Tensor::<f64>::from_fn([2, 1, 4, 4], |i| i as f64 * 0.5 - 3.0);
        let k = Tensor::<f64>::ones([1, 1, 1, 1]);
        let b = Tensor::<f64>::zeros([1]);
        assert_eq!(conv2d(&x, &k, &b, 0).unwrap(), x);
    }

    #[test]
    fn conv_matches_oracle_on_random_input() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn([2, 3, 5, 6], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::<f64>::from_fn([4, 3, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn([4], |_| rng.gen_range(-1.0..1.0));
        let got = conv2d(&x, &k, &b, 1).unwrap();
        let want = conv_oracle(&x, &k, &b, 1);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros([1, 3, 3, 3]);
        let b = Tensor::<f32>::zeros([1]);
        assert!(matches!(conv2d(&x, &k, &b, 1), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn conv_transpose_scatters_single_value() {
        let x = Tensor::<f64>::full([1, 1, 1, 1], 2.5);
        let k = Tensor::<f64>::ones([1, 1, 2, 2]);
        let b = Tensor::<f64>::zeros([1]);
        let y = conv_transpose2d(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.5; 4]);
    }

    #[test]
    fn conv_transpose_zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros([1, 2, 3, 3]);
        let k = Tensor::<f64>::ones([2, 3, 2, 2]);
        let b = Tensor::<f64>::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = conv_transpose2d(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[1, 3, 6, 6]);
        for co in 0..3 {
            assert!(y.data()[co * 36..(co + 1) * 36]
                .iter()
                .all(|&v| v == b.data()[co]));
        }
    }

    #[test]
    fn maxpool_picks_max_and_first_on_ties() {
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::<f64>::full([1, 1, 4, 4], 0.7);
        let (y, arg) = maxpool2d(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let g = maxpool2d_backward(c.shape(), &arg, &Tensor::<f64>::ones([1, 1, 2, 2])).unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.sum(), 4.0);
    }

    #[test]
    fn maxpool_odd_dims_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 3, 4]);
        assert!(matches!(maxpool2d(&x), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn relu_and_sigmoid_points() {
        let x = Tensor::<f64>::new([4], vec![-1.0, 2.0, 0.0, 0.5]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0, 0.5]);
        let g = relu_backward(&x, &Tensor::ones([4]));
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 1.0]);

        let s = sigmoid(&Tensor::<f64>::zeros([1]));
        assert_eq!(s.data(), &[0.5]);
        assert_eq!(sigmoid_backward(&s, &Tensor::ones([1])).data(), &[0.25]);
        for v in [-40.0f64, 40.0] {
            let y = sigmoid_scalar(v);
            assert!(y > 0.0 && y < 1.0 && y.is_finite());
            let y32 = sigmoid_scalar(v as f32);
            assert!(y32 > 0.0 && y32 < 1.0);
        }
    }

    #[test]
    fn concat_layout_and_split() {
        let a = Tensor::<f64>::from_fn([2, 1, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn([2, 2, 2, 2], |i| 100.0 + i as f64);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2, 2]);
        assert_eq!(&c.data()[..4], &a.data()[..4]);
        assert_eq!(&c.data()[4..12], &b.data()[..8]);
        let (a2, b2) = split_channels(&c, 1).unwrap();
        assert_eq!((a2, b2), (a.clone(), b));

        let empty = Tensor::<f64>::zeros([2, 0, 2, 2]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);

        let bad = Tensor::<f64>::zeros([2, 1, 4, 4]);
        assert!(concat_channels(&a, &bad).is_err());
    }
}
