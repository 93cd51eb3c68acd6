//! 2-D cross-correlation on channels-last (`[B, H, W, C]`) tensors.
//!
//! Padding places `(k - 1) / 2` zeros before the first row/column, which gives
//! an output extent of `ceil(n / stride)` for the 1×1 and 3×3 kernels used by
//! the network. Because the leading pad does not depend on the input length, a
//! time-padded batch item sees exactly the same windows as the item alone.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvGeometry {
    fn from_kernel(kernel: &[usize], stride: usize) -> Result<Self> {
        if kernel.len() != 4 {
            return Err(Error::shape("conv2d", format!("kernel rank {}", kernel.len())));
        }
        let (kh, kw) = (kernel[0], kernel[1]);
        if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} not supported")));
        }
        if !matches!(stride, 1 | 2) {
            return Err(Error::shape("conv2d", format!("stride {stride} not supported")));
        }
        Ok(ConvGeometry {
            kh,
            kw,
            cin: kernel[2],
            cout: kernel[3],
            stride,
        })
    }

    pub fn out_extent(n: usize, stride: usize) -> usize {
        n.div_ceil(stride)
    }

    fn pad_h(&self) -> usize {
        (self.kh - 1) / 2
    }

    fn pad_w(&self) -> usize {
        (self.kw - 1) / 2
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

fn check_input<T: Real>(x: &Tensor<T>, geo: &ConvGeometry) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 || s[3] != geo.cin {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} vs kernel cin {}", s, geo.cin),
        ));
    }
    Ok((s[0], s[1], s[2]))
}

/// Unfolds one batch item into a `[Ho*Wo, kh*kw*Cin]` patch matrix.
fn im2col<T: Real>(item: &[T], h: usize, w: usize, geo: &ConvGeometry, cols: &mut [T]) {
    let ho = ConvGeometry::out_extent(h, geo.stride);
    let wo = ConvGeometry::out_extent(w, geo.stride);
    let patch = geo.patch();
    let cin = geo.cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * patch..][..patch];
            for ky in 0..geo.kh {
                let iy = (oy * geo.stride + ky) as isize - geo.pad_h() as isize;
                for kx in 0..geo.kw {
                    let ix = (ox * geo.stride + kx) as isize - geo.pad_w() as isize;
                    let dst = &mut row[(ky * geo.kw + kx) * cin..][..cin];
                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * w + ix as usize) * cin;
                        dst.copy_from_slice(&item[src..src + cin]);
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto one input item (accumulating).
fn col2im<T: Real>(cols: &[T], h: usize, w: usize, geo: &ConvGeometry, item: &mut [T]) {
    let ho = ConvGeometry::out_extent(h, geo.stride);
    let wo = ConvGeometry::out_extent(w, geo.stride);
    let patch = geo.patch();
    let cin = geo.cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * patch..][..patch];
            for ky in 0..geo.kh {
                let iy = (oy * geo.stride + ky) as isize - geo.pad_h() as isize;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..geo.kw {
                    let ix = (ox * geo.stride + kx) as isize - geo.pad_w() as isize;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let src = &row[(ky * geo.kw + kx) * cin..][..cin];
                    let dst = &mut item[(iy as usize * w + ix as usize) * cin..][..cin];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `out += conv(x, kernel)`; `out` must already have the output shape.
pub fn conv2d_accumulate<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    out: &mut Tensor<T>,
) -> Result<()> {
    let geo = ConvGeometry::from_kernel(kernel.shape(), stride)?;
    let (b, h, w) = check_input(x, &geo)?;
    let ho = ConvGeometry::out_extent(h, stride);
    let wo = ConvGeometry::out_extent(w, stride);
    if out.shape() != [b, ho, wo, geo.cout] {
        return Err(Error::shape(
            "conv2d",
            format!("output {:?} vs expected {:?}", out.shape(), [b, ho, wo, geo.cout]),
        ));
    }
    let patch = geo.patch();
    let rows = ho * wo;
    let in_item = h * w * geo.cin;
    let out_item = rows * geo.cout;
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * patch]
    };
    for bi in 0..b {
        let item = &x.data()[bi * in_item..][..in_item];
        let a: &[T] = if geo.is_pointwise() {
            item
        } else {
            im2col(item, h, w, &geo, &mut cols);
            &cols
        };
        T::gemm(
            rows,
            patch,
            geo.cout,
            T::one(),
            a,
            patch as isize,
            1,
            kernel.data(),
            geo.cout as isize,
            1,
            T::one(),
            &mut out.data_mut()[bi * out_item..][..out_item],
            geo.cout as isize,
            1,
        );
    }
    Ok(())
}

pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let geo = ConvGeometry::from_kernel(kernel.shape(), stride)?;
    let (b, h, w) = check_input(x, &geo)?;
    let mut out = Tensor::zeros(&[
        b,
        ConvGeometry::out_extent(h, stride),
        ConvGeometry::out_extent(w, stride),
        geo.cout,
    ]);
    conv2d_accumulate(x, kernel, stride, &mut out)?;
    Ok(out)
}

/// Reverse pass. Accumulates the kernel gradient into `dkernel` when given and
/// accumulates the input gradient into `dx` when given.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
    dkernel: Option<&mut Tensor<T>>,
    dx: Option<&mut Tensor<T>>,
) -> Result<()> {
    let geo = ConvGeometry::from_kernel(kernel.shape(), stride)?;
    let (b, h, w) = check_input(x, &geo)?;
    let ho = ConvGeometry::out_extent(h, stride);
    let wo = ConvGeometry::out_extent(w, stride);
    if dy.shape() != [b, ho, wo, geo.cout] {
        return Err(Error::shape("conv2d_backward", format!("dy {:?}", dy.shape())));
    }
    let patch = geo.patch();
    let rows = ho * wo;
    let in_item = h * w * geo.cin;
    let out_item = rows * geo.cout;
    let mut cols = vec![T::zero(); rows * patch];

    if let Some(dk) = dkernel {
        if dk.shape() != kernel.shape() {
            return Err(Error::shape("conv2d_backward", "dkernel shape"));
        }
        for bi in 0..b {
            let item = &x.data()[bi * in_item..][..in_item];
            let a: &[T] = if geo.is_pointwise() {
                item
            } else {
                im2col(item, h, w, &geo, &mut cols);
                &cols
            };
            // dK[patch, cout] += colsᵀ · dy
            T::gemm(
                patch,
                rows,
                geo.cout,
                T::one(),
                a,
                1,
                patch as isize,
                &dy.data()[bi * out_item..][..out_item],
                geo.cout as isize,
                1,
                T::one(),
                dk.data_mut(),
                geo.cout as isize,
                1,
            );
        }
    }

    if let Some(dx) = dx {
        if dx.shape() != x.shape() {
            return Err(Error::shape("conv2d_backward", "dx shape"));
        }
        for bi in 0..b {
            let dyi = &dy.data()[bi * out_item..][..out_item];
            let dxi = &mut dx.data_mut()[bi * in_item..][..in_item];
            if geo.is_pointwise() {
                // dx += dy · Kᵀ
                T::gemm(
                    rows,
                    geo.cout,
                    patch,
                    T::one(),
                    dyi,
                    geo.cout as isize,
                    1,
                    kernel.data(),
                    1,
                    geo.cout as isize,
                    T::one(),
                    dxi,
                    patch as isize,
                    1,
                );
            } else {
                T::gemm(
                    rows,
                    geo.cout,
                    patch,
                    T::one(),
                    dyi,
                    geo.cout as isize,
                    1,
                    kernel.data(),
                    1,
                    geo.cout as isize,
                    T::zero(),
                    &mut cols,
                    patch as isize,
                    1,
                );
                col2im(&cols, h, w, &geo, dxi);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct summation over batch, output row/col, kernel row/col and channels.
    fn naive(x: &Tensor<f64>, k: &Tensor<f64>, s: usize) -> Tensor<f64> {
        let [b, h, w, cin] = x.shape().try_into().unwrap();
        let [kh, kw, _, cout] = k.shape().try_into().unwrap();
        let (ho, wo) = (h.div_ceil(s), w.div_ceil(s));
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut out = Tensor::zeros(&[b, ho, wo, cout]);
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - ph as isize;
                                let ix = (ox * s + kx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.data()
                                        [((bi * h + iy as usize) * w + ix as usize) * cin + ci]
                                        * k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                                }
                            }
                        }
                        out.data_mut()[((bi * ho + oy) * wo + ox) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 5, 3, 1], &mut rng);
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let x = Tensor::full(&[1, 6, 6, 1], 2.5f64);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, 1).unwrap();
        for oy in 1..5 {
            for ox in 1..5 {
                assert_eq!(y.data()[oy * 6 + ox], 22.5);
            }
        }
    }

    #[test]
    fn strided_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 4, 4, 3], &mut rng);
        let k = random(&[3, 3, 3, 5], &mut rng);
        let fast = conv2d(&x, &k, 2).unwrap();
        let slow = naive(&x, &k, 2);
        assert_eq!(fast.shape(), &[2, 2, 2, 5]);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn odd_extents_and_pointwise_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (h, w, kh, s) in [(5, 7, 3, 2), (3, 1, 3, 1), (7, 5, 1, 2), (1, 1, 3, 2)] {
            let x = random(&[1, h, w, 2], &mut rng);
            let k = random(&[kh, kh, 2, 3], &mut rng);
            let fast = conv2d(&x, &k, s).unwrap();
            let slow = naive(&x, &k, s);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn output_extent_is_ceil_division() {
        for n in 1..=64 {
            for s in [1, 2] {
                let x = Tensor::<f32>::zeros(&[1, n, 1, 1]);
                let k = Tensor::zeros(&[3, 3, 1, 1]);
                assert_eq!(conv2d(&x, &k, s).unwrap().dim(1), n.div_ceil(s));
                let k1 = Tensor::zeros(&[1, 1, 1, 1]);
                assert_eq!(conv2d(&x, &k1, s).unwrap().dim(1), n.div_ceil(s));
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 2]);
        let k = Tensor::zeros(&[3, 3, 3, 1]);
        assert!(matches!(conv2d(&x, &k, 1), Err(Error::ShapeMismatch { .. })));
    }
}
