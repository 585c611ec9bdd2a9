//! Raw compute kernels behind the tape ops: direct 2-D convolution, its two
//! adjoints, and small dense matmul.
//!
//! All kernels write disjoint output slabs per parallel task with sequential
//! inner reductions, so outputs are bit-identical regardless of thread count
//! (see `par`).

use crate::par::for_each_slab;
use crate::tensor::{Scalar, Tensor};

/// Geometry of a conv application, carried by the tape so adjoint ops can be
/// constructed without re-deriving shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvMeta {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvMeta {
    pub fn from_shapes(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x_shape.len(), 4, "conv input must be NCHW");
        assert_eq!(w_shape.len(), 4, "conv weight must be OIKK");
        assert_eq!(x_shape[1], w_shape[1], "conv channel mismatch");
        assert_eq!(w_shape[2], w_shape[3], "only square kernels supported");
        assert!(pad < w_shape[2].max(1), "pad must be < kernel size");
        ConvMeta {
            batch: x_shape[0],
            in_channels: x_shape[1],
            out_channels: w_shape[0],
            in_h: x_shape[2],
            in_w: x_shape[3],
            kernel: w_shape[2],
            stride,
            pad,
        }
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h(), self.out_w()]
    }
}

/// Dot product with eight independent accumulator lanes. The fixed
/// combination order keeps results reproducible while letting the loop
/// vectorize (a strict sequential reduction cannot).
#[inline]
fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    const L: usize = 8;
    let mut acc = [T::ZERO; L];
    let ca = a.chunks_exact(L);
    let cb = b.chunks_exact(L);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..L {
            acc[i] += xa[i] * xb[i];
        }
    }
    let mut s = T::ZERO;
    for lane in acc {
        s += lane;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Repacks padded planes by column residue modulo the stride, so strided
/// kernels read contiguous rows: packed(plane, r)[row][i] = xp[row][i*s+r].
/// Returns (buffer, packed width).
fn pack_columns<T: Scalar>(xp: &Tensor<T>, planes: usize, hp: usize, wp: usize, s: usize) -> (Vec<T>, usize) {
    let wpack = wp.div_ceil(s);
    let mut out = vec![T::ZERO; planes * s * hp * wpack];
    let src = xp.data();
    for p in 0..planes {
        for r in 0..s {
            let base = ((p * s + r) * hp) * wpack;
            for row in 0..hp {
                let srow = &src[(p * hp + row) * wp..(p * hp + row + 1) * wp];
                let drow = &mut out[base + row * wpack..base + (row + 1) * wpack];
                let mut col = r;
                for d in drow.iter_mut() {
                    if col >= wp {
                        break;
                    }
                    *d = srow[col];
                    col += s;
                }
            }
        }
    }
    (out, wpack)
}

/// Zero-pads each spatial plane of an NCHW tensor by `pad` on all sides.
fn pad_nchw<T: Scalar>(x: &Tensor<T>, pad: usize) -> Tensor<T> {
    if pad == 0 {
        return x.clone();
    }
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[n, c, hp, wp]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let sbase = plane * h * w;
        let dbase = plane * hp * wp;
        for row in 0..h {
            let so = sbase + row * w;
            let d = dbase + (row + pad) * wp + pad;
            dst[d..d + w].copy_from_slice(&src[so..so + w]);
        }
    }
    out
}

/// Direct convolution, NCHW x OIKK -> NOHW.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, meta: &ConvMeta) -> Tensor<T> {
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let (k, s) = (meta.kernel, meta.stride);
    let xp = pad_nchw(x, meta.pad);
    let (hp, wp) = (meta.in_h + 2 * meta.pad, meta.in_w + 2 * meta.pad);
    let cin = meta.in_channels;
    let cout = meta.out_channels;
    let wdat = w.data();
    let xdat = xp.data();
    let (packed, wpack) = if s > 1 {
        pack_columns(&xp, meta.batch * cin, hp, wp, s)
    } else {
        (Vec::new(), 0)
    };

    let mut out = Tensor::zeros(&meta.out_shape());
    let plane = oh * ow;
    for_each_slab(out.data_mut(), plane, |idx, slab| {
        let n = idx / cout;
        let co = idx % cout;
        for ci in 0..cin {
            let wbase = (co * cin + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[wbase + ky * k + kx];
                    if wv == T::ZERO {
                        continue;
                    }
                    if s == 1 {
                        let xplane =
                            &xdat[(n * cin + ci) * hp * wp..(n * cin + ci + 1) * hp * wp];
                        for oy in 0..oh {
                            let src = &xplane[(oy + ky) * wp + kx..(oy + ky) * wp + kx + ow];
                            let dst = &mut slab[oy * ow..(oy + 1) * ow];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d += wv * v;
                            }
                        }
                    } else {
                        // col = ox*s + kx = s*(ox + kx/s) + kx%s: contiguous
                        // in the residue-packed plane.
                        let (r, q) = (kx % s, kx / s);
                        let pbase = (((n * cin + ci) * s) + r) * hp * wpack;
                        for oy in 0..oh {
                            let row = &packed
                                [pbase + (oy * s + ky) * wpack + q..pbase + (oy * s + ky) * wpack + q + ow];
                            let dst = &mut slab[oy * ow..(oy + 1) * ow];
                            for (d, &v) in dst.iter_mut().zip(row) {
                                *d += wv * v;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of `conv2d` with respect to the input: scatter `gy` back through
/// the kernel. Implemented as a stride-1 convolution of the zero-stuffed
/// output gradient with the flipped, channel-swapped kernel.
pub fn conv2d_back_input<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, meta: &ConvMeta) -> Tensor<T> {
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let (k, s) = (meta.kernel, meta.stride);
    let (n, cin, cout) = (meta.batch, meta.in_channels, meta.out_channels);

    // Zero-stuff gy for stride > 1. Trailing zeros make up for the floor in
    // the forward output size (the transposed-conv output padding), so the
    // reconstruction covers every input pixel the last window touched.
    let rh = (meta.in_h + 2 * meta.pad - k) % s;
    let rw = (meta.in_w + 2 * meta.pad - k) % s;
    let (hs, ws) = ((oh - 1) * s + 1 + rh, (ow - 1) * s + 1 + rw);
    let stuffed = if s == 1 {
        gy.clone()
    } else {
        let mut t = Tensor::zeros(&[n, cout, hs, ws]);
        let src = gy.data();
        let dst = t.data_mut();
        for plane in 0..n * cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[plane * hs * ws + (oy * s) * ws + ox * s] =
                        src[plane * oh * ow + oy * ow + ox];
                }
            }
        }
        t
    };

    // Flip kernel spatially and swap in/out channels: (O,I,K,K) -> (I,O,K,K).
    let mut wt = Tensor::zeros(&[cin, cout, k, k]);
    {
        let src = w.data();
        let dst = wt.data_mut();
        for co in 0..cout {
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        dst[((ci * cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                            src[((co * cin + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
    }

    let sub = ConvMeta {
        batch: n,
        in_channels: cout,
        out_channels: cin,
        in_h: hs,
        in_w: ws,
        kernel: k,
        stride: 1,
        pad: k - 1 - meta.pad,
    };
    let gx = conv2d(&stuffed, &wt, &sub);
    debug_assert_eq!(gx.shape(), &[n, cin, meta.in_h, meta.in_w]);
    gx
}

/// Adjoint of `conv2d` with respect to the weights.
pub fn conv2d_back_weight<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, meta: &ConvMeta) -> Tensor<T> {
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let (k, s) = (meta.kernel, meta.stride);
    let (n, cin, cout) = (meta.batch, meta.in_channels, meta.out_channels);
    let xp = pad_nchw(x, meta.pad);
    let (hp, wp) = (meta.in_h + 2 * meta.pad, meta.in_w + 2 * meta.pad);
    let xdat = xp.data();
    let gdat = gy.data();
    let (packed, wpack) = if s > 1 {
        pack_columns(&xp, n * cin, hp, wp, s)
    } else {
        (Vec::new(), 0)
    };

    let mut gw = Tensor::zeros(&[cout, cin, k, k]);
    let slab_len = cin * k * k;
    for_each_slab(gw.data_mut(), slab_len, |co, slab| {
        for b in 0..n {
            let gplane = &gdat[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::ZERO;
                        if s == 1 {
                            let xplane =
                                &xdat[(b * cin + ci) * hp * wp..(b * cin + ci + 1) * hp * wp];
                            for oy in 0..oh {
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                let xwin = &xplane
                                    [(oy + ky) * wp + kx..(oy + ky) * wp + kx + ow];
                                acc += dot_lanes(grow, xwin);
                            }
                        } else {
                            let (r, q) = (kx % s, kx / s);
                            let pbase = (((b * cin + ci) * s) + r) * hp * wpack;
                            for oy in 0..oh {
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                let xwin = &packed[pbase + (oy * s + ky) * wpack + q
                                    ..pbase + (oy * s + ky) * wpack + q + ow];
                                acc += dot_lanes(grow, xwin);
                            }
                        }
                        slab[(ci * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}

/// Dense matmul with optional transposes: C = op(A) * op(B).
pub fn matmul<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Tensor<T> {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, ka) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(ka, kb, "matmul inner dimension mismatch");
    let k = ka;
    let ad = a.data();
    let bd = b.data();
    let mut out = Tensor::zeros(&[m, n]);
    let od = out.data_mut();
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == T::ZERO {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut od[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    od[i * n + j] = dot_lanes(arow, brow);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let arow = &ad[p * m..(p + 1) * m];
                let brow = &bd[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = arow[i];
                    if av == T::ZERO {
                        continue;
                    }
                    let orow = &mut od[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::ZERO;
                    for p in 0..k {
                        acc += ad[p * m + i] * bd[j * k + p];
                    }
                    od[i * n + j] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference conv: quadruple loop straight from the definition.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, meta: &ConvMeta) -> Tensor<f64> {
        let (oh, ow) = (meta.out_h(), meta.out_w());
        let mut out = Tensor::zeros(&meta.out_shape());
        for n in 0..meta.batch {
            for co in 0..meta.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..meta.in_channels {
                            for ky in 0..meta.kernel {
                                for kx in 0..meta.kernel {
                                    let iy = (oy * meta.stride + ky) as isize - meta.pad as isize;
                                    let ix = (ox * meta.stride + kx) as isize - meta.pad as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= meta.in_h as isize
                                        || ix >= meta.in_w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((n * meta.in_channels + ci) * meta.in_h
                                        + iy as usize)
                                        * meta.in_w
                                        + ix as usize;
                                    let wi = ((co * meta.in_channels + ci) * meta.kernel + ky)
                                        * meta.kernel
                                        + kx;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out.data_mut()[((n * meta.out_channels + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn arb_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        // Cheap deterministic fill; adequate for kernel equivalence checks.
        let len: usize = shape.iter().product();
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let data = (0..len)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_matches_naive_reference() {
        for &(cin, cout, h, w, k, s, p) in &[
            (1usize, 3usize, 8usize, 8usize, 3usize, 1usize, 1usize),
            (2, 4, 9, 7, 3, 2, 1),
            (3, 2, 6, 6, 1, 2, 0),
            (2, 2, 5, 5, 3, 1, 0),
        ] {
            let x = arb_tensor(&[2, cin, h, w], 7 + k as u64);
            let wt = arb_tensor(&[cout, cin, k, k], 13 + s as u64);
            let meta = ConvMeta::from_shapes(x.shape(), wt.shape(), s, p);
            let fast = conv2d(&x, &wt, &meta);
            let slow = conv_naive(&x, &wt, &meta);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "conv mismatch {a} vs {b}");
            }
        }
    }

    /// The two adjoints must satisfy <conv(x,w), gy> = <x, back_input(gy,w)>
    /// = <w, back_weight(x,gy)> (linearity in each argument).
    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        for &(cin, cout, h, w, k, s, p) in &[
            (2usize, 3usize, 8usize, 8usize, 3usize, 1usize, 1usize),
            (2, 3, 9, 9, 3, 2, 1),
            (2, 3, 8, 8, 3, 2, 1), // stride does not divide the padded extent
            (3, 2, 8, 8, 1, 2, 0),
            (2, 2, 7, 10, 3, 2, 0),
        ] {
            let x = arb_tensor(&[2, cin, h, w], 17);
            let wt = arb_tensor(&[cout, cin, k, k], 23);
            let meta = ConvMeta::from_shapes(x.shape(), wt.shape(), s, p);
            let y = conv2d(&x, &wt, &meta);
            let gy = arb_tensor(y.shape(), 31);

            let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
            let gx = conv2d_back_input(&gy, &wt, &meta);
            let rhs_x: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
            let gw = conv2d_back_weight(&x, &gy, &meta);
            let rhs_w: f64 = wt.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();

            assert!((lhs - rhs_x).abs() < 1e-9, "input adjoint: {lhs} vs {rhs_x}");
            assert!((lhs - rhs_w).abs() < 1e-9, "weight adjoint: {lhs} vs {rhs_w}");
        }
    }

    #[test]
    fn matmul_transposes() {
        let a = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, &b, false, false);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);

        // A * B == (Aᵀ)ᵀ * (Bᵀ)ᵀ through the flag paths.
        let at = Tensor::from_vec(&[3, 2], vec![1., 4., 2., 5., 3., 6.]).unwrap();
        let bt = Tensor::from_vec(&[2, 3], vec![7., 9., 11., 8., 10., 12.]).unwrap();
        assert_eq!(matmul(&at, &b, true, false).data(), c.data());
        assert_eq!(matmul(&a, &bt, false, true).data(), c.data());
        assert_eq!(matmul(&at, &bt, true, true).data(), c.data());
    }
}
