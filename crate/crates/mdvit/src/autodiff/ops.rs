//! Differentiable tensor operations recorded on the [`Tape`].
//!
//! Conventions:
//! - every node value is an owned, standard-layout `ArrayD`;
//! - linear weights are `(in, out)`, conv weights `(out, in, kh, kw)`;
//! - token maps are `(batch, tokens, channels)`, spatial maps
//!   `(batch, channels, height, width)`.

use super::{Tape, Var};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Axis, Ix2, IxDyn};

fn to_2d<T: Scalar>(x: &ArrayD<T>, rows: usize, cols: usize) -> Array2<T> {
    match x.view().into_shape_with_order((rows, cols)) {
        Ok(v) => v.to_owned(),
        Err(_) => x
            .as_standard_layout()
            .into_shape_with_order((rows, cols))
            .expect("element count mismatch")
            .to_owned(),
    }
}

/// Force a standard (row-major contiguous) layout. `Array2::dot` can return
/// non-standard layouts when an operand dimension is 1, which breaks
/// reshapes and `as_slice` further down.
fn std2<T: Scalar>(a: Array2<T>) -> Array2<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn gelu_val<T: Scalar>(x: T) -> T {
    let s = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let c = T::from_f64(0.044715);
    let u = s * (x + c * x * x * x);
    T::from_f64(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = T::from_f64(0.7978845608028654);
    let c = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let du = s * (T::one() + T::from_f64(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn sigmoid_val<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g: &ArrayD<T>| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g: &ArrayD<T>| vec![g.mapv(|v| v * c)])),
        )
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|v| v + c);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g: &ArrayD<T>| vec![g.clone()])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = &av * &bv;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g: &ArrayD<T>| vec![g * &bv, g * &av])),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = &av / &bv;
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let da = g / &bv;
                let db = -(g * &av) / (&bv * &bv);
                vec![da, db]
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let value = av.mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let mut d = g.clone();
                d.zip_mut_with(&av, |gi, &xi| {
                    if xi <= T::zero() {
                        *gi = T::zero()
                    }
                });
                vec![d]
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let value = av.mapv(gelu_val);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let mut d = g.clone();
                d.zip_mut_with(&av, |gi, &xi| *gi *= gelu_grad(xi));
                vec![d]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_val);
        let y = value.clone();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let mut d = g.clone();
                d.zip_mut_with(&y, |gi, &yi| *gi = *gi * yi * (T::one() - yi));
                vec![d]
            })),
        )
    }

    // ---- linear algebra --------------------------------------------------

    /// `x (..., Cin) @ w (Cin, Cout) + b (Cout)`, applied over all leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (cin, cout) = {
            let ws = self.value(w).shape();
            assert_eq!(ws.len(), 2);
            (ws[0], ws[1])
        };
        let cin_x = *xs.last().expect("linear input needs >= 1 axis");
        assert_eq!(cin_x, cin, "linear: channel mismatch");
        let rows: usize = xs[..xs.len() - 1].iter().product();

        let x2 = to_2d(self.value(x), rows, cin);
        let w2 = self
            .value(w)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let mut y2 = x2.dot(&w2);
        if let Some(bv) = b {
            let bias = self.value(bv).view().into_shape_with_order(cout).unwrap();
            y2 += &bias;
        }
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(cout);
        let value = std2(y2).into_shape_with_order(IxDyn(&out_shape)).unwrap();

        let mut parents = vec![x.0, w.0];
        if let Some(bv) = b {
            parents.push(bv.0);
        }
        let has_bias = b.is_some();
        let x_shape = xs.clone();
        self.push(
            value,
            parents,
            Some(Box::new(move |g: &ArrayD<T>| {
                let g2 = to_2d(g, rows, cout);
                let dx = std2(g2.dot(&w2.t()))
                    .into_shape_with_order(IxDyn(&x_shape))
                    .unwrap();
                let dw = std2(x2.t().dot(&g2)).into_dyn();
                let mut grads = vec![dx, dw];
                if has_bias {
                    let db = g2.sum_axis(Axis(0)).into_dyn();
                    grads.push(db);
                }
                grads
            })),
        )
    }

    /// Batched matmul over two leading axes: `a (B,H,M,K) @ b (B,H,K,N)`.
    /// With `transpose_a`, `a` is `(B,H,K,M)` and each matrix enters transposed.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_a: bool) -> Var {
        let asv = self.value(a).shape().to_vec();
        let bsv = self.value(b).shape().to_vec();
        assert_eq!(asv.len(), 4);
        assert_eq!(bsv.len(), 4);
        assert_eq!(&asv[..2], &bsv[..2], "bmm: leading axes differ");
        let (bb, hh) = (asv[0], asv[1]);
        let (m, k) = if transpose_a {
            (asv[3], asv[2])
        } else {
            (asv[2], asv[3])
        };
        assert_eq!(bsv[2], k, "bmm: inner dim mismatch");
        let n = bsv[3];

        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let mut value = ArrayD::<T>::zeros(IxDyn(&[bb, hh, m, n]));
        for bi in 0..bb {
            for hi in 0..hh {
                let am = av
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), hi)
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .to_owned();
                let bm = bv
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), hi)
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .to_owned();
                let prod = if transpose_a {
                    am.t().dot(&bm)
                } else {
                    am.dot(&bm)
                };
                value
                    .index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), hi)
                    .assign(&prod);
            }
        }
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let mut da = ArrayD::<T>::zeros(av.raw_dim());
                let mut db = ArrayD::<T>::zeros(bv.raw_dim());
                for bi in 0..bb {
                    for hi in 0..hh {
                        let gm = g
                            .index_axis(Axis(0), bi)
                            .index_axis(Axis(0), hi)
                            .into_dimensionality::<Ix2>()
                            .unwrap()
                            .to_owned();
                        let am = av
                            .index_axis(Axis(0), bi)
                            .index_axis(Axis(0), hi)
                            .into_dimensionality::<Ix2>()
                            .unwrap()
                            .to_owned();
                        let bm = bv
                            .index_axis(Axis(0), bi)
                            .index_axis(Axis(0), hi)
                            .into_dimensionality::<Ix2>()
                            .unwrap()
                            .to_owned();
                        let (dam, dbm) = if transpose_a {
                            // out = a^T b  =>  da = b g^T, db = a g
                            (bm.dot(&gm.t()), am.dot(&gm))
                        } else {
                            // out = a b    =>  da = g b^T, db = a^T g
                            (gm.dot(&bm.t()), am.t().dot(&gm))
                        };
                        da.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), hi)
                            .assign(&dam);
                        db.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), hi)
                            .assign(&dbm);
                    }
                }
                vec![da, db]
            })),
        )
    }

    // ---- convolutions ----------------------------------------------------

    /// Dense 2-D convolution, weight `(Cout, Cin, kh, kw)`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_w, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, cin_w, "conv2d: channel mismatch");
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d: input too small"
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let col = im2col(&self.value(x).view(), kh, kw, stride, pad, oh, ow);
        let w2 = to_2d(self.value(w), cout, cin * kh * kw);
        let mut y2 = col.dot(&w2.t());
        if let Some(bv) = b {
            let bias = self.value(bv).view().into_shape_with_order(cout).unwrap();
            y2 += &bias;
        }
        // (B*OH*OW, Cout) -> (B, Cout, OH, OW)
        let value = nhwc_rows_to_nchw(y2, batch, oh, ow, cout);

        let mut parents = vec![x.0, w.0];
        if let Some(bv) = b {
            parents.push(bv.0);
        }
        let has_bias = b.is_some();
        self.push(
            value,
            parents,
            Some(Box::new(move |g: &ArrayD<T>| {
                let g2 = nchw_to_nhwc_rows(g, batch, cout, oh, ow);
                let dw = std2(g2.t().dot(&col))
                    .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                    .unwrap();
                let dcol = std2(g2.dot(&w2));
                let dx = col2im(&dcol, batch, cin, h, wd, kh, kw, stride, pad, oh, ow);
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(g2.sum_axis(Axis(0)).into_dyn());
                }
                grads
            })),
        )
    }

    /// Depthwise 3x3 convolution, padding 1, weight `(C, 3, 3)`, bias `(C)`.
    pub fn depthwise3x3(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(self.value(w).shape(), &[c, 3, 3]);
        let oh = (h + 2 - 3) / stride + 1;
        let ow = (wd + 2 - 3) / stride + 1;

        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut value = ArrayD::<T>::zeros(IxDyn(&[batch, c, oh, ow]));
        {
            let xsl = xv.as_slice().unwrap();
            let wsl = wv.as_slice().unwrap();
            let out = value.as_slice_mut().unwrap();
            for bi in 0..batch {
                for ci in 0..c {
                    let xoff = (bi * c + ci) * h * wd;
                    let woff = ci * 9;
                    let ooff = (bi * c + ci) * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = T::zero();
                            for ky in 0..3usize {
                                let iy = (oy * stride + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += wsl[woff + ky * 3 + kx]
                                        * xsl[xoff + iy as usize * wd + ix as usize];
                                }
                            }
                            out[ooff + oy * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        if let Some(bv) = b {
            let bias = self.value(bv).clone();
            let bsl = bias.as_slice().unwrap();
            let out = value.as_slice_mut().unwrap();
            for bi in 0..batch {
                for (ci, &bias_c) in bsl.iter().enumerate() {
                    let ooff = (bi * c + ci) * oh * ow;
                    for v in &mut out[ooff..ooff + oh * ow] {
                        *v += bias_c;
                    }
                }
            }
        }

        let mut parents = vec![x.0, w.0];
        if let Some(bv) = b {
            parents.push(bv.0);
        }
        let has_bias = b.is_some();
        self.push(
            value,
            parents,
            Some(Box::new(move |g: &ArrayD<T>| {
                let gsl = g.as_slice().unwrap();
                let xsl = xv.as_slice().unwrap();
                let wsl = wv.as_slice().unwrap();
                let mut dx = ArrayD::<T>::zeros(IxDyn(&[batch, c, h, wd]));
                let mut dw = ArrayD::<T>::zeros(IxDyn(&[c, 3, 3]));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let dws = dw.as_slice_mut().unwrap();
                    for bi in 0..batch {
                        for ci in 0..c {
                            let xoff = (bi * c + ci) * h * wd;
                            let woff = ci * 9;
                            let ooff = (bi * c + ci) * oh * ow;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = gsl[ooff + oy * ow + ox];
                                    for ky in 0..3usize {
                                        let iy = (oy * stride + ky) as isize - 1;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..3usize {
                                            let ix = (ox * stride + kx) as isize - 1;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = xoff + iy as usize * wd + ix as usize;
                                            dxs[xi] += gv * wsl[woff + ky * 3 + kx];
                                            dws[woff + ky * 3 + kx] += gv * xsl[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![dx, dw];
                if has_bias {
                    let mut db = Array1::<T>::zeros(c);
                    for bi in 0..batch {
                        for ci in 0..c {
                            let ooff = (bi * c + ci) * oh * ow;
                            let mut s = T::zero();
                            for v in &gsl[ooff..ooff + oh * ow] {
                                s += *v;
                            }
                            db[ci] += s;
                        }
                    }
                    grads.push(db.into_dyn());
                }
                grads
            })),
        )
    }

    // ---- resampling ------------------------------------------------------

    /// Bilinear upsampling by an integer factor (half-pixel centers).
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let ytab = interp_table::<T>(h, oh);
        let xtab = interp_table::<T>(w, ow);

        let xv = self.value(x).clone();
        let mut value = ArrayD::<T>::zeros(IxDyn(&[batch, c, oh, ow]));
        {
            let xsl = xv.as_slice().unwrap();
            let osl = value.as_slice_mut().unwrap();
            for bc in 0..batch * c {
                let xoff = bc * h * w;
                let ooff = bc * oh * ow;
                for oy in 0..oh {
                    let (y0, y1, wy0, wy1) = ytab[oy];
                    for ox in 0..ow {
                        let (x0, x1, wx0, wx1) = xtab[ox];
                        osl[ooff + oy * ow + ox] = wy0 * wx0 * xsl[xoff + y0 * w + x0]
                            + wy0 * wx1 * xsl[xoff + y0 * w + x1]
                            + wy1 * wx0 * xsl[xoff + y1 * w + x0]
                            + wy1 * wx1 * xsl[xoff + y1 * w + x1];
                    }
                }
            }
        }
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let gsl = g.as_slice().unwrap();
                let mut dx = ArrayD::<T>::zeros(IxDyn(&[batch, c, h, w]));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    for bc in 0..batch * c {
                        let xoff = bc * h * w;
                        let ooff = bc * oh * ow;
                        for oy in 0..oh {
                            let (y0, y1, wy0, wy1) = ytab[oy];
                            for ox in 0..ow {
                                let (x0, x1, wx0, wx1) = xtab[ox];
                                let gv = gsl[ooff + oy * ow + ox];
                                dxs[xoff + y0 * w + x0] += wy0 * wx0 * gv;
                                dxs[xoff + y0 * w + x1] += wy0 * wx1 * gv;
                                dxs[xoff + y1 * w + x0] += wy1 * wx0 * gv;
                                dxs[xoff + y1 * w + x1] += wy1 * wx1 * gv;
                            }
                        }
                    }
                }
                vec![dx]
            })),
        )
    }

    // ---- normalization and softmax ---------------------------------------

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.last().unwrap();
        assert_eq!(self.value(gamma).shape(), &[c]);
        assert_eq!(self.value(beta).shape(), &[c]);
        let rows: usize = xs[..xs.len() - 1].iter().product();

        let x2 = to_2d(self.value(x), rows, c);
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let gsl = gv.as_slice().unwrap().to_vec();
        let bsl = bv.as_slice().unwrap().to_vec();

        let mut xhat = Array2::<T>::zeros((rows, c));
        let mut inv_std = Array1::<T>::zeros(rows);
        let mut y2 = Array2::<T>::zeros((rows, c));
        let cn = T::from_usize(c);
        for r in 0..rows {
            let row = x2.row(r);
            let mean = row.sum() / cn;
            let mut var = T::zero();
            for &v in row.iter() {
                let d = v - mean;
                var += d * d;
            }
            var /= cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[[r, j]] = xh;
                y2[[r, j]] = xh * gsl[j] + bsl[j];
            }
        }
        let value = y2.into_shape_with_order(IxDyn(&xs)).unwrap();
        let x_shape = xs.clone();
        self.push(
            value,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let g2 = to_2d(g, rows, c);
                let mut dx = Array2::<T>::zeros((rows, c));
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                for r in 0..rows {
                    let is = inv_std[r];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..c {
                        let gj = g2[[r, j]];
                        let xh = xhat[[r, j]];
                        dgamma[j] += gj * xh;
                        dbeta[j] += gj;
                        let dxh = gj * gsl[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh;
                    }
                    let m1 = sum_dxhat / cn;
                    let m2 = sum_dxhat_xhat / cn;
                    for j in 0..c {
                        let dxh = g2[[r, j]] * gsl[j];
                        dx[[r, j]] = is * (dxh - m1 - xhat[[r, j]] * m2);
                    }
                }
                vec![
                    dx.into_shape_with_order(IxDyn(&x_shape)).unwrap(),
                    dgamma.into_dyn(),
                    dbeta.into_dyn(),
                ]
            })),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value(x).clone();
        let mut value = xv.clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let mx = lane.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in lane.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v /= sum;
            }
        }
        let y = value.clone();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                // dx = y * (g - sum(g * y)) along the softmax axis
                let gy = g * &y;
                let mut sums = gy.sum_axis(Axis(axis));
                sums.insert_axis_inplace(Axis(axis));
                let dx = &gy - &(&y * &sums);
                vec![dx]
            })),
        )
    }

    // ---- shape movement --------------------------------------------------

    /// `(B, N, C)` tokens to `(B, C, h, w)` spatial, `h * w == N`.
    pub fn tokens_to_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        assert_eq!(n, h * w, "tokens_to_spatial: N != h*w");
        let value = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(&[0, 2, 1]))
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&[b, c, h, w]))
            .unwrap();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let dg = g
                    .view()
                    .into_shape_with_order(IxDyn(&[b, c, n]))
                    .unwrap()
                    .permuted_axes(IxDyn(&[0, 2, 1]))
                    .as_standard_layout()
                    .to_owned();
                vec![dg]
            })),
        )
    }

    /// `(B, C, h, w)` spatial to `(B, N, C)` tokens.
    pub fn spatial_to_tokens(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let n = h * w;
        let value = self
            .value(x)
            .view()
            .into_shape_with_order(IxDyn(&[b, c, n]))
            .unwrap()
            .permuted_axes(IxDyn(&[0, 2, 1]))
            .as_standard_layout()
            .to_owned();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let dg = g
                    .view()
                    .permuted_axes(IxDyn(&[0, 2, 1]))
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[b, c, h, w]))
                    .unwrap();
                vec![dg]
            })),
        )
    }

    /// `(B, N, C)` to per-head `(B, H, N, K)` with `K = C / H`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        assert_eq!(c % heads, 0, "split_heads: C not divisible by heads");
        let k = c / heads;
        let value = self
            .value(x)
            .view()
            .into_shape_with_order(IxDyn(&[b, n, heads, k]))
            .unwrap()
            .permuted_axes(IxDyn(&[0, 2, 1, 3]))
            .as_standard_layout()
            .to_owned();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let dg = g
                    .view()
                    .permuted_axes(IxDyn(&[0, 2, 1, 3]))
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[b, n, c]))
                    .unwrap();
                vec![dg]
            })),
        )
    }

    /// Per-head `(B, H, N, K)` back to `(B, N, H*K)`.
    pub fn merge_heads(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (b, h, n, k) = (xs[0], xs[1], xs[2], xs[3]);
        let value = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(&[0, 2, 1, 3]))
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&[b, n, h * k]))
            .unwrap();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let dg = g
                    .view()
                    .into_shape_with_order(IxDyn(&[b, n, h, k]))
                    .unwrap()
                    .permuted_axes(IxDyn(&[0, 2, 1, 3]))
                    .as_standard_layout()
                    .to_owned();
                vec![dg]
            })),
        )
    }

    /// Concatenate along axis 1 (channels for spatial maps, or any axis-1).
    pub fn concat_axis1(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let value = {
            let views: Vec<ArrayViewD<T>> = xs.iter().map(|&v| self.value(v).view()).collect();
            ndarray::concatenate(Axis(1), &views)
                .expect("concat_axis1: incompatible shapes")
                .as_standard_layout()
                .to_owned()
        };
        let sizes: Vec<usize> = xs.iter().map(|&v| self.value(v).shape()[1]).collect();
        let parents: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push(
            value,
            parents,
            Some(Box::new(move |g: &ArrayD<T>| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &s in &sizes {
                    let sl = g
                        .slice_axis(Axis(1), ndarray::Slice::from(start..start + s))
                        .as_standard_layout()
                        .to_owned();
                    grads.push(sl);
                    start += s;
                }
                grads
            })),
        )
    }

    /// Gather items along axis 0; backward scatter-adds.
    pub fn select_batch(&mut self, x: Var, indices: &[usize]) -> Var {
        let xs = self.value(x).shape().to_vec();
        let idx = indices.to_vec();
        let value = self.value(x).select(Axis(0), &idx);
        let value = value.as_standard_layout().to_owned();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let mut dx = ArrayD::<T>::zeros(IxDyn(&xs));
                for (row, &src) in idx.iter().enumerate() {
                    let mut target = dx.index_axis_mut(Axis(0), src);
                    target += &g.index_axis(Axis(0), row);
                }
                vec![dx]
            })),
        )
    }

    // ---- reductions ------------------------------------------------------

    /// Sum over all axes except the first: `(B, ...) -> (B,)`.
    pub fn sum_per_item(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let b = xs[0];
        let per: usize = xs[1..].iter().product();
        let x2 = to_2d(self.value(x), b, per);
        let value = x2.sum_axis(Axis(1)).into_dyn();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let mut dx = Array2::<T>::zeros((b, per));
                for r in 0..b {
                    let gv = g[[r]];
                    dx.row_mut(r).fill(gv);
                }
                vec![dx.into_shape_with_order(IxDyn(&xs)).unwrap()]
            })),
        )
    }

    /// Mean of every element, as a 0-d scalar node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let shape = self.value(x).shape().to_vec();
        let inv = T::one() / T::from_usize(n);
        let total: T = self.value(x).iter().copied().sum();
        let value = ArrayD::from_elem(IxDyn(&[]), total * inv);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let gv = g.iter().copied().next().unwrap() * inv;
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            })),
        )
    }

    /// Sum of every element, as a 0-d scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let total: T = self.value(x).iter().copied().sum();
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let gv = g.iter().copied().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            })),
        )
    }

    // ---- fused losses ----------------------------------------------------

    /// Mean binary cross entropy from logits against a constant target,
    /// computed in the stable form
    /// `max(x, 0) - x t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &ArrayD<T>) -> Var {
        assert_eq!(self.value(logits).shape(), target.shape());
        let xv = self.value(logits).clone();
        let tv = target.clone();
        let n = xv.len();
        let inv = T::one() / T::from_usize(n);
        let mut total = T::zero();
        for (&x, &t) in xv.iter().zip(tv.iter()) {
            let pos = if x > T::zero() { x } else { T::zero() };
            total += pos - x * t + (T::one() + (-x.abs()).exp()).ln();
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total * inv);
        self.push(
            value,
            vec![logits.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let gv = g.iter().copied().next().unwrap() * inv;
                let mut dx = xv.mapv(sigmoid_val);
                dx.zip_mut_with(&tv, |p, &t| *p = (*p - t) * gv);
                vec![dx]
            })),
        )
    }

    /// Channel-wise head calibration: `out[b,h,n,k] = u[b,h,n,k] * a[b,h,k]`.
    pub fn calibrate(&mut self, u: Var, a: Var) -> Var {
        let us = self.value(u).shape().to_vec();
        let as_ = self.value(a).shape().to_vec();
        assert_eq!(us.len(), 4);
        assert_eq!(as_.len(), 3);
        assert_eq!(
            &[us[0], us[1], us[3]],
            &as_[..],
            "calibrate: shape mismatch"
        );
        let (b, h, n, k) = (us[0], us[1], us[2], us[3]);
        let uv = self.value(u).clone();
        let av = self.value(a).clone();
        let mut value = uv.clone();
        {
            let vsl = value.as_slice_mut().unwrap();
            let asl = av.as_slice().unwrap();
            for bi in 0..b {
                for hi in 0..h {
                    let aoff = (bi * h + hi) * k;
                    let uoff = (bi * h + hi) * n * k;
                    for ni in 0..n {
                        for ki in 0..k {
                            vsl[uoff + ni * k + ki] *= asl[aoff + ki];
                        }
                    }
                }
            }
        }
        self.push(
            value,
            vec![u.0, a.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let gsl = g.as_slice().unwrap();
                let usl = uv.as_slice().unwrap();
                let asl = av.as_slice().unwrap();
                let mut du = ArrayD::<T>::zeros(IxDyn(&[b, h, n, k]));
                let mut da = ArrayD::<T>::zeros(IxDyn(&[b, h, k]));
                {
                    let dusl = du.as_slice_mut().unwrap();
                    let dasl = da.as_slice_mut().unwrap();
                    for bi in 0..b {
                        for hi in 0..h {
                            let aoff = (bi * h + hi) * k;
                            let uoff = (bi * h + hi) * n * k;
                            for ni in 0..n {
                                for ki in 0..k {
                                    let gi = gsl[uoff + ni * k + ki];
                                    dusl[uoff + ni * k + ki] = gi * asl[aoff + ki];
                                    dasl[aoff + ki] += gi * usl[uoff + ni * k + ki];
                                }
                            }
                        }
                    }
                }
                vec![du, da]
            })),
        )
    }

    /// Per-head logits from a domain vector: `d (B, D) x w (H, D, K) -> (B, H, K)`.
    pub fn head_map(&mut self, d: Var, w: Var) -> Var {
        let ds = self.value(d).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ds.len(), 2);
        assert_eq!(ws.len(), 3);
        assert_eq!(ds[1], ws[1], "head_map: domain dim mismatch");
        let (b, dd) = (ds[0], ds[1]);
        let (h, k) = (ws[0], ws[2]);
        let dv = to_2d(self.value(d), b, dd);
        let wv = self.value(w).clone();
        let mut value = ArrayD::<T>::zeros(IxDyn(&[b, h, k]));
        for hi in 0..h {
            let wm = wv
                .index_axis(Axis(0), hi)
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            let prod = dv.dot(&wm); // (B, K)
            value.index_axis_mut(Axis(1), hi).assign(&prod);
        }
        self.push(
            value,
            vec![d.0, w.0],
            Some(Box::new(move |g: &ArrayD<T>| {
                let mut dd_out = Array2::<T>::zeros((b, dd));
                let mut dw = ArrayD::<T>::zeros(IxDyn(&[h, dd, k]));
                for hi in 0..h {
                    let gm = g
                        .index_axis(Axis(1), hi)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned(); // (B, K)
                    let wm = wv
                        .index_axis(Axis(0), hi)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned(); // (D, K)
                    dd_out += &gm.dot(&wm.t());
                    dw.index_axis_mut(Axis(0), hi).assign(&dv.t().dot(&gm));
                }
                vec![dd_out.into_dyn(), dw]
            })),
        )
    }
}

fn im2col<T: Scalar>(
    x: &ArrayViewD<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let (batch, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cols = cin * kh * kw;
    let mut out = Array2::<T>::zeros((batch * oh * ow, cols));
    let xsl = x.as_slice().expect("standard layout");
    let osl = out.as_slice_mut().unwrap();
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * cols;
                for ci in 0..cin {
                    let xoff = (b * cin + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            let c = row + (ci * kh + ky) * kw + kx;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                osl[c] = xsl[xoff + iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    dcol: &Array2<T>,
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ArrayD<T> {
    let cols = cin * kh * kw;
    let mut dx = ArrayD::<T>::zeros(IxDyn(&[batch, cin, h, w]));
    let dsl = dx.as_slice_mut().unwrap();
    let csl = dcol.as_slice().unwrap();
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * cols;
                for ci in 0..cin {
                    let xoff = (b * cin + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dsl[xoff + iy as usize * w + ix as usize] +=
                                csl[row + (ci * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `(B*OH*OW, C)` rows to `(B, C, OH, OW)`.
fn nhwc_rows_to_nchw<T: Scalar>(
    rows: Array2<T>,
    batch: usize,
    oh: usize,
    ow: usize,
    c: usize,
) -> ArrayD<T> {
    std2(rows)
        .into_shape_with_order(IxDyn(&[batch, oh, ow, c]))
        .unwrap()
        .permuted_axes(IxDyn(&[0, 3, 1, 2]))
        .as_standard_layout()
        .to_owned()
}

/// `(B, C, OH, OW)` to `(B*OH*OW, C)` rows.
fn nchw_to_nhwc_rows<T: Scalar>(
    x: &ArrayD<T>,
    batch: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    x.view()
        .permuted_axes(IxDyn(&[0, 2, 3, 1]))
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((batch * oh * ow, c))
        .unwrap()
}

/// Source indices and weights for 1-D bilinear resampling to `n_out` points
/// with half-pixel alignment.
fn interp_table<T: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T, T)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = (src - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, T::from_f64(1.0 - w1), T::from_f64(w1))
        })
        .collect()
}
