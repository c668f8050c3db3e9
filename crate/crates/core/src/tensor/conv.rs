//! Convolutions (im2col + gemm) and nearest-neighbor upsampling.
//!
//! Layouts: 2-D convs take [N, C, H, W]; 3-D convs take [N, C, D, H, W].
//! Zero padding, square/cubic kernels.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use super::{Scalar, Tape, Var};

fn out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Scatter x (one sample, [C, H, W] flat) into column-major patch matrix
/// [C*k*k, Ho*Wo].
fn im2col2d<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut Array2<F>,
) {
    let (ho, wo) = (out_len(h, k, stride, pad), out_len(w, k, stride, pad));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cs[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        for v in drow.iter_mut() {
                            *v = F::zero();
                        }
                        continue;
                    }
                    let srow = &x[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                    for (ow, v) in drow.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        *v = if iw < 0 || iw >= w as isize {
                            F::zero()
                        } else {
                            srow[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im2d<F: Scalar>(
    cols: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [F],
) {
    let (ho, wo) = (out_len(h, k, stride, pad), out_len(w, k, stride, pad));
    let cs = cols.as_slice().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let drow = &mut x[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                    for (ow, &v) in src[oh * wo..(oh + 1) * wo].iter().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            drow[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 3-D analogue of [`im2col2d`]: [C, D, H, W] -> [C*k^3, Do*Ho*Wo].
fn im2col3d<F: Scalar>(
    x: &[F],
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut Array2<F>,
) {
    let (do_, ho, wo) = (
        out_len(d, k, stride, pad),
        out_len(h, k, stride, pad),
        out_len(w, k, stride, pad),
    );
    let cs = cols.as_slice_mut().unwrap();
    let plane = ho * wo;
    for ci in 0..c {
        for kd in 0..k {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + kd) * k + ki) * k + kj;
                    let dst = &mut cs[row * do_ * plane..(row + 1) * do_ * plane];
                    for od in 0..do_ {
                        let id = (od * stride + kd) as isize - pad as isize;
                        let dplane = &mut dst[od * plane..(od + 1) * plane];
                        if id < 0 || id >= d as isize {
                            for v in dplane.iter_mut() {
                                *v = F::zero();
                            }
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            let drow = &mut dplane[oh * wo..(oh + 1) * wo];
                            if ih < 0 || ih >= h as isize {
                                for v in drow.iter_mut() {
                                    *v = F::zero();
                                }
                                continue;
                            }
                            let base = ((ci * d + id as usize) * h + ih as usize) * w;
                            let srow = &x[base..base + w];
                            for (ow, v) in drow.iter_mut().enumerate() {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                *v = if iw < 0 || iw >= w as isize {
                                    F::zero()
                                } else {
                                    srow[iw as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im3d<F: Scalar>(
    cols: &Array2<F>,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [F],
) {
    let (do_, ho, wo) = (
        out_len(d, k, stride, pad),
        out_len(h, k, stride, pad),
        out_len(w, k, stride, pad),
    );
    let cs = cols.as_slice().unwrap();
    let plane = ho * wo;
    for ci in 0..c {
        for kd in 0..k {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + kd) * k + ki) * k + kj;
                    let src = &cs[row * do_ * plane..(row + 1) * do_ * plane];
                    for od in 0..do_ {
                        let id = (od * stride + kd) as isize - pad as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let base = ((ci * d + id as usize) * h + ih as usize) * w;
                            for (ow, &v) in
                                src[od * plane + oh * wo..od * plane + (oh + 1) * wo]
                                    .iter()
                                    .enumerate()
                            {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    x[base + iw as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn weight_mat<F: Scalar>(w: &ArrayD<F>) -> ArrayView2<'_, F> {
    let co = w.shape()[0];
    let rest: usize = w.shape()[1..].iter().product();
    ArrayView2::from_shape((co, rest), w.as_slice().expect("weights non-contiguous")).unwrap()
}

impl<F: Scalar> Tape<F> {
    /// 2-D convolution with zero padding and bias.
    /// x: [N, Ci, H, W], w: [Co, Ci, k, k], b: [Co].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let sx: Vec<usize> = self.shape(x).to_vec();
        let sw: Vec<usize> = self.shape(w).to_vec();
        assert_eq!(sx.len(), 4, "conv2d: x must be [N, C, H, W]");
        assert_eq!(sw.len(), 4, "conv2d: w must be [Co, Ci, k, k]");
        assert_eq!(sx[1], sw[1], "conv2d: channel mismatch");
        assert_eq!(sw[2], sw[3], "conv2d: kernel must be square");
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[0], sw[2]);
        assert_eq!(self.shape(b), &[co], "conv2d: bias shape");
        let (ho, wo) = (out_len(h, k, stride, pad), out_len(wd, k, stride, pad));

        let mut value = ArrayD::<F>::zeros(IxDyn(&[n, co, ho, wo]));
        {
            let wm = weight_mat(self.value(w));
            let bias = self.value(b).as_slice().unwrap().to_vec();
            let xs = self.value(x).as_slice().unwrap();
            let vs = value.as_slice_mut().unwrap();
            let mut cols = Array2::<F>::zeros((ci * k * k, ho * wo));
            for ni in 0..n {
                im2col2d(
                    &xs[ni * ci * h * wd..(ni + 1) * ci * h * wd],
                    ci,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    &mut cols,
                );
                let out_slice = &mut vs[ni * co * ho * wo..(ni + 1) * co * ho * wo];
                let mut out =
                    ArrayViewMut2::from_shape((co, ho * wo), &mut out_slice[..]).unwrap();
                general_mat_mul(F::one(), &wm, &cols.view(), F::zero(), &mut out);
                for c_idx in 0..co {
                    let bias_c = bias[c_idx];
                    for v in out_slice[c_idx * ho * wo..(c_idx + 1) * ho * wo].iter_mut() {
                        *v += bias_c;
                    }
                }
            }
        }
        self.push(
            value,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, p, _| {
                let xs = p[0].as_slice().unwrap();
                let wm = weight_mat(p[1]);
                let gs = g.as_slice().unwrap();
                let mut dx = ArrayD::<F>::zeros(p[0].raw_dim());
                let mut dw = ArrayD::<F>::zeros(p[1].raw_dim());
                let mut db = ArrayD::<F>::zeros(IxDyn(&[co]));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let mut dwm = ArrayViewMut2::from_shape(
                        (co, ci * k * k),
                        dw.as_slice_mut().unwrap(),
                    )
                    .unwrap();
                    let dbs = db.as_slice_mut().unwrap();
                    let mut cols = Array2::<F>::zeros((ci * k * k, ho * wo));
                    let mut dcols = Array2::<F>::zeros((ci * k * k, ho * wo));
                    for ni in 0..n {
                        let g_slice = &gs[ni * co * ho * wo..(ni + 1) * co * ho * wo];
                        let gm = ArrayView2::from_shape((co, ho * wo), g_slice).unwrap();
                        for c_idx in 0..co {
                            let mut s = F::zero();
                            for &v in &g_slice[c_idx * ho * wo..(c_idx + 1) * ho * wo] {
                                s += v;
                            }
                            dbs[c_idx] += s;
                        }
                        im2col2d(
                            &xs[ni * ci * h * wd..(ni + 1) * ci * h * wd],
                            ci,
                            h,
                            wd,
                            k,
                            stride,
                            pad,
                            &mut cols,
                        );
                        general_mat_mul(
                            F::one(),
                            &gm,
                            &cols.view().reversed_axes(),
                            F::one(),
                            &mut dwm,
                        );
                        general_mat_mul(
                            F::one(),
                            &wm.reversed_axes(),
                            &gm,
                            F::zero(),
                            &mut dcols.view_mut(),
                        );
                        col2im2d(
                            &dcols,
                            ci,
                            h,
                            wd,
                            k,
                            stride,
                            pad,
                            &mut dxs[ni * ci * h * wd..(ni + 1) * ci * h * wd],
                        );
                    }
                }
                vec![dx, dw, db]
            })),
        )
    }

    /// 3-D convolution with zero padding and bias.
    /// x: [N, Ci, D, H, W], w: [Co, Ci, k, k, k], b: [Co].
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let sx: Vec<usize> = self.shape(x).to_vec();
        let sw: Vec<usize> = self.shape(w).to_vec();
        assert_eq!(sx.len(), 5, "conv3d: x must be [N, C, D, H, W]");
        assert_eq!(sw.len(), 5, "conv3d: w must be [Co, Ci, k, k, k]");
        assert_eq!(sx[1], sw[1], "conv3d: channel mismatch");
        let (n, ci, d, h, wd) = (sx[0], sx[1], sx[2], sx[3], sx[4]);
        let (co, k) = (sw[0], sw[2]);
        assert_eq!(self.shape(b), &[co], "conv3d: bias shape");
        let (do_, ho, wo) = (
            out_len(d, k, stride, pad),
            out_len(h, k, stride, pad),
            out_len(wd, k, stride, pad),
        );
        let vol_in = ci * d * h * wd;
        let vol_out = co * do_ * ho * wo;
        let ncols = do_ * ho * wo;

        let mut value = ArrayD::<F>::zeros(IxDyn(&[n, co, do_, ho, wo]));
        {
            let wm = weight_mat(self.value(w));
            let bias = self.value(b).as_slice().unwrap().to_vec();
            let xs = self.value(x).as_slice().unwrap();
            let vs = value.as_slice_mut().unwrap();
            let mut cols = Array2::<F>::zeros((ci * k * k * k, ncols));
            for ni in 0..n {
                im2col3d(
                    &xs[ni * vol_in..(ni + 1) * vol_in],
                    ci,
                    d,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    &mut cols,
                );
                let out_slice = &mut vs[ni * vol_out..(ni + 1) * vol_out];
                let mut out = ArrayViewMut2::from_shape((co, ncols), &mut out_slice[..]).unwrap();
                general_mat_mul(F::one(), &wm, &cols.view(), F::zero(), &mut out);
                for c_idx in 0..co {
                    let bias_c = bias[c_idx];
                    for v in out_slice[c_idx * ncols..(c_idx + 1) * ncols].iter_mut() {
                        *v += bias_c;
                    }
                }
            }
        }
        self.push(
            value,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, p, _| {
                let xs = p[0].as_slice().unwrap();
                let wm = weight_mat(p[1]);
                let gs = g.as_slice().unwrap();
                let mut dx = ArrayD::<F>::zeros(p[0].raw_dim());
                let mut dw = ArrayD::<F>::zeros(p[1].raw_dim());
                let mut db = ArrayD::<F>::zeros(IxDyn(&[co]));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let mut dwm = ArrayViewMut2::from_shape(
                        (co, ci * k * k * k),
                        dw.as_slice_mut().unwrap(),
                    )
                    .unwrap();
                    let dbs = db.as_slice_mut().unwrap();
                    let mut cols = Array2::<F>::zeros((ci * k * k * k, ncols));
                    let mut dcols = Array2::<F>::zeros((ci * k * k * k, ncols));
                    for ni in 0..n {
                        let g_slice = &gs[ni * vol_out..(ni + 1) * vol_out];
                        let gm = ArrayView2::from_shape((co, ncols), g_slice).unwrap();
                        for c_idx in 0..co {
                            let mut s = F::zero();
                            for &v in &g_slice[c_idx * ncols..(c_idx + 1) * ncols] {
                                s += v;
                            }
                            dbs[c_idx] += s;
                        }
                        im2col3d(
                            &xs[ni * vol_in..(ni + 1) * vol_in],
                            ci,
                            d,
                            h,
                            wd,
                            k,
                            stride,
                            pad,
                            &mut cols,
                        );
                        general_mat_mul(
                            F::one(),
                            &gm,
                            &cols.view().reversed_axes(),
                            F::one(),
                            &mut dwm,
                        );
                        general_mat_mul(
                            F::one(),
                            &wm.reversed_axes(),
                            &gm,
                            F::zero(),
                            &mut dcols.view_mut(),
                        );
                        col2im3d(
                            &dcols,
                            ci,
                            d,
                            h,
                            wd,
                            k,
                            stride,
                            pad,
                            &mut dxs[ni * vol_in..(ni + 1) * vol_in],
                        );
                    }
                }
                vec![dx, dw, db]
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling of [N, C, D, H, W].
    pub fn upsample2_nearest3d(&mut self, x: Var) -> Var {
        let s: Vec<usize> = self.shape(x).to_vec();
        assert_eq!(s.len(), 5, "upsample2_nearest3d: x must be [N, C, D, H, W]");
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let mut value = ArrayD::<F>::zeros(IxDyn(&[n, c, 2 * d, 2 * h, 2 * w]));
        {
            let xs = self.value(x).as_slice().unwrap();
            let vs = value.as_slice_mut().unwrap();
            let (h2, w2) = (2 * h, 2 * w);
            for nc in 0..n * c {
                for dd in 0..2 * d {
                    for hh in 0..h2 {
                        let src =
                            &xs[((nc * d + dd / 2) * h + hh / 2) * w..((nc * d + dd / 2) * h + hh / 2 + 1) * w];
                        let dst = &mut vs[((nc * 2 * d + dd) * h2 + hh) * w2
                            ..((nc * 2 * d + dd) * h2 + hh + 1) * w2];
                        for (ww, v) in dst.iter_mut().enumerate() {
                            *v = src[ww / 2];
                        }
                    }
                }
            }
        }
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g, _, _| {
                let mut dx = ArrayD::<F>::zeros(IxDyn(&[n, c, d, h, w]));
                {
                    let gs = g.as_slice().unwrap();
                    let ds = dx.as_slice_mut().unwrap();
                    let (h2, w2) = (2 * h, 2 * w);
                    for nc in 0..n * c {
                        for dd in 0..2 * d {
                            for hh in 0..h2 {
                                let src = &gs[((nc * 2 * d + dd) * h2 + hh) * w2
                                    ..((nc * 2 * d + dd) * h2 + hh + 1) * w2];
                                let dst = &mut ds[((nc * d + dd / 2) * h + hh / 2) * w
                                    ..((nc * d + dd / 2) * h + hh / 2 + 1) * w];
                                for (ww, &v) in src.iter().enumerate() {
                                    dst[ww / 2] += v;
                                }
                            }
                        }
                    }
                }
                vec![dx]
            })),
        )
    }
}
