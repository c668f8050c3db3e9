//! Reductions, softmax, and the exclusive prefix sum used by transmittance.

use ndarray::{ArrayD, IxDyn};

use super::{Scalar, Tape, Var};

/// Treat an array as a [rows, last] matrix.
fn rows_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().expect("expected at least 1-D");
    let rows = shape.iter().take(shape.len() - 1).product::<usize>().max(1);
    (rows, last)
}

impl<F: Scalar> Tape<F> {
    /// Sum of all elements, as a 0-d array.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ndarray::arr0(self.value(a).sum()).into_dyn();
        let shape: Vec<usize> = self.shape(a).to_vec();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let gv = *g.first().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::from_f64(n as f64))
    }

    /// Sum over the last axis, keeping it as a singleton: [.., L] -> [.., 1].
    pub fn sum_last(&mut self, a: Var) -> Var {
        let (rows, last) = rows_last(self.shape(a));
        let mut out_shape: Vec<usize> = self.shape(a).to_vec();
        *out_shape.last_mut().unwrap() = 1;
        let mut value = ArrayD::<F>::zeros(IxDyn(&out_shape));
        {
            let xs = self.value(a).as_slice().unwrap();
            let os = value.as_slice_mut().unwrap();
            for r in 0..rows {
                let mut acc = F::zero();
                for &v in &xs[r * last..(r + 1) * last] {
                    acc += v;
                }
                os[r] = acc;
            }
        }
        let in_shape: Vec<usize> = self.shape(a).to_vec();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let mut d = ArrayD::<F>::zeros(IxDyn(&in_shape));
                {
                    let gs = g.as_slice().unwrap();
                    let ds = d.as_slice_mut().unwrap();
                    for r in 0..rows {
                        for v in ds[r * last..(r + 1) * last].iter_mut() {
                            *v = gs[r];
                        }
                    }
                }
                vec![d]
            })),
        )
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let (rows, last) = rows_last(self.shape(a));
        let mut value = self.value(a).clone();
        {
            let data = value.as_slice_mut().expect("softmax: non-contiguous");
            for r in 0..rows {
                let row = &mut data[r * last..(r + 1) * last];
                let mut max = row[0];
                for &x in row.iter() {
                    if x > max {
                        max = x;
                    }
                }
                let mut sum = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                let inv = F::one() / sum;
                for x in row.iter_mut() {
                    *x = *x * inv;
                }
            }
        }
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, y| {
                let mut d = g.clone();
                {
                    let ds = d.as_slice_mut().unwrap();
                    let ys = y.as_slice().unwrap();
                    for r in 0..rows {
                        let yr = &ys[r * last..(r + 1) * last];
                        let dr = &mut ds[r * last..(r + 1) * last];
                        let mut dot = F::zero();
                        for (gv, yv) in dr.iter().zip(yr) {
                            dot += *gv * *yv;
                        }
                        for (gv, yv) in dr.iter_mut().zip(yr) {
                            *gv = *yv * (*gv - dot);
                        }
                    }
                }
                vec![d]
            })),
        )
    }

    /// Exclusive prefix sum along the last axis:
    /// y[..., k] = sum_{j < k} x[..., j], with y[..., 0] = 0.
    pub fn cumsum_exclusive_last(&mut self, a: Var) -> Var {
        let (rows, last) = rows_last(self.shape(a));
        let mut value = self.value(a).clone();
        {
            let data = value.as_slice_mut().expect("cumsum: non-contiguous");
            for r in 0..rows {
                let row = &mut data[r * last..(r + 1) * last];
                let mut acc = F::zero();
                for x in row.iter_mut() {
                    let cur = *x;
                    *x = acc;
                    acc += cur;
                }
            }
        }
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let mut d = g.clone();
                {
                    let ds = d.as_slice_mut().unwrap();
                    for r in 0..rows {
                        let row = &mut ds[r * last..(r + 1) * last];
                        let mut acc = F::zero();
                        for x in row.iter_mut().rev() {
                            let cur = *x;
                            *x = acc;
                            acc += cur;
                        }
                    }
                }
                vec![d]
            })),
        )
    }

    /// Per-instance, per-channel normalization over the spatial axes of an
    /// [N, C, spatial...] array, with per-channel scale `gamma` and shift
    /// `beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let shape: Vec<usize> = self.shape(x).to_vec();
        assert!(shape.len() >= 3, "instance_norm: expects [N, C, spatial...]");
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        assert_eq!(self.shape(gamma), &[c], "instance_norm: gamma shape");
        assert_eq!(self.shape(beta), &[c], "instance_norm: beta shape");

        let inv_s = F::one() / F::from_f64(s as f64);
        let mut value = self.value(x).clone();
        {
            let gs = self.value(gamma).as_slice().unwrap().to_vec();
            let bs = self.value(beta).as_slice().unwrap().to_vec();
            let data = value.as_slice_mut().expect("instance_norm: non-contiguous");
            for i in 0..n * c {
                let chunk = &mut data[i * s..(i + 1) * s];
                let mut mean = F::zero();
                for &v in chunk.iter() {
                    mean += v;
                }
                mean = mean * inv_s;
                let mut var = F::zero();
                for &v in chunk.iter() {
                    let d = v - mean;
                    var += d * d;
                }
                var = var * inv_s;
                let inv_std = F::one() / (var + eps).sqrt();
                let (ga, be) = (gs[i % c], bs[i % c]);
                for v in chunk.iter_mut() {
                    *v = (*v - mean) * inv_std * ga + be;
                }
            }
        }
        self.push(
            value,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g, p, _| {
                let xs = p[0].as_slice().unwrap();
                let gs = p[1].as_slice().unwrap();
                let gout = g.as_slice().unwrap();
                let mut dx = ArrayD::<F>::zeros(p[0].raw_dim());
                let mut dgamma = ArrayD::<F>::zeros(IxDyn(&[c]));
                let mut dbeta = ArrayD::<F>::zeros(IxDyn(&[c]));
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let dgs = dgamma.as_slice_mut().unwrap();
                    let dbs = dbeta.as_slice_mut().unwrap();
                    for i in 0..n * c {
                        let xc = &xs[i * s..(i + 1) * s];
                        let gc = &gout[i * s..(i + 1) * s];
                        let mut mean = F::zero();
                        for &v in xc.iter() {
                            mean += v;
                        }
                        mean = mean * inv_s;
                        let mut var = F::zero();
                        for &v in xc.iter() {
                            let d = v - mean;
                            var += d * d;
                        }
                        var = var * inv_s;
                        let inv_std = F::one() / (var + eps).sqrt();
                        let ga = gs[i % c];
                        // accumulate sums of g and g*xhat
                        let mut sum_g = F::zero();
                        let mut sum_gx = F::zero();
                        for (&gv, &xv) in gc.iter().zip(xc) {
                            let xh = (xv - mean) * inv_std;
                            sum_g += gv;
                            sum_gx += gv * xh;
                        }
                        dgs[i % c] += sum_gx;
                        dbs[i % c] += sum_g;
                        let mean_g = sum_g * inv_s;
                        let mean_gx = sum_gx * inv_s;
                        let dxc = &mut dxs[i * s..(i + 1) * s];
                        for ((dv, &gv), &xv) in dxc.iter_mut().zip(gc).zip(xc) {
                            let xh = (xv - mean) * inv_std;
                            *dv = ga * inv_std * (gv - mean_g - xh * mean_gx);
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            })),
        )
    }
}
