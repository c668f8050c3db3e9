//! Differentiable grid sampling with clamp-to-edge semantics.

use ndarray::{ArrayD, IxDyn};

use super::{Scalar, Tape, Var};

fn clamp_coord<F: Scalar>(x: F, max: usize) -> (usize, usize, F) {
    // Returns (lo index, hi index, fractional weight toward hi) for a
    // coordinate clamped into [0, max].
    let maxf = F::from_f64(max as f64);
    let x = x.max(F::zero()).min(maxf);
    let lo = x.floor().as_f64() as usize;
    let lo = lo.min(max.saturating_sub(1)).min(max);
    let hi = (lo + 1).min(max);
    let frac = x - F::from_f64(lo as f64);
    (lo, hi, frac)
}

impl<F: Scalar> Tape<F> {
    /// Bilinear sampling of a [C, H, W] map at fixed pixel coordinates
    /// (x = column, y = row). Coordinates outside the map clamp to the edge
    /// pixel, which also makes the edge-padded warp of the plane sweep.
    /// Gradients flow to the map only; the coordinates are constants.
    pub fn bilinear_sample(&mut self, map: Var, coords: Vec<[F; 2]>) -> Var {
        let s: Vec<usize> = self.shape(map).to_vec();
        assert_eq!(s.len(), 3, "bilinear_sample: map must be [C, H, W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let npts = coords.len();
        let mut value = ArrayD::<F>::zeros(IxDyn(&[npts, c]));
        // Precompute taps once; reused by the backward scatter.
        let mut taps: Vec<(usize, usize, usize, usize, F, F)> = Vec::with_capacity(npts);
        for &[x, y] in &coords {
            let (x0, x1, fx) = clamp_coord(x, w - 1);
            let (y0, y1, fy) = clamp_coord(y, h - 1);
            taps.push((x0, x1, y0, y1, fx, fy));
        }
        {
            let ms = self.value(map).as_slice().unwrap();
            let vs = value.as_slice_mut().unwrap();
            for (p, &(x0, x1, y0, y1, fx, fy)) in taps.iter().enumerate() {
                let one = F::one();
                let w00 = (one - fx) * (one - fy);
                let w10 = fx * (one - fy);
                let w01 = (one - fx) * fy;
                let w11 = fx * fy;
                for ci in 0..c {
                    let base = ci * h * w;
                    vs[p * c + ci] = ms[base + y0 * w + x0] * w00
                        + ms[base + y0 * w + x1] * w10
                        + ms[base + y1 * w + x0] * w01
                        + ms[base + y1 * w + x1] * w11;
                }
            }
        }
        self.push(
            value,
            vec![map.0],
            Some(Box::new(move |g, _, _| {
                let mut dmap = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
                {
                    let gs = g.as_slice().unwrap();
                    let ds = dmap.as_slice_mut().unwrap();
                    let one = F::one();
                    for (p, &(x0, x1, y0, y1, fx, fy)) in taps.iter().enumerate() {
                        let w00 = (one - fx) * (one - fy);
                        let w10 = fx * (one - fy);
                        let w01 = (one - fx) * fy;
                        let w11 = fx * fy;
                        for ci in 0..c {
                            let gv = gs[p * c + ci];
                            let base = ci * h * w;
                            ds[base + y0 * w + x0] += gv * w00;
                            ds[base + y0 * w + x1] += gv * w10;
                            ds[base + y1 * w + x0] += gv * w01;
                            ds[base + y1 * w + x1] += gv * w11;
                        }
                    }
                }
                vec![dmap]
            })),
        )
    }

    /// Trilinear sampling of a [C, D, H, W] volume at voxel coordinates given
    /// as a [P, 3] variable in (d, y, x) order. Out-of-volume coordinates
    /// clamp to the boundary cell. Differentiable with respect to both the
    /// volume and the coordinates (zero coordinate gradient where clamped).
    pub fn trilinear_sample(&mut self, vol: Var, coords: Var) -> Var {
        let s: Vec<usize> = self.shape(vol).to_vec();
        assert_eq!(s.len(), 4, "trilinear_sample: volume must be [C, D, H, W]");
        let cs = self.shape(coords);
        assert_eq!(cs.len(), 2, "trilinear_sample: coords must be [P, 3]");
        assert_eq!(cs[1], 3, "trilinear_sample: coords must be [P, 3]");
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let npts = cs[0];

        let compute = move |vol: &[F], pts: &[F], out: &mut [F]| {
            let one = F::one();
            for p in 0..npts {
                let (z0, z1, fz) = clamp_coord(pts[p * 3], d - 1);
                let (y0, y1, fy) = clamp_coord(pts[p * 3 + 1], h - 1);
                let (x0, x1, fx) = clamp_coord(pts[p * 3 + 2], w - 1);
                for ci in 0..c {
                    let base = ci * d * h * w;
                    let at = |z: usize, y: usize, x: usize| vol[base + (z * h + y) * w + x];
                    let c00 = at(z0, y0, x0) * (one - fx) + at(z0, y0, x1) * fx;
                    let c01 = at(z0, y1, x0) * (one - fx) + at(z0, y1, x1) * fx;
                    let c10 = at(z1, y0, x0) * (one - fx) + at(z1, y0, x1) * fx;
                    let c11 = at(z1, y1, x0) * (one - fx) + at(z1, y1, x1) * fx;
                    let c0 = c00 * (one - fy) + c01 * fy;
                    let c1 = c10 * (one - fy) + c11 * fy;
                    out[p * c + ci] = c0 * (one - fz) + c1 * fz;
                }
            }
        };

        let mut value = ArrayD::<F>::zeros(IxDyn(&[npts, c]));
        compute(
            self.value(vol).as_slice().unwrap(),
            self.value(coords).as_slice().unwrap(),
            value.as_slice_mut().unwrap(),
        );

        self.push(
            value,
            vec![vol.0, coords.0],
            Some(Box::new(move |g, p, _| {
                let vols = p[0].as_slice().unwrap();
                let pts = p[1].as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dvol = ArrayD::<F>::zeros(IxDyn(&[c, d, h, w]));
                let mut dpts = ArrayD::<F>::zeros(IxDyn(&[npts, 3]));
                {
                    let dv = dvol.as_slice_mut().unwrap();
                    let dp = dpts.as_slice_mut().unwrap();
                    let one = F::one();
                    for pi in 0..npts {
                        let zc = pts[pi * 3];
                        let yc = pts[pi * 3 + 1];
                        let xc = pts[pi * 3 + 2];
                        let (z0, z1, fz) = clamp_coord(zc, d - 1);
                        let (y0, y1, fy) = clamp_coord(yc, h - 1);
                        let (x0, x1, fx) = clamp_coord(xc, w - 1);
                        // coordinate gradients vanish where the clamp is active
                        let zin = zc > F::zero() && zc < F::from_f64((d - 1) as f64);
                        let yin = yc > F::zero() && yc < F::from_f64((h - 1) as f64);
                        let xin = xc > F::zero() && xc < F::from_f64((w - 1) as f64);
                        for ci in 0..c {
                            let gv = gs[pi * c + ci];
                            let base = ci * d * h * w;
                            let idx =
                                |z: usize, y: usize, x: usize| base + (z * h + y) * w + x;
                            let wz0 = one - fz;
                            let wy0 = one - fy;
                            let wx0 = one - fx;
                            dv[idx(z0, y0, x0)] += gv * wz0 * wy0 * wx0;
                            dv[idx(z0, y0, x1)] += gv * wz0 * wy0 * fx;
                            dv[idx(z0, y1, x0)] += gv * wz0 * fy * wx0;
                            dv[idx(z0, y1, x1)] += gv * wz0 * fy * fx;
                            dv[idx(z1, y0, x0)] += gv * fz * wy0 * wx0;
                            dv[idx(z1, y0, x1)] += gv * fz * wy0 * fx;
                            dv[idx(z1, y1, x0)] += gv * fz * fy * wx0;
                            dv[idx(z1, y1, x1)] += gv * fz * fy * fx;

                            let at = |z: usize, y: usize, x: usize| vols[idx(z, y, x)];
                            if zin {
                                let d00 = at(z1, y0, x0) - at(z0, y0, x0);
                                let d01 = at(z1, y0, x1) - at(z0, y0, x1);
                                let d10 = at(z1, y1, x0) - at(z0, y1, x0);
                                let d11 = at(z1, y1, x1) - at(z0, y1, x1);
                                dp[pi * 3] += gv
                                    * (d00 * wy0 * wx0
                                        + d01 * wy0 * fx
                                        + d10 * fy * wx0
                                        + d11 * fy * fx);
                            }
                            if yin {
                                let d00 = at(z0, y1, x0) - at(z0, y0, x0);
                                let d01 = at(z0, y1, x1) - at(z0, y0, x1);
                                let d10 = at(z1, y1, x0) - at(z1, y0, x0);
                                let d11 = at(z1, y1, x1) - at(z1, y0, x1);
                                dp[pi * 3 + 1] += gv
                                    * (d00 * wz0 * wx0
                                        + d01 * wz0 * fx
                                        + d10 * fz * wx0
                                        + d11 * fz * fx);
                            }
                            if xin {
                                let d00 = at(z0, y0, x1) - at(z0, y0, x0);
                                let d01 = at(z0, y1, x1) - at(z0, y1, x0);
                                let d10 = at(z1, y0, x1) - at(z1, y0, x0);
                                let d11 = at(z1, y1, x1) - at(z1, y1, x0);
                                dp[pi * 3 + 2] += gv
                                    * (d00 * wz0 * wy0
                                        + d01 * wz0 * fy
                                        + d10 * fz * wy0
                                        + d11 * fz * fy);
                            }
                        }
                    }
                }
                vec![dvol, dpts]
            })),
        )
    }
}
