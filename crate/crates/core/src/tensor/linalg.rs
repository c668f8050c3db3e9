//! Dense matrix products. All entry points shell out to
//! `ndarray::linalg::general_mat_mul`, which uses the matrixmultiply gemm
//! kernels for f32/f64.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn};

use super::{Scalar, Tape, Var};

fn as2<F: Scalar>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-D")
}

fn mm<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), &a, &b, F::zero(), &mut out);
    out
}

impl<F: Scalar> Tape<F> {
    /// y = a @ b for a: [N, K], b: [K, M].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "matmul: a must be 2-D");
        assert_eq!(sb.len(), 2, "matmul: b must be 2-D");
        assert_eq!(sa[1], sb[0], "matmul: inner dims differ");
        let value = mm(as2(self.value(a)), as2(self.value(b))).into_dyn();
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, p, _| {
                let g2 = as2(g);
                let da = mm(g2, as2(p[1]).reversed_axes());
                let db = mm(as2(p[0]).reversed_axes(), g2);
                vec![da.into_dyn(), db.into_dyn()]
            })),
        )
    }

    /// y = x @ w + b for x: [N, K], w: [K, M], b: [M].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        assert_eq!(sx.len(), 2, "linear: x must be 2-D");
        assert_eq!(sx[1], sw[0], "linear: input width mismatch");
        assert_eq!(sw[1], sb[0], "linear: bias width mismatch");
        let mut value = mm(as2(self.value(x)), as2(self.value(w)));
        let bias = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in value.rows_mut() {
            row += &bias;
        }
        self.push(
            value.into_dyn(),
            vec![x.0, w.0, b.0],
            Some(Box::new(|g, p, _| {
                let g2 = as2(g);
                let dx = mm(g2, as2(p[1]).reversed_axes());
                let dw = mm(as2(p[0]).reversed_axes(), g2);
                let db = g2.sum_axis(Axis(0));
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            })),
        )
    }

    /// Batched matmul: a: [B, N, K], b: [B, K, M] -> [B, N, M].
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3, "bmm: a must be 3-D");
        assert_eq!(sb.len(), 3, "bmm: b must be 3-D");
        assert_eq!(sa[0], sb[0], "bmm: batch dims differ");
        assert_eq!(sa[2], sb[1], "bmm: inner dims differ");
        let (batch, n, m) = (sa[0], sa[1], sb[2]);
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        let mut value = ndarray::Array3::<F>::zeros((batch, n, m));
        for i in 0..batch {
            let mut out = value.index_axis_mut(Axis(0), i);
            general_mat_mul(
                F::one(),
                &av.index_axis(Axis(0), i),
                &bv.index_axis(Axis(0), i),
                F::zero(),
                &mut out,
            );
        }
        self.push(
            value.into_dyn(),
            vec![a.0, b.0],
            Some(Box::new(move |g, p, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = p[0].view().into_dimensionality::<Ix3>().unwrap();
                let b3 = p[1].view().into_dimensionality::<Ix3>().unwrap();
                let mut da = ArrayD::<F>::zeros(IxDyn(&sa));
                let mut db = ArrayD::<F>::zeros(IxDyn(&sb));
                {
                    let mut da3 = da.view_mut().into_dimensionality::<Ix3>().unwrap();
                    let mut db3 = db.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for i in 0..batch {
                        let gi = g3.index_axis(Axis(0), i);
                        let mut dai = da3.index_axis_mut(Axis(0), i);
                        general_mat_mul(
                            F::one(),
                            &gi,
                            &b3.index_axis(Axis(0), i).reversed_axes(),
                            F::zero(),
                            &mut dai,
                        );
                        let mut dbi = db3.index_axis_mut(Axis(0), i);
                        general_mat_mul(
                            F::one(),
                            &a3.index_axis(Axis(0), i).reversed_axes(),
                            &gi,
                            F::zero(),
                            &mut dbi,
                        );
                    }
                }
                vec![da, db]
            })),
        )
    }
}
