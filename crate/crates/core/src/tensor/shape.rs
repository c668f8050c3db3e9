//! Structural operations: reshape, permute, concatenation, slicing, row
//! repetition.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::{Scalar, Tape, Var};

fn reshaped<F: Scalar>(a: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    let flat: Vec<F> = a.iter().cloned().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape: element count mismatch")
}

impl<F: Scalar> Tape<F> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_shape: Vec<usize> = self.shape(a).to_vec();
        assert_eq!(
            old_shape.iter().product::<usize>(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let value = reshaped(self.value(a), shape);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| vec![reshaped(g, &old_shape)])),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_vec = axes.to_vec();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(&axes_vec))
            .as_standard_layout()
            .into_owned();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned()]
            })),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views)
            .expect("concat: shape mismatch")
            .as_standard_layout()
            .into_owned();
        let sizes: Vec<usize> = parts.iter().map(|&v| self.shape(v)[axis]).collect();
        self.push(
            value,
            parts.iter().map(|v| v.0).collect(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0isize;
                for &len in &sizes {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::new(start, Some(start + len as isize), 1))
                        .to_owned();
                    out.push(piece);
                    start += len as isize;
                }
                out
            })),
        )
    }

    /// Slice along the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ndim = self.shape(a).len();
        let axis = ndim - 1;
        assert!(start + len <= self.shape(a)[axis], "slice_last: out of range");
        let value = self
            .value(a)
            .slice_axis(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .to_owned();
        let full: Vec<usize> = self.shape(a).to_vec();
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let mut d = ArrayD::zeros(IxDyn(&full));
                d.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(g);
                vec![d]
            })),
        )
    }

    /// Repeat each row of a 2-D array `times` times consecutively:
    /// [R, C] -> [R*times, C]. Backward sums each block of `times` rows.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape.len(), 2, "repeat_rows: expects 2-D input");
        let (rows, cols) = (shape[0], shape[1]);
        let src = self.value(a);
        let mut value = ArrayD::<F>::zeros(IxDyn(&[rows * times, cols]));
        {
            let s = src.as_slice().expect("repeat_rows: non-contiguous");
            let d = value.as_slice_mut().unwrap();
            for r in 0..rows {
                let row = &s[r * cols..(r + 1) * cols];
                for t in 0..times {
                    d[(r * times + t) * cols..(r * times + t + 1) * cols].copy_from_slice(row);
                }
            }
        }
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| {
                let mut d = ArrayD::<F>::zeros(IxDyn(&[rows, cols]));
                let gs = g.as_slice().expect("repeat_rows: grad non-contiguous");
                let ds = d.as_slice_mut().unwrap();
                for r in 0..rows {
                    for t in 0..times {
                        let src_row = &gs[(r * times + t) * cols..(r * times + t + 1) * cols];
                        for (acc, &x) in ds[r * cols..(r + 1) * cols].iter_mut().zip(src_row) {
                            *acc += x;
                        }
                    }
                }
                vec![d]
            })),
        )
    }
}
