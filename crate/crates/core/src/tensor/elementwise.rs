//! Pointwise operations. Binary ops require identical shapes; broadcasting is
//! handled by explicit shape ops instead.

use ndarray::ArrayD;

use super::{Scalar, Tape, Var};

fn softplus_scalar<F: Scalar>(x: F) -> F {
    // max(x, 0) + ln(1 + exp(-|x|)), stable for large |x|
    x.max(F::zero()) + (F::one() + (-x.abs()).exp()).ln()
}

fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Scalar> Tape<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, p, _| vec![g * p[1], g * p[0]])),
        )
    }

    /// Elementwise sum of same-shaped inputs, accumulated per element in
    /// ascending value order. The result is exactly invariant under any
    /// permutation of the inputs, which plain left-to-right float addition is
    /// not.
    pub fn sum_ordered(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum_ordered: no inputs");
        let shape = self.shape(parts[0]).to_vec();
        for &p in parts {
            assert_eq!(self.shape(p), &shape[..], "sum_ordered: shape mismatch");
        }
        let n = self.value(parts[0]).len();
        let m = parts.len();
        let mut value = self.value(parts[0]).clone();
        {
            let slices: Vec<&[F]> = parts
                .iter()
                .map(|&p| self.nodes[p.0].value.as_slice().unwrap())
                .collect();
            let out = value.as_slice_mut().unwrap();
            let mut buf: Vec<F> = vec![F::zero(); m];
            for i in 0..n {
                for (j, s) in slices.iter().enumerate() {
                    buf[j] = s[i];
                }
                buf.sort_by(|a, b| a.partial_cmp(b).expect("sum_ordered: non-finite input"));
                let mut acc = F::zero();
                for &v in buf.iter() {
                    acc += v;
                }
                out[i] = acc;
            }
        }
        self.push(
            value,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g, _, _| (0..m).map(|_| g.clone()).collect())),
        )
    }

    /// Elementwise product with a constant array (no gradient to the constant).
    pub fn mul_const(&mut self, a: Var, c: ArrayD<F>) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const: shape mismatch");
        let value = self.value(a) * &c;
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| vec![g * &c])),
        )
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _, _| vec![g.mapv(|x| x * c)])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push(value, vec![a.0], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let two = F::from_f64(2.0);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, p, _| {
                let mut d = g * p[0];
                d.mapv_inplace(|x| x * two);
                vec![d]
            })),
        )
    }

    /// y = 1/x. Infinite at zero; callers guard with [`Tape::clamp_min`].
    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| F::one() / x);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, y| {
                let mut d = y * y;
                d.zip_mut_with(g, |x, &gv| *x = -*x * gv);
                vec![d]
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(F::exp);
        self.push(value, vec![a.0], Some(Box::new(|g, _, y| vec![g * y])))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(F::sin);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, p, _| {
                let mut d = p[0].mapv(F::cos);
                d *= g;
                vec![d]
            })),
        )
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(F::cos);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, p, _| {
                let mut d = p[0].mapv(|x| -x.sin());
                d *= g;
                vec![d]
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(F::zero()));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, p, _| {
                let mut d = g.clone();
                d.zip_mut_with(p[0], |gv, &x| {
                    if x <= F::zero() {
                        *gv = F::zero();
                    }
                });
                vec![d]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_scalar);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, _, y| {
                let mut d = y.mapv(|s| s * (F::one() - s));
                d *= g;
                vec![d]
            })),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus_scalar);
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, p, _| {
                let mut d = p[0].mapv(sigmoid_scalar);
                d *= g;
                vec![d]
            })),
        )
    }

    /// Clamp to [0, 1]; zero gradient outside the open interval.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(F::zero()).min(F::one()));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(|g, p, _| {
                let mut d = g.clone();
                d.zip_mut_with(p[0], |gv, &x| {
                    if x <= F::zero() || x >= F::one() {
                        *gv = F::zero();
                    }
                });
                vec![d]
            })),
        )
    }

    /// Clamp from below; zero gradient where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, min: F) -> Var {
        let value = self.value(a).mapv(|x| x.max(min));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, p, _| {
                let mut d = g.clone();
                d.zip_mut_with(p[0], |gv, &x| {
                    if x <= min {
                        *gv = F::zero();
                    }
                });
                vec![d]
            })),
        )
    }
}
