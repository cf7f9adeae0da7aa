use crate::graph::{Graph, Var};
use crate::Tensor;

/// Round half away from zero.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

impl Graph {
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Var {
        let out = self.value(x).map(f);
        self.apply(
            &[x],
            out,
            Box::new(move |ctx| {
                let g = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .zip(ctx.output.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.apply(
            &[a, b],
            out,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.clone()),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.apply(
            &[a, b],
            out,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.map(|g| -g)),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.apply(
            &[a, b],
            out,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)),
                    ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.apply(
            &[a, b],
            out,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g / y)),
                    ctx.needs[1].then(|| {
                        // d(a/b)/db = -out / b
                        let t = ctx.grad.zip_map(ctx.output, |g, o| g * o);
                        t.zip_map(ctx.inputs[1], |t, y| -t / y)
                    }),
                ]
            }),
        )
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `max(x, bound)`. The gradient passes where `x > bound`, and also
    /// below the bound when a descent step would raise `x`, so entries
    /// pushed under the bound can recover.
    pub fn lower_bound(&mut self, x: Var, bound: f64) -> Var {
        let out = self.value(x).map(|v| v.max(bound));
        self.apply(
            &[x],
            out,
            Box::new(move |ctx| {
                let g = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(&g, &x)| if x > bound || g < 0.0 { g } else { 0.0 })
                    .collect();
                vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    /// Rounding with an identity (straight-through) gradient.
    pub fn round_ste(&mut self, x: Var) -> Var {
        self.unary(x, round_half_away, |_, _| 1.0)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.apply(
            &[x],
            Tensor::scalar(s),
            Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d2 = self.square(d);
        self.mean(d2)
    }

    /// `Σ_i w_i·x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut iter = terms.iter();
        let &(first, w0) = iter.next().expect("weighted_sum of nothing");
        let mut acc = self.mul_scalar(first, w0);
        for &(v, w) in iter {
            let t = self.mul_scalar(v, w);
            acc = self.add(acc, t);
        }
        acc
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.apply(
            &[x],
            out,
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()))]),
        )
    }
}
