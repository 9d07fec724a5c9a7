use crate::error::{ensure_arg, Result};
use crate::numerics::tape::{Node, Op, Sink, Tape, Var};
use crate::numerics::Real;

impl<T: Real> Tape<T> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure_arg!(
            self.shape(a) == self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op)
    }

    fn map_unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.map_unary(x, Op::Affine { x, scale }, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    /// Multiplies every element of `x` by the single-element variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        ensure_arg!(self.value(s).len() == 1, "scale_by expects a one-element scale");
        let k = self.value(s)[0];
        Ok(self.map_unary(x, Op::ScaleBy { x, s }, |v| v * k))
    }

    /// `x[b, c, ...] * g[b, c]`, broadcasting `g` over trailing dims.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x);
        let gs = self.shape(g);
        ensure_arg!(
            xs.len() >= 2 && gs == &xs[..2],
            "mul_channel: gate {gs:?} does not match leading dims of {xs:?}"
        );
        let inner: usize = xs[2..].iter().product();
        let gv = self.value(g);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i / inner])
            .collect();
        let shape = xs.to_vec();
        Ok(self.push(shape, value, Op::MulChannel { x, g }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        ensure_arg!(
            shape.iter().product::<usize>() == self.value(x).len(),
            "cannot reshape {:?} to {shape:?}",
            self.shape(x)
        );
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).expect("length fits");
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// `sum_i w[i] * x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        ensure_arg!(w.len() == self.value(x).len(), "weighted_sum: {} weights for {} values", w.len(), self.value(x).len());
        let s = self.value(x).iter().zip(&w).map(|(&a, &b)| a * b).sum();
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { x, w }))
    }

    /// Picks flat elements of `x`; output has shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        ensure_arg!(!idx.is_empty(), "gather needs at least one index");
        ensure_arg!(idx.iter().all(|&i| i < n), "gather index out of range for {n} elements");
        let value = idx.iter().map(|&i| self.value(x)[i]).collect();
        Ok(self.push(vec![idx.len()], value, Op::Gather { x, idx }))
    }

    /// `sum_o w[o] * xs[o]` for equally-shaped `xs` and a length-`n` weight variable.
    pub fn weighted_combine(&mut self, xs: &[Var], w: Var) -> Result<Var> {
        ensure_arg!(!xs.is_empty(), "weighted_combine needs inputs");
        ensure_arg!(
            self.value(w).len() == xs.len(),
            "weighted_combine: {} weights for {} inputs",
            self.value(w).len(),
            xs.len()
        );
        let shape = self.shape(xs[0]).to_vec();
        ensure_arg!(xs.iter().all(|&x| self.shape(x) == shape.as_slice()), "weighted_combine: shape mismatch");
        let wv = self.value(w).to_vec();
        let mut value = vec![T::zero(); self.value(xs[0]).len()];
        for (&x, &k) in xs.iter().zip(&wv) {
            value.iter_mut().zip(self.value(x)).for_each(|(o, &v)| *o += k * v);
        }
        Ok(self.push(shape, value, Op::WeightedCombine { xs: xs.to_vec(), w }))
    }
}

pub(super) fn backward<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], sink: &mut Sink<'_, T>) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Add(a, b) => {
            if sink.wants(*a) {
                sink.add(*a, g.to_vec());
            }
            if sink.wants(*b) {
                sink.add(*b, g.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if sink.wants(*a) {
                sink.add(*a, g.to_vec());
            }
            if sink.wants(*b) {
                sink.add(*b, g.iter().map(|&v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if sink.wants(*a) {
                sink.add(*a, g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect());
            }
            if sink.wants(*b) {
                sink.add(*b, g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect());
            }
        }
        Op::Affine { x, scale } => {
            sink.add(*x, g.iter().map(|&v| v * *scale).collect());
        }
        Op::ScaleBy { x, s } => {
            let k = val(*s)[0];
            if sink.wants(*x) {
                sink.add(*x, g.iter().map(|&v| v * k).collect());
            }
            if sink.wants(*s) {
                let d = g.iter().zip(val(*x)).map(|(&g, &v)| g * v).sum();
                sink.add(*s, vec![d]);
            }
        }
        Op::MulChannel { x, g: gate } => {
            let gv = val(*gate);
            let inner = node.value.len() / gv.len();
            if sink.wants(*x) {
                sink.add(*x, g.iter().enumerate().map(|(i, &d)| d * gv[i / inner]).collect());
            }
            if sink.wants(*gate) {
                let xv = val(*x);
                let dg = (0..gv.len())
                    .map(|c| {
                        let r = c * inner..(c + 1) * inner;
                        g[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a * b).sum()
                    })
                    .collect();
                sink.add(*gate, dg);
            }
        }
        Op::Relu(x) => {
            let d = g
                .iter()
                .zip(&node.value)
                .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                .collect();
            sink.add(*x, d);
        }
        Op::Sigmoid(x) => {
            let d = g.iter().zip(&node.value).map(|(&g, &y)| g * y * (T::one() - y)).collect();
            sink.add(*x, d);
        }
        Op::Reshape(x) => sink.add(*x, g.to_vec()),
        Op::Sum(x) => {
            let n = nodes[x.0].value.len();
            sink.add(*x, vec![g[0]; n]);
        }
        Op::WeightedSum { x, w } => {
            sink.add(*x, w.iter().map(|&w| w * g[0]).collect());
        }
        Op::Gather { x, idx } => {
            let buf = sink.buf(*x);
            for (&i, &d) in idx.iter().zip(g) {
                buf[i] += d;
            }
        }
        Op::WeightedCombine { xs, w } => {
            let wv = val(*w);
            for (&x, &k) in xs.iter().zip(wv) {
                if sink.wants(x) {
                    let buf = sink.buf(x);
                    buf.iter_mut().zip(g).for_each(|(b, &d)| *b += k * d);
                }
            }
            if sink.wants(*w) {
                let dw = xs
                    .iter()
                    .map(|&x| val(x).iter().zip(g).map(|(&a, &b)| a * b).sum())
                    .collect();
                sink.add(*w, dw);
            }
        }
        _ => unreachable!("not an elementwise op"),
    }
}
