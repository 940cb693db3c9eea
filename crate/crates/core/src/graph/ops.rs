//! Elementwise, structural and reduction operations.

use super::{Backward, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Backward rule given as a closure over (inputs, output, grad, needs).
struct FnOp<F>(F);

impl<T, F> Backward<T> for FnOp<F>
where
    T: Real,
    F: Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>,
{
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        (self.0)(inputs, output, grad, needs)
    }
}

fn op<T, F>(f: F) -> FnOp<F>
where
    T: Real,
    F: Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>,
{
    FnOp(f)
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) {
    assert_eq!(
        g.shape(a),
        g.shape(b),
        "{what}: shape mismatch {:?} vs {:?}",
        g.shape(a),
        g.shape(b)
    );
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "add");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            value,
            &[a, b],
            op(|_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "sub");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            value,
            &[a, b],
            op(|_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "mul");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            value,
            &[a, b],
            op(|inp: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                vec![
                    needs[0].then(|| g.zip_map(inp[1], |g, y| g * y)),
                    needs[1].then(|| g.zip_map(inp[0], |g, x| g * x)),
                ]
            }),
        )
    }

    /// Sum of any number of equally shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n of nothing");
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            same_shape(self, parts[0], p, "add_n");
            value.add_assign(self.value(p));
        }
        let n = parts.len();
        self.push(
            value,
            parts,
            op(move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                (0..n).map(|i| needs[i].then(|| g.clone())).collect()
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(
            value,
            &[a],
            op(move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                vec![Some(g.map(|v| v * s))]
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(
            value,
            &[a],
            op(|_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| vec![Some(g.clone())]),
        )
    }

    /// Multiplies `[N, C, ...]` by a single-channel `[N, 1, ...]` tensor.
    pub fn mul_channel_broadcast(&mut self, a: Var, m: Var) -> Var {
        let (sa, sm) = (self.shape(a).to_vec(), self.shape(m).to_vec());
        assert_eq!(sa.len(), sm.len());
        assert_eq!(sa[0], sm[0]);
        assert_eq!(sm[1], 1);
        assert_eq!(sa[2..], sm[2..]);
        let (n, c) = (sa[0], sa[1]);
        let plane: usize = sa[2..].iter().product();
        let av = self.value(a).data();
        let mv = self.value(m).data();
        let mut out = vec![T::zero(); av.len()];
        for ni in 0..n {
            let mp = &mv[ni * plane..(ni + 1) * plane];
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for i in 0..plane {
                    out[off + i] = av[off + i] * mp[i];
                }
            }
        }
        let value = Tensor::from_vec(&sa, out).expect("broadcast shape");
        self.push(
            value,
            &[a, m],
            op(move |inp: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                let (av, mv, gv) = (inp[0].data(), inp[1].data(), g.data());
                let da = needs[0].then(|| {
                    let mut d = vec![T::zero(); av.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            for i in 0..plane {
                                d[off + i] = gv[off + i] * mv[ni * plane + i];
                            }
                        }
                    }
                    Tensor::from_vec(inp[0].shape(), d).unwrap()
                });
                let dm = needs[1].then(|| {
                    let mut d = vec![T::zero(); mv.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            for i in 0..plane {
                                d[ni * plane + i] += gv[off + i] * av[off + i];
                            }
                        }
                    }
                    Tensor::from_vec(inp[1].shape(), d).unwrap()
                });
                vec![da, dm]
            }),
        )
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        // df(x, y) is the derivative at input x with output y.
        let value = self.value(a).map(f);
        self.push(
            value,
            &[a],
            op(move |inp: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                let d: Vec<T> = inp[0]
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_vec(inp[0].shape(), d).unwrap())]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |x, _| T::one() / x)
    }

    /// `ln(x / (1 - x))` after clamping `x` into `[eps, 1 - eps]`.
    pub fn logit(&mut self, a: Var, eps: T) -> Var {
        let lo = eps;
        let hi = T::one() - eps;
        self.unary(
            a,
            move |x| {
                let x = x.max(lo).min(hi);
                (x / (T::one() - x)).ln()
            },
            move |x, _| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    T::one() / (x * (T::one() - x))
                }
            },
        )
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(
            a,
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    T::one()
                }
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            &[a],
            op(|inp: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                vec![Some(Tensor::full(inp[0].shape(), g.item()))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::c(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Concatenates NCHW (or NC...) tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let n = shapes[0][0];
        let plane: usize = shapes[0][2..].iter().product();
        for s in &shapes {
            assert_eq!(s[0], n, "concat batch mismatch");
            assert_eq!(s[2..], shapes[0][2..], "concat spatial mismatch");
        }
        let channels: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(n * total * plane);
        for ni in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let v = self.value(p).data();
                out.extend_from_slice(&v[ni * c * plane..(ni + 1) * c * plane]);
            }
        }
        let mut shape = shapes[0].clone();
        shape[1] = total;
        let value = Tensor::from_vec(&shape, out).unwrap();
        self.push(
            value,
            parts,
            op(move |inp: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                let gv = g.data();
                let mut offset = 0;
                let mut res = Vec::with_capacity(channels.len());
                for (k, &c) in channels.iter().enumerate() {
                    if needs[k] {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for ni in 0..n {
                            let start = (ni * total + offset) * plane;
                            d.extend_from_slice(&gv[start..start + c * plane]);
                        }
                        res.push(Some(Tensor::from_vec(inp[k].shape(), d).unwrap()));
                    } else {
                        res.push(None);
                    }
                    offset += c;
                }
                res
            }),
        )
    }

    /// Stacks `[N, C, H, W]` tensors on a new depth axis: `[N, C, T, H, W]`.
    pub fn stack_depth(&mut self, parts: &[Var]) -> Var {
        let s = self.shape(parts[0]).to_vec();
        assert_eq!(s.len(), 4);
        for &p in parts {
            assert_eq!(self.shape(p), &s[..], "stack_depth shape mismatch");
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let t = parts.len();
        let mut out = vec![T::zero(); n * c * t * plane];
        for (ti, &p) in parts.iter().enumerate() {
            let v = self.value(p).data();
            for ni in 0..n {
                for ci in 0..c {
                    let src = (ni * c + ci) * plane;
                    let dst = ((ni * c + ci) * t + ti) * plane;
                    out[dst..dst + plane].copy_from_slice(&v[src..src + plane]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, t, s[2], s[3]], out).unwrap();
        self.push(
            value,
            parts,
            op(move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                let gv = g.data();
                (0..t)
                    .map(|ti| {
                        needs[ti].then(|| {
                            let mut d = vec![T::zero(); n * c * plane];
                            for ni in 0..n {
                                for ci in 0..c {
                                    let src = ((ni * c + ci) * t + ti) * plane;
                                    let dst = (ni * c + ci) * plane;
                                    d[dst..dst + plane].copy_from_slice(&gv[src..src + plane]);
                                }
                            }
                            Tensor::from_vec(&s, d).unwrap()
                        })
                    })
                    .collect()
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape).expect("reshape");
        self.push(
            value,
            &[a],
            op(|inp: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                vec![Some(g.clone().reshape(inp[0].shape()).unwrap())]
            }),
        )
    }

    /// Nearest-neighbour upsampling of the two trailing axes by `factor`.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        let s = self.shape(a).to_vec();
        let nd = s.len();
        let (h, w) = (s[nd - 2], s[nd - 1]);
        let outer: usize = s[..nd - 2].iter().product();
        let (oh, ow) = (h * factor, w * factor);
        let v = self.value(a).data();
        let mut out = vec![T::zero(); outer * oh * ow];
        for o in 0..outer {
            for y in 0..oh {
                for x in 0..ow {
                    out[(o * oh + y) * ow + x] = v[(o * h + y / factor) * w + x / factor];
                }
            }
        }
        let mut shape = s.clone();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        let value = Tensor::from_vec(&shape, out).unwrap();
        self.push(
            value,
            &[a],
            op(move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                let gv = g.data();
                let mut d = vec![T::zero(); outer * h * w];
                for o in 0..outer {
                    for y in 0..oh {
                        for x in 0..ow {
                            d[(o * h + y / factor) * w + x / factor] += gv[(o * oh + y) * ow + x];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&s, d).unwrap())]
            }),
        )
    }

    /// Weighted sum of scalar nodes: `sum_i w_i * x_i`.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc = T::zero();
        for &(v, w) in terms {
            assert_eq!(self.value(v).len(), 1, "weighted_sum expects scalars");
            acc += w * self.value(v).item();
        }
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(acc),
            &vars,
            op(move |inp: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                weights
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        needs[i].then(|| Tensor::full(inp[i].shape(), g.item() * w))
                    })
                    .collect()
            }),
        )
    }

    /// Count-normalised masked squared error between `[N, C, H, W]` tensors.
    ///
    /// `weight` is `[N, 1, H, W]`. Each sample contributes
    /// `sum(w * (a - b)^2) / (C * sum(w))`, or zero when `sum(w) == 0`; the
    /// result is the mean over samples.
    pub fn masked_mse(&mut self, a: Var, b: Var, weight: &Tensor<T>) -> Var {
        same_shape(self, a, b, "masked_mse");
        let s = self.shape(a).to_vec();
        let (n, c) = (s[0], s[1]);
        let plane: usize = s[2..].iter().product();
        assert_eq!(weight.shape()[0], n);
        assert_eq!(weight.shape()[1], 1);
        assert_eq!(weight.len(), n * plane, "mask plane mismatch");
        let wv = weight.data().to_vec();
        let norms: Vec<T> = (0..n)
            .map(|ni| {
                let total: T = wv[ni * plane..(ni + 1) * plane].iter().copied().sum();
                if total > T::zero() {
                    T::one() / (T::c(c as f64) * total * T::c(n as f64))
                } else {
                    T::zero()
                }
            })
            .collect();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut acc = T::zero();
        for ni in 0..n {
            if norms[ni] == T::zero() {
                continue;
            }
            let mut part = T::zero();
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for i in 0..plane {
                    let d = av[off + i] - bv[off + i];
                    part += wv[ni * plane + i] * d * d;
                }
            }
            acc += part * norms[ni];
        }
        self.push(
            Tensor::scalar(acc),
            &[a, b],
            op(move |inp: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                let (av, bv) = (inp[0].data(), inp[1].data());
                let two = T::c(2.0) * g.item();
                let mut da = vec![T::zero(); av.len()];
                for ni in 0..n {
                    if norms[ni] == T::zero() {
                        continue;
                    }
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane;
                        for i in 0..plane {
                            da[off + i] =
                                two * norms[ni] * wv[ni * plane + i] * (av[off + i] - bv[off + i]);
                        }
                    }
                }
                let db = needs[1].then(|| Tensor::from_vec(&s, da.iter().map(|&v| -v).collect()).unwrap());
                let da = needs[0].then(|| Tensor::from_vec(&s, da).unwrap());
                vec![da, db]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    /// Central differences of `f` at `x`, compared with the tape gradient.
    fn check_unary(build: impl Fn(&mut Graph<f64>, Var) -> Var, x: Tensor<f64>) {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = build(&mut g, xv);
        let s = g.sum(y);
        let analytic = g.backward(s).get(xv).unwrap().clone();
        let eval = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = build(&mut g, xv);
            g.value(y).sum()
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let num = (eval(p) - eval(m)) / (2.0 * h);
            assert!(
                (num - analytic.data()[i]).abs() < 1e-6,
                "element {i}: numeric {num} analytic {}",
                analytic.data()[i]
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        let x = t(&[1, 2, 1, 3], &[0.3, -0.7, 1.2, 0.05, -0.4, 0.9]);
        check_unary(|g, v| g.sigmoid(v), x.clone());
        check_unary(|g, v| g.tanh(v), x.clone());
        check_unary(|g, v| g.leaky_relu(v, 0.2), x.clone());
        check_unary(|g, v| g.upsample_nearest(v, 2), x.clone());
        check_unary(
            |g, v| {
                let sq = g.mul(v, v);
                g.concat_channels(&[sq, v])
            },
            x.clone(),
        );
        check_unary(|g, v| g.logit(v, 1e-3), x.map(|v| 0.5 + 0.3 * v.tanh()));
        check_unary(|g, v| g.ln(v), x.map(|v| 1.0 + v * v));
        check_unary(
            |g, v| {
                let m = g.constant(t(&[1, 1, 1, 3], &[0.5, 2.0, -1.0]));
                g.mul_channel_broadcast(v, m)
            },
            x.clone(),
        );
        check_unary(
            |g, v| {
                let r = g.reshape(v, &[1, 1, 2, 1, 3]);
                let st = g.stack_depth(&[v, v]);
                let a = g.sum(r);
                let b = g.sum(st);
                g.weighted_sum(&[(a, 0.5), (b, 2.0)])
            },
            x,
        );
    }

    #[test]
    fn masked_mse_normalises_per_sample() {
        let mut g = Graph::<f64>::new();
        // Two samples, one channel, two pixels each.
        let a = g.param(t(&[2, 1, 1, 2], &[1.0, 2.0, 0.0, 0.0]));
        let b = g.constant(t(&[2, 1, 1, 2], &[0.0, 0.0, 0.0, 0.0]));
        let w = t(&[2, 1, 1, 2], &[1.0, 0.0, 0.0, 0.0]);
        let l = g.masked_mse(a, b, &w);
        // Sample 0: 1/1; sample 1 fully masked contributes 0; mean over 2.
        assert_eq!(g.value(l).item(), 0.5);
        let grads = g.backward(l);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
