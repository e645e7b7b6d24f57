//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together with
//! a closure computing the vector-Jacobian product. Parameters are pulled in by
//! name from a [`ParamStore`] and their gradients are read back by name after
//! [`Graph::backward`].

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{usage, Error, Result};
use crate::kernels::{self, ConvGeom, WindowLayout};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, Var>>,
    kinks: Cell<Option<u64>>,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter used in the graph, keyed by name. Parameters
    /// that were pulled in but did not influence the loss get zeros.
    pub fn params(&self, store_shapes: &Graph) -> BTreeMap<String, Tensor> {
        let nodes = store_shapes.nodes.borrow();
        self.params
            .iter()
            .map(|(name, idx)| {
                let g = self.by_node[*idx]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(nodes[*idx].value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that fingerprints which side of every non-differentiable point
    /// (rectifier knee, clamp bound, `abs` at zero) each element falls on.
    /// Two evaluations with equal fingerprints lie in the same smooth piece.
    pub fn with_kink_tracking() -> Self {
        let g = Self::default();
        g.kinks.set(Some(0xcbf2_9ce4_8422_2325));
        g
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.get()
    }

    fn note_regions(&self, x: &Tensor, region: impl Fn(f64) -> u64) {
        if let Some(mut h) = self.kinks.get() {
            for &v in x.data() {
                h = (h ^ region(v)).wrapping_mul(0x0100_0000_01b3);
            }
            self.kinks.set(Some(h));
        }
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<Backward>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records an input whose gradient is wanted.
    pub fn input(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Trainable parameter `name` from `store`; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.borrow().get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| usage(format!("unknown parameter '{name}'")))?
            .clone();
        let v = self.leaf(t, true);
        self.params.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter read as a constant: no gradient is tracked for it.
    pub fn frozen(&self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| usage(format!("unknown parameter '{name}'")))?
            .clone();
        Ok(self.constant(t))
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same value, cut from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let t = (*self.value(v)).clone();
        self.constant(t)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(usage("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pgrads = bw(&g, &needs);
            drop(g);
            for ((&p, pg), need) in node.parents.iter().zip(pgrads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.0))
            .collect();
        Ok(Gradients { by_node: grads, params })
    }

    fn val2(&self, a: Var, b: Var) -> (Rc<Tensor>, Rc<Tensor>) {
        let nodes = self.nodes.borrow();
        (nodes[a.0].value.clone(), nodes[b.0].value.clone())
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (x, y) = self.val2(a, b);
        x.expect_same_shape(&y, op)?;
        Ok((x, y))
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = self.same_shape(a, b, "add")?;
        let out = x.zip_map(&y, |p, q| p + q)?;
        Ok(self.push(out, vec![a.0, b.0], Some(Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = self.same_shape(a, b, "sub")?;
        let out = x.zip_map(&y, |p, q| p - q)?;
        Ok(self.push(out, vec![a.0, b.0], Some(Box::new(|g, _| vec![Some(g.clone()), Some(g.scale(-1.0))]))))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = self.same_shape(a, b, "mul")?;
        let out = x.zip_map(&y, |p, q| p * q)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&y, |p, q| p * q).expect("same shape")),
                    need[1].then(|| g.zip_map(&x, |p, q| p * q).expect("same shape")),
                ]
            })),
        ))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, vec![a.0], Some(Box::new(move |g, _| vec![Some(g.scale(k))])))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.push(out, vec![a.0], Some(Box::new(|g, _| vec![Some(g.clone())])))
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let x = self.value(a);
        let y = Rc::new(x.map(f));
        let y2 = y.clone();
        self.push(
            (*y).clone(),
            vec![a.0],
            Some(Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y2.data())
                    .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data).expect("shape"))]
            })),
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.note_regions(&self.value(a), |x| (x > 0.0) as u64);
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.note_regions(&self.value(a), |x| (x >= lo) as u64 + (x > hi) as u64);
        self.unary(
            a,
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    pub fn abs(&self, a: Var) -> Var {
        self.note_regions(&self.value(a), |x| (x > 0.0) as u64 + (x >= 0.0) as u64);
        self.unary(a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn powf(&self, a: Var, p: f64) -> Var {
        self.unary(a, move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    /// Overflow-safe `log(1 + exp(x))`.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&self, a: Var) -> Var {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        self.push(
            Tensor::scalar(x.sum()),
            vec![a.0],
            Some(Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))])),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `(B, C, H, W)` to `(B, C)` by spatial averaging.
    pub fn global_avg_pool(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let data = x.data().chunks(hw).map(|s| s.iter().sum::<f64>() / hw as f64).collect();
        let out = Tensor::new(vec![b, c], data)?;
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| {
                let mut dx = Vec::with_capacity(b * c * hw);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv / hw as f64).take(hw));
                }
                vec![Some(Tensor::new(vec![b, c, h, w], dx).expect("shape"))]
            })),
        ))
    }

    /// Sums over the last axis.
    pub fn sum_last(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let last = *shape.last().ok_or_else(|| usage("sum_last on rank-0 tensor"))?;
        let data: Vec<f64> = x.data().chunks(last).map(|s| s.iter().sum()).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| {
                let mut dx = Vec::with_capacity(g.len() * last);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv).take(last));
                }
                vec![Some(Tensor::new(shape.clone(), dx).expect("shape"))]
            })),
        ))
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let orig = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| vec![Some(g.clone().reshape(&orig).expect("reshape"))])),
        ))
    }

    /// Concatenates rank-4 tensors along channels.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let (b, _, h, w) = vals.first().ok_or_else(|| usage("concat of nothing"))?.dims4()?;
        let mut chans = Vec::with_capacity(vals.len());
        for v in &vals {
            let (b2, c2, h2, w2) = v.dims4()?;
            if (b2, h2, w2) != (b, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: vals[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            chans.push(c2);
        }
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(b * ctot * hw);
        for bi in 0..b {
            for (v, &c) in vals.iter().zip(&chans) {
                data.extend_from_slice(&v.data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let out = Tensor::new(vec![b, ctot, h, w], data)?;
        Ok(self.push(
            out,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g, need| {
                let gd = g.data();
                let mut offset = 0;
                let mut res = Vec::with_capacity(chans.len());
                for (k, &c) in chans.iter().enumerate() {
                    if need[k] {
                        let mut d = Vec::with_capacity(b * c * hw);
                        for bi in 0..b {
                            let start = (bi * ctot + offset) * hw;
                            d.extend_from_slice(&gd[start..start + c * hw]);
                        }
                        res.push(Some(Tensor::new(vec![b, c, h, w], d).expect("shape")));
                    } else {
                        res.push(None);
                    }
                    offset += c;
                }
                res
            })),
        ))
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn slice_channels(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (b, c, h, w) = x.dims4()?;
        if start + len > c {
            return Err(usage(format!("channel slice {start}..{} out of {c}", start + len)));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            let s = (bi * c + start) * hw;
            data.extend_from_slice(&x.data()[s..s + len * hw]);
        }
        let out = Tensor::new(vec![b, len, h, w], data)?;
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| {
                let mut dx = vec![0.0; b * c * hw];
                for bi in 0..b {
                    let s = (bi * c + start) * hw;
                    dx[s..s + len * hw].copy_from_slice(&g.data()[bi * len * hw..(bi + 1) * len * hw]);
                }
                vec![Some(Tensor::new(vec![b, c, h, w], dx).expect("shape"))]
            })),
        ))
    }

    // ---------------------------------------------------------------- broadcasts

    /// `x[b, c, ...] * s[b, c]` for rank-4 `x` and rank-2 `s`.
    pub fn mul_bc(&self, a: Var, s: Var) -> Result<Var> {
        self.broadcast_bc(a, s, true)
    }

    /// `x[b, c, ...] + s[b, c]`.
    pub fn add_bc(&self, a: Var, s: Var) -> Result<Var> {
        self.broadcast_bc(a, s, false)
    }

    fn broadcast_bc(&self, a: Var, s: Var, multiply: bool) -> Result<Var> {
        let (x, sv) = self.val2(a, s);
        let (b, c, h, w) = x.dims4()?;
        if sv.shape() != [b, c] {
            return Err(Error::ShapeMismatch {
                op: "broadcast_bc",
                lhs: x.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut data = x.data().to_vec();
        for (chunk, &k) in data.chunks_mut(hw).zip(sv.data()) {
            for v in chunk {
                if multiply {
                    *v *= k;
                } else {
                    *v += k;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            vec![a.0, s.0],
            Some(Box::new(move |g, need| {
                let dx = need[0].then(|| {
                    if multiply {
                        let mut d = g.data().to_vec();
                        for (chunk, &k) in d.chunks_mut(hw).zip(sv.data()) {
                            chunk.iter_mut().for_each(|v| *v *= k);
                        }
                        Tensor::new(g.shape().to_vec(), d).expect("shape")
                    } else {
                        g.clone()
                    }
                });
                let ds = need[1].then(|| {
                    let d = if multiply {
                        g.data()
                            .chunks(hw)
                            .zip(x.data().chunks(hw))
                            .map(|(gc, xc)| gc.iter().zip(xc).map(|(p, q)| p * q).sum())
                            .collect()
                    } else {
                        g.data().chunks(hw).map(|gc| gc.iter().sum()).collect()
                    };
                    Tensor::new(vec![b, c], d).expect("shape")
                });
                vec![dx, ds]
            })),
        ))
    }

    /// `x[b, c, ...] * s[c]` or `+ s[c]` for a per-channel vector.
    pub fn mul_channel(&self, a: Var, s: Var) -> Result<Var> {
        self.broadcast_c(a, s, true)
    }

    pub fn add_channel(&self, a: Var, s: Var) -> Result<Var> {
        self.broadcast_c(a, s, false)
    }

    fn broadcast_c(&self, a: Var, s: Var, multiply: bool) -> Result<Var> {
        let (x, sv) = self.val2(a, s);
        let (_, c, h, w) = x.dims4()?;
        if sv.len() != c {
            return Err(Error::ShapeMismatch {
                op: "broadcast_c",
                lhs: x.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut data = x.data().to_vec();
        for (i, chunk) in data.chunks_mut(hw).enumerate() {
            let k = sv.data()[i % c];
            for v in chunk {
                if multiply {
                    *v *= k;
                } else {
                    *v += k;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let sshape = sv.shape().to_vec();
        Ok(self.push(
            out,
            vec![a.0, s.0],
            Some(Box::new(move |g, need| {
                let dx = need[0].then(|| {
                    if multiply {
                        let mut d = g.data().to_vec();
                        for (i, chunk) in d.chunks_mut(hw).enumerate() {
                            let k = sv.data()[i % c];
                            chunk.iter_mut().for_each(|v| *v *= k);
                        }
                        Tensor::new(g.shape().to_vec(), d).expect("shape")
                    } else {
                        g.clone()
                    }
                });
                let ds = need[1].then(|| {
                    let mut d = vec![0.0; c];
                    for (i, gc) in g.data().chunks(hw).enumerate() {
                        d[i % c] += if multiply {
                            gc.iter().zip(&x.data()[i * hw..(i + 1) * hw]).map(|(p, q)| p * q).sum::<f64>()
                        } else {
                            gc.iter().sum::<f64>()
                        };
                    }
                    Tensor::new(sshape.clone(), d).expect("shape")
                });
                vec![dx, ds]
            })),
        ))
    }

    /// Broadcasts a per-channel vector `(C)` to `(B, C, H, W)`.
    pub fn expand_channels(&self, s: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let c = self.value(s).len();
        let zeros = self.constant(Tensor::zeros(&[b, c, h, w]));
        self.add_channel(zeros, s)
    }

    // ---------------------------------------------------------------- linear algebra

    /// 2-D matrix product with optional transposes: `op(a) @ op(b)`.
    pub fn matmul(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (x, y) = self.val2(a, b);
        let (ar, ac) = x.dims2()?;
        let (br, bc) = y.dims2()?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, x.data(), trans_a, y.data(), trans_b, 0.0, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g, need| {
                // C = op(A) op(B): dop(A) = G op(B)^T, dop(B) = op(A)^T G
                let da = need[0].then(|| {
                    let mut d = vec![0.0; ar * ac];
                    if trans_a {
                        // dA = op(B) G^T, shape (k, m)
                        gemm(k, n, m, 1.0, y.data(), trans_b, g.data(), true, 0.0, &mut d);
                    } else {
                        gemm(m, n, k, 1.0, g.data(), false, y.data(), !trans_b, 0.0, &mut d);
                    }
                    Tensor::new(vec![ar, ac], d).expect("shape")
                });
                let db = need[1].then(|| {
                    let mut d = vec![0.0; br * bc];
                    if trans_b {
                        // dB = G^T op(A), shape (n, k)
                        gemm(n, m, k, 1.0, g.data(), true, x.data(), trans_a, 0.0, &mut d);
                    } else {
                        gemm(k, m, n, 1.0, x.data(), !trans_a, g.data(), false, 0.0, &mut d);
                    }
                    Tensor::new(vec![br, bc], d).expect("shape")
                });
                vec![da, db]
            })),
        ))
    }

    /// `x (B, F) @ w (O, F)^T + b (O)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w, false, true)?;
        match b {
            None => Ok(y),
            Some(b) => {
                let (rows, cols) = self.value(y).dims2()?;
                let y4 = self.reshape(y, &[rows, cols, 1, 1])?;
                let y4 = self.add_channel(y4, b)?;
                self.reshape(y4, &[rows, cols])
            }
        }
    }

    /// Batched product over the leading axis: `a (G, M, K) @ b (G, K, N)`, or
    /// `@ b^T` for `b (G, N, K)` when `trans_b`.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (x, y) = self.val2(a, b);
        let (&[ga, m, k], &[gb, b1, b2]) = (x.shape(), y.shape()) else {
            return Err(usage("bmm needs rank-3 operands"));
        };
        let (k2, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if ga != gb || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; ga * m * n];
        for gi in 0..ga {
            gemm(
                m,
                k,
                n,
                1.0,
                &x.data()[gi * m * k..(gi + 1) * m * k],
                false,
                &y.data()[gi * k * n..(gi + 1) * k * n],
                trans_b,
                0.0,
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        let out = Tensor::new(vec![ga, m, n], out)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g, need| {
                let gd = g.data();
                let da = need[0].then(|| {
                    let mut d = vec![0.0; ga * m * k];
                    for gi in 0..ga {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &gd[gi * m * n..(gi + 1) * m * n],
                            false,
                            &y.data()[gi * k * n..(gi + 1) * k * n],
                            !trans_b,
                            0.0,
                            &mut d[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                    Tensor::new(vec![ga, m, k], d).expect("shape")
                });
                let db = need[1].then(|| {
                    let mut d = vec![0.0; ga * k * n];
                    for gi in 0..ga {
                        let xa = &x.data()[gi * m * k..(gi + 1) * m * k];
                        let gs = &gd[gi * m * n..(gi + 1) * m * n];
                        let dst = &mut d[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, 1.0, gs, true, xa, false, 0.0, dst);
                        } else {
                            gemm(k, m, n, 1.0, xa, true, gs, false, 0.0, dst);
                        }
                    }
                    Tensor::new(vec![gb, b1, b2], d).expect("shape")
                });
                vec![da, db]
            })),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let last = *x.shape().last().ok_or_else(|| usage("softmax of rank-0 tensor"))?;
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(last) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = Rc::new(Tensor::new(x.shape().to_vec(), data)?);
        let y2 = y.clone();
        Ok(self.push(
            (*y).clone(),
            vec![a.0],
            Some(Box::new(move |g, _| {
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(last).zip(g.data().chunks(last)).zip(y2.data().chunks(last)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), dx).expect("shape"))]
            })),
        ))
    }

    // ---------------------------------------------------------------- convolution

    /// Dense 2-D convolution; `w` is `(Cout, Cin, kh, kw)`, `b` is `(Cout)`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = self.val2(x, w);
        let geom = ConvGeom::new(xv.shape(), wv.shape(), stride, pad).ok_or_else(|| Error::ShapeMismatch {
            op: "conv2d",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        })?;
        let bv = b.map(|b| self.value(b));
        if let Some(bv) = &bv {
            if bv.len() != geom.cout {
                return Err(usage(format!("conv bias has {} entries for {} outputs", bv.len(), geom.cout)));
            }
        }
        let out = kernels::conv2d_forward(&geom, xv.data(), wv.data(), bv.as_ref().map(|t| t.data()));
        let out = Tensor::new(vec![geom.batch, geom.cout, geom.ho, geom.wo], out)?;
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        let has_bias = b.is_some();
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |g, need| {
                let (dx, dw, db) = kernels::conv2d_backward(&geom, xv.data(), wv.data(), g.data(), need[0], need[1]);
                let mut res = vec![
                    dx.map(|d| Tensor::new(xv.shape().to_vec(), d).expect("shape")),
                    dw.map(|d| Tensor::new(wv.shape().to_vec(), d).expect("shape")),
                ];
                if has_bias {
                    res.push(Some(Tensor::new(vec![geom.cout], db).expect("shape")));
                }
                res
            })),
        ))
    }

    /// Depthwise `k x k` convolution (stride 1, same padding); `w` is `(C, 1, k, k)`.
    pub fn depthwise_conv2d(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = self.val2(x, w);
        let (_, c, _, _) = xv.dims4()?;
        let (wc, one, k, k2) = wv.dims4()?;
        if wc != c || one != 1 || k != k2 || k % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let bv = b.map(|b| self.value(b));
        let out = kernels::depthwise_forward(&xv, wv.data(), k, bv.as_ref().map(|t| t.data()));
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        let has_bias = b.is_some();
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |g, _| {
                let (dx, dw, db) = kernels::depthwise_backward(&xv, wv.data(), k, g);
                let mut res = vec![
                    Some(Tensor::new(xv.shape().to_vec(), dx).expect("shape")),
                    Some(Tensor::new(wv.shape().to_vec(), dw).expect("shape")),
                ];
                if has_bias {
                    res.push(Some(Tensor::new(vec![c], db).expect("shape")));
                }
                res
            })),
        ))
    }

    /// Per-pixel depthwise filtering of `d (B, C, H, W)` with kernels
    /// `kern (B, C * k * k, H, W)`, zero padding at borders.
    pub fn pixel_filter(&self, d: Var, kern: Var, k: usize) -> Result<Var> {
        let (dv, kv) = self.val2(d, kern);
        let (b, c, h, w) = dv.dims4()?;
        if k % 2 == 0 || kv.shape() != [b, c * k * k, h, w] {
            return Err(Error::ShapeMismatch {
                op: "pixel_filter",
                lhs: dv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let out = kernels::pixel_filter_forward(&dv, &kv, k);
        Ok(self.push(
            out,
            vec![d.0, kern.0],
            Some(Box::new(move |g, _| {
                let (dd, dk) = kernels::pixel_filter_backward(&dv, &kv, k, g);
                vec![Some(dd), Some(dk)]
            })),
        ))
    }

    /// Softmax over consecutive groups of `group` channels at each pixel.
    pub fn group_softmax(&self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        let (_, c, _, _) = x.dims4()?;
        if group == 0 || c % group != 0 {
            return Err(usage(format!("{c} channels do not split into groups of {group}")));
        }
        let y = Rc::new(kernels::group_softmax_forward(&x, group));
        let y2 = y.clone();
        Ok(self.push(
            (*y).clone(),
            vec![a.0],
            Some(Box::new(move |g, _| vec![Some(kernels::group_softmax_backward(&y2, g, group))])),
        ))
    }

    // ---------------------------------------------------------------- spatial ops

    pub fn upsample_nearest2x(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.dims4()?;
        let out = kernels::upsample_nearest2x(&x);
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(|g, _| vec![Some(kernels::upsample_nearest2x_adjoint(g))])),
        ))
    }

    /// Half-pixel bilinear resampling to `(h, w)`.
    pub fn resize_bilinear(&self, a: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.value(a);
        let (_, _, ih, iw) = x.dims4()?;
        if h == 0 || w == 0 {
            return Err(usage("resize target must be at least 1x1"));
        }
        let out = kernels::resize_bilinear(&x, h, w);
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| vec![Some(kernels::resize_bilinear_adjoint(g, ih, iw))])),
        ))
    }

    /// Forward difference toward the compass offset `(dy, dx)`.
    pub fn shift_diff(&self, a: Var, dy: isize, dx: isize) -> Result<Var> {
        let x = self.value(a);
        x.dims4()?;
        let out = kernels::shift_diff(&x, dy, dx);
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| vec![Some(kernels::shift_diff_adjoint(g, dy, dx))])),
        ))
    }

    /// Per-(batch, channel) standardization over the spatial axes.
    pub fn instance_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        x.dims4()?;
        let (y, inv) = kernels::instance_norm_forward(&x, eps);
        let y = Rc::new(y);
        let y2 = y.clone();
        Ok(self.push(
            (*y).clone(),
            vec![a.0],
            Some(Box::new(move |g, _| vec![Some(kernels::instance_norm_backward(&y2, &inv, g))])),
        ))
    }

    /// Per-pixel standardization across channels.
    pub fn channel_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        x.dims4()?;
        let (y, inv) = kernels::channel_norm_forward(&x, eps);
        let y = Rc::new(y);
        let y2 = y.clone();
        Ok(self.push(
            (*y).clone(),
            vec![a.0],
            Some(Box::new(move |g, _| vec![Some(kernels::channel_norm_backward(&y2, &inv, g))])),
        ))
    }

    /// `(B, C, H, W)` to `(groups, window^2, C / heads)` non-overlapping windows.
    pub fn to_windows(&self, a: Var, window: usize, heads: usize) -> Result<Var> {
        let x = self.value(a);
        let layout = window_layout(x.shape(), window, heads)?;
        let out = Tensor::new(
            vec![layout.groups(), layout.tokens(), layout.head_dim()],
            layout.partition(x.data()),
        )?;
        let shape = x.shape().to_vec();
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| {
                vec![Some(Tensor::new(shape.clone(), layout.merge(g.data())).expect("shape"))]
            })),
        ))
    }

    /// Inverse of [`Graph::to_windows`] for an output of shape `(b, c, h, w)`.
    pub fn from_windows(&self, a: Var, shape: [usize; 4], window: usize, heads: usize) -> Result<Var> {
        let y = self.value(a);
        let layout = window_layout(&shape, window, heads)?;
        if y.shape() != [layout.groups(), layout.tokens(), layout.head_dim()] {
            return Err(usage(format!("window tensor {:?} does not match {shape:?}", y.shape())));
        }
        let out = Tensor::new(shape.to_vec(), layout.merge(y.data()))?;
        let wshape = y.shape().to_vec();
        Ok(self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| {
                vec![Some(Tensor::new(wshape.clone(), layout.partition(g.data())).expect("shape"))]
            })),
        ))
    }

    /// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
    pub fn bce_mean(&self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let p = self.value(pred);
        p.expect_same_shape(target, "bce_mean")?;
        self.note_regions(&p, |x| (x >= eps) as u64 + (x > 1.0 - eps) as u64);
        let n = p.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &t)| {
                let q = pv.clamp(eps, 1.0 - eps);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        let t = target.clone();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![pred.0],
            Some(Box::new(move |g, _| {
                let gv = g.item() / n;
                let d = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&pv, &tv)| {
                        if pv < eps || pv > 1.0 - eps {
                            0.0
                        } else {
                            gv * (-tv / pv + (1.0 - tv) / (1.0 - pv))
                        }
                    })
                    .collect();
                vec![Some(Tensor::new(p.shape().to_vec(), d).expect("shape"))]
            })),
        ))
    }
}

fn window_layout(shape: &[usize], window: usize, heads: usize) -> Result<WindowLayout> {
    let &[batch, channels, h, w] = shape else {
        return Err(usage(format!("windowing needs rank-4 input, got {shape:?}")));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(usage(format!("window {window} does not divide {h}x{w}")));
    }
    if heads == 0 || channels % heads != 0 {
        return Err(usage(format!("{channels} channels do not split into {heads} heads")));
    }
    Ok(WindowLayout {
        batch,
        channels,
        h,
        w,
        window,
        heads,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x, 0) + log1p(exp(-|x|))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
