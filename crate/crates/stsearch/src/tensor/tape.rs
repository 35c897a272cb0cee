//! Computation tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding the operation record and its
//! forward value. [`Tape::backward`] consumes the tape, walks the nodes in
//! reverse creation order exactly once, and accumulates gradients for every
//! parameter leaf.
//!
//! Shape conventions: operations treat a tensor as `[leading..., axes]`
//! where only the trailing axes named by the operation matter. This lets the
//! same code run a single window `[T, N, C]` and a mini-batch `[B, T, N, C]`.

use indexmap::IndexMap;

use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients keyed by parameter name, in first-use order.
pub type GradMap<E> = IndexMap<String, Tensor<E>>;

/// Broadcast mode of the second operand in a binary pointwise op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    /// Identical shapes.
    Same,
    /// `b` is a vector matching the last axis of `a`, repeated over rows.
    TrailingVec,
    /// `b` matches `a` except its last axis is 1 (per-row scalar).
    LastDimOne,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<String> },
    Matmul { x: Var, w: Var },
    MatmulLeft { a: Var, x: Var },
    TimeOuterSum { a: Var, b: Var },
    TimeApply { a: Var, s: Var },
    SelectTime { x: Var, index: usize },
    SliceLast { x: Var, start: usize },
    ConcatLast { a: Var, b: Var },
    TransposeLast2 { x: Var },
    Add { a: Var, b: Var, bc: Bcast },
    Sub { a: Var, b: Var, bc: Bcast },
    Mul { a: Var, b: Var, bc: Bcast },
    Div { a: Var, b: Var, bc: Bcast },
    Relu { x: Var },
    EluPlusOne { x: Var },
    Abs { x: Var },
    SoftmaxRows { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    Scale { x: Var, c: f64 },
}

struct Node<E: Element> {
    op: Op,
    value: Tensor<E>,
}

/// Wengert tape: records operations during the forward pass.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor<E>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient (inputs, targets, masks).
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Leaf bound to a named parameter; its value is snapshotted from the
    /// store so later mutation of the store cannot change this pass.
    pub fn param(&mut self, store: &ParamStore<E>, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?
            .clone();
        Ok(self.push(Op::Leaf { param: Some(name.to_string()) }, value))
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ── operator recording ──────────────────────────────────────────────

    /// `y = x · w` contracting the last axis of `x` with the rows of the
    /// 2-D matrix `w`: `[..., k] · [k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::Dimension {
                op: "matmul",
                detail: format!("{xs:?} x {ws:?}"),
            });
        }
        let (m, k, n) = (self.value(x).lead(), ws[0], ws[1]);
        let mut out = vec![E::zero(); m * n];
        mm(self.value(x).data(), m, k, self.value(w).data(), n, &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Matmul { x, w }, value))
    }

    /// Left-multiplies the square matrix `a` into every `[n, c]` slice of
    /// `x`: `[n, n] · [..., n, c] -> [..., n, c]`. Mixes information across
    /// the penultimate (node) axis.
    pub fn matmul_left(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ash, xsh) = (self.shape(a).to_vec(), self.shape(x).to_vec());
        let ok = ash.len() == 2
            && ash[0] == ash[1]
            && xsh.len() >= 2
            && xsh[xsh.len() - 2] == ash[0];
        if !ok {
            return Err(Error::Dimension {
                op: "matmul_left",
                detail: format!("{ash:?} x {xsh:?}"),
            });
        }
        let n = ash[0];
        let c = *xsh.last().unwrap();
        let slices = self.value(x).numel() / (n * c);
        let mut out = vec![E::zero(); slices * n * c];
        let (ad, xd) = (self.value(a).data(), self.value(x).data());
        for s in 0..slices {
            let xs = &xd[s * n * c..(s + 1) * n * c];
            let os = &mut out[s * n * c..(s + 1) * n * c];
            mm(ad, n, n, xs, c, os);
        }
        let value = Tensor::new(xsh, out)?;
        Ok(self.push(Op::MatmulLeft { a, x }, value))
    }

    /// Sum of outer products over the time axis, per node:
    /// `[..., t, n, h] , [..., t, n, w] -> [..., n, h, w]`.
    pub fn time_outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = ash.len() >= 3
            && bsh.len() == ash.len()
            && ash[..ash.len() - 1] == bsh[..bsh.len() - 1];
        if !ok {
            return Err(Error::Dimension {
                op: "time_outer_sum",
                detail: format!("{ash:?} x {bsh:?}"),
            });
        }
        let (t, n, h) = (ash[ash.len() - 3], ash[ash.len() - 2], ash[ash.len() - 1]);
        let w = bsh[bsh.len() - 1];
        let lead: usize = ash[..ash.len() - 3].iter().product();
        let mut out = vec![E::zero(); lead * n * h * w];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for l in 0..lead {
            for tt in 0..t {
                for nn in 0..n {
                    let av = &ad[((l * t + tt) * n + nn) * h..][..h];
                    let bv = &bd[((l * t + tt) * n + nn) * w..][..w];
                    for i in 0..h {
                        let c = av[i];
                        let row = &mut out[((l * n + nn) * h + i) * w..][..w];
                        for j in 0..w {
                            row[j] = row[j] + c * bv[j];
                        }
                    }
                }
            }
        }
        let mut shape: Vec<usize> = ash[..ash.len() - 3].to_vec();
        shape.extend([n, h, w]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::TimeOuterSum { a, b }, value))
    }

    /// Applies a per-node state matrix at every time step:
    /// `[..., t, n, h] , [..., n, h, w] -> [..., t, n, w]` with
    /// `y[t,n,j] = sum_i a[t,n,i] * s[n,i,j]`.
    pub fn time_apply(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ash, ssh) = (self.shape(a).to_vec(), self.shape(s).to_vec());
        let ok = ash.len() >= 3
            && ssh.len() == ash.len()
            && ssh[ssh.len() - 3] == ash[ash.len() - 2]
            && ssh[ssh.len() - 2] == ash[ash.len() - 1]
            && ash[..ash.len() - 3] == ssh[..ssh.len() - 3];
        if !ok {
            return Err(Error::Dimension {
                op: "time_apply",
                detail: format!("{ash:?} x {ssh:?}"),
            });
        }
        let (t, n, h) = (ash[ash.len() - 3], ash[ash.len() - 2], ash[ash.len() - 1]);
        let w = ssh[ssh.len() - 1];
        let lead: usize = ash[..ash.len() - 3].iter().product();
        let mut out = vec![E::zero(); lead * t * n * w];
        let (ad, sd) = (self.value(a).data(), self.value(s).data());
        for l in 0..lead {
            for tt in 0..t {
                for nn in 0..n {
                    let av = &ad[((l * t + tt) * n + nn) * h..][..h];
                    let row = &mut out[((l * t + tt) * n + nn) * w..][..w];
                    for i in 0..h {
                        let c = av[i];
                        let sr = &sd[((l * n + nn) * h + i) * w..][..w];
                        for j in 0..w {
                            row[j] = row[j] + c * sr[j];
                        }
                    }
                }
            }
        }
        let mut shape: Vec<usize> = ash.clone();
        *shape.last_mut().unwrap() = w;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::TimeApply { a, s }, value))
    }

    /// Picks one index of the time axis: `[..., t, n, c] -> [..., n, c]`.
    pub fn select_time(&mut self, x: Var, index: usize) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        if xsh.len() < 3 || index >= xsh[xsh.len() - 3] {
            return Err(Error::Dimension {
                op: "select_time",
                detail: format!("index {index} in {xsh:?}"),
            });
        }
        let (t, n, c) = (xsh[xsh.len() - 3], xsh[xsh.len() - 2], xsh[xsh.len() - 1]);
        let lead: usize = xsh[..xsh.len() - 3].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(lead * n * c);
        for l in 0..lead {
            let from = (l * t + index) * n * c;
            out.extend_from_slice(&xd[from..from + n * c]);
        }
        let mut shape: Vec<usize> = xsh[..xsh.len() - 3].to_vec();
        shape.extend([n, c]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::SelectTime { x, index }, value))
    }

    /// Slice of the last axis: `[..., c] -> [..., len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        let c = *xsh.last().unwrap_or(&0);
        if start + len > c {
            return Err(Error::Dimension {
                op: "slice_last",
                detail: format!("[{start}, {}) of {xsh:?}", start + len),
            });
        }
        let rows = self.value(x).lead();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * c + start..r * c + start + len]);
        }
        let mut shape = xsh;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::SliceLast { x, start }, value))
    }

    /// Concatenation along the last axis; all leading axes must match.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = ash.len() == bsh.len()
            && !ash.is_empty()
            && ash[..ash.len() - 1] == bsh[..bsh.len() - 1];
        if !ok {
            return Err(Error::Dimension {
                op: "concat_last",
                detail: format!("{ash:?} + {bsh:?}"),
            });
        }
        let (ca, cb) = (*ash.last().unwrap(), *bsh.last().unwrap());
        let rows = self.value(a).lead();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let mut shape = ash;
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::ConcatLast { a, b }, value))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        if xsh.len() < 2 {
            return Err(Error::Dimension {
                op: "transpose_last2",
                detail: format!("{xsh:?}"),
            });
        }
        let value = transpose_last2(self.value(x));
        Ok(self.push(Op::TransposeLast2 { x }, value))
    }

    /// 2-D transpose (alias of [`Tape::transpose_last2`] for matrices).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.transpose_last2(x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |ap, bp, bc| Op::Add { a: ap, b: bp, bc })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, |ap, bp, bc| Op::Sub { a: ap, b: bp, bc })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |ap, bp, bc| Op::Mul { a: ap, b: bp, bc })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, |ap, bp, bc| Op::Div { a: ap, b: bp, bc })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(E, E) -> E,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bc = broadcast_mode(&ash, &bsh).ok_or_else(|| Error::Dimension {
            op: name,
            detail: format!("{ash:?} vs {bsh:?}"),
        })?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let data: Vec<E> = match bc {
            Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::TrailingVec => {
                let c = *ash.last().unwrap();
                ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % c])).collect()
            }
            Bcast::LastDimOne => {
                let c = *ash.last().unwrap();
                ad.iter().enumerate().map(|(i, &x)| f(x, bd[i / c])).collect()
            }
        };
        let value = Tensor::new(ash, data)?;
        Ok(self.push(make(a, b, bc), value))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        self.push(Op::Relu { x }, value)
    }

    /// Positive feature map for linear attention: `x + 1` for `x >= 0`,
    /// `exp(x)` otherwise. Continuous at 0 with value 1.
    pub fn elu_plus_one(&mut self, x: Var) -> Var {
        let one = E::one();
        let value = self.value(x).map(|v| if v >= E::zero() { v + one } else { v.exp() });
        self.push(Op::EluPlusOne { x }, value)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(Op::Abs { x }, value)
    }

    /// Row-wise softmax of a 2-D tensor, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xsh = self.shape(x).to_vec();
        if xsh.len() != 2 || xsh[1] == 0 {
            return Err(Error::Dimension {
                op: "softmax_rows",
                detail: format!("{xsh:?}"),
            });
        }
        let (r, c) = (xsh[0], xsh[1]);
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mx = row.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
            let mut sum = E::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                sum = sum + e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / sum;
            }
        }
        let value = Tensor::new(xsh, out)?;
        Ok(self.push(Op::SoftmaxRows { x }, value))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(E::zero(), |acc, &v| acc + v);
        self.push(Op::SumAll { x }, Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.value(x).data().iter().fold(E::zero(), |acc, &v| acc + v);
        let m = s / E::from_real(n as f64);
        self.push(Op::MeanAll { x }, Tensor::scalar(m))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ce = E::from_real(c);
        let value = self.value(x).map(|v| v * ce);
        self.push(Op::Scale { x, c }, value)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Runs the reverse pass from a scalar loss and accumulates parameter
    /// gradients into the store's gradient slots. Consumes the tape.
    pub fn backward(self, loss: Var, store: &mut ParamStore<E>) -> Result<()> {
        let grads = self.backward_grads(loss)?;
        store.accumulate(&grads, 1.0)
    }

    /// Reverse pass returning gradients keyed by parameter name; used when
    /// gradients from several tapes are reduced before an optimizer step.
    pub fn backward_grads(self, loss: Var) -> Result<GradMap<E>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Tape { nodes } = self;
        let mut grads: Vec<Option<Tensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), E::one()));

        for id in (0..nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf { .. } => {
                    // keep the gradient for harvesting below
                    grads[id] = Some(dy);
                    continue;
                }
                Op::Matmul { x, w } => {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (m, k, n) = (xv.lead(), wv.shape()[0], wv.shape()[1]);
                    let mut dx = vec![E::zero(); m * k];
                    mm_bt(dy.data(), m, n, wv.data(), k, &mut dx);
                    let mut dw = vec![E::zero(); k * n];
                    mm_at(xv.data(), m, k, dy.data(), n, &mut dw);
                    acc(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx)?);
                    acc(&mut grads[w.0], Tensor::new(wv.shape().to_vec(), dw)?);
                }
                Op::MatmulLeft { a, x } => {
                    let (av, xv) = (&nodes[a.0].value, &nodes[x.0].value);
                    let n = av.shape()[0];
                    let c = *xv.shape().last().unwrap();
                    let slices = xv.numel() / (n * c);
                    let mut da = vec![E::zero(); n * n];
                    let mut dx = vec![E::zero(); xv.numel()];
                    for s in 0..slices {
                        let dys = &dy.data()[s * n * c..(s + 1) * n * c];
                        let xs = &xv.data()[s * n * c..(s + 1) * n * c];
                        // dA += dY_s · X_sᵀ
                        mm_bt(dys, n, c, xs, n, &mut da);
                        // dX_s = Aᵀ · dY_s
                        mm_at(av.data(), n, n, dys, c, &mut dx[s * n * c..(s + 1) * n * c]);
                    }
                    acc(&mut grads[a.0], Tensor::new(av.shape().to_vec(), da)?);
                    acc(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::TimeOuterSum { a, b } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ash = av.shape();
                    let (t, n, h) =
                        (ash[ash.len() - 3], ash[ash.len() - 2], ash[ash.len() - 1]);
                    let w = *bv.shape().last().unwrap();
                    let lead: usize = ash[..ash.len() - 3].iter().product();
                    let mut da = vec![E::zero(); av.numel()];
                    let mut db = vec![E::zero(); bv.numel()];
                    let (ad, bd, dyd) = (av.data(), bv.data(), dy.data());
                    for l in 0..lead {
                        for tt in 0..t {
                            for nn in 0..n {
                                let ai = ((l * t + tt) * n + nn) * h;
                                let bi = ((l * t + tt) * n + nn) * w;
                                for i in 0..h {
                                    let dyr = &dyd[((l * n + nn) * h + i) * w..][..w];
                                    let mut s = E::zero();
                                    for j in 0..w {
                                        s = s + dyr[j] * bd[bi + j];
                                        db[bi + j] = db[bi + j] + dyr[j] * ad[ai + i];
                                    }
                                    da[ai + i] = da[ai + i] + s;
                                }
                            }
                        }
                    }
                    acc(&mut grads[a.0], Tensor::new(av.shape().to_vec(), da)?);
                    acc(&mut grads[b.0], Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::TimeApply { a, s } => {
                    let (av, sv) = (&nodes[a.0].value, &nodes[s.0].value);
                    let ash = av.shape();
                    let (t, n, h) =
                        (ash[ash.len() - 3], ash[ash.len() - 2], ash[ash.len() - 1]);
                    let w = *sv.shape().last().unwrap();
                    let lead: usize = ash[..ash.len() - 3].iter().product();
                    let mut da = vec![E::zero(); av.numel()];
                    let mut ds = vec![E::zero(); sv.numel()];
                    let (ad, sd, dyd) = (av.data(), sv.data(), dy.data());
                    for l in 0..lead {
                        for tt in 0..t {
                            for nn in 0..n {
                                let ai = ((l * t + tt) * n + nn) * h;
                                let dyr = &dyd[((l * t + tt) * n + nn) * w..][..w];
                                for i in 0..h {
                                    let srow = &sd[((l * n + nn) * h + i) * w..][..w];
                                    let dsrow = &mut ds[((l * n + nn) * h + i) * w..][..w];
                                    let mut acc_i = E::zero();
                                    let c = ad[ai + i];
                                    for j in 0..w {
                                        acc_i = acc_i + dyr[j] * srow[j];
                                        dsrow[j] = dsrow[j] + c * dyr[j];
                                    }
                                    da[ai + i] = da[ai + i] + acc_i;
                                }
                            }
                        }
                    }
                    acc(&mut grads[a.0], Tensor::new(av.shape().to_vec(), da)?);
                    acc(&mut grads[s.0], Tensor::new(sv.shape().to_vec(), ds)?);
                }
                Op::SelectTime { x, index } => {
                    let xv = &nodes[x.0].value;
                    let xsh = xv.shape();
                    let (t, n, c) =
                        (xsh[xsh.len() - 3], xsh[xsh.len() - 2], xsh[xsh.len() - 1]);
                    let lead: usize = xsh[..xsh.len() - 3].iter().product();
                    let mut dx = vec![E::zero(); xv.numel()];
                    for l in 0..lead {
                        let to = (l * t + index) * n * c;
                        let from = l * n * c;
                        dx[to..to + n * c].copy_from_slice(&dy.data()[from..from + n * c]);
                    }
                    acc(&mut grads[x.0], Tensor::new(xsh.to_vec(), dx)?);
                }
                Op::SliceLast { x, start } => {
                    let xv = &nodes[x.0].value;
                    let c = xv.last_dim();
                    let len = dy.last_dim();
                    let rows = xv.lead();
                    let mut dx = vec![E::zero(); xv.numel()];
                    for r in 0..rows {
                        dx[r * c + start..r * c + start + len]
                            .copy_from_slice(&dy.data()[r * len..(r + 1) * len]);
                    }
                    acc(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::ConcatLast { a, b } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (ca, cb) = (av.last_dim(), bv.last_dim());
                    let rows = av.lead();
                    let mut da = vec![E::zero(); av.numel()];
                    let mut db = vec![E::zero(); bv.numel()];
                    for r in 0..rows {
                        let base = r * (ca + cb);
                        da[r * ca..(r + 1) * ca]
                            .copy_from_slice(&dy.data()[base..base + ca]);
                        db[r * cb..(r + 1) * cb]
                            .copy_from_slice(&dy.data()[base + ca..base + ca + cb]);
                    }
                    acc(&mut grads[a.0], Tensor::new(av.shape().to_vec(), da)?);
                    acc(&mut grads[b.0], Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::TransposeLast2 { x } => {
                    acc(&mut grads[x.0], transpose_last2(&dy));
                }
                Op::Add { a, b, bc } => {
                    acc(&mut grads[a.0], dy.clone());
                    let db = reduce_to_b(&dy, &nodes[b.0].value, *bc, |g, _, _| g);
                    acc(&mut grads[b.0], db);
                }
                Op::Sub { a, b, bc } => {
                    acc(&mut grads[a.0], dy.clone());
                    let db =
                        reduce_to_b(&dy, &nodes[b.0].value, *bc, |g, _, _| E::zero() - g);
                    acc(&mut grads[b.0], db);
                }
                Op::Mul { a, b, bc } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads[a.0], expand_from_b(&dy, bv, *bc, |g, b| g * b));
                    let ad = av.data();
                    let db = reduce_to_b(&dy, bv, *bc, |g, ai, _| g * ad[ai]);
                    acc(&mut grads[b.0], db);
                }
                Op::Div { a, b, bc } => {
                    // d(a/b)/da = 1/b ; d(a/b)/db = -a / b²
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads[a.0], expand_from_b(&dy, bv, *bc, |g, b| g / b));
                    let (ad, bd) = (av.data(), bv.data());
                    let db = reduce_to_b(&dy, bv, *bc, |g, ai, bi| {
                        E::zero() - g * ad[ai] / (bd[bi] * bd[bi])
                    });
                    acc(&mut grads[b.0], db);
                }
                Op::Relu { x } => {
                    let xv = &nodes[x.0].value;
                    let data: Vec<E> = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&xi, &g)| if xi > E::zero() { g } else { E::zero() })
                        .collect();
                    acc(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::EluPlusOne { x } => {
                    // derivative: 1 for x >= 0, exp(x) (= saved output) below
                    let xv = &nodes[x.0].value;
                    let yv = &node.value;
                    let data: Vec<E> = xv
                        .data()
                        .iter()
                        .zip(yv.data())
                        .zip(dy.data())
                        .map(|((&xi, &yi), &g)| if xi >= E::zero() { g } else { g * yi })
                        .collect();
                    acc(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Abs { x } => {
                    let xv = &nodes[x.0].value;
                    let data: Vec<E> = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&xi, &g)| {
                            if xi > E::zero() {
                                g
                            } else if xi < E::zero() {
                                E::zero() - g
                            } else {
                                E::zero()
                            }
                        })
                        .collect();
                    acc(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::SoftmaxRows { x } => {
                    let yv = &node.value;
                    let (r, c) = (yv.shape()[0], yv.shape()[1]);
                    let mut dx = vec![E::zero(); r * c];
                    for i in 0..r {
                        let yr = &yv.data()[i * c..(i + 1) * c];
                        let gr = &dy.data()[i * c..(i + 1) * c];
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(E::zero(), |s, (&y, &g)| s + y * g);
                        for j in 0..c {
                            dx[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads[x.0], Tensor::new(yv.shape().to_vec(), dx)?);
                }
                Op::SumAll { x } => {
                    let xv = &nodes[x.0].value;
                    let g = dy.data()[0];
                    acc(&mut grads[x.0], Tensor::full(xv.shape().to_vec(), g));
                }
                Op::MeanAll { x } => {
                    let xv = &nodes[x.0].value;
                    let g = dy.data()[0] / E::from_real(xv.numel() as f64);
                    acc(&mut grads[x.0], Tensor::full(xv.shape().to_vec(), g));
                }
                Op::Scale { x, c } => {
                    let ce = E::from_real(*c);
                    acc(&mut grads[x.0], dy.map(|g| g * ce));
                }
            }
        }

        let mut out: GradMap<E> = IndexMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = grads[id].take() {
                    match out.get_mut(name.as_str()) {
                        Some(t) => add_in_place(t, &g),
                        None => {
                            out.insert(name.clone(), g);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

// ── dense kernels ───────────────────────────────────────────────────────

/// `out += a · b`, `a: [m, k]`, `b: [k, n]`.
fn mm<E: Element>(a: &[E], m: usize, k: usize, b: &[E], n: usize, out: &mut [E]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                or[j] = or[j] + av * br[j];
            }
        }
    }
}

/// `out += a · bᵀ`, `a: [m, n]`, `b: [k, n]`, result `[m, k]`.
fn mm_bt<E: Element>(a: &[E], m: usize, n: usize, b: &[E], k: usize, out: &mut [E]) {
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        let or = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            let mut s = E::zero();
            for j in 0..n {
                s = s + ar[j] * br[j];
            }
            or[p] = or[p] + s;
        }
    }
}

/// `out += aᵀ · b`, `a: [m, k]`, `b: [m, n]`, result `[k, n]`.
fn mm_at<E: Element>(a: &[E], m: usize, k: usize, b: &[E], n: usize, out: &mut [E]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let or = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                or[j] = or[j] + av * br[j];
            }
        }
    }
}

fn transpose_last2<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let sh = x.shape();
    let (r, c) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    let lead: usize = sh[..sh.len() - 2].iter().product();
    let mut out = vec![E::zero(); x.numel()];
    let xd = x.data();
    for l in 0..lead {
        let base = l * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = xd[base + i * c + j];
            }
        }
    }
    let mut shape = sh.to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor::new(shape, out).expect("transpose shape")
}

fn broadcast_mode(a: &[usize], b: &[usize]) -> Option<Bcast> {
    if a == b {
        return Some(Bcast::Same);
    }
    let c = *a.last()?;
    if b.len() == 1 && b[0] == c {
        return Some(Bcast::TrailingVec);
    }
    if b.len() == a.len() && *b.last()? == 1 && b[..b.len() - 1] == a[..a.len() - 1] {
        return Some(Bcast::LastDimOne);
    }
    None
}

fn acc<E: Element>(slot: &mut Option<Tensor<E>>, delta: Tensor<E>) {
    match slot {
        None => *slot = Some(delta),
        Some(t) => add_in_place(t, &delta),
    }
}

fn add_in_place<E: Element>(t: &mut Tensor<E>, delta: &Tensor<E>) {
    debug_assert_eq!(t.shape(), delta.shape());
    for (a, &b) in t.data_mut().iter_mut().zip(delta.data()) {
        *a = *a + b;
    }
}

fn bcast_index(i: usize, last: usize, bc: Bcast) -> usize {
    match bc {
        Bcast::Same => i,
        Bcast::TrailingVec => i % last,
        Bcast::LastDimOne => i / last,
    }
}

/// Gradient for the `a` side of a binary op: per element, combine the
/// upstream gradient with the broadcast-matched value of `b`.
fn expand_from_b<E: Element>(
    dy: &Tensor<E>,
    b: &Tensor<E>,
    bc: Bcast,
    f: impl Fn(E, E) -> E,
) -> Tensor<E> {
    let c = dy.last_dim();
    let bd = b.data();
    let data: Vec<E> = dy
        .data()
        .iter()
        .enumerate()
        .map(|(i, &g)| f(g, bd[bcast_index(i, c, bc)]))
        .collect();
    Tensor::new(dy.shape().to_vec(), data).expect("binary grad shape")
}

/// Gradient for the `b` side of a binary op: sums `f(upstream, i, bi)` over
/// every position `i` of `dy` that broadcast from `b` slot `bi`.
fn reduce_to_b<E: Element>(
    dy: &Tensor<E>,
    b: &Tensor<E>,
    bc: Bcast,
    f: impl Fn(E, usize, usize) -> E,
) -> Tensor<E> {
    let c = dy.last_dim();
    let mut out = vec![E::zero(); b.numel()];
    for (i, &g) in dy.data().iter().enumerate() {
        let bi = bcast_index(i, c, bc);
        out[bi] = out[bi] + f(g, i, bi);
    }
    Tensor::new(b.shape().to_vec(), out).expect("binary grad shape")
}
