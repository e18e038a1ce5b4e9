//! Dense real tensors plus a reverse-mode differentiation tape.
//!
//! The tape records each forward op with its parent node indices; nodes are
//! therefore in topological order by construction and `backward` walks them
//! once in reverse. Tensors on the tape are never mutated in place.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::kernels;

pub const IGNORE_LABEL: u8 = 255;
const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "shape {:?} does not match {} data elements",
                shape,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

type GradFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

/// Handle to a node on a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    backward_done: Cell<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: vec![],
            grad_fn: None,
            needs_grad: requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, grad_fn: GradFn) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value,
            parents,
            grad_fn: if needs_grad { Some(grad_fn) } else { None },
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Which parents of an op actually need a gradient (captured at record time).
    fn parent_needs(&self, parents: &[Var]) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        parents.iter().map(|p| nodes[p.0].needs_grad).collect()
    }

    /// Reverse pass from a scalar root. Gradients of all requires_grad leaves
    /// are retained and readable via `grad`.
    pub fn backward(&self, root: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::Config(
                "backward called twice on the same tape without reset".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.0];
        if !root_node.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.needs_grad {
            return Err(Error::Config(
                "backward root is detached from all requires_grad leaves".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let Some(grad_fn) = node.grad_fn.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let pgrads = grad_fn(&g, &parent_vals, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    /// Gradient accumulated for a leaf by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }

    // ---- elementwise / reduction ops ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(&vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(&vb, "sub")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(|g, _, _| {
                let neg = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|v| -v).collect(),
                )
                .unwrap();
                vec![Some(g.clone()), Some(neg)]
            }),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(&vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(|g, parents, _| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(parents[1].data())
                        .map(|(gv, bv)| gv * bv)
                        .collect(),
                )
                .unwrap();
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(parents[0].data())
                        .map(|(gv, av)| gv * av)
                        .collect(),
                )
                .unwrap();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| c * x).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, _, _| {
                vec![Some(
                    Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| c * v).collect())
                        .unwrap(),
                )]
            }),
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let total: f64 = va.data().iter().sum();
        let shape = va.shape().to_vec();
        self.push(
            Tensor::scalar(total),
            vec![a.0],
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.push(
            out,
            vec![a.0],
            Box::new(|g, parents, _| {
                // subgradient at exactly 0 is 0
                let gin = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(parents[0].data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                vec![Some(gin)]
            }),
        )
    }

    // ---- spatial ops ----

    pub fn conv2d(&self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vk, vb) = (self.value(x), self.value(kernel), self.value(bias));
        let xs = vx.shape();
        let ks = vk.shape();
        if xs.len() != 3 || ks.len() != 4 || vb.shape().len() != 1 {
            return Err(Error::Shape(format!(
                "conv2d: expected input 3D, kernel 4D, bias 1D, got {:?}/{:?}/{:?}",
                xs,
                ks,
                vb.shape()
            )));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, kci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kh != kw {
            return Err(Error::Shape(format!("conv2d: kernel must be square, got {kh}x{kw}")));
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d: kernel size {k} must be odd")));
        }
        if stride < 1 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if kci != ci {
            return Err(Error::Shape(format!(
                "conv2d: input has {ci} channels but kernel expects {kci}"
            )));
        }
        if vb.shape()[0] != co {
            return Err(Error::Shape(format!(
                "conv2d: bias has {} entries for {co} output channels",
                vb.shape()[0]
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv2d: kernel {k} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        // output extent uses standard floor semantics:
        // H' = floor((H + 2·pad − k) / stride) + 1
        let ho = kernels::conv_out_extent(h, k, stride, pad);
        let wo = kernels::conv_out_extent(w, k, stride, pad);
        let out_data =
            kernels::conv2d_forward(vx.data(), vk.data(), vb.data(), ci, h, w, co, k, stride, pad);
        let out = Tensor::new(vec![co, ho, wo], out_data)?;
        let needs = self.parent_needs(&[x, kernel, bias]);
        Ok(self.push(
            out,
            vec![x.0, kernel.0, bias.0],
            Box::new(move |g, parents, _| {
                let (input, kern) = (parents[0], parents[1]);
                let gin = needs[0].then(|| {
                    Tensor::new(
                        vec![ci, h, w],
                        kernels::conv2d_grad_input(
                            g.data(),
                            kern.data(),
                            ci,
                            h,
                            w,
                            co,
                            k,
                            stride,
                            pad,
                        ),
                    )
                    .unwrap()
                });
                let gk = needs[1].then(|| {
                    Tensor::new(
                        vec![co, ci, k, k],
                        kernels::conv2d_grad_kernel(
                            g.data(),
                            input.data(),
                            ci,
                            h,
                            w,
                            co,
                            k,
                            stride,
                            pad,
                        ),
                    )
                    .unwrap()
                });
                let gb = needs[2].then(|| {
                    Tensor::new(vec![co], kernels::conv2d_grad_bias(g.data(), co, ho, wo)).unwrap()
                });
                vec![gin, gk, gb]
            }),
        ))
    }

    pub fn softmax_channels(&self, logits: Var) -> Result<Var> {
        let v = self.value(logits);
        let s = v.shape();
        if s.len() != 3 || s[0] < 2 {
            return Err(Error::Shape(format!(
                "softmax_channels: expected CxHxW with C >= 2, got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = Tensor::new(
            s.to_vec(),
            kernels::softmax_channels_forward(v.data(), c, h, w),
        )?;
        Ok(self.push(
            out,
            vec![logits.0],
            Box::new(move |g, _, out| {
                vec![Some(
                    Tensor::new(
                        g.shape().to_vec(),
                        kernels::softmax_channels_backward(g.data(), out.data(), c, h, w),
                    )
                    .unwrap(),
                )]
            }),
        ))
    }

    pub fn upsample_bilinear(&self, x: Var, factor: usize) -> Result<Var> {
        if factor != 2 && factor != 4 {
            return Err(Error::Config(format!(
                "upsample_bilinear: factor {factor} not in {{2, 4}}"
            )));
        }
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!(
                "upsample_bilinear: expected CxHxW, got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = Tensor::new(
            vec![c, h * factor, w * factor],
            kernels::upsample_bilinear_forward(v.data(), c, h, w, factor),
        )?;
        Ok(self.push(
            out,
            vec![x.0],
            Box::new(move |g, _, _| {
                vec![Some(
                    Tensor::new(
                        vec![c, h, w],
                        kernels::upsample_bilinear_backward(g.data(), c, h, w, factor),
                    )
                    .unwrap(),
                )]
            }),
        ))
    }

    // ---- loss primitives ----

    /// Mean of -log(p_true) over non-ignored pixels, scaled by `weight`.
    /// `probs` is a normalized CxHxW tensor; `labels` are row-major class ids
    /// with 255 as the ignore sentinel.
    pub fn nll_mean(&self, probs: Var, labels: &[u8], weight: f64) -> Result<Var> {
        let v = self.value(probs);
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("nll_mean: expected CxHxW, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "nll_mean: {} labels for {h}x{w} prediction",
                labels.len()
            )));
        }
        let hw = h * w;
        let mut count = 0usize;
        let mut total = 0.0;
        for (p, &lab) in labels.iter().enumerate() {
            if lab == IGNORE_LABEL {
                continue;
            }
            if lab as usize >= c {
                return Err(Error::Data(format!(
                    "nll_mean: label id {lab} out of range for {c} classes"
                )));
            }
            count += 1;
            let prob = v.data()[lab as usize * hw + p].max(LOG_CLAMP);
            total -= prob.ln();
        }
        let loss = if count == 0 {
            0.0
        } else {
            weight * total / count as f64
        };
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![probs.0],
            Box::new(move |g, parents, _| {
                let pv = parents[0];
                let mut gin = vec![0.0; pv.numel()];
                if count > 0 {
                    let scale = g.item() * weight / count as f64;
                    for (p, &lab) in labels.iter().enumerate() {
                        if lab == IGNORE_LABEL {
                            continue;
                        }
                        let idx = lab as usize * hw + p;
                        let prob = pv.data()[idx];
                        if prob >= LOG_CLAMP {
                            gin[idx] = -scale / prob;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![c, h, w], gin).unwrap())]
            }),
        ))
    }

    /// Mean squared difference: (1/n) * ||a - b||_F^2.
    pub fn mse_mean(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(&vb, "mse_mean")?;
        let n = va.numel() as f64;
        let total: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            vec![a.0, b.0],
            Box::new(move |g, parents, _| {
                let scale = 2.0 * g.item() / n;
                let diffs: Vec<f64> = parents[0]
                    .data()
                    .iter()
                    .zip(parents[1].data())
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                let shape = parents[0].shape().to_vec();
                let ga = Tensor::new(shape.clone(), diffs.clone()).unwrap();
                let gb = Tensor::new(shape, diffs.iter().map(|d| -d).collect()).unwrap();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Mean absolute difference, subgradient 0 where a == b.
    pub fn mad_mean(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(&vb, "mad_mean")?;
        let n = va.numel() as f64;
        let total: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            vec![a.0, b.0],
            Box::new(move |g, parents, _| {
                let scale = g.item() / n;
                let signs: Vec<f64> = parents[0]
                    .data()
                    .iter()
                    .zip(parents[1].data())
                    .map(|(x, y)| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let shape = parents[0].shape().to_vec();
                let ga = Tensor::new(shape.clone(), signs.clone()).unwrap();
                let gb = Tensor::new(shape, signs.iter().map(|s| -s).collect()).unwrap();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let tape = Tape::new();
        let input: Vec<f64> = (0..16).map(|i| i as f64 / 7.0).collect();
        let x = tape.leaf(t(&[1, 4, 4], &input), false);
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0;
        let k = tape.leaf(t(&[1, 1, 3, 3], &kdata), false);
        let b = tape.leaf(t(&[1], &[0.0]), false);
        let out = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.value(out).data(), &input[..]);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 4, 4], 1.0), false);
        let k = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let out = tape.conv2d(x, k, b, 1, 0).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[1, 2, 2]);
        assert!(v.data().iter().all(|&e| (e - 9.0).abs() < 1e-12));
    }

    #[test]
    fn conv_shape_formula() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 64, 64]), false);
        let k = tape.leaf(Tensor::zeros(&[16, 3, 3, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[16]), false);
        let out = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.shape_of(out), vec![16, 32, 32]);
    }

    #[test]
    fn conv_rejects_even_kernel_and_bad_shapes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4, 4]), false);
        let k = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        assert!(matches!(tape.conv2d(x, k, b, 1, 0), Err(Error::Config(_))));
        let k3 = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]), false);
        assert!(matches!(tape.conv2d(x, k3, b, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_examples() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[4], -2.0), true);
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_equal_logits_uniform() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[5, 2, 2], 3.0), false);
        let p = tape.softmax_channels(x).unwrap();
        let v = tape.value(p);
        assert!(v.data().iter().all(|&e| (e - 0.2).abs() < 1e-12));
    }

    #[test]
    fn softmax_quarter_three_quarters() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 1, 1], &[0.0, 3.0f64.ln()]), false);
        let p = tape.softmax_channels(x).unwrap();
        let v = tape.value(p);
        assert!((v.data()[0] - 0.25).abs() < 1e-12);
        assert!((v.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3, 1, 1], &[0.1, -0.7, 2.0]), false);
        let y = tape.leaf(t(&[3, 1, 1], &[0.1 + 5.0, -0.7 + 5.0, 2.0 + 5.0]), false);
        let px = tape.value(tape.softmax_channels(x).unwrap());
        let py = tape.value(tape.softmax_channels(y).unwrap());
        for (a, b) in px.data().iter().zip(py.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let sum: f64 = px.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn upsample_constant_and_sum() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 3], 0.4), false);
        let y = tape.upsample_bilinear(x, 2).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[2, 6, 6]);
        assert!(v.data().iter().all(|&e| (e - 0.4).abs() < 1e-12));
        let in_sum = 2.0 * 9.0 * 0.4;
        let out_sum: f64 = v.data().iter().sum();
        assert!((out_sum - 4.0 * in_sum).abs() < 1e-9);
    }

    #[test]
    fn upsample_single_pixel_copies() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 1], &[0.7]), false);
        let y = tape.upsample_bilinear(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7; 4]);
    }

    #[test]
    fn upsample_rejects_unsupported_factor() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 2]), false);
        assert!(matches!(
            tape.upsample_bilinear(x, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4], &[0.3, -1.2, 4.0, 0.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_half_norm_is_identity() {
        let tape = Tape::new();
        let data = [0.5, -2.0, 1.5];
        let x = tape.leaf(t(&[3], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        let g = tape.grad(x).unwrap();
        for (gv, xv) in g.data().iter().zip(data.iter()) {
            assert!((gv - xv).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_detached_and_repeat() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
        let detached = tape.leaf(Tensor::scalar(1.0), false);
        assert!(matches!(tape.backward(detached), Err(Error::Config(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Config(_))));
    }

    #[test]
    fn tape_linearity_of_backward() {
        let data = [0.4, -0.9, 2.2];
        let grad_of = |combine: bool| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(t(&[3], &data), true);
            let s1 = tape.sum(x);
            let sq = tape.mul(x, x).unwrap();
            let s2 = tape.sum(sq);
            let root = if combine {
                tape.add(s1, s2).unwrap()
            } else {
                s1
            };
            tape.backward(root).unwrap();
            tape.grad(x).unwrap().data().to_vec()
        };
        let combined = grad_of(true);
        // separate backwards on fresh tapes
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum(sq);
        tape.backward(s2).unwrap();
        let g2 = tape.grad(x).unwrap();
        let g1 = grad_of(false);
        for i in 0..3 {
            assert!((combined[i] - (g1[i] + g2.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_uniform_is_ln_c() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::full(&[5, 2, 2], 0.2), false);
        let labels = [0u8, 1, 2, 3];
        let l = tape.nll_mean(p, &labels, 1.0).unwrap();
        assert!((tape.value(l).item() - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_one_hot_near_zero_and_ignore() {
        let tape = Tape::new();
        let mut data = vec![1e-12; 2 * 2 * 2];
        // put probability ~1 on the true class of each pixel
        for p in 0..4 {
            data[p] = 1.0;
        }
        let probs = tape.leaf(t(&[2, 2, 2], &data), false);
        let l = tape.nll_mean(probs, &[0, 0, 0, 0], 1.0).unwrap();
        assert!(tape.value(l).item() < 1e-11);

        let tape2 = Tape::new();
        let probs2 = tape2.leaf(Tensor::full(&[2, 2, 2], 0.5), true);
        let l2 = tape2.nll_mean(probs2, &[255, 255, 255, 255], 1.0).unwrap();
        assert_eq!(tape2.value(l2).item(), 0.0);
        tape2.backward(l2).unwrap();
        assert!(tape2.grad(probs2).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::full(&[2, 1, 2], 0.5), false);
        assert!(matches!(
            tape.nll_mean(p, &[0, 7], 1.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn invariance_forced_arithmetic() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[2, 3], 3.0), false);
        let b = tape.leaf(Tensor::full(&[2, 3], 1.0), false);
        let f = tape.mse_mean(a, b).unwrap();
        let l1 = tape.mad_mean(a, b).unwrap();
        assert!((tape.value(f).item() - 4.0).abs() < 1e-12);
        assert!((tape.value(l1).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn determinism_of_forward_and_grad() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(t(&[1, 4, 4], &(0..16).map(|i| (i as f64).sin()).collect::<Vec<_>>()), true);
            let k = tape.leaf(
                t(&[2, 1, 3, 3], &(0..18).map(|i| (i as f64 * 0.37).cos()).collect::<Vec<_>>()),
                true,
            );
            let b = tape.leaf(t(&[2], &[0.1, -0.2]), true);
            let y = tape.conv2d(x, k, b, 1, 1).unwrap();
            let r = tape.relu(y);
            let s = tape.sum(r);
            tape.backward(s).unwrap();
            (
                tape.value(s).item().to_bits(),
                tape.grad(k)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
