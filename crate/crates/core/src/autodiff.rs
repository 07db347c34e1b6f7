//! Minimal reverse-mode differentiation over `[C, T, H, W]` real tensors.
//!
//! Complex sequences enter the tape as two channels (real, imaginary); the
//! Fourier transform, masking, resampling and frame permutations act on that
//! pair. Only the operations needed by the reconstructors and losses exist.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::Array3;
use num_complex::{Complex32, Complex64};

use crate::video::{fft2_centered_in_place, ImageSequence, KTSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data mismatch"
        );
        Self { shape, data }
    }

    pub fn scalar(v: f32) -> Self {
        Self::from_vec([1, 1, 1, 1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Two-channel view of a complex `[T, H, W]` array.
    pub fn from_complex(data: &Array3<Complex32>) -> Self {
        let (t, h, w) = data.dim();
        let n = t * h * w;
        let mut out = vec![0.0; 2 * n];
        for (i, v) in data.iter().enumerate() {
            out[i] = v.re;
            out[n + i] = v.im;
        }
        Self::from_vec([2, t, h, w], out)
    }

    pub fn to_complex(&self) -> Array3<Complex32> {
        let [c, t, h, w] = self.shape;
        assert_eq!(c, 2, "complex conversion needs two channels");
        let n = t * h * w;
        Array3::from_shape_fn((t, h, w), |(ti, r, col)| {
            let i = (ti * h + r) * w + col;
            Complex32::new(self.data[i], self.data[n + i])
        })
    }

    pub fn from_sequence(x: &ImageSequence) -> Self {
        Self::from_complex(x.data())
    }

    pub fn from_kt(y: &KTSequence) -> Self {
        Self::from_complex(y.data())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Fixed per-frame linear resampling: every output pixel is a weighted sum of
/// up to four input pixels of the same frame.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub height: usize,
    pub width: usize,
    /// `(input index, weight)` taps for each output pixel, row-major.
    pub taps: Vec<[(u32, f32); 4]>,
}

impl Sampler {
    pub fn apply_plane(&self, src: &[f32], dst: &mut [f32]) {
        for (d, taps) in dst.iter_mut().zip(&self.taps) {
            let mut acc = 0.0f32;
            for &(i, wgt) in taps {
                if wgt != 0.0 {
                    acc += wgt * src[i as usize];
                }
            }
            *d = acc;
        }
    }

    fn apply_plane_transpose(&self, grad_out: &[f32], grad_in: &mut [f32]) {
        for (g, taps) in grad_out.iter().zip(&self.taps) {
            for &(i, wgt) in taps {
                if wgt != 0.0 {
                    grad_in[i as usize] += wgt * g;
                }
            }
        }
    }

    pub fn apply_complex(
        &self,
        src: ndarray::ArrayView2<'_, Complex32>,
    ) -> ndarray::Array2<Complex32> {
        let re: Vec<f32> = src.iter().map(|v| v.re).collect();
        let im: Vec<f32> = src.iter().map(|v| v.im).collect();
        let mut ore = vec![0.0; re.len()];
        let mut oim = vec![0.0; im.len()];
        self.apply_plane(&re, &mut ore);
        self.apply_plane(&im, &mut oim);
        ndarray::Array2::from_shape_fn((self.height, self.width), |(r, c)| {
            let i = r * self.width + c;
            Complex32::new(ore[i], oim[i])
        })
    }
}

/// Kernel extent `(kt, kh, kw)`; all odd, zero "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvKernel {
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvKernel {
    pub fn spatial(k: usize) -> Self {
        Self {
            kt: 1,
            kh: k,
            kw: k,
        }
    }

    pub fn cube(k: usize) -> Self {
        Self {
            kt: k,
            kh: k,
            kw: k,
        }
    }

    pub fn volume(&self) -> usize {
        self.kt * self.kh * self.kw
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MulScalar {
        input: Var,
        scalar: Var,
    },
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: ConvKernel,
    },
    Fft {
        input: Var,
        inverse: bool,
    },
    Mask {
        input: Var,
        weights: Rc<Vec<f32>>,
    },
    Frame {
        input: Var,
        t: usize,
    },
    Stack(Vec<Var>),
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    Resample {
        input: Var,
        sampler: Rc<Sampler>,
    },
    SumSquares(Var),
    SumModulus {
        input: Var,
        eps: f32,
    },
    DotConst {
        input: Var,
        other: Rc<Tensor>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
    /// Double-precision value of scalar reductions and of scalar arithmetic
    /// on them.
    exact: Option<f64>,
}

/// Records operations so that gradients of a scalar can be pulled back to the
/// leaves.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `v`; zeros when
    /// `v` did not influence it.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f32> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; len])
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape, b.shape, "{what}: shape mismatch");
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, exact: f64, op: Op, needs_grad: bool) -> Var {
        let v = self.push(Tensor::scalar(exact as f32), op, needs_grad);
        self.nodes[v.0].exact = Some(exact);
        v
    }

    /// Value of a one-element node in double precision. Reductions and
    /// scalar arithmetic on them keep an `f64` copy, so loss values do not
    /// suffer single-precision rounding.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.exact.unwrap_or_else(|| node.value.item() as f64)
    }

    fn scalar_pair(&self, a: Var, b: Var) -> Option<(f64, f64)> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        (na.value.len() == 1 && nb.value.len() == 1 && (na.exact.is_some() || nb.exact.is_some()))
            .then(|| (self.scalar_value(a), self.scalar_value(b)))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va, vb, "add");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(va.shape, data);
        let ng = self.ng(a) || self.ng(b);
        if let Some((x, y)) = self.scalar_pair(a, b) {
            return self.push_scalar(x + y, Op::Add(a, b), ng);
        }
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va, vb, "sub");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(va.shape, data);
        let ng = self.ng(a) || self.ng(b);
        if let Some((x, y)) = self.scalar_pair(a, b) {
            return self.push_scalar(x - y, Op::Sub(a, b), ng);
        }
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let va = self.value(a);
        let t = Tensor::from_vec(va.shape, va.data.iter().map(|x| x * s).collect());
        let ng = self.ng(a);
        if let Some(x) = self.nodes[a.0].exact {
            return self.push_scalar(x * s as f64, Op::Scale(a, s), ng);
        }
        self.push(t, Op::Scale(a, s), ng)
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, a: Var, c: f32) -> Var {
        let va = self.value(a);
        let t = Tensor::from_vec(va.shape, va.data.iter().map(|x| x + c).collect());
        let ng = self.ng(a);
        if let Some(x) = self.nodes[a.0].exact {
            return self.push_scalar(x + c as f64, Op::Offset(a), ng);
        }
        self.push(t, Op::Offset(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::from_vec(va.shape, va.data.iter().map(|x| x.max(0.0)).collect());
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::from_vec(
            va.shape,
            va.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        );
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::from_vec(va.shape, va.data.iter().map(|x| x.tanh()).collect());
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    /// Multiplies every entry of `input` by the single entry of `scalar`.
    pub fn mul_scalar(&mut self, input: Var, scalar: Var) -> Var {
        let s = self.value(scalar).item();
        let va = self.value(input);
        let t = Tensor::from_vec(va.shape, va.data.iter().map(|x| x * s).collect());
        let ng = self.ng(input) || self.ng(scalar);
        if let Some((x, y)) = self.scalar_pair(input, scalar) {
            return self.push_scalar(x * y, Op::MulScalar { input, scalar }, ng);
        }
        self.push(t, Op::MulScalar { input, scalar }, ng)
    }

    /// Zero-padded "same" convolution. `weight` is `[Cout, Cin * volume, 1, 1]`
    /// laid out as `(cin, dt, dh, dw)` per output channel; `bias` is
    /// `[Cout, 1, 1, 1]`.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, kernel: ConvKernel) -> Var {
        let x = self.value(input);
        let wt = self.value(weight);
        let [cin, t, h, w] = x.shape;
        let cout = wt.shape[0];
        let kdim = cin * kernel.volume();
        assert_eq!(
            wt.shape[1], kdim,
            "conv weight does not match input channels"
        );
        let plane = h * w;
        let n = t * plane;
        let mut out = match bias {
            Some(b) => {
                let bv = &self.value(b).data;
                assert_eq!(bv.len(), cout);
                bv.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect()
            }
            None => vec![0.0f32; cout * n],
        };
        with_scratch(kdim * plane, |col| {
            for f in 0..t {
                fill_columns(x, kernel, f, col);
                // out[cout, frame f] += W[cout, k] * col[k, plane]
                unsafe {
                    matrixmultiply::sgemm(
                        cout,
                        kdim,
                        plane,
                        1.0,
                        wt.data.as_ptr(),
                        kdim as isize,
                        1,
                        col.as_ptr(),
                        plane as isize,
                        1,
                        1.0,
                        out.as_mut_ptr().add(f * plane),
                        n as isize,
                        1,
                    );
                }
            }
        });
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::from_vec([cout, t, h, w], out),
            Op::Conv {
                input,
                weight,
                bias,
                kernel,
            },
            ng,
        )
    }

    /// Centered orthonormal 2D FFT of every frame of a two-channel tensor.
    pub fn fft(&mut self, input: Var, inverse: bool) -> Var {
        let t = fft_tensor(self.value(input), inverse);
        let ng = self.ng(input);
        self.push(t, Op::Fft { input, inverse }, ng)
    }

    /// Multiplies frame `t`, column `w` of every channel/row by
    /// `weights[t * W + w]`.
    pub fn mask(&mut self, input: Var, weights: Rc<Vec<f32>>) -> Var {
        let t = mask_tensor(self.value(input), &weights);
        let ng = self.ng(input);
        self.push(t, Op::Mask { input, weights }, ng)
    }

    pub fn frame(&mut self, input: Var, t: usize) -> Var {
        let x = self.value(input);
        let [c, nt, h, w] = x.shape;
        assert!(t < nt);
        let plane = h * w;
        let mut out = Vec::with_capacity(c * plane);
        for ci in 0..c {
            let start = (ci * nt + t) * plane;
            out.extend_from_slice(&x.data[start..start + plane]);
        }
        let ng = self.ng(input);
        self.push(
            Tensor::from_vec([c, 1, h, w], out),
            Op::Frame { input, t },
            ng,
        )
    }

    /// Concatenates single-frame tensors along the frame axis.
    pub fn stack(&mut self, frames: &[Var]) -> Var {
        let [c, one, h, w] = self.shape(frames[0]);
        assert_eq!(one, 1);
        let nt = frames.len();
        let plane = h * w;
        let mut out = vec![0.0; c * nt * plane];
        for (t, f) in frames.iter().enumerate() {
            let v = self.value(*f);
            assert_eq!(v.shape, [c, 1, h, w], "stack: inconsistent frame shapes");
            for ci in 0..c {
                let dst = (ci * nt + t) * plane;
                out[dst..dst + plane].copy_from_slice(&v.data[ci * plane..(ci + 1) * plane]);
            }
        }
        let ng = frames.iter().any(|f| self.ng(*f));
        self.push(
            Tensor::from_vec([c, nt, h, w], out),
            Op::Stack(frames.to_vec()),
            ng,
        )
    }

    /// Output frame `t` is input frame `perm[t]`.
    pub fn permute_frames(&mut self, input: Var, perm: Vec<usize>) -> Var {
        let x = self.value(input);
        let [c, nt, h, w] = x.shape;
        assert_eq!(perm.len(), nt);
        let plane = h * w;
        let mut out = vec![0.0; x.len()];
        for ci in 0..c {
            for (t, &src) in perm.iter().enumerate() {
                let d = (ci * nt + t) * plane;
                let s = (ci * nt + src) * plane;
                out[d..d + plane].copy_from_slice(&x.data[s..s + plane]);
            }
        }
        let ng = self.ng(input);
        self.push(
            Tensor::from_vec(x.shape, out),
            Op::Permute { input, perm },
            ng,
        )
    }

    pub fn resample(&mut self, input: Var, sampler: Rc<Sampler>) -> Var {
        let x = self.value(input);
        let [_, _, h, w] = x.shape;
        assert_eq!((h, w), (sampler.height, sampler.width));
        let plane = h * w;
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x.data.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
            sampler.apply_plane(src, dst);
        }
        let ng = self.ng(input);
        self.push(
            Tensor::from_vec(x.shape, out),
            Op::Resample { input, sampler },
            ng,
        )
    }

    pub fn sum_squares(&mut self, input: Var) -> Var {
        let s: f64 = self
            .value(input)
            .data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        let ng = self.ng(input);
        self.push_scalar(s, Op::SumSquares(input), ng)
    }

    /// Sum of complex moduli `sqrt(re^2 + im^2 + eps)` of a two-channel tensor.
    pub fn sum_modulus(&mut self, input: Var, eps: f32) -> Var {
        let x = self.value(input);
        assert_eq!(x.shape[0], 2);
        let n = x.len() / 2;
        let s: f64 = (0..n)
            .map(|i| {
                let (a, b) = (x.data[i] as f64, x.data[n + i] as f64);
                (a * a + b * b + eps as f64).sqrt()
            })
            .sum();
        let ng = self.ng(input);
        self.push_scalar(s, Op::SumModulus { input, eps }, ng)
    }

    /// Real inner product with a constant tensor.
    pub fn dot_const(&mut self, input: Var, other: Rc<Tensor>) -> Var {
        let x = self.value(input);
        check_same(x, &other, "dot_const");
        let s: f64 = x
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let ng = self.ng(input);
        self.push_scalar(s, Op::DotConst { input, other }, ng)
    }

    /// Pulls back `d(out)/d(.)` to every node that needs a gradient.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0; self.nodes[out.0].value.len()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.pull_back(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.ng(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn pull_back(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| axpy(s, g, 1.0));
                self.accumulate(grads, *b, |s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| axpy(s, g, 1.0));
                self.accumulate(grads, *b, |s| axpy(s, g, -1.0));
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, |s| axpy(s, g, *k)),
            Op::Offset(a) => self.accumulate(grads, *a, |s| axpy(s, g, 1.0)),
            Op::Relu(a) => {
                let out = &node.value.data;
                self.accumulate(grads, *a, |s| {
                    for ((si, gi), o) in s.iter_mut().zip(g).zip(out) {
                        if *o > 0.0 {
                            *si += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.value.data;
                self.accumulate(grads, *a, |s| {
                    for ((si, gi), o) in s.iter_mut().zip(g).zip(out) {
                        *si += gi * o * (1.0 - o);
                    }
                });
            }
            Op::Tanh(a) => {
                let out = &node.value.data;
                self.accumulate(grads, *a, |s| {
                    for ((si, gi), o) in s.iter_mut().zip(g).zip(out) {
                        *si += gi * (1.0 - o * o);
                    }
                });
            }
            Op::MulScalar { input, scalar } => {
                let sv = self.value(*scalar).item();
                self.accumulate(grads, *input, |s| axpy(s, g, sv));
                if self.ng(*scalar) {
                    let x = &self.value(*input).data;
                    let d: f64 = x.iter().zip(g).map(|(a, b)| *a as f64 * *b as f64).sum();
                    self.accumulate(grads, *scalar, |s| s[0] += d as f32);
                }
            }
            Op::Conv {
                input,
                weight,
                bias,
                kernel,
            } => self.conv_backward(*input, *weight, *bias, *kernel, g, grads),
            Op::Fft { input, inverse } => {
                let shape = node.value.shape;
                let gt = fft_tensor(&Tensor::from_vec(shape, g.to_vec()), !inverse);
                self.accumulate(grads, *input, |s| axpy(s, &gt.data, 1.0));
            }
            Op::Mask { input, weights } => {
                let gt = mask_tensor(&Tensor::from_vec(node.value.shape, g.to_vec()), weights);
                self.accumulate(grads, *input, |s| axpy(s, &gt.data, 1.0));
            }
            Op::Frame { input, t } => {
                let [c, nt, h, w] = self.shape(*input);
                let plane = h * w;
                self.accumulate(grads, *input, |s| {
                    for ci in 0..c {
                        let d = (ci * nt + t) * plane;
                        axpy(&mut s[d..d + plane], &g[ci * plane..(ci + 1) * plane], 1.0);
                    }
                });
            }
            Op::Stack(frames) => {
                let [c, nt, h, w] = node.value.shape;
                let plane = h * w;
                for (t, f) in frames.iter().enumerate() {
                    self.accumulate(grads, *f, |s| {
                        for ci in 0..c {
                            let src = (ci * nt + t) * plane;
                            axpy(
                                &mut s[ci * plane..(ci + 1) * plane],
                                &g[src..src + plane],
                                1.0,
                            );
                        }
                    });
                }
            }
            Op::Permute { input, perm } => {
                let [c, nt, h, w] = node.value.shape;
                let plane = h * w;
                self.accumulate(grads, *input, |s| {
                    for ci in 0..c {
                        for (t, &src) in perm.iter().enumerate() {
                            let d = (ci * nt + src) * plane;
                            let o = (ci * nt + t) * plane;
                            axpy(&mut s[d..d + plane], &g[o..o + plane], 1.0);
                        }
                    }
                });
            }
            Op::Resample { input, sampler } => {
                let plane = sampler.height * sampler.width;
                self.accumulate(grads, *input, |s| {
                    for (gs, go) in s.chunks_exact_mut(plane).zip(g.chunks_exact(plane)) {
                        sampler.apply_plane_transpose(go, gs);
                    }
                });
            }
            Op::SumSquares(a) => {
                let x = &self.value(*a).data;
                let k = 2.0 * g[0];
                self.accumulate(grads, *a, |s| axpy(s, x, k));
            }
            Op::SumModulus { input, eps } => {
                let x = &self.value(*input).data;
                let n = x.len() / 2;
                self.accumulate(grads, *input, |s| {
                    for i in 0..n {
                        let (a, b) = (x[i] as f64, x[n + i] as f64);
                        let m = (a * a + b * b + *eps as f64).sqrt();
                        s[i] += (g[0] as f64 * a / m) as f32;
                        s[n + i] += (g[0] as f64 * b / m) as f32;
                    }
                });
            }
            Op::DotConst { input, other } => {
                self.accumulate(grads, *input, |s| axpy(s, &other.data, g[0]));
            }
        }
    }

    fn conv_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: ConvKernel,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let x = self.value(input);
        let wt = self.value(weight);
        let [cin, t, h, w] = x.shape;
        let cout = wt.shape[0];
        let kdim = cin * kernel.volume();
        let n = t * h * w;

        if let Some(b) = bias {
            self.accumulate(grads, b, |s| {
                for (o, row) in g.chunks_exact(n).enumerate() {
                    s[o] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            });
        }
        let plane = h * w;
        if self.ng(weight) {
            self.accumulate(grads, weight, |s| {
                with_scratch(kdim * plane, |col| {
                    for f in 0..t {
                        fill_columns(x, kernel, f, col);
                        // dW[cout, k] += g[cout, frame f] * col[k, plane]^T
                        unsafe {
                            matrixmultiply::sgemm(
                                cout,
                                plane,
                                kdim,
                                1.0,
                                g.as_ptr().add(f * plane),
                                n as isize,
                                1,
                                col.as_ptr(),
                                1,
                                plane as isize,
                                1.0,
                                s.as_mut_ptr(),
                                kdim as isize,
                                1,
                            );
                        }
                    }
                });
            });
        }
        if self.ng(input) {
            self.accumulate(grads, input, |s| {
                with_scratch(kdim * plane, |dcol| {
                    for f in 0..t {
                        // dcol[k, plane] = W[cout, k]^T * g[cout, frame f]
                        unsafe {
                            matrixmultiply::sgemm(
                                kdim,
                                cout,
                                plane,
                                1.0,
                                wt.data.as_ptr(),
                                1,
                                kdim as isize,
                                g.as_ptr().add(f * plane),
                                n as isize,
                                1,
                                0.0,
                                dcol.as_mut_ptr(),
                                plane as isize,
                                1,
                            );
                        }
                        for_each_run(x.shape, kernel, f, |dst, src, len| {
                            axpy(&mut s[src..src + len], &dcol[dst..dst + len], 1.0);
                        });
                    }
                });
            });
        }
    }
}

fn axpy(dst: &mut [f32], src: &[f32], k: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Visits every contiguous run shared by the im2col matrix of output frame
/// `t` and the input: `f(col_index, input_index, len)`.
fn for_each_run(
    shape: [usize; 4],
    kernel: ConvKernel,
    t: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let [cin, nt, h, w] = shape;
    let (pt, ph, pw) = (kernel.kt / 2, kernel.kh / 2, kernel.kw / 2);
    let plane = h * w;
    let mut k = 0;
    for ci in 0..cin {
        for dt in 0..kernel.kt {
            let st = t as isize + dt as isize - pt as isize;
            if st < 0 || st >= nt as isize {
                k += kernel.kh * kernel.kw;
                continue;
            }
            for dh in 0..kernel.kh {
                for dw in 0..kernel.kw {
                    let row_base = k * plane;
                    k += 1;
                    for r in 0..h {
                        let sr = r as isize + dh as isize - ph as isize;
                        if sr < 0 || sr >= h as isize {
                            continue;
                        }
                        // Output columns c with 0 <= c + dw - pw < w.
                        let shift = dw as isize - pw as isize;
                        let c0 = (-shift).max(0);
                        let c1 = (w as isize - shift).min(w as isize);
                        if c0 >= c1 {
                            continue;
                        }
                        let dst = row_base + r * w + c0 as usize;
                        let src = (ci * nt + st as usize) * plane
                            + sr as usize * w
                            + (c0 + shift) as usize;
                        f(dst, src, (c1 - c0) as usize);
                    }
                }
            }
        }
    }
}

thread_local! {
    // im2col scratch shared by every convolution on this thread. Each use
    // rewrites all entries it reads, padding included.
    static COLUMNS: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    COLUMNS.with_borrow_mut(|buf| {
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Writes the im2col matrix of output frame `t`, `[cin * volume, h * w]`.
fn fill_columns(x: &Tensor, kernel: ConvKernel, t: usize, col: &mut [f32]) {
    let [cin, nt, h, w] = x.shape;
    let (pt, ph, pw) = (kernel.kt / 2, kernel.kh / 2, kernel.kw / 2);
    let plane = h * w;
    let mut rows = col.chunks_exact_mut(plane);
    for ci in 0..cin {
        for dt in 0..kernel.kt {
            let st = t as isize + dt as isize - pt as isize;
            let frame = (0..nt as isize).contains(&st).then(|| {
                let base = (ci * nt + st as usize) * plane;
                &x.data[base..base + plane]
            });
            for dh in 0..kernel.kh {
                for dw in 0..kernel.kw {
                    let row = rows.next().expect("column buffer sized for the kernel");
                    let Some(src) = frame else {
                        row.fill(0.0);
                        continue;
                    };
                    let shift = dw as isize - pw as isize;
                    let c0 = (-shift).clamp(0, w as isize) as usize;
                    let c1 = (w as isize - shift).clamp(c0 as isize, w as isize) as usize;
                    for (r, out) in row.chunks_exact_mut(w).enumerate() {
                        let sr = r as isize + dh as isize - ph as isize;
                        if sr < 0 || sr >= h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let s0 = (sr as usize * w) as isize + c0 as isize + shift;
                        out[..c0].fill(0.0);
                        out[c0..c1].copy_from_slice(&src[s0 as usize..s0 as usize + (c1 - c0)]);
                        out[c1..].fill(0.0);
                    }
                }
            }
        }
    }
}

fn fft_tensor(x: &Tensor, inverse: bool) -> Tensor {
    let [c, nt, h, w] = x.shape;
    assert_eq!(c, 2, "fft needs a two-channel tensor");
    let plane = h * w;
    let n = nt * plane;
    let mut out = vec![0.0f32; x.len()];
    let mut buf = vec![Complex64::default(); plane];
    for t in 0..nt {
        let off = t * plane;
        for i in 0..plane {
            buf[i] = Complex64::new(x.data[off + i] as f64, x.data[n + off + i] as f64);
        }
        fft2_centered_in_place(&mut buf, h, w, inverse);
        for i in 0..plane {
            out[off + i] = buf[i].re as f32;
            out[n + off + i] = buf[i].im as f32;
        }
    }
    Tensor::from_vec(x.shape, out)
}

fn mask_tensor(x: &Tensor, weights: &[f32]) -> Tensor {
    let [c, nt, h, w] = x.shape;
    assert_eq!(weights.len(), nt * w, "mask weights do not match tensor");
    let mut out = x.data.clone();
    for ci in 0..c {
        for t in 0..nt {
            let wrow = &weights[t * w..(t + 1) * w];
            for r in 0..h {
                let off = ((ci * nt + t) * h + r) * w;
                for (v, m) in out[off..off + w].iter_mut().zip(wrow) {
                    *v *= m;
                }
            }
        }
    }
    Tensor::from_vec(x.shape, out)
}
