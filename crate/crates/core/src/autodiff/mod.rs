//! Tape-based reverse-mode automatic differentiation on `f64` arrays.
//!
//! A [`Tape`] records every operation eagerly (define-by-run). Leaves enter
//! either as constants ([`Tape::leaf`]) or tracked parameters
//! ([`Tape::param`]); [`Tape::backward`] walks the tape once and returns
//! gradients for every node on a path from the loss to a tracked leaf.
//! All kernels are deterministic for a fixed input regardless of worker
//! count (fixed-size chunking, ordered reduction), which the trainer relies
//! on for bit-reproducible runs.
//!
//! Non-smooth operations (max-pool, dilation, erosion) record their winning
//! window position at forward time; ties resolve to the first candidate in
//! row-major window order and the backward pass routes gradient there.

pub mod check;
pub(crate) mod kernels;

pub use kernels::ConvGeom;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, Ix3, Ix4, IxDyn};
use std::cell::RefCell;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    LnClamped(Var, f64),
    Square(Var),
    SqrtShifted(Var),
    Matmul(Var, Var),
    Transpose(Var),
    SumAxes(Var, Vec<usize>),
    MeanAxes(Var, Vec<usize>),
    BroadcastTo(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    IndexRows(Var, Vec<usize>),
    SelectPerRow(Var, Vec<usize>),
    SoftmaxRows(Var),
    Im2col(Var, ConvGeom),
    MaxPool2(Var, Vec<u8>),
    Dilate(Var, Var, Vec<u8>),
    Erode(Var, Var, Vec<u8>),
    L2NormalizeRows(Var),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Cheap to create; build one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` was on a tracked path.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a tracked leaf; zeros are legitimate, a
    /// missing entry means the leaf never influenced the loss.
    pub fn wrt_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        // every node value is kept in standard layout so reshapes and raw
        // slice access hold throughout the engine
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn any_requires(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Untracked constant input.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked parameter; [`Tape::backward`] will produce its gradient.
    pub fn param(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Clone of the node value.
    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().expect("non-empty")
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(ArrayViewD<f64>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(nodes[v.0].value.view())
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[a.0].value.shape(),
            nodes[b.0].value.shape(),
            "{name}: operand shapes differ"
        );
    }

    // ----- elementwise -----

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let v = self.with_value(a, |va| self.with_value(b, |vb| &va + &vb));
        self.push(v, Op::Add(a, b), self.any_requires(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let v = self.with_value(a, |va| self.with_value(b, |vb| &va - &vb));
        self.push(v, Op::Sub(a, b), self.any_requires(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let v = self.with_value(a, |va| self.with_value(b, |vb| &va * &vb));
        self.push(v, Op::Mul(a, b), self.any_requires(&[a, b]))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "div");
        let v = self.with_value(a, |va| self.with_value(b, |vb| &va / &vb));
        self.push(v, Op::Div(a, b), self.any_requires(&[a, b]))
    }

    pub fn neg(&self, a: Var) -> Var {
        let v = self.with_value(a, |va| va.mapv(|x| -x));
        self.push(v, Op::Neg(a), self.requires(a))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.with_value(a, |va| va.mapv(|x| c * x));
        self.push(v, Op::Scale(a, c), self.requires(a))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let v = self.with_value(a, |va| va.mapv(|x| x + c));
        self.push(v, Op::AddScalar(a), self.requires(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.with_value(a, |va| va.mapv(|x| x.max(0.0)));
        self.push(v, Op::Relu(a), self.requires(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.with_value(a, |va| va.mapv(sigmoid_scalar));
        self.push(v, Op::Sigmoid(a), self.requires(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.with_value(a, |va| va.mapv(f64::exp));
        self.push(v, Op::Exp(a), self.requires(a))
    }

    /// `ln(max(x, floor))`; gradient is zero where the clamp is active.
    pub fn ln_clamped(&self, a: Var, floor: f64) -> Var {
        assert!(floor > 0.0, "ln_clamped floor must be positive");
        let v = self.with_value(a, |va| va.mapv(|x| x.max(floor).ln()));
        self.push(v, Op::LnClamped(a, floor), self.requires(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let v = self.with_value(a, |va| va.mapv(|x| x * x));
        self.push(v, Op::Square(a), self.requires(a))
    }

    /// `sqrt(x + shift)` — the epsilon-stabilized standard deviation.
    pub fn sqrt_shifted(&self, a: Var, shift: f64) -> Var {
        assert!(shift > 0.0, "sqrt_shifted shift must be positive");
        let v = self.with_value(a, |va| va.mapv(|x| (x + shift).sqrt()));
        self.push(v, Op::SqrtShifted(a), self.requires(a))
    }

    // ----- linear algebra -----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.with_value(a, |va| {
            self.with_value(b, |vb| {
                let a2 = va.into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
                let b2 = vb.into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
                kernels::matmul(a2, b2).into_dyn()
            })
        });
        self.push(v, Op::Matmul(a, b), self.any_requires(&[a, b]))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.with_value(a, |va| {
            va.into_dimensionality::<Ix2>()
                .expect("transpose 2-D")
                .t()
                .to_owned()
                .into_dyn()
        });
        self.push(v, Op::Transpose(a), self.requires(a))
    }

    // ----- shape -----

    pub fn sum_axes(&self, a: Var, axes: &[usize]) -> Var {
        let v = self.with_value(a, |va| kernels::sum_axes(&va.to_owned(), axes));
        self.push(v, Op::SumAxes(a, axes.to_vec()), self.requires(a))
    }

    pub fn mean_axes(&self, a: Var, axes: &[usize]) -> Var {
        let v = self.with_value(a, |va| {
            let count: usize = axes.iter().map(|&ax| va.shape()[ax]).product();
            kernels::sum_axes(&va.to_owned(), axes).mapv(|x| x / count as f64)
        });
        self.push(v, Op::MeanAxes(a, axes.to_vec()), self.requires(a))
    }

    /// Sum of all elements, as a 0-d node.
    pub fn sum_all(&self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum_axes(a, &axes)
    }

    /// Mean of all elements, as a 0-d node.
    pub fn mean_all(&self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean_axes(a, &axes)
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Var {
        let v = self.with_value(a, |va| kernels::broadcast_to(&va.to_owned(), shape));
        self.push(v, Op::BroadcastTo(a), self.requires(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let v = self.with_value(a, |va| {
            va.to_owned()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape: element count mismatch")
        });
        self.push(v, Op::Reshape(a), self.requires(a))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let nodes = self.nodes.borrow();
        let views: Vec<ArrayViewD<f64>> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        drop(nodes);
        self.push(v, Op::Concat(parts.to_vec(), axis), self.any_requires(parts))
    }

    /// `out[i] = a[idx[i]]` along axis 0. Indices may repeat.
    pub fn index_rows(&self, a: Var, idx: &[usize]) -> Var {
        let v = self.with_value(a, |va| va.select(Axis(0), idx));
        self.push(v, Op::IndexRows(a, idx.to_vec()), self.requires(a))
    }

    /// `out[i] = a[i, cols[i]]` for a 2-D node.
    pub fn select_per_row(&self, a: Var, cols: &[usize]) -> Var {
        let v = self.with_value(a, |va| {
            let a2 = va.into_dimensionality::<Ix2>().expect("select_per_row 2-D");
            assert_eq!(a2.dim().0, cols.len(), "select_per_row row count");
            ndarray::Array1::from_iter(cols.iter().enumerate().map(|(i, &c)| a2[[i, c]]))
                .into_dyn()
        });
        self.push(v, Op::SelectPerRow(a, cols.to_vec()), self.requires(a))
    }

    /// Row-wise softmax of a 2-D node (max-shifted for stability).
    pub fn softmax_rows(&self, a: Var) -> Var {
        let v = self.with_value(a, |va| {
            let a2 = va.into_dimensionality::<Ix2>().expect("softmax 2-D");
            let mut out = a2.to_owned();
            for mut row in out.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - m).exp());
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            out.into_dyn()
        });
        self.push(v, Op::SoftmaxRows(a), self.requires(a))
    }

    // ----- structured -----

    /// Unfold `[N,H,W,C]` into convolution columns (see [`kernels::im2col`]).
    pub fn im2col(&self, a: Var, geom: ConvGeom) -> Var {
        let v = self.with_value(a, |va| {
            let a4 = va.into_dimensionality::<Ix4>().expect("im2col 4-D");
            kernels::im2col(a4, geom).into_dyn()
        });
        self.push(v, Op::Im2col(a, geom), self.requires(a))
    }

    /// 2×2/stride-2 max-pool on `[N,H,W,C]`.
    pub fn max_pool2(&self, a: Var) -> Var {
        let (v, arg) = self.with_value(a, |va| {
            let a4 = va.into_dimensionality::<Ix4>().expect("max_pool2 4-D");
            let (out, arg) = kernels::maxpool2_forward(a4);
            (out.into_dyn(), arg)
        });
        self.push(v, Op::MaxPool2(a, arg), self.requires(a))
    }

    /// Learnable dilation on `[N,H,W]` with a `k`×`k` structural element.
    pub fn dilate(&self, z: Var, w: Var) -> Var {
        let (v, arg) = self.with_value(z, |vz| {
            self.with_value(w, |vw| {
                let z3 = vz.into_dimensionality::<Ix3>().expect("dilate z 3-D");
                let w2 = vw.into_dimensionality::<Ix2>().expect("dilate w 2-D");
                let (out, arg) = kernels::dilate_forward(z3, w2);
                (out.into_dyn(), arg)
            })
        });
        self.push(v, Op::Dilate(z, w, arg), self.any_requires(&[z, w]))
    }

    /// Learnable erosion on `[N,H,W]` with a `k`×`k` structural element.
    pub fn erode(&self, z: Var, w: Var) -> Var {
        let (v, arg) = self.with_value(z, |vz| {
            self.with_value(w, |vw| {
                let z3 = vz.into_dimensionality::<Ix3>().expect("erode z 3-D");
                let w2 = vw.into_dimensionality::<Ix2>().expect("erode w 2-D");
                let (out, arg) = kernels::erode_forward(z3, w2);
                (out.into_dyn(), arg)
            })
        });
        self.push(v, Op::Erode(z, w, arg), self.any_requires(&[z, w]))
    }

    /// Normalize each row of a 2-D node to unit length; all-zero rows map to
    /// the first basis vector and receive zero gradient.
    pub fn l2_normalize_rows(&self, a: Var) -> Var {
        let v = self.with_value(a, |va| {
            let a2 = va.into_dimensionality::<Ix2>().expect("l2_normalize 2-D");
            let mut out = a2.to_owned();
            let mut fallback = 0usize;
            for mut row in out.rows_mut() {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n == 0.0 {
                    row.fill(0.0);
                    row[0] = 1.0;
                    fallback += 1;
                } else {
                    row.mapv_inplace(|x| x / n);
                }
            }
            if fallback > 0 {
                log::warn!("l2_normalize_rows: {fallback} zero row(s) mapped to basis vector");
            }
            out.into_dyn()
        });
        self.push(v, Op::L2NormalizeRows(a), self.requires(a))
    }

    // ----- composites -----

    /// Affine layer `x·w + b` for `x: [N,K]`, `w: [K,M]`, `b: [M]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        let shape = self.shape(y);
        let bb = self.broadcast_to(b, &shape);
        self.add(y, bb)
    }

    /// Same-padded k×k convolution on `[N,H,W,C]` with weights `[k·k·C, M]`
    /// and bias `[M]`.
    pub fn conv2d_same(&self, x: Var, w: Var, b: Var, k: usize) -> Var {
        let xs = self.shape(x);
        let (n, h, wd) = (xs[0], xs[1], xs[2]);
        let geom = ConvGeom { k, pad: (k - 1) / 2 };
        let cols = self.im2col(x, geom);
        let y = self.matmul(cols, w);
        let m = self.shape(y)[1];
        let y = self.reshape(y, &[n, h, wd, m]);
        let bb = self.broadcast_to(b, &[n, h, wd, m]);
        self.add(y, bb)
    }

    /// Valid k×k convolution collapsing `[N,k,k,C]` to `[N,M]`.
    pub fn conv2d_valid_full(&self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x);
        let (n, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
        let cols = self.reshape(x, &[n, h * wd * c]);
        self.linear(cols, w, b)
    }

    // ----- reverse pass -----

    /// Reverse sweep from a single-element `root`. Nodes not on a path to a
    /// tracked leaf are skipped.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(ArrayD::ones(nodes[root.0].value.raw_dim()));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep leaf gradients for the caller
                }
                Op::Add(a, b) => {
                    acc(&nodes, &mut grads, *a, || g.clone());
                    acc(&nodes, &mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&nodes, &mut grads, *a, || g.clone());
                    acc(&nodes, &mut grads, *b, || g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    acc(&nodes, &mut grads, *a, || &g * &nodes[b.0].value);
                    acc(&nodes, &mut grads, *b, || &g * &nodes[a.0].value);
                }
                Op::Div(a, b) => {
                    acc(&nodes, &mut grads, *a, || &g / &nodes[b.0].value);
                    acc(&nodes, &mut grads, *b, || {
                        -(&g * &node.value) / &nodes[b.0].value
                    });
                }
                Op::Neg(a) => acc(&nodes, &mut grads, *a, || g.mapv(|x| -x)),
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&nodes, &mut grads, *a, || g.mapv(|x| c * x))
                }
                Op::AddScalar(a) => acc(&nodes, &mut grads, *a, || g.clone()),
                Op::Relu(a) => acc(&nodes, &mut grads, *a, || {
                    let mut out = g.clone();
                    out.zip_mut_with(&nodes[a.0].value, |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    out
                }),
                Op::Sigmoid(a) => acc(&nodes, &mut grads, *a, || {
                    let mut out = g.clone();
                    out.zip_mut_with(&node.value, |gv, &s| *gv *= s * (1.0 - s));
                    out
                }),
                Op::Exp(a) => acc(&nodes, &mut grads, *a, || &g * &node.value),
                Op::LnClamped(a, floor) => {
                    let floor = *floor;
                    acc(&nodes, &mut grads, *a, || {
                        let mut out = g.clone();
                        out.zip_mut_with(&nodes[a.0].value, |gv, &x| {
                            *gv = if x > floor { *gv / x } else { 0.0 };
                        });
                        out
                    })
                }
                Op::Square(a) => acc(&nodes, &mut grads, *a, || {
                    let mut out = g.clone();
                    out.zip_mut_with(&nodes[a.0].value, |gv, &x| *gv *= 2.0 * x);
                    out
                }),
                Op::SqrtShifted(a) => acc(&nodes, &mut grads, *a, || {
                    let mut out = g.clone();
                    out.zip_mut_with(&node.value, |gv, &s| *gv *= 0.5 / s);
                    out
                }),
                Op::Matmul(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().expect("matmul grad");
                    acc(&nodes, &mut grads, *a, || {
                        let vb = nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                        kernels::matmul(g2, vb.t()).into_dyn()
                    });
                    acc(&nodes, &mut grads, *b, || {
                        let va = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                        kernels::matmul(va.t(), g2).into_dyn()
                    });
                }
                Op::Transpose(a) => acc(&nodes, &mut grads, *a, || {
                    g.view()
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .t()
                        .to_owned()
                        .into_dyn()
                }),
                Op::SumAxes(a, axes) => acc(&nodes, &mut grads, *a, || {
                    let in_shape = nodes[a.0].value.shape().to_vec();
                    let keep = kernels::keepdims_shape(&in_shape, axes);
                    let gk = g.clone().into_shape_with_order(IxDyn(&keep)).unwrap();
                    kernels::broadcast_to(&gk, &in_shape)
                }),
                Op::MeanAxes(a, axes) => acc(&nodes, &mut grads, *a, || {
                    let in_shape = nodes[a.0].value.shape().to_vec();
                    let count: usize = axes.iter().map(|&ax| in_shape[ax]).product();
                    let keep = kernels::keepdims_shape(&in_shape, axes);
                    let gk = g.clone().into_shape_with_order(IxDyn(&keep)).unwrap();
                    kernels::broadcast_to(&gk, &in_shape).mapv(|x| x / count as f64)
                }),
                Op::BroadcastTo(a) => acc(&nodes, &mut grads, *a, || {
                    kernels::reduce_to(&g, nodes[a.0].value.shape())
                }),
                Op::Reshape(a) => acc(&nodes, &mut grads, *a, || {
                    g.clone()
                        .into_shape_with_order(nodes[a.0].value.raw_dim())
                        .unwrap()
                }),
                Op::Concat(parts, axis) => {
                    let mut offset = 0usize;
                    for p in parts {
                        let extent = nodes[p.0].value.shape()[*axis];
                        let sl = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + extent))
                            .to_owned();
                        acc(&nodes, &mut grads, *p, || sl.clone());
                        offset += extent;
                    }
                }
                Op::IndexRows(a, idx) => acc(&nodes, &mut grads, *a, || {
                    let mut out = ArrayD::zeros(nodes[a.0].value.raw_dim());
                    for (row, &src) in idx.iter().enumerate() {
                        let gr = g.index_axis(Axis(0), row);
                        let mut or = out.index_axis_mut(Axis(0), src);
                        or += &gr;
                    }
                    out
                }),
                Op::SelectPerRow(a, cols) => acc(&nodes, &mut grads, *a, || {
                    let mut out = ArrayD::zeros(nodes[a.0].value.raw_dim());
                    for (i, &c) in cols.iter().enumerate() {
                        out[[i, c]] += g[[i]];
                    }
                    out
                }),
                Op::SoftmaxRows(a) => acc(&nodes, &mut grads, *a, || {
                    let p = node.value.view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut out = g2.to_owned();
                    for (mut orow, prow) in out.rows_mut().into_iter().zip(p.rows()) {
                        let dot: f64 = orow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                        orow.zip_mut_with(&prow, |gv, &pv| *gv = pv * (*gv - dot));
                    }
                    out.into_dyn()
                }),
                Op::Im2col(a, geom) => acc(&nodes, &mut grads, *a, || {
                    let sh = nodes[a.0].value.shape();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    kernels::col2im(g2, sh[0], sh[1], sh[2], sh[3], *geom).into_dyn()
                }),
                Op::MaxPool2(a, arg) => acc(&nodes, &mut grads, *a, || {
                    let sh = nodes[a.0].value.shape();
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    kernels::maxpool2_backward(g4, arg, (sh[0], sh[1], sh[2], sh[3])).into_dyn()
                }),
                Op::Dilate(z, w, arg) | Op::Erode(z, w, arg) => {
                    let sign = if matches!(node.op, Op::Dilate(..)) {
                        1.0
                    } else {
                        -1.0
                    };
                    let zsh = nodes[z.0].value.shape().to_vec();
                    let k = nodes[w.0].value.shape()[0];
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (dz, dw) =
                        kernels::morph_backward(g3, arg, (zsh[0], zsh[1], zsh[2]), k, sign);
                    acc(&nodes, &mut grads, *z, || dz.clone().into_dyn());
                    acc(&nodes, &mut grads, *w, || dw.clone().into_dyn());
                }
                Op::L2NormalizeRows(a) => acc(&nodes, &mut grads, *a, || {
                    let x = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut out = ndarray::Array2::<f64>::zeros(x.dim());
                    for ((mut orow, xrow), grow) in
                        out.rows_mut().into_iter().zip(x.rows()).zip(g2.rows())
                    {
                        let n = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n == 0.0 {
                            continue; // fallback row: constant output
                        }
                        let xg: f64 = xrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                        for (o, (&xv, &gv)) in
                            orow.iter_mut().zip(xrow.iter().zip(grow.iter()))
                        {
                            *o = gv / n - xv * xg / (n * n * n);
                        }
                    }
                    out.into_dyn()
                }),
            }
        }
        Gradients { grads }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Accumulate `delta()` into the gradient slot of `v` if `v` is on a tracked
/// path; the closure is only evaluated when needed.
fn acc(
    nodes: &[Node],
    grads: &mut [Option<ArrayD<f64>>],
    v: Var,
    delta: impl FnOnce() -> ArrayD<f64>,
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let d = delta();
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2};

    #[test]
    fn backward_accumulates_reused_nodes() {
        // f = sum(x * x + x) => df/dx = 2x + 1
        let t = Tape::new();
        let x = t.param(array![1.0, -2.0, 3.0].into_dyn());
        let y = t.mul(x, x);
        let z = t.add(y, x);
        let loss = t.sum_all(z);
        let g = t.backward(loss);
        let gx = g.wrt(x).unwrap();
        assert_eq!(gx.clone().into_dimensionality().unwrap(), array![3.0, -3.0, 7.0]);
    }

    #[test]
    fn untracked_leaves_get_no_gradient() {
        let t = Tape::new();
        let x = t.param(array![2.0].into_dyn());
        let c = t.leaf(array![5.0].into_dyn());
        let y = t.mul(x, c);
        let loss = t.sum_all(y);
        let g = t.backward(loss);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap()[[0]], 5.0);
    }

    #[test]
    fn matmul_gradients_match_hand_computed() {
        // loss = sum(A·B); dA = ones·Bᵀ, dB = Aᵀ·ones
        let t = Tape::new();
        let a = t.param(array![[1.0, 2.0], [3.0, 4.0]].into_dyn());
        let b = t.param(array![[5.0, 6.0], [7.0, 8.0]].into_dyn());
        let y = t.matmul(a, b);
        let loss = t.sum_all(y);
        let g = t.backward(loss);
        let da = g.wrt(a).unwrap().clone().into_dimensionality::<Ix2>().unwrap();
        let db = g.wrt(b).unwrap().clone().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(da, array![[11.0, 15.0], [11.0, 15.0]]);
        assert_eq!(db, array![[4.0, 4.0], [6.0, 6.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]].into_dyn());
        let p = t.softmax_rows(x);
        let v = t.value(p).into_dimensionality::<Ix2>().unwrap();
        for row in v.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((v[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn select_per_row_picks_and_routes() {
        let t = Tape::new();
        let x = t.param(array![[0.1, 0.9], [0.8, 0.2]].into_dyn());
        let s = t.select_per_row(x, &[1, 0]);
        let loss = t.sum_all(s);
        assert_eq!(t.value(s).as_slice().unwrap(), &[0.9, 0.8]);
        let g = t.backward(loss);
        let gx = g.wrt(x).unwrap();
        assert_eq!(gx[[0, 1]], 1.0);
        assert_eq!(gx[[0, 0]], 0.0);
        assert_eq!(gx[[1, 0]], 1.0);
    }

    #[test]
    fn l2_normalize_zero_row_falls_back_to_basis() {
        let t = Tape::new();
        let x = t.leaf(array![[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]].into_dyn());
        let y = t.l2_normalize_rows(x);
        let v = t.value(y).into_dimensionality::<Ix2>().unwrap();
        assert_eq!(v.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert!((v.row(1).to_vec()[0] - 0.6).abs() < 1e-12);
        assert!((v.row(1).to_vec()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn index_rows_scatter_adds_repeated_sources() {
        let t = Tape::new();
        let x = t.param(Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap().into_dyn());
        let y = t.index_rows(x, &[0, 0, 1]);
        let loss = t.sum_all(y);
        let g = t.backward(loss);
        let gx = g.wrt(x).unwrap();
        assert_eq!(gx[[0, 0]], 2.0); // row 0 used twice
        assert_eq!(gx[[1, 0]], 1.0);
    }

    #[test]
    fn linear_applies_bias() {
        let t = Tape::new();
        let x = t.leaf(array![[1.0, 0.0]].into_dyn());
        let w = t.leaf(array![[2.0, 3.0], [4.0, 5.0]].into_dyn());
        let b = t.leaf(Array1::from_vec(vec![10.0, 20.0]).into_dyn());
        let y = t.linear(x, w, b);
        assert_eq!(t.value(y).as_slice().unwrap(), &[12.0, 23.0]);
    }
}
