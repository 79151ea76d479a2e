//! Tape-based reverse-mode differentiation over 2-D row-major tensors.
//!
//! A [`Graph`] owns one training step: leaves go in, ops append slots in
//! topological order, [`Graph::backward`] walks the tape once in reverse.
//! Ops whose inputs are all constants skip recording, so the same forward
//! code doubles as a no-grad evaluation path.

use std::sync::Arc;

use crate::par;
use crate::tensor::Tensor;
use crate::{KernelError, Real, Result};

/// Handle to a slot on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sine,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    Sine,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Recip,
    Square,
}

/// One summand of a fused linear layer: `x[gather] . W^T`.
#[derive(Clone)]
pub struct ComboTerm {
    pub x: Var,
    pub gather: Option<Arc<Vec<u32>>>,
    pub weight: Var,
}

enum Back<T> {
    Leaf,
    Matmul { a: Var, b: Var },
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { a: Var, c: Arc<Vec<T>> },
    Affine { a: Var, mul: T },
    Elem { a: Var, kind: Unary },
    SmoothL1 { a: Var, target: Arc<Vec<T>> },
    AddRow { a: Var, b: Var },
    MulRow { a: Var, b: Var },
    AddCol { a: Var, b: Var },
    MulCol { a: Var, b: Var },
    AddScalar { a: Var, s: Var },
    MulScalar { a: Var, s: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    SumAxis0 { a: Var },
    MeanAxis0 { a: Var },
    SumAxis1 { a: Var },
    SumGroupRows { a: Var, group: usize },
    CumsumExclusive { a: Var },
    Reshape { a: Var },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { a: Var, idx: Arc<Vec<u32>> },
    ScatterAddRows { a: Var, idx: Arc<Vec<u32>> },
    WeightedGatherRows { table: Var, idx: Arc<Vec<u32>>, w: Arc<Vec<T>>, k: usize },
    LinearCombo { terms: Vec<ComboTerm>, bias: Option<Var>, act: Activation, pre: Option<Arc<Vec<T>>> },
}

struct Slot<T> {
    value: Tensor<T>,
    needs_grad: bool,
    back: Back<T>,
}

/// Gradients of the leaves after one backward pass.
pub struct GradStore<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradStore<T> {
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph<T: Real> {
    slots: Vec<Slot<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ─── gemm helper ─────────────────────────────────────────────────────

/// `c (+)= alpha * A * B` where `a`/`b` are row-major with the given stored
/// dims, optionally used transposed. Large non-transposed-A products are
/// split over fixed row blocks.
fn gemm<T: Real>(
    alpha: T,
    a: &[T],
    adims: (usize, usize),
    ta: bool,
    b: &[T],
    bdims: (usize, usize),
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let (m, ka) = if ta { (adims.1, adims.0) } else { adims };
    let (kb, n) = if tb { (bdims.1, bdims.0) } else { bdims };
    assert_eq!(ka, kb, "gemm inner dims");
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsb, csb) = if tb { (1isize, bdims.1 as isize) } else { (bdims.1 as isize, 1isize) };
    const ROW_BLOCK: usize = 256;
    if !ta && m > ROW_BLOCK && m * ka * n > 1 << 18 {
        par::for_chunks_mut(c, ROW_BLOCK * n, |i, cchunk| {
            let rows = cchunk.len() / n;
            let arow = i * ROW_BLOCK;
            unsafe {
                T::gemm(
                    rows,
                    ka,
                    n,
                    alpha,
                    a.as_ptr().add(arow * ka),
                    ka as isize,
                    1,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    cchunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
    } else {
        let (rsa, csa) = if ta { (1isize, adims.1 as isize) } else { (adims.1 as isize, 1isize) };
        unsafe {
            T::gemm(
                m,
                ka,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> KernelError {
    KernelError::ShapeMismatch { op, detail }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.slots[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.slots[v.0].needs_grad
    }

    /// Scalar convenience: value of a `[1,1]` slot.
    pub fn scalar_value(&self, v: Var) -> T {
        self.slots[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, back: Back<T>) -> Var {
        let back = if needs_grad { back } else { Back::Leaf };
        self.slots.push(Slot { value, needs_grad, back });
        Var(self.slots.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Back::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Back::Leaf)
    }

    /// Value copy of `v`, detached from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.slots[v.0].value.clone();
        self.constant(t)
    }

    fn d2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.slots[v.0].value.dims2().map_err(|_| {
            shape_err(op, format!("operand must be rank <= 2, got {:?}", self.slots[v.0].value.shape()))
        })
    }

    // ─── matmul ──────────────────────────────────────────────────────

    /// `a[m,k] . b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.d2("matmul", a)?;
        let (kb, n) = self.d2("matmul", b)?;
        if ka != kb {
            return Err(shape_err("matmul", format!("[{m},{ka}] x [{kb},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), self.val(a), (m, ka), false, self.val(b), (kb, n), false, T::zero(), &mut out);
        let ng = self.ng2(a, b);
        Ok(self.push(Tensor::from_vec(out, &[m, n])?, ng, Back::Matmul { a, b }))
    }

    /// `a[m,k] . b[n,k]^T`, the layout used by linear layers storing
    /// weights as `[out, in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.d2("matmul_nt", a)?;
        let (n, kb) = self.d2("matmul_nt", b)?;
        if ka != kb {
            return Err(shape_err("matmul_nt", format!("[{m},{ka}] x [{n},{kb}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), self.val(a), (m, ka), false, self.val(b), (n, kb), true, T::zero(), &mut out);
        let ng = self.ng2(a, b);
        Ok(self.push(Tensor::from_vec(out, &[m, n])?, ng, Back::MatmulNT { a, b }))
    }

    // ─── elementwise ─────────────────────────────────────────────────

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T + Send + Sync) -> Result<Vec<T>> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.len() != bv.len() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![T::zero(); av.len()];
        par::for_chunks_mut(&mut out, par::ELEM_BLOCK, |i, c| {
            let lo = i * par::ELEM_BLOCK;
            for (j, o) in c.iter_mut().enumerate() {
                *o = f(av[lo + j], bv[lo + j]);
            }
        });
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let (shape, ng) = (self.shape(a).to_vec(), self.ng2(a, b));
        Ok(self.push(Tensor::from_vec(out, &shape)?, ng, Back::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let (shape, ng) = (self.shape(a).to_vec(), self.ng2(a, b));
        Ok(self.push(Tensor::from_vec(out, &shape)?, ng, Back::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let (shape, ng) = (self.shape(a).to_vec(), self.ng2(a, b));
        Ok(self.push(Tensor::from_vec(out, &shape)?, ng, Back::Mul { a, b }))
    }

    /// Hadamard product with a constant of the same element count.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let av = self.val(a);
        if av.len() != c.numel() {
            return Err(shape_err("mul_const", format!("{:?} vs {:?}", self.shape(a), c.shape())));
        }
        let cd = Arc::clone(c.storage());
        let out: Vec<T> = av.iter().zip(cd.iter()).map(|(&x, &y)| x * y).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.needs_grad(a));
        Ok(self.push(Tensor::from_vec(out, &shape)?, ng, Back::MulConst { a, c: cd }))
    }

    /// `mul * x + add`, elementwise with scalar constants.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let (m, ad) = (T::from_f64(mul), T::from_f64(add));
        let out: Vec<T> = self.val(a).iter().map(|&x| m * x + ad).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs_grad(a);
        self.push(Tensor::from_vec(out, &shape).unwrap(), ng, Back::Affine { a, mul: m })
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f = |x: T| -> T {
            match kind {
                Unary::Relu => {
                    if x > T::zero() {
                        x
                    } else {
                        T::zero()
                    }
                }
                Unary::Sine => x.sin(),
                Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
                // ln(1+e^x) computed stably on both tails
                Unary::Softplus => {
                    if x > T::zero() {
                        x + (-x).exp().ln_1p()
                    } else {
                        x.exp().ln_1p()
                    }
                }
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Sqrt => x.sqrt(),
                Unary::Recip => T::one() / x,
                Unary::Square => x * x,
            }
        };
        let av = self.val(a);
        let mut out = vec![T::zero(); av.len()];
        par::for_chunks_mut(&mut out, par::ELEM_BLOCK, |i, c| {
            let lo = i * par::ELEM_BLOCK;
            for (j, o) in c.iter_mut().enumerate() {
                *o = f(av[lo + j]);
            }
        });
        let shape = self.shape(a).to_vec();
        let ng = self.needs_grad(a);
        self.push(Tensor::from_vec(out, &shape).unwrap(), ng, Back::Elem { a, kind })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn sine(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sine)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Elementwise smooth-L1 against a constant target:
    /// `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
    pub fn smooth_l1(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        let av = self.val(a);
        if av.len() != target.numel() {
            return Err(shape_err("smooth_l1", format!("{:?} vs {:?}", self.shape(a), target.shape())));
        }
        let td = Arc::clone(target.storage());
        let half = T::from_f64(0.5);
        let out: Vec<T> = av
            .iter()
            .zip(td.iter())
            .map(|(&x, &t)| {
                let d = x - t;
                if d.abs() < T::one() {
                    half * d * d
                } else {
                    d.abs() - half
                }
            })
            .collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.needs_grad(a));
        Ok(self.push(Tensor::from_vec(out, &shape)?, ng, Back::SmoothL1 { a, target: td }))
    }

    // ─── broadcasts ──────────────────────────────────────────────────

    fn rowwise(&mut self, op: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (m, n) = self.d2(op, a)?;
        let bn = self.val(b).len();
        if bn != n {
            return Err(shape_err(op, format!("[{m},{n}] with row [{bn}]")));
        }
        let (av, bv) = (self.val(a), self.val(b));
        let mut out = vec![T::zero(); m * n];
        par::for_chunks_mut(&mut out, n.max(1) * 64, |i, c| {
            let lo = i * n.max(1) * 64;
            for (j, o) in c.iter_mut().enumerate() {
                let x = av[lo + j];
                let y = bv[(lo + j) % n];
                *o = if mul { x * y } else { x + y };
            }
        });
        let ng = self.ng2(a, b);
        let back = if mul { Back::MulRow { a, b } } else { Back::AddRow { a, b } };
        Ok(self.push(Tensor::from_vec(out, &[m, n])?, ng, back))
    }

    /// `a[m,n] + b[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rowwise("add_row", a, b, false)
    }

    /// `a[m,n] * b[1,n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.rowwise("mul_row", a, b, true)
    }

    fn colwise(&mut self, op: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (m, n) = self.d2(op, a)?;
        let bm = self.val(b).len();
        if bm != m {
            return Err(shape_err(op, format!("[{m},{n}] with column [{bm}]")));
        }
        let (av, bv) = (self.val(a), self.val(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let y = bv[i];
            for j in 0..n {
                out[i * n + j] = if mul { av[i * n + j] * y } else { av[i * n + j] + y };
            }
        }
        let ng = self.ng2(a, b);
        let back = if mul { Back::MulCol { a, b } } else { Back::AddCol { a, b } };
        Ok(self.push(Tensor::from_vec(out, &[m, n])?, ng, back))
    }

    /// `a[m,n] + b[m,1]` broadcast over columns.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.colwise("add_col", a, b, false)
    }

    /// `a[m,n] * b[m,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.colwise("mul_col", a, b, true)
    }

    /// `a + s` with a learnable `[1,1]` scalar.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(shape_err("add_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let sv = self.scalar_value(s);
        let out: Vec<T> = self.val(a).iter().map(|&x| x + sv).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng2(a, s));
        Ok(self.push(Tensor::from_vec(out, &shape)?, ng, Back::AddScalar { a, s }))
    }

    /// `a * s` with a learnable `[1,1]` scalar.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(shape_err("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let sv = self.scalar_value(s);
        let out: Vec<T> = self.val(a).iter().map(|&x| x * sv).collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.ng2(a, s));
        Ok(self.push(Tensor::from_vec(out, &shape)?, ng, Back::MulScalar { a, s }))
    }

    // ─── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let s = par::block_sum(av.len(), par::ELEM_BLOCK, |lo, hi| av[lo..hi].iter().copied().sum());
        let ng = self.needs_grad(a);
        self.push(Tensor::scalar(s), ng, Back::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let n = av.len();
        let s = par::block_sum(n, par::ELEM_BLOCK, |lo, hi| av[lo..hi].iter().copied().sum::<T>());
        let ng = self.needs_grad(a);
        self.push(Tensor::scalar(s / T::from_f64(n as f64)), ng, Back::MeanAll { a })
    }

    fn axis0(&mut self, op: &'static str, a: Var, mean: bool) -> Result<Var> {
        let (m, n) = self.d2(op, a)?;
        let av = self.val(a);
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] = out[j] + av[i * n + j];
            }
        }
        if mean {
            let inv = T::one() / T::from_f64(m as f64);
            for o in &mut out {
                *o = *o * inv;
            }
        }
        let ng = self.needs_grad(a);
        let back = if mean { Back::MeanAxis0 { a } } else { Back::SumAxis0 { a } };
        Ok(self.push(Tensor::from_vec(out, &[1, n])?, ng, back))
    }

    /// Column sums: `[m,n] -> [1,n]`.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        self.axis0("sum_axis0", a, false)
    }

    /// Column means: `[m,n] -> [1,n]`.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        self.axis0("mean_axis0", a, true)
    }

    /// Row sums: `[m,n] -> [m,1]`.
    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.d2("sum_axis1", a)?;
        let av = self.val(a);
        let mut out = vec![T::zero(); m];
        for i in 0..m {
            out[i] = av[i * n..(i + 1) * n].iter().copied().sum();
        }
        let ng = self.needs_grad(a);
        Ok(self.push(Tensor::from_vec(out, &[m, 1])?, ng, Back::SumAxis1 { a }))
    }

    /// Sum groups of `group` consecutive rows: `[g*r, n] -> [r, n]`.
    pub fn sum_group_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (m, n) = self.d2("sum_group_rows", a)?;
        if group == 0 || m % group != 0 {
            return Err(shape_err("sum_group_rows", format!("rows {m} not divisible by group {group}")));
        }
        let rows = m / group;
        let av = self.val(a);
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            for g in 0..group {
                let base = (r * group + g) * n;
                for j in 0..n {
                    out[r * n + j] = out[r * n + j] + av[base + j];
                }
            }
        }
        let ng = self.needs_grad(a);
        Ok(self.push(Tensor::from_vec(out, &[rows, n])?, ng, Back::SumGroupRows { a, group }))
    }

    /// Exclusive prefix sums along each row.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.d2("cumsum_exclusive", a)?;
        let av = self.val(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let mut acc = T::zero();
            for j in 0..n {
                out[i * n + j] = acc;
                acc = acc + av[i * n + j];
            }
        }
        let ng = self.needs_grad(a);
        Ok(self.push(Tensor::from_vec(out, &[m, n])?, ng, Back::CumsumExclusive { a }))
    }

    // ─── structure ───────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.slots[a.0].value.reshape(shape)?;
        let ng = self.needs_grad(a);
        Ok(self.push(t, ng, Back::Reshape { a }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.d2("slice_cols", a)?;
        if start + width > n {
            return Err(shape_err("slice_cols", format!("{start}..{} of {n} columns", start + width)));
        }
        let av = self.val(a);
        let mut out = vec![T::zero(); m * width];
        for i in 0..m {
            out[i * width..(i + 1) * width].copy_from_slice(&av[i * n + start..i * n + start + width]);
        }
        let ng = self.needs_grad(a);
        Ok(self.push(Tensor::from_vec(out, &[m, width])?, ng, Back::SliceCols { a, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.d2("slice_rows", a)?;
        if start + count > m {
            return Err(shape_err("slice_rows", format!("{start}..{} of {m} rows", start + count)));
        }
        let out = self.val(a)[start * n..(start + count) * n].to_vec();
        let ng = self.needs_grad(a);
        Ok(self.push(Tensor::from_vec(out, &[count, n])?, ng, Back::SliceRows { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(KernelError::InvalidArgument { op: "concat_cols", msg: "no parts".into() });
        }
        let m = self.d2("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.d2("concat_cols", p)?;
            if pm != m {
                return Err(shape_err("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.val(p);
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(Tensor::from_vec(out, &[m, n])?, ng, Back::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(KernelError::InvalidArgument { op: "concat_rows", msg: "no parts".into() });
        }
        let n = self.d2("concat_rows", parts[0])?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.d2("concat_rows", p)?;
            if pn != n {
                return Err(shape_err("concat_rows", format!("column counts {n} vs {pn}")));
            }
            out.extend_from_slice(self.val(p));
            m += pm;
        }
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(Tensor::from_vec(out, &[m, n])?, ng, Back::ConcatRows { parts: parts.to_vec() }))
    }

    /// `out[i] = a[idx[i]]`, row gather.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<u32>>) -> Result<Var> {
        let (m, n) = self.d2("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= m) {
            return Err(KernelError::InvalidArgument {
                op: "gather_rows",
                msg: format!("index {bad} out of {m} rows"),
            });
        }
        let av = self.val(a);
        let mut out = vec![T::zero(); idx.len() * n];
        for (i, &r) in idx.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&av[r as usize * n..(r as usize + 1) * n]);
        }
        let rows = idx.len();
        let ng = self.needs_grad(a);
        Ok(self.push(Tensor::from_vec(out, &[rows, n])?, ng, Back::GatherRows { a, idx }))
    }

    /// `out[r] = sum over i with idx[i] == r of a[i]`, into `out_rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<Vec<u32>>, out_rows: usize) -> Result<Var> {
        let (m, n) = self.d2("scatter_add_rows", a)?;
        if idx.len() != m {
            return Err(shape_err("scatter_add_rows", format!("{m} rows vs {} indices", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= out_rows) {
            return Err(KernelError::InvalidArgument {
                op: "scatter_add_rows",
                msg: format!("index {bad} out of {out_rows} rows"),
            });
        }
        let av = self.val(a);
        let mut out = vec![T::zero(); out_rows * n];
        for (i, &r) in idx.iter().enumerate() {
            let dst = &mut out[r as usize * n..(r as usize + 1) * n];
            let src = &av[i * n..(i + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + *s;
            }
        }
        let ng = self.needs_grad(a);
        Ok(self.push(Tensor::from_vec(out, &[out_rows, n])?, ng, Back::ScatterAddRows { a, idx }))
    }

    /// `out[p] = sum over j of w[p*k+j] * table[idx[p*k+j]]` — the shared
    /// kernel behind bilinear/trilinear interpolation of learnable grids.
    pub fn weighted_gather_rows(
        &mut self,
        table: Var,
        idx: Arc<Vec<u32>>,
        w: Arc<Vec<T>>,
        k: usize,
    ) -> Result<Var> {
        let (rows, n) = self.d2("weighted_gather_rows", table)?;
        if idx.len() != w.len() || k == 0 || idx.len() % k != 0 {
            return Err(shape_err(
                "weighted_gather_rows",
                format!("{} indices, {} weights, k={k}", idx.len(), w.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= rows) {
            return Err(KernelError::InvalidArgument {
                op: "weighted_gather_rows",
                msg: format!("index {bad} out of {rows} rows"),
            });
        }
        let p = idx.len() / k;
        let tv = self.val(table);
        let mut out = vec![T::zero(); p * n];
        par::for_chunks_mut(&mut out, 256 * n.max(1), |blk, c| {
            let p0 = blk * 256;
            for (local, orow) in c.chunks_mut(n).enumerate() {
                let pi = p0 + local;
                for j in 0..k {
                    let wj = w[pi * k + j];
                    let row = idx[pi * k + j] as usize * n;
                    for (o, &t) in orow.iter_mut().zip(&tv[row..row + n]) {
                        *o = *o + wj * t;
                    }
                }
            }
        });
        let ng = self.needs_grad(table);
        Ok(self.push(Tensor::from_vec(out, &[p, n])?, ng, Back::WeightedGatherRows { table, idx, w, k }))
    }

    // ─── fused linear ────────────────────────────────────────────────

    /// `act(sum over terms of x[gather] . W^T + bias)`. Stores only the
    /// output (plus pre-activations for sine), which keeps deep edge-level
    /// pipelines within memory budget.
    pub fn linear_combo(&mut self, terms: &[ComboTerm], bias: Option<Var>, act: Activation) -> Result<Var> {
        if terms.is_empty() {
            return Err(KernelError::InvalidArgument { op: "linear_combo", msg: "no terms".into() });
        }
        let mut m = None;
        let h = self.d2("linear_combo", terms[0].weight)?.0;
        for t in terms {
            let (xm, xn) = self.d2("linear_combo", t.x)?;
            let (wh, wn) = self.d2("linear_combo", t.weight)?;
            let rows = t.gather.as_ref().map(|g| g.len()).unwrap_or(xm);
            if let Some(g) = &t.gather {
                if let Some(&bad) = g.iter().find(|&&i| i as usize >= xm) {
                    return Err(KernelError::InvalidArgument {
                        op: "linear_combo",
                        msg: format!("gather index {bad} out of {xm} rows"),
                    });
                }
            }
            if wh != h || wn != xn {
                return Err(shape_err("linear_combo", format!("weight [{wh},{wn}] on input [.,{xn}], want [{h},{xn}]")));
            }
            match m {
                None => m = Some(rows),
                Some(prev) if prev != rows => {
                    return Err(shape_err("linear_combo", format!("term row counts {prev} vs {rows}")))
                }
                _ => {}
            }
        }
        let m = m.unwrap();
        if let Some(b) = bias {
            let bn = self.val(b).len();
            if bn != h {
                return Err(shape_err("linear_combo", format!("bias [{bn}] vs width {h}")));
            }
        }

        let mut out = vec![T::zero(); m * h];
        let mut scratch: Vec<T> = Vec::new();
        for (ti, t) in terms.iter().enumerate() {
            let (xm, xn) = self.d2("linear_combo", t.x)?;
            let _ = xm;
            let beta = if ti == 0 { T::zero() } else { T::one() };
            let xv = self.val(t.x);
            let wv = self.val(t.weight);
            match &t.gather {
                None => gemm(T::one(), xv, (m, xn), false, wv, (h, xn), true, beta, &mut out),
                Some(g) => {
                    scratch.clear();
                    scratch.reserve(m * xn);
                    for &r in g.iter() {
                        scratch.extend_from_slice(&xv[r as usize * xn..(r as usize + 1) * xn]);
                    }
                    gemm(T::one(), &scratch, (m, xn), false, wv, (h, xn), true, beta, &mut out);
                }
            }
        }
        if let Some(b) = bias {
            let bv = self.val(b);
            for row in out.chunks_mut(h) {
                for (o, &x) in row.iter_mut().zip(bv) {
                    *o = *o + x;
                }
            }
        }
        let pre = match act {
            Activation::Sine => Some(Arc::new(out.clone())),
            _ => None,
        };
        match act {
            Activation::None => {}
            Activation::Relu => out.iter_mut().for_each(|x| {
                if *x < T::zero() {
                    *x = T::zero()
                }
            }),
            Activation::Sine => out.iter_mut().for_each(|x| *x = x.sin()),
        }
        let ng = terms.iter().any(|t| self.needs_grad(t.x) || self.needs_grad(t.weight))
            || bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        Ok(self.push(
            Tensor::from_vec(out, &[m, h])?,
            ng,
            Back::LinearCombo { terms: terms.to_vec(), bias, act, pre },
        ))
    }

    /// Plain fused linear layer `act(x . W^T + b)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, act: Activation) -> Result<Var> {
        self.linear_combo(&[ComboTerm { x, gather: None, weight: w }], b, act)
    }

    // ─── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits each recorded op exactly
    /// once, in reverse recording order.
    pub fn backward(&mut self, loss: Var) -> Result<GradStore<T>> {
        let lt = &self.slots[loss.0].value;
        if !lt.is_scalar() {
            return Err(KernelError::NonScalarLoss { elems: lt.numel() });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.slots.len()];
        if !self.slots[loss.0].needs_grad {
            return Ok(GradStore { grads: vec![None; self.slots.len()] });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if matches!(self.slots[i].back, Back::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.dispatch(i, &dy, &mut grads);
        }

        let store = grads
            .iter_mut()
            .enumerate()
            .map(|(i, g)| {
                g.take().map(|v| Tensor::from_vec(v, self.slots[i].value.shape()).expect("grad shape"))
            })
            .collect();
        Ok(GradStore { grads: store })
    }

    fn val(&self, v: Var) -> &[T] {
        self.slots[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.slots[v.0].value.shape()
    }

    fn ng2(&self, a: Var, b: Var) -> bool {
        self.needs_grad(a) || self.needs_grad(b)
    }

    fn dims2_of(&self, v: Var) -> (usize, usize) {
        self.slots[v.0].value.dims2().expect("rank <= 2 enforced at construction")
    }

    fn dispatch(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        // Fetch-or-alloc a gradient accumulator for a slot that needs grad.
        macro_rules! gbuf {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![T::zero(); self.slots[$v.0].value.numel()])
            };
        }
        macro_rules! wants {
            ($v:expr) => {
                self.slots[$v.0].needs_grad
            };
        }
        match &self.slots[i].back {
            Back::Leaf => {}
            Back::Matmul { a, b } => {
                let (m, k) = self.dims2_of(*a);
                let (_, n) = self.dims2_of(*b);
                if wants!(a) {
                    let bv = self.val(*b);
                    gemm(T::one(), dy, (m, n), false, bv, (k, n), true, T::one(), gbuf!(a));
                }
                if wants!(b) {
                    let av = self.val(*a);
                    gemm(T::one(), av, (m, k), true, dy, (m, n), false, T::one(), gbuf!(b));
                }
            }
            Back::MatmulNT { a, b } => {
                let (m, k) = self.dims2_of(*a);
                let (n, _) = self.dims2_of(*b);
                if wants!(a) {
                    let bv = self.val(*b);
                    gemm(T::one(), dy, (m, n), false, bv, (n, k), false, T::one(), gbuf!(a));
                }
                if wants!(b) {
                    let av = self.val(*a);
                    gemm(T::one(), dy, (m, n), true, av, (m, k), false, T::one(), gbuf!(b));
                }
            }
            Back::Add { a, b } => {
                if wants!(a) {
                    acc(gbuf!(a), dy);
                }
                if wants!(b) {
                    acc(gbuf!(b), dy);
                }
            }
            Back::Sub { a, b } => {
                if wants!(a) {
                    acc(gbuf!(a), dy);
                }
                if wants!(b) {
                    let g = gbuf!(b);
                    for (o, &d) in g.iter_mut().zip(dy) {
                        *o = *o - d;
                    }
                }
            }
            Back::Mul { a, b } => {
                if wants!(a) {
                    let bv = self.val(*b);
                    acc_mul(gbuf!(a), dy, bv);
                }
                if wants!(b) {
                    let av = self.val(*a);
                    acc_mul(gbuf!(b), dy, av);
                }
            }
            Back::MulConst { a, c } => {
                if wants!(a) {
                    acc_mul(gbuf!(a), dy, c);
                }
            }
            Back::Affine { a, mul } => {
                if wants!(a) {
                    let g = gbuf!(a);
                    for (o, &d) in g.iter_mut().zip(dy) {
                        *o = *o + *mul * d;
                    }
                }
            }
            Back::Elem { a, kind } => {
                if wants!(a) {
                    let x = self.val(*a);
                    let y = self.val(Var(i));
                    let g = gbuf!(a);
                    let half = T::from_f64(0.5);
                    for j in 0..g.len() {
                        let d = match kind {
                            Unary::Relu => {
                                if x[j] > T::zero() {
                                    dy[j]
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sine => dy[j] * x[j].cos(),
                            Unary::Sigmoid => dy[j] * y[j] * (T::one() - y[j]),
                            Unary::Softplus => dy[j] / (T::one() + (-x[j]).exp()),
                            Unary::Exp => dy[j] * y[j],
                            Unary::Log => dy[j] / x[j],
                            Unary::Sqrt => dy[j] * half / y[j],
                            Unary::Recip => -dy[j] * y[j] * y[j],
                            Unary::Square => dy[j] * (x[j] + x[j]),
                        };
                        g[j] = g[j] + d;
                    }
                }
            }
            Back::SmoothL1 { a, target } => {
                if wants!(a) {
                    let x = self.val(*a);
                    let g = gbuf!(a);
                    for j in 0..g.len() {
                        let d = (x[j] - target[j]).max(-T::one()).min(T::one());
                        g[j] = g[j] + dy[j] * d;
                    }
                }
            }
            Back::AddRow { a, b } => {
                let (m, n) = self.dims2_of(*a);
                if wants!(a) {
                    acc(gbuf!(a), dy);
                }
                if wants!(b) {
                    let g = gbuf!(b);
                    for r in 0..m {
                        for j in 0..n {
                            g[j] = g[j] + dy[r * n + j];
                        }
                    }
                }
            }
            Back::MulRow { a, b } => {
                let (m, n) = self.dims2_of(*a);
                let (av, bv) = (self.val(*a), self.val(*b));
                if wants!(a) {
                    let g = gbuf!(a);
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + dy[r * n + j] * bv[j];
                        }
                    }
                }
                if wants!(b) {
                    let g = gbuf!(b);
                    for r in 0..m {
                        for j in 0..n {
                            g[j] = g[j] + dy[r * n + j] * av[r * n + j];
                        }
                    }
                }
            }
            Back::AddCol { a, b } => {
                let (m, n) = self.dims2_of(*a);
                if wants!(a) {
                    acc(gbuf!(a), dy);
                }
                if wants!(b) {
                    let g = gbuf!(b);
                    for r in 0..m {
                        g[r] = g[r] + dy[r * n..(r + 1) * n].iter().copied().sum();
                    }
                }
            }
            Back::MulCol { a, b } => {
                let (m, n) = self.dims2_of(*a);
                let (av, bv) = (self.val(*a), self.val(*b));
                if wants!(a) {
                    let g = gbuf!(a);
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + dy[r * n + j] * bv[r];
                        }
                    }
                }
                if wants!(b) {
                    let g = gbuf!(b);
                    for r in 0..m {
                        let mut s = T::zero();
                        for j in 0..n {
                            s = s + dy[r * n + j] * av[r * n + j];
                        }
                        g[r] = g[r] + s;
                    }
                }
            }
            Back::AddScalar { a, s } => {
                if wants!(a) {
                    acc(gbuf!(a), dy);
                }
                if wants!(s) {
                    let g = gbuf!(s);
                    g[0] = g[0] + dy.iter().copied().sum();
                }
            }
            Back::MulScalar { a, s } => {
                let sv = self.scalar_value(*s);
                if wants!(a) {
                    let g = gbuf!(a);
                    for (o, &d) in g.iter_mut().zip(dy) {
                        *o = *o + sv * d;
                    }
                }
                if wants!(s) {
                    let av = self.val(*a);
                    let g = gbuf!(s);
                    let mut acc = T::zero();
                    for (&d, &x) in dy.iter().zip(av) {
                        acc = acc + d * x;
                    }
                    g[0] = g[0] + acc;
                }
            }
            Back::SumAll { a } => {
                if wants!(a) {
                    let g = gbuf!(a);
                    let d = dy[0];
                    for o in g.iter_mut() {
                        *o = *o + d;
                    }
                }
            }
            Back::MeanAll { a } => {
                if wants!(a) {
                    let g = gbuf!(a);
                    let d = dy[0] / T::from_f64(g.len() as f64);
                    for o in g.iter_mut() {
                        *o = *o + d;
                    }
                }
            }
            Back::SumAxis0 { a } => {
                if wants!(a) {
                    let (m, n) = self.dims2_of(*a);
                    let g = gbuf!(a);
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + dy[j];
                        }
                    }
                }
            }
            Back::MeanAxis0 { a } => {
                if wants!(a) {
                    let (m, n) = self.dims2_of(*a);
                    let inv = T::one() / T::from_f64(m as f64);
                    let g = gbuf!(a);
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + dy[j] * inv;
                        }
                    }
                }
            }
            Back::SumAxis1 { a } => {
                if wants!(a) {
                    let (m, n) = self.dims2_of(*a);
                    let g = gbuf!(a);
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + dy[r];
                        }
                    }
                }
            }
            Back::SumGroupRows { a, group } => {
                if wants!(a) {
                    let (m, n) = self.dims2_of(*a);
                    let g = gbuf!(a);
                    for r in 0..m {
                        let src = (r / group) * n;
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + dy[src + j];
                        }
                    }
                }
            }
            Back::CumsumExclusive { a } => {
                if wants!(a) {
                    let (m, n) = self.dims2_of(*a);
                    let g = gbuf!(a);
                    for r in 0..m {
                        // dx[j] = sum of dy[j'] for j' > j
                        let mut suffix = T::zero();
                        for j in (0..n).rev() {
                            g[r * n + j] = g[r * n + j] + suffix;
                            suffix = suffix + dy[r * n + j];
                        }
                    }
                }
            }
            Back::Reshape { a } => {
                if wants!(a) {
                    acc(gbuf!(a), dy);
                }
            }
            Back::SliceCols { a, start } => {
                if wants!(a) {
                    let (m, n) = self.dims2_of(*a);
                    let w = dy.len() / m;
                    let g = gbuf!(a);
                    for r in 0..m {
                        for j in 0..w {
                            g[r * n + start + j] = g[r * n + start + j] + dy[r * w + j];
                        }
                    }
                }
            }
            Back::SliceRows { a, start } => {
                if wants!(a) {
                    let (_, n) = self.dims2_of(*a);
                    let g = gbuf!(a);
                    acc(&mut g[start * n..start * n + dy.len()], dy);
                }
            }
            Back::ConcatCols { parts } => {
                let n: usize = parts.iter().map(|&p| self.dims2_of(p).1).sum();
                let m = dy.len() / n;
                let mut off = 0;
                for &p in parts {
                    let w = self.dims2_of(p).1;
                    if wants!(p) {
                        let g = gbuf!(p);
                        for r in 0..m {
                            for j in 0..w {
                                g[r * w + j] = g[r * w + j] + dy[r * n + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Back::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let (pm, pn) = self.dims2_of(p);
                    if wants!(p) {
                        acc(gbuf!(p), &dy[off..off + pm * pn]);
                    }
                    off += pm * pn;
                }
            }
            Back::GatherRows { a, idx } => {
                if wants!(a) {
                    let (_, n) = self.dims2_of(*a);
                    let g = gbuf!(a);
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = src as usize * n;
                        for j in 0..n {
                            g[dst + j] = g[dst + j] + dy[r * n + j];
                        }
                    }
                }
            }
            Back::ScatterAddRows { a, idx } => {
                if wants!(a) {
                    let (_, n) = self.dims2_of(*a);
                    let g = gbuf!(a);
                    for (r, &dst) in idx.iter().enumerate() {
                        let src = dst as usize * n;
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + dy[src + j];
                        }
                    }
                }
            }
            Back::WeightedGatherRows { table, idx, w, k } => {
                if wants!(table) {
                    let (_, n) = self.dims2_of(*table);
                    let p = idx.len() / k;
                    let g = gbuf!(table);
                    for pi in 0..p {
                        for j in 0..*k {
                            let wj = w[pi * k + j];
                            let dst = idx[pi * k + j] as usize * n;
                            for c in 0..n {
                                g[dst + c] = g[dst + c] + wj * dy[pi * n + c];
                            }
                        }
                    }
                }
            }
            Back::LinearCombo { terms, bias, act, pre } => {
                let h = self.dims2_of(Var(i)).1;
                let m = dy.len() / h;
                // Gradient at the pre-activation.
                let dpre: Vec<T> = match act {
                    Activation::None => dy.to_vec(),
                    Activation::Relu => {
                        let y = self.val(Var(i));
                        dy.iter().zip(y).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect()
                    }
                    Activation::Sine => {
                        let p = pre.as_ref().expect("sine pre-activations");
                        dy.iter().zip(p.iter()).map(|(&d, &x)| d * x.cos()).collect()
                    }
                };
                if let Some(b) = bias {
                    if wants!(b) {
                        let g = gbuf!(b);
                        for r in 0..m {
                            for j in 0..h {
                                g[j] = g[j] + dpre[r * h + j];
                            }
                        }
                    }
                }
                let mut scratch: Vec<T> = Vec::new();
                for t in terms {
                    let (xm, xn) = self.dims2_of(t.x);
                    let xv = self.val(t.x);
                    let gathered: &[T] = match &t.gather {
                        None => xv,
                        Some(gi) => {
                            scratch.clear();
                            scratch.reserve(m * xn);
                            for &r in gi.iter() {
                                scratch.extend_from_slice(&xv[r as usize * xn..(r as usize + 1) * xn]);
                            }
                            &scratch
                        }
                    };
                    if wants!((t.weight)) {
                        // dW += dpre^T . x_gathered
                        gemm(T::one(), &dpre, (m, h), true, gathered, (m, xn), false, T::one(), gbuf!((t.weight)));
                    }
                    if wants!((t.x)) {
                        let wv = self.val(t.weight);
                        match &t.gather {
                            None => {
                                gemm(T::one(), &dpre, (m, h), false, wv, (h, xn), false, T::one(), gbuf!((t.x)));
                            }
                            Some(gi) => {
                                let mut tmp = vec![T::zero(); m * xn];
                                gemm(T::one(), &dpre, (m, h), false, wv, (h, xn), false, T::zero(), &mut tmp);
                                let g = gbuf!((t.x));
                                for (r, &dst) in gi.iter().enumerate() {
                                    let d = dst as usize * xn;
                                    for j in 0..xn {
                                        g[d + j] = g[d + j] + tmp[r * xn + j];
                                    }
                                }
                            }
                        }
                    }
                    let _ = xm;
                }
            }
        }
    }
}

fn acc<T: Real>(g: &mut [T], d: &[T]) {
    for (o, &x) in g.iter_mut().zip(d) {
        *o = *o + x;
    }
}

fn acc_mul<T: Real>(g: &mut [T], d: &[T], f: &[T]) {
    for i in 0..g.len() {
        g[i] = g[i] + d[i] * f[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn test_matmul_small() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1.0, 2.0], &[1, 2]));
        let b = g.constant(t(&[3.0, 4.0], &[2, 1]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn test_matmul_shape_mismatch_names_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1.0, 2.0], &[1, 2]));
        let b = g.constant(t(&[3.0, 4.0, 5.0], &[3, 1]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains('2') && err.contains('3'), "{err}");
    }

    #[test]
    fn test_relu_and_sine_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[-1.0, 0.0, 2.0], &[1, 3]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[0.0], &[1, 1]));
        let s = g.sine(z);
        assert_eq!(g.value(s).data(), &[0.0]);
    }

    #[test]
    fn test_backward_square() {
        // loss = x^2 at x = 3 -> grad 6
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0_f64), true);
        let y = g.square(x);
        let mut grads = g.backward(y).unwrap();
        assert_eq!(grads.take(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn test_backward_sum_sigmoid_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[1, 4]), true);
        let s = g.sigmoid(x);
        let loss = g.sum_all(s);
        let mut grads = g.backward(loss).unwrap();
        for &v in grads.take(x).unwrap().data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn test_backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[1, 4]), true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(KernelError::NonScalarLoss { elems: 4 })));
    }

    #[test]
    fn test_shared_subexpression_accumulates() {
        // loss = x*x + x  => dloss/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.5_f64), true);
        let sq = g.mul(x, x).unwrap();
        let sum = g.add(sq, x).unwrap();
        let mut grads = g.backward(sum).unwrap();
        assert!((grads.take(x).unwrap().data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn test_cumsum_exclusive() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1.0, 2.0, 3.0, 4.0], &[1, 4]));
        let y = g.cumsum_exclusive(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 3.0, 6.0]);
    }

    #[test]
    fn test_no_grad_inputs_record_nothing() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1.0, 2.0], &[1, 2]));
        let b = g.constant(t(&[3.0, 4.0], &[1, 2]));
        let c = g.add(a, b).unwrap();
        assert!(!g.needs_grad(c));
    }

    #[test]
    fn test_gather_scatter_roundtrip_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]));
        let idx = Arc::new(vec![2u32, 0, 2]);
        let y = g.gather_rows(x, idx.clone()).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let z = g.scatter_add_rows(y, idx, 3).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 2.0, 0.0, 0.0, 10.0, 12.0]);
    }
}
