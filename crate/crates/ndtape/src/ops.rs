//! Elementwise, matrix and reduction primitives.

use crate::error::{invalid, mismatch, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_C: f32 = 0.044_715;

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return mismatch(op, a.shape(), b.shape());
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked by caller")
}

/// `C = alpha * op(A) * op(B)` with row-major operands, accumulated into `c`
/// when `beta` is 1. `ta`/`tb` transpose the (row-major) stored operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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

impl Var {
    fn unary(
        &self,
        value: Tensor,
        dfdx: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Result<Var> {
        let x = self.value_rc();
        let y = std::rc::Rc::new(value.clone());
        let y2 = y.clone();
        self.tape().record(&[self], value, move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y2.data())
                .map(|((&g, &x), &y)| g * dfdx(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data).unwrap())]
        })
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        same_shape("add", self, other)?;
        let v = zip_map(self.value(), other.value(), |a, b| a + b);
        self.tape()
            .record(&[self, other], v, |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        same_shape("sub", self, other)?;
        let v = zip_map(self.value(), other.value(), |a, b| a - b);
        self.tape()
            .record(&[self, other], v, |g| vec![Some(g.clone()), Some(g.map(|x| -x))])
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        same_shape("mul", self, other)?;
        let v = zip_map(self.value(), other.value(), |a, b| a * b);
        let (a, b) = (self.value_rc(), other.value_rc());
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        self.tape().record(&[self, other], v, move |g| {
            vec![
                ra.then(|| zip_map(g, &b, |g, b| g * b)),
                rb.then(|| zip_map(g, &a, |g, a| g * a)),
            ]
        })
    }

    /// Multiplies by a constant tensor of the same shape.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var> {
        if self.shape() != c.shape() {
            return mismatch("mul_const", self.shape(), c.shape());
        }
        let v = zip_map(self.value(), c, |a, b| a * b);
        let c = c.clone();
        self.tape()
            .record(&[self], v, move |g| vec![Some(zip_map(g, &c, |g, c| g * c))])
    }

    pub fn scale(&self, s: f32) -> Result<Var> {
        let v = self.value().map(|x| x * s);
        self.tape().record(&[self], v, move |g| vec![Some(g.map(|x| x * s))])
    }

    pub fn add_scalar(&self, s: f32) -> Result<Var> {
        let v = self.value().map(|x| x + s);
        self.tape().record(&[self], v, |g| vec![Some(g.clone())])
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&self, c: &Tensor) -> Result<Var> {
        if self.shape() != c.shape() {
            return mismatch("add_const", self.shape(), c.shape());
        }
        let v = zip_map(self.value(), c, |a, b| a + b);
        self.tape().record(&[self], v, |g| vec![Some(g.clone())])
    }

    /// Multiplies every element by a scalar variable (shape `[]` or `[1]`).
    pub fn mul_scalar_var(&self, s: &Var) -> Result<Var> {
        if s.value().len() != 1 {
            return mismatch("mul_scalar_var", self.shape(), s.shape());
        }
        let sv = s.item();
        let v = self.value().map(|x| x * sv);
        let x = self.value_rc();
        let sshape = s.shape().to_vec();
        self.tape().record(&[self, s], v, move |g| {
            let ds: f64 = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &x)| g as f64 * x as f64)
                .sum();
            vec![
                Some(g.map(|g| g * sv)),
                Some(Tensor::new(&sshape, vec![ds as f32]).unwrap()),
            ]
        })
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Result<Var> {
        let v = self.value().map(|x| x * x);
        self.unary(v, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Result<Var> {
        let v = self.value().map(f32::exp);
        self.unary(v, |_, y| y)
    }

    pub fn relu(&self) -> Result<Var> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var> {
        let v = self.value().map(gelu);
        self.unary(v, |x, _| gelu_grad(x))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Result<Var> {
        let v = self.value().map(softplus);
        self.unary(v, |x, _| sigmoid(x))
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Result<Var> {
        if lo > hi {
            return invalid("clamp", format!("empty range [{lo}, {hi}]"));
        }
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
    }

    /// Sum of all elements (64-bit accumulation) as a scalar.
    pub fn sum(&self) -> Result<Var> {
        let s: f64 = self.value().sum_f64();
        let shape = self.shape().to_vec();
        self.tape()
            .record(&[self], Tensor::scalar(s as f32), move |g| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().len().max(1) as f32;
        self.sum()?.scale(1.0 / n)
    }

    /// `sum(self * c)` against a constant: the hook for injecting externally
    /// computed adjoints (e.g. renderer gradients) into the tape.
    pub fn dot_const(&self, c: &Tensor) -> Result<Var> {
        if self.shape() != c.shape() {
            return mismatch("dot_const", self.shape(), c.shape());
        }
        let s: f64 = self
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let c = c.clone();
        self.tape().record(&[self], Tensor::scalar(s as f32), move |g| {
            let gi = g.item();
            vec![Some(c.map(|c| c * gi))]
        })
    }

    /// Squared L2 distance to a constant target, as a scalar.
    pub fn sq_dist(&self, target: &Tensor) -> Result<Var> {
        if self.shape() != target.shape() {
            return mismatch("sq_dist", self.shape(), target.shape());
        }
        let diff = zip_map(self.value(), target, |a, b| a - b);
        let s: f64 = diff.data().iter().map(|&d| d as f64 * d as f64).sum();
        self.tape().record(&[self], Tensor::scalar(s as f32), move |g| {
            let gi = 2.0 * g.item();
            vec![Some(diff.map(|d| d * gi))]
        })
    }

    /// Mean squared error against a constant target, as a scalar.
    pub fn mse(&self, target: &Tensor) -> Result<Var> {
        let n = self.value().len().max(1) as f32;
        self.sq_dist(target)?.scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().clone().reshape(shape)?;
        let orig = self.shape().to_vec();
        self.tape().record(&[self], v, move |g| {
            vec![Some(g.clone().reshape(&orig).unwrap())]
        })
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return mismatch("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        gemm(m, k, n, self.data(), false, other.data(), false, &mut out, 0.0);
        let (a, b) = (self.value_rc(), other.value_rc());
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        self.tape().record(
            &[self, other],
            Tensor::new(&[m, n], out).unwrap(),
            move |g| {
                let ga = ra.then(|| {
                    let mut d = vec![0.0f32; m * k];
                    gemm(m, n, k, g.data(), false, b.data(), true, &mut d, 0.0);
                    Tensor::new(&[m, k], d).unwrap()
                });
                let gb = rb.then(|| {
                    let mut d = vec![0.0f32; k * n];
                    gemm(k, m, n, a.data(), true, g.data(), false, &mut d, 0.0);
                    Tensor::new(&[k, n], d).unwrap()
                });
                vec![ga, gb]
            },
        )
    }

    /// `[N,M] + [M]`, broadcasting the vector over rows.
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return mismatch("add_row", s, bias.shape());
        }
        let m = s[1];
        let mut v = self.value().clone();
        for row in v.data_mut().chunks_exact_mut(m) {
            for (x, b) in row.iter_mut().zip(bias.data()) {
                *x += b;
            }
        }
        self.tape().record(&[self, bias], v, move |g| {
            let mut gb = vec![0.0f64; m];
            for row in g.data().chunks_exact(m) {
                for (acc, &x) in gb.iter_mut().zip(row) {
                    *acc += x as f64;
                }
            }
            let gb = gb.into_iter().map(|x| x as f32).collect();
            vec![Some(g.clone()), Some(Tensor::new(&[m], gb).unwrap())]
        })
    }

    /// `[B,C,H,W] + [B,C]`, broadcasting over the spatial extent.
    pub fn add_channel(&self, bias: &Var) -> Result<Var> {
        let s = self.shape();
        if s.len() != 4 || bias.shape() != [s[0], s[1]] {
            return mismatch("add_channel", s, bias.shape());
        }
        let hw = s[2] * s[3];
        let bc = s[0] * s[1];
        let mut v = self.value().clone();
        for (plane, b) in v.data_mut().chunks_exact_mut(hw).zip(bias.data()) {
            plane.iter_mut().for_each(|x| *x += b);
        }
        let bshape = bias.shape().to_vec();
        self.tape().record(&[self, bias], v, move |g| {
            let gb: Vec<f32> = g
                .data()
                .chunks_exact(hw)
                .map(|p| p.iter().map(|&x| x as f64).sum::<f64>() as f32)
                .collect();
            debug_assert_eq!(gb.len(), bc);
            vec![Some(g.clone()), Some(Tensor::new(&bshape, gb).unwrap())]
        })
    }
}

/// Tanh-form GELU, evaluated as `x * sigmoid(2u)` (one exponential).
pub fn gelu(x: f32) -> f32 {
    gelu_with_grad(x).0
}

pub fn gelu_grad(x: f32) -> f32 {
    gelu_with_grad(x).1
}

#[inline]
pub fn gelu_with_grad(x: f32) -> (f32, f32) {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    if u < -40.0 {
        // The sigmoid would underflow into subnormals, which are very slow.
        return (0.0, 0.0);
    }
    let s = 1.0 / (1.0 + fast_exp(-2.0 * u));
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    (x * s, s + 2.0 * x * s * (1.0 - s) * du)
}

/// Branch-free `exp` (relative error about 2e-7) for activation kernels.
/// Arguments are clamped to `[-87, 88]`.
#[inline(always)]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2_E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0;
    let x = x.max(-87.0).min(88.0);
    let t = x * LOG2_E + ROUND;
    let n = t - ROUND;
    let f = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + f * (1.0
            + f * (0.5
                + f * (1.0 / 6.0 + f * (1.0 / 24.0 + f * (1.0 / 120.0 + f * (1.0 / 720.0))))));
    // The low mantissa bits of `t` hold `n` in two's complement.
    let e = t.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127) << 23;
    p * f32::from_bits(e)
}

pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
