//! Value-level kernels shared by the tape and by direct callers.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::numkernel::Tensor;
use crate::scalar::Scalar;

/// Matrix product of `a [m x k]` and `b [k x n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(dim_err!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a.data(), false, b.data(), false, T::zero(), &mut out);
    Tensor::matrix(m, n, out)
}

fn check_finite<T: Scalar>(x: &[T], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite input to {what}")))
    }
}

/// Max-shifted softmax of one row, written into `out`.
pub(crate) fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn logsumexp_slice<T: Scalar>(row: &[T]) -> T {
    if row.len() == 1 {
        return row[0];
    }
    let top = argmax(row);
    let max = row[top];
    // the max term contributes exactly 1; ln_1p keeps tiny remainders
    let rest: T = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + rest.ln_1p()
}

/// Softmax over the last dimension.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.cols() == 0 {
        return Err(dim_err!("softmax over an empty dimension"));
    }
    check_finite(logits.data(), "softmax")?;
    let mut out = logits.clone();
    let c = logits.cols();
    for r in 0..logits.rows() {
        softmax_into(logits.row(r), &mut out.data_mut()[r * c..(r + 1) * c]);
    }
    Ok(out)
}

/// `log sum exp` of a vector.
pub fn logsumexp<T: Scalar>(logits: &[T]) -> Result<T> {
    if logits.is_empty() {
        return Err(dim_err!("logsumexp of an empty vector"));
    }
    check_finite(logits, "logsumexp")?;
    Ok(logsumexp_slice(logits))
}

/// Mean token cross-entropy of `logits [T x V]` against `targets`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    if logits.rows() != targets.len() {
        return Err(dim_err!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        ));
    }
    if targets.is_empty() {
        return Err(dim_err!("cross-entropy over zero tokens"));
    }
    check_finite(logits.data(), "cross_entropy")?;
    let v = logits.cols();
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Index(format!("target {t} outside vocabulary of {v}")));
        }
        let row = logits.row(r);
        let top = argmax(row);
        let rest: T = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .map(|(_, &v)| (v - row[top]).exp())
            .sum();
        // -log softmax(row)[t] without cancelling against the max
        total += (row[top] - row[t]) + rest.ln_1p();
    }
    Ok(total / T::lit(targets.len() as f64))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries in descending order; lowest index wins ties.
pub fn top_k<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..k.min(values.len()) {
        let mut best: Option<usize> = None;
        for (i, &v) in values.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            match best {
                Some(b) if v <= values[b] => {}
                _ => best = Some(i),
            }
        }
        chosen.extend(best);
    }
    chosen
}

/// Expert / encoder nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        x * self.gate(x)
    }

    /// Multiplier `s(x)` with `apply(x) = x * s(x)`: the unit step for ReLU,
    /// `0.5 * (1 + tanh(u))` for the tanh-approximated GELU.
    pub fn gate<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                // written as a logistic, which is cheaper than tanh
                let u = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
                T::one() / (T::one() + (-(u + u)).exp())
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        self.derivative_from_gate(x, self.gate(x))
    }

    /// Derivative at `x` given the already computed `gate(x)`.
    pub fn derivative_from_gate<T: Scalar>(self, x: T, s: T) -> T {
        match self {
            Activation::Relu => s,
            Activation::Gelu => {
                let (c, a) = (T::lit(SQRT_2_OVER_PI), T::lit(GELU_CUBIC));
                s + T::lit(2.0) * x * s * (T::one() - s) * c * (T::one() + T::lit(3.0) * a * x * x)
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}
