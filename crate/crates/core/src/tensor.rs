//! Dense tensor values: shape, row-major f64 storage, optional gradient buffer.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Dense n-dimensional array of f64, rank 0 through 4, row-major.
///
/// `grad`, when present, always has the same element count as `data`; it is
/// populated by [`crate::graph::GradGraph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::InvalidArgument {
                op: "Tensor::from_vec",
                msg: format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        validate_shape(shape).expect("invalid shape");
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a rank-0 / single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Error if any element is NaN or infinite. `context` names the
    /// checkpoint boundary (layer, loss term) for the diagnostic.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: context.to_string(),
                    detail: format!("element {} of {:?} is {}", i, self.shape, v),
                });
            }
        }
        Ok(())
    }

    /// Gradient reinterpreted as a tensor of the same shape.
    pub fn grad_tensor(&self) -> Option<Tensor> {
        self.grad.as_ref().map(|g| Tensor {
            shape: self.shape.clone(),
            data: g.clone(),
            requires_grad: false,
            grad: None,
        })
    }
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::InvalidArgument {
            op: "shape",
            msg: format!("rank {} exceeds maximum {}", shape.len(), MAX_RANK),
        });
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidArgument {
            op: "shape",
            msg: format!("zero extent in shape {:?}", shape),
        });
    }
    Ok(())
}

/// Multiply by 2^k exactly (powers of two are exact in f64). Splits the
/// scaling when 2^k itself is not representable.
fn scale_pow2(x: f64, k: i32) -> f64 {
    if (-1000..=1000).contains(&k) {
        x * pow2(k)
    } else {
        let half = k / 2;
        x * pow2(half) * pow2(k - half)
    }
}

fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((1023 + k) as u64) << 52)
}

/// Order-invariant sum of the terms in `buf`.
///
/// Every term is scaled by a power of two derived from the largest magnitude,
/// rounded to an integer and accumulated exactly in i64. Both the per-term
/// rounding and the integer sum depend only on the multiset of values, so any
/// permutation of `buf` produces the bitwise-identical result. The retained
/// precision is 54+ bits below the largest term.
pub fn stable_sum(buf: &[f64]) -> f64 {
    let mut max_abs = 0.0f64;
    for &t in buf {
        max_abs = max_abs.max(t.abs());
    }
    stable_sum_with_max(buf, max_abs)
}

/// [`stable_sum`] with the maximum magnitude already known.
pub fn stable_sum_with_max(buf: &[f64], max_abs: f64) -> f64 {
    if max_abs == 0.0 || buf.is_empty() {
        return 0.0;
    }
    // guard bits so that len terms cannot overflow the i64 accumulator
    let guard = (usize::BITS - (buf.len() - 1).leading_zeros()) as i32;
    let e = ((max_abs.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let k = 50 - guard - e;
    // Round-to-nearest-even via the 1.5*2^52 offset trick; exact for
    // |t * 2^k| <= 2^50, which the choice of k guarantees.
    const OFFSET: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let mut acc: i64 = 0;
    if (-1000..=1000).contains(&k) {
        let f = pow2(k);
        for &t in buf {
            acc += ((t * f + OFFSET) - OFFSET) as i64;
        }
    } else {
        let f1 = pow2(k / 2);
        let f2 = pow2(k - k / 2);
        for &t in buf {
            acc += ((t * f1 * f2 + OFFSET) - OFFSET) as i64;
        }
    }
    // i64 -> f64 is a single deterministic rounding of the exact integer sum.
    scale_pow2(acc as f64, -k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rank_limit_enforced() {
        assert!(Tensor::from_vec(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn check_finite_reports_position() {
        let mut t = Tensor::zeros(&[2, 2]);
        t.data_mut()[3] = f64::NAN;
        let err = t.check_finite("unit-test").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unit-test"), "{msg}");
        assert!(msg.contains("element 3"), "{msg}");
    }

    #[test]
    fn stable_sum_matches_naive_on_benign_input() {
        let vals = [1.0, 2.0, 3.5, -0.25];
        assert_eq!(stable_sum(&vals), 6.25);
    }

    #[test]
    fn stable_sum_handles_zero_and_tiny() {
        assert_eq!(stable_sum(&[]), 0.0);
        assert_eq!(stable_sum(&[0.0, 0.0]), 0.0);
        let vals = [1e-300, 2e-300];
        let s = stable_sum(&vals);
        assert!((s - 3e-300).abs() / 3e-300 < 1e-12);
    }

    proptest! {
        #[test]
        fn stable_sum_is_permutation_invariant(seed in 0u64..1000, n in 1usize..64) {
            let mut rng = Rng::new(seed);
            let mut vals: Vec<f64> = (0..n).map(|_| rng.normal() * rng.range(0.0, 100.0)).collect();
            let s1 = stable_sum(&vals);
            let mut shuffler = Rng::new(seed ^ 0xabcd);
            shuffler.shuffle(&mut vals);
            let s2 = stable_sum(&vals);
            prop_assert_eq!(s1.to_bits(), s2.to_bits());
        }

        #[test]
        fn stable_sum_is_accurate(seed in 0u64..200, n in 1usize..64) {
            let mut rng = Rng::new(seed);
            let vals: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let naive: f64 = vals.iter().sum();
            let s = stable_sum(&vals);
            let scale = vals.iter().map(|v| v.abs()).sum::<f64>().max(1e-30);
            prop_assert!((s - naive).abs() / scale < 1e-12);
        }
    }
}
