//! Central finite-difference gradient verification.
//!
//! This is the independent oracle the rest of the workspace is checked
//! against: it evaluates the loss function itself, never the backward rules.

use crate::error::Result;
use crate::graph::{GradGraph, Var};
use crate::tensor::Tensor;

/// Relative disagreement between one-sided differences above which a point is
/// treated as non-differentiable (a relu/leaky-relu kink within +-h) and
/// excluded from the comparison instead of failing it.
const KINK_TOL: f64 = 1e-3;

/// Outcome of one finite-difference check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub name: String,
    /// Max over checked elements of |fd - autograd| / max(|fd|, |autograd|, 1e-8).
    pub max_rel_err: f64,
    pub checked: usize,
    pub excluded: usize,
    pub tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err {:>12.3e}  tol {:>8.0e}  checked {:>5}  excluded {:>2}  {}",
            self.name,
            self.max_rel_err,
            self.tol,
            self.checked,
            self.excluded,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Compare the autograd gradient of `build` against central finite
/// differences for every element of every tensor in `inputs`.
///
/// `build` receives the inputs as requires-grad leaves and must return a
/// rank-0 loss. Differences use step `h`; the relative-error denominator is
/// max(|a|, |b|, 1e-8). Elements where forward and backward one-sided
/// differences disagree by more than a 1e-3 relative margin sit on a kink and
/// are counted in `excluded` rather than compared.
pub fn finite_diff_check_multi(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut GradGraph, &[Var]) -> Result<Var>,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    finite_diff_check_steps(name, inputs, build, &[h], tol)
}

/// Multi-scale variant: an element is compared at each step in `steps` and its
/// best agreement counts. Deep compositions need this because no single step
/// serves both near-zero gradients (round-off noise dominates small h) and
/// high-curvature paths (truncation dominates large h).
pub fn finite_diff_check_steps(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut GradGraph, &[Var]) -> Result<Var>,
    steps: &[f64],
    tol: f64,
) -> Result<FdReport> {
    check_impl(name, inputs, build, steps, tol, 0.0)
}

/// Harness self-test: offsets every analytic gradient by `tamper`
/// (relative and absolute) before the comparison, simulating a broken
/// backward rule. The check must then fail; callers use this to prove the
/// oracle is sensitive.
pub fn finite_diff_check_tampered(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut GradGraph, &[Var]) -> Result<Var>,
    steps: &[f64],
    tol: f64,
    tamper: f64,
) -> Result<FdReport> {
    check_impl(name, inputs, build, steps, tol, tamper)
}

fn check_impl(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut GradGraph, &[Var]) -> Result<Var>,
    steps: &[f64],
    tol: f64,
    tamper: f64,
) -> Result<FdReport> {
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = GradGraph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    // One backward pass for the analytic gradients.
    let mut g = GradGraph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let f0 = g.value(loss).item();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut excluded = 0;
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data()[ei];
            let a = analytic[ti][ei] * (1.0 + tamper) + tamper;
            let mut best: Option<f64> = None;
            for &h in steps {
                work[ti].data_mut()[ei] = orig + h;
                let fp = eval(&work)?;
                work[ti].data_mut()[ei] = orig - h;
                let fm = eval(&work)?;
                work[ti].data_mut()[ei] = orig;

                let fwd = (fp - f0) / h;
                let bwd = (f0 - fm) / h;
                if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(1.0) {
                    continue; // kink within +-h at this step
                }
                let central = (fp - fm) / (2.0 * h);
                let rel = (central - a).abs() / central.abs().max(a.abs()).max(1e-8);
                best = Some(best.map_or(rel, |b: f64| b.min(rel)));
            }
            match best {
                Some(rel) => {
                    max_rel = max_rel.max(rel);
                    checked += 1;
                }
                None => excluded += 1,
            }
        }
    }
    Ok(FdReport { name: name.to_string(), max_rel_err: max_rel, checked, excluded, tol })
}

/// Single-input convenience form.
pub fn finite_diff_check(
    name: &str,
    x: &Tensor,
    build: impl Fn(&mut GradGraph, Var) -> Result<Var>,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    finite_diff_check_multi(name, std::slice::from_ref(x), |g, vars| build(g, vars[0]), h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_tight() {
        let mut rng = Rng::new(11);
        let x = random_tensor(&[3, 4], &mut rng);
        let report = finite_diff_check(
            "sum_of_squares",
            &x,
            |g, v| {
                let sq = g.power(v, 2.0);
                Ok(g.sum(sq))
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.excluded, 0);
    }

    #[test]
    fn relu_at_exact_zero_is_excluded_not_failed() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let report = finite_diff_check(
            "relu_kink",
            &x,
            |g, v| {
                let r = g.relu(v);
                Ok(g.sum(r))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.excluded, 1);
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn constant_function_passes_with_zero_gradients() {
        let x = Tensor::from_vec(&[4], vec![0.5, -0.25, 1.5, 3.0]).unwrap();
        let report = finite_diff_check(
            "constant",
            &x,
            |g, v| {
                let zero = g.scale(v, 0.0);
                Ok(g.sum(zero))
            },
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn x_squared_derivative_at_three() {
        // d/dx[x*x] at x=3 is 6; central differences agree to < 1e-6
        let x = Tensor::scalar(3.0);
        let report = finite_diff_check(
            "x_times_x",
            &x,
            |g, v| {
                let y = g.mul(v, v)?;
                Ok(g.sum(y))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
