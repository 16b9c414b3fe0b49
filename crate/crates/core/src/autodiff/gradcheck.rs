//! Central finite-difference oracle for analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    /// Known non-smooth points of `f` (e.g. `0.0` for ReLU). Coordinates whose
    /// value lies within `2·eps` of one are skipped.
    pub kinks: Vec<f64>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-5,
            floor: 1e-3,
            kinks: Vec::new(),
        }
    }
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    pub fn kinks(mut self, kinks: &[f64]) -> Self {
        self.kinks = kinks.to_vec();
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Compares the analytic gradient of scalar `f` at `x` against central
/// differences `(f(x+ε·eᵢ) − f(x−ε·eᵢ)) / 2ε`.
///
/// The error per coordinate is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(f: F, x: &Tensor, cfg: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let first = eval(&f, x)?;
    let second = eval(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let v = g.leaf(x.clone().with_grad());
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic = g.grad_tensor(v).into_data();

    let mut numeric = vec![0.0; x.numel()];
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
        analytic: Vec::new(),
        numeric: Vec::new(),
        tol: cfg.tol,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let xi = x.data()[i];
        if cfg.kinks.iter().any(|k| (xi - k).abs() <= 2.0 * cfg.eps) {
            report.skipped += 1;
            continue;
        }
        probe.data_mut()[i] = xi + cfg.eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = xi - cfg.eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = xi;
        numeric[i] = (up - down) / (2.0 * cfg.eps);

        let a = analytic[i];
        let denom = a.abs().max(numeric[i].abs()).max(cfg.floor);
        let err = (a - numeric[i]).abs() / denom;
        report.checked += 1;
        if err > report.max_rel_err || report.worst_index.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst_index = Some(i);
        }
    }
    report.analytic = analytic;
    report.numeric = numeric;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[5], 1.0, &mut rng);
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq)
            },
            &x,
            &GradCheck::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{}", report.max_rel_err);
        for (a, xi) in report.analytic.iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * xi);
        }
    }

    #[test]
    fn relu_kink_is_skipped() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let r = g.relu(v)?;
                g.sum(r)
            },
            &x,
            &GradCheck::default().kinks(&[0.0]),
        )
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 2);
        assert!(report.passed());
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let err = grad_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let s = g.scale(v, calls.get())?;
                g.sum(s)
            },
            &x,
            &GradCheck::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn softmax_pick_with_jitter_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Tied inputs plus a small jitter keep every coordinate off ties.
        let mut x = Tensor::full(&[6], 0.5);
        let jitter = Tensor::randn(&[6], 0.1, &mut rng);
        x.data_mut().iter_mut().zip(jitter.data()).for_each(|(a, j)| *a += j);
        let report = grad_check(
            |g, v| {
                let s = g.softmax(v, 0)?;
                let picked = g.slice(s, 0, 2, 1)?;
                g.sum(picked)
            },
            &x,
            &GradCheck::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
