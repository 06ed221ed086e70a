//! Central-difference verification of reverse-mode gradients.
//!
//! Meant to run on `f64` graphs: the default step of 1e-5 leaves ~1e-11 of
//! rounding noise, far below the 1e-4 tolerance.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Parameter, Tensor, TensorError, Trace};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed guarded relative error.
    pub tol: f64,
    /// Cap on probed components per parameter; 0 checks every component.
    /// Large tensors are probed at a deterministic random subset.
    pub max_probes_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            max_probes_per_param: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Error between finite difference and analytic gradient, relative to their
/// magnitude with a floor of 0.01 so rounding noise on near-zero components
/// does not dominate.
fn guarded_rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-2)
}

/// Compare `backward`'s gradients against central differences
/// `(f(x+h) - f(x-h)) / 2h` for every parameter. `loss_fn` must rebuild the
/// scalar loss from the parameters' current values; it receives a trace for
/// the analytic pass and `None` for the probe evaluations.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[&Parameter<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(Option<&Rc<Trace<f64>>>) -> Tensor<f64>,
{
    for p in params {
        p.clear_grad();
    }
    let trace = Trace::new();
    let loss = loss_fn(Some(&trace));
    if !loss.item().is_finite() {
        return Err(TensorError::NonFiniteValue("loss".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |loss_fn: &mut F| -> Result<f64, TensorError> {
        let v = loss_fn(None).item();
        if !v.is_finite() {
            return Err(TensorError::NonFiniteValue("finite-difference probe".into()));
        }
        Ok(v)
    };

    let mut checks = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let numel = p.numel();
        let probe_indices: Vec<usize> =
            if cfg.max_probes_per_param == 0 || numel <= cfg.max_probes_per_param {
                (0..numel).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9 ^ pi as u64);
                rand::seq::index::sample(&mut rng, numel, cfg.max_probes_per_param).into_vec()
            };
        let mut max_rel_err = 0.0f64;
        for &i in &probe_indices {
            let original = p.value_at(i);
            p.set_value_at(i, original + cfg.step);
            let f_plus = eval(&mut loss_fn)?;
            p.set_value_at(i, original - cfg.step);
            let f_minus = eval(&mut loss_fn)?;
            p.set_value_at(i, original);
            let fd = (f_plus - f_minus) / (2.0 * cfg.step);
            max_rel_err = max_rel_err.max(guarded_rel_err(fd, analytic[pi][i]));
        }
        checks.push(ParamCheck {
            name: p.name().to_string(),
            probes: probe_indices.len(),
            max_rel_err,
        });
    }
    Ok(GradCheckReport {
        checks,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::super::mse_loss;
    use super::*;

    #[test]
    fn quadratic_matches_analytic_slope() {
        let p = Parameter::new("theta", vec![1], vec![3.0f64]);
        let report = finite_diff_check(
            |tr| {
                let x = p.bind(tr);
                x.mul(&x).unwrap().sum_all()
            },
            &[&p],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_err() < 1e-8);
        // analytic gradient is 6 at theta = 3
        assert!((p.grad().unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn mse_against_zero_target() {
        let p = Parameter::new("p", vec![1], vec![2.0f64]);
        let target = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let report = finite_diff_check(
            |tr| mse_loss(&p.bind(tr), &target).unwrap(),
            &[&p],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!((p.grad().unwrap()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn scaled_gradient_is_caught() {
        let p = Parameter::new("p", vec![2], vec![1.5f64, -0.5]);
        // analytic pass sees a loss scaled by 2, probes see the true loss:
        // every reported gradient is exactly twice the finite difference
        let report = finite_diff_check(
            |tr| {
                let x = p.bind(tr);
                let l = x.mul(&x).unwrap().sum_all();
                if tr.is_some() {
                    l.scale(2.0)
                } else {
                    l
                }
            },
            &[&p],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn probe_sampling_is_deterministic() {
        let p = Parameter::new("big", vec![100], (0..100).map(|i| i as f64 / 50.0).collect());
        let cfg = GradCheckConfig {
            max_probes_per_param: 10,
            ..Default::default()
        };
        let run = |p: &Parameter<f64>| {
            finite_diff_check(|tr| p.bind(tr).gelu().sum_all(), &[p], &cfg).unwrap()
        };
        let a = run(&p);
        let b = run(&p);
        assert_eq!(a.checks[0].probes, 10);
        assert_eq!(a.checks[0].max_rel_err, b.checks[0].max_rel_err);
        assert!(a.passed());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let p = Parameter::new("p", vec![1], vec![f64::NAN]);
        let result = finite_diff_check(
            |tr| p.bind(tr).sum_all(),
            &[&p],
            &GradCheckConfig::default(),
        );
        assert!(matches!(result, Err(TensorError::NonFiniteValue(_))));
    }
}
