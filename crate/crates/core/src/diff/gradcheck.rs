use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParameterSet, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor (all of them if the tensor is smaller).
    pub samples_per_param: usize,
    /// One-sided slopes that disagree by more than this mark a hinge kink; such
    /// coordinates are skipped instead of compared.
    pub kink_threshold: f64,
    /// Floor on the relative-error denominator.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_param: 6,
            kink_threshold: 1e-3,
            scale_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Compares reverse-mode gradients of `loss` against central differences on a
/// random sample of coordinates. `loss` must build a scalar on the given tape.
pub fn grad_check<F>(params: &ParameterSet, loss: F, config: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&ParameterSet, &mut Tape) -> Var,
{
    grad_check_with(params, loss, |_, _| {}, config)
}

/// Variant of [`grad_check`] that lets the caller corrupt the analytic
/// gradients before comparison (negative controls).
pub fn grad_check_with<F, C>(
    params: &ParameterSet,
    loss: F,
    corrupt: C,
    config: &GradCheckConfig,
) -> GradCheckReport
where
    F: Fn(&ParameterSet, &mut Tape) -> Var,
    C: Fn(&str, &mut [f64]),
{
    let eval = |ps: &ParameterSet| {
        let mut tape = Tape::new();
        let out = loss(ps, &mut tape);
        tape.scalar(out)
    };

    let mut analytic = params.clone();
    analytic.zero_grad();
    {
        let mut tape = Tape::new();
        let out = loss(&analytic, &mut tape);
        tape.backward(out);
        tape.accumulate_param_grads(&mut analytic);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    let f0 = eval(params);
    for id in params.ids() {
        let p = analytic.get(id);
        let mut grad = p.grad_or_zero().into_vec();
        corrupt(&p.name, &mut grad);
        let n = grad.len();
        let picks: Vec<usize> = if n <= config.samples_per_param {
            (0..n).collect()
        } else {
            (0..config.samples_per_param)
                .map(|_| rng.random_range(0..n))
                .collect()
        };
        for idx in picks {
            let orig = probe.value(id).data()[idx];
            probe.value_mut(id).data_mut()[idx] = orig + config.step;
            let fp = eval(&probe);
            probe.value_mut(id).data_mut()[idx] = orig - config.step;
            let fm = eval(&probe);
            probe.value_mut(id).data_mut()[idx] = orig;

            let fwd = (fp - f0) / config.step;
            let bwd = (f0 - fm) / config.step;
            if (fwd - bwd).abs() > config.kink_threshold * fwd.abs().max(bwd.abs()).max(1.0) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * config.step);
            let a = grad[idx];
            let denom = a.abs().max(numeric.abs()).max(config.scale_floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > config.tolerance {
                report.failures.push(GradMismatch {
                    param: p.name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    fn linear_set() -> (ParameterSet, crate::diff::ParamId) {
        let mut ps = ParameterSet::new();
        let id = ps.add("w", Tensor::row(vec![0.3, -1.2, 2.0]));
        (ps, id)
    }

    #[test]
    fn linear_function_matches_to_machine_precision() {
        let (ps, id) = linear_set();
        let report = grad_check(
            &ps,
            |ps, tape| {
                let w = tape.param(ps, id);
                let c = tape.input(Tensor::row(vec![1.0, 2.0, -3.0]));
                let p = tape.mul(w, c);
                tape.sum(p)
            },
            &GradCheckConfig::default(),
        );
        assert!(report.passed());
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
    }

    #[test]
    fn hinge_away_from_kink_passes() {
        let (ps, id) = linear_set();
        let report = grad_check(
            &ps,
            |ps, tape| {
                let w = tape.param(ps, id);
                let shifted = tape.add_scalar(w, -0.1);
                let h = tape.relu(shifted);
                let sq = tape.square(h);
                tape.sum(sq)
            },
            &GradCheckConfig::default(),
        );
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn hinge_exactly_at_kink_is_skipped_not_failed() {
        let mut ps = ParameterSet::new();
        let id = ps.add("w", Tensor::row(vec![0.0, 0.5]));
        let report = grad_check(
            &ps,
            |ps, tape| {
                let w = tape.param(ps, id);
                let h = tape.relu(w);
                tape.sum(h)
            },
            &GradCheckConfig::default(),
        );
        assert_eq!(report.skipped_kinks, 1);
        assert!(report.passed());
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let (ps, id) = linear_set();
        let report = grad_check_with(
            &ps,
            |ps, tape| {
                let w = tape.param(ps, id);
                let sq = tape.square(w);
                tape.sum(sq)
            },
            |_, g| g.iter_mut().for_each(|x| *x *= 1.01),
            &GradCheckConfig::default(),
        );
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 3);
    }
}
