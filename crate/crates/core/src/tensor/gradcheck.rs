//! Finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all input elements of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the element attaining `max_rel_error`.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Elements whose perturbation crossed a recorded branch decision.
    pub kink_straddles: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the tape gradient of scalar `f` against a central difference
/// (fourth-order stencil at offsets ±eps, ±2·eps) for every input element.
///
/// Branch decisions of piecewise ops are recorded at the unperturbed point and
/// replayed for the perturbed evaluations, so both derivatives describe the
/// same smooth piece even when an input sits next to a kink.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_elements(f, inputs, eps, &all)
}

/// [`grad_check`] restricted to at most `per_input` elements of each input,
/// drawn without replacement from `seed`. Inputs at or below the limit are
/// checked in full.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor<f64>], eps: f64, per_input: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = inputs
        .iter()
        .map(|t| {
            let mut ix = rand::seq::index::sample(&mut rng, t.len(), per_input.min(t.len())).into_vec();
            ix.sort_unstable();
            ix
        })
        .collect::<Vec<_>>();
    check_elements(f, inputs, eps, &picks)
}

fn check_elements<F>(f: F, inputs: &[Tensor<f64>], eps: f64, elements: &[Vec<usize>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::domain("grad_check", format!("eps {eps} outside [1e-7, 1e-4]")));
    }
    let mut tape = Tape::recording();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let log = tape.take_decisions();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();
    drop(grads);
    drop(tape);

    let eval = |point: &[Tensor<f64>]| -> Result<(f64, usize)> {
        let mut t = Tape::replaying(log.clone());
        let vs: Vec<Var> = point.iter().map(|p| t.constant(p.clone())).collect();
        let y = f(&mut t, &vs)?;
        let value = t.value(y).item();
        Ok((value, t.decision_mismatches()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        kink_straddles: 0,
    };
    let mut point: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for &k in &elements[i] {
            let x0 = input.data()[k];
            let mut at = |offset: f64| -> Result<(f64, usize)> {
                point[i].data_mut()[k] = x0 + offset;
                eval(&point)
            };
            let (fp1, m1) = at(eps)?;
            let (fm1, m2) = at(-eps)?;
            let (fp2, m3) = at(2.0 * eps)?;
            let (fm2, m4) = at(-2.0 * eps)?;
            point[i].data_mut()[k] = x0;
            let numeric = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * eps);
            let a = analytic[i].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if m1 + m2 + m3 + m4 > 0 {
                report.kink_straddles += 1;
            }
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((i, k));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
