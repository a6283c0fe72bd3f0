use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Below this magnitude gradients are effectively compared in absolute terms.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(|analytic|, |numeric|, [`DENOM_FLOOR`])
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares tape gradients with central differences on up to `samples`
/// randomly chosen coordinates of the parameters accepted by `filter`.
///
/// `loss_fn` must build a scalar loss deterministically on the given tape.
pub fn grad_check<S: Scalar>(
    params: &ParamStore<S>,
    loss_fn: impl Fn(&mut Tape<'_, S>) -> Result<Var>,
    samples: usize,
    eps: f64,
    seed: u64,
    filter: impl Fn(&str) -> bool,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut tape = Tape::with_params(params);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?.param_grads()
    };
    let base = eval(params, &loss_fn)?;
    if eval(params, &loss_fn)?.to_bits() != base.to_bits() {
        return Err(Error::Usage(
            "gradient check needs a deterministic loss (disable dropout)".into(),
        ));
    }

    let candidates: Vec<(ParamId, usize)> = params
        .iter()
        .filter(|(_, name, t)| t.requires_grad && filter(name))
        .flat_map(|(id, _, t)| (0..t.numel()).map(move |i| (id, i)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Usage("no trainable coordinates to check".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(ParamId, usize)> = if candidates.len() <= samples {
        candidates
    } else {
        (0..samples)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect()
    };

    let mut work = params.clone();
    let h = S::from_f64(eps).unwrap();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (id, i) in picks {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + h;
        let plus = eval(&work, &loss_fn)?;
        work.get_mut(id).data_mut()[i] = orig - h;
        let minus = eval(&work, &loss_fn)?;
        work.get_mut(id).data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[id.index()]
            .as_ref()
            .map(|g| g[i].to_f64_lossy())
            .unwrap_or(0.0);
        let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
        let rel = (a - numeric).abs() / denom;
        report.coords_checked += 1;
        if rel >= report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((params.name(id).to_string(), i));
        }
    }
    Ok(report)
}

fn eval<S: Scalar>(
    params: &ParamStore<S>,
    loss_fn: &impl Fn(&mut Tape<'_, S>) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::with_params(params);
    let loss = loss_fn(&mut tape)?;
    Ok(tape.scalar(loss).to_f64_lossy())
}
