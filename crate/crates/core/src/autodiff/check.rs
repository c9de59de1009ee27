//! Gradient oracles: central finite differences and dense Jacobians
//! assembled from repeated backward passes on basis vectors.

use super::{Tape, TapeError, ValueId};
use crate::{Error, Result};

/// Builds the objective once on a fresh tape and compares the analytic
/// gradient of every parameter element against central finite differences.
/// Returns the maximum relative error
/// `|analytic − cd| / max(|analytic|, |cd|, 1e-12)`.
///
/// Stop-gradient nodes inside `build` are handled by value replay: the
/// perturbed re-evaluations reuse the detached values captured on the base
/// run, so the finite differences measure the same detach-respecting
/// function the analytic gradient differentiates. `build` must be
/// deterministic given its parameter values.
pub fn finite_diff_check<F>(
    params: &[(Vec<f64>, Vec<usize>)],
    epsilon: f64,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(
            "finite_diff_check: epsilon must be positive".into(),
        ));
    }
    if params.is_empty() {
        return Err(Error::InvalidArgument(
            "finite_diff_check: no parameters".into(),
        ));
    }

    // Base run: analytic gradients plus the stop-gradient value trace.
    let mut tape = Tape::new();
    tape.begin_sg_recording();
    let ids = mount(&mut tape, params)?;
    let root = build(&mut tape, &ids)?;
    let base = tape.scalar(root).map_err(Error::from)?;
    if !base.is_finite() {
        return Err(Error::InvalidArgument(
            "finite_diff_check: non-finite objective".into(),
        ));
    }
    let grads = tape.backward(root).map_err(Error::from)?;
    let sg_trace = tape.take_sg_recording();

    let eval = |perturbed: &[(Vec<f64>, Vec<usize>)]| -> Result<f64> {
        let mut tape = Tape::new();
        tape.set_sg_replay(sg_trace.clone());
        let ids = mount(&mut tape, perturbed)?;
        let root = build(&mut tape, &ids)?;
        if !tape.sg_replay_fully_consumed() {
            return Err(Error::Tape(TapeError::SgReplayMismatch));
        }
        let v = tape.scalar(root).map_err(Error::from)?;
        if !v.is_finite() {
            return Err(Error::InvalidArgument(
                "finite_diff_check: non-finite objective".into(),
            ));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    let mut work: Vec<(Vec<f64>, Vec<usize>)> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; params[pi].0.len()]);
        for j in 0..params[pi].0.len() {
            let orig = work[pi].0[j];
            work[pi].0[j] = orig + epsilon;
            let plus = eval(&work)?;
            work[pi].0[j] = orig - epsilon;
            let minus = eval(&work)?;
            work[pi].0[j] = orig;
            let cd = (plus - minus) / (2.0 * epsilon);
            let a = analytic[j];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-12);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

fn mount(tape: &mut Tape, params: &[(Vec<f64>, Vec<usize>)]) -> Result<Vec<ValueId>> {
    params
        .iter()
        .map(|(data, shape)| {
            tape.param(data.clone(), shape.clone())
                .map_err(Error::from)
        })
        .collect()
}

/// Dense Jacobian `∂y/∂x` (rows: components of `y`, columns: elements of
/// `x`), built by one backward pass per output component seeded with a
/// basis vector.
pub fn jacobian(tape: &mut Tape, y: ValueId, x: ValueId) -> Result<Vec<Vec<f64>>> {
    Ok(jacobian_multi(tape, y, &[x])?.pop().unwrap())
}

/// Dense Jacobians of `y` with respect to each value in `wrt`, sharing the
/// per-row backward passes. Returns one row-major matrix per entry of
/// `wrt`, each `dim(y) × numel(wrt[i])`.
pub fn jacobian_multi(
    tape: &mut Tape,
    y: ValueId,
    wrt: &[ValueId],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let out_dim = tape.value(y).map_err(Error::from)?.numel();
    let widths: Vec<usize> = wrt
        .iter()
        .map(|id| tape.value(*id).map(|v| v.numel()).map_err(Error::from))
        .collect::<Result<_>>()?;

    let mut mats: Vec<Vec<Vec<f64>>> = widths.iter().map(|_| Vec::with_capacity(out_dim)).collect();
    for i in 0..out_dim {
        let mut basis = vec![0.0; out_dim];
        basis[i] = 1.0;
        let e = tape.constant(basis, vec![out_dim]).map_err(Error::from)?;
        let root = tape.dot(y, e).map_err(Error::from)?;
        let grads = tape.backward(root).map_err(Error::from)?;
        for (k, id) in wrt.iter().enumerate() {
            let row = grads
                .get(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; widths[k]]);
            mats[k].push(row);
        }
    }
    Ok(mats)
}
