//! Noise schedules, forward noising, the deterministic reverse step and its
//! stop-gradient variant, one-step clean prediction, and trajectory sampling
//! with selectable graph retention.
//!
//! Timesteps are 1-based (`t ∈ 1..=T`), states 0-based (`x_0` is clean). The
//! reverse step is deterministic by default; an ancestral-noise term can be
//! enabled through [`SamplerOptions::stochastic`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::seeds;
use crate::toymotion::ConditionId;
use crate::{Error, Result};

/// Anything that predicts noise from `(x_t, t, c)` on a tape: the trainable
/// denoiser, a frozen reference copy, or a test stub.
pub trait NoisePredictor {
    fn motion_dim(&self) -> usize;
    fn predict(&self, tape: &mut Tape, x: ValueId, t: usize, c: ConditionId) -> Result<ValueId>;
}

/// β_t, α_t = 1 − β_t, and ᾱ_t = Π_{s≤t} α_s over `T` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas; each must lie strictly in
    /// (0, 1). The cumulative products are formed by one running pass so the
    /// identity `ᾱ_t = ᾱ_{t−1}·α_t` holds bit-exactly.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Schedule("need at least one step".into()));
        }
        for (i, b) in beta.iter().enumerate() {
            if !(b.is_finite() && *b > 0.0 && *b < 1.0) {
                return Err(Error::Schedule(format!(
                    "beta[{i}] = {b} outside the open interval (0, 1)"
                )));
            }
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut running = 1.0;
        for a in &alpha {
            running *= a;
            alpha_bar.push(running);
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha[t - 1])
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }
}

/// Linear beta schedule, endpoints inclusive. Defaults elsewhere are
/// `T = 50`, β ∈ [1e-4, 0.02].
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::Schedule("T must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta = if t_steps == 1 {
        vec![beta_start]
    } else {
        (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(beta)
}

pub const DEFAULT_T: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

pub fn default_schedule() -> NoiseSchedule {
    make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
}

/// Forward noising: `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn forward_noise(
    tape: &mut Tape,
    x0: ValueId,
    t: usize,
    eps: ValueId,
    schedule: &NoiseSchedule,
) -> Result<ValueId> {
    let ab = schedule.alpha_bar_at(t)?;
    let a = tape.scale(x0, ab.sqrt())?;
    let b = tape.scale(eps, (1.0 - ab).sqrt())?;
    Ok(tape.add(a, b)?)
}

fn reverse_coefficients(t: usize, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    let alpha = schedule.alpha_at(t)?;
    let beta = schedule.beta_at(t)?;
    let ab = schedule.alpha_bar_at(t)?;
    let one_minus_ab = 1.0 - ab;
    if one_minus_ab <= 0.0 {
        return Err(Error::Schedule(format!(
            "degenerate schedule: alpha_bar[{t}] = {ab}"
        )));
    }
    Ok((beta / one_minus_ab.sqrt(), 1.0 / alpha.sqrt()))
}

fn reverse_step_inner(
    tape: &mut Tape,
    x_in: ValueId,
    t: usize,
    c: ConditionId,
    denoiser: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    noise: Option<ValueId>,
) -> Result<ValueId> {
    let (eps_coef, inv_sqrt_alpha) = reverse_coefficients(t, schedule)?;
    let eps_hat = denoiser.predict(tape, x_in, t, c)?;
    let scaled = tape.scale(eps_hat, eps_coef)?;
    let diff = tape.sub(x_in, scaled)?;
    let mut out = tape.scale(diff, inv_sqrt_alpha)?;
    if let Some(z) = noise {
        let beta = schedule.beta_at(t)?;
        let nz = tape.scale(z, beta.sqrt())?;
        out = tape.add(out, nz)?;
    }
    Ok(out)
}

/// One deterministic reverse step:
/// `x_{t−1} = (x_t − (β_t/√(1−ᾱ_t))·ε̂) / √α_t`, fully differentiable
/// through both the state and the denoiser parameters.
pub fn reverse_step(
    tape: &mut Tape,
    x_t: ValueId,
    t: usize,
    c: ConditionId,
    denoiser: &impl NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<ValueId> {
    reverse_step_inner(tape, x_t, t, c, denoiser, schedule, None)
}

/// The stop-gradient variant: identical value, but the incoming state is
/// detached, so gradient flows only through the denoiser parameters at this
/// step.
pub fn reverse_step_sg(
    tape: &mut Tape,
    x_t: ValueId,
    t: usize,
    c: ConditionId,
    denoiser: &impl NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<ValueId> {
    let detached = tape.stop_gradient(x_t)?;
    reverse_step_inner(tape, detached, t, c, denoiser, schedule, None)
}

/// Reverse step with an ancestral noise term `√β_t·z` added.
pub fn reverse_step_stochastic(
    tape: &mut Tape,
    x_t: ValueId,
    t: usize,
    c: ConditionId,
    denoiser: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    z: ValueId,
) -> Result<ValueId> {
    reverse_step_inner(tape, x_t, t, c, denoiser, schedule, Some(z))
}

/// One-step clean prediction: `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn one_step_predict(
    tape: &mut Tape,
    x_t: ValueId,
    t: usize,
    c: ConditionId,
    denoiser: &impl NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<ValueId> {
    let eps_hat = denoiser.predict(tape, x_t, t, c)?;
    one_step_from_eps(tape, x_t, eps_hat, t, schedule)
}

/// The x̂₀ inversion given an already-computed noise prediction, so callers
/// that need both `x_{t−1}` and `x̂₀` can reuse one denoiser evaluation.
pub fn one_step_from_eps(
    tape: &mut Tape,
    x_t: ValueId,
    eps_hat: ValueId,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ValueId> {
    let ab = schedule.alpha_bar_at(t)?;
    let scaled = tape.scale(eps_hat, (1.0 - ab).sqrt())?;
    let diff = tape.sub(x_t, scaled)?;
    Ok(tape.scale(diff, 1.0 / ab.sqrt())?)
}

/// Graph-retention mode for a sampled trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Retention {
    /// Keep the whole chain differentiable (backprop through time).
    Full,
    /// Detach every state on entry to the next step; each step's graph can
    /// be released independently.
    Stepwise,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SamplerOptions {
    /// Add `√β_t·z` ancestral noise at every step except the last.
    pub stochastic: bool,
}

/// The ordered states `x_T … x_0` of one reverse rollout.
pub struct Trajectory {
    pub states: Vec<ValueId>,
    pub condition: ConditionId,
    pub retention: Retention,
}

/// Samples a trajectory from seeded Gaussian noise. For identical seeds and
/// parameters, both retention modes produce identical state values; only
/// the recorded graph differs.
pub fn sample_trajectory(
    tape: &mut Tape,
    denoiser: &impl NoisePredictor,
    c: ConditionId,
    schedule: &NoiseSchedule,
    retention: Retention,
    seed: u64,
) -> Result<Trajectory> {
    sample_trajectory_with(
        tape,
        denoiser,
        c,
        schedule,
        retention,
        seed,
        SamplerOptions::default(),
    )
}

pub fn sample_trajectory_with(
    tape: &mut Tape,
    denoiser: &impl NoisePredictor,
    c: ConditionId,
    schedule: &NoiseSchedule,
    retention: Retention,
    seed: u64,
    options: SamplerOptions,
) -> Result<Trajectory> {
    let dim = denoiser.motion_dim();
    let t_max = schedule.steps();
    let x_t = tape.constant(seeds::standard_normal(seed, dim), vec![dim])?;
    let mut states = Vec::with_capacity(t_max + 1);
    states.push(x_t);
    let mut cur = x_t;
    for t in (1..=t_max).rev() {
        let noise = if options.stochastic && t > 1 {
            let z = seeds::standard_normal(seeds::child_n(seed, "sampler/z", t as u64), dim);
            Some(tape.constant(z, vec![dim])?)
        } else {
            None
        };
        let next = match retention {
            Retention::Full => reverse_step_inner(tape, cur, t, c, denoiser, schedule, noise)?,
            Retention::Stepwise => {
                let detached = tape.stop_gradient(cur)?;
                reverse_step_inner(tape, detached, t, c, denoiser, schedule, noise)?
            }
        };
        cur = if retention == Retention::Stepwise && t > 1 {
            tape.stop_gradient(next)?
        } else {
            next
        };
        states.push(cur);
    }
    Ok(Trajectory {
        states,
        condition: c,
        retention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{jacobian, jacobian_multi};

    /// ε̂ ≡ const vector, no parameters.
    pub(crate) struct ConstDenoiser(pub Vec<f64>);

    impl NoisePredictor for ConstDenoiser {
        fn motion_dim(&self) -> usize {
            self.0.len()
        }
        fn predict(
            &self,
            tape: &mut Tape,
            _x: ValueId,
            _t: usize,
            _c: ConditionId,
        ) -> Result<ValueId> {
            Ok(tape.constant(self.0.clone(), vec![self.0.len()])?)
        }
    }

    /// ε̂ = W·x with a trainable square matrix, for Jacobian probes.
    pub(crate) struct LinearDenoiser {
        pub w: ValueId,
        pub dim: usize,
    }

    impl NoisePredictor for LinearDenoiser {
        fn motion_dim(&self) -> usize {
            self.dim
        }
        fn predict(
            &self,
            tape: &mut Tape,
            x: ValueId,
            _t: usize,
            _c: ConditionId,
        ) -> Result<ValueId> {
            Ok(tape.matvec(self.w, x)?)
        }
    }

    fn linear_denoiser(tape: &mut Tape, dim: usize, scale: f64) -> LinearDenoiser {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = scale;
        }
        for i in 0..dim * dim {
            w[i] += 0.01 * ((i * 7 % 13) as f64 - 6.0) / 6.0;
        }
        let w = tape.param(w, vec![dim, dim]).unwrap();
        LinearDenoiser { w, dim }
    }

    const COND: ConditionId = ConditionId(0);

    #[test]
    fn linear_schedule_small_cases() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert_eq!(s.alpha, vec![0.9, 0.8]);
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar[1], s.alpha_bar[0] * s.alpha[1]);

        let s1 = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s1.alpha_bar, vec![0.5]);
    }

    #[test]
    fn default_schedule_matches_independent_product_loop() {
        let s = default_schedule();
        assert_eq!(s.steps(), 50);
        assert!((s.beta[0] - 1e-4).abs() < 1e-18);
        assert!((s.beta[49] - 0.02).abs() < 1e-15);
        let mut product = 1.0;
        for t in 1..=50 {
            product *= 1.0 - s.beta[t - 1];
            assert_eq!(s.alpha_bar_at(t).unwrap(), product);
        }
    }

    #[test]
    fn schedule_bounds_are_validated() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn forward_noise_near_identity_when_alpha_bar_near_one() {
        let s = NoiseSchedule::from_betas(vec![1e-15]).unwrap();
        let mut tape = Tape::new();
        let x0 = tape.constant(vec![1.5, -0.5], vec![2]).unwrap();
        let eps = tape.constant(vec![2.0, 2.0], vec![2]).unwrap();
        let xt = forward_noise(&mut tape, x0, 1, eps, &s).unwrap();
        let out = tape.data(xt).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-6);
        assert!((out[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn forward_noise_quarter_alpha_bar() {
        // ᾱ₂ = 0.5 · 0.5 = 0.25 exactly, so √ᾱ₂·2 = 1.0 exactly.
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        let mut tape = Tape::new();
        let x0 = tape.constant(vec![2.0], vec![1]).unwrap();
        let eps = tape.constant(vec![0.0], vec![1]).unwrap();
        let xt = forward_noise(&mut tape, x0, 2, eps, &s).unwrap();
        assert_eq!(tape.data(xt).unwrap(), &[1.0]);
    }

    #[test]
    fn forward_noise_range_check() {
        let s = default_schedule();
        let mut tape = Tape::new();
        let x0 = tape.constant(vec![0.0], vec![1]).unwrap();
        let eps = tape.constant(vec![0.0], vec![1]).unwrap();
        assert!(forward_noise(&mut tape, x0, 0, eps, &s).is_err());
        assert!(forward_noise(&mut tape, x0, 51, eps, &s).is_err());
    }

    #[test]
    fn one_step_predict_inverts_forward_noise_with_oracle_eps() {
        let s = default_schedule();
        let eps_data = seeds::standard_normal(3, 4);
        let x0_data = seeds::standard_normal(4, 4);
        let denoiser = ConstDenoiser(eps_data.clone());
        for t in [1, 17, 50] {
            let mut tape = Tape::new();
            let x0 = tape.constant(x0_data.clone(), vec![4]).unwrap();
            let eps = tape.constant(eps_data.clone(), vec![4]).unwrap();
            let xt = forward_noise(&mut tape, x0, t, eps, &s).unwrap();
            let pred = one_step_predict(&mut tape, xt, t, COND, &denoiser, &s).unwrap();
            for (a, b) in tape.data(pred).unwrap().iter().zip(&x0_data) {
                assert!((a - b).abs() < 1e-12, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn reverse_step_scalar_value_matches_independent_evaluation() {
        // α₂ = 0.96, ᾱ₂ = 0.84375 · 0.96 = 0.81.
        let s = NoiseSchedule::from_betas(vec![0.15625, 0.04]).unwrap();
        assert!((s.alpha_bar_at(2).unwrap() - 0.81).abs() < 1e-12);

        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0], vec![1]).unwrap();
        let denoiser = ConstDenoiser(vec![0.5]);
        let out = reverse_step(&mut tape, x, 2, COND, &denoiser, &s).unwrap();
        let got = tape.data(out).unwrap()[0];

        let alpha = s.alpha_at(2).unwrap();
        let beta = s.beta_at(2).unwrap();
        let ab = s.alpha_bar_at(2).unwrap();
        let expected = (1.0 - beta / (1.0 - ab).sqrt() * 0.5) / alpha.sqrt();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.9738).abs() < 1e-4, "got {got}");
    }

    #[test]
    fn reverse_step_identity_limit() {
        let s = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.3, -0.9], vec![2]).unwrap();
        let denoiser = ConstDenoiser(vec![0.7, 0.7]);
        let out = reverse_step(&mut tape, x, 1, COND, &denoiser, &s).unwrap();
        let got = tape.data(out).unwrap();
        assert!((got[0] - 0.3).abs() < 1e-5);
        assert!((got[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn reverse_step_with_zero_prediction_rescales_only() {
        let s = default_schedule();
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.4, -1.2], vec![2]).unwrap();
        let denoiser = ConstDenoiser(vec![0.0, 0.0]);
        let t = 7;
        let out = reverse_step(&mut tape, x, t, COND, &denoiser, &s).unwrap();
        let inv = 1.0 / s.alpha_at(t).unwrap().sqrt();
        assert_eq!(tape.data(out).unwrap(), &[0.4 * inv, -1.2 * inv]);
    }

    #[test]
    fn one_step_predict_scalar_value() {
        // ᾱ₂ = 0.81: x̂₀ = (1 − √0.19·0.5)/0.9 ≈ 0.869.
        let s = NoiseSchedule::from_betas(vec![0.15625, 0.04]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0], vec![1]).unwrap();
        let denoiser = ConstDenoiser(vec![0.5]);
        let out = one_step_predict(&mut tape, x, 2, COND, &denoiser, &s).unwrap();
        let got = tape.data(out).unwrap()[0];
        let expected = (1.0 - (1.0f64 - 0.81).sqrt() * 0.5) / 0.81f64.sqrt();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.869).abs() < 1e-3, "got {got}");
    }

    #[test]
    fn one_step_predict_with_zero_prediction() {
        let s = default_schedule();
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.8], vec![1]).unwrap();
        let denoiser = ConstDenoiser(vec![0.0]);
        let t = 3;
        let out = one_step_predict(&mut tape, x, t, COND, &denoiser, &s).unwrap();
        let inv = 1.0 / s.alpha_bar_at(t).unwrap().sqrt();
        assert_eq!(tape.data(out).unwrap(), &[0.8 * inv]);
    }

    #[test]
    fn sg_step_values_bit_identical_and_state_gradient_zero() {
        let s = make_schedule(6, 1e-3, 0.05).unwrap();
        let mut tape = Tape::new();
        let denoiser = linear_denoiser(&mut tape, 3, 0.4);
        let x_data = vec![0.5, -0.3, 0.8];

        let x1 = tape.input(x_data.clone(), vec![3]).unwrap();
        let plain = reverse_step(&mut tape, x1, 4, COND, &denoiser, &s).unwrap();
        let x2 = tape.input(x_data.clone(), vec![3]).unwrap();
        let sg = reverse_step_sg(&mut tape, x2, 4, COND, &denoiser, &s).unwrap();
        assert_eq!(tape.data(plain).unwrap(), tape.data(sg).unwrap());

        // ∂x_{t−1}/∂x_t through the sg step is exactly zero.
        let j_sg = jacobian(&mut tape, sg, x2).unwrap();
        for row in &j_sg {
            assert!(row.iter().all(|v| *v == 0.0));
        }
        let j_plain = jacobian(&mut tape, plain, x1).unwrap();
        assert!(j_plain.iter().flatten().any(|v| *v != 0.0));
    }

    #[test]
    fn sg_step_parameter_jacobian_equals_direct_term() {
        // The direct θ-term of the undetached step equals the sg step's full
        // θ-Jacobian when both start from the same leaf state.
        let s = make_schedule(6, 1e-3, 0.05).unwrap();
        let mut tape = Tape::new();
        let denoiser = linear_denoiser(&mut tape, 3, 0.4);
        let x_data = vec![0.5, -0.3, 0.8];

        let x1 = tape.input(x_data.clone(), vec![3]).unwrap();
        let plain = reverse_step(&mut tape, x1, 2, COND, &denoiser, &s).unwrap();
        let j_theta_direct = jacobian_multi(&mut tape, plain, &[denoiser.w]).unwrap();

        let x2 = tape.input(x_data, vec![3]).unwrap();
        let sg = reverse_step_sg(&mut tape, x2, 2, COND, &denoiser, &s).unwrap();
        let j_theta_sg = jacobian_multi(&mut tape, sg, &[denoiser.w]).unwrap();

        for (a, b) in j_theta_direct[0].iter().zip(&j_theta_sg[0]) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn trajectories_identical_across_retention_modes() {
        let s = make_schedule(8, 1e-3, 0.05).unwrap();
        for seed in [0u64, 1, 99] {
            let mut tape_f = Tape::new();
            let den_f = linear_denoiser(&mut tape_f, 2, 0.3);
            let full =
                sample_trajectory(&mut tape_f, &den_f, COND, &s, Retention::Full, seed).unwrap();

            let mut tape_s = Tape::new();
            let den_s = linear_denoiser(&mut tape_s, 2, 0.3);
            let step =
                sample_trajectory(&mut tape_s, &den_s, COND, &s, Retention::Stepwise, seed)
                    .unwrap();

            assert_eq!(full.states.len(), step.states.len());
            for (a, b) in full.states.iter().zip(&step.states) {
                assert_eq!(tape_f.data(*a).unwrap(), tape_s.data(*b).unwrap());
            }
        }
    }

    #[test]
    fn stepwise_states_are_detached_except_newest() {
        let s = make_schedule(5, 1e-3, 0.05).unwrap();
        let mut tape = Tape::new();
        let den = linear_denoiser(&mut tape, 2, 0.3);
        let traj =
            sample_trajectory(&mut tape, &den, COND, &s, Retention::Stepwise, 7).unwrap();
        assert_eq!(traj.states.len(), 6);
        for id in &traj.states[1..traj.states.len() - 1] {
            assert!(tape.is_detached_leaf(*id).unwrap());
        }
        let newest = *traj.states.last().unwrap();
        assert!(!tape.is_leaf(newest).unwrap());
    }

    #[test]
    fn single_step_trajectory_has_two_states() {
        let s = make_schedule(1, 0.02, 0.02).unwrap();
        let mut tape = Tape::new();
        let den = linear_denoiser(&mut tape, 2, 0.3);
        let traj = sample_trajectory(&mut tape, &den, COND, &s, Retention::Full, 0).unwrap();
        assert_eq!(traj.states.len(), 2);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let s = make_schedule(6, 1e-3, 0.05).unwrap();
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let den = linear_denoiser(&mut tape, 2, 0.3);
            let traj = sample_trajectory(&mut tape, &den, COND, &s, Retention::Full, seed).unwrap();
            tape.data(*traj.states.last().unwrap()).unwrap().to_vec()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn full_retention_node_count_is_affine_in_t() {
        let count_for = |t_steps: usize| {
            let s = make_schedule(t_steps, 1e-3, 0.05).unwrap();
            let mut tape = Tape::new();
            let den = linear_denoiser(&mut tape, 2, 0.3);
            let base = tape.live_node_count();
            sample_trajectory(&mut tape, &den, COND, &s, Retention::Full, 0).unwrap();
            tape.live_node_count() - base
        };
        let (a, b, c) = (count_for(5), count_for(10), count_for(15));
        assert_eq!(b - a, c - b);
        assert!(b > a);
    }

    #[test]
    fn per_step_release_caps_the_peak() {
        // A full rollout retains ~T step graphs; releasing after every step
        // keeps the peak at one step graph, so the two peaks differ by ~T.
        let t_steps = 20;
        let s = make_schedule(t_steps, 1e-3, 0.05).unwrap();

        let mut tape = Tape::new();
        let den = linear_denoiser(&mut tape, 2, 0.3);
        let base = tape.live_node_count();
        tape.reset_peak();
        sample_trajectory(&mut tape, &den, COND, &s, Retention::Full, 0).unwrap();
        let peak_full = tape.peak_stats().retained_nodes - base;

        let mut tape2 = Tape::new();
        let den2 = linear_denoiser(&mut tape2, 2, 0.3);
        let base2 = tape2.live_node_count();
        tape2.reset_peak();
        let mut cur_data = seeds::standard_normal(0, 2);
        for t in (1..=t_steps).rev() {
            let cur = tape2.constant(cur_data.clone(), vec![2]).unwrap();
            let next = reverse_step_sg(&mut tape2, cur, t, COND, &den2, &s).unwrap();
            cur_data = tape2.data(next).unwrap().to_vec();
            tape2.release_graph();
        }
        let peak_step = tape2.peak_stats().retained_nodes - base2;

        let ratio = peak_full as f64 / peak_step as f64;
        assert!(
            ratio > 0.5 * t_steps as f64 && ratio < 1.5 * t_steps as f64,
            "ratio {ratio} for T={t_steps}"
        );
    }

    #[test]
    fn stochastic_option_changes_values_deterministically() {
        let s = make_schedule(6, 1e-3, 0.05).unwrap();
        let run = |stochastic: bool| {
            let mut tape = Tape::new();
            let den = linear_denoiser(&mut tape, 2, 0.3);
            let traj = sample_trajectory_with(
                &mut tape,
                &den,
                COND,
                &s,
                Retention::Full,
                3,
                SamplerOptions { stochastic },
            )
            .unwrap();
            tape.data(*traj.states.last().unwrap()).unwrap().to_vec()
        };
        assert_eq!(run(true), run(true));
        assert_ne!(run(true), run(false));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn schedule_invariants_hold(
                t_steps in 1usize..64,
                bs in 1e-6f64..0.4,
                extra in 0.0f64..0.5,
            ) {
                let be = (bs + extra).min(0.999);
                let s = make_schedule(t_steps, bs, be).unwrap();
                prop_assert_eq!(s.steps(), t_steps);
                for t in 1..=t_steps {
                    let b = s.beta_at(t).unwrap();
                    prop_assert!(b > 0.0 && b < 1.0);
                    let ab = s.alpha_bar_at(t).unwrap();
                    prop_assert!(ab > 0.0 && ab < 1.0);
                    if t > 1 {
                        prop_assert!(ab < s.alpha_bar_at(t - 1).unwrap());
                        prop_assert_eq!(ab, s.alpha_bar_at(t - 1).unwrap() * s.alpha_at(t).unwrap());
                    }
                }
            }

            #[test]
            fn forward_then_invert_is_identity(
                x0 in proptest::collection::vec(-2.0f64..2.0, 3),
                eps in proptest::collection::vec(-2.0f64..2.0, 3),
                t in 1usize..=50,
            ) {
                let s = default_schedule();
                let mut tape = Tape::new();
                let x0_id = tape.constant(x0.clone(), vec![3]).unwrap();
                let eps_id = tape.constant(eps.clone(), vec![3]).unwrap();
                let xt = forward_noise(&mut tape, x0_id, t, eps_id, &s).unwrap();
                let den = ConstDenoiser(eps);
                let back = one_step_predict(&mut tape, xt, t, COND, &den, &s).unwrap();
                for (a, b) in tape.data(back).unwrap().iter().zip(&x0) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
