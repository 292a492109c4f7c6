//! Finite-size secret key rate of symmetric 4-intensity MDI-QKD.
//!
//! Alice and Bob each prepare phase-randomized weak coherent pulses with one of
//! four intensities: the signal `s` (Z basis, used for key), the decoys `mu` and
//! `nu` (X basis) and vacuum. Both arms have the same length to the relay, so a
//! single transmittance `eta` describes the channel.
//!
//! The observable model is the standard analytic threshold-detector model for
//! MDI-QKD with symmetric arms. Single-photon-pair quantities are bounded with
//! a two-decoy analytic estimator on the X-basis pairs drawn from
//! `{vacuum, nu, mu}`, after every observed event count has been shifted to its
//! pessimistic Hoeffding-bounded value.

use std::cell::Cell;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeyRateError {
    #[error("invalid experimental parameters: {0}")]
    InvalidExperiment(String),
    #[error("invalid protocol parameters: {0}")]
    InvalidProtocol(String),
    #[error("finite-size deviation requires a positive count, got {0}")]
    EmptyCount(f64),
    #[error("decoy-state bounds are infeasible")]
    Infeasible,
}

/// Device and security constants that are fixed for a deployment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConstants {
    pub eta_d: f64,
    pub alpha_db_km: f64,
    pub f_e: f64,
    pub epsilon: f64,
}

impl Default for DeviceConstants {
    fn default() -> Self {
        Self {
            eta_d: 0.8,
            alpha_db_km: 0.2,
            f_e: 1.16,
            epsilon: 1e-7,
        }
    }
}

/// Experimental conditions: channel, detectors and statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentParams {
    /// Distance from either party to the relay, km.
    pub l_bc: f64,
    /// Dark count probability per detector per gate.
    pub y0: f64,
    /// Basis misalignment probability.
    pub e_d: f64,
    /// Total number of signals sent by Alice.
    pub n_signals: f64,
    pub eta_d: f64,
    pub alpha_db_km: f64,
    pub f_e: f64,
    pub epsilon: f64,
}

impl ExperimentParams {
    /// Conditions with the default device constants attached.
    pub fn new(l_bc: f64, y0: f64, e_d: f64, n_signals: f64) -> Self {
        Self::with_constants(l_bc, y0, e_d, n_signals, &DeviceConstants::default())
    }

    pub fn with_constants(
        l_bc: f64,
        y0: f64,
        e_d: f64,
        n_signals: f64,
        constants: &DeviceConstants,
    ) -> Self {
        Self {
            l_bc,
            y0,
            e_d,
            n_signals,
            eta_d: constants.eta_d,
            alpha_db_km: constants.alpha_db_km,
            f_e: constants.f_e,
            epsilon: constants.epsilon,
        }
    }

    pub fn constants(&self) -> DeviceConstants {
        DeviceConstants {
            eta_d: self.eta_d,
            alpha_db_km: self.alpha_db_km,
            f_e: self.f_e,
            epsilon: self.epsilon,
        }
    }

    pub fn at_distance(&self, l_bc: f64) -> Self {
        Self { l_bc, ..*self }
    }

    pub fn validate(&self) -> Result<(), KeyRateError> {
        let bad = |what: &str| Err(KeyRateError::InvalidExperiment(what.to_string()));
        let finite = [
            self.l_bc,
            self.y0,
            self.e_d,
            self.n_signals,
            self.eta_d,
            self.alpha_db_km,
            self.f_e,
            self.epsilon,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite value");
        }
        if self.l_bc < 0.0 {
            return bad("l_bc must be >= 0");
        }
        if !(self.eta_d > 0.0 && self.eta_d <= 1.0) {
            return bad("eta_d must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.y0) {
            return bad("y0 must lie in [0, 1)");
        }
        if !(0.0..0.5).contains(&self.e_d) {
            return bad("e_d must lie in [0, 0.5)");
        }
        if self.n_signals < 1.0 {
            return bad("n_signals must be >= 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if self.alpha_db_km < 0.0 || self.f_e < 1.0 {
            return bad("alpha must be >= 0 and f_e >= 1");
        }
        Ok(())
    }
}

/// The six free protocol parameters. The vacuum intensity is sent with the
/// remaining probability `1 - p_s - p_mu - p_nu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub s: f64,
    pub mu: f64,
    pub nu: f64,
    pub p_s: f64,
    pub p_mu: f64,
    pub p_nu: f64,
}

impl ProtocolParams {
    pub const LEN: usize = 6;
    pub const NAMES: [&'static str; 6] = ["s", "mu", "nu", "p_s", "p_mu", "p_nu"];

    pub fn new(s: f64, mu: f64, nu: f64, p_s: f64, p_mu: f64, p_nu: f64) -> Self {
        Self {
            s,
            mu,
            nu,
            p_s,
            p_mu,
            p_nu,
        }
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.s, self.mu, self.nu, self.p_s, self.p_mu, self.p_nu]
    }

    pub fn get(&self, axis: usize) -> f64 {
        self.to_array()[axis]
    }

    pub fn with(&self, axis: usize, value: f64) -> Self {
        let mut v = self.to_array();
        v[axis] = value;
        Self::from_array(v)
    }

    pub fn p_vacuum(&self) -> f64 {
        1.0 - self.p_s - self.p_mu - self.p_nu
    }

    pub fn validate(&self) -> Result<(), KeyRateError> {
        let bad = |what: &str| Err(KeyRateError::InvalidProtocol(what.to_string()));
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return bad("non-finite value");
        }
        if !(self.s > 0.0 && self.s <= 1.0) {
            return bad("s must lie in (0, 1]");
        }
        if !(self.nu > 0.0 && self.nu < self.mu && self.mu <= 1.0) {
            return bad("intensities must satisfy 0 < nu < mu <= 1");
        }
        for p in [self.p_s, self.p_mu, self.p_nu] {
            if !(p > 0.0 && p < 1.0) {
                return bad("probabilities must lie in (0, 1)");
            }
        }
        if self.p_vacuum() <= 0.0 {
            return bad("p_s + p_mu + p_nu must be < 1");
        }
        Ok(())
    }

    pub fn is_feasible(&self) -> bool {
        self.validate().is_ok()
    }
}

/// X-basis intensities available to the decoy analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intensity {
    Vacuum = 0,
    Weak = 1,
    Strong = 2,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Vacuum, Intensity::Weak, Intensity::Strong];

    pub fn mean_photons(self, p: &ProtocolParams) -> f64 {
        match self {
            Intensity::Vacuum => 0.0,
            Intensity::Weak => p.nu,
            Intensity::Strong => p.mu,
        }
    }

    pub fn probability(self, p: &ProtocolParams) -> f64 {
        match self {
            Intensity::Vacuum => p.p_vacuum(),
            Intensity::Weak => p.p_nu,
            Intensity::Strong => p.p_mu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairObservation {
    /// Probability of a successful Bell-state announcement per pulse pair.
    pub gain: f64,
    pub qber: f64,
    /// Expected number of pulse pairs sent with this intensity pair.
    pub count: f64,
}

impl PairObservation {
    pub fn error_gain(&self) -> f64 {
        self.gain * self.qber
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observables {
    /// Signal-signal pairs in the Z basis.
    pub signal_z: PairObservation,
    /// X-basis pairs indexed by `[alice as usize][bob as usize]`.
    pub decoy_x: [[PairObservation; 3]; 3],
    /// Mean photon numbers of the X-basis intensities, indexed like `decoy_x`.
    pub x_intensities: [f64; 3],
    /// Pulse pairs whose bases (or signal/decoy classes) do not match.
    pub mismatched_count: f64,
}

impl Observables {
    pub fn x(&self, alice: Intensity, bob: Intensity) -> &PairObservation {
        &self.decoy_x[alice as usize][bob as usize]
    }

    pub fn x_mut(&mut self, alice: Intensity, bob: Intensity) -> &mut PairObservation {
        &mut self.decoy_x[alice as usize][bob as usize]
    }

    pub fn total_count(&self) -> f64 {
        let x: f64 = self.decoy_x.iter().flatten().map(|o| o.count).sum();
        self.signal_z.count + x + self.mismatched_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoyEstimate {
    pub y11_lower: f64,
    pub e11_upper: f64,
}

/// How observed counts are shifted before entering the decoy estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fluctuation {
    /// Two-sided Hoeffding deviation at the experiment's epsilon.
    Hoeffding,
    /// Asymptotic limit: observed values are used as-is.
    Zero,
}

thread_local! {
    static EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `key_rate` evaluations performed on the calling thread.
pub fn evaluations_on_thread() -> u64 {
    EVALUATIONS.with(|c| c.get())
}

pub fn channel_transmittance(e: &ExperimentParams) -> f64 {
    e.eta_d * 10f64.powf(-e.alpha_db_km * e.l_bc / 10.0)
}

pub fn binary_entropy(x: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&x),
        "binary entropy argument {x} outside [0, 1]"
    );
    if x == 0.0 || x == 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// Hoeffding deviation, in event units, for `count` expected events.
pub fn finite_size_deviation(count: f64, epsilon: f64) -> Result<f64, KeyRateError> {
    if !(count > 0.0) || !count.is_finite() {
        return Err(KeyRateError::EmptyCount(count));
    }
    Ok((count * (1.0 / epsilon).ln() / 2.0).sqrt())
}

/// `I0(x) - 1`, summed without the leading 1 so small arguments keep full
/// relative precision.
fn bessel_i0_m1(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 0.0;
    for k in 1..500 {
        let kf = k as f64;
        term *= q / (kf * kf);
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    sum
}

#[cfg(test)]
fn bessel_i0(x: f64) -> f64 {
    1.0 + bessel_i0_m1(x)
}

/// Gains and error gains for one pulse pair, given the received mean photon
/// numbers `ta = eta * a` and `tb = eta * b`.
#[derive(Debug, Clone, Copy)]
struct PairModel {
    gain_z: f64,
    error_gain_z: f64,
    gain_x: f64,
    error_gain_x: f64,
}

/// `1 - (1 - y0) e^{-t}` without cancellation.
fn one_minus_kept(y0: f64, t: f64) -> f64 {
    -((-y0).ln_1p() - t).exp_m1()
}

fn pair_model(ta: f64, tb: f64, y0: f64, e_d: f64) -> PairModel {
    let total = ta + tb;
    let x = (ta * tb).sqrt() / 2.0;
    let keep = 1.0 - y0;
    let y = keep * (-total / 4.0).exp();
    let one_minus_y = one_minus_kept(y0, total / 4.0);
    let i0m1_x = bessel_i0_m1(x);
    let i0m1_2x = bessel_i0_m1(2.0 * x);
    let damp = (-total / 2.0).exp();

    let correct =
        2.0 * keep * keep * damp * one_minus_kept(y0, ta / 2.0) * one_minus_kept(y0, tb / 2.0);
    // I0(2x) - (1 - y0) e^{-total/2}
    let erroneous = 2.0 * y0 * keep * keep * damp * (i0m1_2x + one_minus_kept(y0, total / 2.0));
    let gain_z = correct + erroneous;
    let error_gain_z = e_d * correct + (1.0 - e_d) * erroneous;

    // 1 + 2y^2 - 4y I0(x) + I0(2x) = 2(1-y)^2 - 4y (I0(x)-1) + (I0(2x)-1)
    let bracket = 2.0 * one_minus_y * one_minus_y - 4.0 * y * i0m1_x + i0m1_2x;
    let gain_x = 2.0 * y * y * bracket;
    let error_gain_x = 0.5 * gain_x - 2.0 * (0.5 - e_d) * y * y * i0m1_2x;

    PairModel {
        gain_z: gain_z.clamp(0.0, 1.0),
        error_gain_z: error_gain_z.clamp(0.0, 1.0),
        gain_x: gain_x.clamp(0.0, 1.0),
        error_gain_x: error_gain_x.clamp(0.0, 1.0),
    }
}

fn observation(gain: f64, error_gain: f64, count: f64) -> PairObservation {
    // A pair that never clicks carries no bit information.
    let qber = if gain > 0.0 {
        (error_gain / gain).clamp(0.0, 1.0)
    } else {
        0.5
    };
    PairObservation { gain, qber, count }
}

pub fn simulate_observables(e: &ExperimentParams, p: &ProtocolParams) -> Observables {
    let eta = channel_transmittance(e);
    let n = e.n_signals;

    let z = pair_model(eta * p.s, eta * p.s, e.y0, e.e_d);
    let signal_z = observation(z.gain_z, z.error_gain_z, n * p.p_s * p.p_s);

    let mut decoy_x = [[PairObservation {
        gain: 0.0,
        qber: 0.0,
        count: 0.0,
    }; 3]; 3];
    let mut x_total = 0.0;
    for a in Intensity::ALL {
        for b in Intensity::ALL {
            let m = pair_model(
                eta * a.mean_photons(p),
                eta * b.mean_photons(p),
                e.y0,
                e.e_d,
            );
            let count = n * a.probability(p) * b.probability(p);
            x_total += count;
            decoy_x[a as usize][b as usize] = observation(m.gain_x, m.error_gain_x, count);
        }
    }

    Observables {
        signal_z,
        decoy_x,
        x_intensities: [0.0, p.nu, p.mu],
        mismatched_count: (n - signal_z.count - x_total).max(0.0),
    }
}

/// Single-photon-pair yield and error rate of the channel model, for checking
/// the decoy estimator.
pub fn single_photon_truth(e: &ExperimentParams) -> DecoyEstimate {
    let eta = channel_transmittance(e);
    let keep = 1.0 - e.y0;
    let y11 = keep
        * keep
        * (eta * eta / 2.0
            + (4.0 * eta - 3.0 * eta * eta) * e.y0
            + 4.0 * (1.0 - eta) * (1.0 - eta) * e.y0 * e.y0);
    let error_yield = y11 / 2.0 - (0.5 - e.e_d) * keep * keep * eta * eta / 2.0;
    DecoyEstimate {
        y11_lower: y11,
        e11_upper: error_yield / y11,
    }
}

/// Pessimistic per-pulse values `(lower, upper)` of an observed quantity.
fn fluctuated(
    per_pulse: f64,
    pulses: f64,
    epsilon: f64,
    mode: Fluctuation,
) -> Result<(f64, f64), KeyRateError> {
    if !(pulses > 0.0) {
        return Err(KeyRateError::EmptyCount(pulses));
    }
    let events = per_pulse * pulses;
    let delta = match mode {
        Fluctuation::Zero => 0.0,
        // Expected-zero events (no dark counts, no light) cannot fluctuate.
        Fluctuation::Hoeffding if events <= 0.0 => 0.0,
        Fluctuation::Hoeffding => finite_size_deviation(events, epsilon)?,
    };
    let lower = ((events - delta) / pulses).clamp(0.0, 1.0);
    let upper = ((events + delta) / pulses).clamp(0.0, 1.0);
    Ok((lower, upper))
}

pub fn decoy_bounds(
    obs: &Observables,
    e: &ExperimentParams,
) -> Result<DecoyEstimate, KeyRateError> {
    decoy_bounds_with(obs, e, Fluctuation::Hoeffding)
}

/// Two-decoy estimator for `Y11` and `e11` from the `{0, nu, mu}` X-basis pairs.
///
/// `S(a) = Q_aa e^{2a} - Q_0a e^a - Q_a0 e^a + Q_00` keeps only the terms where
/// both parties emitted photons, so `mu^3 S(nu) - nu^3 S(mu)` cancels the
/// three-photon terms and leaves `Y11 mu^2 nu^2 (mu - nu)` minus nonnegative
/// higher-order terms.
pub fn decoy_bounds_with(
    obs: &Observables,
    e: &ExperimentParams,
    mode: Fluctuation,
) -> Result<DecoyEstimate, KeyRateError> {
    use Intensity::{Strong, Vacuum, Weak};

    let gain = |a, b| {
        let o = obs.x(a, b);
        fluctuated(o.gain, o.count, e.epsilon, mode)
    };
    let error = |a, b| {
        let o = obs.x(a, b);
        fluctuated(o.error_gain(), o.count, e.epsilon, mode)
    };

    let mu = obs.x_intensities[Strong as usize];
    let nu = obs.x_intensities[Weak as usize];
    if !(nu > 0.0 && mu > nu) {
        return Err(KeyRateError::Infeasible);
    }

    let q00 = gain(Vacuum, Vacuum)?;
    let s_nu_lower = {
        let (nn, _) = gain(Weak, Weak)?;
        let (_, n0) = gain(Weak, Vacuum)?;
        let (_, zn) = gain(Vacuum, Weak)?;
        nn * (2.0 * nu).exp() - (n0 + zn) * nu.exp() + q00.0
    };
    let s_mu_upper = {
        let (_, mm) = gain(Strong, Strong)?;
        let (m0, _) = gain(Strong, Vacuum)?;
        let (zm, _) = gain(Vacuum, Strong)?;
        mm * (2.0 * mu).exp() - (m0 + zm) * mu.exp() + q00.1
    };
    let y11 = (mu.powi(3) * s_nu_lower - nu.powi(3) * s_mu_upper) / (mu * mu * nu * nu * (mu - nu));
    if !(y11 > 0.0) {
        return Err(KeyRateError::Infeasible);
    }
    let y11 = y11.min(1.0);

    let (_, t_nn) = error(Weak, Weak)?;
    let (t_n0, _) = error(Weak, Vacuum)?;
    let (t_0n, _) = error(Vacuum, Weak)?;
    let (_, t_00) = error(Vacuum, Vacuum)?;
    let t_nu = t_nn * (2.0 * nu).exp() - (t_n0 + t_0n) * nu.exp() + t_00;
    let e11 = (t_nu / (nu * nu * y11)).clamp(0.0, 1.0);
    if e11 >= 0.5 {
        return Err(KeyRateError::Infeasible);
    }
    Ok(DecoyEstimate {
        y11_lower: y11,
        e11_upper: e11,
    })
}

pub fn key_rate(e: &ExperimentParams, p: &ProtocolParams) -> Result<f64, KeyRateError> {
    key_rate_with(e, p, Fluctuation::Hoeffding)
}

/// Secret bits per pulse pair; zero whenever the decoy bounds are infeasible
/// or error correction costs more than privacy amplification leaves.
pub fn key_rate_with(
    e: &ExperimentParams,
    p: &ProtocolParams,
    mode: Fluctuation,
) -> Result<f64, KeyRateError> {
    e.validate()?;
    p.validate()?;
    EVALUATIONS.with(|c| c.set(c.get() + 1));

    let obs = simulate_observables(e, p);
    let bounds = match decoy_bounds_with(&obs, e, mode) {
        Ok(b) => b,
        Err(KeyRateError::Infeasible) | Err(KeyRateError::EmptyCount(_)) => return Ok(0.0),
        Err(other) => return Err(other),
    };
    let z = obs.signal_z;
    let privacy = p.s
        * p.s
        * (-2.0 * p.s).exp()
        * bounds.y11_lower
        * (1.0 - binary_entropy(bounds.e11_upper));
    let correction = e.f_e * z.gain * binary_entropy(z.qber.min(1.0));
    let rate = p.p_s * p.p_s * (privacy - correction);
    Ok(rate.clamp(0.0, 1.0))
}
