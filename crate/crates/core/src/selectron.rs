//! Discretized threshold neuron ("selectron") with spike-gated rewards and
//! its two-view (AMPA / NMDA) selective co-optimization.
//!
//! Sign and boundary conventions:
//! - a neuron spikes iff its excess current `<v, x> - theta` is strictly
//!   positive, so a neuron sitting exactly on threshold is silent;
//! - every `*_gradient` function returns the gradient of the matching
//!   objective (descent direction is its negation);
//! - at the spike boundary the derivative is taken from the spiking side.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectronState {
    /// AMPA weights, kept nonnegative.
    pub v: Vec<f64>,
    /// NMDA weights.
    pub w: Vec<f64>,
    pub theta: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha_co: f64,
}

impl SelectronState {
    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.v.iter().find(|&&x| !(x >= 0.0)) {
            return Err(Error::InvalidParameter(format!("AMPA weights must be nonnegative, found {bad}")));
        }
        if !self.theta.is_finite() || self.w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("threshold and NMDA weights must be finite".into()));
        }
        for (name, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha_co", self.alpha_co)] {
            if !(a >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be nonnegative, got {a}")));
            }
        }
        Ok(())
    }
}

/// AMPA patterns `x` in `{0,1}^N`, NMDA inputs `z`, and a neuromodulatory
/// signal per row (`None` marks an unlabeled row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuroBatch {
    pub x_rows: Vec<Vec<f64>>,
    pub z_rows: Vec<Vec<f64>>,
    pub mu: Vec<Option<f64>>,
}

impl NeuroBatch {
    pub fn new(x_rows: Vec<Vec<f64>>, z_rows: Vec<Vec<f64>>, mu: Vec<Option<f64>>) -> Result<Self> {
        check_dims("NMDA row count", x_rows.len(), z_rows.len())?;
        check_dims("signal count", x_rows.len(), mu.len())?;
        if let Some(first) = x_rows.first() {
            let n = first.len();
            for (i, row) in x_rows.iter().enumerate() {
                check_dims(&format!("AMPA row {i} length"), n, row.len())?;
                if row.iter().any(|&b| b != 0.0 && b != 1.0) {
                    return Err(Error::InvalidParameter(format!("AMPA row {i} is not binary")));
                }
            }
        }
        if let Some(first) = z_rows.first() {
            let n = first.len();
            for (i, row) in z_rows.iter().enumerate() {
                check_dims(&format!("NMDA row {i} length"), n, row.len())?;
            }
        }
        Ok(NeuroBatch { x_rows, z_rows, mu })
    }

    /// A batch in which every row is labeled; the NMDA view is left empty.
    pub fn labeled(x_rows: Vec<Vec<f64>>, mu: Vec<f64>) -> Result<Self> {
        let z_rows = vec![Vec::new(); x_rows.len()];
        NeuroBatch::new(x_rows, z_rows, mu.into_iter().map(Some).collect())
    }

    pub fn len(&self) -> usize {
        self.x_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_rows.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.mu.iter().filter(|m| m.is_some()).count()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.len() - self.labeled_count()
    }

    fn require_labeled(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        if self.unlabeled_count() > 0 {
            return Err(Error::InvalidParameter(format!(
                "batch has {} unlabeled rows; a fully labeled batch is required",
                self.unlabeled_count()
            )));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn excess_current(v: &[f64], theta: f64, x: &[f64]) -> Result<f64> {
    check_dims("pattern length", v.len(), x.len())?;
    Ok(dot(v, x) - theta)
}

/// Heaviside output with `H(0) = 0`.
pub fn spike(v: &[f64], theta: f64, x: &[f64]) -> Result<bool> {
    Ok(excess_current(v, theta, x)? > 0.0)
}

#[inline]
fn indicator(spiking: bool) -> f64 {
    if spiking {
        1.0
    } else {
        0.0
    }
}

/// Empirical mean of `mu * excess * spike`.
pub fn reward(v: &[f64], theta: f64, batch: &NeuroBatch) -> Result<f64> {
    batch.require_labeled()?;
    let mut total = 0.0;
    for (x, mu) in batch.x_rows.iter().zip(&batch.mu) {
        let e = excess_current(v, theta, x)?;
        total += mu.unwrap_or(0.0) * e * indicator(e > 0.0);
    }
    Ok(total / batch.len() as f64)
}

/// One plasticity step: `v + lr * mu * x * spike`, projected onto `v >= 0`.
pub fn stdp_update(v: &[f64], theta: f64, x: &[f64], mu: f64, lr: f64) -> Result<Vec<f64>> {
    if !(lr > 0.0) {
        return Err(Error::InvalidParameter(format!("learning rate must be positive, got {lr}")));
    }
    if !spike(v, theta, x)? {
        return Ok(v.to_vec());
    }
    Ok(v.iter().zip(x).map(|(vi, xi)| (vi + lr * mu * xi).max(0.0)).collect())
}

/// Selective linear regression: mean of `0.5 * ((mu - excess) * spike)^2`.
pub fn slr_objective(v: &[f64], theta: f64, batch: &NeuroBatch) -> Result<f64> {
    batch.require_labeled()?;
    let mut total = 0.0;
    for (x, mu) in batch.x_rows.iter().zip(&batch.mu) {
        let e = excess_current(v, theta, x)?;
        if e > 0.0 {
            let r = mu.unwrap_or(0.0) - e;
            total += 0.5 * r * r;
        }
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`slr_objective`] in `v`: `-mean((mu - excess) * x * spike)`.
/// Its negation is the spike-gated regression update.
pub fn slr_gradient(v: &[f64], theta: f64, batch: &NeuroBatch) -> Result<Vec<f64>> {
    batch.require_labeled()?;
    let n = batch.len() as f64;
    let mut grad = vec![0.0; v.len()];
    for (x, mu) in batch.x_rows.iter().zip(&batch.mu) {
        let e = excess_current(v, theta, x)?;
        if e >= 0.0 {
            let r = mu.unwrap_or(0.0) - e;
            for (g, xi) in grad.iter_mut().zip(x) {
                *g -= r * xi / n;
            }
        }
    }
    Ok(grad)
}

fn check_state_dims(state: &SelectronState, batch: &NeuroBatch) -> Result<()> {
    if let Some(x) = batch.x_rows.first() {
        check_dims("AMPA weight length", x.len(), state.v.len())?;
    }
    if let Some(z) = batch.z_rows.first() {
        check_dims("NMDA weight length", z.len(), state.w.len())?;
    }
    Ok(())
}

/// Selective co-regularized least squares:
/// labeled mean of `(a1 * excess * spike - mu)^2 + (a2 * <w, z> - mu)^2`
/// plus unlabeled mean of `a_co * (excess - <w, z>)^2`.
pub fn coopt_objective(state: &SelectronState, batch: &NeuroBatch) -> Result<f64> {
    check_state_dims(state, batch)?;
    let labeled = batch.labeled_count();
    if labeled == 0 {
        return Err(Error::InsufficientData("co-optimization needs labeled rows".into()));
    }
    let unlabeled = batch.unlabeled_count();
    let (mut lab, mut unl) = (0.0, 0.0);
    for i in 0..batch.len() {
        let e = dot(&state.v, &batch.x_rows[i]) - state.theta;
        let g = dot(&state.w, &batch.z_rows[i]);
        match batch.mu[i] {
            Some(mu) => {
                let f = indicator(e > 0.0);
                lab += (state.alpha1 * e * f - mu).powi(2) + (state.alpha2 * g - mu).powi(2);
            }
            None => unl += state.alpha_co * (e - g).powi(2),
        }
    }
    let mut total = lab / labeled as f64;
    if unlabeled > 0 {
        total += unl / unlabeled as f64;
    }
    Ok(total)
}

/// Gradient of [`coopt_objective`] in `(v, w)`, one-sided at the spike boundary.
pub fn coopt_gradient(state: &SelectronState, batch: &NeuroBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    check_state_dims(state, batch)?;
    let labeled = batch.labeled_count();
    if labeled == 0 {
        return Err(Error::InsufficientData("co-optimization needs labeled rows".into()));
    }
    let unlabeled = batch.unlabeled_count();
    let mut gv = vec![0.0; state.v.len()];
    let mut gw = vec![0.0; state.w.len()];
    for i in 0..batch.len() {
        accumulate_row_gradient(state, batch, i, labeled, unlabeled, &mut gv, &mut gw);
    }
    Ok((gv, gw))
}

fn accumulate_row_gradient(
    state: &SelectronState,
    batch: &NeuroBatch,
    i: usize,
    labeled: usize,
    unlabeled: usize,
    gv: &mut [f64],
    gw: &mut [f64],
) {
    let x = &batch.x_rows[i];
    let z = &batch.z_rows[i];
    let e = dot(&state.v, x) - state.theta;
    let g = dot(&state.w, z);
    match batch.mu[i] {
        Some(mu) => {
            let scale = 1.0 / labeled as f64;
            if e >= 0.0 {
                let c = 2.0 * (state.alpha1 * e - mu) * state.alpha1 * scale;
                gv.iter_mut().zip(x).for_each(|(o, xi)| *o += c * xi);
            }
            let c = 2.0 * (state.alpha2 * g - mu) * state.alpha2 * scale;
            gw.iter_mut().zip(z).for_each(|(o, zi)| *o += c * zi);
        }
        None => {
            let c = 2.0 * state.alpha_co * (e - g) / unlabeled as f64;
            gv.iter_mut().zip(x).for_each(|(o, xi)| *o += c * xi);
            gw.iter_mut().zip(z).for_each(|(o, zi)| *o -= c * zi);
        }
    }
}

/// The reward form of the two-view neuron (to be maximized):
/// `mu * excess * spike + mu * <w, z> - a1/2 * excess^2 * spike - a2/2 * <w, z>^2`
/// averaged over labeled rows, plus `a_co * excess * <w, z>` averaged over
/// every row. Only used as an evaluator alongside [`coopt_objective`].
pub fn coopt_reward_form(state: &SelectronState, batch: &NeuroBatch) -> Result<f64> {
    check_state_dims(state, batch)?;
    let labeled = batch.labeled_count();
    if labeled == 0 {
        return Err(Error::InsufficientData("reward form needs labeled rows".into()));
    }
    let (mut lab, mut modulation) = (0.0, 0.0);
    for i in 0..batch.len() {
        let e = dot(&state.v, &batch.x_rows[i]) - state.theta;
        let g = dot(&state.w, &batch.z_rows[i]);
        modulation += state.alpha_co * e * g;
        if let Some(mu) = batch.mu[i] {
            let f = indicator(e > 0.0);
            lab += mu * e * f + mu * g - 0.5 * state.alpha1 * e * e * f - 0.5 * state.alpha2 * g * g;
        }
    }
    Ok(lab / labeled as f64 + modulation / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Full-batch projected subgradient descent with step halving; never
    /// increases the objective.
    Batch,
    /// One projected step per row in a seeded random order; no monotonicity
    /// guarantee.
    Online,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub mode: TrainMode,
    pub seed: u64,
}

impl TrainConfig {
    pub fn batch(lr: f64, epochs: usize) -> Self {
        TrainConfig {
            lr,
            epochs,
            mode: TrainMode::Batch,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub state: SelectronState,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub accepted_steps: usize,
}

const MAX_HALVINGS: usize = 50;

fn projected_step(state: &SelectronState, gv: &[f64], gw: &[f64], lr: f64) -> SelectronState {
    let mut next = state.clone();
    next.v.iter_mut().zip(gv).for_each(|(v, g)| *v = (*v - lr * g).max(0.0));
    next.w.iter_mut().zip(gw).for_each(|(w, g)| *w -= lr * g);
    next
}

fn finite_objective(state: &SelectronState, batch: &NeuroBatch) -> Result<f64> {
    let obj = coopt_objective(state, batch)?;
    if !obj.is_finite() {
        return Err(Error::Numerical("objective became non-finite; learning rate diverges".into()));
    }
    Ok(obj)
}

/// Trains the two-view neuron on [`coopt_objective`].
pub fn train_selectron_coopt(init: &SelectronState, batch: &NeuroBatch, config: &TrainConfig) -> Result<TrainOutcome> {
    init.validate()?;
    if !(config.lr > 0.0 && config.lr.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate must be positive, got {}", config.lr)));
    }
    let initial = finite_objective(init, batch)?;
    match config.mode {
        TrainMode::Batch => train_batch(init, batch, config, initial),
        TrainMode::Online => train_online(init, batch, config, initial),
    }
}

fn train_batch(init: &SelectronState, batch: &NeuroBatch, config: &TrainConfig, initial: f64) -> Result<TrainOutcome> {
    let mut state = init.clone();
    let mut obj = initial;
    let mut lr = config.lr;
    let mut accepted = 0;
    'epochs: for _ in 0..config.epochs {
        let (gv, gw) = coopt_gradient(&state, batch)?;
        if gv.iter().chain(&gw).all(|g| *g == 0.0) {
            break;
        }
        let mut step = lr;
        for _ in 0..MAX_HALVINGS {
            let cand = projected_step(&state, &gv, &gw, step);
            let cand_obj = finite_objective(&cand, batch)?;
            if cand_obj <= obj {
                let moved = cand != state;
                state = cand;
                obj = cand_obj;
                accepted += 1;
                lr = (step * 2.0).min(config.lr);
                if !moved {
                    break 'epochs;
                }
                continue 'epochs;
            }
            step *= 0.5;
        }
        // no descent step found: numerically stationary
        break;
    }
    debug_assert!(state.v.iter().all(|&v| v >= 0.0));
    Ok(TrainOutcome {
        state,
        initial_objective: initial,
        final_objective: obj,
        accepted_steps: accepted,
    })
}

fn train_online(init: &SelectronState, batch: &NeuroBatch, config: &TrainConfig, initial: f64) -> Result<TrainOutcome> {
    let mut rng = substream(config.seed, "selectron-online", &[]);
    if batch.labeled_count() == 0 {
        return Err(Error::InsufficientData("co-optimization needs labeled rows".into()));
    }
    let mut state = init.clone();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut steps = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let mut gv = vec![0.0; state.v.len()];
            let mut gw = vec![0.0; state.w.len()];
            // single-row gradient, unscaled by the partition sizes
            accumulate_row_gradient(&state, batch, i, 1, 1, &mut gv, &mut gw);
            state = projected_step(&state, &gv, &gw, config.lr);
            steps += 1;
        }
        finite_objective(&state, batch)?;
    }
    let final_objective = finite_objective(&state, batch)?;
    Ok(TrainOutcome {
        state,
        initial_objective: initial,
        final_objective,
        accepted_steps: steps,
    })
}

/// Rule generating the neuromodulatory signal from an AMPA pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SignalRule {
    /// `reward` when both bits are active, otherwise `penalty`.
    Conjunction { bits: [usize; 2], reward: f64, penalty: f64 },
    /// `reward` when exactly one of the two bits is active, otherwise `penalty`.
    Xor { bits: [usize; 2], reward: f64, penalty: f64 },
    /// `<weights, x> + bias`.
    Linear { weights: Vec<f64>, bias: f64 },
}

impl SignalRule {
    pub fn signal(&self, x: &[f64]) -> f64 {
        match self {
            SignalRule::Conjunction { bits, reward, penalty } => {
                if x[bits[0]] > 0.5 && x[bits[1]] > 0.5 {
                    *reward
                } else {
                    *penalty
                }
            }
            SignalRule::Xor { bits, reward, penalty } => {
                if (x[bits[0]] > 0.5) != (x[bits[1]] > 0.5) {
                    *reward
                } else {
                    *penalty
                }
            }
            SignalRule::Linear { weights, bias } => dot(weights, x) + bias,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            SignalRule::Conjunction { bits, .. } | SignalRule::Xor { bits, .. } => {
                if bits.iter().any(|&b| b >= dim) || bits[0] == bits[1] {
                    return Err(Error::Config(format!("rule bits {bits:?} invalid for dimension {dim}")));
                }
            }
            SignalRule::Linear { weights, .. } => check_dims("linear rule weights", dim, weights.len())
                .map_err(|e| Error::Config(e.to_string()))?,
        }
        Ok(())
    }
}

fn default_p_active() -> f64 {
    0.5
}
fn default_theta() -> f64 {
    0.5
}
fn default_init_weight() -> f64 {
    0.25
}
fn default_one() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    0.5
}
fn default_epochs() -> usize {
    500
}

/// Synthetic neuromodulation task, read from JSON scenario files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// AMPA pattern dimension.
    pub dim: usize,
    pub rule: SignalRule,
    /// Standard deviation of Gaussian noise added to the signal.
    #[serde(default)]
    pub signal_noise: f64,
    pub labeled: usize,
    pub unlabeled: usize,
    /// Held-out labeled rows used to judge specialization.
    pub test: usize,
    pub seed: u64,
    /// Probability that an AMPA bit is active.
    #[serde(default = "default_p_active")]
    pub p_active: f64,
    /// NMDA view: the AMPA pattern plus Gaussian noise of this scale.
    #[serde(default)]
    pub nmda_noise: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Mean initial AMPA weight; per-synapse values are jittered by the seed.
    #[serde(default = "default_init_weight")]
    pub init_weight: f64,
    #[serde(default = "default_one")]
    pub alpha1: f64,
    #[serde(default = "default_one")]
    pub alpha2: f64,
    #[serde(default = "default_one")]
    pub alpha_co: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("scenario dim must be positive".into()));
        }
        if self.labeled == 0 {
            return Err(Error::Config("scenario needs labeled rows".into()));
        }
        if !(0.0..=1.0).contains(&self.p_active) {
            return Err(Error::Config("p_active must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0) || !(self.signal_noise >= 0.0) || !(self.nmda_noise >= 0.0) {
            return Err(Error::Config("lr must be positive and noise scales nonnegative".into()));
        }
        self.rule.validate(self.dim)
    }

    fn sample_rows(&self, rng: &mut crate::rng::StreamRng, count: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let mut xs = Vec::with_capacity(count);
        let mut zs = Vec::with_capacity(count);
        let mut mus = Vec::with_capacity(count);
        for _ in 0..count {
            let x: Vec<f64> = (0..self.dim)
                .map(|_| if rng.random_bool(self.p_active) { 1.0 } else { 0.0 })
                .collect();
            let z: Vec<f64> = x
                .iter()
                .map(|&b| {
                    let n: f64 = StandardNormal.sample(rng);
                    b + self.nmda_noise * n
                })
                .collect();
            let n: f64 = StandardNormal.sample(rng);
            mus.push(self.rule.signal(&x) + self.signal_noise * n);
            xs.push(x);
            zs.push(z);
        }
        (xs, zs, mus)
    }

    /// Training batch (labeled + unlabeled) and a labeled held-out batch for
    /// the given replicate seed.
    pub fn generate(&self, replicate: u64) -> Result<(NeuroBatch, NeuroBatch)> {
        let mut rng = substream(self.seed, "scenario-data", &[replicate]);
        let (mut xs, mut zs, mus) = self.sample_rows(&mut rng, self.labeled);
        let mut mu: Vec<Option<f64>> = mus.into_iter().map(Some).collect();
        let (ux, uz, _) = self.sample_rows(&mut rng, self.unlabeled);
        xs.extend(ux);
        zs.extend(uz);
        mu.extend(std::iter::repeat_n(None, self.unlabeled));
        let train = NeuroBatch::new(xs, zs, mu)?;
        let (tx, tz, tm) = self.sample_rows(&mut rng, self.test);
        let test = NeuroBatch::new(tx, tz, tm.into_iter().map(Some).collect())?;
        Ok((train, test))
    }

    pub fn initial_state(&self, replicate: u64) -> SelectronState {
        let mut rng = substream(self.seed, "scenario-init", &[replicate]);
        SelectronState {
            v: (0..self.dim)
                .map(|_| self.init_weight * rng.random_range(0.5..1.5))
                .collect(),
            w: vec![0.0; self.dim],
            theta: self.theta,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            alpha_co: self.alpha_co,
        }
    }
}

/// How a trained neuron splits held-out rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Specialization {
    pub spiking: usize,
    pub silent: usize,
    pub mean_signal_spiking: Option<f64>,
    pub mean_signal_silent: Option<f64>,
}

impl Specialization {
    /// True when both groups are non-empty and spiking rows carry the higher
    /// mean signal.
    pub fn is_selective(&self) -> bool {
        matches!((self.mean_signal_spiking, self.mean_signal_silent), (Some(a), Some(b)) if a > b)
    }
}

pub fn specialization(state: &SelectronState, held_out: &NeuroBatch) -> Result<Specialization> {
    let (mut sp, mut si) = ((0usize, 0.0), (0usize, 0.0));
    for (x, mu) in held_out.x_rows.iter().zip(&held_out.mu) {
        let Some(mu) = mu else { continue };
        if spike(&state.v, state.theta, x)? {
            sp = (sp.0 + 1, sp.1 + mu);
        } else {
            si = (si.0 + 1, si.1 + mu);
        }
    }
    let mean = |(n, s): (usize, f64)| (n > 0).then(|| s / n as f64);
    Ok(Specialization {
        spiking: sp.0,
        silent: si.0,
        mean_signal_spiking: mean(sp),
        mean_signal_silent: mean(si),
    })
}
