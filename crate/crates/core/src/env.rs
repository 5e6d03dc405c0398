//! Discrete-time plants with tokenized actions: a point mass (SMSM), a
//! triple inverted pendulum on a cart (TLMDCP) and a rotor-driven attitude
//! stabilizer (PAC). All are advanced by semi-implicit Euler.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, Matrix4, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::generator::{Source, TokenSequence};
use crate::tensor::Matrix;

pub const DIVERGENCE_NORM: f64 = 1e6;
pub const DEFAULT_DT: f64 = 0.02;
pub const GRAVITY: f64 = 9.81;
const LINEARIZE_STEP: f64 = 1e-6;

pub type PlantState = Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlantKind {
    #[serde(rename = "SMSM")]
    Smsm,
    #[serde(rename = "TLMDCP")]
    Tlmdcp,
    #[serde(rename = "PAC")]
    Pac,
}

impl PlantKind {
    pub fn state_dim(self) -> usize {
        match self {
            PlantKind::Smsm => 2,
            PlantKind::Tlmdcp => 8,
            PlantKind::Pac => 6,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            PlantKind::Smsm | PlantKind::Tlmdcp => 1,
            PlantKind::Pac => 4,
        }
    }

    /// Which state components are angles (wrapped to (−π, π]).
    pub fn angle_mask(self) -> Vec<bool> {
        match self {
            PlantKind::Smsm => vec![false; 2],
            PlantKind::Tlmdcp => vec![false, false, true, false, true, false, true, false],
            PlantKind::Pac => vec![true, true, true, false, false, false],
        }
    }
}

impl std::fmt::Display for PlantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlantKind::Smsm => "SMSM",
            PlantKind::Tlmdcp => "TLMDCP",
            PlantKind::Pac => "PAC",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PhysicalParams {
    Smsm {
        mass: f64,
    },
    Tlmdcp {
        cart_mass: f64,
        link_masses: [f64; 3],
        link_lengths: [f64; 3],
        gravity: f64,
    },
    Pac {
        mass: f64,
        inertia: [f64; 3],
        arm_length: f64,
        /// Rotor drag-torque to thrust ratio (m).
        yaw_coeff: f64,
        gravity: f64,
    },
}

impl PhysicalParams {
    pub fn nominal(kind: PlantKind) -> Self {
        match kind {
            PlantKind::Smsm => PhysicalParams::Smsm { mass: 1.0 },
            PlantKind::Tlmdcp => PhysicalParams::Tlmdcp {
                cart_mass: 1.0,
                link_masses: [0.1; 3],
                link_lengths: [0.5; 3],
                gravity: GRAVITY,
            },
            PlantKind::Pac => PhysicalParams::Pac {
                mass: 1.0,
                inertia: [0.02, 0.02, 0.04],
                arm_length: 0.2,
                yaw_coeff: 0.02,
                gravity: GRAVITY,
            },
        }
    }

    pub fn kind(&self) -> PlantKind {
        match self {
            PhysicalParams::Smsm { .. } => PlantKind::Smsm,
            PhysicalParams::Tlmdcp { .. } => PlantKind::Tlmdcp,
            PhysicalParams::Pac { .. } => PlantKind::Pac,
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            PhysicalParams::Smsm { mass } => vec![*mass],
            PhysicalParams::Tlmdcp {
                cart_mass,
                link_masses,
                link_lengths,
                gravity,
            } => {
                let mut v = vec![*cart_mass, *gravity];
                v.extend_from_slice(link_masses);
                v.extend_from_slice(link_lengths);
                v
            }
            PhysicalParams::Pac {
                mass,
                inertia,
                arm_length,
                yaw_coeff,
                gravity,
            } => {
                let mut v = vec![*mass, *arm_length, *yaw_coeff, *gravity];
                v.extend_from_slice(inertia);
                v
            }
        }
    }

    /// Scale masses, lengths and inertias by independent factors in
    /// `[1 − spread, 1 + spread]`; gravity is left alone.
    pub fn perturbed<R: Rng + ?Sized>(&self, spread: f64, rng: &mut R) -> Self {
        let mut f = || 1.0 + rng.random_range(-spread..=spread);
        match self.clone() {
            PhysicalParams::Smsm { mass } => PhysicalParams::Smsm { mass: mass * f() },
            PhysicalParams::Tlmdcp {
                cart_mass,
                link_masses,
                link_lengths,
                gravity,
            } => PhysicalParams::Tlmdcp {
                cart_mass: cart_mass * f(),
                link_masses: link_masses.map(|m| m * f()),
                link_lengths: link_lengths.map(|l| l * f()),
                gravity,
            },
            PhysicalParams::Pac {
                mass,
                inertia,
                arm_length,
                yaw_coeff,
                gravity,
            } => PhysicalParams::Pac {
                mass: mass * f(),
                inertia: inertia.map(|i| i * f()),
                arm_length: arm_length * f(),
                yaw_coeff: yaw_coeff * f(),
                gravity,
            },
        }
    }
}

/// Per-dimension evenly spaced levels; tokens are mixed-radix with
/// dimension 0 as the least significant digit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    pub levels: Vec<usize>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionGrid {
    pub fn new(levels: Vec<usize>, low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        let g = Self { levels, low, high };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty()
            || self.levels.len() != self.low.len()
            || self.levels.len() != self.high.len()
        {
            return input_err("action grid dimensions disagree");
        }
        if self.levels.contains(&0) {
            return input_err("action grid needs at least one level per dimension");
        }
        if self
            .low
            .iter()
            .zip(&self.high)
            .any(|(l, h)| !(l.is_finite() && h.is_finite() && l <= h))
        {
            return input_err("action grid bounds must be finite with low <= high");
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.levels.len()
    }

    pub fn vocab(&self) -> usize {
        self.levels.iter().product()
    }

    fn level_value(&self, dim: usize, idx: usize) -> f64 {
        let n = self.levels[dim];
        if n == 1 {
            return 0.5 * (self.low[dim] + self.high[dim]);
        }
        self.low[dim] + (self.high[dim] - self.low[dim]) * idx as f64 / (n - 1) as f64
    }

    pub fn indices(&self, token: usize) -> Result<Vec<usize>> {
        if token >= self.vocab() {
            return input_err(format!("token {token} outside vocabulary {}", self.vocab()));
        }
        let mut rest = token;
        Ok(self
            .levels
            .iter()
            .map(|&n| {
                let i = rest % n;
                rest /= n;
                i
            })
            .collect())
    }

    pub fn token_of_indices(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.dims() || idx.iter().zip(&self.levels).any(|(i, n)| i >= n) {
            return input_err("grid indices out of range");
        }
        let mut token = 0;
        for d in (0..self.dims()).rev() {
            token = token * self.levels[d] + idx[d];
        }
        Ok(token)
    }

    pub fn detokenize(&self, token: usize) -> Result<Vec<f64>> {
        let idx = self.indices(token)?;
        Ok(idx
            .iter()
            .enumerate()
            .map(|(d, &i)| self.level_value(d, i))
            .collect())
    }

    /// Nearest grid point per dimension (ties to the lower level).
    pub fn tokenize(&self, action: &[f64]) -> Result<usize> {
        if action.len() != self.dims() {
            return input_err("action dimension does not match the grid");
        }
        let idx: Vec<usize> = (0..self.dims())
            .map(|d| {
                let n = self.levels[d];
                if n == 1 || self.high[d] == self.low[d] {
                    return 0;
                }
                let t = (action[d] - self.low[d]) / (self.high[d] - self.low[d]) * (n - 1) as f64;
                let t = if t.is_nan() { 0.0 } else { t };
                let i = (t - 0.5).ceil().clamp(0.0, (n - 1) as f64);
                i as usize
            })
            .collect();
        self.token_of_indices(&idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub c_state: f64,
    pub c_action: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            c_state: 1.0,
            c_action: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub kind: PlantKind,
    pub params: PhysicalParams,
    pub goal: PlantState,
    pub dt: f64,
    pub horizon: usize,
    pub grid: ActionGrid,
    /// Action that costs nothing: zero force, or hover thrust for PAC.
    pub rest_action: Vec<f64>,
    pub weights: RewardWeights,
    /// Episodes start at `initial_state + U[−init_spread, init_spread]`.
    pub initial_state: PlantState,
    pub init_spread: Vec<f64>,
}

impl PlantSpec {
    pub fn nominal(kind: PlantKind) -> Self {
        Self::with_params(PhysicalParams::nominal(kind))
    }

    pub fn with_params(params: PhysicalParams) -> Self {
        let kind = params.kind();
        let n = kind.state_dim();
        let (grid, rest_action, initial_state, init_spread) = match &params {
            PhysicalParams::Smsm { .. } => (
                ActionGrid::new(vec![5], vec![-1.0], vec![1.0]).unwrap(),
                vec![0.0],
                vec![0.0, 0.0],
                vec![1.0, 0.0],
            ),
            PhysicalParams::Tlmdcp { .. } => {
                // the quantized LQR expert only recovers from small tilts
                let mut spread = vec![0.0; 8];
                for a in [2, 4, 6] {
                    spread[a] = 0.01;
                }
                (
                    ActionGrid::new(vec![7], vec![-10.0], vec![10.0]).unwrap(),
                    vec![0.0],
                    vec![0.0; 8],
                    spread,
                )
            }
            PhysicalParams::Pac { mass, gravity, .. } => {
                let hover = mass * gravity / 4.0;
                (
                    ActionGrid::new(vec![3; 4], vec![0.8 * hover; 4], vec![1.2 * hover; 4]).unwrap(),
                    vec![hover; 4],
                    vec![0.0; 6],
                    vec![0.2, 0.2, 0.2, 0.0, 0.0, 0.0],
                )
            }
        };
        Self {
            kind,
            params,
            goal: vec![0.0; n],
            dt: DEFAULT_DT,
            horizon: 150,
            grid,
            rest_action,
            weights: RewardWeights::default(),
            initial_state,
            init_spread,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kind.state_dim();
        let m = self.kind.action_dim();
        if self.params.kind() != self.kind {
            return input_err("physical parameters do not match the plant kind");
        }
        if !(self.dt > 0.0) || self.horizon == 0 {
            return input_err("dt must be > 0 and horizon >= 1");
        }
        if self.params.values().iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return input_err("physical parameters must be positive and finite");
        }
        self.grid.validate()?;
        if self.grid.dims() != m || self.rest_action.len() != m {
            return input_err("action dimensions do not match the plant");
        }
        if self.goal.len() != n || self.initial_state.len() != n || self.init_spread.len() != n {
            return input_err("state dimensions do not match the plant");
        }
        if !(self.weights.c_state > 0.0 && self.weights.c_action > 0.0) {
            return input_err("reward weights must be positive");
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.grid.vocab()
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn detokenize(&self, token: usize) -> Result<Vec<f64>> {
        self.grid.detokenize(token)
    }

    pub fn tokenize(&self, action: &[f64]) -> Result<usize> {
        self.grid.tokenize(action)
    }

    /// Token of the grid point nearest to the rest action.
    pub fn rest_token(&self) -> usize {
        self.grid.tokenize(&self.rest_action).unwrap_or(0)
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> PlantState {
        let mut x: PlantState = self
            .initial_state
            .iter()
            .zip(&self.init_spread)
            .map(|(&c, &s)| if s > 0.0 { c + rng.random_range(-s..=s) } else { c })
            .collect();
        wrap_angles(self.kind, &mut x);
        x
    }
}

/// Wrap into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    } else if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

fn wrap_angles(kind: PlantKind, x: &mut [f64]) {
    for (v, is_angle) in x.iter_mut().zip(kind.angle_mask()) {
        if is_angle {
            *v = wrap_angle(*v);
        }
    }
}

/// `−c_state‖state − goal‖² − c_action‖action − rest‖²`, with angle
/// differences wrapped.
pub fn reward(spec: &PlantSpec, state: &[f64], action: &[f64], weights: &RewardWeights) -> f64 {
    let mask = spec.kind.angle_mask();
    let ds: f64 = state
        .iter()
        .zip(&spec.goal)
        .zip(mask)
        .map(|((s, g), ang)| {
            let d = if ang { wrap_angle(s - g) } else { s - g };
            d * d
        })
        .sum();
    let da: f64 = action
        .iter()
        .zip(&spec.rest_action)
        .map(|(a, r)| (a - r).powi(2))
        .sum();
    -weights.c_state * ds - weights.c_action * da
}

fn tlmdcp_accel(
    cart_mass: f64,
    m: &[f64; 3],
    l: &[f64; 3],
    g: f64,
    x: &[f64],
    u: f64,
) -> Result<Vector4<f64>> {
    let th = [x[2], x[4], x[6]];
    let om = [x[3], x[5], x[7]];
    // mass carried at or beyond each link
    let mu = [m[0] + m[1] + m[2], m[1] + m[2], m[2]];
    let mut mm = Matrix4::<f64>::zeros();
    let mut rhs = Vector4::<f64>::zeros();
    mm[(0, 0)] = cart_mass + mu[0];
    rhs[0] = u;
    for j in 0..3 {
        let c = mu[j] * l[j] * th[j].cos();
        mm[(0, j + 1)] = c;
        mm[(j + 1, 0)] = c;
        rhs[0] += mu[j] * l[j] * th[j].sin() * om[j] * om[j];
        rhs[j + 1] = g * mu[j] * l[j] * th[j].sin();
        for k in 0..3 {
            let mjk = mu[j.max(k)] * l[j] * l[k];
            mm[(j + 1, k + 1)] = mjk * (th[j] - th[k]).cos();
            rhs[j + 1] -= mjk * (th[j] - th[k]).sin() * om[k] * om[k];
        }
    }
    mm.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular cart-pole mass matrix".into()))
}

/// One semi-implicit Euler step under a continuous action vector.
pub fn advance(spec: &PlantSpec, state: &[f64], action: &[f64]) -> Result<PlantState> {
    let dt = spec.dt;
    let mut x = state.to_vec();
    match &spec.params {
        PhysicalParams::Smsm { mass } => {
            x[1] += dt * action[0] / mass;
            x[0] += dt * x[1];
        }
        PhysicalParams::Tlmdcp {
            cart_mass,
            link_masses,
            link_lengths,
            gravity,
        } => {
            let acc = tlmdcp_accel(*cart_mass, link_masses, link_lengths, *gravity, &x, action[0])?;
            for q in 0..4 {
                x[2 * q + 1] += dt * acc[q];
                x[2 * q] += dt * x[2 * q + 1];
            }
        }
        PhysicalParams::Pac {
            inertia,
            arm_length,
            yaw_coeff,
            ..
        } => {
            let u = action;
            let tau = [
                arm_length * (u[1] - u[3]),
                arm_length * (u[2] - u[0]),
                yaw_coeff * (u[0] - u[1] + u[2] - u[3]),
            ];
            let w = [x[3], x[4], x[5]];
            let iw = [inertia[0] * w[0], inertia[1] * w[1], inertia[2] * w[2]];
            let gyro = [
                w[1] * iw[2] - w[2] * iw[1],
                w[2] * iw[0] - w[0] * iw[2],
                w[0] * iw[1] - w[1] * iw[0],
            ];
            for a in 0..3 {
                x[3 + a] += dt * (tau[a] - gyro[a]) / inertia[a];
            }
            let (p, q, r) = (x[3], x[4], x[5]);
            let (phi, theta) = (x[0], x[1]);
            let (sp, cp) = phi.sin_cos();
            let ct = theta.cos();
            let tt = theta.tan();
            x[0] += dt * (p + sp * tt * q + cp * tt * r);
            x[1] += dt * (cp * q - sp * r);
            x[2] += dt * (sp / ct * q + cp / ct * r);
        }
    }
    wrap_angles(spec.kind, &mut x);
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: PlantState,
    pub reward: f64,
}

/// Advance by one token. A non-finite state or one with norm above
/// `DIVERGENCE_NORM` yields `Error::Diverged` with `step = 0`; rollout
/// helpers rewrite the step index.
pub fn step(spec: &PlantSpec, state: &[f64], token: usize) -> Result<Transition> {
    if state.len() != spec.state_dim() {
        return input_err("state dimension does not match the plant");
    }
    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("plant state is not finite".into()));
    }
    let action = spec.detokenize(token)?;
    let next = advance(spec, state, &action)?;
    let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm <= DIVERGENCE_NORM) {
        return Err(Error::Diverged { step: 0, norm });
    }
    let r = reward(spec, &next, &action, &spec.weights);
    Ok(Transition {
        state: next,
        reward: r,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `horizon + 1` states, starting with the initial one.
    pub states: Vec<PlantState>,
    pub tokens: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

fn at_step(e: Error, t: usize) -> Error {
    match e {
        Error::Diverged { norm, .. } => Error::Diverged { step: t, norm },
        other => other,
    }
}

/// Replay a fixed token sequence from `x0`.
pub fn rollout_tokens(spec: &PlantSpec, x0: &[f64], tokens: &[usize]) -> Result<Trajectory> {
    let mut states = vec![x0.to_vec()];
    let mut rewards = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        let tr = step(spec, states.last().unwrap(), tok).map_err(|e| at_step(e, t))?;
        states.push(tr.state);
        rewards.push(tr.reward);
    }
    Ok(Trajectory {
        states,
        tokens: tokens.to_vec(),
        rewards,
    })
}

/// Closed-loop rollout of a state-feedback token policy.
pub fn rollout_policy(
    spec: &PlantSpec,
    x0: &[f64],
    horizon: usize,
    mut policy: impl FnMut(usize, &[f64]) -> Result<usize>,
) -> Result<Trajectory> {
    let mut states = vec![x0.to_vec()];
    let mut tokens = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let x = states.last().unwrap();
        let tok = policy(t, x)?;
        let tr = step(spec, x, tok).map_err(|e| at_step(e, t))?;
        tokens.push(tok);
        states.push(tr.state);
        rewards.push(tr.reward);
    }
    Ok(Trajectory {
        states,
        tokens,
        rewards,
    })
}

/// Scripted expert: PD for SMSM and PAC, LQR for TLMDCP.
#[derive(Clone, Debug, PartialEq)]
pub enum Controller {
    Pd {
        kind: PlantKind,
        kp: f64,
        kd: f64,
    },
    Lqr {
        gain: Vec<f64>,
    },
}

impl Controller {
    pub fn kind(&self) -> PlantKind {
        match self {
            Controller::Pd { kind, .. } => *kind,
            Controller::Lqr { .. } => PlantKind::Tlmdcp,
        }
    }

    /// Continuous command before snapping to the grid.
    pub fn command(&self, spec: &PlantSpec, x: &[f64]) -> Vec<f64> {
        let err: Vec<f64> = x
            .iter()
            .zip(&spec.goal)
            .zip(spec.kind.angle_mask())
            .map(|((s, g), ang)| if ang { wrap_angle(s - g) } else { s - g })
            .collect();
        match (self, &spec.params) {
            (Controller::Pd { kp, kd, .. }, PhysicalParams::Smsm { mass }) => {
                vec![-mass * (kp * err[0] + kd * err[1])]
            }
            (
                Controller::Pd { kp, kd, .. },
                PhysicalParams::Pac {
                    mass,
                    inertia,
                    arm_length,
                    yaw_coeff,
                    gravity,
                },
            ) => {
                let tau: Vec<f64> = (0..3)
                    .map(|a| -inertia[a] * (kp * err[a] + kd * err[3 + a]))
                    .collect();
                let total = mass * gravity;
                let (ra, pa, ya) = (tau[0] / arm_length, tau[1] / arm_length, tau[2] / yaw_coeff);
                let s13 = 0.5 * (total + ya);
                let s24 = 0.5 * (total - ya);
                vec![
                    0.5 * (s13 - pa),
                    0.5 * (s24 + ra),
                    0.5 * (s13 + pa),
                    0.5 * (s24 - ra),
                ]
            }
            (Controller::Lqr { gain }, _) => {
                vec![-gain.iter().zip(&err).map(|(k, e)| k * e).sum::<f64>()]
            }
            _ => spec.rest_action.clone(),
        }
    }

    pub fn token(&self, spec: &PlantSpec, x: &[f64]) -> Result<usize> {
        spec.tokenize(&self.command(spec, x))
    }
}

/// Default expert for a plant; LQR gains come from the discrete Riccati
/// recursion about the upright linearization.
pub fn expert_controller(spec: &PlantSpec) -> Result<Controller> {
    match spec.kind {
        PlantKind::Smsm => Ok(Controller::Pd {
            kind: PlantKind::Smsm,
            kp: 4.0,
            kd: 4.0,
        }),
        PlantKind::Pac => Ok(Controller::Pd {
            kind: PlantKind::Pac,
            kp: 25.0,
            kd: 25.0,
        }),
        PlantKind::Tlmdcp => {
            let (a, b) = linearize(spec, &spec.goal)?;
            let q = DMatrix::<f64>::identity(8, 8);
            let r = DMatrix::<f64>::identity(1, 1) * 0.1;
            let gain = dlqr(&a, &b, &q, &r)?;
            Ok(Controller::Lqr { gain })
        }
    }
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Single-input discrete LQR gain by iterating the Riccati recursion.
fn dlqr(a: &Matrix, b: &Matrix, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Vec<f64>> {
    let a = to_dmatrix(a);
    let b = to_dmatrix(b);
    let mut p = q.clone();
    for _ in 0..20_000 {
        let btp = b.transpose() * &p;
        let s = r + &btp * &b;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Solver("Riccati recursion hit a singular system".into()))?;
        let k = &s_inv * &btp * &a;
        let next = q + a.transpose() * &p * &a - a.transpose() * p.transpose() * &b * &k;
        let next = 0.5 * (&next + next.transpose());
        let delta = (&next - &p).amax();
        p = next;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Solver("Riccati recursion diverged".into()));
        }
        if delta < 1e-10 * p.amax().max(1.0) {
            break;
        }
    }
    let btp = b.transpose() * &p;
    let s = r + &btp * &b;
    let k = s
        .try_inverse()
        .ok_or_else(|| Error::Solver("Riccati recursion hit a singular system".into()))?
        * btp
        * a;
    Ok(k.row(0).iter().copied().collect())
}

/// Run the expert from a sampled initial state. Each continuous command is
/// snapped to the nearest grid token.
pub fn expert_rollout<R: Rng + ?Sized>(
    spec: &PlantSpec,
    controller: &Controller,
    horizon: usize,
    rng: &mut R,
) -> Result<TokenSequence> {
    let x0 = spec.sample_initial_state(rng);
    expert_rollout_from(spec, controller, &x0, horizon)
}

pub fn expert_rollout_from(
    spec: &PlantSpec,
    controller: &Controller,
    x0: &[f64],
    horizon: usize,
) -> Result<TokenSequence> {
    if controller.kind() != spec.kind {
        return input_err(format!(
            "{} controller cannot drive a {} plant",
            controller.kind(),
            spec.kind
        ));
    }
    if horizon == 0 {
        return input_err("horizon must be at least 1");
    }
    let traj = rollout_policy(spec, x0, horizon, |_, x| controller.token(spec, x))?;
    TokenSequence::new(traj.tokens, Source::Expert)?.with_rewards(traj.rewards)
}

/// Central-difference Jacobians `(A, B)` of the one-step map at `state`
/// and the rest action (zero force; hover thrust for PAC).
pub fn linearize(spec: &PlantSpec, state: &[f64]) -> Result<(Matrix, Matrix)> {
    linearize_with_step(spec, state, LINEARIZE_STEP)
}

pub fn linearize_with_step(spec: &PlantSpec, state: &[f64], h: f64) -> Result<(Matrix, Matrix)> {
    let n = spec.state_dim();
    let m = spec.kind.action_dim();
    if state.len() != n {
        return input_err("state dimension does not match the plant");
    }
    let u0 = spec.rest_action.clone();
    // angle wrapping is a no-op near the linearization point, but differences
    // are still wrapped so points near ±π stay consistent
    let mask = spec.kind.angle_mask();
    let diff = |a: &[f64], b: &[f64], j: usize| {
        let d = a[j] - b[j];
        if mask[j] {
            wrap_angle(d)
        } else {
            d
        }
    };
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        let mut xp = state.to_vec();
        let mut xm = state.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let fp = advance(spec, &xp, &u0)?;
        let fm = advance(spec, &xm, &u0)?;
        for j in 0..n {
            a.set(j, i, diff(&fp, &fm, j) / (2.0 * h));
        }
    }
    let mut b = Matrix::zeros(n, m);
    for i in 0..m {
        let mut up = u0.clone();
        let mut um = u0.clone();
        up[i] += h;
        um[i] -= h;
        let fp = advance(spec, state, &up)?;
        let fm = advance(spec, state, &um)?;
        for j in 0..n {
            b.set(j, i, diff(&fp, &fm, j) / (2.0 * h));
        }
    }
    Ok((a, b))
}

pub fn spectral_radius(a: &Matrix) -> f64 {
    to_dmatrix(a)
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Variation of the nominal plant by ±20% per physical parameter.
pub fn make_task_family<R: Rng + ?Sized>(
    kind: PlantKind,
    n_tasks: usize,
    rng: &mut R,
) -> Result<Vec<PlantSpec>> {
    if n_tasks == 0 {
        return input_err("n_tasks must be at least 1");
    }
    let base = PhysicalParams::nominal(kind);
    (0..n_tasks)
        .map(|_| {
            let spec = PlantSpec::with_params(base.perturbed(0.2, rng));
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

/// Columns: `step,token,a0..,x0..,reward`; row 0 is the initial state.
pub fn write_trajectory_csv<W: Write>(out: &mut W, spec: &PlantSpec, traj: &Trajectory) -> Result<()> {
    let m = spec.kind.action_dim();
    let n = spec.state_dim();
    let mut header = vec!["step".to_string(), "token".to_string()];
    header.extend((0..m).map(|i| format!("a{i}")));
    header.extend((0..n).map(|i| format!("x{i}")));
    header.push("reward".into());
    writeln!(out, "{}", header.join(","))?;
    for (t, x) in traj.states.iter().enumerate() {
        let mut row = vec![t.to_string()];
        if t == 0 {
            row.push(String::new());
            row.extend((0..m).map(|_| String::new()));
        } else {
            let tok = traj.tokens[t - 1];
            row.push(tok.to_string());
            row.extend(spec.detokenize(tok)?.iter().map(|v| format!("{v:.8e}")));
        }
        row.extend(x.iter().map(|v| format!("{v:.8e}")));
        row.push(if t == 0 {
            String::new()
        } else {
            format!("{:.8e}", traj.rewards[t - 1])
        });
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smsm_grid_values() {
        let s = PlantSpec::nominal(PlantKind::Smsm);
        assert_eq!(s.detokenize(2).unwrap(), vec![0.0]);
        assert_eq!(s.detokenize(0).unwrap(), vec![-1.0]);
        assert_eq!(s.detokenize(4).unwrap(), vec![1.0]);
        assert!(s.detokenize(5).is_err());
        assert_eq!(s.rest_token(), 2);
    }

    #[test]
    fn pac_top_token_is_full_thrust() {
        let s = PlantSpec::nominal(PlantKind::Pac);
        assert_eq!(s.vocab(), 81);
        let hover = GRAVITY / 4.0;
        for v in s.detokenize(80).unwrap() {
            assert!((v - 1.2 * hover).abs() < 1e-12);
        }
        assert_eq!(s.rest_token(), 40);
    }

    #[test]
    fn smsm_hand_step() {
        let s = PlantSpec::nominal(PlantKind::Smsm);
        let tr = step(&s, &[0.0, 0.0], 4).unwrap();
        assert!((tr.state[1] - 0.02).abs() < 1e-12);
        assert!((tr.state[0] - 0.0004).abs() < 1e-12);
    }

    #[test]
    fn reward_examples() {
        let s = PlantSpec::nominal(PlantKind::Smsm);
        let w = RewardWeights::default();
        assert_eq!(reward(&s, &[0.0, 0.0], &[0.0], &w), 0.0);
        assert!((reward(&s, &[1.0, 0.0], &[1.0], &w) + 1.1).abs() < 1e-12);
    }

    #[test]
    fn equilibria_are_fixed_points() {
        let t = PlantSpec::nominal(PlantKind::Tlmdcp);
        let tr = step(&t, &[0.0; 8], t.rest_token()).unwrap();
        assert_eq!(tr.state, vec![0.0; 8]);
        let p = PlantSpec::nominal(PlantKind::Pac);
        let tr = step(&p, &[0.0; 6], p.rest_token()).unwrap();
        assert_eq!(tr.state, vec![0.0; 6]);
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn smsm_expert_reaches_goal() {
        let s = PlantSpec::nominal(PlantKind::Smsm);
        let c = expert_controller(&s).unwrap();
        let traj = rollout_policy(&s, &[1.0, 0.0], 150, |_, x| c.token(&s, x)).unwrap();
        let last = traj.states.last().unwrap();
        assert!(last[0].abs() < 0.05, "final position {}", last[0]);
    }

    #[test]
    fn controller_kind_must_match() {
        let s = PlantSpec::nominal(PlantKind::Smsm);
        let c = expert_controller(&PlantSpec::nominal(PlantKind::Pac)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(expert_rollout(&s, &c, 10, &mut rng).is_err());
    }

    #[test]
    fn family_is_reproducible_and_valid() {
        for kind in [PlantKind::Smsm, PlantKind::Tlmdcp, PlantKind::Pac] {
            let a = make_task_family(kind, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let b = make_task_family(kind, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 50);
        }
        assert!(make_task_family(PlantKind::Smsm, 0, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn divergence_is_signalled() {
        let s = PlantSpec::nominal(PlantKind::Smsm);
        let err = step(&s, &[2e6, 0.0], 2).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }
}
