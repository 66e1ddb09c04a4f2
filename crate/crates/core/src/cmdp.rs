//! Constrained MDP over per-block state laws and primal-dual training of a
//! tabular softmax policy.
//!
//! The augmented state at block `b` is the law `Z^(b)` of the source state.
//! An action picks `P(u|s)` and `W(x|u,s)` for every state in its support.
//! Rollouts propagate `Z` exactly, so the objective is deterministic in the
//! policy parameters.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacity::gp_rate;
use crate::polar::{BlockJoint, PolarError, StateAction};
use crate::prob::{CondPmf, JointLaw, Pmf, ProbError};
use crate::source::{reachable_states, BlockLaw, CoverSource, Next, StateId};

#[derive(Debug, Error)]
pub enum CmdpError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no action for state {0} in the support of Z")]
    MissingAction(StateId),
    #[error("state {0} is not reachable at this block")]
    Unreachable(StateId),
    #[error("state {state}: {reason}")]
    ActionShape { state: StateId, reason: String },
    #[error("non-finite objective at iteration {iter}: reward {reward}, cost {cost}, beta {beta}")]
    NonFinite { iter: usize, reward: f64, cost: f64, beta: f64 },
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error(transparent)]
    Polar(#[from] PolarError),
}

pub type Result<T, E = CmdpError> = std::result::Result<T, E>;

/// One action per state, `P(u|s)` over auxiliary symbols and one token law
/// over the state's candidate indices per auxiliary symbol in its support.
pub type Action = Vec<(StateId, StateAction)>;

/// Primal update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// `φ ← φ + η_φ g`.
    Sgd,
    /// Bias-corrected Adam ascent with step `η_φ`.
    #[default]
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmdpConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub eta_phi: f64,
    pub eta_beta: f64,
    pub iterations: usize,
    pub u_block_size: usize,
    pub fd_step: f64,
    /// Standard deviation of the initial logits.
    pub init_scale: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl Default for CmdpConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            epsilon: 0.1,
            eta_phi: 0.3,
            eta_beta: 5.0,
            iterations: 500,
            u_block_size: 2,
            fd_step: 1e-4,
            init_scale: 0.5,
            optimizer: Optimizer::Adam,
        }
    }
}

impl CmdpConfig {
    pub fn validate(&self, block_len: usize) -> Result<()> {
        let bad = |m: String| Err(CmdpError::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} not in (0, 1]", self.gamma));
        }
        if !(self.epsilon >= 0.0) {
            return bad(format!("epsilon {} < 0", self.epsilon));
        }
        if !(self.eta_phi >= 0.0 && self.eta_phi.is_finite()) || !(self.eta_beta > 0.0 && self.eta_beta.is_finite()) {
            return bad("step sizes must be positive".into());
        }
        if !(self.fd_step > 0.0) || !(self.init_scale >= 0.0) {
            return bad("finite-difference step must be positive and init scale non-negative".into());
        }
        if self.u_block_size < 1 || block_len >= usize::BITS as usize || self.u_block_size > 1 << block_len {
            return bad(format!("U block size {} not in 1..=2^{block_len}", self.u_block_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Step {
    Leaf,
    State(StateId),
    Resample(usize),
}

/// Precomputed tables for the states reachable at one block.
#[derive(Debug, Clone)]
pub struct BlockContext {
    block: usize,
    num_states: usize,
    states: Vec<StateId>,
    index: HashMap<StateId, usize>,
    laws: Vec<BlockLaw>,
    x_ids: Vec<Vec<usize>>,
    x_count: usize,
    steps: Vec<Vec<Step>>,
    resample: Vec<Pmf>,
}

impl BlockContext {
    /// Tables for 1-based block `block` over `states`.
    pub fn new(src: &dyn CoverSource, block: usize, states: &[StateId]) -> Self {
        let mut interner: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut resample: Vec<Pmf> = Vec::new();
        let mut laws = Vec::with_capacity(states.len());
        let mut x_ids = Vec::with_capacity(states.len());
        let mut steps = Vec::with_capacity(states.len());
        for &s in states {
            let law = src.block_law(s);
            x_ids.push(
                law.candidates
                    .iter()
                    .map(|c| {
                        let n = interner.len();
                        *interner.entry(c.clone()).or_insert(n)
                    })
                    .collect(),
            );
            steps.push(
                (0..law.candidates.len())
                    .map(|c| match src.transition(s, c, block) {
                        Next::Leaf => Step::Leaf,
                        Next::State(t) => Step::State(t),
                        Next::Resample(p) => Step::Resample(match resample.iter().position(|q| q == p) {
                            Some(k) => k,
                            None => {
                                resample.push(p.clone());
                                resample.len() - 1
                            }
                        }),
                    })
                    .collect(),
            );
            laws.push(law);
        }
        Self {
            block,
            num_states: src.num_states(),
            states: states.to_vec(),
            index: states.iter().enumerate().map(|(k, &s)| (s, k)).collect(),
            laws,
            x_ids,
            x_count: interner.len(),
            steps,
            resample,
        }
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    pub fn candidates(&self, state: StateId) -> Option<usize> {
        self.index.get(&state).map(|&k| self.laws[k].candidates.len())
    }

    /// Base law of a state with `U` degenerate.
    pub fn base_action(&self, state: StateId) -> Option<StateAction> {
        let k = *self.index.get(&state)?;
        Some(StateAction {
            p_u: Pmf::point(1, 0).ok()?,
            w: vec![self.laws[k].law.clone()],
        })
    }

    fn resolve<'a>(&self, z: &Pmf, action: &'a Action) -> Result<Vec<(usize, f64, &'a StateAction)>> {
        let by_state: HashMap<StateId, &StateAction> = action.iter().map(|(s, a)| (*s, a)).collect();
        z.iter()
            .map(|(s, p)| {
                let k = *self.index.get(&s).ok_or(CmdpError::Unreachable(s))?;
                let a = *by_state.get(&s).ok_or(CmdpError::MissingAction(s))?;
                let n = self.laws[k].candidates.len();
                if a.w.len() != a.p_u.len() {
                    return Err(CmdpError::ActionShape {
                        state: s,
                        reason: format!("{} token laws for {} auxiliary symbols", a.w.len(), a.p_u.len()),
                    });
                }
                if let Some(row) = a.w.iter().find(|row| row.alphabet() != n) {
                    return Err(CmdpError::ActionShape {
                        state: s,
                        reason: format!("token law over {} candidates, state has {n}", row.alphabet()),
                    });
                }
                Ok((k, p, a))
            })
            .collect()
    }

    /// Induced `P̃(candidate | s)` with `U` marginalized.
    fn induced(a: &StateAction, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for ((_, pu), row) in a.p_u.iter().zip(&a.w) {
            for (c, pc) in row.iter() {
                out[c] += pu * pc;
            }
        }
        out
    }
}

/// `I(U;X) − I(U;S)` of the joint `S ~ Z`, `U | S`, `X | U, S`.
pub fn reward(ctx: &BlockContext, z: &Pmf, action: &Action) -> Result<f64> {
    Ok(gp_rate(&joint_law(ctx, z, action)?))
}

/// Joint law with states indexed by their position in the support of `z`
/// and token blocks interned per block.
pub fn joint_law(ctx: &BlockContext, z: &Pmf, action: &Action) -> Result<JointLaw> {
    let resolved = ctx.resolve(z, action)?;
    let u_size = resolved.iter().map(|(_, _, a)| a.p_u.alphabet()).max().unwrap_or(1);
    let mut rows = Vec::with_capacity(resolved.len());
    let mut w = Vec::with_capacity(resolved.len());
    for (k, _, a) in &resolved {
        rows.push(Pmf::new(u_size, a.p_u.iter())?);
        w.push(
            a.w.iter()
                .map(|row| Pmf::new(ctx.x_count, row.iter().map(|(c, p)| (ctx.x_ids[*k][c], p))))
                .collect::<std::result::Result<Vec<_>, _>>()?,
        );
    }
    let p_s = Pmf::new(resolved.len(), resolved.iter().enumerate().map(|(i, r)| (i, r.1)))?;
    Ok(JointLaw::new(p_s, CondPmf::new(rows)?, w)?)
}

/// `Σ_s Z(s) · TV(P̃(·|s), P(·|s))`, the TV between induced and base joints
/// of `(S, X)`.
pub fn cost(ctx: &BlockContext, z: &Pmf, action: &Action) -> Result<f64> {
    let mut total = 0.0;
    for (k, p, a) in ctx.resolve(z, action)? {
        let law = &ctx.laws[k];
        let induced = BlockContext::induced(a, law.candidates.len());
        let base = law.law.to_dense();
        let tv: f64 = induced.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f64>() * 0.5;
        total += p * tv;
    }
    Ok(total)
}

/// Exact one-block update of the state law.
pub fn transition_z(ctx: &BlockContext, z: &Pmf, action: &Action) -> Result<Pmf> {
    let mut next: BTreeMap<StateId, f64> = BTreeMap::new();
    let mut resampled = vec![0.0; ctx.resample.len()];
    for (k, p, a) in ctx.resolve(z, action)? {
        let induced = BlockContext::induced(a, ctx.laws[k].candidates.len());
        for (c, pc) in induced.into_iter().enumerate() {
            if pc == 0.0 {
                continue;
            }
            match ctx.steps[k][c] {
                Step::Leaf => {}
                Step::State(t) => *next.entry(t).or_default() += p * pc,
                Step::Resample(r) => resampled[r] += p * pc,
            }
        }
    }
    for (law, mass) in ctx.resample.iter().zip(resampled) {
        for (t, pt) in law.iter() {
            *next.entry(t).or_default() += mass * pt;
        }
    }
    Ok(Pmf::new(ctx.num_states, next)?)
}

/// The MDP for one source: per-block contexts over reachable states.
#[derive(Debug, Clone)]
pub struct CmdpProblem {
    initial: Pmf,
    contexts: Vec<BlockContext>,
}

impl CmdpProblem {
    pub fn new(src: &dyn CoverSource) -> Self {
        let contexts = reachable_states(src)
            .iter()
            .enumerate()
            .map(|(b, states)| BlockContext::new(src, b + 1, states))
            .collect();
        Self {
            initial: src.initial().clone(),
            contexts,
        }
    }

    pub fn contexts(&self) -> &[BlockContext] {
        &self.contexts
    }

    pub fn blocks(&self) -> usize {
        self.contexts.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Slot {
    state: StateId,
    candidates: usize,
    offset: usize,
}

/// Tabular policy: per `(block, state)`, `|U|` auxiliary logits followed by
/// `|U| × candidates` token logits, row-major in `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    u_size: usize,
    slots: Vec<Vec<Slot>>,
    params: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

impl Policy {
    /// Zero logits: uniform auxiliary and token laws.
    pub fn zeros(problem: &CmdpProblem, u_size: usize) -> Self {
        let mut offset = 0;
        let slots = problem
            .contexts
            .iter()
            .map(|ctx| {
                ctx.states
                    .iter()
                    .zip(&ctx.laws)
                    .map(|(&state, law)| {
                        let candidates = law.candidates.len();
                        let slot = Slot {
                            state,
                            candidates,
                            offset,
                        };
                        offset += u_size * (1 + candidates);
                        slot
                    })
                    .collect()
            })
            .collect();
        Self {
            u_size,
            slots,
            params: vec![0.0; offset],
        }
    }

    /// Logits drawn i.i.d. from `N(0, scale²)`.
    pub fn random(problem: &CmdpProblem, u_size: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(problem, u_size);
        if scale > 0.0 {
            let normal = Normal::new(0.0, scale).map_err(|e| CmdpError::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in &mut p.params {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn u_size(&self) -> usize {
        self.u_size
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(CmdpError::Config(format!(
                "{} parameters for a policy of dimension {}",
                params.len(),
                self.params.len()
            )));
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    /// Action at 0-based block `block` for the states in the support of `z`.
    pub fn action(&self, block: usize, z: &Pmf) -> Result<Action> {
        action_from(&self.slots[block], self.u_size, &self.params, z)
    }
}

fn action_from(slots: &[Slot], u_size: usize, params: &[f64], z: &Pmf) -> Result<Action> {
    z.support()
        .iter()
        .map(|&s| {
            let k = slots
                .binary_search_by_key(&s, |slot| slot.state)
                .map_err(|_| CmdpError::Unreachable(s))?;
            let slot = slots[k];
            let base = &params[slot.offset..slot.offset + u_size * (1 + slot.candidates)];
            let p_u = Pmf::from_probs(&softmax(&base[..u_size]))?;
            let w = p_u
                .support()
                .iter()
                .map(|&u| {
                    let row = &base[u_size + u * slot.candidates..u_size + (u + 1) * slot.candidates];
                    Pmf::from_probs(&softmax(row))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok((s, StateAction { p_u, w }))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub z: Pmf,
    pub action: Action,
    pub reward: f64,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<RolloutStep>,
    /// `Σ_b γ^b r^(b)` with `b` starting at one.
    pub reward_sum: f64,
    pub cost_sum: f64,
}

/// Exact rollout of a policy.
pub fn rollout(policy: &Policy, problem: &CmdpProblem, gamma: f64) -> Result<Trajectory> {
    rollout_params(policy, &policy.params, problem, gamma)
}

fn rollout_params(policy: &Policy, params: &[f64], problem: &CmdpProblem, gamma: f64) -> Result<Trajectory> {
    if policy.slots.len() != problem.blocks() {
        return Err(CmdpError::Config(format!(
            "policy covers {} blocks, the source has {}",
            policy.slots.len(),
            problem.blocks()
        )));
    }
    let mut z = problem.initial.clone();
    let mut steps = Vec::with_capacity(problem.blocks());
    let (mut reward_sum, mut cost_sum, mut discount) = (0.0, 0.0, gamma);
    for (b, ctx) in problem.contexts.iter().enumerate() {
        let action = action_from(&policy.slots[b], policy.u_size, params, &z)?;
        let r = reward(ctx, &z, &action)?;
        let c = cost(ctx, &z, &action)?;
        reward_sum += discount * r;
        cost_sum += discount * c;
        discount *= gamma;
        let next = if b + 1 < problem.blocks() {
            Some(transition_z(ctx, &z, &action)?)
        } else {
            None
        };
        steps.push(RolloutStep {
            z,
            action,
            reward: r,
            cost: c,
        });
        match next {
            Some(n) => z = n,
            None => break,
        }
    }
    Ok(Trajectory {
        steps,
        reward_sum,
        cost_sum,
    })
}

/// Central finite-difference gradient, coordinates evaluated in parallel.
pub fn fd_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = x.to_vec();
            probe[i] = x[i] + h;
            let up = f(&probe)?;
            probe[i] = x[i] - h;
            let down = f(&probe)?;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Lagrangian `Σ γ^b (r − β c)` as a function of the parameters.
pub fn lagrangian(policy: &Policy, params: &[f64], problem: &CmdpProblem, gamma: f64, beta: f64) -> Result<f64> {
    let t = rollout_params(policy, params, problem, gamma)?;
    Ok(t.reward_sum - beta * t.cost_sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub reward_sum: f64,
    pub cost_sum: f64,
    /// Multiplier after this iteration's update.
    pub beta: f64,
}

/// Per-block law induced by the final policy.
#[derive(Debug, Clone)]
pub struct BlockPolicyLaw {
    pub block: usize,
    pub z: Pmf,
    pub action: Action,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: Policy,
    pub laws: Vec<BlockPolicyLaw>,
    pub log: Vec<LogRow>,
    pub final_reward: f64,
    pub final_cost: f64,
    pub final_beta: f64,
}

impl TrainOutput {
    /// Codec joints, auxiliary symbol `k` mapped to the packed block `u = k`.
    pub fn block_joints(&self, src: &dyn CoverSource) -> Result<Vec<BlockJoint>> {
        self.laws
            .iter()
            .map(|l| Ok(BlockJoint::from_actions(src, &l.z, &l.action)?))
            .collect()
    }
}

/// Primal-dual policy gradient from seeded random logits.
pub fn primal_dual_train(src: &dyn CoverSource, cfg: &CmdpConfig, seed: u64) -> Result<TrainOutput> {
    cfg.validate(src.block_len())?;
    let problem = CmdpProblem::new(src);
    let init = Policy::random(&problem, cfg.u_block_size, cfg.init_scale, seed)?;
    train_from(&problem, init, cfg)
}

/// Training loop from a given policy.
pub fn train_from(problem: &CmdpProblem, mut policy: Policy, cfg: &CmdpConfig) -> Result<TrainOutput> {
    let mut beta = 0.0f64;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut m = vec![0.0; policy.params.len()];
    let mut v = vec![0.0; policy.params.len()];
    for iter in 0..cfg.iterations {
        let t = rollout(&policy, problem, cfg.gamma)?;
        let objective = t.reward_sum - beta * t.cost_sum;
        if !objective.is_finite() {
            return Err(CmdpError::NonFinite {
                iter,
                reward: t.reward_sum,
                cost: t.cost_sum,
                beta,
            });
        }
        if cfg.eta_phi > 0.0 {
            let grad = fd_gradient(
                |p| lagrangian(&policy, p, problem, cfg.gamma, beta),
                &policy.params,
                cfg.fd_step,
            )?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(CmdpError::NonFinite {
                    iter,
                    reward: t.reward_sum,
                    cost: t.cost_sum,
                    beta,
                });
            }
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in policy.params.iter_mut().zip(grad) {
                        *p += cfg.eta_phi * g;
                    }
                }
                Optimizer::Adam => {
                    let c1 = 1.0 - ADAM_BETA1.powi(iter as i32 + 1);
                    let c2 = 1.0 - ADAM_BETA2.powi(iter as i32 + 1);
                    for (k, g) in grad.into_iter().enumerate() {
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
                        policy.params[k] += cfg.eta_phi * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        beta = (beta + cfg.eta_beta * (t.cost_sum - cfg.epsilon)).max(0.0);
        log.push(LogRow {
            iter,
            reward_sum: t.reward_sum,
            cost_sum: t.cost_sum,
            beta,
        });
    }
    let t = rollout(&policy, problem, cfg.gamma)?;
    let laws = t
        .steps
        .into_iter()
        .enumerate()
        .map(|(b, s)| BlockPolicyLaw {
            block: b + 1,
            z: s.z,
            action: s.action,
        })
        .collect();
    Ok(TrainOutput {
        policy,
        laws,
        log,
        final_reward: t.reward_sum,
        final_cost: t.cost_sum,
        final_beta: beta,
    })
}
