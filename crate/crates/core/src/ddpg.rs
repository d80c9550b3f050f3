//! DDPG building blocks: experience storage, exploration noise, and the
//! critic / actor gradient steps.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, CriticNet, Gradients, Mlp};

/// One step of experience. States are the actor's input vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Actor-scale action in `[0, 1]`, after noise and clipping.
    pub action: f64,
    pub r_d: f64,
    /// Nonzero only on the terminal transition.
    pub r_r: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Ring buffer of transitions for critic training.
#[derive(Debug, Clone)]
pub struct ReplayBufferC {
    capacity: usize,
    items: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBufferC {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform minibatch without replacement, or `None` while the buffer
    /// holds fewer than `batch` transitions (warm-up).
    pub fn sample(&mut self, batch: usize) -> Option<Vec<&Transition>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        let picks = rand::seq::index::sample(&mut self.rng, self.items.len(), batch);
        Some(picks.into_iter().map(|i| &self.items[i]).collect())
    }
}

/// States of the current noise-free rollout, consumed by one actor update.
#[derive(Debug, Clone, Default)]
pub struct ReplayBufferA {
    states: Vec<Vec<f64>>,
}

impl ReplayBufferA {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, state: Vec<f64>) {
        self.states.push(state);
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn clear(&mut self) {
        self.states.clear();
    }
}

/// Ornstein-Uhlenbeck process around zero.
#[derive(Debug, Clone)]
pub struct OuNoise {
    pub theta: f64,
    pub sigma: f64,
    current: f64,
    rng: ChaCha8Rng,
}

impl OuNoise {
    pub fn new(theta: f64, sigma: f64, seed: u64) -> Self {
        Self {
            theta,
            sigma,
            current: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn with_state(theta: f64, sigma: f64, current: f64, seed: u64) -> Self {
        Self {
            current,
            ..Self::new(theta, sigma, seed)
        }
    }

    pub fn current(&self) -> f64 {
        self.current
    }

    pub fn reset(&mut self) {
        self.current = 0.0;
    }

    /// `x <- x + theta * (0 - x) + sigma * N(0, 1)`; returns the new `x`.
    pub fn step(&mut self) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.current += self.theta * (0.0 - self.current) + self.sigma * z;
        self.current
    }
}

/// Which reward a critic regresses on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSelect {
    Distortion,
    Rate,
    /// `r_d + r_r`, used by the single-critic baseline.
    Sum,
}

impl RewardSelect {
    #[inline]
    fn reward(self, t: &Transition) -> f64 {
        match self {
            RewardSelect::Distortion => t.r_d,
            RewardSelect::Rate => t.r_r,
            RewardSelect::Sum => t.r_d + t.r_r,
        }
    }
}

/// `mu'(s')` for every non-terminal transition; terminal entries are 0 and
/// never read.
pub fn target_actions(actor_target: &Mlp, batch: &[&Transition]) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            if t.terminal {
                Ok(0.0)
            } else {
                Ok(actor_target.predict(&t.next_state)?[0])
            }
        })
        .collect()
}

/// One Adam step on the mean squared TD error of `critic`. Returns the loss
/// before the step.
pub fn critic_td_update(
    critic: &mut CriticNet,
    opt: &mut AdamState,
    critic_target: &CriticNet,
    actor_target: &Mlp,
    batch: &[&Transition],
    select: RewardSelect,
    gamma: f64,
) -> Result<f64> {
    let next = target_actions(actor_target, batch)?;
    critic_td_update_with(critic, opt, critic_target, &next, batch, select, gamma)
}

/// As [`critic_td_update`] with `mu'(s')` precomputed, so several critics can
/// share one pass of the target actor.
pub fn critic_td_update_with(
    critic: &mut CriticNet,
    opt: &mut AdamState,
    critic_target: &CriticNet,
    next_actions: &[f64],
    batch: &[&Transition],
    select: RewardSelect,
    gamma: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("critic update needs a non-empty batch".into()));
    }
    if next_actions.len() != batch.len() {
        return Err(Error::Shape("one target action per transition required".into()));
    }
    let n = batch.len() as f64;
    let mut grads = Gradients::zeros_like(critic);
    let mut loss = 0.0;
    for (t, &a_next) in batch.iter().zip(next_actions) {
        let bootstrap = if t.terminal {
            0.0
        } else {
            gamma * critic_target.value(&t.next_state, &[a_next])?
        };
        let y = select.reward(t) + bootstrap;
        let trace = critic.trace(&t.state, &[t.action])?;
        let err = trace.value() - y;
        loss += err * err;
        critic.backward_trace(&trace, 2.0 * err / n, Some(&mut grads))?;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("critic loss is {loss}")));
    }
    opt.step(critic, &grads)?;
    Ok(loss)
}

/// A value function differentiable in a scalar action.
pub trait ActionValue {
    /// `(Q(s, a), dQ/da)`.
    fn value_and_action_grad(&self, state: &[f64], action: f64) -> Result<(f64, f64)>;
}

impl ActionValue for CriticNet {
    fn value_and_action_grad(&self, state: &[f64], action: f64) -> Result<(f64, f64)> {
        let trace = self.trace(state, &[action])?;
        let da = self.action_gradient(&trace)?;
        Ok((trace.value(), da[0]))
    }
}

impl<F> ActionValue for F
where
    F: Fn(&[f64], f64) -> (f64, f64),
{
    fn value_and_action_grad(&self, state: &[f64], action: f64) -> Result<(f64, f64)> {
        Ok(self(state, action))
    }
}

/// One deterministic-policy-gradient ascent step of `actor` on
/// `mean_n Q(s_n, mu(s_n))`. The critic is only read. Returns the objective
/// before the step.
pub fn actor_update<C: ActionValue + ?Sized>(
    actor: &mut Mlp,
    opt: &mut AdamState,
    critic: &C,
    states: &[Vec<f64>],
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Precondition("actor update needs at least one state".into()));
    }
    let n = states.len() as f64;
    let mut grads = Gradients::zeros_like(actor);
    let mut objective = 0.0;
    for s in states {
        let trace = actor.trace(s)?;
        let a = trace.output()[0];
        let (q, dq_da) = critic.value_and_action_grad(s, a)?;
        objective += q;
        // Descend on -Q.
        actor.backward_trace(&trace, &[-dq_da / n], Some(&mut grads))?;
    }
    objective /= n;
    if !objective.is_finite() {
        return Err(Error::Numeric(format!("actor objective is {objective}")));
    }
    opt.step(actor, &grads)?;
    Ok(objective)
}
