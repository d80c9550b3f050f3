//! The base+actor agent, behavior cloning of the base module, and the
//! dual-critic and single-critic training loops.
//!
//! Per dual-critic episode:
//!
//! 1. noisy rollout; every transition carries the per-frame distortion
//!    reward and only the last one carries the GOP rate reward;
//! 2. one TD step for the distortion critic and one for the rate critic on a
//!    shared minibatch;
//! 3. noise-free rollout collecting actor inputs;
//! 4. the actor ascends the rate critic if that rollout overspent the budget,
//!    the distortion critic otherwise;
//! 5. Polyak update of both target critics and the target actor.
//!
//! The single-critic baseline learns one critic on the combined reward and
//! stops handing frames to the agent once the budget is exceeded: the rest of
//! the GOP is coded at the I-frame QP plus 10.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{
    run_episode_with, EpisodeResult, EpisodeView, FrameEncoder, FrameSpec, GopSpec, Simulator,
    TemporalId, QP_MAX,
};
use crate::config::{Mode, TrainerConfig};
use crate::ddpg::{
    actor_update, critic_td_update_with, target_actions, OuNoise, ReplayBufferA, ReplayBufferC,
    RewardSelect, Transition,
};
use crate::error::{Error, Result};
use crate::features::{
    distortion_reward, extract_state, rate_reward, single_critic_norm, single_critic_reward,
    terminal_state, StateVector, STATE_WIDTH,
};
use crate::nn::{
    soft_update, Activation, AdamConfig, AdamState, Checkpoint, CriticLayout, CriticNet, Gradients,
    LayerSpec, Mlp,
};

/// Largest QP change the actor can apply to the base QP.
pub const MAX_DELTA_QP: i32 = 10;
/// QP offset used for frames coded after the single-critic budget runs out.
pub const TERMINAL_QP_OFFSET: u8 = 10;
pub const ACTOR_OUTPUT_SCALE: f64 = 1e-3;

/// `round(51 * x)` with halves rounded up, clamped to `[0, 51]`.
pub fn qp_from_unit(x: f64) -> u8 {
    (f64::from(QP_MAX) * x + 0.5).floor().clamp(0.0, f64::from(QP_MAX)) as u8
}

/// Map an actor output in `[0, 1]` to a delta QP in `[-10, 10]`.
pub fn delta_from_action(a: f64) -> i32 {
    let span = f64::from(2 * MAX_DELTA_QP);
    ((span * a - f64::from(MAX_DELTA_QP)) + 0.5).floor() as i32
}

pub fn apply_delta(base_qp: u8, raw_action: f64) -> u8 {
    (i32::from(base_qp) + delta_from_action(raw_action)).clamp(0, i32::from(QP_MAX)) as u8
}

/// Independent stream seed for one purpose of one run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stack_specs(input: usize, widths: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(widths.len() + 1);
    let mut prev = input;
    for &w in widths {
        specs.push(LayerSpec::new(prev, w, Activation::Elu));
        prev = w;
    }
    specs.push(LayerSpec::new(prev, 1, Activation::Sigmoid));
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub qp: u8,
    pub base_qp: u8,
    /// Actor-scale action in `[0, 1]` that produced `qp`.
    pub raw_action: f64,
    /// Actor input: the state followed by the normalized base QP.
    pub input: Vec<f64>,
}

/// A frozen base network proposing a QP and an actor nudging it by up to
/// ±10.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub base: Mlp,
    pub actor: Mlp,
    base_frozen: bool,
}

impl Agent {
    pub fn base_specs(widths: &[usize]) -> Vec<LayerSpec> {
        stack_specs(STATE_WIDTH, widths)
    }

    pub fn actor_specs(widths: &[usize]) -> Vec<LayerSpec> {
        stack_specs(STATE_WIDTH + 1, widths)
    }

    /// Fresh agent; the actor's output layer is shrunk so the initial delta
    /// QP is zero.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Mlp::new(&Self::base_specs(widths), &mut rng)?;
        let mut actor = Mlp::new(&Self::actor_specs(widths), &mut rng)?;
        actor.scale_output_layer(ACTOR_OUTPUT_SCALE);
        Ok(Self {
            base,
            actor,
            base_frozen: false,
        })
    }

    pub fn from_parts(base: Mlp, actor: Mlp, base_frozen: bool) -> Result<Self> {
        if base.input_dim() != STATE_WIDTH || actor.input_dim() != STATE_WIDTH + 1 {
            return Err(Error::Shape(format!(
                "base must take {STATE_WIDTH} inputs and actor {}",
                STATE_WIDTH + 1
            )));
        }
        if base.output_dim() != 1 || actor.output_dim() != 1 {
            return Err(Error::Shape("base and actor must have one output".into()));
        }
        Ok(Self {
            base,
            actor,
            base_frozen,
        })
    }

    pub fn set_base(&mut self, base: Mlp) -> Result<()> {
        if self.base_frozen {
            return Err(Error::State("base module is frozen".into()));
        }
        if base.input_dim() != STATE_WIDTH || base.output_dim() != 1 {
            return Err(Error::Shape("base network has the wrong shape".into()));
        }
        self.base = base;
        Ok(())
    }

    pub fn freeze_base(&mut self) {
        self.base_frozen = true;
    }

    pub fn is_base_frozen(&self) -> bool {
        self.base_frozen
    }

    pub fn base_qp(&self, state: &StateVector) -> Result<u8> {
        Ok(qp_from_unit(self.base.predict(state.as_slice())?[0]))
    }

    pub fn actor_input(state: &StateVector, base_qp: u8) -> Vec<f64> {
        let mut v = Vec::with_capacity(STATE_WIDTH + 1);
        v.extend_from_slice(state.as_slice());
        v.push(f64::from(base_qp) / f64::from(QP_MAX));
        v
    }

    /// Actor input for `state`, with the base QP filled in.
    pub fn input_for(&self, state: &StateVector) -> Result<Vec<f64>> {
        Ok(Self::actor_input(state, self.base_qp(state)?))
    }

    fn decide(&self, state: &StateVector, noise: Option<f64>) -> Result<Decision> {
        let base_qp = self.base_qp(state)?;
        let input = Self::actor_input(state, base_qp);
        let mu = self.actor.predict(&input)?[0];
        let raw_action = match noise {
            Some(n) => (mu + n).clamp(0.0, 1.0),
            None => mu,
        };
        Ok(Decision {
            qp: apply_delta(base_qp, raw_action),
            base_qp,
            raw_action,
            input,
        })
    }

    /// Noise-free decision.
    pub fn act(&self, state: &StateVector) -> Result<Decision> {
        self.decide(state, None)
    }

    /// Decision with exploration noise added to the actor output and the sum
    /// clipped to `[0, 1]`.
    pub fn act_noisy(&self, state: &StateVector, noise: f64) -> Result<Decision> {
        self.decide(state, Some(noise))
    }

    /// Code `gop` noise-free. With `use_delta == false` only the base QP is
    /// used; `terminal_mode` applies the single-critic budget cut-off.
    pub fn rollout<E: FrameEncoder + ?Sized>(
        &self,
        env: &mut E,
        gop: &GopSpec,
        use_delta: bool,
        terminal_mode: bool,
    ) -> Result<EpisodeResult> {
        run_episode_with(env, gop, |v| {
            if terminal_mode {
                if let Some(qp) = forced_qp(v) {
                    return Ok(i32::from(qp));
                }
            }
            let s = extract_state(v.gop, v.position, v.decoded, v.bits_spent)?;
            let qp = if use_delta { self.act(&s)?.qp } else { self.base_qp(&s)? };
            Ok(i32::from(qp))
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_mlp("base", &self.base);
        ck.insert_mlp("actor", &self.actor);
        ck.metadata
            .insert("base_frozen".into(), self.base_frozen.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let frozen = ck.metadata.get("base_frozen").map(String::as_str) == Some("true");
        Self::from_parts(ck.mlp("base")?, ck.mlp("actor")?, frozen)
    }
}

/// QP forced by the single-critic terminal mode, if the budget is already
/// exceeded before this frame.
fn forced_qp(v: &EpisodeView<'_>) -> Option<u8> {
    if v.position > 0 && v.bits_spent > v.gop.budget {
        let qp_i = v.coded[0].qp;
        Some(qp_i.saturating_add(TERMINAL_QP_OFFSET).min(QP_MAX))
    } else {
        None
    }
}

/// Supplies the QP a reference controller would pick for a frame.
pub trait Teacher {
    fn qp(&self, gop: &GopSpec, frame: &FrameSpec) -> u8;
}

/// Fixed offsets per temporal level around the scenario's anchor QP:
/// I at anchor - 3, B at the anchor, b at anchor + 2.
#[derive(Debug, Clone, Copy, Default)]
pub struct TidLadder;

impl TidLadder {
    pub fn offset(tid: TemporalId) -> i32 {
        match tid {
            TemporalId::Tid0 => -3,
            TemporalId::Tid1 => 0,
            TemporalId::Tid2 => 2,
        }
    }
}

impl Teacher for TidLadder {
    fn qp(&self, gop: &GopSpec, frame: &FrameSpec) -> u8 {
        (i32::from(gop.anchor_qp) + Self::offset(frame.temporal_id)).clamp(0, i32::from(QP_MAX)) as u8
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantTeacher(pub u8);

impl Teacher for ConstantTeacher {
    fn qp(&self, _gop: &GopSpec, _frame: &FrameSpec) -> u8 {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct CloneOutcome {
    pub base: Mlp,
    pub train_mae: f64,
    pub held_out_mae: f64,
    pub steps: usize,
    /// Held-out MAE reached the configured target before the step cap.
    pub target_met: bool,
}

struct Sample {
    input: Vec<f64>,
    qp: u8,
}

fn teacher_samples<T: Teacher + ?Sized>(teacher: &T, gops: &[&GopSpec]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let mut sim = Simulator::new();
    for gop in gops {
        run_episode_with(&mut sim, gop, |v| {
            let qp = teacher.qp(v.gop, v.frame);
            let s = extract_state(v.gop, v.position, v.decoded, v.bits_spent)?;
            out.push(Sample {
                input: s.as_slice().to_vec(),
                qp,
            });
            Ok(i32::from(qp))
        })?;
    }
    Ok(out)
}

fn clone_mae(net: &Mlp, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let qp = qp_from_unit(net.predict(&s.input)?[0]);
        total += (f64::from(qp) - f64::from(s.qp)).abs();
    }
    Ok(total / samples.len() as f64)
}

/// Fit a base network to `teacher`'s QPs by squared-error regression on
/// `qp / 51`. Every fifth scenario is held out when there are at least five.
pub fn clone_base<T: Teacher + ?Sized>(
    teacher: &T,
    scenarios: &[GopSpec],
    config: &TrainerConfig,
    seed: u64,
) -> Result<CloneOutcome> {
    if scenarios.is_empty() {
        return Err(Error::Precondition("behavior cloning needs at least one scenario".into()));
    }
    let (train_gops, held_gops): (Vec<&GopSpec>, Vec<&GopSpec>) = if scenarios.len() >= 5 {
        let (h, t): (Vec<_>, Vec<_>) = scenarios.iter().enumerate().partition(|(i, _)| i % 5 == 4);
        (t.into_iter().map(|x| x.1).collect(), h.into_iter().map(|x| x.1).collect())
    } else {
        (scenarios.iter().collect(), scenarios.iter().collect())
    };
    let train = teacher_samples(teacher, &train_gops)?;
    let held = teacher_samples(teacher, &held_gops)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(&Agent::base_specs(&config.actor_widths), &mut rng)?;
    let mut opt = AdamState::new(&net, AdamConfig::with_learning_rate(config.clone_lr));
    let mut grads = Gradients::zeros_like(&net);
    let batch = config.clone_batch.min(train.len()).max(1);
    const CHECK_EVERY: usize = 250;

    let mut steps = 0;
    let mut target_met = false;
    while steps < config.clone_max_steps {
        grads.fill_zero();
        for _ in 0..batch {
            let s = &train[rng.random_range(0..train.len())];
            let trace = net.trace(&s.input)?;
            let err = trace.output()[0] - f64::from(s.qp) / f64::from(QP_MAX);
            net.backward_trace(&trace, &[2.0 * err / batch as f64], Some(&mut grads))?;
        }
        opt.step(&mut net, &grads)?;
        steps += 1;
        if steps >= config.clone_min_steps
            && steps % CHECK_EVERY == 0
            && clone_mae(&net, &held)? <= config.clone_target_mae
        {
            target_met = true;
            break;
        }
    }
    let held_out_mae = clone_mae(&net, &held)?;
    target_met |= held_out_mae <= config.clone_target_mae;
    Ok(CloneOutcome {
        train_mae: clone_mae(&net, &train)?,
        held_out_mae,
        steps,
        target_met,
        base: net,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChosenCritic {
    Distortion,
    Rate,
    Single,
    /// The episode failed and was skipped.
    Aborted,
}

impl ChosenCritic {
    pub fn as_str(self) -> &'static str {
        match self {
            ChosenCritic::Distortion => "distortion",
            ChosenCritic::Rate => "rate",
            ChosenCritic::Single => "single",
            ChosenCritic::Aborted => "aborted",
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub anchor_qp: u8,
    pub budget: f64,
    /// Bits of the noise-free rollout.
    pub bits: Option<f64>,
    pub mse_total: Option<f64>,
    pub over_budget: bool,
    pub chosen_critic: ChosenCritic,
    pub loss_qd: Option<f64>,
    pub loss_qr: Option<f64>,
    pub actor_objective: Option<f64>,
    pub noise_sigma: f64,
}

pub const LOG_COLUMNS: [&str; 11] = [
    "episode",
    "anchor_qp",
    "budget",
    "bits",
    "mse_total",
    "over_budget_flag",
    "chosen_critic",
    "loss_qd",
    "loss_qr",
    "actor_objective",
    "noise_sigma",
];

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(LOG_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.episode.to_string(),
                r.anchor_qp.to_string(),
                r.budget.to_string(),
                opt_field(r.bits),
                opt_field(r.mse_total),
                u8::from(r.over_budget).to_string(),
                r.chosen_critic.as_str().to_string(),
                opt_field(r.loss_qd),
                opt_field(r.loss_qr),
                opt_field(r.actor_objective),
                r.noise_sigma.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// A behavior critic, its target copy, and its optimizer.
#[derive(Debug, Clone)]
pub struct CriticSlot {
    pub net: CriticNet,
    pub target: CriticNet,
    pub opt: AdamState,
}

impl CriticSlot {
    pub fn new(layout: &CriticLayout, lr: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = CriticNet::new(STATE_WIDTH + 1, 1, layout, &mut rng)?;
        Ok(Self {
            target: net.clone(),
            opt: AdamState::new(&net, AdamConfig::with_learning_rate(lr)),
            net,
        })
    }
}

/// Everything one training episode produced, beyond its log row.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub row: LogRow,
    pub noisy: Option<EpisodeResult>,
    pub clean: Option<EpisodeResult>,
    /// Transitions pushed to the critic replay buffer this episode.
    pub transitions: Vec<Transition>,
    /// Present when the episode was aborted.
    pub error: Option<String>,
}

/// Owns the agent, critics, targets, buffers, and noise of one training run.
pub struct Trainer {
    config: TrainerConfig,
    agent: Agent,
    actor_target: Mlp,
    actor_opt: AdamState,
    /// The distortion critic, or the only critic in single mode.
    q_d: CriticSlot,
    /// The rate critic; absent in single mode.
    q_r: Option<CriticSlot>,
    replay: ReplayBufferC,
    states_a: ReplayBufferA,
    noise: OuNoise,
    sigma: f64,
    picker: ChaCha8Rng,
    episode: usize,
    critic_steps: usize,
}

/// Rollout bookkeeping: the actor input and action for each frame the agent
/// decided, in coding order.
type Decisions = Vec<(Vec<f64>, f64)>;

impl Trainer {
    pub fn new(agent: Agent, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        if config.mode == Mode::Clone {
            return Err(Error::Config("trainer runs dual or single mode".into()));
        }
        if !agent.is_base_frozen() {
            return Err(Error::Precondition("freeze the base module before RL training".into()));
        }
        let seed = config.seed;
        let q_d = CriticSlot::new(&config.critic_layout, config.critic_lr, derive_seed(seed, 11))?;
        let q_r = match config.mode {
            Mode::Dual => Some(CriticSlot::new(
                &config.critic_layout,
                config.critic_lr,
                derive_seed(seed, 12),
            )?),
            _ => None,
        };
        Ok(Self {
            actor_target: agent.actor.clone(),
            actor_opt: AdamState::new(&agent.actor, AdamConfig::with_learning_rate(config.actor_lr)),
            q_d,
            q_r,
            replay: ReplayBufferC::new(config.replay_capacity, derive_seed(seed, 13))?,
            states_a: ReplayBufferA::new(),
            noise: OuNoise::new(config.noise_theta, config.noise_sigma, derive_seed(seed, 14)),
            sigma: config.noise_sigma,
            picker: ChaCha8Rng::seed_from_u64(derive_seed(seed, 15)),
            episode: 0,
            critic_steps: 0,
            agent,
            config,
        })
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn into_agent(self) -> Agent {
        self.agent
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn replay(&self) -> &ReplayBufferC {
        &self.replay
    }

    pub fn distortion_critic(&self) -> &CriticNet {
        &self.q_d.net
    }

    pub fn rate_critic(&self) -> Option<&CriticNet> {
        self.q_r.as_ref().map(|s| &s.net)
    }

    pub fn episodes_run(&self) -> usize {
        self.episode
    }

    /// Run one episode on `gop`. Failures abort the episode, not the run.
    pub fn run_episode<E: FrameEncoder + ?Sized>(&mut self, env: &mut E, gop: &GopSpec) -> EpisodeOutcome {
        let sigma = self.sigma;
        let episode = self.episode;
        self.episode += 1;
        self.sigma *= self.config.noise_decay;
        let result = match self.config.mode {
            Mode::Single => self.single_episode(env, gop, sigma),
            _ => self.dual_episode(env, gop, sigma),
        };
        match result {
            Ok(mut out) => {
                out.row.episode = episode;
                out
            }
            Err(e) => EpisodeOutcome {
                row: LogRow {
                    episode,
                    anchor_qp: gop.anchor_qp,
                    budget: gop.budget,
                    bits: None,
                    mse_total: None,
                    over_budget: false,
                    chosen_critic: ChosenCritic::Aborted,
                    loss_qd: None,
                    loss_qr: None,
                    actor_objective: None,
                    noise_sigma: sigma,
                },
                noisy: None,
                clean: None,
                transitions: Vec::new(),
                error: Some(e.to_string()),
            },
        }
    }

    /// Rollout with exploration noise. Returns the result and the agent's
    /// decisions; frames forced by terminal mode are not among them.
    fn noisy_rollout<E: FrameEncoder + ?Sized>(
        &mut self,
        env: &mut E,
        gop: &GopSpec,
        sigma: f64,
        terminal_mode: bool,
    ) -> Result<(EpisodeResult, Decisions)> {
        self.noise.reset();
        self.noise.sigma = sigma;
        let agent = &self.agent;
        let noise = &mut self.noise;
        let mut decisions = Vec::with_capacity(gop.gop_size);
        let result = run_episode_with(env, gop, |v| {
            if terminal_mode {
                if let Some(qp) = forced_qp(v) {
                    return Ok(i32::from(qp));
                }
            }
            let s = extract_state(v.gop, v.position, v.decoded, v.bits_spent)?;
            let d = agent.act_noisy(&s, noise.step())?;
            decisions.push((d.input, d.raw_action));
            Ok(i32::from(d.qp))
        })?;
        Ok((result, decisions))
    }

    /// Noise-free rollout storing every actor input in the actor buffer.
    fn clean_rollout<E: FrameEncoder + ?Sized>(
        &mut self,
        env: &mut E,
        gop: &GopSpec,
        terminal_mode: bool,
    ) -> Result<EpisodeResult> {
        let agent = &self.agent;
        let states_a = &mut self.states_a;
        run_episode_with(env, gop, |v| {
            if terminal_mode {
                if let Some(qp) = forced_qp(v) {
                    return Ok(i32::from(qp));
                }
            }
            let s = extract_state(v.gop, v.position, v.decoded, v.bits_spent)?;
            let d = agent.act(&s)?;
            states_a.push(d.input);
            Ok(i32::from(d.qp))
        })
    }

    fn extremes<E: FrameEncoder + ?Sized>(env: &mut E, gop: &GopSpec) -> Result<(f64, f64)> {
        let lo = run_episode_with(env, gop, |_| Ok(0))?.total_mse;
        let hi = run_episode_with(env, gop, |_| Ok(i32::from(QP_MAX)))?.total_mse;
        Ok((lo, hi))
    }

    fn terminal_input(&self, gop: &GopSpec, bits: f64) -> Result<Vec<f64>> {
        self.agent.input_for(&terminal_state(gop, bits))
    }

    /// One TD step per critic on a shared minibatch, or `None`s during warm-up.
    fn update_critics(&mut self) -> Result<(Option<f64>, Option<f64>)> {
        let gamma = self.config.gamma;
        let Some(batch) = self.replay.sample(self.config.batch) else {
            return Ok((None, None));
        };
        let next = target_actions(&self.actor_target, &batch)?;
        let select_d = if self.q_r.is_some() {
            RewardSelect::Distortion
        } else {
            RewardSelect::Sum
        };
        let skip_numeric = |r: Result<f64>| match r {
            Ok(l) => Ok(Some(l)),
            Err(Error::Numeric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let d = &mut self.q_d;
        let loss_d = skip_numeric(critic_td_update_with(
            &mut d.net, &mut d.opt, &d.target, &next, &batch, select_d, gamma,
        ))?;
        let loss_r = match self.q_r.as_mut() {
            Some(r) => skip_numeric(critic_td_update_with(
                &mut r.net,
                &mut r.opt,
                &r.target,
                &next,
                &batch,
                RewardSelect::Rate,
                gamma,
            ))?,
            None => None,
        };
        self.critic_steps += 1;
        Ok((loss_d, loss_r))
    }

    fn update_actor(&mut self, use_rate: bool) -> Result<Option<f64>> {
        if self.critic_steps == 0 || self.states_a.is_empty() {
            self.states_a.clear();
            return Ok(None);
        }
        let critic = match (use_rate, self.q_r.as_ref()) {
            (true, Some(r)) => &r.net,
            _ => &self.q_d.net,
        };
        let objective = match actor_update(&mut self.agent.actor, &mut self.actor_opt, critic, self.states_a.states()) {
            Ok(v) => Some(v),
            Err(Error::Numeric(_)) => None,
            Err(e) => return Err(e),
        };
        self.states_a.clear();
        Ok(objective)
    }

    fn update_targets(&mut self) -> Result<()> {
        let tau = self.config.tau;
        soft_update(&mut self.q_d.target, &self.q_d.net, tau)?;
        if let Some(r) = self.q_r.as_mut() {
            soft_update(&mut r.target, &r.net, tau)?;
        }
        soft_update(&mut self.actor_target, &self.agent.actor, tau)
    }

    fn dual_episode<E: FrameEncoder + ?Sized>(&mut self, env: &mut E, gop: &GopSpec, sigma: f64) -> Result<EpisodeOutcome> {
        let n = gop.gop_size;
        let (lo, hi) = Self::extremes(env, gop)?;

        // Part I: explore and feed the critics.
        let (noisy, decisions) = self.noisy_rollout(env, gop, sigma, false)?;
        let terminal_next = self.terminal_input(gop, noisy.total_bits)?;
        let mut transitions = Vec::with_capacity(n);
        for (k, (input, action)) in decisions.iter().enumerate() {
            let last = k + 1 == decisions.len();
            transitions.push(Transition {
                state: input.clone(),
                action: *action,
                r_d: distortion_reward(noisy.frames[k].mse, lo, hi, n)?,
                r_r: if last { rate_reward(gop.budget, noisy.total_bits)? } else { 0.0 },
                next_state: if last { terminal_next.clone() } else { decisions[k + 1].0.clone() },
                terminal: last,
            });
        }
        for t in &transitions {
            self.replay.push(t.clone());
        }
        let (loss_qd, loss_qr) = self.update_critics()?;

        // Part II: act greedily, then pick the critic by the budget outcome.
        let clean = self.clean_rollout(env, gop, false)?;
        let over_budget = gop.budget < clean.total_bits;
        let chosen = if over_budget {
            ChosenCritic::Rate
        } else {
            ChosenCritic::Distortion
        };
        let actor_objective = self.update_actor(over_budget)?;
        self.update_targets()?;

        Ok(EpisodeOutcome {
            row: LogRow {
                episode: 0,
                anchor_qp: gop.anchor_qp,
                budget: gop.budget,
                bits: Some(clean.total_bits),
                mse_total: Some(clean.total_mse),
                over_budget,
                chosen_critic: chosen,
                loss_qd,
                loss_qr,
                actor_objective,
                noise_sigma: sigma,
            },
            noisy: Some(noisy),
            clean: Some(clean),
            transitions,
            error: None,
        })
    }

    fn single_episode<E: FrameEncoder + ?Sized>(&mut self, env: &mut E, gop: &GopSpec, sigma: f64) -> Result<EpisodeOutcome> {
        let (lo, hi) = Self::extremes(env, gop)?;
        let d_norm = single_critic_norm(lo, hi, gop.gop_size)?;
        let lambda = self.config.lambda_single_critic;

        let (noisy, decisions) = self.noisy_rollout(env, gop, sigma, true)?;
        let decided = decisions.len();
        let forced_mse: f64 = noisy.frames[decided..].iter().map(|f| f.mse).sum();
        let terminal_next = self.terminal_input(gop, noisy.total_bits)?;
        let mut transitions = Vec::with_capacity(decided);
        for (k, (input, action)) in decisions.iter().enumerate() {
            let last = k + 1 == decided;
            let mse = noisy.frames[k].mse + if last { forced_mse } else { 0.0 };
            transitions.push(Transition {
                state: input.clone(),
                action: *action,
                r_d: single_critic_reward(mse, d_norm, gop.budget, noisy.total_bits, lambda, false)?,
                r_r: if last {
                    single_critic_reward(0.0, d_norm, gop.budget, noisy.total_bits, lambda, true)?
                } else {
                    0.0
                },
                next_state: if last { terminal_next.clone() } else { decisions[k + 1].0.clone() },
                terminal: last,
            });
        }
        for t in &transitions {
            self.replay.push(t.clone());
        }
        let (loss, _) = self.update_critics()?;

        let clean = self.clean_rollout(env, gop, true)?;
        let over_budget = gop.budget < clean.total_bits;
        let actor_objective = self.update_actor(false)?;
        self.update_targets()?;

        Ok(EpisodeOutcome {
            row: LogRow {
                episode: 0,
                anchor_qp: gop.anchor_qp,
                budget: gop.budget,
                bits: Some(clean.total_bits),
                mse_total: Some(clean.total_mse),
                over_budget,
                chosen_critic: ChosenCritic::Single,
                loss_qd: loss,
                loss_qr: None,
                actor_objective,
                noise_sigma: sigma,
            },
            noisy: Some(noisy),
            clean: Some(clean),
            transitions,
            error: None,
        })
    }

    /// Everything needed to inspect or resume the run.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.agent.to_checkpoint();
        ck.insert_mlp("actor_target", &self.actor_target);
        ck.insert_optimizer("actor", &self.actor_opt);
        ck.insert_critic("q_d", &self.q_d.net);
        ck.insert_critic("q_d_target", &self.q_d.target);
        ck.insert_optimizer("q_d", &self.q_d.opt);
        if let Some(r) = &self.q_r {
            ck.insert_critic("q_r", &r.net);
            ck.insert_critic("q_r_target", &r.target);
            ck.insert_optimizer("q_r", &r.opt);
        }
        ck.metadata.insert("mode".into(), self.config.mode.as_str().into());
        ck.metadata.insert("episode".into(), self.episode.to_string());
        ck
    }

    /// Train for `config.episodes` episodes, drawing a scenario uniformly
    /// from `pool` each time. `on_checkpoint` is called every
    /// `checkpoint_every` episodes.
    pub fn train<E, F>(&mut self, env: &mut E, pool: &[GopSpec], mut on_checkpoint: F) -> Result<TrainingLog>
    where
        E: FrameEncoder + ?Sized,
        F: FnMut(usize, &Checkpoint) -> Result<()>,
    {
        if pool.is_empty() {
            return Err(Error::Precondition("training needs at least one scenario".into()));
        }
        let mut log = TrainingLog::default();
        for _ in 0..self.config.episodes {
            let gop = &pool[self.picker.random_range(0..pool.len())];
            let out = self.run_episode(env, gop);
            log.rows.push(out.row);
            let every = self.config.checkpoint_every;
            if every > 0 && self.episode % every == 0 {
                on_checkpoint(self.episode, &self.checkpoint())?;
            }
        }
        Ok(log)
    }
}

/// Every scenario re-budgeted at every anchor QP, scenario-major.
pub fn with_anchors(scenarios: &[GopSpec], anchors: &[u8]) -> Result<Vec<GopSpec>> {
    let mut out = Vec::with_capacity(scenarios.len() * anchors.len());
    for g in scenarios {
        for &a in anchors {
            out.push(g.with_anchor(a)?);
        }
    }
    Ok(out)
}

/// Fresh agent whose base is cloned from the temporal-id ladder on
/// `clone_pool` and then frozen.
pub fn bootstrap_agent(config: &TrainerConfig, clone_pool: &[GopSpec]) -> Result<(Agent, CloneOutcome)> {
    let outcome = clone_base(&TidLadder, clone_pool, config, derive_seed(config.seed, 1))?;
    let mut agent = Agent::new(&config.actor_widths, derive_seed(config.seed, 2))?;
    agent.set_base(outcome.base.clone())?;
    agent.freeze_base();
    Ok((agent, outcome))
}

/// Dual-critic training of `agent` on `pool` with the in-process simulator
/// or any other encoder.
pub fn train_dual<E: FrameEncoder + ?Sized>(
    env: &mut E,
    agent: Agent,
    pool: &[GopSpec],
    config: &TrainerConfig,
) -> Result<(Agent, TrainingLog)> {
    let cfg = TrainerConfig {
        mode: Mode::Dual,
        ..config.clone()
    };
    let mut trainer = Trainer::new(agent, cfg)?;
    let log = trainer.train(env, pool, |_, _| Ok(()))?;
    Ok((trainer.into_agent(), log))
}

/// Single-critic baseline training with a fixed rate weight.
pub fn train_single<E: FrameEncoder + ?Sized>(
    env: &mut E,
    agent: Agent,
    pool: &[GopSpec],
    config: &TrainerConfig,
) -> Result<(Agent, TrainingLog)> {
    let cfg = TrainerConfig {
        mode: Mode::Single,
        ..config.clone()
    };
    let mut trainer = Trainer::new(agent, cfg)?;
    let log = trainer.train(env, pool, |_, _| Ok(()))?;
    Ok((trainer.into_agent(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{build_gop, Difficulty};

    #[test]
    fn base_qp_scaling() {
        assert_eq!(qp_from_unit(0.5), 26);
        assert_eq!(qp_from_unit(0.0), 0);
        assert_eq!(qp_from_unit(1.0), 51);
        assert_eq!(qp_from_unit(-0.2), 0);
        assert_eq!(qp_from_unit(1.7), 51);
    }

    #[test]
    fn delta_scaling_and_clamp() {
        assert_eq!(delta_from_action(0.5), 0);
        assert_eq!(apply_delta(30, 0.5), 30);
        assert_eq!(delta_from_action(1.0), 10);
        assert_eq!(apply_delta(45, 1.0), 51);
        assert_eq!(delta_from_action(0.0), -10);
        assert_eq!(apply_delta(5, 0.0), 0);
    }

    #[test]
    fn fresh_actor_starts_at_zero_delta() {
        let agent = Agent::new(&[16, 8], 1).unwrap();
        let gop = build_gop(4, 1, Difficulty::Slow).unwrap();
        let s = extract_state(&gop, 0, &[None; 4], 0.0).unwrap();
        let d = agent.act(&s).unwrap();
        assert_eq!(d.qp, d.base_qp);
        assert_eq!(d.input.len(), STATE_WIDTH + 1);
        assert_eq!(*d.input.last().unwrap(), f64::from(d.base_qp) / 51.0);
    }

    #[test]
    fn noisy_action_is_clipped() {
        let agent = Agent::new(&[8], 2).unwrap();
        let gop = build_gop(2, 1, Difficulty::Slow).unwrap();
        let s = extract_state(&gop, 0, &[None; 2], 0.0).unwrap();
        assert_eq!(agent.act_noisy(&s, 5.0).unwrap().raw_action, 1.0);
        assert_eq!(agent.act_noisy(&s, -5.0).unwrap().raw_action, 0.0);
    }

    #[test]
    fn ladder_teacher_offsets() {
        let gop = build_gop(4, 1, Difficulty::Slow).unwrap().with_anchor(32).unwrap();
        let qps: Vec<u8> = gop.frames.iter().map(|f| TidLadder.qp(&gop, f)).collect();
        assert_eq!(qps, vec![29, 34, 32, 34]);
    }

    #[test]
    fn cloning_rejects_empty_scenarios() {
        let cfg = TrainerConfig::default();
        assert!(matches!(
            clone_base(&ConstantTeacher(32), &[], &cfg, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn trainer_requires_frozen_base() {
        let agent = Agent::new(&[8], 0).unwrap();
        assert!(Trainer::new(agent, TrainerConfig::default()).is_err());
    }

    #[test]
    fn frozen_base_cannot_be_replaced() {
        let mut agent = Agent::new(&[8], 0).unwrap();
        let other = agent.base.clone();
        agent.set_base(other.clone()).unwrap();
        agent.freeze_base();
        assert!(matches!(agent.set_base(other), Err(Error::State(_))));
    }

    #[test]
    fn agent_checkpoint_round_trip() {
        let mut agent = Agent::new(&[6, 4], 3).unwrap();
        agent.freeze_base();
        let back = Agent::from_checkpoint(&Checkpoint::from_json(&agent.to_checkpoint().to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back, agent);
        assert!(back.is_base_frozen());
    }
}
