//! One agent lifetime: act, buffer experience, and every `M` steps update
//! the policy and memory by gradient descent on the mixed loss
//! `(1 - α) L_φ + α L_pg`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tape, Tensor};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::nets::{policy_kl, DenseVars, FeatureLayout, LossParams, MemoryState, PolicyParams, CONTEXT_WIDTH};
use crate::optim::{AdamState, RunningNormalizer};
use crate::rng::{self, Rng};

pub const MINIBATCH: usize = 32;

/// Lifetime schedule and inner optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    /// Total environment steps `U`.
    pub steps: usize,
    /// Update period `M`.
    pub update_every: usize,
    /// Experience buffer length `N`.
    pub buffer_len: usize,
    pub minibatch: usize,
    /// Adam step size `δ_in`.
    pub lr: f64,
    /// Discount used by the guidance advantage.
    pub gamma: f64,
    pub eval_trajectories: usize,
    /// Keep the final buffer snapshot in the report.
    pub record_buffer: bool,
}

impl InnerConfig {
    pub fn new(steps: usize, update_every: usize, buffer_len: usize) -> Self {
        Self {
            steps,
            update_every,
            buffer_len,
            minibatch: MINIBATCH,
            lr: 1e-3,
            gamma: 0.99,
            eval_trajectories: 3,
            record_buffer: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.update_every;
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if m == 0 || self.steps == 0 || self.minibatch == 0 {
            return fail("steps, update_every and minibatch must be positive".into());
        }
        if !m.is_multiple_of(self.minibatch) {
            return fail(format!("update_every (M={m}) must be a multiple of the minibatch size {}", self.minibatch));
        }
        if !self.steps.is_multiple_of(m) {
            return fail(format!("update_every (M={m}) must divide steps (U={})", self.steps));
        }
        if m > self.buffer_len {
            return fail(format!("update_every (M={m}) exceeds buffer_len (N={})", self.buffer_len));
        }
        if self.eval_trajectories == 0 {
            return fail("eval_trajectories must be at least 1".into());
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.gamma) {
            return fail("lr must be positive and gamma in [0, 1]".into());
        }
        Ok(())
    }

    pub fn updates(&self) -> usize {
        self.steps / self.update_every
    }
}

/// One buffered step. `mean` and `std` are the policy's action
/// distribution when the step was taken.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Ring of the `N` most recent transitions, zero-padded until full.
#[derive(Clone, Debug)]
pub struct ExperienceBuffer {
    capacity: usize,
    ring: Vec<Transition>,
    cursor: usize,
}

impl ExperienceBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, ring: Vec::with_capacity(capacity), cursor: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of real (non-padding) entries.
    pub fn filled(&self) -> usize {
        self.ring.len()
    }

    pub fn push(&mut self, t: Transition) {
        if self.ring.len() < self.capacity {
            self.ring.push(t);
        } else {
            self.ring[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Real entries, oldest first.
    pub fn chronological(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.ring.split_at(self.cursor);
        older.iter().chain(newer.iter())
    }

    /// The `m` most recent transitions, oldest first.
    pub fn last(&self, m: usize) -> Vec<&Transition> {
        let n = self.filled();
        self.chronological().skip(n.saturating_sub(m)).collect()
    }

    /// `[N, channels]` matrix, oldest row first, with leading zero rows
    /// standing in for steps not yet taken.
    pub fn matrix(&self, layout: &FeatureLayout, memory: &[f64]) -> Tensor {
        let c = layout.buffer_channels();
        let pad = self.capacity - self.filled();
        let mut data = vec![0.0; pad * c];
        data.reserve(self.filled() * c);
        for t in self.chronological() {
            push_row(&mut data, layout, t, memory);
        }
        Tensor::new(vec![self.capacity, c], data).expect("buffer shape")
    }
}

fn push_row(out: &mut Vec<f64>, layout: &FeatureLayout, t: &Transition, memory: &[f64]) {
    out.extend_from_slice(&t.state);
    out.extend_from_slice(&t.action);
    out.push(if t.done { 1.0 } else { 0.0 });
    if layout.reward {
        out.push(t.reward);
    }
    out.extend_from_slice(memory);
    out.extend_from_slice(&t.mean);
    out.extend_from_slice(&t.std);
}

/// Statistics gathered at one update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: usize,
    pub kl: f64,
    /// Mean raw return of episodes finished since the previous update, or the
    /// most recent finished episode if none; NaN before the first one.
    pub episode_return: f64,
}

/// Buffer contents at the last update, for sensitivity analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferSnapshot {
    pub matrix: Tensor,
    pub window: usize,
    pub memory: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct InnerLoopReport {
    pub updates: Vec<UpdateRecord>,
    /// `(step, undiscounted return)` for every finished training episode.
    pub episode_returns: Vec<(usize, f64)>,
    /// Mean return of the evaluation rollouts with the final policy.
    pub final_return: f64,
    pub policy: PolicyParams,
    pub memory: MemoryState,
    pub snapshot: Option<BufferSnapshot>,
}

impl InnerLoopReport {
    pub fn kl_trace(&self) -> Vec<f64> {
        self.updates.iter().map(|u| u.kl).collect()
    }
}

/// `(1 - α) L_φ + α L_pg`.
pub fn mixed_loss(epg: f64, guidance: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange { what: "alpha", value: alpha });
    }
    Ok((1.0 - alpha) * epg + alpha * guidance)
}

/// Discounted reward-to-go inside the window (cut at episode ends),
/// centered and scaled by the window's population std.
pub fn window_advantages(rewards: &[f64], dones: &[bool], gamma: f64) -> Vec<f64> {
    let m = rewards.len();
    let mut rtg = vec![0.0; m];
    let mut running = 0.0;
    for i in (0..m).rev() {
        if dones[i] {
            running = 0.0;
        }
        running = rewards[i] + gamma * running;
        rtg[i] = running;
    }
    let mean = rtg.iter().sum::<f64>() / m as f64;
    let var = rtg.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / m as f64;
    let std = libm::sqrt(var).max(1e-8);
    rtg.iter().map(|g| (g - mean) / std).collect()
}

/// Guidance surrogate `-Σ Â_t log π(a_t | s_t)` over a window.
pub fn guidance_loss(window: &[&Transition], policy: &PolicyParams, gamma: f64) -> Result<f64> {
    let rewards: Vec<f64> = window.iter().map(|t| t.reward).collect();
    let dones: Vec<bool> = window.iter().map(|t| t.done).collect();
    let adv = window_advantages(&rewards, &dones, gamma);
    let mut total = 0.0;
    for (t, a) in window.iter().zip(&adv) {
        total -= a * policy.log_prob(&t.state, &t.action)?;
    }
    Ok(total)
}

/// Shuffled split of `0..len` into chunks of `size`; every index appears
/// exactly once.
pub fn minibatch_partition(len: usize, size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mean undiscounted return of `n` rollouts driven by `act`, each capped at
/// the environment horizon.
pub fn evaluate_with<E, F>(env: &mut E, n: usize, rng: &mut Rng, mut act: F) -> Result<f64>
where
    E: Environment,
    F: FnMut(&[f64], &mut Rng) -> Result<Vec<f64>>,
{
    if n == 0 {
        return Err(Error::OutOfRange { what: "evaluation trajectories", value: 0.0 });
    }
    let mut total = 0.0;
    for _ in 0..n {
        let mut obs = env.reset(rng);
        let mut ret = 0.0;
        for _ in 0..env.horizon() {
            let a = act(&obs, rng)?;
            let out = env.step(&a)?;
            ret += out.reward;
            obs = out.observation;
            if out.done {
                break;
            }
        }
        total += ret;
    }
    Ok(total / n as f64)
}

/// Mean return of `n` stochastic rollouts of `policy`, observations passed
/// through a frozen normalizer when given.
pub fn evaluate_policy<E: Environment>(
    policy: &PolicyParams,
    env: &mut E,
    normalizer: Option<&RunningNormalizer>,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    evaluate_with(env, n, rng, |obs, rng| {
        let s = match normalizer {
            Some(norm) => norm.normalize(obs)?,
            None => obs.to_vec(),
        };
        Ok(policy.sample(&s, rng)?.0)
    })
}

/// Minibatch objective compiled once per lifetime and re-fed each step.
struct UpdateProgram {
    tape: Tape,
    use_epg: bool,
    use_guidance: bool,
    reward: bool,
    rows: usize,
    policy_len: usize,
}

impl UpdateProgram {
    fn build(policy: &PolicyParams, loss: &LossParams, rows: usize, alpha: f64) -> Result<Self> {
        let layout = loss.arch().layout;
        let use_epg = alpha < 1.0;
        let use_guidance = alpha > 0.0;
        let mut g = Graph::new();
        let pv = policy.declare(&mut g, true);
        let mv = MemoryState::zeros().declare(&mut g, true);
        let states = g.constant_input(&[rows, layout.obs_dim]);
        let actions = g.constant_input(&[rows, layout.act_dim]);
        let mean = pv.mean(&mut g, states)?;
        let mut terms = Vec::new();
        if use_epg {
            let shape = |name: &str| loss.tensor(name).expect("loss tensor").shape().to_vec();
            let hidden = DenseVars {
                weight: g.constant_input(&shape("head_hidden.weight")),
                bias: g.constant_input(&shape("head_hidden.bias")),
            };
            let out = DenseVars {
                weight: g.constant_input(&shape("head_out.weight")),
                bias: g.constant_input(&shape("head_out.bias")),
            };
            let done = g.constant_input(&[rows, 1]);
            let reward = layout.reward.then(|| g.constant_input(&[rows, 1]));
            let ctx = g.constant_input(&[1, CONTEXT_WIDTH]);

            let mem = mv.output(&mut g)?;
            let mem_rows = g.broadcast_rows(mem, rows)?;
            let std = g.exp(pv.log_std)?;
            let std_rows = g.broadcast_rows(std, rows)?;
            let ctx_rows = g.broadcast_rows(ctx, rows)?;
            let mut cols = vec![states, actions, done];
            cols.extend(reward);
            cols.extend([mem_rows, mean, std_rows, ctx_rows]);
            let feats = g.concat_cols(&cols)?;
            let h = hidden.apply(&mut g, feats)?;
            let a = g.leaky_relu(h)?;
            let o = out.apply(&mut g, a)?;
            let total = g.sum(o)?;
            terms.push(if use_guidance { g.scale(total, 1.0 - alpha)? } else { total });
        }
        if use_guidance {
            let adv = g.constant_input(&[rows]);
            let lp = pv.log_prob_with_mean(&mut g, mean, actions)?;
            let weighted = g.mul(lp, adv)?;
            let total = g.sum(weighted)?;
            terms.push(g.scale(total, -alpha)?);
        }
        let objective = match terms.as_slice() {
            [one] => *one,
            [a, b] => g.add(*a, *b)?,
            _ => unreachable!("alpha selects at least one term"),
        };
        let mut tape = g.finish(objective);
        tape.set_check_finite(true);
        Ok(Self { tape, use_epg, use_guidance, reward: layout.reward, rows, policy_len: policy.param_count() })
    }

    /// Returns the objective and the gradient with respect to `[policy; memory]`.
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &mut self,
        policy: &PolicyParams,
        memory: &MemoryState,
        loss: &LossParams,
        batch: &[&Transition],
        advantages: &[f64],
        context: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let rows = self.rows;
        let mut inputs = Vec::with_capacity(24);
        policy.feed(&mut inputs);
        memory.feed(&mut inputs);
        let flat =
            |f: &dyn Fn(&Transition) -> &[f64]| -> Vec<f64> { batch.iter().flat_map(|t| f(t).to_vec()).collect() };
        let obs_dim = batch[0].state.len();
        let act_dim = batch[0].action.len();
        inputs.push(Tensor::matrix(rows, obs_dim, flat(&|t| &t.state))?);
        inputs.push(Tensor::matrix(rows, act_dim, flat(&|t| &t.action))?);
        if self.use_epg {
            for name in ["head_hidden.weight", "head_hidden.bias", "head_out.weight", "head_out.bias"] {
                inputs.push(loss.tensor(name).expect("loss tensor").clone());
            }
            inputs.push(Tensor::matrix(rows, 1, batch.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect())?);
            if self.reward {
                inputs.push(Tensor::matrix(rows, 1, batch.iter().map(|t| t.reward).collect())?);
            }
            inputs.push(Tensor::matrix(1, CONTEXT_WIDTH, context.to_vec())?);
        }
        if self.use_guidance {
            inputs.push(Tensor::vector(advantages.to_vec()));
        }
        let value = self.tape.forward(&inputs)?.data()[0];
        let grads = self.tape.backward(&Tensor::scalar(1.0))?;
        let n_policy_inputs = policy.layers.len() * 2 + 1;
        let mut flat_grad = Vec::with_capacity(self.policy_len + MemoryState::param_count());
        for i in 0..n_policy_inputs + 2 {
            flat_grad.extend_from_slice(grads.get(i).expect("differentiable").data());
        }
        Ok((value, flat_grad))
    }
}

/// Trains a policy from `init` for one lifetime on `env` using `loss`
/// mixed with the guidance surrogate at weight `alpha`.
pub fn run_inner_loop<E: Environment>(
    loss: &LossParams,
    env: &mut E,
    init: PolicyParams,
    cfg: &InnerConfig,
    alpha: f64,
    seed: u64,
) -> Result<InnerLoopReport> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange { what: "alpha", value: alpha });
    }
    let layout = FeatureLayout::new(env.obs_dim(), env.act_dim(), env.reward_observing());
    if loss.arch().layout != layout || loss.arch().buffer_len != cfg.buffer_len {
        return Err(Error::Config(format!(
            "loss expects {} buffer channels over N={}, environment provides {} over N={}",
            loss.arch().layout.buffer_channels(),
            loss.arch().buffer_len,
            layout.buffer_channels(),
            cfg.buffer_len
        )));
    }
    if init.obs_dim() != env.obs_dim() || init.act_dim() != env.act_dim() {
        return Err(Error::Dimension { what: "policy observation", expected: env.obs_dim(), found: init.obs_dim() });
    }

    let mut rng = rng::stream(seed, &[rng::label::INNER]);
    let mut policy = init;
    let mut memory = MemoryState::zeros();
    let policy_arch = policy.arch();
    let mut adam = AdamState::inner(policy.param_count() + MemoryState::param_count());
    let mut obs_norm = RunningNormalizer::new(env.obs_dim());
    let mut reward_norm = RunningNormalizer::new(1);
    let mut buffer = ExperienceBuffer::new(cfg.buffer_len);
    let mut program = UpdateProgram::build(&policy, loss, cfg.minibatch, alpha)?;

    let mut updates = Vec::with_capacity(cfg.updates());
    let mut episode_returns = Vec::new();
    let mut episode_sum = 0.0;
    let mut recent: Vec<f64> = Vec::new();
    let mut last_return = f64::NAN;
    let mut snapshot = None;

    let mut obs = env.reset(&mut rng);
    for t in 1..=cfg.steps {
        obs_norm.update(&obs)?;
        let state = obs_norm.normalize(&obs)?;
        let (action, mean) = policy.sample(&state, &mut rng)?;
        let out = env.step(&action)?;
        reward_norm.update(&[out.reward])?;
        let reward = reward_norm.normalize(&[out.reward])?[0];
        buffer.push(Transition { state, action, reward, done: out.done, mean, std: policy.std() });
        episode_sum += out.reward;
        if out.done {
            episode_returns.push((t, episode_sum));
            recent.push(episode_sum);
            episode_sum = 0.0;
            obs = env.reset(&mut rng);
        } else {
            obs = out.observation;
        }

        if t % cfg.update_every != 0 {
            continue;
        }

        let mem_out = memory.forward();
        let matrix = buffer.matrix(&layout, &mem_out);
        let context = if program.use_epg { loss.context(&matrix)? } else { Vec::new() };
        if cfg.record_buffer && t == cfg.steps {
            snapshot = Some(BufferSnapshot { matrix, window: cfg.update_every, memory: mem_out });
        }
        let window = buffer.last(cfg.update_every);
        let advantages = if program.use_guidance {
            let rewards: Vec<f64> = window.iter().map(|t| t.reward).collect();
            let dones: Vec<bool> = window.iter().map(|t| t.done).collect();
            window_advantages(&rewards, &dones, cfg.gamma)
        } else {
            vec![0.0; window.len()]
        };

        let before = policy.clone();
        for chunk in minibatch_partition(window.len(), cfg.minibatch, &mut rng) {
            let batch: Vec<&Transition> = chunk.iter().map(|&i| window[i]).collect();
            let adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
            let (_, grad) = program.evaluate(&policy, &memory, loss, &batch, &adv, &context)?;
            let mut params = policy.flatten();
            params.extend(memory.flatten());
            adam.step(&mut params, &grad, cfg.lr)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite { context: "inner-loop parameters" });
            }
            let (p_part, m_part) = params.split_at(policy.param_count());
            policy = PolicyParams::unflatten(&policy_arch, p_part)?;
            memory = MemoryState::unflatten(m_part)?;
        }
        let states: Vec<Vec<f64>> = window.iter().map(|t| t.state.clone()).collect();
        let kl = policy_kl(&before, &policy, &states)?;
        if !kl.is_finite() {
            return Err(Error::NonFinite { context: "policy KL" });
        }
        let episode_return =
            if recent.is_empty() { last_return } else { recent.iter().sum::<f64>() / recent.len() as f64 };
        if let Some(&r) = recent.last() {
            last_return = r;
        }
        recent.clear();
        updates.push(UpdateRecord { step: t, kl, episode_return });
    }

    let final_return = evaluate_policy(&policy, env, Some(&obs_norm), cfg.eval_trajectories, &mut rng)?;
    if !final_return.is_finite() {
        return Err(Error::NonFinite { context: "final return" });
    }
    Ok(InnerLoopReport { updates, episode_returns, final_return, policy, memory, snapshot })
}
