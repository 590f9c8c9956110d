//! Randomized point-mass task families.
//!
//! Each family hides a different piece of task identity:
//!
//! * `random-dynamics-point`: gain and friction are randomized, the goal is
//!   fixed, so reward is inferable from observations.
//! * `directional-point`: the rewarded direction along the first axis is a
//!   random sign that no observation reveals.
//! * `goal-point`: the goal is random and observed alongside the position.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    RandomDynamicsPoint,
    DirectionalPoint,
    GoalPoint,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::RandomDynamicsPoint, Family::DirectionalPoint, Family::GoalPoint];

    pub fn id(self) -> &'static str {
        match self {
            Family::RandomDynamicsPoint => "random-dynamics-point",
            Family::DirectionalPoint => "directional-point",
            Family::GoalPoint => "goal-point",
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            Family::GoalPoint => STATE_DIM + 2,
            _ => STATE_DIM,
        }
    }

    /// Whether the loss sees rewards by default for this family.
    pub fn default_reward_observing(self) -> bool {
        matches!(self, Family::DirectionalPoint)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL.into_iter().find(|f| f.id() == s).ok_or_else(|| Error::UnknownFamily(String::from(s)))
    }
}

/// Closed interval sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn sample(self, rng: &mut Rng) -> f64 {
        if self.0 == self.1 {
            return self.0;
        }
        self.0 + (self.1 - self.0) * rng.random::<f64>()
    }

    fn valid(self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1
    }
}

/// Distribution over tasks of one family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDistribution {
    pub family: Family,
    #[serde(default = "defaults::gain")]
    pub gain: Interval,
    #[serde(default = "defaults::friction")]
    pub friction: Interval,
    #[serde(default = "defaults::goal_x")]
    pub goal_x: Interval,
    #[serde(default = "defaults::goal_y")]
    pub goal_y: Interval,
    /// Probability that the directional sign is +1.
    #[serde(default = "defaults::half")]
    pub positive_prob: f64,
    #[serde(default = "defaults::fixed_goal")]
    pub fixed_goal: [f64; 2],
    /// Half-width of the uniform initial offset around the origin.
    #[serde(default = "defaults::init_spread")]
    pub init_spread: f64,
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    /// `None` picks the family default.
    #[serde(default)]
    pub reward_observing: Option<bool>,
    #[serde(default)]
    pub mirror: bool,
    #[serde(default)]
    pub no_reset: bool,
    #[serde(default = "defaults::goal_radius")]
    pub goal_radius: f64,
}

mod defaults {
    use super::Interval;
    pub fn gain() -> Interval {
        Interval(0.5, 2.0)
    }
    pub fn friction() -> Interval {
        Interval(0.0, 0.2)
    }
    pub fn goal_x() -> Interval {
        Interval(1.0, 4.0)
    }
    pub fn goal_y() -> Interval {
        Interval(0.0, 0.0)
    }
    pub fn half() -> f64 {
        0.5
    }
    pub fn fixed_goal() -> [f64; 2] {
        [2.0, 2.0]
    }
    pub fn init_spread() -> f64 {
        0.1
    }
    pub fn horizon() -> usize {
        64
    }
    pub fn gamma() -> f64 {
        0.99
    }
    pub fn goal_radius() -> f64 {
        0.25
    }
}

impl TaskDistribution {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            gain: defaults::gain(),
            friction: defaults::friction(),
            goal_x: defaults::goal_x(),
            goal_y: defaults::goal_y(),
            positive_prob: defaults::half(),
            fixed_goal: defaults::fixed_goal(),
            init_spread: defaults::init_spread(),
            horizon: defaults::horizon(),
            gamma: defaults::gamma(),
            reward_observing: None,
            mirror: false,
            no_reset: false,
            goal_radius: defaults::goal_radius(),
        }
    }

    pub fn reward_observing(&self) -> bool {
        self.reward_observing.unwrap_or_else(|| self.family.default_reward_observing())
    }

    pub fn obs_dim(&self) -> usize {
        self.family.obs_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(String::from(m)));
        if !(self.gain.valid() && self.friction.valid() && self.goal_x.valid() && self.goal_y.valid()) {
            return bad("task ranges must be finite with lo <= hi");
        }
        if !(0.0..=1.0).contains(&self.positive_prob) {
            return bad("task.positive_prob must lie in [0, 1]");
        }
        if self.horizon == 0 {
            return bad("task.horizon must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("task.gamma must lie in [0, 1]");
        }
        if self.no_reset && self.family != Family::GoalPoint {
            return bad("task.no_reset is only available on goal-point");
        }
        if !(self.goal_radius > 0.0) || !(self.init_spread >= 0.0) {
            return bad("task.goal_radius must be positive and task.init_spread non-negative");
        }
        Ok(())
    }

    /// Draws a task with hidden parameters from the configured ranges.
    pub fn sample_task(&self, seed: u64) -> Result<MdpInstance> {
        self.validate()?;
        let mut r = rng::stream(seed, &[rng::label::TASK]);
        let flip = if self.mirror { -1.0 } else { 1.0 };
        let mut hidden = HiddenParams { gain: 1.0, friction: 0.0, sign: 1.0, goal: [0.0; 2] };
        match self.family {
            Family::RandomDynamicsPoint => {
                hidden.gain = self.gain.sample(&mut r);
                hidden.friction = self.friction.sample(&mut r);
                hidden.goal = self.fixed_goal;
            }
            Family::DirectionalPoint => {
                let positive = r.random::<f64>() < self.positive_prob;
                hidden.sign = flip * if positive { 1.0 } else { -1.0 };
            }
            Family::GoalPoint => {
                hidden.goal = [flip * self.goal_x.sample(&mut r), self.goal_y.sample(&mut r)];
            }
        }
        Ok(MdpInstance {
            family: self.family,
            hidden,
            horizon: self.horizon,
            gamma: self.gamma,
            init_spread: self.init_spread,
            no_reset: self.no_reset,
            goal_radius: self.goal_radius,
            reward_observing: self.reward_observing(),
            state: [0.0; 2],
            steps: 0,
            done: true,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HiddenParams {
    pub gain: f64,
    pub friction: f64,
    pub sign: f64,
    pub goal: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// One sampled task with its running state.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpInstance {
    family: Family,
    hidden: HiddenParams,
    horizon: usize,
    gamma: f64,
    init_spread: f64,
    no_reset: bool,
    goal_radius: f64,
    reward_observing: bool,
    state: [f64; 2],
    steps: usize,
    done: bool,
}

impl MdpInstance {
    pub fn family(&self) -> Family {
        self.family
    }

    pub fn hidden(&self) -> &HiddenParams {
        &self.hidden
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn obs_dim(&self) -> usize {
        self.family.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        ACTION_DIM
    }

    pub fn reward_observing(&self) -> bool {
        self.reward_observing
    }

    pub fn no_reset(&self) -> bool {
        self.no_reset
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn state(&self) -> [f64; 2] {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = self.state.to_vec();
        if self.family == Family::GoalPoint {
            obs.extend_from_slice(&self.hidden.goal);
        }
        obs
    }

    /// Samples an initial state around the origin and returns the observation.
    pub fn reset(&mut self, rng: &mut Rng) -> Vec<f64> {
        for s in &mut self.state {
            *s = self.init_spread * (2.0 * rng.random::<f64>() - 1.0);
        }
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    /// Applies `action` (clipped to [-1, 1]) and returns the transition.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != ACTION_DIM {
            return Err(Error::Dimension { what: "env action", expected: ACTION_DIM, found: action.len() });
        }
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let prev = self.state;
        let h = &self.hidden;
        let reward = match self.family {
            Family::RandomDynamicsPoint => {
                for i in 0..2 {
                    self.state[i] = prev[i] + h.gain * a[i] - h.friction * prev[i];
                }
                -distance(self.state, h.goal)
            }
            Family::DirectionalPoint => {
                for i in 0..2 {
                    self.state[i] = prev[i] + a[i];
                }
                h.sign * (self.state[0] - prev[0])
            }
            Family::GoalPoint => {
                for i in 0..2 {
                    self.state[i] = prev[i] + a[i];
                }
                -distance(self.state, h.goal)
            }
        };
        self.steps += 1;
        self.done = if self.no_reset {
            distance(self.state, self.hidden.goal) < self.goal_radius
        } else {
            self.steps >= self.horizon
        };
        Ok(StepOutcome { observation: self.observation(), reward, done: self.done })
    }
}

/// What the inner loop needs from a task.
pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn reward_observing(&self) -> bool;
    fn reset(&mut self, rng: &mut Rng) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;
}

impl Environment for MdpInstance {
    fn obs_dim(&self) -> usize {
        MdpInstance::obs_dim(self)
    }

    fn act_dim(&self) -> usize {
        ACTION_DIM
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reward_observing(&self) -> bool {
        self.reward_observing
    }

    fn reset(&mut self, rng: &mut Rng) -> Vec<f64> {
        MdpInstance::reset(self, rng)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        MdpInstance::step(self, action)
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}

/// `Σ γ^t r_t`.
pub fn episodic_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

/// Convenience for tests and scripted rollouts: resets and runs `policy`
/// for one episode (at most `max_steps`), returning the rewards.
pub fn rollout<F>(mdp: &mut MdpInstance, rng: &mut Rng, max_steps: usize, mut policy: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut Rng) -> Vec<f64>,
{
    let mut obs = mdp.reset(rng);
    let mut rewards = vec![];
    for _ in 0..max_steps {
        let a = policy(&obs, rng);
        let out = mdp.step(&a)?;
        rewards.push(out.reward);
        obs = out.observation;
        if out.done {
            break;
        }
    }
    Ok(rewards)
}
