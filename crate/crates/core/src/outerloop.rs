//! Evolution strategies over loss parameters: perturb, run complete inner
//! loops, rank the aggregated fitnesses and take a momentum-free Adam step.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{MdpInstance, TaskDistribution};
use crate::error::{Error, Result};
use crate::innerloop::{run_inner_loop, InnerConfig, InnerLoopReport};
use crate::nets::{FeatureLayout, HeadInit, LossArch, LossParams, PolicyArch, PolicyParams};
use crate::optim::{AdamState, LinearSchedule};
use crate::rng;

/// Worker-to-noise assignment `⌈wV/W⌉` (both sides 1-based).
pub fn assign_noise(w: usize, workers: usize, vectors: usize) -> Result<usize> {
    if vectors == 0 || !workers.is_multiple_of(vectors) {
        return Err(Error::Config(format!("noise vectors (V={vectors}) must divide workers (W={workers})")));
    }
    if w == 0 || w > workers {
        return Err(Error::OutOfRange { what: "worker index", value: w as f64 });
    }
    Ok((w * vectors).div_ceil(workers))
}

/// Centered ranks `r / (V - 1) - 0.5`; ties rank by index. A single entry maps to 0.
pub fn rank_transform(fitness: &[f64]) -> Vec<f64> {
    let v = fitness.len();
    if v < 2 {
        return vec![0.0; v];
    }
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; v];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank as f64 / (v - 1) as f64 - 0.5;
    }
    out
}

/// `V` standard-normal perturbation directions for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTable {
    vectors: Vec<Vec<f64>>,
}

impl NoiseTable {
    /// Rebuilds the table for `epoch` from the master seed. With `mirrored`,
    /// odd-indexed vectors negate their even-indexed neighbour.
    pub fn generate(seed: u64, epoch: u64, count: usize, dim: usize, mirrored: bool) -> Self {
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(count);
        for v in 0..count {
            if mirrored && v % 2 == 1 {
                let neg = vectors[v - 1].iter().map(|x| -x).collect();
                vectors.push(neg);
                continue;
            }
            let mut r = rng::stream(seed, &[rng::label::NOISE, epoch, v as u64]);
            vectors.push((0..dim).map(|_| rng::normal(&mut r)).collect());
        }
        Self { vectors }
    }

    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Self {
        Self { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Vector `v`, 0-based.
    pub fn get(&self, v: usize) -> &[f64] {
        &self.vectors[v]
    }

    /// `base + σ ε_v`.
    pub fn perturb(&self, base: &[f64], v: usize, sigma: f64) -> Vec<f64> {
        base.iter().zip(&self.vectors[v]).map(|(b, e)| b + sigma * e).collect()
    }
}

/// Per-worker returns and their per-noise-vector averages.
#[derive(Clone, Debug, PartialEq)]
pub struct FitnessTable {
    pub returns: Vec<f64>,
    pub per_vector: Vec<f64>,
}

impl FitnessTable {
    /// Averages each contiguous block of `W / V` workers, the block that
    /// `assign_noise` maps to vector `v`.
    pub fn aggregate(returns: Vec<f64>, vectors: usize) -> Result<Self> {
        let workers = returns.len();
        if vectors == 0 || !workers.is_multiple_of(vectors) {
            return Err(Error::Config(format!("noise vectors (V={vectors}) must divide workers (W={workers})")));
        }
        let per = workers / vectors;
        let per_vector = returns.chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect();
        Ok(Self { returns, per_vector })
    }
}

/// `g = (1/(Vσ)) Σ shaped_v ε_v`, decayed by `λ φ` on the first
/// `l2_len` coordinates.
pub fn es_gradient(
    params: &[f64],
    noise: &NoiseTable,
    shaped: &[f64],
    sigma: f64,
    l2: f64,
    l2_len: usize,
) -> Result<Vec<f64>> {
    if shaped.len() != noise.len() {
        return Err(Error::Dimension { what: "shaped fitness", expected: noise.len(), found: shaped.len() });
    }
    if noise.dim() != params.len() {
        return Err(Error::Dimension { what: "noise dimension", expected: params.len(), found: noise.dim() });
    }
    let scale = 1.0 / (noise.len() as f64 * sigma);
    let mut g = vec![0.0; params.len()];
    for (v, &f) in shaped.iter().enumerate() {
        for (gi, e) in g.iter_mut().zip(noise.get(v)) {
            *gi += f * e;
        }
    }
    for (i, gi) in g.iter_mut().enumerate() {
        *gi *= scale;
        if i < l2_len {
            *gi -= l2 * params[i];
        }
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { context: "ES gradient" });
    }
    Ok(g)
}

/// One ES ascent step through the outer Adam state.
#[allow(clippy::too_many_arguments)]
pub fn es_update(
    params: &mut [f64],
    noise: &NoiseTable,
    shaped: &[f64],
    sigma: f64,
    lr: f64,
    adam: &mut AdamState,
    l2: f64,
    l2_len: usize,
) -> Result<()> {
    let g = es_gradient(params, noise, shaped, sigma, l2, l2_len)?;
    adam.ascend(params, &g, lr)
}

/// Replaces failed workers' returns with the epoch minimum of the rest;
/// returns the filled vector and the number of failures.
pub fn fill_failures(raw: &[Option<f64>]) -> Result<(Vec<f64>, usize)> {
    let floor = raw.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return Err(Error::NonFinite { context: "epoch fitness" });
    }
    let failures = raw.iter().filter(|r| r.is_none()).count();
    Ok((raw.iter().map(|r| r.unwrap_or(floor)).collect(), failures))
}

/// FIFO store of flattened trained policies used as inner-loop starting points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyPool {
    pub capacity: usize,
    pub entries: VecDeque<Vec<f64>>,
}

impl PolicyPool {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, policy: Vec<f64>) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(policy);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub enabled: bool,
    pub capacity: usize,
    /// Chance that a worker starts from a pooled policy.
    pub prob: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { enabled: false, capacity: 64, prob: 0.5 }
    }
}

/// Every scalar of an evolution run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpgConfig {
    /// Inner-loop workers per epoch `W`.
    pub workers: usize,
    /// Noise vectors per epoch `V`.
    pub noise_vectors: usize,
    pub epochs: u64,
    pub inner: InnerConfig,
    /// Perturbation scale `σ`.
    pub sigma: f64,
    pub alpha: LinearSchedule,
    pub lr_out: LinearSchedule,
    pub l2: f64,
    pub policy_hidden: Vec<usize>,
    /// Evolve the policy initialization alongside the loss.
    #[serde(default)]
    pub evolve_init: bool,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub mirrored_sampling: bool,
    #[serde(default = "neutral")]
    pub head_init: HeadInit,
}

fn neutral() -> HeadInit {
    HeadInit::Neutral
}

/// Paper-length schedule endpoints, rescaled to the run length.
const PAPER_EPOCHS: u64 = 5000;
const PAPER_ALPHA_END: u64 = 500;
const PAPER_LR_END: u64 = 2000;

impl EpgConfig {
    /// Full-scale settings: 256 workers, 64 vectors, 5000 epochs.
    pub fn paper() -> Self {
        Self::with_scaled_schedules(256, 64, PAPER_EPOCHS, InnerConfig::new(8192, 64, 512))
    }

    /// Single-desktop settings used by the acceptance runs.
    pub fn desk() -> Self {
        Self::with_scaled_schedules(32, 8, 300, InnerConfig::new(4096, 64, 512))
    }

    /// Builds a config whose α and step-size schedules end at the same
    /// fraction of the run as the paper-length ones.
    pub fn with_scaled_schedules(workers: usize, noise_vectors: usize, epochs: u64, inner: InnerConfig) -> Self {
        Self {
            workers,
            noise_vectors,
            epochs,
            inner,
            sigma: 0.01,
            alpha: LinearSchedule::new(1.0, 0.0, scaled_epoch(PAPER_ALPHA_END, epochs)),
            lr_out: LinearSchedule::new(1e-2, 1e-3, scaled_epoch(PAPER_LR_END, epochs)),
            l2: 1e-3,
            policy_hidden: vec![64, 64],
            evolve_init: false,
            pool: PoolConfig::default(),
            mirrored_sampling: false,
            head_init: HeadInit::Neutral,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.workers == 0 || self.noise_vectors == 0 || !self.workers.is_multiple_of(self.noise_vectors) {
            return fail(format!("noise_vectors (V={}) must divide workers (W={})", self.noise_vectors, self.workers));
        }
        if self.mirrored_sampling && !self.noise_vectors.is_multiple_of(2) {
            return fail("mirrored_sampling needs an even number of noise vectors".to_string());
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.l2 >= 0.0) {
            return fail(format!("l2 must be non-negative, got {}", self.l2));
        }
        for (name, s) in [("alpha", &self.alpha), ("lr_out", &self.lr_out)] {
            if !s.start.is_finite() || !s.end.is_finite() || s.end_epoch == 0 {
                return fail(format!("{name} schedule needs finite endpoints and end_epoch >= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha.start) || !(0.0..=1.0).contains(&self.alpha.end) {
            return fail("alpha schedule must stay within [0, 1]".to_string());
        }
        if !(self.lr_out.start > 0.0) || !(self.lr_out.end > 0.0) {
            return fail("lr_out schedule must be positive".to_string());
        }
        if self.policy_hidden.contains(&0) {
            return fail("policy_hidden widths must be positive".to_string());
        }
        if self.pool.enabled && (self.pool.capacity == 0 || !(0.0..=1.0).contains(&self.pool.prob)) {
            return fail("pool needs capacity >= 1 and prob in [0, 1]".to_string());
        }
        Ok(())
    }
}

/// `paper_epoch` rescaled from a 5000-epoch run to `epochs`, at least 1.
pub fn scaled_epoch(paper_epoch: u64, epochs: u64) -> u64 {
    (paper_epoch * epochs / PAPER_EPOCHS).max(1)
}

/// Layout of the loss inputs for a task distribution.
pub fn layout_for(dist: &TaskDistribution) -> FeatureLayout {
    FeatureLayout::new(dist.obs_dim(), crate::envs::ACTION_DIM, dist.reward_observing())
}

pub fn policy_arch_for(dist: &TaskDistribution, hidden: &[usize]) -> PolicyArch {
    PolicyArch::new(dist.obs_dim(), crate::envs::ACTION_DIM, hidden.to_vec())
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub mean_fitness: f64,
    pub std_fitness: f64,
    pub min_fitness: f64,
    pub max_fitness: f64,
    pub alpha: f64,
    pub lr_out: f64,
    pub failures: usize,
}

/// What one worker is asked to do.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkerJob {
    pub epoch: u64,
    /// 1-based worker index.
    pub worker: usize,
    /// 0-based noise vector.
    pub noise: usize,
}

/// What one worker reports back.
#[derive(Clone, Debug)]
pub struct WorkerOutcome {
    pub result: core::result::Result<InnerLoopReport, Error>,
}

/// Runs `count` independent jobs, returning results in index order.
pub trait Executor {
    fn map(&self, count: usize, job: &(dyn Fn(usize) -> WorkerOutcome + Sync)) -> Vec<WorkerOutcome>;
}

/// Runs jobs one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map(&self, count: usize, job: &(dyn Fn(usize) -> WorkerOutcome + Sync)) -> Vec<WorkerOutcome> {
        (0..count).map(job).collect()
    }
}

/// Everything needed to continue an evolution run from an epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorState {
    pub seed: u64,
    /// Next epoch to run.
    pub epoch: u64,
    /// `φ`, followed by `θ_init` when the initialization is evolved.
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub pool: PolicyPool,
}

/// Owns `φ` and the outer optimizer; dispatches workers epoch by epoch.
#[derive(Clone, Debug)]
pub struct Coordinator {
    cfg: EpgConfig,
    dist: TaskDistribution,
    arch: LossArch,
    policy_arch: PolicyArch,
    state: CoordinatorState,
}

impl Coordinator {
    pub fn new(cfg: EpgConfig, dist: TaskDistribution, seed: u64) -> Result<Self> {
        cfg.validate()?;
        dist.validate()?;
        let arch = LossArch::new(layout_for(&dist), cfg.inner.buffer_len);
        let policy_arch = policy_arch_for(&dist, &cfg.policy_hidden);
        let mut r = rng::stream(seed, &[rng::label::LOSS_INIT]);
        let mut params = LossParams::init(arch, cfg.head_init, &mut r)?.flatten();
        if cfg.evolve_init {
            let mut pr = rng::stream(seed, &[rng::label::POLICY_INIT]);
            params.extend(PolicyParams::init(&policy_arch, &mut pr).flatten());
        }
        let state = CoordinatorState {
            seed,
            epoch: 0,
            adam: AdamState::outer(params.len()),
            params,
            pool: PolicyPool::new(if cfg.pool.enabled { cfg.pool.capacity } else { 0 }),
        };
        Ok(Self { cfg, dist, arch, policy_arch, state })
    }

    /// Continues from a saved state, checking it fits the config.
    pub fn resume(cfg: EpgConfig, dist: TaskDistribution, state: CoordinatorState) -> Result<Self> {
        let mut c = Self::new(cfg, dist, state.seed)?;
        if state.params.len() != c.state.params.len() || state.adam.len() != c.state.params.len() {
            return Err(Error::Dimension {
                what: "coordinator parameters",
                expected: c.state.params.len(),
                found: state.params.len(),
            });
        }
        c.state = state;
        Ok(c)
    }

    pub fn config(&self) -> &EpgConfig {
        &self.cfg
    }

    pub fn distribution(&self) -> &TaskDistribution {
        &self.dist
    }

    pub fn state(&self) -> &CoordinatorState {
        &self.state
    }

    pub fn epoch(&self) -> u64 {
        self.state.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    pub fn loss_arch(&self) -> LossArch {
        self.arch
    }

    pub fn policy_arch(&self) -> &PolicyArch {
        &self.policy_arch
    }

    pub fn loss(&self) -> Result<LossParams> {
        LossParams::unflatten(self.arch, &self.state.params[..self.arch.param_count()])
    }

    /// The evolved initialization, when enabled.
    pub fn policy_init(&self) -> Result<Option<PolicyParams>> {
        if !self.cfg.evolve_init {
            return Ok(None);
        }
        PolicyParams::unflatten(&self.policy_arch, &self.state.params[self.arch.param_count()..]).map(Some)
    }

    fn worker_init(&self, job: WorkerJob, perturbed: &[f64]) -> Result<PolicyParams> {
        let seed = self.state.seed;
        let path = [job.epoch, job.worker as u64];
        if self.cfg.pool.enabled && !self.state.pool.is_empty() {
            let mut r = rng::stream(seed, &[rng::label::POOL, path[0], path[1]]);
            if r.random::<f64>() < self.cfg.pool.prob {
                let i = r.random_range(0..self.state.pool.len());
                return PolicyParams::unflatten(&self.policy_arch, &self.state.pool.entries[i]);
            }
        }
        if self.cfg.evolve_init {
            return PolicyParams::unflatten(&self.policy_arch, &perturbed[self.arch.param_count()..]);
        }
        let mut r = rng::stream(seed, &[rng::label::POLICY_INIT, path[0], path[1]]);
        Ok(PolicyParams::init(&self.policy_arch, &mut r))
    }

    /// Task of `job`, fresh for every worker and epoch.
    pub fn task_for(&self, job: WorkerJob) -> Result<MdpInstance> {
        let task_seed = rng::derive_seed(self.state.seed, &[rng::label::TASK, job.epoch, job.worker as u64]);
        self.dist.sample_task(task_seed)
    }

    /// One complete inner loop on a freshly sampled task with the loss at
    /// `φ + σ ε_v`.
    pub fn run_worker(&self, job: WorkerJob, noise: &NoiseTable) -> Result<InnerLoopReport> {
        let seed = self.state.seed;
        let perturbed = noise.perturb(&self.state.params, job.noise, self.cfg.sigma);
        let loss = LossParams::unflatten(self.arch, &perturbed[..self.arch.param_count()])?;
        let init = self.worker_init(job, &perturbed)?;
        let mut env = self.task_for(job)?;
        let inner_seed = rng::derive_seed(seed, &[rng::label::INNER, job.epoch, job.worker as u64]);
        let alpha = self.cfg.alpha.value(job.epoch);
        run_inner_loop(&loss, &mut env, init, &self.cfg.inner, alpha, inner_seed)
    }

    /// Noise table for the current epoch.
    pub fn noise_table(&self) -> NoiseTable {
        NoiseTable::generate(
            self.state.seed,
            self.state.epoch,
            self.cfg.noise_vectors,
            self.state.params.len(),
            self.cfg.mirrored_sampling,
        )
    }

    /// Runs one epoch and applies the ES update.
    pub fn step(&mut self, exec: &dyn Executor) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        let noise = self.noise_table();
        let (w_total, v_total) = (self.cfg.workers, self.cfg.noise_vectors);
        let this = &*self;
        let noise_ref = &noise;
        let outcomes = exec.map(w_total, &|i| {
            let worker = i + 1;
            let result = assign_noise(worker, w_total, v_total)
                .and_then(|v| this.run_worker(WorkerJob { epoch, worker, noise: v - 1 }, noise_ref));
            WorkerOutcome { result }
        });

        let mut trained = Vec::new();
        let mut raw = Vec::with_capacity(w_total);
        let mut first_error = None;
        for o in outcomes {
            match o.result {
                Ok(r) => {
                    raw.push(Some(r.final_return));
                    trained.push(r.policy.flatten());
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                    raw.push(None);
                }
            }
        }
        let (returns, failures) = fill_failures(&raw).map_err(|_| {
            let why = first_error.map(|e| e.to_string()).unwrap_or_default();
            Error::Config(format!("every worker failed in epoch {epoch}: {why}"))
        })?;
        let table = FitnessTable::aggregate(returns, v_total)?;
        let shaped = rank_transform(&table.per_vector);
        let lr = self.cfg.lr_out.value(epoch);
        let l2_len = self.arch.param_count();
        es_update(
            &mut self.state.params,
            &noise,
            &shaped,
            self.cfg.sigma,
            lr,
            &mut self.state.adam,
            self.cfg.l2,
            l2_len,
        )?;
        if self.cfg.pool.enabled {
            for p in trained {
                self.state.pool.push(p);
            }
        }
        self.state.epoch += 1;

        let n = table.returns.len() as f64;
        let mean = table.returns.iter().sum::<f64>() / n;
        let var = table.returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        Ok(EpochLog {
            epoch,
            mean_fitness: mean,
            std_fitness: libm::sqrt(var),
            min_fitness: table.returns.iter().copied().fold(f64::INFINITY, f64::min),
            max_fitness: table.returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            alpha: self.cfg.alpha.value(epoch),
            lr_out: lr,
            failures,
        })
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, exec: &dyn Executor) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while !self.is_finished() {
            logs.push(self.step(exec)?);
        }
        Ok(logs)
    }
}

/// Evolves a loss from scratch; returns it with the per-epoch log.
pub fn train_epg(
    cfg: EpgConfig,
    dist: TaskDistribution,
    seed: u64,
    exec: &dyn Executor,
) -> Result<(LossParams, Vec<EpochLog>)> {
    let cfg = EpgConfig { evolve_init: false, ..cfg };
    let mut c = Coordinator::new(cfg, dist, seed)?;
    let log = c.run(exec)?;
    Ok((c.loss()?, log))
}

/// Evolves the loss and the policy initialization together.
pub fn train_epg_plus_init(
    cfg: EpgConfig,
    dist: TaskDistribution,
    seed: u64,
    exec: &dyn Executor,
) -> Result<(LossParams, PolicyParams, Vec<EpochLog>)> {
    let cfg = EpgConfig { evolve_init: true, ..cfg };
    let mut c = Coordinator::new(cfg, dist, seed)?;
    let log = c.run(exec)?;
    let init = c.policy_init()?.expect("evolve_init set");
    Ok((c.loss()?, init, log))
}

/// Trains a fresh policy on one sampled task with a frozen loss. `alpha`
/// is 0 for pure evolved-loss training and 1 for the guidance baseline;
/// `init` overrides the random initialization.
pub fn test_time_train(
    loss: &LossParams,
    dist: &TaskDistribution,
    inner: &InnerConfig,
    policy_hidden: &[usize],
    init: Option<&PolicyParams>,
    alpha: f64,
    seed: u64,
) -> Result<InnerLoopReport> {
    let mut env = dist.sample_task(rng::derive_seed(seed, &[rng::label::TEST, rng::label::TASK]))?;
    let policy = match init {
        Some(p) => p.clone(),
        None => {
            let mut r = rng::stream(seed, &[rng::label::TEST, rng::label::POLICY_INIT]);
            PolicyParams::init(&policy_arch_for(dist, policy_hidden), &mut r)
        }
    };
    run_inner_loop(loss, &mut env, policy, inner, alpha, rng::derive_seed(seed, &[rng::label::TEST, rng::label::INNER]))
}
