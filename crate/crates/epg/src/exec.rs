use epg_core::outerloop::{Executor, WorkerOutcome};
use rayon::prelude::*;

/// Runs worker jobs on a rayon pool; results keep job order.
pub struct Parallel {
    pool: rayon::ThreadPool,
}

impl Parallel {
    /// `threads = 0` lets rayon pick one thread per core.
    pub fn new(threads: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        Self { pool }
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Maps `f` over `0..count` in parallel, preserving order.
    pub fn run<T: Send>(&self, count: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        self.pool.install(|| (0..count).into_par_iter().map(f).collect())
    }
}

impl Executor for Parallel {
    fn map(&self, count: usize, job: &(dyn Fn(usize) -> WorkerOutcome + Sync)) -> Vec<WorkerOutcome> {
        self.run(count, job)
    }
}
