//! Rayon-backed job pool. Core algorithms write results into fixed
//! slots and reduce in slot order, so output never depends on the
//! worker count.

use rayon::prelude::*;
use rmapf_core::pool::{Job, JobPool, SerialPool};

pub struct RayonPool {
    pool: rayon::ThreadPool,
}

impl RayonPool {
    pub fn new(jobs: usize) -> RayonPool {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .expect("thread pool construction failed");
        RayonPool { pool }
    }
}

impl JobPool for RayonPool {
    fn execute(&self, jobs: &mut [Job<'_>]) {
        self.pool.install(|| {
            jobs.par_iter_mut().for_each(|job| job());
        });
    }
}

/// Picks a pool for the requested worker count (default: all cores).
pub fn make_pool(jobs: Option<usize>) -> Box<dyn JobPool> {
    let jobs = jobs.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });
    if jobs <= 1 {
        Box::new(SerialPool)
    } else {
        Box::new(RayonPool::new(jobs))
    }
}
