//! Pluggable job execution.
//!
//! Episodes, evaluation cells, certificates, and minibatch gradient
//! shards are all independent jobs. The trait below lets the caller
//! decide how jobs run (serially here, on a thread pool in the `rmapf`
//! binary) while the algorithms stay deterministic: each job writes to
//! its own slot and results are always consumed in slot order.

use alloc::boxed::Box;
use alloc::vec::Vec;

/// One unit of work. Jobs are independent and may run in any order.
pub type Job<'a> = Box<dyn FnMut() + Send + 'a>;

/// Executes a batch of jobs to completion.
pub trait JobPool: Sync {
    fn execute(&self, jobs: &mut [Job<'_>]);
}

/// Runs jobs in slot order on the calling thread.
pub struct SerialPool;

impl JobPool for SerialPool {
    fn execute(&self, jobs: &mut [Job<'_>]) {
        for job in jobs.iter_mut() {
            job();
        }
    }
}

/// Maps `f` over `0..n` on the pool and returns outputs in index order.
pub fn run_jobs<T, F>(pool: &dyn JobPool, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    {
        let f = &f;
        let mut jobs: Vec<Job<'_>> = slots
            .iter_mut()
            .enumerate()
            .map(|(i, slot)| -> Job<'_> {
                Box::new(move || {
                    *slot = Some(f(i));
                })
            })
            .collect();
        pool.execute(&mut jobs);
    }
    slots
        .into_iter()
        .map(|s| s.expect("pool did not run every job"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_jobs_preserves_index_order() {
        let out = run_jobs(&SerialPool, 10, |i| i * i);
        assert_eq!(out, alloc::vec![0, 1, 4, 9, 16, 25, 36, 49, 64, 81]);
    }
}
