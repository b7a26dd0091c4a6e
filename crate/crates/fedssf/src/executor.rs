use std::sync::Mutex;

use fedssf_core::fed::{ClientExecutor, ClientJob, LocalReport, Sequential};
use fedssf_core::fed::ClientState;
use fedssf_core::Result;

/// Runs client updates on up to `threads` scoped worker threads. Results
/// come back in job order, and each job owns its RNG stream, so output is
/// identical to [`Sequential`].
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    pub threads: usize,
}

impl ClientExecutor for Threaded {
    fn run(&self, jobs: Vec<ClientJob>) -> Result<Vec<(ClientState, LocalReport)>> {
        if self.threads <= 1 || jobs.len() <= 1 {
            return Sequential.run(jobs);
        }
        let n = jobs.len();
        let queue = Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
        let slots: Mutex<Vec<Option<Result<(ClientState, LocalReport)>>>> = Mutex::new((0..n).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..self.threads.min(n) {
                s.spawn(|| loop {
                    let next = queue.lock().expect("queue lock").pop();
                    let Some((i, job)) = next else { break };
                    let out = job.execute();
                    slots.lock().expect("slot lock")[i] = Some(out);
                });
            }
        });
        slots
            .into_inner()
            .expect("slot lock")
            .into_iter()
            .map(|r| r.expect("every job ran"))
            .collect()
    }
}
