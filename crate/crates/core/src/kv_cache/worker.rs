//! Background thread that runs deferred cache flushes in submission order.

use std::sync::mpsc::{self, Sender};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub(crate) type Job = Box<dyn FnOnce() + Send + 'static>;

/// Handle to a flush thread. Clones share the thread; it exits once every
/// handle is dropped and the queue is empty.
#[derive(Clone)]
pub struct FlushWorker {
    tx: Sender<Job>,
}

impl std::fmt::Debug for FlushWorker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlushWorker").finish_non_exhaustive()
    }
}

impl FlushWorker {
    pub fn spawn() -> Self {
        Self::spawn_inner(None)
    }

    /// Like [`FlushWorker::spawn`], but sleeps a random duration up to `max`
    /// before each job. Used to shake out publication races in tests.
    pub fn spawn_with_jitter(max: Duration, seed: u64) -> Self {
        Self::spawn_inner(Some((max, seed)))
    }

    fn spawn_inner(jitter: Option<(Duration, u64)>) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        thread::Builder::new()
            .name("pqkv-flush".into())
            .spawn(move || {
                let mut rng = jitter.map(|(max, seed)| (max, ChaCha8Rng::seed_from_u64(seed)));
                for job in rx {
                    if let Some((max, rng)) = rng.as_mut() {
                        let us = rng.random_range(0..=max.as_micros() as u64);
                        match us % 3 {
                            0 => thread::yield_now(),
                            _ => thread::sleep(Duration::from_micros(us)),
                        }
                    }
                    job();
                }
            })
            .expect("spawn flush thread");
        Self { tx }
    }

    pub(crate) fn submit(&self, job: Job) -> Result<()> {
        self.tx.send(job).map_err(|_| Error::WorkerGone)
    }
}

/// How a cache quantizes tokens leaving the recent buffer.
#[derive(Debug, Clone)]
pub enum FlushMode {
    /// Encode inline on the appending thread.
    Synchronous,
    /// Hand batches to a background worker; appends never wait on encoding.
    Async(FlushWorker),
}

impl FlushMode {
    pub fn spawn_async() -> Self {
        FlushMode::Async(FlushWorker::spawn())
    }

    pub fn is_async(&self) -> bool {
        matches!(self, FlushMode::Async(_))
    }
}
