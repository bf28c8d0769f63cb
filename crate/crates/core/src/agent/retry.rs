//! Exponential backoff with full jitter around a [`ModelClient`].

use std::time::Duration;

use rand::{Rng, RngCore};

use super::model::{ErrorKind, ModelClient, ModelError, ModelRequest, ModelResponse};

/// Retries allowed after the first attempt.
pub const MAX_RETRY: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retry: u32,
    pub base: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retry: MAX_RETRY,
            base: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the jittered sleep before retry number `retry` (1-based).
    pub fn backoff_ceiling(&self, retry: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(retry as i32 - 1))
    }
}

/// Sleeps between attempts. Injected so tests can count sleeps without waiting.
pub trait Sleeper: Send {
    fn sleep(&mut self, duration: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&mut self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Records requested sleeps and returns immediately.
#[derive(Debug, Default, Clone)]
pub struct RecordingSleeper {
    pub sleeps: Vec<Duration>,
}

impl Sleeper for RecordingSleeper {
    fn sleep(&mut self, duration: Duration) {
        self.sleeps.push(duration);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RetryError {
    #[error("model call failed after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: ModelError },
    #[error("permanent model failure: {0}")]
    Permanent(ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryOutcome {
    pub response: ModelResponse,
    pub attempts: u32,
    pub backoffs: Vec<Duration>,
}

pub fn call_model_with_retry(
    model: &mut dyn ModelClient,
    request: &ModelRequest,
    policy: &RetryPolicy,
    sleeper: &mut dyn Sleeper,
    rng: &mut dyn RngCore,
) -> Result<RetryOutcome, RetryError> {
    let mut backoffs = Vec::new();
    let mut attempts = 0;
    loop {
        attempts += 1;
        match model.complete(request) {
            Ok(response) => {
                return Ok(RetryOutcome {
                    response,
                    attempts,
                    backoffs,
                })
            }
            Err(e) if e.kind == ErrorKind::Permanent => return Err(RetryError::Permanent(e)),
            Err(e) => {
                let retry = attempts;
                if retry > policy.max_retry {
                    return Err(RetryError::ExhaustedRetries { attempts, last: e });
                }
                let ceiling = policy.backoff_ceiling(retry);
                let delay = ceiling.mul_f64(rng.random::<f64>());
                sleeper.sleep(delay);
                backoffs.push(delay);
            }
        }
    }
}
