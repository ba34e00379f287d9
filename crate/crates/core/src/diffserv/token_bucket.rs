use serde::{Deserialize, Serialize};

use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenBucketParams {
    pub rate_bps: f64,
    pub depth_bytes: f64,
}

impl Default for TokenBucketParams {
    fn default() -> Self {
        Self {
            rate_bps: 128_000.0,
            depth_bytes: 2000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    InProfile,
    OutOfProfile,
}

/// Byte-granular token bucket. Starts full.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    params: TokenBucketParams,
    tokens: f64,
    last_update: SimTime,
}

impl TokenBucket {
    pub fn new(params: TokenBucketParams) -> Self {
        Self {
            params,
            tokens: params.depth_bytes,
            last_update: SimTime::ZERO,
        }
    }

    pub fn with_tokens(params: TokenBucketParams, tokens: f64, last_update: SimTime) -> Self {
        Self {
            params,
            tokens: tokens.clamp(0.0, params.depth_bytes),
            last_update,
        }
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    pub fn params(&self) -> TokenBucketParams {
        self.params
    }

    /// Refills for the elapsed time, then consumes `size_bytes` if available.
    /// A `t` earlier than the last update is treated as no elapsed time.
    pub fn meter(&mut self, size_bytes: u32, t: SimTime) -> Profile {
        let dt = t.saturating_sub(self.last_update).as_secs_f64();
        self.tokens = (self.tokens + self.params.rate_bps * dt / 8.0).min(self.params.depth_bytes);
        if t > self.last_update {
            self.last_update = t;
        }
        let size = f64::from(size_bytes);
        if self.tokens >= size {
            self.tokens -= size;
            Profile::InProfile
        } else {
            Profile::OutOfProfile
        }
    }
}
