//! Degradable communication link: a fixed transport delay followed by a
//! zero-order-hold resampler. One [`Channel`] per signal stream.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("delay must be finite and >= 0, got {0}")]
    Delay(f64),
    #[error("sample rate must be finite and > 0, got {0}")]
    SampleRate(f64),
    #[error("base tick must be finite and > 0, got {0}")]
    BaseTick(f64),
}

/// Link condition of one stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Transport delay (s); rounded to whole base ticks.
    pub delay: f64,
    /// Rate at which the receiver sees fresh samples (Hz).
    pub sample_rate: f64,
}

impl ChannelConfig {
    pub const fn new(delay: f64, sample_rate: f64) -> Self {
        ChannelConfig { delay, sample_rate }
    }

    /// Undelayed link that delivers a sample every tick.
    pub fn identity(base_tick: f64) -> Self {
        ChannelConfig {
            delay: 0.0,
            sample_rate: 1.0 / base_tick,
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.delay.is_finite() && self.delay >= 0.0) {
            return Err(ChannelError::Delay(self.delay));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(ChannelError::SampleRate(self.sample_rate));
        }
        Ok(())
    }

    pub fn delay_ticks(&self, base_tick: f64) -> usize {
        (self.delay / base_tick).round() as usize
    }
}

/// Link conditions of the three streams crossing the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSet {
    /// Feedback force, replica to master.
    pub f_fb: ChannelConfig,
    /// Virtual force, master to replica.
    pub f_v: ChannelConfig,
    /// Replica reference, master to replica.
    pub x_d: ChannelConfig,
}

impl ChannelSet {
    /// The same delay and rate on every stream.
    pub fn uniform(delay: f64, sample_rate: f64) -> Self {
        let c = ChannelConfig::new(delay, sample_rate);
        ChannelSet {
            f_fb: c,
            f_v: c,
            x_d: c,
        }
    }
}

/// Delay line plus hold latch for one stream of payloads.
#[derive(Debug, Clone)]
pub struct Channel<T> {
    cfg: ChannelConfig,
    base_tick: f64,
    ring: VecDeque<T>,
    held: T,
    next_sample_time: Option<f64>,
}

impl<T: Clone> Channel<T> {
    /// `neutral` fills the delay line and the hold latch until real samples
    /// arrive.
    pub fn new(cfg: ChannelConfig, base_tick: f64, neutral: T) -> Result<Self, ChannelError> {
        cfg.validate()?;
        if !(base_tick.is_finite() && base_tick > 0.0) {
            return Err(ChannelError::BaseTick(base_tick));
        }
        let pending = cfg.delay_ticks(base_tick);
        let mut ring = VecDeque::with_capacity(pending + 1);
        ring.extend(std::iter::repeat_n(neutral.clone(), pending));
        Ok(Channel {
            cfg,
            base_tick,
            ring,
            held: neutral,
            next_sample_time: None,
        })
    }

    pub fn config(&self) -> ChannelConfig {
        self.cfg
    }

    /// Last value delivered to the receiver.
    pub fn held(&self) -> &T {
        &self.held
    }

    /// Capacity of the delay line (`delay_ticks + 1`, counting the sample
    /// entering on the current tick).
    pub fn ring_len(&self) -> usize {
        self.ring.len() + 1
    }

    /// Feeds the sample produced at `now` and returns what the receiver sees.
    ///
    /// The input leaves the delay line `delay` seconds later; the hold latch
    /// refreshes on a fixed `1 / sample_rate` schedule anchored at the first
    /// call. `now` must not decrease between calls.
    pub fn step(&mut self, input: T, now: f64) -> T {
        self.ring.push_back(input);
        let delayed = self.ring.pop_front().expect("ring holds at least one slot");
        let period = 1.0 / self.cfg.sample_rate;
        let half_tick = 0.5 * self.base_tick;
        match self.next_sample_time {
            None => {
                self.held = delayed;
                self.next_sample_time = Some(now + period);
            }
            Some(next) if now >= next - half_tick => {
                self.held = delayed;
                // Keep the schedule on its grid unless we fell more than a period behind.
                let mut following = next + period;
                if following <= now - half_tick {
                    following = now + period;
                }
                self.next_sample_time = Some(following);
            }
            Some(_) => {}
        }
        self.held.clone()
    }

    /// Changes the link condition mid-stream. A longer delay repeats the
    /// oldest queued sample; a shorter one drops the oldest samples.
    pub fn reconfigure(&mut self, cfg: ChannelConfig) -> Result<(), ChannelError> {
        cfg.validate()?;
        let len = cfg.delay_ticks(self.base_tick);
        while self.ring.len() > len {
            self.ring.pop_front();
        }
        while self.ring.len() < len {
            let oldest = self
                .ring
                .front()
                .cloned()
                .unwrap_or_else(|| self.held.clone());
            self.ring.push_front(oldest);
        }
        if (cfg.sample_rate - self.cfg.sample_rate).abs() > 0.0 {
            self.next_sample_time = None;
        }
        self.cfg = cfg;
        Ok(())
    }
}
