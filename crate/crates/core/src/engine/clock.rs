use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Milliseconds since the start of a run.
pub trait Clock: Send {
    fn now_ms(&mut self) -> u64;
}

/// Deterministic clock: the n-th reading returns `n * step_ms`.
#[derive(Debug, Clone)]
pub struct StepClock {
    step_ms: u64,
    reads: u64,
}

impl StepClock {
    pub fn new(step_ms: u64) -> Self {
        Self { step_ms, reads: 0 }
    }
}

impl Clock for StepClock {
    fn now_ms(&mut self) -> u64 {
        let t = self.reads * self.step_ms;
        self.reads += 1;
        t
    }
}

#[derive(Debug, Clone)]
pub struct RealClock {
    start: Instant,
}

impl RealClock {
    pub fn start() -> Self {
        Self {
            start: Instant::now(),
        }
    }
}

impl Clock for RealClock {
    fn now_ms(&mut self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }
}

/// `real` or `step:<ms>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClockSpec {
    #[default]
    Real,
    Step(u64),
}

impl ClockSpec {
    pub fn start(&self) -> Box<dyn Clock> {
        match self {
            Self::Real => Box::new(RealClock::start()),
            Self::Step(ms) => Box::new(StepClock::new(*ms)),
        }
    }
}

impl fmt::Display for ClockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Real => f.write_str("real"),
            Self::Step(ms) => write!(f, "step:{ms}"),
        }
    }
}

impl FromStr for ClockSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "real" => Ok(Self::Real),
            other => other
                .strip_prefix("step:")
                .and_then(|ms| ms.parse().ok())
                .map(Self::Step)
                .ok_or_else(|| format!("invalid clock {other:?}, expected real or step:<ms>")),
        }
    }
}

impl Serialize for ClockSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ClockSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
