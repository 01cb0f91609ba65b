//! Global single/double precision switch.
//!
//! Values are always stored as `f64`. In single mode every differentiable
//! operation rounds its results through `f32`, and the Sinkhorn solver runs
//! its iteration natively in `f32`. The mode is thread-local so concurrent
//! tests cannot interfere with each other.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    /// Smallest usable entropic weight for Sinkhorn on a max-normalised cost.
    pub fn sinkhorn_floor(self) -> f64 {
        match self {
            Precision::Single => 1.3e-2,
            Precision::Double => 2e-3,
        }
    }

    /// Default marginal tolerance for Sinkhorn.
    pub fn sinkhorn_tol(self) -> f64 {
        match self {
            Precision::Single => 1e-6,
            Precision::Double => 1e-9,
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

impl FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "fp32" | "f32" => Ok(Precision::Single),
            "double" | "fp64" | "f64" => Ok(Precision::Double),
            other => Err(crate::Error::invalid(format!(
                "unknown precision mode {other:?}"
            ))),
        }
    }
}

thread_local! {
    static CURRENT: Cell<Precision> = const { Cell::new(Precision::Double) };
}

pub fn current() -> Precision {
    CURRENT.with(|c| c.get())
}

pub fn set(p: Precision) {
    CURRENT.with(|c| c.set(p));
}

/// Runs `f` with the given precision, restoring the previous mode afterwards.
pub fn with<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    let prev = current();
    set(p);
    let out = f();
    set(prev);
    out
}

/// Rounds a buffer in place to the current precision.
pub(crate) fn round_slice(data: &mut [f64]) {
    if current() == Precision::Single {
        for x in data {
            *x = *x as f32 as f64;
        }
    }
}
