//! Log of the discrete choices (argmax, nearest neighbors, activation sides,
//! top-k selections) taken by a forward pass.
//!
//! A pass can either record its choices or replay a previously recorded
//! log, which evaluates the same smooth branch at perturbed parameters.
//! The finite-difference gradient check uses replay when a perturbation
//! would otherwise cross a kink.

use alloc::vec::Vec;

#[derive(Debug, Clone, Default)]
pub(crate) struct Branches {
    log: Vec<u32>,
    cursor: usize,
    replaying: bool,
}

impl Branches {
    pub fn record() -> Self {
        Self::default()
    }

    pub fn replay(log: Vec<u32>) -> Self {
        Self {
            log,
            cursor: 0,
            replaying: true,
        }
    }

    #[inline]
    pub fn pick(&mut self, choose: impl FnOnce() -> u32) -> u32 {
        if self.replaying {
            let v = self.log[self.cursor];
            self.cursor += 1;
            v
        } else {
            let v = choose();
            self.log.push(v);
            v
        }
    }

    #[inline]
    pub fn pick_bool(&mut self, choose: impl FnOnce() -> bool) -> bool {
        self.pick(|| choose() as u32) != 0
    }

    pub fn log(&self) -> &[u32] {
        &self.log
    }

    pub fn into_log(self) -> Vec<u32> {
        self.log
    }
}

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

/// Leaky-ReLU whose active side is routed through the branch log.
#[inline]
pub(crate) fn leaky(x: f64, branches: &mut Branches) -> (f64, f64) {
    let slope = if branches.pick_bool(|| x > 0.0) {
        1.0
    } else {
        LEAKY_SLOPE
    };
    (slope * x, slope)
}
