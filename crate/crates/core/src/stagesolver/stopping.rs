//! Stopping rule for iterations whose progress is judged on rounded iterates.
//!
//! Iteration stops when two consecutive iterates coincide, or when no
//! component improved at either of the two latest iterates. A component
//! improves at iterate `k` when its difference `|zₖ − zₖ₋₁|` is nonzero and
//! strictly below every earlier nonzero difference for that component; the
//! first difference has nothing to improve on and never counts as stalled.

use super::summation::fl32;

fn improving_at<Z: AsRef<[f64]>>(history: &[Z], k: usize) -> bool {
    let latest = history[k].as_ref();
    let prev = history[k - 1].as_ref();
    (0..latest.len()).any(|j| {
        let last = (latest[j] - prev[j]).abs();
        let best = (1..k)
            .map(|i| (history[i].as_ref()[j] - history[i - 1].as_ref()[j]).abs())
            .filter(|&d| d != 0.0)
            .fold(f64::INFINITY, f64::min);
        last != 0.0 && last < best
    })
}

/// Decides from the full history whether to keep iterating.
pub fn continue_iterating<Z: AsRef<[f64]>>(history: &[Z]) -> bool {
    let k = match history.len() {
        0 | 1 => return true,
        n => n - 1,
    };
    if history[k].as_ref() == history[k - 1].as_ref() {
        return false;
    }
    if k < 3 {
        return true;
    }
    improving_at(history, k) || improving_at(history, k - 1)
}

/// Incremental form of [`continue_iterating`].
///
/// Iterates are compared after `fl32` projection by default, or as given in
/// full precision. Keeps only the previous projected iterate and the running
/// minimum of nonzero differences per component.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    prev: Vec<f64>,
    min_diff: Vec<f64>,
    seen: usize,
    stalled: bool,
    single: bool,
}

impl ConvergenceMonitor {
    pub fn new(dim: usize) -> Self {
        Self { prev: vec![0.0; dim], min_diff: vec![f64::INFINITY; dim], seen: 0, stalled: false, single: true }
    }

    /// Monitor on unprojected double iterates.
    pub fn full_precision(dim: usize) -> Self {
        Self { single: false, ..Self::new(dim) }
    }

    pub fn reset(&mut self) {
        self.min_diff.fill(f64::INFINITY);
        self.seen = 0;
        self.stalled = false;
    }

    /// Number of iterates observed since the last reset.
    pub fn observed(&self) -> usize {
        self.seen
    }

    /// Records the next raw iterate; returns `true` to continue iterating.
    pub fn observe(&mut self, iterate: &[f64]) -> bool {
        debug_assert_eq!(iterate.len(), self.prev.len());
        self.seen += 1;
        let single = self.single;
        let project = |x: f64| if single { fl32(x) } else { x };
        if self.seen == 1 {
            for (p, &x) in self.prev.iter_mut().zip(iterate) {
                *p = project(x);
            }
            return true;
        }
        let mut identical = true;
        let mut improving = false;
        for ((p, m), &x) in self.prev.iter_mut().zip(self.min_diff.iter_mut()).zip(iterate) {
            let z = project(x);
            if z != *p {
                identical = false;
            }
            let d = (z - *p).abs();
            if d != 0.0 && d < *m {
                improving = true;
            }
            if d != 0.0 {
                *m = m.min(d);
            }
            *p = z;
        }
        if identical {
            return false;
        }
        // The first difference (seen == 2) always counts as progress.
        let stalled = self.seen > 2 && !improving;
        let stop = stalled && self.stalled;
        self.stalled = stalled;
        !stop
    }
}
