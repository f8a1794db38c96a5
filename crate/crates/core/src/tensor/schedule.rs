use serde::{Deserialize, Serialize};

/// Learning-rate schedule.
///
/// The cyclic mode warms up linearly from `warmup_start` to `peak` over
/// `warmup_iters`, then cosine-anneals back toward `warmup_start` for the rest
/// of a `cycle_len`-iteration cycle, and restarts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    CyclicCosine { warmup_iters: usize, warmup_start: f64, peak: f64, cycle_len: usize },
}

impl Default for LrSchedule {
    /// 25 warm-up iterations from 1e-5 to 1e-3, 75 cosine iterations, repeating.
    fn default() -> Self {
        LrSchedule::CyclicCosine { warmup_iters: 25, warmup_start: 1e-5, peak: 1e-3, cycle_len: 100 }
    }
}

impl LrSchedule {
    pub fn cyclic(warmup_start: f64, peak: f64) -> Self {
        LrSchedule::CyclicCosine { warmup_iters: 25, warmup_start, peak, cycle_len: 100 }
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::CyclicCosine { warmup_iters, warmup_start, peak, cycle_len } => {
                let it = iter % cycle_len.max(1);
                if it < warmup_iters {
                    warmup_start + (peak - warmup_start) * it as f64 / warmup_iters as f64
                } else {
                    let span = (cycle_len - warmup_iters).max(1) as f64;
                    let t = (it - warmup_iters) as f64 / span;
                    warmup_start + (peak - warmup_start) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
        }
    }
}
