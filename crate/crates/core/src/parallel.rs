//! Partition-parallel execution.
//!
//! Every per-partition stage goes through [`map_partitions`], which runs on
//! the rayon pool when the `parallel` feature is enabled and the schedule
//! asks for it, and falls back to a plain loop otherwise. Each closure only
//! touches the data of its own partition, and results come back in index
//! order, so both schedules produce bit-identical output.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Sequential,
    #[default]
    Parallel,
}

impl Schedule {
    /// Whether this schedule will actually use worker threads in this build.
    pub fn is_threaded(self) -> bool {
        cfg!(feature = "parallel") && self == Schedule::Parallel
    }
}

/// Applies `f` to `0..count`, returning results in index order.
pub fn map_partitions<T, F>(schedule: Schedule, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if schedule == Schedule::Parallel {
        use rayon::prelude::*;
        return (0..count).into_par_iter().map(f).collect();
    }
    let _ = schedule;
    (0..count).map(f).collect()
}

/// Like [`map_partitions`] but short-circuits on the first error in index order.
pub fn try_map_partitions<T, E, F>(schedule: Schedule, count: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_partitions(schedule, count, f).into_iter().collect()
}
