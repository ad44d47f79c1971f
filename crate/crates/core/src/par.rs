//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in index order, so callers that reduce the
//! output sequentially get bit-identical sums whichever mode ran the work.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Mode {
    pub fn default_mode() -> Self {
        #[cfg(feature = "parallel")]
        {
            Mode::Rayon
        }
        #[cfg(not(feature = "parallel"))]
        {
            Mode::Sequential
        }
    }
}

static OVERRIDE: AtomicU8 = AtomicU8::new(0);

/// Forces every helper in this module to use `mode` until reset with `None`.
pub fn set_global_mode(mode: Option<Mode>) {
    let v = match mode {
        None => 0,
        Some(Mode::Sequential) => 1,
        #[cfg(feature = "parallel")]
        Some(Mode::Rayon) => 2,
    };
    OVERRIDE.store(v, Ordering::SeqCst);
}

pub fn current_mode() -> Mode {
    match OVERRIDE.load(Ordering::SeqCst) {
        1 => Mode::Sequential,
        #[cfg(feature = "parallel")]
        2 => Mode::Rayon,
        _ => Mode::default_mode(),
    }
}

/// `(0..n).map(f)` evaluated under the current mode.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_range_with(current_mode(), n, f)
}

pub fn map_range_with<T, F>(mode: Mode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        Mode::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Mode::Rayon => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}

/// Splits `0..n` into fixed-size chunks and maps each chunk range.
///
/// Chunk boundaries depend only on `n` and `chunk`, never on thread count.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    let count = n.div_ceil(chunk);
    map_range(count, |i| {
        let lo = i * chunk;
        f(lo..(lo + chunk).min(n))
    })
}
