//! Execution policy for data-parallel kernels.
//!
//! Kernels split their work into tasks whose boundaries never depend on the
//! number of threads, and every reduction across tasks happens in task order.
//! Switching between [`ExecMode::Sequential`] and [`ExecMode::Parallel`]
//! therefore changes wall time only, never the bits of a result.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

/// Whether this build was compiled with the rayon kernels.
pub const PARALLEL_AVAILABLE: bool = cfg!(feature = "parallel");

static MODE: AtomicU8 = AtomicU8::new(0);

pub fn set_mode(mode: ExecMode) {
    MODE.store(mode as u8, Ordering::Relaxed);
}

pub fn mode() -> ExecMode {
    match MODE.load(Ordering::Relaxed) {
        0 => ExecMode::Sequential,
        _ => ExecMode::Parallel,
    }
}

/// True when kernels will actually fan out to worker threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && mode() == ExecMode::Parallel
}

/// Configure the global rayon pool. `threads <= 1` selects the sequential path.
pub fn configure_threads(threads: usize) {
    if threads <= 1 {
        set_mode(ExecMode::Sequential);
        return;
    }
    #[cfg(feature = "parallel")]
    {
        // The global pool can only be built once per process; later calls keep it.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    set_mode(ExecMode::Parallel);
}

/// Run `f(i)` for `i in 0..n` and collect results in index order.
pub(crate) fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Run `f(i, chunk)` over consecutive `chunk_len`-sized chunks of `data`.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() > chunk_len {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}
