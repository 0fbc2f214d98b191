//! Data-parallel helpers. With the `parallel` feature they dispatch to rayon;
//! without it they run sequentially. Every helper assigns each output slot to
//! exactly one closure call, so results never depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of scalar multiply-adds before a kernel bothers splitting work.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 15;

/// Apply `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if work >= PAR_THRESHOLD && data.len() > chunk {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Map over mutable items, collecting results in item order.
pub(crate) fn map_mut<T, O, F>(items: &mut [T], f: F) -> Vec<O>
where
    T: Send,
    O: Send,
    F: Fn(usize, &mut T) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Map over shared items, collecting results in item order.
pub(crate) fn map<T, O, F>(items: &[T], f: F) -> Vec<O>
where
    T: Sync,
    O: Send,
    F: Fn(usize, &T) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Whether this build was compiled with rayon support.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
