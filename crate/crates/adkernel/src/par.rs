//! Data-parallel building blocks with a sequential fallback.
//!
//! Work is always split into fixed-size blocks chosen independently of the
//! thread count, and block results are combined in block order, so results
//! are bit-identical whether the `parallel` feature is on or off and
//! however many worker threads rayon ends up using.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Run `f` over fixed-size mutable chunks of `out`. `f(block_index, chunk)`.
pub fn for_chunks_mut<T: Send, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Map each index in `0..n` to a value, preserving order.
pub fn map_indexed<R: Send, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Block size used for elementwise kernels.
pub const ELEM_BLOCK: usize = 16 * 1024;

/// Deterministic sum: fixed-size block partials folded in block order.
pub fn block_sum<T, F>(n: usize, block: usize, f: F) -> T
where
    T: crate::Real,
    F: Fn(usize, usize) -> T + Send + Sync,
{
    if n == 0 {
        return T::zero();
    }
    let nblocks = n.div_ceil(block);
    let partials = map_indexed(nblocks, |i| {
        let lo = i * block;
        let hi = (lo + block).min(n);
        f(lo, hi)
    });
    partials.into_iter().fold(T::zero(), |a, b| a + b)
}

/// True when this build executes blocks on the rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
