//! Data-parallel loop helpers.
//!
//! With the default `parallel` feature the loops run on rayon's global pool;
//! without it they run sequentially. Every parallel task owns a disjoint
//! output slab and performs its own sequential reductions, so results are
//! identical under both execution modes and any thread count.

/// Splits `out` into `chunk`-sized slabs and runs `f(slab_index, slab)` on
/// each. `out.len()` must be a multiple of `chunk`.
#[cfg(feature = "parallel")]
pub fn for_each_slab<T: Send, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    debug_assert_eq!(out.len() % chunk.max(1), 0);
    out.par_chunks_mut(chunk).enumerate().for_each(|(i, slab)| f(i, slab));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_slab<T: Send, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert_eq!(out.len() % chunk.max(1), 0);
    for (i, slab) in out.chunks_mut(chunk).enumerate() {
        f(i, slab);
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<R: Send, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R: Send, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// True when compiled with the rayon-backed path.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
