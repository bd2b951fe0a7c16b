//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run the same closures in order. Every caller is written so that the
//! result does not depend on execution order, which keeps runs bitwise
//! reproducible across both builds.

/// True when the crate was built with rayon support.
#[cfg(feature = "parallel")]
pub fn is_parallel_available() -> bool {
    true
}

#[cfg(not(feature = "parallel"))]
pub fn is_parallel_available() -> bool {
    false
}

/// Map `f` over `0..count`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(count: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..count).map(f).collect()
}

/// Sequential twin of [`map_indexed`], always available (used by benches).
pub fn map_indexed_seq<U, F>(count: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..count).map(f).collect()
}

/// Apply `f` to every element mutably, in parallel when available.
#[cfg(feature = "parallel")]
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    F: Fn(usize, &mut T),
{
    items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
}

pub fn for_each_mut_seq<T, F>(items: &mut [T], f: F)
where
    F: Fn(usize, &mut T),
{
    items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
}

/// Execution policy for per-node rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    /// Parallel only when the round carries at least [`PAR_MIN_WORK`]
    /// floating-point operations; small rounds lose more to scheduling than
    /// they gain.
    #[default]
    Auto,
    Sequential,
    Parallel,
}

pub const PAR_MIN_WORK: usize = 1 << 15;

impl Exec {
    pub fn use_parallel(self, work: usize) -> bool {
        is_parallel_available()
            && match self {
                Exec::Auto => work >= PAR_MIN_WORK,
                Exec::Sequential => false,
                Exec::Parallel => true,
            }
    }
}

/// Calls `f(i, chunk_i, &mut aux[i])` where `chunk_i` is the `i`-th block of
/// `chunk` entries of `flat`.
pub fn for_each_chunk_mut<T, F>(exec: Exec, work: usize, flat: &mut [f64], chunk: usize, aux: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut [f64], &mut T) + Sync + Send,
{
    debug_assert_eq!(flat.len(), chunk * aux.len());
    #[cfg(feature = "parallel")]
    if exec.use_parallel(work) {
        use rayon::prelude::*;
        flat.par_chunks_mut(chunk.max(1))
            .zip(aux.par_iter_mut())
            .enumerate()
            .for_each(|(i, (c, a))| f(i, c, a));
        return;
    }
    let _ = (exec, work);
    for (i, (c, a)) in flat.chunks_mut(chunk.max(1)).zip(aux.iter_mut()).enumerate() {
        f(i, c, a);
    }
}
