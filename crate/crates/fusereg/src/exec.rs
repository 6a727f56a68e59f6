//! Execution strategy: data-parallel loops with a deterministic fallback.
//!
//! All bulk work in this crate funnels through [`map_indexed`] and
//! [`tree_sum`]. Both have a sequential implementation that is always
//! compiled, and a rayon implementation behind the `parallel` feature.
//! `tree_sum` reduces over a fixed-shape binary tree whose leaves are summed
//! in index order, so the result is bit-identical no matter how many worker
//! threads run it — including the fully sequential build.
//!
//! The environment variable `FUSEREG_THREADS` caps the worker count:
//! `FUSEREG_THREADS=1` forces the sequential path even in a parallel build
//! (see [`init_threads_from_env`]).

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential code path at runtime (used by benches and by
/// `FUSEREG_THREADS=1`). No-op in builds without the `parallel` feature,
/// which are always sequential.
pub fn set_sequential(seq: bool) {
    FORCE_SEQUENTIAL.store(seq, Ordering::SeqCst);
}

/// Whether the parallel path is compiled in and currently enabled.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Apply `FUSEREG_THREADS` to the process: `1` forces sequential execution,
/// larger values size the global rayon pool. Call once at startup; pool
/// construction errors (pool already built) are ignored.
pub fn init_threads_from_env() {
    let Ok(raw) = std::env::var("FUSEREG_THREADS") else {
        return;
    };
    let Ok(n) = raw.trim().parse::<usize>() else {
        return;
    };
    if n <= 1 {
        set_sequential(true);
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Leaf size of the reduction tree. Below this length a range is summed by a
/// plain loop; the tree shape above it is a function of the range alone, so
/// a fixed `LEAF` pins the floating-point summation order.
const LEAF: usize = 256;

/// Sum `f(i)` for `i in 0..n` over a fixed-shape pairwise tree.
///
/// `zero()` supplies the additive identity (e.g. a zero vector of the right
/// dimension). Returns `zero()` for `n == 0`.
pub fn tree_sum<T, F, Z>(n: usize, f: F, zero: Z) -> T
where
    T: Send + std::ops::AddAssign<T>,
    F: Fn(usize) -> T + Sync,
    Z: Fn() -> T + Sync,
{
    if n == 0 {
        return zero();
    }
    tree_sum_range(0, n, &f, &zero)
}

fn tree_sum_range<T, F, Z>(lo: usize, hi: usize, f: &F, zero: &Z) -> T
where
    T: Send + std::ops::AddAssign<T>,
    F: Fn(usize) -> T + Sync,
    Z: Fn() -> T + Sync,
{
    let len = hi - lo;
    if len <= LEAF {
        let mut acc = zero();
        for i in lo..hi {
            acc += f(i);
        }
        return acc;
    }
    let mid = lo + len / 2;
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        let (mut left, right) = rayon::join(
            || tree_sum_range(lo, mid, f, zero),
            || tree_sum_range(mid, hi, f, zero),
        );
        left += right;
        return left;
    }
    let mut left = tree_sum_range(lo, mid, f, zero);
    let right = tree_sum_range(mid, hi, f, zero);
    left += right;
    left
}
