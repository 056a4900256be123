//! Row-parallel execution helpers.
//!
//! Every helper hands each output row to exactly one closure invocation, so
//! the floating point reduction order inside a row never depends on how rows
//! are scheduled. Parallel and sequential execution are therefore
//! bit-identical. Without the `parallel` feature everything runs inline.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Rows below this amount of scalar work are processed inline.
const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Enables or disables parallel kernels at runtime. Has no effect when the
/// crate is built without the `parallel` feature.
pub fn set_enabled(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Calls `f(row_index, row)` for each `row_len` chunk of `out`.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if enabled() && out.len() >= MIN_PARALLEL_WORK && out.len() / row_len > 1 {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Maps `f` over `0..n` and collects the results in index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if enabled() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_visited_once_in_both_modes() {
        for enabled in [true, false] {
            set_enabled(enabled);
            let mut v = vec![0usize; 1 << 16];
            for_each_row(&mut v, 64, |i, row| row.iter_mut().for_each(|x| *x += i));
            assert!(v.chunks(64).enumerate().all(|(i, r)| r.iter().all(|&x| x == i)));
        }
        set_enabled(true);
    }

    #[test]
    fn map_collect_preserves_order() {
        assert_eq!(map_collect(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
