//! Execution mode switch for the data-parallel loops.
//!
//! Every parallel loop in the crate goes through [`ExecMode`]. With the
//! `parallel` feature disabled, [`ExecMode::Parallel`] silently runs the
//! sequential path, so callers never need their own `cfg` gates. Results are
//! always collected in input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// Whether this mode actually fans out to worker threads in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }

    /// Map `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Map `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Fill `out` in fixed-size chunks; `f(offset, chunk)` writes one chunk.
    pub fn fill_chunks<R, F>(self, out: &mut [R], chunk: usize, f: F)
    where
        R: Send,
        F: Fn(usize, &mut [R]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            out.par_chunks_mut(chunk).enumerate().for_each(|(c, slice)| f(c * chunk, slice));
            return;
        }
        for (c, slice) in out.chunks_mut(chunk).enumerate() {
            f(c * chunk, slice);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = ExecMode::Sequential.map(&xs, |x| x * x);
        let b = ExecMode::Parallel.map(&xs, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(a[10], 100);

        let mut s = vec![0usize; 1003];
        let mut p = vec![0usize; 1003];
        ExecMode::Sequential.fill_chunks(&mut s, 64, |off, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = off + j;
            }
        });
        ExecMode::Parallel.fill_chunks(&mut p, 64, |off, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = off + j;
            }
        });
        assert_eq!(s, p);
        assert_eq!(s[1002], 1002);
    }
}
