//! Execution policy for the data-parallel inner loops.
//!
//! Every parallel kernel splits work over independent output chunks, so each
//! output element is produced by the same sequential loop regardless of the
//! policy. Results are bit-identical between [`Exec::Sequential`] and
//! [`Exec::Parallel`]; the choice only affects wall time.
//!
//! Without the `parallel` feature, [`Exec::Parallel`] falls back to the
//! sequential path.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar operations a kernel stays sequential even when
/// asked to run in parallel.
pub const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Downgrade to sequential for small workloads.
    pub fn for_work(self, work: usize) -> Exec {
        if work < PAR_THRESHOLD {
            Exec::Sequential
        } else {
            self
        }
    }

    /// Run `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
    pub fn for_each_chunk<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        if chunk == 0 || data.is_empty() {
            return;
        }
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Evaluate `f(i)` for `i in 0..n`, collected in index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let v = exec.map(1000, |i| i * 3);
            assert!(v.iter().enumerate().all(|(i, &x)| x == i * 3));
        }
    }

    #[test]
    fn chunks_cover_everything() {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let mut data = vec![0usize; 103];
            exec.for_each_chunk(&mut data, 10, |ci, c| {
                for (j, x) in c.iter_mut().enumerate() {
                    *x = ci * 10 + j;
                }
            });
            assert!(data.iter().enumerate().all(|(i, &x)| x == i));
        }
    }

    #[test]
    fn small_work_stays_sequential() {
        assert_eq!(Exec::Parallel.for_work(10), Exec::Sequential);
        assert_eq!(Exec::Parallel.for_work(PAR_THRESHOLD), Exec::Parallel);
    }
}
