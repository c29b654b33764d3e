//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] runs on rayon;
//! without it every policy runs sequentially. Results always come back in
//! input order, so outputs do not depend on scheduling.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Rayon's global pool, or a dedicated pool of `workers` threads.
    #[default]
    Parallel,
    Workers(usize),
}

impl Exec {
    pub fn from_workers(workers: Option<usize>) -> Self {
        match workers {
            Some(0 | 1) => Exec::Sequential,
            Some(n) => Exec::Workers(n),
            None => Exec::Parallel,
        }
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            #[cfg(feature = "parallel")]
            Exec::Workers(n) => {
                use rayon::prelude::*;
                match rayon::ThreadPoolBuilder::new().num_threads(*n).build() {
                    Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
                    Err(e) => {
                        log::warn!("could not build a {n}-thread pool ({e}); running sequentially");
                        items.iter().map(f).collect()
                    }
                }
            }
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel | Exec::Workers(_) => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        let idx: Vec<usize> = (0..n).collect();
        self.map(&idx, |&i| f(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree_on_order() {
        let items: Vec<u64> = (0..257).collect();
        let f = |x: &u64| x.wrapping_mul(0x9E37_79B9) % 1013;
        let seq = Exec::Sequential.map(&items, f);
        assert_eq!(Exec::Parallel.map(&items, f), seq);
        assert_eq!(Exec::Workers(3).map(&items, f), seq);
    }
}
