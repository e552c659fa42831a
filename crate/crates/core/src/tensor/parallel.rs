use rayon::prelude::*;

/// Fixed-size worker pool whose map preserves input order, so callers can
/// reduce the results in a worker-count-independent sequence.
pub struct Workers {
    count: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    pub fn new(count: usize) -> Self {
        let count = count.max(1);
        let pool = (count > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(count)
                .build()
                .expect("thread pool")
        });
        Workers { count, pool }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match &self.pool {
            None => items.iter().map(f).collect(),
            Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}

impl std::fmt::Debug for Workers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workers").field("count", &self.count).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_regardless_of_workers() {
        let items: Vec<u64> = (0..257).collect();
        let f = |x: &u64| (*x as f64).sqrt() * 1e-3;
        let one: f64 = Workers::new(1).map(&items, f).into_iter().sum();
        let four: f64 = Workers::new(4).map(&items, f).into_iter().sum();
        assert_eq!(one.to_bits(), four.to_bits());
    }
}
