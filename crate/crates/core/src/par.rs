//! Index-ordered data parallelism.
//!
//! Every Monte-Carlo estimator in the crate evaluates sample `i` from its own
//! random sub-stream and writes the result into slot `i`; reductions then walk
//! the slots in index order. The output is therefore bitwise independent of
//! the number of worker threads, and of whether the `parallel` feature is
//! compiled in at all.

/// Execution strategy for per-sample work.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise falls back
    /// to sequential evaluation.
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
    /// Evaluates `f(0..m)` and returns the results in index order.
    pub fn map<T, F>(self, m: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..m).map(f).collect(),
            Exec::Parallel => par_map(m, f),
        }
    }

    /// Maps over a slice, preserving order.
    pub fn map_slice<S, T, F>(self, items: &[S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&S) -> T + Sync + Send,
    {
        self.map(items.len(), |i| f(&items[i]))
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(m: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..m).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(m: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..m).map(f).collect()
}

/// Mean and standard error (sample sd / sqrt(m)) of `values`, summed in index order.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (m as f64 - 1.0)).sqrt() / (m as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let seq = Exec::Sequential.map(1000, |i| (i as f64).sqrt());
        let par = Exec::Parallel.map(1000, |i| (i as f64).sqrt());
        assert_eq!(seq, par);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        let (m, s) = mean_stderr(&[3.0; 100]);
        assert_eq!(m, 3.0);
        assert_eq!(s, 0.0);
        assert_eq!(mean_stderr(&[2.5]), (2.5, 0.0));
    }

    #[test]
    fn stderr_matches_hand_value() {
        // sd of {1,2,3,4} with m-1 denominator is sqrt(5/3)
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
    }
}
