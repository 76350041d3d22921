//! Linear-chain CRF dynamic programs over a flat `[n × tags]` emission
//! matrix. Everything runs in log space.

use crate::scalar::{log_sum_exp, Scalar};

/// Borrowed view of CRF parameters. `trans[i * tags + j]` scores tag `j`
/// following tag `i`; `start`/`stop` score the first and last tag.
#[derive(Clone, Copy, Debug)]
pub struct CrfView<'a, T> {
    pub trans: &'a [T],
    pub start: Option<&'a [T]>,
    pub stop: Option<&'a [T]>,
    pub num_tags: usize,
}

impl<'a, T: Scalar> CrfView<'a, T> {
    pub fn new(trans: &'a [T], num_tags: usize) -> Self {
        assert_eq!(trans.len(), num_tags * num_tags, "transition matrix must be square");
        CrfView {
            trans,
            start: None,
            stop: None,
            num_tags,
        }
    }

    pub fn with_boundaries(mut self, start: &'a [T], stop: &'a [T]) -> Self {
        assert_eq!(start.len(), self.num_tags);
        assert_eq!(stop.len(), self.num_tags);
        self.start = Some(start);
        self.stop = Some(stop);
        self
    }

    #[inline]
    fn tr(&self, i: usize, j: usize) -> T {
        self.trans[i * self.num_tags + j]
    }

    #[inline]
    fn start_score(&self, j: usize) -> T {
        self.start.map_or(T::zero(), |s| s[j])
    }

    #[inline]
    fn stop_score(&self, j: usize) -> T {
        self.stop.map_or(T::zero(), |s| s[j])
    }

    fn check(&self, emissions: &[T]) -> usize {
        let t = self.num_tags;
        assert!(t > 0 && emissions.len().is_multiple_of(t), "emission matrix is not [n x {t}]");
        let n = emissions.len() / t;
        assert!(n >= 1, "CRF needs at least one position");
        n
    }

    /// s(d, y): transition scores between consecutive tags plus emissions,
    /// plus boundary scores when enabled.
    pub fn path_score(&self, emissions: &[T], tags: &[usize]) -> T {
        let t = self.num_tags;
        let n = self.check(emissions);
        assert_eq!(tags.len(), n);
        let mut s = self.start_score(tags[0]) + self.stop_score(tags[n - 1]);
        for (pos, &y) in tags.iter().enumerate() {
            s += emissions[pos * t + y];
        }
        for w in tags.windows(2) {
            s += self.tr(w[0], w[1]);
        }
        s
    }

    /// Forward recursion; returns (alpha `[n × tags]`, log partition).
    pub fn forward(&self, emissions: &[T]) -> (Vec<T>, T) {
        let t = self.num_tags;
        let n = self.check(emissions);
        let mut alpha = vec![T::zero(); n * t];
        for j in 0..t {
            alpha[j] = self.start_score(j) + emissions[j];
        }
        let mut buf = vec![T::zero(); t];
        for pos in 1..n {
            for j in 0..t {
                for i in 0..t {
                    buf[i] = alpha[(pos - 1) * t + i] + self.tr(i, j);
                }
                alpha[pos * t + j] = log_sum_exp(&buf) + emissions[pos * t + j];
            }
        }
        for j in 0..t {
            buf[j] = alpha[(n - 1) * t + j] + self.stop_score(j);
        }
        (alpha, log_sum_exp(&buf))
    }

    /// Backward recursion; `beta[pos][i]` is the log-score of all suffixes
    /// after `pos` given tag `i` at `pos`.
    pub fn backward(&self, emissions: &[T]) -> Vec<T> {
        let t = self.num_tags;
        let n = self.check(emissions);
        let mut beta = vec![T::zero(); n * t];
        for i in 0..t {
            beta[(n - 1) * t + i] = self.stop_score(i);
        }
        let mut buf = vec![T::zero(); t];
        for pos in (0..n - 1).rev() {
            for i in 0..t {
                for j in 0..t {
                    buf[j] = self.tr(i, j) + emissions[(pos + 1) * t + j] + beta[(pos + 1) * t + j];
                }
                beta[pos * t + i] = log_sum_exp(&buf);
            }
        }
        beta
    }

    pub fn log_partition(&self, emissions: &[T]) -> T {
        self.forward(emissions).1
    }

    /// log p(y | d)
    pub fn log_likelihood(&self, emissions: &[T], tags: &[usize]) -> T {
        self.path_score(emissions, tags) - self.log_partition(emissions)
    }

    /// Posterior p(y_t = j | d) via forward-backward; rows sum to one.
    pub fn marginals(&self, emissions: &[T]) -> Vec<T> {
        let (alpha, log_z) = self.forward(emissions);
        let beta = self.backward(emissions);
        alpha.iter().zip(&beta).map(|(&a, &b)| (a + b - log_z).exp()).collect()
    }

    /// Best path and its score. Ties go to the lowest tag id, both for the
    /// final tag and for every back-pointer.
    pub fn viterbi(&self, emissions: &[T]) -> (Vec<usize>, T) {
        let t = self.num_tags;
        let n = self.check(emissions);
        let mut score: Vec<T> = (0..t).map(|j| self.start_score(j) + emissions[j]).collect();
        let mut back = vec![0usize; n * t];
        let mut next = vec![T::zero(); t];
        for pos in 1..n {
            for j in 0..t {
                let mut best = 0;
                let mut best_v = score[0] + self.tr(0, j);
                for i in 1..t {
                    let v = score[i] + self.tr(i, j);
                    if v > best_v {
                        best = i;
                        best_v = v;
                    }
                }
                back[pos * t + j] = best;
                next[j] = best_v + emissions[pos * t + j];
            }
            std::mem::swap(&mut score, &mut next);
        }
        let mut last = 0;
        let mut best_v = score[0] + self.stop_score(0);
        for j in 1..t {
            let v = score[j] + self.stop_score(j);
            if v > best_v {
                last = j;
                best_v = v;
            }
        }
        let mut path = vec![last; n];
        for pos in (1..n).rev() {
            path[pos - 1] = back[pos * t + path[pos]];
        }
        (path, best_v)
    }

    /// Negative log-likelihood of `tags` and its gradient with respect to
    /// emissions, transitions and (when enabled) boundary scores.
    pub fn nll_with_grad(&self, emissions: &[T], tags: &[usize]) -> CrfGrad<T> {
        let t = self.num_tags;
        let n = self.check(emissions);
        assert_eq!(tags.len(), n);
        let (alpha, log_z) = self.forward(emissions);
        let beta = self.backward(emissions);
        let nll = log_z - self.path_score(emissions, tags);

        let mut d_em: Vec<T> = alpha.iter().zip(&beta).map(|(&a, &b)| (a + b - log_z).exp()).collect();
        let mut d_trans = vec![T::zero(); t * t];
        for pos in 0..n - 1 {
            for i in 0..t {
                let a = alpha[pos * t + i];
                for j in 0..t {
                    let e = a + self.tr(i, j) + emissions[(pos + 1) * t + j] + beta[(pos + 1) * t + j] - log_z;
                    d_trans[i * t + j] += e.exp();
                }
            }
        }
        let mut d_start = self.start.map(|_| d_em[..t].to_vec());
        let mut d_stop = self.stop.map(|_| d_em[(n - 1) * t..].to_vec());
        for (pos, &y) in tags.iter().enumerate() {
            d_em[pos * t + y] -= T::one();
        }
        for w in tags.windows(2) {
            d_trans[w[0] * t + w[1]] -= T::one();
        }
        if let Some(s) = &mut d_start {
            s[tags[0]] -= T::one();
        }
        if let Some(s) = &mut d_stop {
            s[tags[n - 1]] -= T::one();
        }
        CrfGrad {
            nll,
            d_emissions: d_em,
            d_trans,
            d_start,
            d_stop,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CrfGrad<T> {
    pub nll: T,
    pub d_emissions: Vec<T>,
    pub d_trans: Vec<T>,
    pub d_start: Option<Vec<T>>,
    pub d_stop: Option<Vec<T>>,
}
