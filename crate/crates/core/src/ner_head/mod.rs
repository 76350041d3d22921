//! Tag scoring: affine decoder, word-level softmax likelihood, and the
//! sentence-level CRF likelihood with Viterbi and forward-backward.

pub mod crf;

use serde::{Deserialize, Serialize};

pub use crf::{CrfGrad, CrfView};

use crate::error::Result;
use crate::scalar::{log_sum_exp, Scalar};
use crate::tensor::{init_xavier, Graph, NodeId, ParamId, ParamSet, Rng, Tensor};

/// Training objective on top of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Independent per-token softmax (CNN-BiLSTM).
    Softmax,
    /// Linear-chain CRF (CNN-BiLSTM-CRF).
    Crf,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Softmax => "softmax",
            Head::Crf => "crf",
        }
    }
}

/// `W_d: [T × input]`, `b: [T]` inside a parameter set.
#[derive(Clone, Copy, Debug)]
pub struct DecoderIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DecoderIds {
    /// Xavier weights, zero bias.
    pub fn create<T: Scalar>(
        params: &mut ParamSet<T>,
        prefix: &str,
        outputs: usize,
        inputs: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = params.insert(format!("{prefix}.weight"), init_xavier(&[outputs, inputs], rng)?)?;
        let bias = params.insert(format!("{prefix}.bias"), Tensor::zeros([outputs]))?;
        Ok(DecoderIds { weight, bias })
    }

    /// `d_t = W_d h_t + b` for every row of `h`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, h: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let z = g.matmul_nt(h, w);
        g.add_bias(z, b)
    }
}

/// Transition matrix plus optional start/stop scores.
#[derive(Clone, Copy, Debug)]
pub struct CrfIds {
    pub transitions: ParamId,
    pub boundaries: Option<(ParamId, ParamId)>,
}

impl CrfIds {
    /// Transitions start at zero; boundary vectors (if enabled) too.
    pub fn create<T: Scalar>(params: &mut ParamSet<T>, tags: usize, boundaries: bool) -> Result<Self> {
        let transitions = params.insert("crf.transitions", Tensor::zeros([tags, tags]))?;
        let boundaries = if boundaries {
            Some((
                params.insert("crf.start", Tensor::zeros([tags]))?,
                params.insert("crf.stop", Tensor::zeros([tags]))?,
            ))
        } else {
            None
        };
        Ok(CrfIds { transitions, boundaries })
    }

    pub fn view<'a, T: Scalar>(&self, params: &'a ParamSet<T>) -> CrfView<'a, T> {
        let trans = params.get(self.transitions);
        let view = CrfView::new(trans.data(), trans.rows());
        match self.boundaries {
            Some((s, e)) => view.with_boundaries(params.get(s).data(), params.get(e).data()),
            None => view,
        }
    }

    /// Negative log-likelihood node for one sentence.
    pub fn nll<T: Scalar>(&self, g: &mut Graph<'_, T>, emissions: NodeId, tags: &[usize]) -> NodeId {
        let trans = g.param(self.transitions);
        let bounds = self.boundaries.map(|(s, e)| (g.param(s), g.param(e)));
        g.crf_nll(emissions, trans, bounds, tags)
    }
}

/// Mean over tokens of `-log softmax(d_t)[y_t]`.
pub fn word_nll<T: Scalar>(g: &mut Graph<'_, T>, logits: NodeId, gold: &[usize]) -> NodeId {
    let total = g.softmax_cross_entropy(logits, gold);
    g.scale(total, T::of(1.0 / gold.len() as f64))
}

/// Standalone CRF parameters, for decoding and analysis outside a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams<T> {
    pub transitions: Tensor<T>,
    pub start: Option<Tensor<T>>,
    pub stop: Option<Tensor<T>>,
}

impl<T: Scalar> CrfParams<T> {
    pub fn new(transitions: Tensor<T>) -> Self {
        assert_eq!(transitions.rows(), transitions.cols(), "transitions must be square");
        CrfParams {
            transitions,
            start: None,
            stop: None,
        }
    }

    pub fn with_boundaries(mut self, start: Tensor<T>, stop: Tensor<T>) -> Self {
        self.start = Some(start);
        self.stop = Some(stop);
        self
    }

    pub fn from_params(params: &ParamSet<T>, ids: &CrfIds) -> Self {
        let mut p = CrfParams::new(params.get(ids.transitions).clone());
        if let Some((s, e)) = ids.boundaries {
            p = p.with_boundaries(params.get(s).clone(), params.get(e).clone());
        }
        p
    }

    pub fn num_tags(&self) -> usize {
        self.transitions.rows()
    }

    pub fn view(&self) -> CrfView<'_, T> {
        let v = CrfView::new(self.transitions.data(), self.num_tags());
        match (&self.start, &self.stop) {
            (Some(s), Some(e)) => v.with_boundaries(s.data(), e.data()),
            _ => v,
        }
    }

    /// `log p(y | d) = s(d, y) - log Σ_y' exp s(d, y')`, partition by the
    /// forward algorithm.
    pub fn log_likelihood(&self, d: &Tensor<T>, gold: &[usize]) -> T {
        self.view().log_likelihood(d.data(), gold)
    }

    pub fn viterbi(&self, d: &Tensor<T>) -> (Vec<usize>, T) {
        self.view().viterbi(d.data())
    }

    pub fn marginals(&self, d: &Tensor<T>) -> Tensor<T> {
        let m = self.view().marginals(d.data());
        Tensor::new([d.rows(), self.num_tags()], m).expect("marginals shape")
    }
}

/// Per-token softmax probabilities of a `[n × T]` logit matrix.
pub fn softmax_rows<T: Scalar>(d: &Tensor<T>) -> Tensor<T> {
    let c = d.cols();
    let data = d
        .data()
        .chunks_exact(c)
        .flat_map(|row| {
            let lse = log_sum_exp(row);
            row.iter().map(move |&x| (x - lse).exp())
        })
        .collect();
    Tensor::new(d.shape(), data).expect("same shape")
}

/// Per-token argmax (lowest id on ties).
pub fn argmax_rows<T: Scalar>(d: &Tensor<T>) -> Vec<usize> {
    d.data()
        .chunks_exact(d.cols())
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngSeed;
    use rand::Rng as _;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn([rows, cols], |_| rng.gen_range(-2.0..2.0))
    }

    fn all_paths(n: usize, t: usize) -> Vec<Vec<usize>> {
        (0..t.pow(n as u32))
            .map(|mut code| {
                (0..n)
                    .map(|_| {
                        let y = code % t;
                        code /= t;
                        y
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_position_reduces_to_softmax() {
        let mut rng = RngSeed(5).rng();
        let d = rand_tensor(1, 4, &mut rng);
        let crf = CrfParams::new(rand_tensor(4, 4, &mut rng));
        let ll = crf.log_likelihood(&d, &[2]);
        let expect = d.data()[2] - log_sum_exp(d.data());
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_transitions_factorize() {
        let mut rng = RngSeed(6).rng();
        let d = rand_tensor(5, 3, &mut rng);
        let crf = CrfParams::new(Tensor::zeros([3, 3]));
        let gold = [0, 2, 1, 1, 0];
        let expect: f64 = gold
            .iter()
            .enumerate()
            .map(|(t, &y)| d.row(t)[y] - log_sum_exp(d.row(t)))
            .sum();
        assert!((crf.log_likelihood(&d, &gold) - expect).abs() < 1e-10);
        let m = crf.marginals(&d);
        let s = softmax_rows(&d);
        for (a, b) in m.data().iter().zip(s.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(crf.viterbi(&d).0, argmax_rows(&d));
    }

    #[test]
    fn matches_enumeration_both_modes() {
        let mut rng = RngSeed(7).rng();
        for boundaries in [false, true] {
            let (n, t) = (4, 3);
            let d = rand_tensor(n, t, &mut rng);
            let mut crf = CrfParams::new(rand_tensor(t, t, &mut rng));
            if boundaries {
                crf = crf.with_boundaries(rand_tensor(1, t, &mut rng), rand_tensor(1, t, &mut rng));
            }
            let v = crf.view();
            let paths = all_paths(n, t);
            let scores: Vec<f64> = paths.iter().map(|p| v.path_score(d.data(), p)).collect();
            let log_z = log_sum_exp(&scores);
            assert!((v.log_partition(d.data()) - log_z).abs() < 1e-10);
            let (best, best_score) = crf.viterbi(&d);
            let (bi, bs) = scores
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
            assert_eq!(best, paths[bi]);
            assert!((best_score - bs).abs() < 1e-10);
        }
    }

    #[test]
    fn strong_negative_transition_is_avoided() {
        // emissions prefer tag 1 everywhere after a forced tag 0 start
        let d = Tensor::new([2, 2], vec![5.0, 0.0, 0.0, 1.0]).unwrap();
        let crf = CrfParams::new(Tensor::new([2, 2], vec![0.0, -100.0, 0.0, 0.0]).unwrap());
        let (path, _) = crf.viterbi(&d);
        assert_eq!(path, vec![0, 0]);
    }

    #[test]
    fn viterbi_ties_go_to_lowest_id() {
        let d = Tensor::<f64>::zeros([3, 3]);
        let crf = CrfParams::new(Tensor::zeros([3, 3]));
        assert_eq!(crf.viterbi(&d).0, vec![0, 0, 0]);
    }

    #[test]
    fn logits_affine() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.insert("w", Tensor::zeros([2, 3])).unwrap();
        let b = ps.insert("b", Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
        let dec = DecoderIds { weight: w, bias: b };
        let mut g = Graph::new(&ps);
        let h = g.constant(4, 3, vec![0.7; 12]);
        let d = dec.logits(&mut g, h);
        for row in g.value(d).chunks(2) {
            assert_eq!(row, &[1.0, 2.0]);
        }
    }

    #[test]
    fn uniform_logits_give_ln_t() {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let d = g.constant(3, 4, vec![0.3; 12]);
        let loss = word_nll(&mut g, d, &[0, 1, 3]);
        assert!((g.scalar(loss) - 4f64.ln()).abs() < 1e-12);
        let d = g.constant(1, 3, vec![0.0, 60.0, 0.0]);
        let loss = word_nll(&mut g, d, &[1]);
        assert!(g.scalar(loss) < 1e-20);
    }

    #[test]
    fn word_nll_matches_hand_softmax() {
        let mut rng = RngSeed(9).rng();
        let d = rand_tensor(3, 5, &mut rng);
        let gold = [4, 0, 2];
        let mut expect = 0.0;
        for (t, &y) in gold.iter().enumerate() {
            let row = d.row(t);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            expect -= (row[y].exp() / z).ln();
        }
        expect /= 3.0;
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let dn = g.constant(3, 5, d.data().to_vec());
        let loss = word_nll(&mut g, dn, &gold);
        assert!((g.scalar(loss) - expect).abs() < 1e-6);
    }
}
