//! Character CNN + word-level BiLSTM, shared by the language model and the
//! tagger.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, PAD_ID};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{init_uniform, init_xavier, Graph, NodeId, ParamId, ParamSet, Rng, Tensor};

/// LSTM weights and biases are drawn from `uniform(-LSTM_INIT, LSTM_INIT)`.
pub const LSTM_INIT: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Layer sizes. Defaults reproduce the published configuration: 50-d
/// characters, 300-d words, filter widths 1..=7 with `min(200, 50·w)`
/// filters each, and 256 hidden units per direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub char_dim: usize,
    pub word_dim: usize,
    pub max_filter_width: usize,
    pub filters_per_width: usize,
    pub max_filters: usize,
    pub hidden: usize,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            char_dim: 50,
            word_dim: 300,
            max_filter_width: 7,
            filters_per_width: 50,
            max_filters: 200,
            hidden: 256,
            activation: Activation::Relu,
        }
    }
}

impl Architecture {
    /// `(width, filters)` for widths `1..=max_filter_width`.
    pub fn filter_bank(&self) -> Vec<(usize, usize)> {
        (1..=self.max_filter_width)
            .map(|w| (w, self.max_filters.min(self.filters_per_width * w)))
            .collect()
    }

    pub fn char_feature_dim(&self) -> usize {
        self.filter_bank().iter().map(|(_, n)| n).sum()
    }

    pub fn lstm_input_dim(&self) -> usize {
        self.word_dim + self.char_feature_dim()
    }

    /// Size of the concatenated BiLSTM state.
    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("char_dim", self.char_dim),
            ("word_dim", self.word_dim),
            ("max_filter_width", self.max_filter_width),
            ("filters_per_width", self.filters_per_width),
            ("max_filters", self.max_filters),
            ("hidden", self.hidden),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::contract(format!("architecture.{name} must be positive"))),
            None => Ok(()),
        }
    }

    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        };
        [
            ("arch.char_dim", self.char_dim.to_string()),
            ("arch.word_dim", self.word_dim.to_string()),
            ("arch.max_filter_width", self.max_filter_width.to_string()),
            ("arch.filters_per_width", self.filters_per_width.to_string()),
            ("arch.max_filters", self.max_filters.to_string()),
            ("arch.hidden", self.hidden.to_string()),
            ("arch.activation", act.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{k}`")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not an integer")))
        };
        let activation = match meta.get("arch.activation").map(String::as_str) {
            Some("relu") => Activation::Relu,
            Some("tanh") => Activation::Tanh,
            other => return Err(Error::Checkpoint(format!("bad activation {other:?}"))),
        };
        Ok(Architecture {
            char_dim: num("arch.char_dim")?,
            word_dim: num("arch.word_dim")?,
            max_filter_width: num("arch.max_filter_width")?,
            filters_per_width: num("arch.filters_per_width")?,
            max_filters: num("arch.max_filters")?,
            hidden: num("arch.hidden")?,
            activation,
        })
    }

    /// Names of fields that differ from `other`.
    pub fn mismatches(&self, other: &Architecture) -> Vec<String> {
        let a = self.to_metadata();
        let b = other.to_metadata();
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: {v} vs {}", b.get(k).map_or("<missing>", String::as_str)))
            .collect()
    }
}

/// Gate weights `[H × (H + D_in)]` and biases `[H]` of one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct LstmIds {
    pub w_i: ParamId,
    pub w_f: ParamId,
    pub w_o: ParamId,
    pub w_g: ParamId,
    pub b_i: ParamId,
    pub b_f: ParamId,
    pub b_o: ParamId,
    pub b_g: ParamId,
}

impl LstmIds {
    fn create<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, hidden: usize, input: usize, rng: &mut Rng) -> Result<Self> {
        let (lo, hi) = (T::of(-LSTM_INIT), T::of(LSTM_INIT));
        let mut w = |name: &str, shape: &[usize], rng: &mut Rng| -> Result<ParamId> {
            params.insert(format!("{prefix}.{name}"), init_uniform(shape, lo, hi, rng)?)
        };
        let ws = [hidden, hidden + input];
        Ok(LstmIds {
            w_i: w("w_i", &ws, rng)?,
            w_f: w("w_f", &ws, rng)?,
            w_o: w("w_o", &ws, rng)?,
            w_g: w("w_g", &ws, rng)?,
            b_i: w("b_i", &[hidden], rng)?,
            b_f: w("b_f", &[hidden], rng)?,
            b_o: w("b_o", &[hidden], rng)?,
            b_g: w("b_g", &[hidden], rng)?,
        })
    }

    pub fn all(&self) -> [ParamId; 8] {
        [self.w_i, self.w_f, self.w_o, self.w_g, self.b_i, self.b_f, self.b_o, self.b_g]
    }

    /// Gate weights stacked as `[4H × (H + D_in)]` in i, f, o, g order plus
    /// the matching `[1 × 4H]` bias, built once per graph.
    fn stacked<T: Scalar>(&self, g: &mut Graph<'_, T>) -> (NodeId, NodeId) {
        let ws = [self.w_i, self.w_f, self.w_o, self.w_g].map(|p| g.param(p));
        let bs = [self.b_i, self.b_f, self.b_o, self.b_g].map(|p| g.param(p));
        (g.concat_rows(&ws), g.concat_cols(&bs))
    }
}

/// One filter width of the character CNN: weight `[n × D_c × w]`, bias `[n]`.
#[derive(Clone, Copy, Debug)]
pub struct FilterIds {
    pub width: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter handles of the whole encoder.
#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub arch: Architecture,
    pub char_emb: ParamId,
    pub filters: Vec<FilterIds>,
    pub word_emb: ParamId,
    pub fwd: LstmIds,
    pub bwd: LstmIds,
}

/// LSTM cell state entering or leaving a step.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

/// Per-position hidden states of both directions, as `1 × H` rows.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub forward: Vec<NodeId>,
    pub backward: Vec<NodeId>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// `[N × 2H]` matrix whose row `t` is `[→h_t, ←h_t]`.
    pub fn concat<T: Scalar>(&self, g: &mut Graph<'_, T>) -> NodeId {
        let f = g.concat_rows(&self.forward);
        let b = g.concat_rows(&self.backward);
        g.concat_cols(&[f, b])
    }
}

/// Dropout applied inside [`EncoderIds::encode`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutConfig {
    pub p: f64,
    pub training: bool,
}

impl DropoutConfig {
    pub const OFF: DropoutConfig = DropoutConfig { p: 0.0, training: false };

    pub fn train(p: f64) -> Self {
        DropoutConfig { p, training: true }
    }
}

impl EncoderIds {
    /// Registers `encoder.*` parameters. The word table is supplied by the
    /// caller (pretrained or random); everything else is initialized here.
    pub fn create<T: Scalar>(
        params: &mut ParamSet<T>,
        arch: &Architecture,
        char_table: EmbeddingTable<T>,
        word_table: EmbeddingTable<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        arch.validate()?;
        if char_table.dim() != arch.char_dim || word_table.dim() != arch.word_dim {
            return Err(Error::contract(format!(
                "embedding dims ({}, {}) do not match architecture ({}, {})",
                char_table.dim(),
                word_table.dim(),
                arch.char_dim,
                arch.word_dim
            )));
        }
        let char_emb = params.insert("encoder.char_emb", char_table.matrix)?;
        let mut filters = Vec::new();
        for (width, n) in arch.filter_bank() {
            let weight = params.insert(
                format!("encoder.cnn.w{width}.weight"),
                init_xavier(&[n, arch.char_dim, width], rng)?,
            )?;
            let bias = params.insert(format!("encoder.cnn.w{width}.bias"), Tensor::zeros([n]))?;
            filters.push(FilterIds { width, weight, bias });
        }
        let word_emb = params.insert("encoder.word_emb", word_table.matrix)?;
        let input = arch.lstm_input_dim();
        let fwd = LstmIds::create(params, "encoder.lstm_fwd", arch.hidden, input, rng)?;
        let bwd = LstmIds::create(params, "encoder.lstm_bwd", arch.hidden, input, rng)?;
        Ok(EncoderIds {
            arch: arch.clone(),
            char_emb,
            filters,
            word_emb,
            fwd,
            bwd,
        })
    }

    /// Looks up existing `encoder.*` parameters by name.
    pub fn bind<T: Scalar>(params: &ParamSet<T>, arch: &Architecture) -> Result<Self> {
        let id = |name: String| params.id(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")));
        let lstm = |prefix: &str| -> Result<LstmIds> {
            let p = |n: &str| id(format!("{prefix}.{n}"));
            Ok(LstmIds {
                w_i: p("w_i")?,
                w_f: p("w_f")?,
                w_o: p("w_o")?,
                w_g: p("w_g")?,
                b_i: p("b_i")?,
                b_f: p("b_f")?,
                b_o: p("b_o")?,
                b_g: p("b_g")?,
            })
        };
        let filters = arch
            .filter_bank()
            .into_iter()
            .map(|(width, _)| {
                Ok(FilterIds {
                    width,
                    weight: id(format!("encoder.cnn.w{width}.weight"))?,
                    bias: id(format!("encoder.cnn.w{width}.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderIds {
            arch: arch.clone(),
            char_emb: id("encoder.char_emb".into())?,
            filters,
            word_emb: id("encoder.word_emb".into())?,
            fwd: lstm("encoder.lstm_fwd")?,
            bwd: lstm("encoder.lstm_bwd")?,
        })
    }

    pub fn widest_filter(&self) -> usize {
        self.arch.max_filter_width
    }

    /// Character features of one padded word: for each width a stride-1
    /// valid convolution, the nonlinearity, and a max over positions, all
    /// concatenated in width order. Returns a `1 × F` row.
    pub fn char_cnn<T: Scalar>(&self, g: &mut Graph<'_, T>, padded_chars: &[usize]) -> NodeId {
        assert!(
            padded_chars.len() >= self.widest_filter(),
            "word must be padded to at least the widest filter"
        );
        let table = g.param(self.char_emb);
        let x = g.gather_rows(table, padded_chars, Some(PAD_ID));
        let pooled: Vec<NodeId> = self
            .filters
            .iter()
            .map(|f| {
                let w = g.param(f.weight);
                let b = g.param(f.bias);
                let windows = g.unfold(x, f.width);
                let z = g.matmul_nt(windows, w);
                let z = g.add_bias(z, b);
                let z = match self.arch.activation {
                    Activation::Relu => g.relu(z),
                    Activation::Tanh => g.tanh(z),
                };
                g.max_rows(z)
            })
            .collect();
        g.concat_cols(&pooled)
    }

    /// The six cell equations: input, forget and output gates, candidate,
    /// new cell, new hidden state. `x` is `1 × D_in`.
    pub fn lstm_step<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &LstmIds, x: NodeId, state: LstmState) -> LstmState {
        let (w, b) = ids.stacked(g);
        self.step_stacked(g, w, b, x, state)
    }

    fn step_stacked<T: Scalar>(&self, g: &mut Graph<'_, T>, w: NodeId, b: NodeId, x: NodeId, state: LstmState) -> LstmState {
        let h = self.arch.hidden;
        let z = g.concat_cols(&[state.h, x]);
        let a = g.matmul_nt(z, w);
        let a = g.add_bias(a, b);
        let i = g.slice_cols(a, 0, h);
        let i = g.sigmoid(i);
        let f = g.slice_cols(a, h, h);
        let f = g.sigmoid(f);
        let o = g.slice_cols(a, 2 * h, h);
        let o = g.sigmoid(o);
        let cand = g.slice_cols(a, 3 * h, h);
        let cand = g.tanh(cand);
        let keep = g.mul(f, state.c);
        let write = g.mul(i, cand);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        LstmState { h, c }
    }

    /// Runs one direction over `inputs` from zero initial state and returns
    /// the hidden state after each input.
    pub fn run_lstm<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &LstmIds, inputs: &[NodeId]) -> Vec<NodeId> {
        let (w, b) = ids.stacked(g);
        let h = self.arch.hidden;
        let mut state = LstmState {
            h: g.constant(1, h, vec![T::zero(); h]),
            c: g.constant(1, h, vec![T::zero(); h]),
        };
        inputs
            .iter()
            .map(|&x| {
                state = self.step_stacked(g, w, b, x, state);
                state.h
            })
            .collect()
    }

    /// Right-pads one word's character ids with PAD to `len + w_max - 1`, the
    /// shortest length at which every filter window touching the word exists.
    /// Features are then a function of the word alone, independent of batch.
    pub fn pad_word(&self, chars: &[usize]) -> Vec<usize> {
        let mut padded = chars.to_vec();
        padded.resize(chars.len().max(1) + self.widest_filter() - 1, PAD_ID);
        padded
    }

    /// LSTM inputs `x_t = [word embedding, char features]` as an `N × D_in`
    /// matrix (before dropout).
    pub fn inputs<T: Scalar>(&self, g: &mut Graph<'_, T>, sentence: &Sentence) -> NodeId {
        let words = g.param(self.word_emb);
        let emb = g.gather_rows(words, &sentence.word_ids, None);
        let chars: Vec<NodeId> = sentence
            .char_ids
            .iter()
            .map(|c| {
                let padded = self.pad_word(c);
                self.char_cnn(g, &padded)
            })
            .collect();
        let chars = g.concat_rows(&chars);
        g.concat_cols(&[emb, chars])
    }

    /// BiLSTM over a sentence. Dropout (when training) hits the input
    /// matrix and each direction's output states; recurrent states are left
    /// alone. The backward LSTM reads the sentence right to left, and its
    /// outputs are returned re-aligned to token positions.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        sentence: &Sentence,
        dropout: DropoutConfig,
        rng: &mut Rng,
    ) -> Encoded {
        let n = sentence.len();
        assert!(n > 0, "cannot encode an empty sentence");
        let x = self.inputs(g, sentence);
        let x = g.dropout(x, dropout.p, dropout.training, rng);
        let rows: Vec<NodeId> = (0..n).map(|t| g.slice_rows(x, t, 1)).collect();
        let forward = self.run_lstm(g, &self.fwd, &rows);
        let reversed: Vec<NodeId> = rows.iter().rev().copied().collect();
        let mut backward = self.run_lstm(g, &self.bwd, &reversed);
        backward.reverse();
        let mut drop = |hs: Vec<NodeId>, g: &mut Graph<'_, T>| -> Vec<NodeId> {
            hs.into_iter().map(|h| g.dropout(h, dropout.p, dropout.training, rng)).collect()
        };
        let forward = drop(forward, g);
        let backward = drop(backward, g);
        Encoded { forward, backward }
    }

    /// Inference-mode encoding to a plain `[N × 2H]` tensor.
    pub fn encode_tensor<T: Scalar>(&self, params: &ParamSet<T>, sentence: &Sentence) -> Tensor<T> {
        let mut g = Graph::new(params);
        let mut rng = crate::tensor::RngSeed(0).rng();
        let enc = self.encode(&mut g, sentence, DropoutConfig::OFF, &mut rng);
        let out = enc.concat(&mut g);
        g.to_tensor(out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.char_emb, self.word_emb];
        for f in &self.filters {
            v.push(f.weight);
            v.push(f.bias);
        }
        v.extend(self.fwd.all());
        v.extend(self.bwd.all());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CharVocab;
    use crate::embeddings::{char_table, random_word_table};
    use crate::corpus::WordVocab;
    use crate::gradcheck;
    use crate::tensor::RngSeed;
    use rand::Rng as _;

    pub(crate) fn tiny_arch() -> Architecture {
        Architecture {
            char_dim: 3,
            word_dim: 4,
            max_filter_width: 3,
            filters_per_width: 2,
            max_filters: 4,
            hidden: 3,
            activation: Activation::Relu,
        }
    }

    fn build(arch: &Architecture, seed: u64) -> (ParamSet<f64>, EncoderIds) {
        let mut rng = RngSeed(seed).rng();
        let cv = CharVocab::build(["abcdef"]);
        let wv = WordVocab::build(["x", "y", "z"], 1);
        let mut ps = ParamSet::new();
        let ct = char_table(&cv, arch.char_dim, &mut rng).unwrap();
        let wt = random_word_table(&wv, arch.word_dim, 0.5, &mut rng).unwrap();
        let ids = EncoderIds::create(&mut ps, arch, ct, wt, &mut rng).unwrap();
        // spread values so gradients are not vanishingly small
        for t in ps.tensors_mut() {
            for x in t.data_mut() {
                *x = rng.gen_range(-0.8..0.8);
            }
        }
        let pad = ps.id("encoder.char_emb").unwrap();
        ps.get_mut(pad).data_mut()[..arch.char_dim].fill(0.0);
        (ps, ids)
    }

    fn sentence(words: &[usize], chars: &[&[usize]]) -> Sentence {
        Sentence {
            tokens: words.iter().map(|w| w.to_string()).collect(),
            word_ids: words.to_vec(),
            char_ids: chars.iter().map(|c| c.to_vec()).collect(),
            tag_ids: None,
        }
    }

    #[test]
    fn published_filter_bank() {
        let a = Architecture::default();
        let counts: Vec<usize> = a.filter_bank().iter().map(|(_, n)| *n).collect();
        assert_eq!(counts, vec![50, 100, 150, 200, 200, 200, 200]);
        assert_eq!(a.char_feature_dim(), 1100);
        assert_eq!(a.lstm_input_dim(), 1400);
        assert_eq!(a.output_dim(), 512);
    }

    #[test]
    fn metadata_roundtrip_and_mismatch() {
        let a = Architecture::default();
        assert_eq!(Architecture::from_metadata(&a.to_metadata()).unwrap(), a);
        let mut b = a.clone();
        b.hidden = 128;
        let m = a.mismatches(&b);
        assert_eq!(m.len(), 1);
        assert!(m[0].starts_with("arch.hidden"));
    }

    #[test]
    fn zero_char_embeddings_give_zero_features() {
        let arch = tiny_arch();
        let (mut ps, ids) = build(&arch, 1);
        ps.get_mut(ids.char_emb).data_mut().fill(0.0);
        for f in &ids.filters {
            ps.get_mut(f.bias).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&ps);
        let out = ids.char_cnn(&mut g, &[2, 3, 0, 0]);
        assert_eq!(g.dims(out), (1, arch.char_feature_dim()));
        assert!(g.value(out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn width_one_selector_filter() {
        let arch = tiny_arch();
        let (mut ps, ids) = build(&arch, 2);
        // width-1 filter 0 selects embedding dim 1, zero bias
        let f = ids.filters[0];
        let w = ps.get_mut(f.weight).data_mut();
        w.fill(0.0);
        w[1] = 1.0;
        ps.get_mut(f.bias).data_mut().fill(0.0);
        let chars = [2usize, 4, 3];
        let emb = ps.get(ids.char_emb).clone();
        let expect = chars
            .iter()
            .map(|&c| emb.row(c)[1].max(0.0))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut g = Graph::new(&ps);
        let out = ids.char_cnn(&mut g, &chars);
        assert_eq!(g.value(out)[0], expect);
    }

    #[test]
    fn zero_lstm_cell() {
        let arch = tiny_arch();
        let (mut ps, ids) = build(&arch, 3);
        for p in ids.fwd.all() {
            ps.get_mut(p).data_mut().fill(0.0);
        }
        let d = arch.lstm_input_dim();
        let mut g = Graph::new(&ps);
        let x = g.constant(1, d, vec![0.37; d]);
        let z = g.constant(1, 3, vec![0.0; 3]);
        let s = ids.lstm_step(&mut g, &ids.fwd, x, LstmState { h: z, c: z });
        assert!(g.value(s.h).iter().chain(g.value(s.c)).all(|&v| v == 0.0));

        let one = g.constant(1, 3, vec![1.0; 3]);
        let s = ids.lstm_step(&mut g, &ids.fwd, x, LstmState { h: z, c: one });
        for (&c, &h) in g.value(s.c).iter().zip(g.value(s.h)) {
            assert!((c - 0.5).abs() < 1e-15);
            assert!((h - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Straight-line cell equations over plain vectors.
    fn reference_step(ps: &ParamSet<f64>, ids: &LstmIds, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hx: Vec<f64> = h.iter().chain(x).copied().collect();
        let gate = |w: ParamId, b: ParamId, r: usize| -> f64 {
            let w = ps.get(w);
            w.row(r).iter().zip(&hx).map(|(a, b)| a * b).sum::<f64>() + ps.get(b).data()[r]
        };
        let mut h2 = vec![0.0; h.len()];
        let mut c2 = vec![0.0; h.len()];
        for r in 0..h.len() {
            let i = sigmoid(gate(ids.w_i, ids.b_i, r));
            let f = sigmoid(gate(ids.w_f, ids.b_f, r));
            let o = sigmoid(gate(ids.w_o, ids.b_o, r));
            let g = gate(ids.w_g, ids.b_g, r).tanh();
            c2[r] = f * c[r] + i * g;
            h2[r] = o * c2[r].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn lstm_step_matches_reference() {
        let arch = tiny_arch();
        let (ps, ids) = build(&arch, 4);
        let mut rng = RngSeed(44).rng();
        let d = arch.lstm_input_dim();
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (rh, rc) = reference_step(&ps, &ids.bwd, &x, &h, &c);
        let mut g = Graph::new(&ps);
        let xn = g.constant(1, d, x);
        let hn = g.constant(1, 3, h);
        let cn = g.constant(1, 3, c);
        let s = ids.lstm_step(&mut g, &ids.bwd, xn, LstmState { h: hn, c: cn });
        for (a, b) in g.value(s.h).iter().zip(&rh).chain(g.value(s.c).iter().zip(&rc)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_shapes_and_single_token() {
        let arch = tiny_arch();
        let (ps, ids) = build(&arch, 5);
        let s = sentence(&[5], &[&[2, 3]]);
        let out = ids.encode_tensor(&ps, &s);
        assert_eq!(out.shape(), &[1, 6]);
        let s = sentence(&[5, 6, 7, 5], &[&[2], &[3, 4], &[5, 6, 2, 3], &[4]]);
        assert_eq!(ids.encode_tensor(&ps, &s).shape(), &[4, 6]);
    }

    fn tie_directions(ps: &mut ParamSet<f64>, ids: &EncoderIds) {
        for (f, b) in ids.fwd.all().into_iter().zip(ids.bwd.all()) {
            let v = ps.get(f).clone();
            ps.get_mut(b).data_mut().copy_from_slice(v.data());
        }
    }

    #[test]
    fn palindrome_with_tied_directions() {
        let arch = tiny_arch();
        let (mut ps, ids) = build(&arch, 6);
        tie_directions(&mut ps, &ids);
        let s = sentence(&[5, 6, 7, 6, 5], &[&[2], &[3, 4], &[5], &[3, 4], &[2]]);
        let out = ids.encode_tensor(&ps, &s);
        let h = arch.hidden;
        for t in 0..5 {
            let fwd = &out.row(t)[..h];
            let bwd = &out.row(4 - t)[h..];
            assert_eq!(fwd, bwd);
        }
    }

    #[test]
    fn reversal_swaps_directions() {
        let arch = tiny_arch();
        let (mut ps, ids) = build(&arch, 7);
        let s = sentence(&[5, 6, 7], &[&[2], &[3, 4], &[5, 6]]);
        let rev = sentence(&[7, 6, 5], &[&[5, 6], &[3, 4], &[2]]);
        let a = ids.encode_tensor(&ps, &s);
        for (f, b) in ids.fwd.all().into_iter().zip(ids.bwd.all()) {
            let fv = ps.get(f).clone();
            let bv = ps.get(b).clone();
            ps.get_mut(f).data_mut().copy_from_slice(bv.data());
            ps.get_mut(b).data_mut().copy_from_slice(fv.data());
        }
        let b = ids.encode_tensor(&ps, &rev);
        let h = arch.hidden;
        for t in 0..3 {
            assert_eq!(&a.row(t)[..h], &b.row(2 - t)[h..]);
            assert_eq!(&a.row(t)[h..], &b.row(2 - t)[..h]);
        }
    }

    #[test]
    fn padding_beyond_full_coverage_is_inert() {
        let arch = tiny_arch();
        let (ps, ids) = build(&arch, 8);
        let word = [2usize, 3];
        // every window that touches the word exists once the padded length
        // reaches len + widest - 1
        let full = word.len() + arch.max_filter_width - 1;
        let feats = |width: usize| {
            let mut padded = word.to_vec();
            padded.resize(width, PAD_ID);
            let mut g = Graph::new(&ps);
            let out = ids.char_cnn(&mut g, &padded);
            g.value(out).to_vec()
        };
        let base = feats(full);
        for extra in 1..6 {
            assert_eq!(feats(full + extra), base);
        }
    }

    #[test]
    fn dropout_off_is_deterministic() {
        let arch = tiny_arch();
        let (ps, ids) = build(&arch, 9);
        let s = sentence(&[5, 6], &[&[2], &[3, 4]]);
        assert_eq!(ids.encode_tensor(&ps, &s), ids.encode_tensor(&ps, &s));
    }

    #[test]
    fn encode_gradients() {
        let arch = tiny_arch();
        let (mut ps, ids) = build(&arch, 10);
        let s = sentence(&[5, 6, 7], &[&[2, 3], &[4], &[5, 6, 7]]);
        let dc = arch.char_dim;
        let pad_row = |name: &str, i: usize| !(name == "encoder.char_emb" && i / dc == PAD_ID);
        let r = gradcheck::check_where(&mut ps, 1e-4, None, pad_row, |g| {
            let mut rng = RngSeed(0).rng();
            let enc = ids.encode(g, &s, DropoutConfig::OFF, &mut rng);
            let h = enc.concat(g);
            let sq = g.mul(h, h);
            g.sum(sq)
        });
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn pad_row_receives_no_gradient() {
        let arch = tiny_arch();
        let (ps, ids) = build(&arch, 11);
        let s = sentence(&[5], &[&[2]]);
        let mut g = Graph::new(&ps);
        let mut rng = RngSeed(0).rng();
        let enc = ids.encode(&mut g, &s, DropoutConfig::OFF, &mut rng);
        let h = enc.concat(&mut g);
        let loss = g.sum(h);
        let grads = g.backward(loss).unwrap();
        let gc = grads.get(ids.char_emb).unwrap();
        assert!(gc[..arch.char_dim].iter().all(|&x| x == 0.0));
    }
}
