//! Forward, backward and joint word-level language models over the shared
//! encoder, with perplexity and the pretraining loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{batch_by_word_budget, Sentence, BOS_ID, EOS_ID};
use crate::embeddings::EmbeddingTable;
use crate::encoder::{Architecture, DropoutConfig, EncoderIds};
use crate::error::{Error, Result};
use crate::ner_head::DecoderIds;
use crate::scalar::Scalar;
use crate::schedule::{apply_update, Goal, Plateau, Verdict};
use crate::tensor::{AdamConfig, AdamState, Graph, NodeId, ParamSet, Rng, RngSeed};

pub const DECODER_PREFIX: &str = "lm_decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub epochs: usize,
    pub word_budget: usize,
    pub clip_norm: f64,
    pub dropout: f64,
    /// Weight on each direction's loss; 0.5 makes the joint loss the mean.
    pub lambda: f64,
    pub adam: AdamConfig,
    pub lr_decay: f64,
    pub patience: usize,
    /// Share of sentences held out for the perplexity that drives the
    /// schedule. When it rounds to zero sentences the training set is used.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            epochs: 20,
            word_budget: 500,
            clip_norm: 1.0,
            dropout: 0.5,
            lambda: 0.5,
            adam: AdamConfig::default(),
            lr_decay: 0.5,
            patience: 3,
            heldout_fraction: 0.05,
            seed: 1,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::contract(format!("lm config: {what}")));
        if self.epochs == 0 || self.word_budget == 0 || self.patience == 0 {
            return bad("epochs, word_budget and patience must be positive");
        }
        if !(self.lambda > 0.0) || !(self.clip_norm > 0.0) {
            return bad("lambda and clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.heldout_fraction) {
            return bad("dropout and heldout_fraction must lie in [0, 1)");
        }
        if !(self.adam.lr >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        Ok(())
    }
}

/// Summed cross-entropy and number of predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CeSum {
    pub total: f64,
    pub count: usize,
}

impl CeSum {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total / self.count as f64
        }
    }

    pub fn perplexity(&self) -> f64 {
        self.mean().exp()
    }

    fn add(self, other: CeSum) -> CeSum {
        CeSum {
            total: self.total + other.total,
            count: self.count + other.count,
        }
    }
}

/// Encoder plus the `[V × H]` decoder shared by both directions.
#[derive(Clone, Debug)]
pub struct BiLm<T> {
    pub params: ParamSet<T>,
    pub encoder: EncoderIds,
    pub decoder: DecoderIds,
}

/// Targets of the forward model: each word predicts its successor, the last
/// one predicts EOS.
pub fn forward_targets(word_ids: &[usize]) -> Vec<usize> {
    word_ids[1..].iter().copied().chain([EOS_ID]).collect()
}

/// Targets of the backward model, aligned to token positions: the state at
/// `t` (having read `w_n..w_t`) predicts `w_{t-1}`, and position 0 predicts
/// BOS.
pub fn backward_targets(word_ids: &[usize]) -> Vec<usize> {
    [BOS_ID].into_iter().chain(word_ids[..word_ids.len() - 1].iter().copied()).collect()
}

/// Loss nodes for a batch: summed cross-entropy per direction.
struct BatchLoss {
    fwd: NodeId,
    bwd: NodeId,
    count: usize,
}

impl<T: Scalar> BiLm<T> {
    pub fn new(
        arch: &Architecture,
        char_table: EmbeddingTable<T>,
        word_table: EmbeddingTable<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let vocab = word_table.rows();
        let mut params = ParamSet::new();
        let encoder = EncoderIds::create(&mut params, arch, char_table, word_table, rng)?;
        let decoder = DecoderIds::create(&mut params, DECODER_PREFIX, vocab, arch.hidden, rng)?;
        Ok(BiLm { params, encoder, decoder })
    }

    pub fn arch(&self) -> &Architecture {
        &self.encoder.arch
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get(self.decoder.weight).rows()
    }

    /// Builds both directions' summed losses for `sentences` into `g`.
    fn batch_loss(
        &self,
        g: &mut Graph<'_, T>,
        sentences: &[&Sentence],
        dropout: DropoutConfig,
        rng: &mut Rng,
    ) -> BatchLoss {
        let mut fwd_states = Vec::new();
        let mut bwd_states = Vec::new();
        let mut fwd_targets = Vec::new();
        let mut bwd_targets = Vec::new();
        for s in sentences {
            let enc = self.encoder.encode(g, s, dropout, rng);
            fwd_states.extend(enc.forward);
            bwd_states.extend(enc.backward);
            fwd_targets.extend(forward_targets(&s.word_ids));
            bwd_targets.extend(backward_targets(&s.word_ids));
        }
        let hf = g.concat_rows(&fwd_states);
        let hb = g.concat_rows(&bwd_states);
        let lf = self.decoder.logits(g, hf);
        let lb = self.decoder.logits(g, hb);
        BatchLoss {
            fwd: g.softmax_cross_entropy(lf, &fwd_targets),
            bwd: g.softmax_cross_entropy(lb, &bwd_targets),
            count: fwd_targets.len(),
        }
    }

    /// Mean per-token forward cross-entropy of one sentence (dropout off).
    pub fn lm_forward_loss(&self, sentence: &Sentence) -> f64 {
        self.sentence_ce(sentence).0.mean()
    }

    /// Mean per-token backward cross-entropy of one sentence (dropout off).
    pub fn lm_backward_loss(&self, sentence: &Sentence) -> f64 {
        self.sentence_ce(sentence).1.mean()
    }

    fn sentence_ce(&self, sentence: &Sentence) -> (CeSum, CeSum) {
        let mut g = Graph::new(&self.params);
        let mut rng = RngSeed(0).rng();
        let l = self.batch_loss(&mut g, &[sentence], DropoutConfig::OFF, &mut rng);
        let sum = |n| CeSum {
            total: g.scalar(n).as_f64(),
            count: l.count,
        };
        (sum(l.fwd), sum(l.bwd))
    }

    /// Summed cross-entropy of each direction over a corpus. Sentences are
    /// scored independently, so the result does not depend on order or
    /// batching beyond float summation order, which is fixed here.
    pub fn corpus_ce(&self, corpus: &[Sentence]) -> (CeSum, CeSum) {
        let per: Vec<(CeSum, CeSum)> = corpus.par_iter().map(|s| self.sentence_ce(s)).collect();
        per.into_iter()
            .fold((CeSum::default(), CeSum::default()), |(f, b), (sf, sb)| (f.add(sf), b.add(sb)))
    }

    /// `(ppl_fwd, ppl_bwd)`: exp of mean per-token cross-entropy.
    pub fn perplexity(&self, corpus: &[Sentence]) -> (f64, f64) {
        let (f, b) = self.corpus_ce(corpus);
        (f.perplexity(), b.perplexity())
    }

    /// One joint update on `batch`: `λ·(mean fwd CE + mean bwd CE)`, one
    /// backward pass, clipping and an Adam step. Returns (joint, fwd, bwd)
    /// mean losses.
    pub fn bilm_joint_step(
        &mut self,
        batch: &[&Sentence],
        cfg: &LmConfig,
        adam: &mut AdamState<T>,
        rng: &mut Rng,
    ) -> Result<(f64, f64, f64)> {
        let (grads, fwd, bwd, joint) = {
            let mut g = Graph::new(&self.params);
            let l = self.batch_loss(&mut g, batch, DropoutConfig::train(cfg.dropout), rng);
            let both = g.add(l.fwd, l.bwd);
            let joint = g.scale(both, T::of(cfg.lambda / l.count as f64));
            let n = l.count as f64;
            let fwd = g.scalar(l.fwd).as_f64() / n;
            let bwd = g.scalar(l.bwd).as_f64() / n;
            let value = g.scalar(joint).as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric { op: "lm joint loss" });
            }
            (g.backward(joint)?, fwd, bwd, value)
        };
        apply_update(&mut self.params, adam, &grads, cfg.clip_norm)?;
        Ok((joint, fwd, bwd))
    }

    /// Metadata describing this model, stored with its checkpoint.
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = self.arch().to_metadata();
        m.insert("model".into(), "bilm".into());
        m.insert("word_vocab".into(), self.vocab_size().to_string());
        m.insert("char_vocab".into(), self.params.get(self.encoder.char_emb).rows().to_string());
        m
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params, self.metadata())
    }

    /// Rebuilds a model from a checkpoint written by [`BiLm::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = Architecture::from_metadata(&ck.metadata)?;
        let mut params = ParamSet::new();
        for (name, t) in ck.entries() {
            params.insert(name, t.cast())?;
        }
        let encoder = EncoderIds::bind(&params, &arch)?;
        let id = |n: &str| params.id(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{n}`")));
        let decoder = DecoderIds {
            weight: id("lm_decoder.weight")?,
            bias: id("lm_decoder.bias")?,
        };
        Ok(BiLm { params, encoder, decoder })
    }
}

/// One line of the pretraining log.
#[derive(Clone, Debug, PartialEq)]
pub struct LmEpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_fwd: f64,
    pub train_bwd: f64,
    pub ppl_fwd: f64,
    pub ppl_bwd: f64,
    pub improved: bool,
    pub seconds: f64,
}

impl LmEpochRecord {
    /// Mean of the two directions; the early-stopping metric.
    pub fn ppl(&self) -> f64 {
        0.5 * (self.ppl_fwd + self.ppl_bwd)
    }

    pub fn to_line(&self) -> String {
        format!(
            "epoch={} lr={:.6e} fwd_loss={:.6} bwd_loss={:.6} ppl_fwd={:.6} ppl_bwd={:.6} ppl={:.6} improved={} seconds={:.3}",
            self.epoch,
            self.lr,
            self.train_fwd,
            self.train_bwd,
            self.ppl_fwd,
            self.ppl_bwd,
            self.ppl(),
            self.improved,
            self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct LmReport {
    pub history: Vec<LmEpochRecord>,
    pub best_epoch: usize,
    pub best_ppl: f64,
    pub stopped_early: bool,
}

/// Splits `n` sentences into (train, held-out) index lists. The held-out
/// part is `floor(fraction·n)` sentences picked by `seed`; when that is zero
/// the full corpus serves as both.
pub fn heldout_split(n: usize, fraction: f64, seed: RngSeed) -> (Vec<usize>, Vec<usize>) {
    let k = (fraction * n as f64).floor() as usize;
    if k == 0 || k >= n {
        let all: Vec<usize> = (0..n).collect();
        return (all.clone(), all);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.derive(0x4845_4c44));
    let mut held = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    (train, held)
}

/// Joint training with lr decay on plateau and early stopping. On return
/// `model` holds the parameters of the best held-out epoch. `on_epoch` sees
/// every record as it is produced.
pub fn train_bilm<T: Scalar>(
    model: &mut BiLm<T>,
    corpus: &[Sentence],
    cfg: &LmConfig,
    mut on_epoch: impl FnMut(&LmEpochRecord),
) -> Result<LmReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("language-model corpus is empty".into()));
    }
    let seed = RngSeed(cfg.seed);
    let (train_idx, held_idx) = heldout_split(corpus.len(), cfg.heldout_fraction, seed);
    let held: Vec<Sentence> = held_idx.iter().map(|&i| corpus[i].clone()).collect();
    let lengths: Vec<usize> = train_idx.iter().map(|&i| corpus[i].len()).collect();

    let mut adam = AdamState::new(&model.params, cfg.adam);
    let mut plateau = Plateau::new(Goal::Minimize, cfg.patience);
    let mut batch_rng = seed.derive(1);
    let mut dropout_rng = seed.derive(2);
    let mut best = model.params.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = adam.lr();
        let batches = batch_by_word_budget(&lengths, cfg.word_budget, Some(&mut batch_rng))?;
        let (mut fwd_sum, mut bwd_sum, mut steps) = (0.0, 0.0, 0usize);
        for b in &batches {
            let sents: Vec<&Sentence> = b.iter().map(|&i| &corpus[train_idx[i]]).collect();
            let (_, f, bw) = model.bilm_joint_step(&sents, cfg, &mut adam, &mut dropout_rng)?;
            fwd_sum += f;
            bwd_sum += bw;
            steps += 1;
        }
        let (ppl_fwd, ppl_bwd) = model.perplexity(&held);
        let mut record = LmEpochRecord {
            epoch,
            lr,
            train_fwd: fwd_sum / steps as f64,
            train_bwd: bwd_sum / steps as f64,
            ppl_fwd,
            ppl_bwd,
            improved: false,
            seconds: start.elapsed().as_secs_f64(),
        };
        if !record.ppl().is_finite() {
            return Err(Error::Numeric { op: "held-out perplexity" });
        }
        let verdict = plateau.observe(epoch, record.ppl());
        record.improved = verdict == Verdict::Improved;
        log::info!("bilm {}", record.to_line());
        on_epoch(&record);
        history.push(record);
        match verdict {
            Verdict::Improved => best = model.params.clone(),
            Verdict::Plateau { stop } => {
                adam.set_lr(adam.lr() * cfg.lr_decay);
                if stop {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    model.params = best;
    Ok(LmReport {
        best_epoch: plateau.best_epoch(),
        best_ppl: plateau.best().unwrap_or(f64::NAN),
        history,
        stopped_early,
    })
}
