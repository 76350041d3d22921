//! The NER model, weight transfer from a pretrained BiLM, and fine-tuning.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilm::DECODER_PREFIX as LM_DECODER_PREFIX;
use crate::checkpoint::Checkpoint;
use crate::corpus::{batch_by_word_budget, Sentence, TagDict};
use crate::embeddings::EmbeddingTable;
use crate::encoder::{Architecture, DropoutConfig, EncoderIds};
use crate::error::{Error, Result};
use crate::eval::{chunk_confidence, exact_match_prf, extract_chunks, pr_points, EvalReport, PrPoint, ScoredChunk, ScoredSentence};
use crate::ner_head::{argmax_rows, softmax_rows, word_nll, CrfIds, CrfParams, DecoderIds, Head};
use crate::scalar::Scalar;
use crate::schedule::{apply_update, Goal, Plateau, Verdict};
use crate::tensor::{AdamConfig, AdamState, Graph, NodeId, ParamSet, Rng, RngSeed, Tensor};

pub const DECODER_PREFIX: &str = "ner.decoder";

/// Which parts of the encoder come from the language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PretrainMode {
    /// Only the supplied word embeddings; everything else random.
    #[serde(rename = "none")]
    None,
    /// Embeddings, char CNN and the forward LSTM.
    #[serde(rename = "fwd")]
    ForwardOnly,
    /// Embeddings, char CNN and the backward LSTM.
    #[serde(rename = "bwd")]
    BackwardOnly,
    /// The whole encoder.
    #[serde(rename = "bilm")]
    BiLm,
}

impl PretrainMode {
    pub const ALL: [PretrainMode; 4] = [
        PretrainMode::None,
        PretrainMode::ForwardOnly,
        PretrainMode::BackwardOnly,
        PretrainMode::BiLm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PretrainMode::None => "none",
            PretrainMode::ForwardOnly => "fwd",
            PretrainMode::BackwardOnly => "bwd",
            PretrainMode::BiLm => "bilm",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        self != PretrainMode::None
    }

    /// Whether a parameter of this name is copied from the checkpoint.
    pub fn transfers(self, name: &str) -> bool {
        let shared = name == "encoder.char_emb" || name == "encoder.word_emb" || name.starts_with("encoder.cnn.");
        match self {
            PretrainMode::None => false,
            PretrainMode::ForwardOnly => shared || name.starts_with("encoder.lstm_fwd."),
            PretrainMode::BackwardOnly => shared || name.starts_with("encoder.lstm_bwd."),
            PretrainMode::BiLm => name.starts_with("encoder."),
        }
    }
}

impl fmt::Display for PretrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PretrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown pretrain mode `{s}` (expected none, fwd, bwd or bilm)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub word_budget: usize,
    pub clip_norm: f64,
    pub dropout: f64,
    pub adam: AdamConfig,
    pub lr_decay: f64,
    pub patience: usize,
    pub seed: u64,
    /// After model selection, train again from the same initialization on
    /// train + dev for the selected number of epochs.
    pub retrain_on_dev: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            word_budget: 1000,
            clip_norm: 1.0,
            dropout: 0.5,
            adam: AdamConfig::default(),
            lr_decay: 0.5,
            patience: 3,
            seed: 1,
            retrain_on_dev: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.word_budget == 0 || self.patience == 0 {
            return Err(Error::contract("train config: epochs, word_budget and patience must be positive"));
        }
        if !(self.clip_norm > 0.0) || !(self.adam.lr >= 0.0) {
            return Err(Error::contract("train config: clip_norm must be positive and lr non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract("train config: dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Encoder, tag decoder `[T × 2H]`, and (for the CRF head) transitions.
#[derive(Clone, Debug)]
pub struct NerModel<T> {
    pub params: ParamSet<T>,
    pub encoder: EncoderIds,
    pub decoder: DecoderIds,
    pub crf: Option<CrfIds>,
    pub head: Head,
}

impl<T: Scalar> NerModel<T> {
    /// Fresh model: Xavier for the CNN and decoder, uniform LSTMs, zero CRF
    /// scores, and the supplied embedding tables.
    pub fn new(
        arch: &Architecture,
        char_table: EmbeddingTable<T>,
        word_table: EmbeddingTable<T>,
        num_tags: usize,
        head: Head,
        crf_boundaries: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_tags == 0 {
            return Err(Error::contract("tag dictionary is empty"));
        }
        let mut params = ParamSet::new();
        let encoder = EncoderIds::create(&mut params, arch, char_table, word_table, rng)?;
        let decoder = DecoderIds::create(&mut params, DECODER_PREFIX, num_tags, arch.output_dim(), rng)?;
        let crf = match head {
            Head::Crf => Some(CrfIds::create(&mut params, num_tags, crf_boundaries)?),
            Head::Softmax => None,
        };
        Ok(NerModel {
            params,
            encoder,
            decoder,
            crf,
            head,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.encoder.arch
    }

    pub fn num_tags(&self) -> usize {
        self.params.get(self.decoder.weight).rows()
    }

    /// `[N × T]` tag scores.
    pub fn emissions(&self, g: &mut Graph<'_, T>, s: &Sentence, dropout: DropoutConfig, rng: &mut Rng) -> NodeId {
        let enc = self.encoder.encode(g, s, dropout, rng);
        let h = enc.concat(g);
        self.decoder.logits(g, h)
    }

    /// Emission matrix with dropout off.
    pub fn emission_tensor(&self, s: &Sentence) -> Tensor<T> {
        let mut g = Graph::new(&self.params);
        let mut rng = RngSeed(0).rng();
        let d = self.emissions(&mut g, s, DropoutConfig::OFF, &mut rng);
        g.to_tensor(d)
    }

    fn gold<'s>(&self, s: &'s Sentence) -> Result<&'s [usize]> {
        let tags = s
            .tag_ids
            .as_deref()
            .ok_or_else(|| Error::Data("training sentence has no tags".into()))?;
        if let Some(&bad) = tags.iter().find(|&&t| t >= self.num_tags()) {
            return Err(Error::Data(format!(
                "tag id {bad} outside the model's {} tags",
                self.num_tags()
            )));
        }
        Ok(tags)
    }

    /// Batch objective: mean sentence NLL for the CRF head, mean token
    /// cross-entropy for the softmax head.
    pub fn batch_loss(&self, g: &mut Graph<'_, T>, batch: &[&Sentence], dropout: DropoutConfig, rng: &mut Rng) -> Result<NodeId> {
        match self.crf {
            Some(crf) => {
                let mut nll = Vec::with_capacity(batch.len());
                for s in batch {
                    let gold = self.gold(s)?;
                    let d = self.emissions(g, s, dropout, rng);
                    nll.push(crf.nll(g, d, gold));
                }
                let all = g.concat_cols(&nll);
                let total = g.sum(all);
                Ok(g.scale(total, T::of(1.0 / batch.len() as f64)))
            }
            None => {
                let mut ds = Vec::with_capacity(batch.len());
                let mut golds = Vec::new();
                for s in batch {
                    golds.extend_from_slice(self.gold(s)?);
                    ds.push(self.emissions(g, s, dropout, rng));
                }
                let d = g.concat_rows(&ds);
                Ok(word_nll(g, d, &golds))
            }
        }
    }

    /// Viterbi path (CRF head) or per-token argmax (softmax head).
    pub fn predict(&self, s: &Sentence) -> Vec<usize> {
        let d = self.emission_tensor(s);
        match self.crf {
            Some(ids) => CrfParams::from_params(&self.params, &ids).viterbi(&d).0,
            None => argmax_rows(&d),
        }
    }

    pub fn predict_all(&self, data: &[Sentence]) -> Vec<Vec<usize>> {
        data.par_iter().map(|s| self.predict(s)).collect()
    }

    pub fn predict_tags(&self, data: &[Sentence], tags: &TagDict) -> Vec<Vec<String>> {
        self.predict_all(data)
            .into_iter()
            .map(|p| p.into_iter().map(|t| tags.tag(t).to_string()).collect())
            .collect()
    }

    fn check_tags(&self, tags: &TagDict) -> Result<()> {
        if tags.len() != self.num_tags() {
            return Err(Error::Data(format!(
                "tag dictionary has {} tags but the model was built for {}",
                tags.len(),
                self.num_tags()
            )));
        }
        Ok(())
    }

    /// Exact-match chunk scores of the decoded output against gold tags.
    pub fn evaluate(&self, data: &[Sentence], tags: &TagDict) -> Result<EvalReport> {
        self.check_tags(tags)?;
        let gold = gold_strings(data, tags)?;
        exact_match_prf(&gold, &self.predict_tags(data, tags))
    }

    /// Decoded chunks with confidences: the geometric mean over the chunk of
    /// each token's posterior for its decoded tag (CRF marginals, or softmax
    /// probabilities for the softmax head).
    pub fn scored(&self, data: &[Sentence], tags: &TagDict) -> Result<Vec<ScoredSentence>> {
        self.check_tags(tags)?;
        let gold = gold_strings(data, tags)?;
        let n_tags = self.num_tags();
        Ok(data
            .par_iter()
            .zip(gold)
            .map(|(s, gold)| {
                let d = self.emission_tensor(s);
                let (path, probs) = match self.crf {
                    Some(ids) => {
                        let crf = CrfParams::from_params(&self.params, &ids);
                        (crf.viterbi(&d).0, crf.marginals(&d))
                    }
                    None => (argmax_rows(&d), softmax_rows(&d)),
                };
                let probs: Vec<f64> = probs.data().iter().map(|x| x.as_f64()).collect();
                let pred: Vec<&str> = path.iter().map(|&t| tags.tag(t)).collect();
                let predicted = extract_chunks(&pred)
                    .0
                    .into_iter()
                    .map(|chunk| ScoredChunk {
                        confidence: chunk_confidence(&chunk, &path, &probs, n_tags),
                        chunk,
                    })
                    .collect();
                ScoredSentence {
                    gold: extract_chunks(&gold).0,
                    predicted,
                }
            })
            .collect())
    }

    /// Precision/recall at each confidence threshold.
    pub fn pr_curve(&self, data: &[Sentence], tags: &TagDict, thresholds: &[f64]) -> Result<Vec<PrPoint>> {
        Ok(pr_points(&self.scored(data, tags)?, thresholds))
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = self.arch().to_metadata();
        m.insert("model".into(), "ner".into());
        m.insert("head".into(), self.head.as_str().into());
        m.insert("tags".into(), self.num_tags().to_string());
        m.insert(
            "crf.boundaries".into(),
            self.crf.is_some_and(|c| c.boundaries.is_some()).to_string(),
        );
        m
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params, self.metadata())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("model") != Some("ner") {
            return Err(Error::Checkpoint("not an NER model checkpoint".into()));
        }
        let arch = Architecture::from_metadata(&ck.metadata)?;
        let head = match ck.meta("head") {
            Some("crf") => Head::Crf,
            Some("softmax") => Head::Softmax,
            other => return Err(Error::Checkpoint(format!("bad head {other:?}"))),
        };
        let mut params = ParamSet::new();
        for (name, t) in ck.entries() {
            params.insert(name, t.cast())?;
        }
        let encoder = EncoderIds::bind(&params, &arch)?;
        let id = |n: &str| params.id(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{n}`")));
        let decoder = DecoderIds {
            weight: id("ner.decoder.weight")?,
            bias: id("ner.decoder.bias")?,
        };
        let crf = match head {
            Head::Softmax => None,
            Head::Crf => Some(CrfIds {
                transitions: id("crf.transitions")?,
                boundaries: match (params.id("crf.start"), params.id("crf.stop")) {
                    (Some(s), Some(e)) => Some((s, e)),
                    _ => None,
                },
            }),
        };
        Ok(NerModel {
            params,
            encoder,
            decoder,
            crf,
            head,
        })
    }
}

fn gold_strings(data: &[Sentence], tags: &TagDict) -> Result<Vec<Vec<String>>> {
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            let ids = s
                .tag_ids
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sentence {i} has no gold tags")))?;
            Ok(ids.iter().map(|&t| tags.tag(t).to_string()).collect())
        })
        .collect()
}

/// Copies the encoder parts selected by `mode` from a BiLM checkpoint into
/// `model`. Decoder and CRF parameters keep their fresh initialization and
/// `lm_decoder.*` entries are never read. Returns the copied names.
pub fn transfer_weights<T: Scalar>(model: &mut NerModel<T>, ck: &Checkpoint, mode: PretrainMode) -> Result<Vec<String>> {
    if mode == PretrainMode::None {
        return Ok(Vec::new());
    }
    let lm_arch = Architecture::from_metadata(&ck.metadata)?;
    let mut mismatches = model.arch().mismatches(&lm_arch);
    let names: Vec<String> = model.params.names().filter(|n| mode.transfers(n)).map(String::from).collect();
    for name in &names {
        let want = model.params.by_name(name).expect("own name").shape();
        match ck.get(name) {
            None => mismatches.push(format!("{name}: missing from checkpoint")),
            Some(t) if t.shape() != want => mismatches.push(format!("{name}: {:?} vs {:?}", want, t.shape())),
            Some(_) => {}
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::ArchitectureMismatch(mismatches));
    }
    for name in &names {
        debug_assert!(!name.starts_with(LM_DECODER_PREFIX));
        let t = ck.get(name).expect("checked above").cast::<T>();
        model.params.assign(name, &t)?;
    }
    Ok(names)
}

/// Builds a fresh NER model and applies [`transfer_weights`] for `mode`.
#[allow(clippy::too_many_arguments)]
pub fn init_ner_model<T: Scalar>(
    arch: &Architecture,
    char_table: EmbeddingTable<T>,
    word_table: EmbeddingTable<T>,
    num_tags: usize,
    head: Head,
    crf_boundaries: bool,
    lm: Option<&Checkpoint>,
    mode: PretrainMode,
    rng: &mut Rng,
) -> Result<NerModel<T>> {
    let mut model = NerModel::new(arch, char_table, word_table, num_tags, head, crf_boundaries, rng)?;
    match (mode.needs_checkpoint(), lm) {
        (false, _) => {}
        (true, None) => {
            return Err(Error::contract(format!("pretrain mode `{mode}` needs a language-model checkpoint")))
        }
        (true, Some(ck)) => {
            transfer_weights(&mut model, ck, mode)?;
        }
    }
    Ok(model)
}

/// One line of the NER metrics history.
#[derive(Clone, Debug, PartialEq)]
pub struct NerEpochRecord {
    pub epoch: usize,
    pub seconds: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_precision: f64,
    pub dev_recall: f64,
    pub dev_f1: f64,
    pub improved: bool,
}

impl NerEpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} seconds={:.3} lr={:.6e} train_loss={:.6} dev_precision={:.6} dev_recall={:.6} dev_f1={:.6} improved={}",
            self.epoch,
            self.seconds,
            self.lr,
            self.train_loss,
            self.dev_precision,
            self.dev_recall,
            self.dev_f1,
            self.improved
        )
    }
}

#[derive(Clone, Debug)]
pub struct NerReport {
    pub history: Vec<NerEpochRecord>,
    pub best_epoch: usize,
    pub best_f1: f64,
    pub stopped_early: bool,
}

impl NerReport {
    /// First epoch whose dev F1 reached `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.history.iter().find(|r| r.dev_f1 >= threshold).map(|r| r.epoch)
    }
}

fn run_epoch<T: Scalar>(
    model: &mut NerModel<T>,
    data: &[Sentence],
    cfg: &TrainConfig,
    adam: &mut AdamState<T>,
    batch_rng: &mut Rng,
    dropout_rng: &mut Rng,
) -> Result<f64> {
    let lengths: Vec<usize> = data.iter().map(Sentence::len).collect();
    let batches = batch_by_word_budget(&lengths, cfg.word_budget, Some(batch_rng))?;
    let mut total = 0.0;
    for b in &batches {
        let sents: Vec<&Sentence> = b.iter().map(|&i| &data[i]).collect();
        let (grads, loss) = {
            let mut g = Graph::new(&model.params);
            let loss = model.batch_loss(&mut g, &sents, DropoutConfig::train(cfg.dropout), dropout_rng)?;
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric { op: "ner loss" });
            }
            (g.backward(loss)?, value)
        };
        apply_update(&mut model.params, adam, &grads, cfg.clip_norm)?;
        total += loss;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Fine-tunes with dev-F1 model selection: a non-improving epoch scales the
/// lr by `lr_decay`, and `patience` of them in a row stop training. On
/// return `model` holds the best-dev parameters.
pub fn train_ner<T: Scalar>(
    model: &mut NerModel<T>,
    train: &[Sentence],
    dev: &[Sentence],
    tags: &TagDict,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&NerEpochRecord),
) -> Result<NerReport> {
    cfg.validate()?;
    model.check_tags(tags)?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Data("training and development sets must be non-empty".into()));
    }
    let seed = RngSeed(cfg.seed);
    let mut adam = AdamState::new(&model.params, cfg.adam);
    let mut plateau = Plateau::new(Goal::Maximize, cfg.patience);
    let mut batch_rng = seed.derive(11);
    let mut dropout_rng = seed.derive(12);
    let mut best = model.params.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let lr = adam.lr();
        let train_loss = run_epoch(model, train, cfg, &mut adam, &mut batch_rng, &mut dropout_rng)?;
        let report = model.evaluate(dev, tags)?;
        let verdict = plateau.observe(epoch, report.f1);
        let record = NerEpochRecord {
            epoch,
            seconds: start.elapsed().as_secs_f64(),
            lr,
            train_loss,
            dev_precision: report.precision,
            dev_recall: report.recall,
            dev_f1: report.f1,
            improved: verdict == Verdict::Improved,
        };
        log::info!("ner {}", record.to_line());
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
    Ok(NerReport {
        best_epoch: plateau.best_epoch(),
        best_f1: plateau.best().unwrap_or(0.0),
        history,
        stopped_early,
    })
}

/// Trains `model` on `data` replaying a learning-rate schedule, one epoch
/// per entry, with no model selection. Used for the final train + dev run.
pub fn train_with_schedule<T: Scalar>(model: &mut NerModel<T>, data: &[Sentence], cfg: &TrainConfig, lrs: &[f64]) -> Result<Vec<f64>> {
    cfg.validate()?;
    let seed = RngSeed(cfg.seed);
    let mut adam = AdamState::new(&model.params, cfg.adam);
    let mut batch_rng = seed.derive(21);
    let mut dropout_rng = seed.derive(22);
    lrs.iter()
        .map(|&lr| {
            adam.set_lr(lr);
            run_epoch(model, data, cfg, &mut adam, &mut batch_rng, &mut dropout_rng)
        })
        .collect()
}
