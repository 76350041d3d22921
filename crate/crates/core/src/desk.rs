//! Small end-to-end experiments on the synthetic corpus: pretraining,
//! fine-tuning under each pretraining mode, convergence and learning
//! curves. Everything is a pure function of the configs and seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilm::{train_bilm, BiLm, LmConfig, LmReport};
use crate::checkpoint::Checkpoint;
use crate::corpus::{CorpusConfig, RawSentence, Sentence, Vocabularies};
use crate::embeddings::{char_table, random_word_table, EmbeddingTable, OOV_RANGE};
use crate::encoder::{Activation, Architecture};
use crate::error::Result;
use crate::eval::{subsample, unseen_entity_report, EvalReport, UnseenReport};
use crate::ner_head::Head;
use crate::synth::{generate, SynthConfig};
use crate::tensor::RngSeed;
use crate::transfer::{init_ner_model, train_ner, NerModel, NerReport, PretrainMode, TrainConfig};

/// Reduced layer sizes that train in seconds on one CPU core.
pub fn desk_architecture() -> Architecture {
    Architecture {
        char_dim: 16,
        word_dim: 32,
        max_filter_width: 4,
        filters_per_width: 8,
        max_filters: 24,
        hidden: 48,
        activation: Activation::Relu,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskProtocol {
    pub synth: SynthConfig,
    pub arch: Architecture,
    pub lm: LmConfig,
    pub ner: TrainConfig,
    pub head: Head,
    pub seeds: Vec<u64>,
    /// Dev F1 that counts as "converged" when comparing modes.
    pub threshold: f64,
    /// Uniform range of the stand-in pretrained word vectors.
    pub word_range: f64,
}

impl Default for DeskProtocol {
    fn default() -> Self {
        DeskProtocol {
            synth: SynthConfig {
                unlabeled: 600,
                ..SynthConfig::default()
            },
            arch: desk_architecture(),
            lm: LmConfig {
                epochs: 20,
                word_budget: 100,
                ..LmConfig::default()
            },
            ner: TrainConfig {
                epochs: 30,
                word_budget: 100,
                retrain_on_dev: false,
                ..TrainConfig::default()
            },
            head: Head::Crf,
            seeds: vec![11, 12, 13],
            threshold: 0.90,
            word_range: OOV_RANGE,
        }
    }
}

/// Indexed splits plus the vocabularies shared by LM and tagger.
#[derive(Clone, Debug)]
pub struct DeskData {
    pub vocab: Vocabularies,
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
    /// Train, dev and the unlabeled split as plain text for the language
    /// model.
    pub lm_corpus: Vec<Sentence>,
    pub word_range: f64,
}

pub fn prepare(p: &DeskProtocol) -> Result<DeskData> {
    let corpus = generate(&p.synth)?;
    let cfg = CorpusConfig::default();
    let all: Vec<RawSentence> = corpus
        .train
        .iter()
        .chain(&corpus.dev)
        .chain(&corpus.test)
        .chain(&corpus.unlabeled)
        .cloned()
        .collect();
    let vocab = Vocabularies::build(&all, &cfg)?;
    let train = vocab.index_all(&corpus.train, &cfg)?;
    let dev = vocab.index_all(&corpus.dev, &cfg)?;
    let test = vocab.index_all(&corpus.test, &cfg)?;
    let mut lm_corpus: Vec<Sentence> = train.iter().chain(&dev).cloned().collect();
    lm_corpus.extend(vocab.index_all(&corpus.unlabeled, &cfg)?);
    for s in &mut lm_corpus {
        s.tag_ids = None;
    }
    Ok(DeskData {
        vocab,
        train,
        dev,
        test,
        lm_corpus,
        word_range: p.word_range,
    })
}

/// The starting word table of a run: the same seeded random table is
/// handed to the language model and to every no-pretrain tagger.
pub fn word_table(data: &DeskData, arch: &Architecture, seed: u64) -> Result<EmbeddingTable<f32>> {
    random_word_table(&data.vocab.words, arch.word_dim, data.word_range, &mut RngSeed(seed).derive(0x57))
}

pub fn pretrain(data: &DeskData, arch: &Architecture, lm: &LmConfig, seed: u64) -> Result<(Checkpoint, LmReport)> {
    let mut rng = RngSeed(seed).derive(0x4c4d);
    let ct = char_table(&data.vocab.chars, arch.char_dim, &mut rng)?;
    let mut model = BiLm::new(arch, ct, word_table(data, arch, seed)?, &mut rng)?;
    let cfg = LmConfig { seed, ..lm.clone() };
    let report = train_bilm(&mut model, &data.lm_corpus, &cfg, |_| {})?;
    Ok((model.checkpoint(), report))
}

/// Result of one fine-tuning run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub mode: PretrainMode,
    pub seed: u64,
    pub report: NerReport,
    pub test: EvalReport,
    /// Test mentions split by whether their surface string is a training
    /// mention.
    pub unseen: UnseenReport,
    pub model: NerModel<f32>,
}

fn tagged(data: &[Sentence], tags: &crate::corpus::TagDict) -> Vec<(Vec<String>, Vec<String>)> {
    data.iter()
        .map(|s| {
            let t = s.tag_ids.as_ref().map_or_else(Vec::new, |ids| ids.iter().map(|&i| tags.tag(i).to_string()).collect());
            (s.tokens.clone(), t)
        })
        .collect()
}

/// Fine-tunes a tagger on `train_idx` (indices into `data.train`) and
/// scores the best-dev model on test.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    data: &DeskData,
    arch: &Architecture,
    head: Head,
    lm: Option<&Checkpoint>,
    mode: PretrainMode,
    ner: &TrainConfig,
    seed: u64,
    train_idx: Option<&[usize]>,
) -> Result<RunResult> {
    let mut rng = RngSeed(seed).derive(0x4e45);
    let ct = char_table(&data.vocab.chars, arch.char_dim, &mut rng)?;
    let wt = word_table(data, arch, seed)?;
    let mut model = init_ner_model(arch, ct, wt, data.vocab.tags.len(), head, true, lm, mode, &mut rng)?;
    let train: Vec<Sentence> = match train_idx {
        Some(idx) => idx.iter().map(|&i| data.train[i].clone()).collect(),
        None => data.train.clone(),
    };
    let cfg = TrainConfig { seed, ..ner.clone() };
    let report = train_ner(&mut model, &train, &data.dev, &data.vocab.tags, &cfg, |_| {})?;
    let tags = &data.vocab.tags;
    let pred = model.predict_tags(&data.test, tags);
    let gold = tagged(&data.test, tags);
    let gold_tags: Vec<Vec<String>> = gold.iter().map(|(_, t)| t.clone()).collect();
    let test = crate::eval::exact_match_prf(&gold_tags, &pred)?;
    let unseen = unseen_entity_report(&tagged(&train, tags), &gold, &pred)?;
    Ok(RunResult {
        mode,
        seed,
        report,
        test,
        unseen,
        model,
    })
}

/// Per-mode averages over seeds.
#[derive(Clone, Debug)]
pub struct ModeSummary {
    pub mode: PretrainMode,
    pub runs: Vec<RunResult>,
}

impl ModeSummary {
    /// Mean epochs to reach `threshold`; runs that never get there count
    /// as `cap + 1`.
    pub fn mean_epochs_to(&self, threshold: f64, cap: usize) -> f64 {
        let total: usize = self
            .runs
            .iter()
            .map(|r| r.report.epochs_to(threshold).unwrap_or(cap + 1))
            .sum();
        total as f64 / self.runs.len() as f64
    }

    pub fn mean_test_f1(&self) -> f64 {
        self.runs.iter().map(|r| r.test.f1).sum::<f64>() / self.runs.len() as f64
    }
}

/// One language-model checkpoint per protocol seed, in seed order.
pub fn pretrain_all(data: &DeskData, p: &DeskProtocol) -> Result<Vec<Checkpoint>> {
    p.seeds
        .par_iter()
        .map(|&seed| Ok(pretrain(data, &p.arch, &p.lm, seed)?.0))
        .collect()
}

/// Fine-tunes every mode for every seed, using `checkpoints[i]` for
/// `p.seeds[i]`.
pub fn compare_modes_with(
    data: &DeskData,
    p: &DeskProtocol,
    modes: &[PretrainMode],
    checkpoints: &[Checkpoint],
) -> Result<Vec<ModeSummary>> {
    check_len(p, checkpoints)?;
    let grid: Vec<(PretrainMode, usize)> = modes.iter().flat_map(|&m| (0..p.seeds.len()).map(move |i| (m, i))).collect();
    let mut runs = grid
        .par_iter()
        .map(|&(mode, i)| finetune(data, &p.arch, p.head, Some(&checkpoints[i]), mode, &p.ner, p.seeds[i], None))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    Ok(modes
        .iter()
        .map(|&mode| ModeSummary {
            mode,
            runs: runs.by_ref().take(p.seeds.len()).collect(),
        })
        .collect())
}

/// Pretrains once per seed, then fine-tunes every requested mode.
pub fn compare_modes(data: &DeskData, p: &DeskProtocol, modes: &[PretrainMode]) -> Result<Vec<ModeSummary>> {
    compare_modes_with(data, p, modes, &pretrain_all(data, p)?)
}

fn check_len(p: &DeskProtocol, checkpoints: &[Checkpoint]) -> Result<()> {
    if checkpoints.len() != p.seeds.len() {
        return Err(crate::Error::Contract(format!(
            "{} checkpoints for {} seeds",
            checkpoints.len(),
            p.seeds.len()
        )));
    }
    Ok(())
}

/// One mode's learning curve: (training fraction, mean test F1) points.
pub type Curve = (PretrainMode, Vec<(f64, f64)>);

/// Test F1 per (mode, fraction), averaged over seeds. The subsample for a
/// fraction depends only on the seed, so every mode sees the same subset.
pub fn learning_curves_with(
    data: &DeskData,
    p: &DeskProtocol,
    modes: &[PretrainMode],
    fractions: &[f64],
    checkpoints: &[Checkpoint],
) -> Result<Vec<Curve>> {
    check_len(p, checkpoints)?;
    let mut grid = Vec::new();
    for &mode in modes {
        for &f in fractions {
            for i in 0..p.seeds.len() {
                grid.push((mode, f, i));
            }
        }
    }
    let scores: Vec<f64> = grid
        .par_iter()
        .map(|&(mode, f, i)| {
            let seed = p.seeds[i];
            let idx = subsample(data.train.len(), f, RngSeed(seed ^ 0x4643))?;
            Ok(finetune(data, &p.arch, p.head, Some(&checkpoints[i]), mode, &p.ner, seed, Some(&idx))?.test.f1)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = p.seeds.len();
    Ok(modes
        .iter()
        .enumerate()
        .map(|(mi, &mode)| {
            let pts = fractions
                .iter()
                .enumerate()
                .map(|(fi, &f)| {
                    let at = (mi * fractions.len() + fi) * n;
                    (f, scores[at..at + n].iter().sum::<f64>() / n as f64)
                })
                .collect();
            (mode, pts)
        })
        .collect())
}

pub fn learning_curves(
    data: &DeskData,
    p: &DeskProtocol,
    modes: &[PretrainMode],
    fractions: &[f64],
) -> Result<Vec<Curve>> {
    learning_curves_with(data, p, modes, fractions, &pretrain_all(data, p)?)
}
