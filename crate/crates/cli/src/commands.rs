use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bilm_ner::bilm::{train_bilm, BiLm, LmEpochRecord};
use bilm_ner::checkpoint::{write_atomic, Checkpoint};
use bilm_ner::corpus::{
    bio_to_iobes, format_conll, read_conll, to_iobes, BioMode, CharVocab, RawSentence, Sentence, TagDict, Vocabularies,
    WordVocab,
};
use bilm_ner::embeddings::{char_table, load_word2vec_text, random_word_table, EmbeddingTable, OOV_RANGE};
use bilm_ner::eval::{default_thresholds, exact_match_prf, format_learning_curve, format_pr_curve, learning_curve};
use bilm_ner::synth::{generate, SynthConfig};
use bilm_ner::tensor::RngSeed;
use bilm_ner::transfer::{init_ner_model, train_ner, train_with_schedule, NerEpochRecord, NerModel, TrainConfig};

use crate::config::RunConfig;
use crate::CliError;

type Res<T> = Result<T, CliError>;

pub const LM_FILE: &str = "lm.ckpt";
pub const NER_FILE: &str = "ner.ckpt";

fn sidecar(ckpt: &Path, ext: &str) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_text(path: &Path) -> Res<String> {
    std::fs::read_to_string(path).map_err(|e| bilm_ner::Error::Io { path: path.into(), source: e }.into())
}

fn read_labeled(field: &str, path: &Option<PathBuf>) -> Res<Option<Vec<RawSentence>>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let data = read_conll(p, true)?;
            log::info!("{field}: {} sentences from {}", data.len(), p.display());
            Ok(Some(data))
        }
    }
}

/// Every configured corpus file; labeled ones keep their tags.
fn all_text(cfg: &RunConfig) -> Res<Vec<RawSentence>> {
    let p = &cfg.paths;
    let mut out = Vec::new();
    for path in [&p.train, &p.dev, &p.test].into_iter().flatten() {
        out.extend(read_conll(path, true)?);
    }
    if let Some(u) = &p.unlabeled {
        out.extend(read_conll(u, false)?);
    }
    Ok(out)
}

fn write_vocab(ckpt: &Path, words: &WordVocab, chars: &CharVocab) -> Res<()> {
    write_text(&sidecar(ckpt, "words"), &words.to_text())?;
    write_text(&sidecar(ckpt, "chars"), &chars.to_text())
}

fn read_vocab(ckpt: &Path) -> Res<(WordVocab, CharVocab)> {
    Ok((
        WordVocab::from_text(&read_text(&sidecar(ckpt, "words"))?)?,
        CharVocab::from_text(&read_text(&sidecar(ckpt, "chars"))?)?,
    ))
}

fn word_table(cfg: &RunConfig, words: &WordVocab) -> Res<EmbeddingTable<f32>> {
    let mut rng = RngSeed(cfg.seed).derive(0x57);
    let dim = cfg.architecture.word_dim;
    Ok(match &cfg.paths.embeddings {
        Some(path) => {
            let (table, cov) = load_word2vec_text(path, words, Some(dim), OOV_RANGE, &mut rng)?;
            log::info!("embeddings cover {:.1}% of {} words", 100.0 * cov.fraction(), cov.vocab);
            table
        }
        None => {
            log::warn!("no embeddings configured; word vectors start random");
            random_word_table(words, dim, OOV_RANGE, &mut rng)?
        }
    })
}

pub fn pretrain(cfg: &RunConfig) -> Res<()> {
    let p = &cfg.paths;
    if p.train.is_none() && p.dev.is_none() && p.unlabeled.is_none() {
        return Err(CliError::Config("paths.unlabeled (or paths.train / paths.dev) is required for pretraining".into()));
    }
    let text = all_text(cfg)?;
    let vocab = Vocabularies::build(&text, &cfg.corpus)?;
    let mut corpus: Vec<RawSentence> = Vec::new();
    for path in [&p.train, &p.dev].into_iter().flatten() {
        corpus.extend(read_conll(path, true)?);
    }
    if let Some(u) = &p.unlabeled {
        corpus.extend(read_conll(u, false)?);
    }
    for s in &mut corpus {
        s.tags = None;
    }
    let corpus = vocab.index_all(&corpus, &cfg.corpus)?;
    log::info!("pretraining on {} sentences, {} word types", corpus.len(), vocab.words.len());

    let mut rng = RngSeed(cfg.seed).derive(0x4c4d);
    let ct = char_table(&vocab.chars, cfg.architecture.char_dim, &mut rng)?;
    let wt = word_table(cfg, &vocab.words)?;
    let mut model = BiLm::new(&cfg.architecture, ct, wt, &mut rng)?;
    let mut lines = String::new();
    let report = train_bilm(&mut model, &corpus, &cfg.lm, |r: &LmEpochRecord| {
        let _ = writeln!(lines, "{}", r.to_line());
    })?;

    let out = p.checkpoints.join(LM_FILE);
    model.checkpoint().save(&out)?;
    write_vocab(&out, &vocab.words, &vocab.chars)?;
    write_text(&p.checkpoints.join("lm_history.txt"), &lines)?;
    println!(
        "best epoch {} held-out perplexity {:.4}{}",
        report.best_epoch,
        report.best_ppl,
        if report.stopped_early { " (stopped early)" } else { "" }
    );
    println!("wrote {}", out.display());
    Ok(())
}

struct NerData {
    vocab: Vocabularies,
    train: Vec<Sentence>,
    dev: Vec<Sentence>,
    test: Option<Vec<Sentence>>,
    lm: Option<Checkpoint>,
}

/// Loads labeled splits. With a language-model checkpoint its vocabularies
/// are reused so transferred embedding rows line up.
fn ner_data(cfg: &RunConfig) -> Res<NerData> {
    let p = &cfg.paths;
    let train = read_labeled("train", &p.train)?
        .ok_or_else(|| CliError::Config("paths.train is required for this command".into()))?;
    let dev = read_labeled("dev", &p.dev)?
        .ok_or_else(|| CliError::Config("paths.dev is required for this command".into()))?;
    let test = read_labeled("test", &p.test)?;
    if cfg.mode.needs_checkpoint() && p.lm_checkpoint.is_none() {
        return Err(CliError::Config(format!("mode `{}` needs --lm-checkpoint (paths.lm_checkpoint)", cfg.mode)));
    }
    let (vocab, lm) = match &p.lm_checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (words, chars) = read_vocab(path)?;
            let labeled: Vec<&RawSentence> = train.iter().chain(&dev).chain(test.iter().flatten()).collect();
            let tags = TagDict::from_tags(labeled.iter().flat_map(|s| s.tags.iter().flatten()).map(String::as_str))?;
            (Vocabularies { words, chars, tags }, Some(ck))
        }
        None => (Vocabularies::build(&all_text(cfg)?, &cfg.corpus)?, None),
    };
    Ok(NerData {
        train: vocab.index_all(&train, &cfg.corpus)?,
        dev: vocab.index_all(&dev, &cfg.corpus)?,
        test: test.map(|t| vocab.index_all(&t, &cfg.corpus)).transpose()?,
        vocab,
        lm,
    })
}

fn fresh_model(cfg: &RunConfig, data: &NerData) -> Res<NerModel<f32>> {
    let mut rng = RngSeed(cfg.seed).derive(0x4e45);
    let ct = char_table(&data.vocab.chars, cfg.architecture.char_dim, &mut rng)?;
    let wt = word_table(cfg, &data.vocab.words)?;
    Ok(init_ner_model(
        &cfg.architecture,
        ct,
        wt,
        data.vocab.tags.len(),
        cfg.head,
        cfg.crf_boundaries,
        data.lm.as_ref(),
        cfg.mode,
        &mut rng,
    )?)
}

fn fit(cfg: &RunConfig, data: &NerData, train: &[Sentence], tc: &TrainConfig, history: &mut String) -> Res<NerModel<f32>> {
    let mut model = fresh_model(cfg, data)?;
    let report = train_ner(&mut model, train, &data.dev, &data.vocab.tags, tc, |r: &NerEpochRecord| {
        let _ = writeln!(history, "{}", r.to_line());
    })?;
    log::info!("best dev F1 {:.4} at epoch {}", report.best_f1, report.best_epoch);
    if tc.retrain_on_dev {
        let lrs: Vec<f64> = report.history[..report.best_epoch].iter().map(|r| r.lr).collect();
        let all: Vec<Sentence> = train.iter().chain(&data.dev).cloned().collect();
        model = fresh_model(cfg, data)?;
        let losses = train_with_schedule(&mut model, &all, tc, &lrs)?;
        for (i, (lr, loss)) in lrs.iter().zip(&losses).enumerate() {
            let _ = writeln!(history, "retrain epoch={} lr={lr:.6e} train_loss={loss:.6}", i + 1);
        }
    }
    Ok(model)
}

pub fn train(cfg: &RunConfig) -> Res<()> {
    let data = ner_data(cfg)?;
    let mut history = String::new();
    let model = fit(cfg, &data, &data.train, &cfg.training, &mut history)?;

    let out_dir = &cfg.paths.checkpoints;
    let out = out_dir.join(NER_FILE);
    model.checkpoint().save(&out)?;
    write_vocab(&out, &data.vocab.words, &data.vocab.chars)?;
    write_text(&sidecar(&out, "tags"), &data.vocab.tags.to_text())?;
    write_text(&out_dir.join("ner_history.txt"), &history)?;

    let mut report = String::new();
    let dev = model.evaluate(&data.dev, &data.vocab.tags)?;
    let _ = writeln!(report, "dev precision={:.4} recall={:.4} f1={:.4}", dev.precision, dev.recall, dev.f1);
    if let Some(test) = &data.test {
        let t = model.evaluate(test, &data.vocab.tags)?;
        let _ = writeln!(report, "test precision={:.4} recall={:.4} f1={:.4}", t.precision, t.recall, t.f1);
        let _ = write!(report, "{}", t.to_table());
    }
    write_text(&out_dir.join("ner_report.txt"), &report)?;
    print!("{report}");
    println!("wrote {}", out.display());
    Ok(())
}

/// A trained tagger and its vocabularies.
pub struct Tagger {
    pub model: NerModel<f32>,
    pub vocab: Vocabularies,
}

impl Tagger {
    pub fn load(ckpt: &Path) -> Res<Self> {
        let model = NerModel::from_checkpoint(&Checkpoint::load(ckpt)?)?;
        let (words, chars) = read_vocab(ckpt)?;
        let tags = TagDict::from_text(&read_text(&sidecar(ckpt, "tags"))?)?;
        if tags.len() != model.num_tags() {
            return Err(bilm_ner::Error::Checkpoint(format!(
                "tag file lists {} tags, model has {}",
                tags.len(),
                model.num_tags()
            ))
            .into());
        }
        Ok(Tagger {
            model,
            vocab: Vocabularies { words, chars, tags },
        })
    }
}

pub fn tag(cfg: &RunConfig, model: &Path, input: &Path, output: Option<&Path>) -> Res<()> {
    let t = Tagger::load(model)?;
    let raw: Vec<RawSentence> = read_conll(input, false)?;
    let sentences = t.vocab.index_all(&raw, &cfg.corpus)?;
    let pred = t.model.predict_tags(&sentences, &t.vocab.tags);
    let rows: Vec<(Vec<String>, Vec<String>)> = raw.into_iter().map(|s| s.tokens).zip(pred).collect();
    let text = format_conll(&rows);
    match output {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn tag_columns(path: &Path, gold: bool) -> Res<Vec<Vec<String>>> {
    read_conll(path, true)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let tags = s.tags.expect("labeled read");
            let converted = if gold {
                to_iobes(&tags)
            } else {
                bio_to_iobes(&tags, BioMode::Lenient).map(|(t, _)| t).or_else(|_| to_iobes(&tags))
            };
            converted.map_err(|e| CliError::from(bilm_ner::Error::Data(format!("{}: sentence {i}: {e}", path.display()))))
        })
        .collect()
}

pub fn eval(gold: &Path, pred: &Path) -> Res<()> {
    let g = tag_columns(gold, true)?;
    let p = tag_columns(pred, false)?;
    let r = exact_match_prf(&g, &p)?;
    print!("{}", r.to_table());
    println!("precision={:.4} recall={:.4} f1={:.4}", r.precision, r.recall, r.f1);
    Ok(())
}

pub fn pr_curve(cfg: &RunConfig, model: &Path, data: &Path, steps: usize) -> Res<PathBuf> {
    let t = Tagger::load(model)?;
    let sentences = t.vocab.index_all(&read_conll(data, true)?, &cfg.corpus)?;
    let points = t.model.pr_curve(&sentences, &t.vocab.tags, &default_thresholds(steps))?;
    let out = cfg.paths.checkpoints.join("pr_curve.tsv");
    write_text(&out, &format_pr_curve(&points))?;
    Ok(out)
}

/// Trains one tagger per training fraction and scores it on test (or dev
/// when no test split is configured).
pub fn learning(cfg: &RunConfig, fractions: &[f64]) -> Res<PathBuf> {
    let data = ner_data(cfg)?;
    let tc = TrainConfig {
        retrain_on_dev: false,
        ..cfg.training.clone()
    };
    let eval_on = data.test.as_ref().unwrap_or(&data.dev);
    let points = learning_curve(data.train.len(), fractions, RngSeed(cfg.seed ^ 0x4643), |idx| {
        let subset: Vec<Sentence> = idx.iter().map(|&i| data.train[i].clone()).collect();
        let mut history = String::new();
        let model = fit(cfg, &data, &subset, &tc, &mut history).map_err(CliError::into_core)?;
        let f1 = model.evaluate(eval_on, &data.vocab.tags)?.f1;
        log::info!("fraction {:.2}: {} sentences, F1 {f1:.4}", idx.len() as f64 / data.train.len() as f64, idx.len());
        Ok(f1)
    })?;
    let out = cfg.paths.checkpoints.join("learning_curve.tsv");
    write_text(&out, &format_learning_curve(&points))?;
    Ok(out)
}

/// Writes a generated corpus and a matching config file.
pub fn synth(out_dir: &Path, cfg: &SynthConfig) -> Res<PathBuf> {
    let c = generate(cfg)?;
    let labeled = |split: &[RawSentence]| -> String {
        let rows: Vec<(Vec<String>, Vec<String>)> =
            split.iter().map(|s| (s.tokens.clone(), s.tags.clone().unwrap_or_default())).collect();
        format_conll(&rows)
    };
    write_text(&out_dir.join("train.txt"), &labeled(&c.train))?;
    write_text(&out_dir.join("dev.txt"), &labeled(&c.dev))?;
    write_text(&out_dir.join("test.txt"), &labeled(&c.test))?;
    let mut config = String::from("[paths]\ntrain = \"train.txt\"\ndev = \"dev.txt\"\ntest = \"test.txt\"\n");
    if !c.unlabeled.is_empty() {
        let text: String = c.unlabeled.iter().map(|s| s.tokens.join("\n") + "\n\n").collect();
        write_text(&out_dir.join("unlabeled.txt"), &text)?;
        config.push_str("unlabeled = \"unlabeled.txt\"\n");
    }
    config.push_str("checkpoints = \"out\"\n");
    let path = out_dir.join("config.toml");
    write_text(&path, &config)?;
    Ok(path)
}
