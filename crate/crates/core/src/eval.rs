//! Exact-match chunk evaluation and the curve/analysis harnesses built on it.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::corpus::split_tag;
use crate::error::{Error, Result};
use crate::tensor::RngSeed;

/// Inclusive token span with an entity type.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl Chunk {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        assert!(start <= end, "chunk start after end");
        Chunk {
            start,
            end,
            entity_type: entity_type.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Reads chunks from IOBES tags.
///
/// Malformed input is repaired instead of rejected: an `I-X`/`E-X` that does
/// not continue an open `X` chunk starts a new one, and a chunk left open
/// (by `O`, a new `B`/`S`, a type change, or the end of the sentence) is
/// closed at the previous token. Returns the chunks and the repair count.
pub fn extract_chunks<S: AsRef<str>>(tags: &[S]) -> (Vec<Chunk>, usize) {
    let mut chunks = Vec::new();
    let mut repairs = 0;
    let mut open: Option<(usize, &str)> = None;
    let close = |open: &mut Option<(usize, &str)>, end: usize, chunks: &mut Vec<Chunk>, repairs: &mut usize| {
        if let Some((s, ty)) = open.take() {
            chunks.push(Chunk::new(s, end, ty));
            *repairs += 1;
        }
    };
    for (t, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let Some((p, ty)) = split_tag(tag) else {
            // "O" or anything unparseable
            if t > 0 {
                close(&mut open, t - 1, &mut chunks, &mut repairs);
            }
            continue;
        };
        let continues = matches!(open, Some((_, o)) if o == ty);
        match p {
            'S' => {
                if t > 0 {
                    close(&mut open, t - 1, &mut chunks, &mut repairs);
                }
                chunks.push(Chunk::new(t, t, ty));
            }
            'B' => {
                if t > 0 {
                    close(&mut open, t - 1, &mut chunks, &mut repairs);
                }
                open = Some((t, ty));
            }
            'I' if continues => {}
            'E' if continues => {
                let (s, _) = open.take().expect("continues implies open");
                chunks.push(Chunk::new(s, t, ty));
            }
            _ => {
                // I or E without a matching open chunk
                if t > 0 {
                    close(&mut open, t - 1, &mut chunks, &mut repairs);
                }
                repairs += 1;
                if p == 'E' {
                    chunks.push(Chunk::new(t, t, ty));
                } else {
                    open = Some((t, ty));
                }
            }
        }
    }
    if !tags.is_empty() {
        close(&mut open, tags.len() - 1, &mut chunks, &mut repairs);
    }
    if repairs > 0 {
        log::debug!("repaired {repairs} malformed IOBES position(s)");
    }
    (chunks, repairs)
}

/// Inverse of [`extract_chunks`] for well-formed chunk sets.
pub fn chunks_to_iobes(chunks: &[Chunk], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for c in chunks {
        if c.start == c.end {
            tags[c.start] = format!("S-{}", c.entity_type);
        } else {
            tags[c.start] = format!("B-{}", c.entity_type);
            for t in &mut tags[c.start + 1..c.end] {
                *t = format!("I-{}", c.entity_type);
            }
            tags[c.end] = format!("E-{}", c.entity_type);
        }
    }
    tags
}

pub fn chunks_to_bio(chunks: &[Chunk], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for c in chunks {
        tags[c.start] = format!("B-{}", c.entity_type);
        for t in &mut tags[c.start + 1..=c.end] {
            *t = format!("I-{}", c.entity_type);
        }
    }
    tags
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }

    fn add(&mut self, other: Counts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.correct += other.correct;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Micro-averaged exact-match scores plus a per-type breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub per_type: BTreeMap<String, Counts>,
}

impl EvalReport {
    fn from_counts(counts: Counts, per_type: BTreeMap<String, Counts>) -> Self {
        EvalReport {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts,
            per_type,
        }
    }

    /// `key=value` records, one per line: the overall line first, then one
    /// per entity type.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        let mut line = |scope: &str, c: &Counts| {
            let _ = writeln!(
                s,
                "scope={scope} precision={:.4} recall={:.4} f1={:.4} gold={} predicted={} correct={}",
                c.precision(),
                c.recall(),
                c.f1(),
                c.gold,
                c.predicted,
                c.correct
            );
        };
        line("all", &self.counts);
        for (ty, c) in &self.per_type {
            line(ty, c);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7}",
            "type", "precision", "recall", "f1", "gold", "pred", "correct"
        );
        let mut row = |name: &str, c: &Counts| {
            let _ = writeln!(
                s,
                "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
                name,
                c.precision(),
                c.recall(),
                c.f1(),
                c.gold,
                c.predicted,
                c.correct
            );
        };
        for (ty, c) in &self.per_type {
            row(ty, c);
        }
        row("overall", &self.counts);
        s
    }
}

/// Exact-match comparison of chunk sets, sentence by sentence.
pub fn exact_match_chunks(gold: &[Vec<Chunk>], pred: &[Vec<Chunk>]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Data(format!(
            "gold has {} sentences, prediction has {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut total = Counts::default();
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let gs: HashSet<&Chunk> = g.iter().collect();
        let ps: HashSet<&Chunk> = p.iter().collect();
        for c in &gs {
            per_type.entry(c.entity_type.clone()).or_default().gold += 1;
        }
        for c in &ps {
            let e = per_type.entry(c.entity_type.clone()).or_default();
            e.predicted += 1;
            if gs.contains(c) {
                e.correct += 1;
            }
        }
    }
    for c in per_type.values() {
        total.add(*c);
    }
    Ok(EvalReport::from_counts(total, per_type))
}

/// Exact-match P/R/F1 over aligned IOBES tag sequences.
pub fn exact_match_prf<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Data(format!(
            "gold has {} sentences, prediction has {}",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Data(format!(
                "sentence {i}: gold has {} tokens, prediction has {}",
                g.len(),
                p.len()
            )));
        }
    }
    let g: Vec<Vec<Chunk>> = gold.iter().map(|t| extract_chunks(t).0).collect();
    let p: Vec<Vec<Chunk>> = pred.iter().map(|t| extract_chunks(t).0).collect();
    exact_match_chunks(&g, &p)
}

/// Predicted chunk with a confidence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredChunk {
    pub chunk: Chunk,
    pub confidence: f64,
}

/// Gold chunks and scored predictions for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSentence {
    pub gold: Vec<Chunk>,
    pub predicted: Vec<ScoredChunk>,
}

/// Chunk confidence: geometric mean of the per-token posterior of the
/// decoded tag over the chunk's tokens. `marginals` is `[n × tags]`.
pub fn chunk_confidence(chunk: &Chunk, path: &[usize], marginals: &[f64], num_tags: usize) -> f64 {
    let log_sum: f64 = (chunk.start..=chunk.end)
        .map(|t| marginals[t * num_tags + path[t]].max(f64::MIN_POSITIVE).ln())
        .sum();
    (log_sum / chunk.len() as f64).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall after dropping predictions with confidence below
/// each threshold.
pub fn pr_points(data: &[ScoredSentence], thresholds: &[f64]) -> Vec<PrPoint> {
    thresholds
        .iter()
        .map(|&th| {
            let gold: Vec<Vec<Chunk>> = data.iter().map(|s| s.gold.clone()).collect();
            let pred: Vec<Vec<Chunk>> = data
                .iter()
                .map(|s| {
                    s.predicted
                        .iter()
                        .filter(|c| c.confidence >= th)
                        .map(|c| c.chunk.clone())
                        .collect()
                })
                .collect();
            let r = exact_match_chunks(&gold, &pred).expect("aligned by construction");
            PrPoint {
                threshold: th,
                precision: r.precision,
                recall: r.recall,
            }
        })
        .collect()
}

/// Interpolated precision: points sorted by recall, each precision replaced
/// by the best precision at any recall at least as high.
pub fn interpolate_precision(points: &[PrPoint]) -> Vec<PrPoint> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.recall.total_cmp(&b.recall).then(b.threshold.total_cmp(&a.threshold)));
    let mut best = 0.0f64;
    for p in sorted.iter_mut().rev() {
        best = best.max(p.precision);
        p.precision = best;
    }
    sorted
}

/// `threshold recall precision` columns, one point per line.
pub fn format_pr_curve(points: &[PrPoint]) -> String {
    let mut s = String::from("# threshold\trecall\tprecision\n");
    for p in points {
        let _ = writeln!(s, "{:.6}\t{:.6}\t{:.6}", p.threshold, p.recall, p.precision);
    }
    s
}

/// Evenly spaced thresholds in `[0, 1]`.
pub fn default_thresholds(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Seeded subsample of `n` items keeping `ceil(fraction * n)` of them in
/// their original order. Fraction 1 returns every index.
pub fn subsample(n: usize, fraction: f64, seed: RngSeed) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok((0..n).collect());
    }
    let keep = ((fraction * n as f64).ceil() as usize).clamp(1.min(n), n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed.rng());
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(idx)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub fraction: f64,
    pub f1: f64,
}

/// Trains once per fraction on a seeded subsample and records the F1
/// returned by `train_and_score`.
pub fn learning_curve<F>(n_train: usize, fractions: &[f64], seed: RngSeed, mut train_and_score: F) -> Result<Vec<CurvePoint>>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    let subsets = fractions
        .iter()
        .map(|&f| subsample(n_train, f, seed))
        .collect::<Result<Vec<_>>>()?;
    fractions
        .iter()
        .zip(subsets)
        .map(|(&fraction, idx)| Ok(CurvePoint { fraction, f1: train_and_score(&idx)? }))
        .collect()
}

pub fn format_learning_curve(points: &[CurvePoint]) -> String {
    let mut s = String::from("# fraction\tf1\n");
    for p in points {
        let _ = writeln!(s, "{:.4}\t{:.6}", p.fraction, p.f1);
    }
    s
}

/// Counts for test entities split by whether their surface string occurs as
/// a gold mention in the training data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UnseenReport {
    /// Unique gold test surface strings seen in training.
    pub seen: usize,
    /// Unique gold test surface strings never seen in training.
    pub unseen: usize,
    pub seen_mentions: usize,
    pub unseen_mentions: usize,
    /// Gold test mentions exactly recovered by the prediction.
    pub seen_correct: usize,
    pub unseen_correct: usize,
}

fn surface(tokens: &[String], c: &Chunk) -> String {
    tokens[c.start..=c.end].join(" ")
}

/// `train`, `test_gold` and `test_pred` hold `(tokens, IOBES tags)` per
/// sentence; gold and prediction must be aligned.
pub fn unseen_entity_report<S: AsRef<str>>(
    train: &[(Vec<String>, Vec<S>)],
    test_gold: &[(Vec<String>, Vec<S>)],
    test_pred: &[Vec<S>],
) -> Result<UnseenReport> {
    if test_gold.len() != test_pred.len() {
        return Err(Error::Data("gold and prediction are not aligned".into()));
    }
    let known: HashSet<String> = train
        .iter()
        .flat_map(|(tokens, tags)| extract_chunks(tags).0.into_iter().map(move |c| surface(tokens, &c)))
        .collect();
    let mut report = UnseenReport::default();
    let mut unique_seen = HashSet::new();
    let mut unique_unseen = HashSet::new();
    for ((tokens, gold), pred) in test_gold.iter().zip(test_pred) {
        let pred: HashSet<Chunk> = extract_chunks(pred).0.into_iter().collect();
        for c in extract_chunks(gold).0 {
            let text = surface(tokens, &c);
            let hit = pred.contains(&c);
            if known.contains(&text) {
                report.seen_mentions += 1;
                report.seen_correct += hit as usize;
                unique_seen.insert(text);
            } else {
                report.unseen_mentions += 1;
                report.unseen_correct += hit as usize;
                unique_unseen.insert(text);
            }
        }
    }
    report.seen = unique_seen.len();
    report.unseen = unique_unseen.len();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{bio_to_iobes, BioMode};
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn extract_examples() {
        let (c, r) = extract_chunks(&["S-D", "O", "B-C", "E-C"]);
        assert_eq!(c, vec![Chunk::new(0, 0, "D"), Chunk::new(2, 3, "C")]);
        assert_eq!(r, 0);
        assert!(extract_chunks(&["O", "O", "O"]).0.is_empty());
        let (c, r) = extract_chunks(&["I-D", "E-D"]);
        assert_eq!(c, vec![Chunk::new(0, 1, "D")]);
        assert_eq!(r, 1);
    }

    #[test]
    fn extract_repairs() {
        // dangling B closed by O
        assert_eq!(extract_chunks(&["B-D", "O"]).0, vec![Chunk::new(0, 0, "D")]);
        // type change mid-chunk
        assert_eq!(
            extract_chunks(&["B-D", "I-C", "E-C"]).0,
            vec![Chunk::new(0, 0, "D"), Chunk::new(1, 2, "C")]
        );
        // bare E
        assert_eq!(extract_chunks(&["O", "E-D"]).0, vec![Chunk::new(1, 1, "D")]);
        // open at the end
        assert_eq!(extract_chunks(&["B-D", "I-D"]).0, vec![Chunk::new(0, 1, "D")]);
    }

    #[test]
    fn prf_examples() {
        let gold = vec![s(&["S-A", "O", "S-B", "O", "B-A", "E-A", "S-B"])];
        let r = exact_match_prf(&gold, &gold).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let gold = vec![s(&["S-A", "S-A", "S-A", "S-A"])];
        let pred = vec![s(&["S-A", "O", "O", "S-B"])];
        let r = exact_match_prf(&gold, &pred).unwrap();
        assert_eq!((r.precision, r.recall), (0.5, 0.25));
        assert!((r.f1 - 1.0 / 3.0).abs() < 1e-12);

        let pred = vec![s(&["O", "O", "O", "O"])];
        let r = exact_match_prf(&gold, &pred).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));

        assert!(exact_match_prf(&gold, &[s(&["O"])]).is_err());
        assert!(exact_match_prf(&gold, &[]).is_err());
    }

    #[test]
    fn micro_average_uses_aggregate_counts() {
        let gold = vec![s(&["S-A", "S-B", "S-B", "S-B"])];
        let pred = vec![s(&["S-A", "O", "O", "S-B"])];
        let r = exact_match_prf(&gold, &pred).unwrap();
        assert_eq!(r.counts, Counts { gold: 4, predicted: 2, correct: 2 });
        let mean_f1 = r.per_type.values().map(Counts::f1).sum::<f64>() / 2.0;
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - mean_f1).abs() > 1e-3);
    }

    #[test]
    fn pr_threshold_endpoints() {
        let data = vec![ScoredSentence {
            gold: vec![Chunk::new(0, 0, "A"), Chunk::new(2, 3, "B")],
            predicted: vec![
                ScoredChunk { chunk: Chunk::new(0, 0, "A"), confidence: 0.9 },
                ScoredChunk { chunk: Chunk::new(1, 1, "A"), confidence: 0.4 },
            ],
        }];
        let pts = pr_points(&data, &[0.0, 0.5, 1.0 + 1e-9]);
        assert_eq!((pts[0].precision, pts[0].recall), (0.5, 0.5));
        assert_eq!((pts[1].precision, pts[1].recall), (1.0, 0.5));
        assert_eq!(pts[2].recall, 0.0);
    }

    #[test]
    fn confidence_is_geometric_mean() {
        let marg = [0.5, 0.5, 0.2, 0.8];
        let c = chunk_confidence(&Chunk::new(0, 1, "A"), &[0, 1], &marg, 2);
        assert!((c - (0.5f64 * 0.8).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn subsample_rules() {
        assert_eq!(subsample(5, 1.0, RngSeed(1)).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(subsample(5, 0.0, RngSeed(1)).is_err());
        assert!(subsample(5, 1.5, RngSeed(1)).is_err());
        let a = subsample(100, 0.25, RngSeed(3)).unwrap();
        assert_eq!(a.len(), 25);
        assert_eq!(a, subsample(100, 0.25, RngSeed(3)).unwrap());
        assert!(learning_curve(10, &[0.0], RngSeed(1), |_| Ok(1.0)).is_err());
    }

    #[test]
    fn unseen_counts() {
        let tok = |v: &[&str]| s(v);
        let train = vec![(tok(&["a", "b", "c", "x"]), s(&["S-D", "S-D", "S-C", "O"]))];
        let gold = vec![
            (tok(&["a", "b", "c", "q", "r"]), s(&["S-D", "S-D", "S-C", "S-D", "S-C"])),
            (tok(&["a"]), s(&["S-D"])),
        ];
        let pred = vec![s(&["S-D", "O", "S-C", "S-D", "O"]), s(&["S-D"])];
        let r = unseen_entity_report(&train, &gold, &pred).unwrap();
        assert_eq!((r.seen, r.unseen), (3, 2));
        assert_eq!((r.seen_mentions, r.unseen_mentions), (4, 2));
        assert_eq!((r.seen_correct, r.unseen_correct), (3, 1));

        let gold = vec![(tok(&["zz"]), s(&["S-D"]))];
        let r = unseen_entity_report(&train, &gold, &[s(&["O"])]).unwrap();
        assert_eq!((r.seen, r.unseen), (0, 1));
    }

    fn chunk_set() -> impl Strategy<Value = (Vec<Chunk>, usize)> {
        prop::collection::vec((0usize..3, 1usize..4, 0usize..2), 0..8).prop_map(|parts| {
            let mut chunks = Vec::new();
            let mut pos = 0;
            for (gap, len, ty) in parts {
                pos += gap;
                chunks.push(Chunk::new(pos, pos + len - 1, ["A", "B"][ty]));
                pos += len;
            }
            (chunks, pos + 1)
        })
    }

    proptest! {
        #[test]
        fn chunk_roundtrip_through_bio_and_iobes((chunks, n) in chunk_set()) {
            let bio = chunks_to_bio(&chunks, n);
            let (iobes, repaired) = bio_to_iobes(&bio, BioMode::Strict).unwrap();
            prop_assert_eq!(repaired, 0);
            prop_assert_eq!(&iobes, &chunks_to_iobes(&chunks, n));
            let (back, repairs) = extract_chunks(&iobes);
            prop_assert_eq!(repairs, 0);
            prop_assert_eq!(back, chunks);
        }

        #[test]
        fn swap_exchanges_p_and_r(
            (a, n) in chunk_set(),
            (b, m) in chunk_set(),
        ) {
            let len = n.max(m);
            let ga = vec![chunks_to_iobes(&a, len)];
            let gb = vec![chunks_to_iobes(&b, len)];
            let r1 = exact_match_prf(&ga, &gb).unwrap();
            let r2 = exact_match_prf(&gb, &ga).unwrap();
            prop_assert_eq!(r1.precision, r2.recall);
            prop_assert_eq!(r1.recall, r2.precision);
        }

        #[test]
        fn interpolated_precision_is_monotone(pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..20)) {
            let points: Vec<PrPoint> = pts.iter().map(|&(t, p, r)| PrPoint { threshold: t, precision: p, recall: r }).collect();
            let smooth = interpolate_precision(&points);
            for w in smooth.windows(2) {
                prop_assert!(w[0].recall <= w[1].recall);
                prop_assert!(w[0].precision >= w[1].precision);
            }
        }
    }
}
