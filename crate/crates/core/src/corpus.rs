//! CoNLL-style corpora: parsing, token normalization, vocabularies,
//! tagging-scheme conversion and word-budget mini-batching.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const NUM: &str = "<num>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NUM_ID: usize = 2;
pub const BOS_ID: usize = 3;
pub const EOS_ID: usize = 4;

const WORD_RESERVED: [&str; 5] = [PAD, UNK, NUM, BOS, EOS];
const CHAR_RESERVED: [&str; 2] = [PAD, UNK];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Replace number tokens by the NUM sentinel for word lookup.
    pub normalize_numbers: bool,
    /// Also feed the sentinel (instead of the original characters) to the
    /// character CNN.
    pub normalize_chars: bool,
    /// Words seen fewer times than this map to UNK.
    pub min_count: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            normalize_numbers: true,
            normalize_chars: false,
            min_count: 1,
        }
    }
}

/// A sentence as read from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSentence {
    pub tokens: Vec<String>,
    pub tags: Option<Vec<String>>,
}

impl RawSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Parses `token<TAB|space>tag` lines with blank-line sentence breaks.
///
/// In unlabeled mode the first column is the token and anything after it is
/// ignored. Lines starting with `#` and `-DOCSTART-` lines are skipped.
pub fn parse_conll(text: &str, labeled: bool) -> Result<Vec<RawSentence>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>| {
        if !tokens.is_empty() {
            out.push(RawSentence {
                tokens: std::mem::take(tokens),
                tags: labeled.then(|| std::mem::take(tags)),
            });
        }
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags);
            continue;
        }
        if line.starts_with('#') || line.starts_with("-DOCSTART-") {
            flush(&mut tokens, &mut tags);
            continue;
        }
        let mut cols = line.split(['\t', ' ']).filter(|c| !c.is_empty());
        let token = cols.next().expect("non-blank line has a column");
        if labeled {
            // tag is the last column so extra feature columns are tolerated
            let tag = cols.next_back().ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("token `{token}` has no tag"),
            })?;
            tags.push(tag.to_string());
        }
        tokens.push(token.to_string());
    }
    flush(&mut tokens, &mut tags);
    Ok(out)
}

pub fn read_conll(path: &Path, labeled: bool) -> Result<Vec<RawSentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll(&text, labeled)
}

/// Renders sentences back to CoNLL text, one `token<TAB>tag` per line.
pub fn format_conll(sentences: &[(Vec<String>, Vec<String>)]) -> String {
    let mut s = String::new();
    for (i, (tokens, tags)) in sentences.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        for (tok, tag) in tokens.iter().zip(tags) {
            let _ = writeln!(s, "{tok}\t{tag}");
        }
    }
    s
}

/// True for tokens made of digits with optional leading sign and internal
/// `.`, `,`, `-`, `+` between digits.
pub fn is_number(token: &str) -> bool {
    let body = token.strip_prefix(['+', '-']).unwrap_or(token);
    let mut prev_digit = false;
    let mut saw_digit = false;
    for c in body.chars() {
        if c.is_ascii_digit() {
            prev_digit = true;
            saw_digit = true;
        } else if matches!(c, '.' | ',' | '-' | '+') && prev_digit {
            prev_digit = false;
        } else {
            return false;
        }
    }
    saw_digit && prev_digit
}

/// Number tokens become the NUM sentinel; everything else is returned
/// unchanged, case included.
pub fn normalize_token(token: &str) -> &str {
    if is_number(token) {
        NUM
    } else {
        token
    }
}

/// Bijective string ↔ id map with a fixed reserved prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    items: Vec<String>,
    index: HashMap<String, usize>,
    reserved: usize,
}

impl Lexicon {
    fn with_reserved(reserved: &[&str]) -> Self {
        let mut lex = Lexicon {
            items: Vec::new(),
            index: HashMap::new(),
            reserved: reserved.len(),
        };
        for r in reserved {
            lex.push(r);
        }
        lex
    }

    fn push(&mut self, item: &str) -> usize {
        if let Some(&id) = self.index.get(item) {
            return id;
        }
        self.items.push(item.to_string());
        self.index.insert(item.to_string(), self.items.len() - 1);
        self.items.len() - 1
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn item(&self, id: usize) -> &str {
        &self.items[id]
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// One entry per line, reserved entries first.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for it in &self.items {
            s.push_str(it);
            s.push('\n');
        }
        s
    }

    fn from_text(text: &str, reserved: &[&str]) -> Result<Self> {
        let mut lex = Lexicon::with_reserved(reserved);
        for (i, line) in text.lines().enumerate() {
            if i < reserved.len() {
                if line != reserved[i] {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("expected reserved entry `{}`, found `{line}`", reserved[i]),
                    });
                }
                continue;
            }
            if line.is_empty() || lex.get(line).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("empty or duplicate entry `{line}`"),
                });
            }
            lex.push(line);
        }
        Ok(lex)
    }
}

/// Word vocabulary with PAD, UNK, NUM, BOS, EOS at ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordVocab(Lexicon);

impl WordVocab {
    /// Builds from (already normalized) tokens, in first-seen order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order = Vec::new();
        for t in tokens {
            let c = counts.entry(t).or_insert(0);
            if *c == 0 {
                order.push(t);
            }
            *c += 1;
        }
        let mut lex = Lexicon::with_reserved(&WORD_RESERVED);
        for t in order {
            if counts[t] >= min_count.max(1) {
                lex.push(t);
            }
        }
        WordVocab(lex)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.0.get(word).unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.get(word).is_some()
    }

    pub fn word(&self, id: usize) -> &str {
        self.0.item(id)
    }

    pub fn words(&self) -> &[String] {
        self.0.items()
    }

    pub fn to_text(&self) -> String {
        self.0.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Lexicon::from_text(text, &WORD_RESERVED).map(WordVocab)
    }
}

/// Character vocabulary with PAD (id 0) and UNK (id 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab(Lexicon);

impl CharVocab {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut lex = Lexicon::with_reserved(&CHAR_RESERVED);
        let mut chars = BTreeSet::new();
        for t in tokens {
            chars.extend(t.chars());
        }
        for c in chars {
            lex.push(c.encode_utf8(&mut [0; 4]));
        }
        CharVocab(lex)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self, token: &str) -> Vec<usize> {
        token
            .chars()
            .map(|c| self.0.get(c.encode_utf8(&mut [0; 4])).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.0.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Lexicon::from_text(text, &CHAR_RESERVED).map(CharVocab)
    }
}

/// IOBES tag dictionary; `O` is always id 0, followed by B/I/E/S for each
/// entity type in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagDict {
    lex: Lexicon,
}

impl TagDict {
    pub fn from_types<'a>(types: impl IntoIterator<Item = &'a str>) -> Self {
        let types: BTreeSet<&str> = types.into_iter().collect();
        let mut lex = Lexicon::with_reserved(&["O"]);
        for ty in types {
            for p in ["B", "I", "E", "S"] {
                lex.push(&format!("{p}-{ty}"));
            }
        }
        TagDict { lex }
    }

    /// Collects entity types from IOBES (or BIO) tags.
    pub fn from_tags<'a>(tags: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut types = BTreeSet::new();
        for (i, tag) in tags.into_iter().enumerate() {
            if tag == "O" {
                continue;
            }
            let (_, ty) = split_tag(tag).ok_or_else(|| Error::Tagging {
                position: i,
                msg: format!("`{tag}` is not O or <B|I|E|S>-<type>"),
            })?;
            types.insert(ty);
        }
        Ok(TagDict::from_types(types))
    }

    pub fn len(&self) -> usize {
        self.lex.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lex.is_empty()
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.lex.get(tag)
    }

    pub fn tag(&self, id: usize) -> &str {
        self.lex.item(id)
    }

    pub fn tags(&self) -> &[String] {
        self.lex.items()
    }

    pub fn entity_types(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.tags().iter().filter_map(|t| split_tag(t).map(|(_, ty)| ty)).collect();
        v.dedup();
        v
    }

    pub fn to_text(&self) -> String {
        self.lex.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lex = Lexicon::from_text(text, &["O"])?;
        for (i, t) in lex.items().iter().enumerate().skip(1) {
            if split_tag(t).is_none() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("invalid tag `{t}`"),
                });
            }
        }
        Ok(TagDict { lex })
    }
}

/// Splits `B-Disease` into `('B', "Disease")`.
pub fn split_tag(tag: &str) -> Option<(char, &str)> {
    let (p, ty) = tag.split_once('-')?;
    let mut chars = p.chars();
    let c = chars.next()?;
    (chars.next().is_none() && matches!(c, 'B' | 'I' | 'E' | 'S') && !ty.is_empty()).then_some((c, ty))
}

/// How [`bio_to_iobes`] treats an `I-X` that does not continue an `X` chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BioMode {
    Strict,
    /// Treat the offending `I-X` as `B-X`.
    Lenient,
}

/// Converts BIO to IOBES. Returns the converted tags and the number of
/// repaired positions (always 0 in strict mode).
pub fn bio_to_iobes<S: AsRef<str>>(tags: &[S], mode: BioMode) -> Result<(Vec<String>, usize)> {
    // normalize to (begin?, type) per position
    let mut spans: Vec<Option<(bool, &str)>> = Vec::with_capacity(tags.len());
    let mut repaired = 0;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if tag == "O" {
            spans.push(None);
            continue;
        }
        let (p, ty) = split_tag(tag)
            .filter(|(p, _)| matches!(p, 'B' | 'I'))
            .ok_or_else(|| Error::Tagging {
                position: i,
                msg: format!("`{tag}` is not a BIO tag"),
            })?;
        let continues = matches!(spans.last(), Some(Some((_, prev))) if *prev == ty);
        let begin = match p {
            'B' => true,
            _ if continues => false,
            _ => match mode {
                BioMode::Strict => {
                    return Err(Error::Tagging {
                        position: i,
                        msg: format!("`{tag}` does not continue a chunk of the same type"),
                    })
                }
                BioMode::Lenient => {
                    repaired += 1;
                    true
                }
            },
        };
        spans.push(Some((begin, ty)));
    }
    let out = spans
        .iter()
        .enumerate()
        .map(|(i, s)| match s {
            None => "O".to_string(),
            Some((begin, ty)) => {
                let ends = !matches!(spans.get(i + 1), Some(Some((false, _))));
                let p = match (begin, ends) {
                    (true, true) => 'S',
                    (true, false) => 'B',
                    (false, true) => 'E',
                    (false, false) => 'I',
                };
                format!("{p}-{ty}")
            }
        })
        .collect();
    Ok((out, repaired))
}

/// True when every tag is `O` or `B-`/`I-` and no `I-X` starts a chunk.
pub fn is_bio<S: AsRef<str>>(tags: &[S]) -> bool {
    bio_to_iobes(tags, BioMode::Strict).is_ok()
}

/// Converts BIO input to IOBES unless it already is IOBES.
pub fn to_iobes<S: AsRef<str>>(tags: &[S]) -> Result<Vec<String>> {
    let already = tags
        .iter()
        .any(|t| matches!(split_tag(t.as_ref()), Some(('E' | 'S', _))));
    if already {
        return Ok(tags.iter().map(|t| t.as_ref().to_string()).collect());
    }
    Ok(bio_to_iobes(tags, BioMode::Strict)?.0)
}

/// An indexed sentence ready for the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub word_ids: Vec<usize>,
    pub char_ids: Vec<Vec<usize>>,
    pub tag_ids: Option<Vec<usize>>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Everything needed to turn raw sentences into [`Sentence`]s.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabularies {
    pub words: WordVocab,
    pub chars: CharVocab,
    pub tags: TagDict,
}

impl Vocabularies {
    /// Builds word, char and tag vocabularies. Tags are read from labeled
    /// sentences (BIO or IOBES); unlabeled ones contribute words only.
    pub fn build(sentences: &[RawSentence], config: &CorpusConfig) -> Result<Self> {
        let normalized: Vec<&str> = sentences
            .iter()
            .flat_map(|s| s.tokens.iter())
            .map(|t| word_form(t, config))
            .collect();
        let words = WordVocab::build(normalized.iter().copied(), config.min_count);
        let chars = CharVocab::build(sentences.iter().flat_map(|s| s.tokens.iter()).map(String::as_str));
        let tags = TagDict::from_tags(
            sentences
                .iter()
                .filter_map(|s| s.tags.as_ref())
                .flat_map(|t| t.iter())
                .map(String::as_str),
        )?;
        Ok(Vocabularies { words, chars, tags })
    }

    /// Indexes one sentence; labeled sentences are converted to IOBES.
    pub fn index(&self, raw: &RawSentence, config: &CorpusConfig) -> Result<Sentence> {
        if raw.tokens.is_empty() {
            return Err(Error::Data("empty sentence".into()));
        }
        let word_ids = raw.tokens.iter().map(|t| self.words.id(word_form(t, config))).collect();
        let char_ids = raw
            .tokens
            .iter()
            .map(|t| {
                let form = if config.normalize_chars { word_form(t, config) } else { t.as_str() };
                self.chars.ids(form)
            })
            .collect();
        let tag_ids = match &raw.tags {
            None => None,
            Some(tags) => {
                if tags.len() != raw.tokens.len() {
                    return Err(Error::Data("token/tag count mismatch".into()));
                }
                let iobes = to_iobes(tags)?;
                let ids = iobes
                    .iter()
                    .map(|t| {
                        self.tags
                            .id(t)
                            .ok_or_else(|| Error::Data(format!("tag `{t}` is not in the tag dictionary")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(ids)
            }
        };
        Ok(Sentence {
            tokens: raw.tokens.clone(),
            word_ids,
            char_ids,
            tag_ids,
        })
    }

    pub fn index_all(&self, raw: &[RawSentence], config: &CorpusConfig) -> Result<Vec<Sentence>> {
        raw.iter().map(|s| self.index(s, config)).collect()
    }
}

fn word_form<'a>(token: &'a str, config: &CorpusConfig) -> &'a str {
    if config.normalize_numbers {
        normalize_token(token)
    } else {
        token
    }
}

/// Greedy word-budget batching. With `rng`, sentence order is shuffled
/// first; a batch closes when the next sentence would exceed the budget.
/// Returns sentence indices per batch.
pub fn batch_by_word_budget(lengths: &[usize], budget: usize, rng: Option<&mut Rng>) -> Result<Vec<Vec<usize>>> {
    if let Some((i, &len)) = lengths.iter().enumerate().find(|(_, &l)| l > budget) {
        return Err(Error::Data(format!(
            "sentence {i} has {len} words, more than the batch budget of {budget}"
        )));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut words = 0;
    for i in order {
        if !current.is_empty() && words + lengths[i] > budget {
            batches.push(std::mem::take(&mut current));
            words = 0;
        }
        words += lengths[i];
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Right-padded character ids for every word of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharMatrix {
    pub width: usize,
    pub rows: Vec<Vec<usize>>,
}

/// Pads every word to `max(longest word, widest filter)` with the PAD id.
pub fn pad_chars<'a>(words: impl IntoIterator<Item = &'a [usize]>, widest_filter: usize) -> CharMatrix {
    let words: Vec<&[usize]> = words.into_iter().collect();
    let width = words.iter().map(|w| w.len()).max().unwrap_or(0).max(widest_filter);
    let rows = words
        .iter()
        .map(|w| {
            let mut r = w.to_vec();
            r.resize(width, PAD_ID);
            r
        })
        .collect();
    CharMatrix { width, rows }
}

/// Padded width for a set of sentences treated as one batch.
pub fn batch_char_width<'a>(sentences: impl IntoIterator<Item = &'a Sentence>, widest_filter: usize) -> usize {
    sentences
        .into_iter()
        .flat_map(|s| s.char_ids.iter().map(Vec::len))
        .max()
        .unwrap_or(0)
        .max(widest_filter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngSeed;
    use proptest::prelude::*;

    #[test]
    fn parse_single_token() {
        let s = parse_conll("Nf\tB-Disease\n\n", true).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].tokens, vec!["Nf"]);
        assert_eq!(s[0].tags.as_ref().unwrap(), &vec!["B-Disease".to_string()]);
    }

    #[test]
    fn parse_two_sentences_and_skip_docstart() {
        let text = "-DOCSTART- O\n\na O\nb B-X\n\n# comment\nc I-Y\n";
        let s = parse_conll(text, true).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].tokens, vec!["c"]);
    }

    #[test]
    fn parse_missing_tag_names_line() {
        let err = parse_conll("a O\nb\n", true).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let unlabeled = parse_conll("a\nb\n\nc\n", false).unwrap();
        assert_eq!(unlabeled.len(), 2);
        assert!(unlabeled[0].tags.is_none());
    }

    #[test]
    fn number_rule() {
        assert_eq!(normalize_token("12.5"), NUM);
        assert_eq!(normalize_token("1,000"), NUM);
        assert_eq!(normalize_token("-3"), NUM);
        assert_eq!(normalize_token("3-4"), NUM);
        assert_eq!(normalize_token("p53"), "p53");
        assert_eq!(normalize_token("VHL"), "VHL");
        assert_eq!(normalize_token("5."), "5.");
        assert_eq!(normalize_token("."), ".");
        assert_eq!(normalize_token("-"), "-");
        assert_eq!(normalize_token("1..2"), "1..2");
    }

    #[test]
    fn bio_examples() {
        let conv = |t: &[&str]| bio_to_iobes(t, BioMode::Strict).unwrap().0;
        assert_eq!(conv(&["B-D"]), vec!["S-D"]);
        assert_eq!(conv(&["B-D", "I-D", "I-D"]), vec!["B-D", "I-D", "E-D"]);
        assert_eq!(conv(&["O", "B-D", "B-C", "I-C"]), vec!["O", "S-D", "B-C", "E-C"]);
    }

    #[test]
    fn bio_invalid_transition() {
        let err = bio_to_iobes(&["O", "I-D"], BioMode::Strict).unwrap_err();
        assert!(matches!(err, Error::Tagging { position: 1, .. }));
        let err = bio_to_iobes(&["B-C", "I-D"], BioMode::Strict).unwrap_err();
        assert!(matches!(err, Error::Tagging { position: 1, .. }));
        let (tags, repaired) = bio_to_iobes(&["O", "I-D", "I-D"], BioMode::Lenient).unwrap();
        assert_eq!(tags, vec!["O", "B-D", "E-D"]);
        assert_eq!(repaired, 1);
    }

    #[test]
    fn vocab_reserved_ids_and_roundtrip() {
        let v = WordVocab::build(["a", "b", "a", NUM], 1);
        assert_eq!(v.id(PAD), PAD_ID);
        assert_eq!(v.id(EOS), EOS_ID);
        assert_eq!(v.id(NUM), NUM_ID);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.len(), 7);
        assert_eq!(WordVocab::from_text(&v.to_text()).unwrap(), v);
        let c = CharVocab::build(["ab", "ba"]);
        assert_eq!(c.ids("abz"), vec![2, 3, UNK_ID]);
        assert_eq!(CharVocab::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn min_count_filters() {
        let v = WordVocab::build(["a", "b", "a"], 2);
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
    }

    #[test]
    fn tag_dict_layout() {
        let d = TagDict::from_tags(["O", "B-Disease", "I-Chem", "S-Disease"]).unwrap();
        assert_eq!(d.len(), 9);
        assert_eq!(d.id("O"), Some(0));
        assert_eq!(d.tag(1), "B-Chem");
        assert_eq!(d.entity_types(), vec!["Chem", "Disease"]);
        assert!(TagDict::from_tags(["X-Disease"]).is_err());
        assert_eq!(TagDict::from_text(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn batching_examples() {
        let mut rng = RngSeed(1).rng();
        let b = batch_by_word_budget(&[300, 300, 300], 500, Some(&mut rng)).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|x| x.len() == 1));
        let b = batch_by_word_budget(&[100, 100], 500, Some(&mut rng)).unwrap();
        assert_eq!(b.len(), 1);
        assert!(batch_by_word_budget(&[600], 500, None).is_err());
    }

    #[test]
    fn pad_examples() {
        let to = [1usize, 2];
        let cancer = [3usize, 4, 5, 6, 7, 8];
        let m = pad_chars([&to[..], &cancer[..]], 7);
        assert_eq!(m.width, 7);
        assert_eq!(m.rows[0], vec![1, 2, 0, 0, 0, 0, 0]);
        let long = [9usize; 10];
        let m = pad_chars([&long[..], &long[..]], 7);
        assert_eq!(m.width, 10);
        assert_eq!(m.rows[0], long.to_vec());
        let m = pad_chars([&[4usize][..]], 7);
        assert_eq!(m.rows[0].len(), 7);
    }

    #[test]
    fn index_sentence() {
        let raw = parse_conll("Aspirin B-Chem\n12 O\nhelps O\n", true).unwrap();
        let cfg = CorpusConfig::default();
        let v = Vocabularies::build(&raw, &cfg).unwrap();
        let s = v.index(&raw[0], &cfg).unwrap();
        assert_eq!(s.word_ids[1], NUM_ID);
        assert_eq!(s.char_ids[1].len(), 2);
        assert_eq!(v.tags.tag(s.tag_ids.as_ref().unwrap()[0]), "S-Chem");
    }

    fn bio_strategy() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec((0u8..3, 0u8..2), 1..30).prop_map(|steps| {
            let mut out: Vec<String> = Vec::new();
            let mut prev: Option<u8> = None;
            for (kind, ty) in steps {
                let ty_name = ["A", "B"][ty as usize];
                match (kind, prev) {
                    (0, _) => {
                        out.push("O".into());
                        prev = None;
                    }
                    (2, Some(p)) => out.push(format!("I-{}", ["A", "B"][p as usize])),
                    _ => {
                        out.push(format!("B-{ty_name}"));
                        prev = Some(ty);
                    }
                }
            }
            out
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[0-9a-zA-Z.,+-]{1,8}") {
            let once = normalize_token(&s);
            prop_assert_eq!(normalize_token(once), once);
        }

        #[test]
        fn batches_cover_corpus_once(lengths in prop::collection::vec(1usize..40, 0..60), seed in 0u64..1000) {
            let mut rng = RngSeed(seed).rng();
            let batches = batch_by_word_budget(&lengths, 50, Some(&mut rng)).unwrap();
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort();
            prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
            for b in &batches {
                prop_assert!(b.iter().map(|&i| lengths[i]).sum::<usize>() <= 50);
            }
        }

        #[test]
        fn padding_never_precedes_chars(words in prop::collection::vec(prop::collection::vec(2usize..9, 1..12), 1..6)) {
            let m = pad_chars(words.iter().map(|w| w.as_slice()), 7);
            for row in &m.rows {
                let first_pad = row.iter().position(|&c| c == PAD_ID).unwrap_or(row.len());
                prop_assert!(row[first_pad..].iter().all(|&c| c == PAD_ID));
            }
        }

        #[test]
        fn bio_generator_is_valid(tags in bio_strategy()) {
            prop_assert!(is_bio(&tags));
        }
    }
}
