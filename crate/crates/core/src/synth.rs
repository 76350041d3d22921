//! Seeded generator for a small two-type biomedical-style NER corpus.
//!
//! Entity names are pseudo-words whose suffixes mark their type (`-itis`,
//! `-osis` ... for diseases; `-ine`, `-azole` ... for chemicals), placed in
//! templated clinical sentences padded with filler words. Part of the
//! entity inventory appears only in the test split, so scores also probe
//! generalization to unseen names.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::RawSentence;
use crate::error::{Error, Result};
use crate::tensor::{Rng, RngSeed};

pub const DISEASE: &str = "Disease";
pub const CHEMICAL: &str = "Chemical";

const DISEASE_SUFFIXES: [&str; 6] = ["itis", "emia", "oma", "osis", "pathy", "algia"];
const CHEMICAL_SUFFIXES: [&str; 6] = ["ine", "ol", "ide", "ate", "azole", "mycin"];
const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

// `{D}` disease, `{C}` chemical, `{F}` filler word, `{N}` number.
const TEMPLATES: [&str; 24] = [
    "patients with {D} were treated with {C} .",
    "{C} induced {D} in {N} of {N} {F} .",
    "the {F} of {D} was {F} after {C} therapy .",
    "no {F} of {D} was observed with {C} .",
    "{C} and {C} reduced the {F} of {D} .",
    "we report a case of {D} after {F} {C} use .",
    "the {F} {F} was {F} in the {F} group .",
    "{D} is a {F} {F} of the {F} .",
    "treatment with {C} ( {N} mg / kg ) was {F} .",
    "{C} is {F} in {D} and {D} .",
    "{N} patients developed {D} during {C} infusion .",
    "serum {F} levels rose after {C} .",
    "the risk of {D} increased with {F} {F} .",
    "{D} and {D} were {F} in {N} cases .",
    "a {F} {F} of {C} prevented {D} .",
    "these {F} suggest that {C} may cause {D} .",
    "{F} {F} {F} in {N} {F} .",
    "oral {C} was given for {D} .",
    "withdrawal of {C} resolved the {D} .",
    "the {F} between {C} and {D} remains {F} .",
    "{C} toxicity presented as {D} .",
    "{F} of {F} were {F} by {C} .",
    "{D} was {F} by {F} {F} .",
    "we {F} {N} {F} with {D} .",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub unlabeled: usize,
    pub entities_per_type: usize,
    /// Share of each type's inventory reserved for the test split; the same
    /// number of names is reserved for the dev split.
    pub unseen_fraction: f64,
    pub fillers: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 600,
            dev: 150,
            test: 200,
            unlabeled: 0,
            entities_per_type: 160,
            unseen_fraction: 0.2,
            fillers: 900,
            seed: 2018,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<RawSentence>,
    pub dev: Vec<RawSentence>,
    pub test: Vec<RawSentence>,
    /// Extra sentences without tags, drawn from the whole name inventory
    /// (background text); empty unless requested.
    pub unlabeled: Vec<RawSentence>,
}

struct Inventory {
    seen: Vec<Vec<String>>,
    dev_only: Vec<Vec<String>>,
    test_only: Vec<Vec<String>>,
}

fn syllable(rng: &mut Rng) -> String {
    format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap())
}

fn stem(rng: &mut Rng, syllables: usize) -> String {
    (0..syllables).map(|_| syllable(rng)).collect()
}

fn entity_names(rng: &mut Rng, n: usize, suffixes: &[&str], ty: &str, used: &mut HashSet<String>) -> Vec<Vec<String>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let n_syl = rng.gen_range(1..=2);
        let head = format!("{}{}", stem(rng, n_syl), suffixes.choose(rng).unwrap());
        if !used.insert(head.clone()) {
            continue;
        }
        let roll: f64 = rng.gen();
        let name = match (ty, roll) {
            (DISEASE, r) if r < 0.15 => vec![head, "syndrome".to_string()],
            (DISEASE, r) if r < 0.25 => vec!["chronic".to_string(), head],
            (CHEMICAL, r) if r < 0.15 => vec!["sodium".to_string(), head],
            (CHEMICAL, r) if r < 0.25 => vec![head, "hydrochloride".to_string()],
            _ => vec![head],
        };
        out.push(name);
    }
    out
}

fn inventory(rng: &mut Rng, cfg: &SynthConfig, suffixes: &[&str], ty: &str, used: &mut HashSet<String>) -> Inventory {
    let mut all = entity_names(rng, cfg.entities_per_type, suffixes, ty, used);
    let k = ((cfg.unseen_fraction * all.len() as f64).round() as usize).min((all.len() - 1) / 2);
    let test_only = all.split_off(all.len() - k);
    let dev_only = all.split_off(all.len() - k);
    Inventory {
        seen: all,
        dev_only,
        test_only,
    }
}

fn fillers(rng: &mut Rng, n: usize, used: &mut HashSet<String>) -> Vec<String> {
    let reserved: Vec<&str> = DISEASE_SUFFIXES.iter().chain(&CHEMICAL_SUFFIXES).copied().collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let n_syl = rng.gen_range(1..=3);
        let mut w = stem(rng, n_syl);
        if rng.gen_bool(0.4) {
            w.push(*['n', 'r', 's', 'm', 'k'].choose(rng).unwrap());
        }
        if w.len() < 3 || reserved.iter().any(|s| w.ends_with(s)) || !used.insert(w.clone()) {
            continue;
        }
        out.push(w);
    }
    out
}

fn sentence(rng: &mut Rng, diseases: &[Vec<String>], chemicals: &[Vec<String>], filler: &[String]) -> RawSentence {
    let template = TEMPLATES.choose(rng).unwrap();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for slot in template.split_whitespace() {
        let (entity, ty) = match slot {
            "{D}" => (diseases.choose(rng).unwrap(), DISEASE),
            "{C}" => (chemicals.choose(rng).unwrap(), CHEMICAL),
            other => {
                let tok = match other {
                    "{F}" => filler.choose(rng).unwrap().clone(),
                    "{N}" => rng.gen_range(1..500).to_string(),
                    word => word.to_string(),
                };
                tokens.push(tok);
                tags.push("O".to_string());
                continue;
            }
        };
        for (i, tok) in entity.iter().enumerate() {
            tokens.push(tok.clone());
            tags.push(format!("{}-{ty}", if i == 0 { "B" } else { "I" }));
        }
    }
    RawSentence { tokens, tags: Some(tags) }
}

/// Generates train/dev/test splits in BIO. Train draws entities from the
/// shared inventory only; dev and test each add their own disjoint set of
/// names that never occur in training. The unlabeled split uses every name.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.train == 0 || cfg.entities_per_type < 2 || cfg.fillers == 0 {
        return Err(Error::contract("synth: train, fillers and entities_per_type must be positive (≥ 2 entities)"));
    }
    if !(0.0..1.0).contains(&cfg.unseen_fraction) {
        return Err(Error::contract("synth: unseen_fraction must lie in [0, 1)"));
    }
    let mut rng = RngSeed(cfg.seed).rng();
    let mut used = HashSet::new();
    let dis = inventory(&mut rng, cfg, &DISEASE_SUFFIXES, DISEASE, &mut used);
    let chem = inventory(&mut rng, cfg, &CHEMICAL_SUFFIXES, CHEMICAL, &mut used);
    let filler = fillers(&mut rng, cfg.fillers, &mut used);
    let pool = |inv: &Inventory, extra: &[Vec<String>]| -> Vec<Vec<String>> { inv.seen.iter().chain(extra).cloned().collect() };
    let (dev_dis, dev_chem) = (pool(&dis, &dis.dev_only), pool(&chem, &chem.dev_only));
    let (test_dis, test_chem) = (pool(&dis, &dis.test_only), pool(&chem, &chem.test_only));

    let mut split = |n: usize, d: &[Vec<String>], c: &[Vec<String>]| -> Vec<RawSentence> {
        (0..n).map(|_| sentence(&mut rng, d, c, &filler)).collect()
    };
    let train = split(cfg.train, &dis.seen, &chem.seen);
    let dev = split(cfg.dev, &dev_dis, &dev_chem);
    let test = split(cfg.test, &test_dis, &test_chem);
    let all = |inv: &Inventory| -> Vec<Vec<String>> { inv.seen.iter().chain(&inv.dev_only).chain(&inv.test_only).cloned().collect() };
    let unlabeled = split(cfg.unlabeled, &all(&dis), &all(&chem))
        .into_iter()
        .map(|s| RawSentence { tokens: s.tokens, tags: None })
        .collect();
    Ok(SynthCorpus { train, dev, test, unlabeled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{is_bio, CorpusConfig, Vocabularies};

    #[test]
    fn deterministic_and_valid() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (600, 150, 200));
        for s in a.train.iter().chain(&a.dev).chain(&a.test) {
            let tags = s.tags.as_ref().unwrap();
            assert_eq!(tags.len(), s.tokens.len());
            assert!(is_bio(tags));
        }
    }

    #[test]
    fn vocabulary_in_target_range() {
        let c = generate(&SynthConfig::default()).unwrap();
        let all: Vec<RawSentence> = c.train.iter().chain(&c.dev).chain(&c.test).cloned().collect();
        let v = Vocabularies::build(&all, &CorpusConfig::default()).unwrap();
        assert!((1000..=2000).contains(&v.words.len()), "{}", v.words.len());
        assert_eq!(v.tags.entity_types(), vec![CHEMICAL, DISEASE]);
    }

    #[test]
    fn test_split_has_unseen_entities() {
        let c = generate(&SynthConfig::default()).unwrap();
        let heads = |split: &[RawSentence]| -> HashSet<String> {
            split
                .iter()
                .flat_map(|s| {
                    s.tokens
                        .iter()
                        .zip(s.tags.as_ref().unwrap())
                        .filter(|(_, t)| t.as_str() != "O")
                        .map(|(w, _)| w.clone())
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let train = heads(&c.train);
        let test = heads(&c.test);
        assert!(test.difference(&train).count() > 5);
    }

    #[test]
    fn unlabeled_split_has_no_tags() {
        let c = generate(&SynthConfig {
            unlabeled: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!(c.unlabeled.len(), 10);
        assert!(c.unlabeled.iter().all(|s| s.tags.is_none()));
    }
}
