//! Word-vector loading (word2vec text format) and embedding-table
//! construction.

use std::path::Path;

use crate::corpus::{CharVocab, WordVocab, PAD_ID};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{init_uniform, init_xavier, Rng, Tensor};

/// Default half-width of the uniform range for words without a vector.
pub const OOV_RANGE: f64 = 0.005;

/// `[V × D]` lookup table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    pub matrix: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    pub found: usize,
    pub vocab: usize,
}

impl Coverage {
    /// `|vocab ∩ file words| / |vocab|`
    pub fn fraction(&self) -> f64 {
        if self.vocab == 0 {
            0.0
        } else {
            self.found as f64 / self.vocab as f64
        }
    }
}

/// Word table with every row drawn from `uniform(-range, range)`.
pub fn random_word_table<T: Scalar>(vocab: &WordVocab, dim: usize, range: f64, rng: &mut Rng) -> Result<EmbeddingTable<T>> {
    Ok(EmbeddingTable {
        matrix: init_uniform(&[vocab.len(), dim], T::of(-range), T::of(range), rng)?,
        trainable: true,
    })
}

/// Xavier-initialized character table whose PAD row is zero.
pub fn char_table<T: Scalar>(vocab: &CharVocab, dim: usize, rng: &mut Rng) -> Result<EmbeddingTable<T>> {
    let mut matrix = init_xavier(&[vocab.len(), dim], rng)?;
    matrix.data_mut()[PAD_ID * dim..(PAD_ID + 1) * dim].fill(T::zero());
    Ok(EmbeddingTable { matrix, trainable: true })
}

/// Parses word2vec text vectors. Rows of vocabulary words present in the
/// file are copied; all other rows come from `uniform(-oov_range,
/// oov_range)`. An optional `count dim` header line is detected
/// automatically. When `dim` is `None` the dimension is taken from the file.
pub fn parse_word2vec_text<T: Scalar>(
    text: &str,
    vocab: &WordVocab,
    dim: Option<usize>,
    oov_range: f64,
    rng: &mut Rng,
) -> Result<(EmbeddingTable<T>, Coverage)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    let mut file_dim = None;
    if let Some((_, first)) = lines.peek() {
        let fields: Vec<&str> = first.split_whitespace().collect();
        if fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok()) {
            file_dim = Some(fields[1].parse::<usize>().expect("checked"));
            lines.next();
        }
    }
    let mut rows: Vec<(usize, usize, Vec<T>)> = Vec::new();
    for (i, line) in lines {
        let mut fields = line.split_whitespace();
        let word = fields.next().expect("non-blank line");
        let values = fields
            .map(|f| {
                f.parse::<f64>().map(T::of).map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("malformed float `{f}`"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        let d = *file_dim.get_or_insert(values.len());
        if values.len() != d {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {d} values, found {}", values.len()),
            });
        }
        if vocab.contains(word) {
            rows.push((i + 1, vocab.id(word), values));
        }
    }
    let d = match (dim, file_dim) {
        (Some(want), Some(got)) if want != got => {
            return Err(Error::Data(format!(
                "embedding file has dimension {got}, configured dimension is {want}"
            )))
        }
        (Some(want), _) => want,
        (None, Some(got)) => got,
        (None, None) => return Err(Error::Data("empty embedding file and no dimension configured".into())),
    };
    let mut table = random_word_table::<T>(vocab, d, oov_range, rng)?;
    let mut seen = vec![false; vocab.len()];
    for (_, id, values) in rows {
        table.matrix.data_mut()[id * d..(id + 1) * d].copy_from_slice(&values);
        seen[id] = true;
    }
    let found = seen.iter().filter(|&&s| s).count();
    Ok((table, Coverage { found, vocab: vocab.len() }))
}

pub fn load_word2vec_text<T: Scalar>(
    path: &Path,
    vocab: &WordVocab,
    dim: Option<usize>,
    oov_range: f64,
    rng: &mut Rng,
) -> Result<(EmbeddingTable<T>, Coverage)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word2vec_text(&text, vocab, dim, oov_range, rng)
}
