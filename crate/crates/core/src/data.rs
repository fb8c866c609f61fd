//! Datasets: the synthetic marked-token task and word-level CSV text classification.
//!
//! Marked-task vocabulary layout: `0 = PAD`, `1 = MARKER`, then `n_values`
//! value tokens, then [`FILLER_COUNT`] filler tokens. Each sequence holds two
//! markers, each immediately followed by a value; the label is 1 when the two
//! values match.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;

pub const PAD: usize = 0;
pub const MARKER: usize = 1;
pub const UNK: usize = 1;
pub const FILLER_COUNT: usize = 16;
const FIRST_VALUE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedConfig {
    pub seq_len: usize,
    pub n_values: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl MarkedConfig {
    pub fn vocab_size(&self) -> usize {
        marked_vocab_size(self.n_values)
    }
}

pub fn marked_vocab_size(n_values: usize) -> usize {
    FIRST_VALUE + n_values + FILLER_COUNT
}

/// Train/validation/test examples with their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub seed: u64,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    /// Word list for CSV corpora, indexed by token id.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocab: Vec<String>,
}

impl DatasetSplit {
    pub fn part(&self, which: SplitName) -> &[Example] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Examples of a batch packed for the model.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        let tokens = TokenBatch::from_sequences(examples.iter().map(|e| e.tokens.as_slice()))?;
        Ok(Self {
            tokens,
            labels: examples.iter().map(|e| e.label).collect(),
        })
    }
}

/// Consecutive batches of at most `size` examples, in order.
pub fn batches(examples: &[Example], size: usize) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::Empty("split has no examples".into()));
    }
    let size = size.max(1);
    examples
        .chunks(size)
        .map(|c| Batch::from_examples(&c.iter().collect::<Vec<_>>()))
        .collect()
}

/// Generates `n_examples` marked-task sequences. Labels alternate 1, 0, 1, ...
/// so classes are balanced to within one example.
pub fn gen_marked(seed: u64, n_examples: usize, seq_len: usize, n_values: usize) -> Result<Vec<Example>> {
    gen_marked_excluding(seed, n_examples, seq_len, n_values, &HashSet::new())
}

fn gen_marked_excluding(
    seed: u64,
    n_examples: usize,
    seq_len: usize,
    n_values: usize,
    exclude: &HashSet<Vec<usize>>,
) -> Result<Vec<Example>> {
    if seq_len < 4 {
        return Err(Error::Data(format!(
            "sequence length {seq_len} cannot hold two marker-value pairs"
        )));
    }
    if n_values < 2 {
        return Err(Error::Data(format!("need at least 2 value tokens, got {n_values}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler0 = FIRST_VALUE + n_values;
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::with_capacity(n_examples);
    let mut attempts = 0usize;
    while out.len() < n_examples {
        attempts += 1;
        if attempts > 100 * n_examples + 1000 {
            return Err(Error::Data("could not generate enough distinct sequences".into()));
        }
        let label = usize::from(out.len() % 2 == 0);
        let mut tokens: Vec<usize> = (0..seq_len).map(|_| filler0 + rng.gen_range(0..FILLER_COUNT)).collect();
        // p1 < p2, p1 + 1 < p2, p2 + 1 < seq_len
        let p1 = rng.gen_range(0..seq_len - 3);
        let p2 = rng.gen_range(p1 + 2..seq_len - 1);
        let v1 = rng.gen_range(0..n_values);
        let v2 = if label == 1 {
            v1
        } else {
            (v1 + rng.gen_range(1..n_values)) % n_values
        };
        tokens[p1] = MARKER;
        tokens[p1 + 1] = FIRST_VALUE + v1;
        tokens[p2] = MARKER;
        tokens[p2 + 1] = FIRST_VALUE + v2;
        if exclude.contains(&tokens) || !seen.insert(tokens.clone()) {
            continue;
        }
        out.push(Example { tokens, label });
    }
    Ok(out)
}

/// Relabels a marked sequence by scanning for its two markers.
pub fn marked_label(tokens: &[usize]) -> Option<usize> {
    let markers: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == MARKER)
        .map(|(i, _)| i)
        .collect();
    match markers.as_slice() {
        [a, b] if b + 1 < tokens.len() => Some(usize::from(tokens[a + 1] == tokens[b + 1])),
        _ => None,
    }
}

/// Three disjoint marked-task splits generated from seeds derived from `seed`.
pub fn marked_dataset(seed: u64, cfg: &MarkedConfig) -> Result<DatasetSplit> {
    let mut exclude = HashSet::new();
    let mut parts = Vec::new();
    for (i, size) in [cfg.train_size, cfg.val_size, cfg.test_size].into_iter().enumerate() {
        let part_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
        let part = gen_marked_excluding(part_seed, size, cfg.seq_len, cfg.n_values, &exclude)?;
        exclude.extend(part.iter().map(|e| e.tokens.clone()));
        parts.push(part);
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
        vocab_size: cfg.vocab_size(),
        seq_len: cfg.seq_len,
        num_classes: 2,
        vocab: Vec::new(),
    })
}

/// How a CSV corpus is split.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSplits {
    /// Validation examples carved from the head of the shuffled training file.
    pub val_size: usize,
    /// Optional separate held-out file.
    pub test_path: Option<PathBuf>,
    pub seed: u64,
}

/// Lowercased words split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn read_labeled_csv(path: &Path) -> Result<Vec<(String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Data(format!("{}: {e}", path.display())),
            _ => Error::Csv(e),
        })?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Data(format!(
                "{} row {}: expected a label column and a text column",
                path.display(),
                i + 1
            )));
        }
        let label = rec[0].trim().to_string();
        let text = rec.iter().skip(1).collect::<Vec<_>>().join(" ");
        rows.push((label, text));
    }
    // A header row is recognized by a non-numeric label.
    if let Some((first, _)) = rows.first() {
        if first.parse::<i64>().is_err() && rows.len() > 1 && rows[1].0.parse::<i64>().is_ok() {
            rows.remove(0);
        }
    }
    Ok(rows)
}

/// Loads a `label,text` CSV into a word-level dataset.
///
/// The vocabulary is `PAD`, `UNK` and the `vocab_size - 2` most frequent
/// training words (ties alphabetical). Sequences are truncated or padded to
/// `seq_len`.
pub fn load_text_csv(path: &Path, vocab_size: usize, seq_len: usize, splits: &CsvSplits) -> Result<DatasetSplit> {
    if vocab_size < 3 || seq_len == 0 {
        return Err(Error::Data("vocabulary needs room for PAD, UNK and one word".into()));
    }
    let mut rows = read_labeled_csv(path)?;
    let test_rows = match &splits.test_path {
        Some(p) => read_labeled_csv(p)?,
        None => Vec::new(),
    };
    let mut labels: Vec<i64> = rows
        .iter()
        .chain(&test_rows)
        .map(|(l, _)| {
            l.parse::<i64>()
                .map_err(|_| Error::Data(format!("label `{l}` is not an integer")))
        })
        .collect::<Result<Vec<_>>>()?;
    labels.sort_unstable();
    labels.dedup();
    let label_index: HashMap<i64, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(splits.seed);
    rows.shuffle(&mut rng);
    if splits.val_size >= rows.len() {
        return Err(Error::Empty(format!(
            "training split is empty after carving {} validation rows from {}",
            splits.val_size,
            rows.len()
        )));
    }
    let train_rows = rows.split_off(splits.val_size);
    let val_rows = rows;

    let mut counts: HashMap<String, usize> = HashMap::new();
    for (_, text) in &train_rows {
        for w in tokenize(text) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut vocab = vec!["<pad>".to_string(), "<unk>".to_string()];
    vocab.extend(ranked.into_iter().take(vocab_size - 2).map(|(w, _)| w));
    let ids: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();

    let encode = |rows: &[(String, String)]| -> Vec<Example> {
        rows.iter()
            .map(|(label, text)| {
                let mut tokens: Vec<usize> = tokenize(text)
                    .iter()
                    .take(seq_len)
                    .map(|w| ids.get(w.as_str()).copied().unwrap_or(UNK))
                    .collect();
                tokens.resize(seq_len, PAD);
                let label = label_index[&label.parse::<i64>().unwrap()];
                Example { tokens, label }
            })
            .collect()
    };
    let train = encode(&train_rows);
    let val = encode(&val_rows);
    let test = encode(&test_rows);
    if val.is_empty() {
        return Err(Error::Empty("validation split is empty".into()));
    }
    if splits.test_path.is_some() && test.is_empty() {
        return Err(Error::Empty("test split is empty".into()));
    }
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed: splits.seed,
        vocab_size: vocab.len().max(vocab_size),
        seq_len,
        num_classes: labels.len(),
        vocab,
    })
}

/// Word for an id, if the dataset carries a vocabulary.
pub fn id_to_word(split: &DatasetSplit, id: usize) -> Option<&str> {
    split.vocab.get(id).map(String::as_str)
}

pub fn word_to_id(split: &DatasetSplit, word: &str) -> usize {
    split.vocab.iter().position(|w| w == word).unwrap_or(UNK)
}

#[derive(Serialize, Deserialize)]
struct FixtureLine<'a> {
    split: SplitName,
    label: usize,
    #[serde(borrow)]
    tokens: std::borrow::Cow<'a, [usize]>,
}

/// Writes a dataset as JSON lines: one header object, then one example per line.
pub fn write_jsonl(split: &DatasetSplit, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = BTreeMap::new();
    header.insert("seed", serde_json::json!(split.seed));
    header.insert("vocab_size", serde_json::json!(split.vocab_size));
    header.insert("seq_len", serde_json::json!(split.seq_len));
    header.insert("num_classes", serde_json::json!(split.num_classes));
    if !split.vocab.is_empty() {
        header.insert("vocab", serde_json::json!(split.vocab));
    }
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(|e| Error::io(path, e))?;
    for (name, part) in [
        (SplitName::Train, &split.train),
        (SplitName::Val, &split.val),
        (SplitName::Test, &split.test),
    ] {
        for ex in part {
            let line = FixtureLine {
                split: name,
                label: ex.label,
                tokens: std::borrow::Cow::Borrowed(&ex.tokens),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<DatasetSplit> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header: serde_json::Value = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(|e| Error::io(path, e))?)?,
        None => return Err(Error::Data(format!("{}: empty fixture", path.display()))),
    };
    let field = |k: &str| -> Result<u64> {
        header[k]
            .as_u64()
            .ok_or_else(|| Error::Data(format!("fixture header lacks `{k}`")))
    };
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed: field("seed")?,
        vocab_size: field("vocab_size")? as usize,
        seq_len: field("seq_len")? as usize,
        num_classes: field("num_classes")? as usize,
        vocab: serde_json::from_value(header.get("vocab").cloned().unwrap_or(serde_json::json!([])))?,
    };
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FixtureLine<'_> = serde_json::from_str(&line)?;
        let ex = Example {
            tokens: rec.tokens.into_owned(),
            label: rec.label,
        };
        match rec.split {
            SplitName::Train => split.train.push(ex),
            SplitName::Val => split.val.push(ex),
            SplitName::Test => split.test.push(ex),
        }
    }
    Ok(split)
}
