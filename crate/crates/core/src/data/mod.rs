//! Tokenization, datasets and their on-disk formats.

mod fasta;
mod motif;
mod split;
mod vocab;

pub use fasta::{load_fasta, FastaLoad};
pub use motif::{generate_motif_dataset, MotifSpec};
pub use split::{stratified_split, Split};
pub use vocab::{TokenSequence, Vocabulary, CLS, NUM_SPECIAL, PAD, UNK};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// One class index per classification head.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelAssignment(pub Vec<usize>);

impl LabelAssignment {
    pub fn heads(&self) -> usize {
        self.0.len()
    }

    pub fn check(&self, head_classes: &[usize]) -> Result<()> {
        if self.0.len() != head_classes.len() {
            bail!(Data, "{} labels for {} heads", self.0.len(), head_classes.len());
        }
        for (h, (y, c)) in self.0.iter().zip(head_classes).enumerate() {
            if y >= c {
                bail!(Data, "label {} out of range for head {} with {} classes", y, h, c);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub tokens: TokenSequence,
    pub labels: LabelAssignment,
    /// Ground-truth importance per token, synthetic data only.
    pub flags: Option<Vec<bool>>,
}

/// Head names, class names and the vocabulary a dataset was tokenized with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDictionary {
    pub vocab: Vocabulary,
    pub vocab_hash: String,
    pub heads: Vec<HeadLabels>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadLabels {
    pub name: String,
    pub classes: Vec<String>,
}

impl LabelDictionary {
    pub fn new(vocab: Vocabulary, heads: Vec<HeadLabels>) -> Self {
        let vocab_hash = vocab.hash();
        LabelDictionary {
            vocab,
            vocab_hash,
            heads,
        }
    }

    pub fn head_classes(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.classes.len()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d: LabelDictionary = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if d.vocab.hash() != d.vocab_hash {
            bail!(Data, "label dictionary vocab hash does not match its vocabulary");
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub head_classes: Vec<usize>,
    pub examples: Vec<Example>,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    id: String,
    ids: Vec<usize>,
    valid_len: usize,
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flags: Option<Vec<u8>>,
}

impl LabeledDataset {
    pub fn new(head_classes: Vec<usize>, examples: Vec<Example>) -> Result<Self> {
        for e in &examples {
            e.labels.check(&head_classes)?;
            if let Some(f) = &e.flags {
                if f.len() != e.tokens.len() {
                    bail!(Data, "{}: {} flags for {} tokens", e.id, f.len(), e.tokens.len());
                }
            }
        }
        Ok(LabeledDataset { head_classes, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        self.examples.iter().try_for_each(|e| e.tokens.check_vocab(vocab_size))
    }

    /// JSON Lines, one example per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.examples {
            let rec = JsonlRecord {
                id: e.id.clone(),
                ids: e.tokens.ids().to_vec(),
                valid_len: e.tokens.valid_len(),
                labels: e.labels.0.clone(),
                flags: e.flags.as_ref().map(|f| f.iter().map(|b| *b as u8).collect()),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path, head_classes: Vec<usize>) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut examples = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlRecord = serde_json::from_str(&line)
                .map_err(|e| crate::Error::Data(format!("{}:{}: {}", path.display(), n + 1, e)))?;
            examples.push(Example {
                id: rec.id,
                tokens: TokenSequence::padded(rec.ids, rec.valid_len)?,
                labels: LabelAssignment(rec.labels),
                flags: rec.flags.map(|f| f.into_iter().map(|b| b != 0).collect()),
            });
        }
        Self::new(head_classes, examples)
    }
}
