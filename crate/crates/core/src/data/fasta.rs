use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{Example, HeadLabels, LabelAssignment, LabelDictionary, LabeledDataset, Vocabulary};
use crate::error::{bail, Result};

#[derive(Debug, Clone)]
pub struct FastaLoad {
    pub dataset: LabeledDataset,
    pub labels: LabelDictionary,
    /// Records without a complete label row.
    pub skipped: usize,
}

fn read_fasta(path: &Path) -> Result<Vec<(String, String)>> {
    let r = BufReader::new(File::open(path)?);
    let mut records: Vec<(String, String)> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let id = header.split_whitespace().next().unwrap_or("");
            if id.is_empty() {
                bail!(Data, "{}:{}: empty FASTA header", path.display(), n + 1);
            }
            records.push((id.to_string(), String::new()));
        } else {
            match records.last_mut() {
                Some((_, seq)) => seq.push_str(&line.to_ascii_uppercase()),
                None => bail!(
                    Data,
                    "{}:{}: sequence data before the first header",
                    path.display(),
                    n + 1
                ),
            }
        }
    }
    Ok(records)
}

/// Reads a FASTA file and a labels CSV (`id,head1,head2,...`). Class names
/// per head are indexed in sorted order. Records missing from the CSV, or
/// with an empty label cell, are skipped.
pub fn load_fasta(fasta: &Path, labels_csv: &Path, vocab: &Vocabulary) -> Result<FastaLoad> {
    let records = read_fasta(fasta)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(labels_csv)?;
    let header = rdr.headers()?.clone();
    if header.len() < 2 || &header[0] != "id" {
        bail!(Data, "labels CSV header must be `id,<head>,...`");
    }
    let heads: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows: HashMap<String, Vec<String>> = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let cells: Vec<String> = row.iter().skip(1).map(str::to_string).collect();
        rows.insert(row[0].to_string(), cells);
    }

    let mut class_sets: Vec<BTreeSet<String>> = vec![BTreeSet::new(); heads.len()];
    let mut kept = Vec::new();
    let mut skipped = 0;
    for (id, seq) in records {
        match rows.get(&id) {
            Some(cells) if cells.len() == heads.len() && cells.iter().all(|c| !c.is_empty()) => {
                for (set, c) in class_sets.iter_mut().zip(cells) {
                    set.insert(c.clone());
                }
                kept.push((id, seq, cells.clone()));
            }
            _ => {
                log::warn!("skipping {id}: no complete label row");
                skipped += 1;
            }
        }
    }
    let class_lists: Vec<Vec<String>> = class_sets.into_iter().map(|s| s.into_iter().collect()).collect();
    let examples = kept
        .into_iter()
        .map(|(id, seq, cells)| {
            let labels = cells
                .iter()
                .zip(&class_lists)
                .map(|(c, list)| list.binary_search(c).expect("collected above"))
                .collect();
            Example {
                id,
                tokens: vocab.tokenize(&seq),
                labels: LabelAssignment(labels),
                flags: None,
            }
        })
        .collect();
    let head_classes = class_lists.iter().map(Vec::len).collect();
    let dict = LabelDictionary::new(
        vocab.clone(),
        heads
            .into_iter()
            .zip(class_lists)
            .map(|(name, classes)| HeadLabels { name, classes })
            .collect(),
    );
    Ok(FastaLoad {
        dataset: LabeledDataset::new(head_classes, examples)?,
        labels: dict,
        skipped,
    })
}
