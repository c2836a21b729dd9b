//! Synthetic sequences with planted class motifs. Every planted token is
//! flagged, so trained masks can be scored against known ground truth.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, LabelAssignment, LabeledDataset, Vocabulary};
use crate::error::{bail, Result};

const BASES: [char; 4] = ['A', 'C', 'G', 'T'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    pub k: usize,
    pub sequence_bases: usize,
    /// Probabilities of A, C, G, T in the background.
    pub background: [f64; 4],
    /// Class count per head, coarse to fine. Each head's count divides the
    /// next one's; class `c` of head `j+1` belongs to class
    /// `c / (C[j+1] / C[j])` of head `j`.
    pub head_classes: Vec<usize>,
    /// Motif per head and class. A head with an empty list plants nothing.
    pub motifs: Vec<Vec<String>>,
    /// How many times each applicable motif is planted per sequence.
    pub plantings: usize,
}

impl MotifSpec {
    /// Random motifs of `motif_tokens` k-mers each. Tokens are drawn without
    /// replacement across all motifs while the k-mer space allows it.
    pub fn random(
        k: usize,
        sequence_bases: usize,
        head_classes: Vec<usize>,
        motif_tokens: usize,
        plantings: usize,
        seed: u64,
    ) -> Result<Self> {
        let vocab = Vocabulary::nucleotide(k)?;
        let n_motifs: usize = head_classes.iter().sum();
        let needed = n_motifs * motif_tokens;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kmers: Vec<usize> = (0..vocab.num_kmers()).collect();
        kmers.shuffle(&mut rng);
        let mut pool = kmers.into_iter().cycle();
        let mut motifs = Vec::with_capacity(head_classes.len());
        for &c in &head_classes {
            let mut head = Vec::with_capacity(c);
            for _ in 0..c {
                let motif: String = (0..motif_tokens)
                    .map(|_| {
                        let id = pool.next().expect("cycle") + super::NUM_SPECIAL;
                        vocab.kmer_of(id).expect("k-mer id")
                    })
                    .collect();
                head.push(motif);
            }
            motifs.push(head);
        }
        if needed > vocab.num_kmers() {
            log::warn!(
                "{needed} motif tokens exceed {} k-mers; tokens repeat",
                vocab.num_kmers()
            );
        }
        let spec = MotifSpec {
            k,
            sequence_bases,
            background: [0.25; 4],
            head_classes,
            motifs,
            plantings,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn tokens_per_sequence(&self) -> usize {
        self.sequence_bases / self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !self.sequence_bases.is_multiple_of(self.k) {
            bail!(
                Config,
                "sequence length {} is not a multiple of k={}",
                self.sequence_bases,
                self.k
            );
        }
        if self.head_classes.is_empty() || self.head_classes.iter().any(|c| *c < 2) {
            bail!(Config, "every head needs at least two classes");
        }
        for w in self.head_classes.windows(2) {
            if w[1] % w[0] != 0 {
                bail!(Config, "head class counts {:?} are not nested", self.head_classes);
            }
        }
        if self.motifs.len() != self.head_classes.len() {
            bail!(
                Config,
                "motif lists for {} heads, expected {}",
                self.motifs.len(),
                self.head_classes.len()
            );
        }
        let mut all = Vec::new();
        for (h, (list, c)) in self.motifs.iter().zip(&self.head_classes).enumerate() {
            if !list.is_empty() && list.len() != *c {
                bail!(Config, "head {} has {} motifs for {} classes", h, list.len(), c);
            }
            for m in list {
                if m.is_empty() || m.len() % self.k != 0 {
                    bail!(Config, "motif {:?} is not aligned to k={}", m, self.k);
                }
                if m.chars().any(|ch| !BASES.contains(&ch)) {
                    bail!(Config, "motif {:?} has non-ACGT symbols", m);
                }
                all.push(m.as_str());
            }
        }
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            bail!(Config, "motifs must be pairwise distinct");
        }
        let longest: usize = self
            .motifs
            .iter()
            .map(|l| l.iter().map(String::len).max().unwrap_or(0))
            .sum();
        if longest * self.plantings > self.sequence_bases {
            bail!(
                Config,
                "planted motifs ({} bases) longer than the sequence ({})",
                longest * self.plantings,
                self.sequence_bases
            );
        }
        if self.background.iter().any(|p| *p < 0.0) || self.background.iter().sum::<f64>() <= 0.0 {
            bail!(Config, "invalid background distribution");
        }
        Ok(())
    }

    /// Labels of every head for a class of the finest head.
    pub fn labels_for(&self, finest: usize) -> LabelAssignment {
        let last = *self.head_classes.last().expect("validated");
        LabelAssignment(self.head_classes.iter().map(|c| finest / (last / c)).collect())
    }
}

/// `n_per_class` sequences for every class of the finest head, interleaved
/// by class so the dataset is balanced in every prefix of whole rounds.
pub fn generate_motif_dataset(spec: &MotifSpec, n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let vocab = Vocabulary::nucleotide(spec.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = WeightedIndex::new(spec.background).map_err(|e| crate::Error::Config(e.to_string()))?;
    let finest = *spec.head_classes.last().expect("validated");
    let d = spec.tokens_per_sequence();
    let mut examples = Vec::with_capacity(finest * n_per_class);
    for i in 0..n_per_class {
        for class in 0..finest {
            let labels = spec.labels_for(class);
            let mut bases: Vec<u8> = (0..spec.sequence_bases)
                .map(|_| BASES[background.sample(&mut rng)] as u8)
                .collect();
            let mut blocks: Vec<&str> = Vec::new();
            for _ in 0..spec.plantings {
                for (head, y) in labels.0.iter().enumerate() {
                    if let Some(m) = spec.motifs[head].get(*y) {
                        blocks.push(m);
                    }
                }
            }
            blocks.shuffle(&mut rng);
            let lens: Vec<usize> = blocks.iter().map(|b| b.len() / spec.k).collect();
            let free = d - lens.iter().sum::<usize>();
            let mut gaps: Vec<usize> = (0..blocks.len()).map(|_| rng.gen_range(0..=free)).collect();
            gaps.sort_unstable();
            let mut flags = vec![false; d];
            let mut used = 0;
            for ((block, len), gap) in blocks.iter().zip(&lens).zip(&gaps) {
                let start = gap + used;
                bases[start * spec.k..(start + len) * spec.k].copy_from_slice(block.as_bytes());
                flags[start..start + len].iter_mut().for_each(|f| *f = true);
                used += len;
            }
            let seq = String::from_utf8(bases).expect("ascii");
            examples.push(Example {
                id: format!("syn{:06}", i * finest + class),
                tokens: vocab.tokenize(&seq),
                labels,
                flags: Some(flags),
            });
        }
    }
    LabeledDataset::new(spec.head_classes.clone(), examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> MotifSpec {
        MotifSpec::random(3, 192, vec![4, 12], 3, 2, 11).unwrap()
    }

    #[test]
    fn balanced_by_construction() {
        let s = MotifSpec::random(3, 96, vec![2, 4], 2, 1, 0).unwrap();
        let ds = generate_motif_dataset(&s, 100, 1).unwrap();
        assert_eq!(ds.len(), 400);
        for c in 0..4 {
            assert_eq!(ds.examples.iter().filter(|e| e.labels.0[1] == c).count(), 100);
        }
    }

    #[test]
    fn twelve_base_motif_flags_two_tokens() {
        let s = MotifSpec {
            k: 6,
            sequence_bases: 120,
            background: [0.25; 4],
            head_classes: vec![2],
            motifs: vec![vec!["ACGTACGTACGT".into(), "TTTTGGGGCCCC".into()]],
            plantings: 1,
        };
        let ds = generate_motif_dataset(&s, 5, 3).unwrap();
        for e in &ds.examples {
            assert_eq!(e.flags.as_ref().unwrap().iter().filter(|f| **f).count(), 2);
        }
    }

    #[test]
    fn flag_count_matches_plantings() {
        let s = spec();
        let ds = generate_motif_dataset(&s, 3, 9).unwrap();
        for e in &ds.examples {
            let flagged = e.flags.as_ref().unwrap().iter().filter(|f| **f).count();
            assert_eq!(flagged, 2 * (3 + 3));
        }
    }

    #[test]
    fn flagged_spans_contain_the_class_motifs() {
        let s = spec();
        let vocab = Vocabulary::nucleotide(3).unwrap();
        let ds = generate_motif_dataset(&s, 4, 5).unwrap();
        for e in &ds.examples {
            let text = vocab.detokenize(&e.tokens);
            let flags = e.flags.as_ref().unwrap();
            let flagged: String = flags
                .iter()
                .enumerate()
                .filter(|(_, f)| **f)
                .map(|(i, _)| vocab.token_text(e.tokens.ids()[i]))
                .collect();
            for (h, y) in e.labels.0.iter().enumerate() {
                let m = &s.motifs[h][*y];
                assert!(text.contains(m.as_str()));
                // every planted occurrence is flagged
                assert!(flagged.matches(m.as_str()).count() >= s.plantings);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let s = spec();
        assert_eq!(
            generate_motif_dataset(&s, 2, 4).unwrap(),
            generate_motif_dataset(&s, 2, 4).unwrap()
        );
        assert_ne!(
            generate_motif_dataset(&s, 2, 4).unwrap(),
            generate_motif_dataset(&s, 2, 5).unwrap()
        );
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec();
        s.motifs[0][0] = "ACGTA".into();
        assert!(s.validate().is_err());
        let mut s = spec();
        s.plantings = 100;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.motifs[1][1] = s.motifs[1][0].clone();
        assert!(s.validate().is_err());
        let mut s = spec();
        s.head_classes = vec![4, 10];
        assert!(s.validate().is_err());
    }
}
