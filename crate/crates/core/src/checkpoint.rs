//! JSON checkpoints for both models. Floats are written in shortest
//! round-trip form, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::explainer::{Explainer, ExplainerConfig};
use crate::explanandum::{Explanandum, ExplanandumConfig};
use crate::tensor::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Explanandum(ExplanandumConfig),
    Explainer(ExplainerConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub vocab_hash: String,
    pub config: ModelConfig,
    pub params: ParamStore,
    #[serde(default)]
    pub buffers: ParamStore,
    pub params_hash: String,
}

impl Checkpoint {
    pub fn from_explanandum(model: &Explanandum, vocab_hash: &str) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            vocab_hash: vocab_hash.to_string(),
            config: ModelConfig::Explanandum(model.config().clone()),
            params: model.params().clone(),
            buffers: ParamStore::new(),
            params_hash: model.params().hash(),
        }
    }

    pub fn from_explainer(explainer: &Explainer, vocab_hash: &str) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            vocab_hash: vocab_hash.to_string(),
            config: ModelConfig::Explainer(explainer.config().clone()),
            params: explainer.params().clone(),
            buffers: explainer.buffers().clone(),
            params_hash: explainer.params().hash(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| crate::Error::Checkpoint(format!("{}: {}", path.display(), e)))?;
        let c: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if c.version != CHECKPOINT_VERSION {
            bail!(Checkpoint, "unsupported checkpoint version {}", c.version);
        }
        if c.params.hash() != c.params_hash {
            bail!(
                Checkpoint,
                "{}: parameter hash mismatch, file is corrupt",
                path.display()
            );
        }
        Ok(c)
    }

    /// Fails unless the checkpoint was trained on the vocabulary `vocab_hash`.
    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            bail!(
                Checkpoint,
                "vocabulary hash {} does not match the data's {}",
                short(&self.vocab_hash),
                short(vocab_hash)
            );
        }
        Ok(())
    }

    /// Restored classifier, frozen.
    pub fn into_explanandum(self) -> Result<Explanandum> {
        match self.config {
            ModelConfig::Explanandum(config) => {
                let mut m = Explanandum::from_parts(config, self.params)?;
                m.freeze();
                Ok(m)
            }
            ModelConfig::Explainer(_) => bail!(Checkpoint, "expected a classifier checkpoint, found an explainer"),
        }
    }

    pub fn into_explainer(self) -> Result<Explainer> {
        match self.config {
            ModelConfig::Explainer(config) => Explainer::from_parts(config, self.params, self.buffers),
            ModelConfig::Explanandum(_) => bail!(Checkpoint, "expected an explainer checkpoint, found a classifier"),
        }
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}
