use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{assign_tensors, read_bundle, write_bundle};
use crate::error::Result;

use super::{LmConfig, TinyLm};

#[derive(Serialize, Deserialize)]
struct LmMeta {
    kind: String,
    model_id: String,
    config: LmConfig,
}

impl TinyLm {
    /// Short content hash of the config and every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        for (name, m) in self.named_tensors() {
            h.update(name.as_bytes());
            for x in m.data() {
                h.update(x.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `path` (JSON sidecar) and its `.bin` tensor payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = LmMeta {
            kind: "tiny_lm".into(),
            model_id: self.fingerprint(),
            config: self.config.clone(),
        };
        write_bundle(path, &meta, &self.named_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors): (LmMeta, _) = read_bundle(path)?;
        let mut model = TinyLm::zeros(meta.config)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let slots = names.into_iter().zip(model.tensors_mut()).collect();
        assign_tensors(path, tensors, slots)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.json");
        let cfg = LmConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 5,
            ..LmConfig::default()
        };
        let m = TinyLm::new(cfg, 3).unwrap();
        m.save(&path).unwrap();
        let back = TinyLm::load(&path).unwrap();
        assert_eq!(back.fingerprint(), m.fingerprint());
        let toks = [0u32, 4, 2];
        assert_eq!(back.forward(&toks).unwrap().logits, m.forward(&toks).unwrap().logits);
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let cfg = LmConfig::default();
        let a = TinyLm::new(cfg.clone(), 1).unwrap();
        let b = TinyLm::new(cfg, 2).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }
}
