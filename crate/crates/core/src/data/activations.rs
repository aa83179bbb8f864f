use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lm::{with_bos, TinyLm};
use crate::math::Matrix;

use super::Corpus;

/// Hidden states captured from one layer, one row per corpus token.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStore {
    pub acts: Matrix,
    pub layer: usize,
    pub model_id: String,
    pub dataset_tag: String,
}

impl ActivationStore {
    pub fn width(&self) -> usize {
        self.acts.cols()
    }

    pub fn len(&self) -> usize {
        self.acts.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.acts.rows() == 0
    }
}

/// Model input for one corpus sequence: BOS plus as many tokens as fit.
pub fn model_input(model: &TinyLm, seq: &[u32]) -> Result<Vec<u32>> {
    model.config.bos()?;
    Ok(with_bos(&model.config, seq, model.config.max_seq_len))
}

/// Post-block residual states of `layer` for every non-BOS position.
///
/// Sequences longer than the context window are truncated. Capture stops
/// once `max_rows` rows are collected, when given.
pub fn capture(model: &TinyLm, corpus: &Corpus, layer: usize, max_rows: Option<usize>) -> Result<ActivationStore> {
    if layer >= model.config.n_layers {
        return Err(Error::Config(format!("layer {layer} outside 0..{}", model.config.n_layers)));
    }
    let limit = max_rows.unwrap_or(usize::MAX);
    let mut take = Vec::new();
    let mut rows = 0;
    for seq in &corpus.sequences {
        if rows >= limit {
            break;
        }
        let n = seq.len().min(model.config.max_seq_len - 1).min(limit - rows);
        if n > 0 {
            take.push(&seq[..n]);
            rows += n;
        }
    }
    let parts: Vec<Matrix> = take
        .par_iter()
        .map(|seq| {
            let h = model.hidden_states(&model_input(model, seq)?, layer)?;
            Ok(h.select_rows(&(1..h.rows()).collect::<Vec<_>>()))
        })
        .collect::<Result<_>>()?;
    let acts = if parts.is_empty() {
        Matrix::zeros(0, model.config.d_model)
    } else {
        Matrix::vstack(&parts)?
    };
    Ok(ActivationStore {
        acts,
        layer,
        model_id: model.fingerprint(),
        dataset_tag: corpus.source_tag.as_str().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SourceTag;
    use crate::lm::LmConfig;

    fn model() -> TinyLm {
        let cfg = LmConfig {
            vocab_size: 8,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 6,
            ..LmConfig::default()
        };
        TinyLm::new(cfg, 1).unwrap()
    }

    #[test]
    fn rows_follow_tokens_and_skip_bos() {
        let m = model();
        let c = Corpus::new(8, vec![vec![3, 4, 5], vec![6; 9]], SourceTag::External).unwrap();
        let store = capture(&m, &c, 1, None).unwrap();
        assert_eq!(store.acts.shape(), (3 + 5, 8));
        let h = m.hidden_states(&[0, 3, 4, 5], 1).unwrap();
        assert_eq!(store.acts.row(0), h.row(1));
        assert_eq!(store.acts.row(2), h.row(3));
        assert_eq!(store.dataset_tag, "external");
    }

    #[test]
    fn row_cap_and_layer_check() {
        let m = model();
        let c = Corpus::new(8, vec![vec![3, 4, 5], vec![6; 4]], SourceTag::External).unwrap();
        assert_eq!(capture(&m, &c, 0, Some(4)).unwrap().len(), 4);
        assert!(matches!(capture(&m, &c, 2, None), Err(Error::Config(_))));
    }
}
