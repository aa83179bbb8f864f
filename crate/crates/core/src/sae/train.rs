use serde::{Deserialize, Serialize};

use crate::data::ActivationStore;
use crate::error::{Error, Result};
use crate::math::{AdamConfig, AdamState, Matrix, Rng};

use super::{SaeConfig, TopKSae};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps without any activation after which a feature is reported dead.
    pub dead_feature_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            steps: 1000,
            batch_size: 256,
            seed: 42,
            dead_feature_window: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.steps == 0 || self.batch_size == 0 || self.dead_feature_window == 0 {
            return Err(Error::Config(format!("training settings must all be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch loss of every step.
    pub loss_curve: Vec<f64>,
    pub rows_seen: usize,
    /// Features with no activation during the final window of steps.
    pub dead_features: Vec<usize>,
}

/// Stepwise trainer over a fixed activation matrix, reshuffled every epoch.
pub struct SaeTrainer {
    sae: TopKSae,
    cfg: TrainConfig,
    adam: AdamState,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    last_active: Vec<usize>,
    report: TrainReport,
}

impl SaeTrainer {
    pub fn new(config: SaeConfig, cfg: TrainConfig, n_rows: usize) -> Result<Self> {
        cfg.validate()?;
        if n_rows == 0 {
            return Err(Error::Input("no activation rows to train on".into()));
        }
        let sae = TopKSae::new(config, cfg.seed)?;
        let lens = [config.a * config.d, config.d, config.d * config.a, config.a];
        let mut rng = Rng::new(cfg.seed).derive(1);
        let mut order: Vec<usize> = (0..n_rows).collect();
        rng.shuffle(&mut order);
        Ok(Self {
            adam: AdamState::new(&lens, AdamConfig::default()),
            last_active: vec![0; config.d],
            sae,
            cfg,
            rng,
            order,
            cursor: 0,
            report: TrainReport::default(),
        })
    }

    pub fn sae(&self) -> &TopKSae {
        &self.sae
    }

    pub fn steps_done(&self) -> usize {
        self.report.loss_curve.len()
    }

    fn next_batch(&mut self, acts: &Matrix) -> Matrix {
        let mut idx = Vec::with_capacity(self.cfg.batch_size);
        while idx.len() < self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            let take = (self.cfg.batch_size - idx.len()).min(self.order.len() - self.cursor);
            idx.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        acts.select_rows(&idx)
    }

    /// One Adam step on the next mini-batch; returns the batch loss.
    pub fn step(&mut self, acts: &Matrix) -> Result<f64> {
        if acts.rows() != self.order.len() {
            return Err(Error::Input(format!(
                "trainer was built for {} rows, got {}",
                self.order.len(),
                acts.rows()
            )));
        }
        let batch = self.next_batch(acts);
        let (loss, g) = self.sae.loss_and_grad(&batch)?;
        let step = self.steps_done() + 1;
        for (j, &gb) in g.b_enc.iter().enumerate() {
            if gb != 0.0 || g.w_dec.row(j).iter().any(|&v| v != 0.0) {
                self.last_active[j] = step;
            }
        }
        let grads: [&[f32]; 4] = [g.w_enc.data(), &g.b_enc, g.w_dec.data(), &g.b_dec];
        let sae = &mut self.sae;
        let mut params: [&mut [f32]; 4] = [
            sae.w_enc.data_mut(),
            &mut sae.b_enc,
            sae.w_dec.data_mut(),
            &mut sae.b_dec,
        ];
        self.adam.step(&mut params, &grads, self.cfg.lr)?;
        sae.normalize_decoder();
        if !sae.is_finite() {
            return Err(Error::Invariant(format!("non-finite SAE weights after step {step}")));
        }
        self.report.loss_curve.push(loss);
        self.report.rows_seen += batch.rows();
        Ok(loss)
    }

    /// Runs up to `n` further steps without exceeding the configured total.
    pub fn run(&mut self, acts: &Matrix, n: usize) -> Result<()> {
        let end = (self.steps_done() + n).min(self.cfg.steps);
        while self.steps_done() < end {
            let loss = self.step(acts)?;
            if self.steps_done() % 500 == 0 {
                log::debug!("sae step {}: loss {loss:.6}", self.steps_done());
            }
        }
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.steps_done() >= self.cfg.steps
    }

    pub fn finish(self) -> (TopKSae, TrainReport) {
        let mut report = self.report;
        let steps = report.loss_curve.len();
        let window = self.cfg.dead_feature_window;
        if steps >= window {
            report.dead_features = self
                .last_active
                .iter()
                .enumerate()
                .filter(|&(_, &last)| steps - last >= window)
                .map(|(j, _)| j)
                .collect();
        }
        (self.sae, report)
    }
}

/// Trains a fresh SAE on `acts` and stamps it with the store's provenance.
pub fn train_sae(acts: &ActivationStore, config: SaeConfig, cfg: &TrainConfig) -> Result<(TopKSae, TrainReport)> {
    if acts.width() != config.a {
        return Err(Error::Config(format!(
            "activation width {} differs from SAE input size {}",
            acts.width(),
            config.a
        )));
    }
    let mut trainer = SaeTrainer::new(config, cfg.clone(), acts.len())?;
    trainer.run(&acts.acts, cfg.steps)?;
    let (mut sae, report) = trainer.finish();
    sae.dataset_tag = acts.dataset_tag.clone();
    sae.layer = acts.layer;
    sae.model_id = acts.model_id.clone();
    Ok((sae, report))
}
