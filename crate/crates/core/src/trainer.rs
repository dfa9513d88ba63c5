//! Two-stage training: generic pretraining on conventional clips, then
//! adaptation to equirectangular clips with the latitude-weighted loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::degrade::DegradationConfig;
use crate::erp::{build_distortion_map, ErpFrame};
use crate::error::{Result, S3poError};
use crate::losses::{wss_l1, wss_l1_gradient, LossConfig};
use crate::model::{Gradients, Model, ModelConfig, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Generic super-resolution on conventional video.
    Pretrain,
    /// Fine-tuning on equirectangular video.
    Adapt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Clips whose gradients are accumulated into one update.
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub loss: LossConfig,
    pub degradation: DegradationConfig,
    /// Detach the recurrent state every this many steps. `None` unrolls the
    /// whole clip.
    pub unroll_truncation: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::adapt()
    }
}

impl TrainConfig {
    /// Stage one: 70 epochs, 8 clips per update, plain Smooth-L1.
    pub fn pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            epochs: 70,
            batch_size: 8,
            lr_initial: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            loss: LossConfig::unweighted(),
            degradation: DegradationConfig::default(),
            unroll_truncation: None,
            seed: 0,
        }
    }

    /// Stage two: 75 epochs, one clip per update, weighted loss.
    pub fn adapt() -> Self {
        TrainConfig {
            stage: Stage::Adapt,
            epochs: 75,
            batch_size: 1,
            loss: LossConfig::default(),
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_initial > 0.0) {
            return Err(S3poError::invalid("lr_initial must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(S3poError::invalid("lr_decay_factor must lie in (0, 1)"));
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 {
            return Err(S3poError::invalid("lr_decay_every and batch_size must be positive"));
        }
        if self.unroll_truncation == Some(0) {
            return Err(S3poError::invalid("unroll_truncation must be positive"));
        }
        self.loss.validate()?;
        self.degradation.validate()
    }
}

/// Step-decayed learning rate: `lr_initial · decay^floor(epoch / every)`.
pub fn lr_at(epoch: i64, cfg: &TrainConfig) -> Result<f64> {
    if epoch < 0 {
        return Err(S3poError::invalid(format!("negative epoch {epoch}")));
    }
    let steps = (epoch as usize / cfg.lr_decay_every) as i32;
    Ok(cfg.lr_initial * cfg.lr_decay_factor.powi(steps))
}

/// First and second moment estimates, one array per parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .arrays()
            .iter()
            .map(|a| vec![0.0; a.values.len()])
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(
        &mut self,
        params: &mut ParameterSet,
        grads: &Gradients,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, array) in params.arrays_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.arrays[i]);
            for j in 0..array.values.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                array.values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    fn quantize_f32(&mut self) {
        for a in self.m.iter_mut().chain(self.v.iter_mut()) {
            a.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

/// Paired low- and high-resolution frames of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingClip {
    pub id: String,
    pub lr: Vec<ErpFrame>,
    pub gt: Vec<ErpFrame>,
}

impl TrainingClip {
    pub fn new(id: impl Into<String>, lr: Vec<ErpFrame>, gt: Vec<ErpFrame>) -> Result<Self> {
        let id = id.into();
        if lr.is_empty() || lr.len() != gt.len() {
            return Err(S3poError::invalid(format!(
                "clip {id}: {} LR frames vs {} GT frames",
                lr.len(),
                gt.len()
            )));
        }
        Ok(TrainingClip { id, lr, gt })
    }

    /// Degrades `gt` with `cfg` to build the inputs.
    pub fn from_gt(id: impl Into<String>, gt: Vec<ErpFrame>, cfg: &DegradationConfig) -> Result<Self> {
        let lr = gt
            .iter()
            .map(|f| crate::degrade::degrade(f, cfg))
            .collect::<Result<Vec<_>>>()?;
        Self::new(id, lr, gt)
    }
}

/// One row of `train_log.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub clip_id: String,
    pub loss: f64,
    pub lr: f64,
}

/// Mutable training session around a model.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    adam: AdamState,
    epoch: usize,
    updates: usize,
    loss_history: Vec<f64>,
    log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Trainer {
            model,
            cfg,
            adam,
            epoch: 0,
            updates: 0,
            loss_history: Vec::new(),
            log: Vec::new(),
        })
    }

    /// Starts a new stage from the weights of `ckpt`. The optimizer state and
    /// epoch counter start fresh.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let model = Model::from_parts(ckpt.model.clone(), ckpt.params.clone())?;
        Self::new(model, cfg)
    }

    /// Continues the exact session saved in `ckpt`.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt
            .train
            .clone()
            .ok_or_else(|| S3poError::format("config.json", "checkpoint has no training config"))?;
        let mut t = Self::from_checkpoint(ckpt, cfg)?;
        if let Some(adam) = &ckpt.optimizer {
            t.adam = adam.clone();
        }
        t.epoch = ckpt.epoch;
        t.loss_history = ckpt.loss_history.clone();
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Mean loss of every update so far.
    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    /// Timestep-averaged loss of a clip under the current weights.
    pub fn clip_loss(&self, clip: &TrainingClip) -> Result<f64> {
        let outputs = self.model.forward_clip(&clip.lr)?;
        let map = hr_map(&clip.gt[0])?;
        let mut total = 0.0;
        for (hr, gt) in outputs.iter().zip(&clip.gt) {
            total += wss_l1(hr.pixels(), gt.pixels(), &map, &self.cfg.loss)?;
        }
        Ok(total / clip.lr.len() as f64)
    }

    /// Loss and parameter gradients of one clip, back-propagated through the
    /// whole recurrence (or up to the truncation bound).
    pub fn clip_gradients(&self, clip: &TrainingClip) -> Result<(f64, Gradients)> {
        let mut g = self.model.graph();
        let outputs = self
            .model
            .unroll(&mut g, &clip.lr, self.cfg.unroll_truncation)?;
        let map = hr_map(&clip.gt[0])?;
        let n = clip.lr.len() as f64;
        let mut total = 0.0;
        let mut seeds = Vec::with_capacity(outputs.len());
        for (&v, gt) in outputs.iter().zip(&clip.gt) {
            let pred = g.value(v);
            total += wss_l1(pred, gt.pixels(), &map, &self.cfg.loss)?;
            let mut grad = wss_l1_gradient(pred, gt.pixels(), &map, &self.cfg.loss)?;
            grad.data_mut().iter_mut().for_each(|x| *x /= n);
            seeds.push((v, grad));
        }
        let grads = g.backward(&seeds)?;
        Ok((total / n, grads))
    }

    /// Applies one optimizer update from already accumulated gradients.
    pub fn apply(&mut self, grads: &Gradients) -> Result<()> {
        let lr = lr_at(self.epoch as i64, &self.cfg)?;
        let c = &self.cfg;
        let (b1, b2, eps) = (c.beta1, c.beta2, c.epsilon);
        self.adam
            .update(self.model.params_mut(), grads, lr, b1, b2, eps);
        self.model.params_mut().quantize_f32();
        self.adam.quantize_f32();
        self.updates += 1;
        Ok(())
    }

    /// One update from a batch of clips. Returns the mean clip loss before the
    /// update.
    pub fn update_on(&mut self, batch: &[&TrainingClip]) -> Result<f64> {
        if batch.is_empty() {
            return Err(S3poError::invalid("empty batch"));
        }
        let lr = lr_at(self.epoch as i64, &self.cfg)?;
        let mut acc = Gradients::zeros_like(self.model.params());
        let mut total = 0.0;
        for clip in batch {
            let (loss, grads) = self.clip_gradients(clip)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(S3poError::Numeric(format!(
                    "non-finite loss or gradient on clip {} at epoch {}",
                    clip.id, self.epoch
                )));
            }
            self.log.push(LogRow {
                epoch: self.epoch,
                clip_id: clip.id.clone(),
                loss,
                lr,
            });
            acc.add_assign(&grads);
            total += loss;
        }
        acc.scale(1.0 / batch.len() as f64);
        self.apply(&acc)?;
        let mean = total / batch.len() as f64;
        self.loss_history.push(mean);
        Ok(mean)
    }

    /// One pass over `clips` in a seeded order. Returns the mean loss.
    pub fn run_epoch(&mut self, clips: &[TrainingClip]) -> Result<f64> {
        if clips.is_empty() {
            return Err(S3poError::invalid("training set is empty"));
        }
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (self.epoch as u64).wrapping_mul(0x9E37_79B9));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&TrainingClip> = chunk.iter().map(|&i| &clips[i]).collect();
            total += self.update_on(&batch)? * batch.len() as f64;
        }
        self.epoch += 1;
        Ok(total / clips.len() as f64)
    }

    /// Runs every configured epoch.
    pub fn run(&mut self, clips: &[TrainingClip]) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let loss = self.run_epoch(clips)?;
            log::info!("epoch {} loss {loss:.6}", self.epoch);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config().clone(),
            params: self.model.params().clone(),
            optimizer: Some(self.adam.clone()),
            train: Some(self.cfg.clone()),
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
        }
    }

    /// Writes `train_log.csv` with columns epoch, clip_id, loss, lr.
    pub fn write_log(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| S3poError::io(path, std::io::Error::other(e)))?;
        for row in &self.log {
            w.serialize(row)
                .map_err(|e| S3poError::io(path, std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| S3poError::io(path, e))
    }
}

fn hr_map(gt: &ErpFrame) -> Result<crate::erp::DistortionMap> {
    build_distortion_map(gt.height(), gt.width())
}

/// Trains a model from scratch or from `init` and returns the final
/// checkpoint.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    clips: &[TrainingClip],
    init: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    if clips.is_empty() {
        return Err(S3poError::invalid("training set is empty"));
    }
    let mut trainer = match init {
        Some(ckpt) => {
            ckpt.params.check_layout(model_cfg)?;
            let model = Model::from_parts(model_cfg.clone(), ckpt.params.clone())?;
            Trainer::new(model, train_cfg.clone())?
        }
        None => Trainer::new(Model::new(model_cfg.clone())?, train_cfg.clone())?,
    };
    trainer.run(clips)?;
    Ok(trainer.checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamArray;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::adapt();
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(9, &cfg).unwrap(), 1e-4);
        assert!((lr_at(10, &cfg).unwrap() - 1e-5).abs() < 1e-20);
        assert!((lr_at(19, &cfg).unwrap() - 1e-5).abs() < 1e-20);
        assert!((lr_at(25, &cfg).unwrap() - 1e-6).abs() < 1e-21);
        assert!(lr_at(-1, &cfg).is_err());
    }

    #[test]
    fn paper_stage_settings() {
        let p = TrainConfig::pretrain();
        assert_eq!((p.epochs, p.batch_size, p.loss.weighted), (70, 8, false));
        let a = TrainConfig::adapt();
        assert_eq!((a.epochs, a.batch_size, a.loss.weighted), (75, 1, true));
    }

    fn scalar_params(x: f64) -> ParameterSet {
        ParameterSet::from_arrays(vec![ParamArray {
            name: "x".into(),
            shape: vec![1],
            values: vec![x],
        }])
        .unwrap()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_params(0.3);
        let before = p.clone();
        let mut adam = AdamState::new(&p);
        let g = Gradients { arrays: vec![vec![0.0]] };
        adam.update(&mut p, &g, 1e-3, 0.9, 0.999, 1e-8);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_matches_textbook_on_quadratic() {
        // f(x) = (x - 3)^2 with a hand-written reference recurrence.
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut p = scalar_params(0.0);
        let mut adam = AdamState::new(&p);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * (p.arrays()[0].values[0] - 3.0);
            adam.update(&mut p, &Gradients { arrays: vec![vec![g]] }, lr, b1, b2, eps);

            let gx = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * gx;
            v = b2 * v + (1.0 - b2) * gx * gx;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!((p.arrays()[0].values[0] - x).abs() < 1e-10);
        }
        assert!((x - 3.0).abs() < 1.0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::adapt();
        c.lr_decay_factor = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::adapt();
        c.lr_initial = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::adapt();
        c.unroll_truncation = Some(0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = ModelConfig::tiny(4, 1);
        assert!(train(&cfg, &TrainConfig::adapt(), &[], None).is_err());
    }
}
