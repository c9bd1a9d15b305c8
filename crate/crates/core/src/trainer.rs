//! Staged training: SGD with momentum and weight decay, plateau-driven
//! learning-rate decay and corner/centre crop augmentation.

use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::graph::{Gradients, NodeId, ParamGroup, ParamStore};
use crate::model::{ModelNodes, SrnModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_init: f64,
    pub lr_floor: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub max_epochs: usize,
    /// Per-stage epoch caps overriding `max_epochs`, indexed by stage - 1.
    pub stage_max_epochs: Vec<usize>,
    /// Per-stage initial learning rates overriding `lr_init`.
    pub stage_lr_init: Vec<f64>,
    pub augment: bool,
    /// Side the image is resized to before cropping; defaults to the model
    /// input height.
    pub augment_base: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_init: 1e-3,
            lr_floor: 1e-5,
            lr_decay_factor: 0.1,
            plateau_patience: 3,
            plateau_min_delta: 1e-4,
            max_epochs: 30,
            stage_max_epochs: Vec::new(),
            stage_lr_init: Vec::new(),
            augment: true,
            augment_base: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the planted-relation benchmark, training from scratch.
    /// Higher rates than the fine-tuning default, a gentler joint stage, and
    /// no crops (they shift glyphs relative to the attention grid).
    pub fn desk_benchmark(seed: u64) -> Self {
        TrainConfig {
            lr_init: 0.05,
            stage_lr_init: vec![0.05, 0.05, 0.05, 0.005],
            stage_max_epochs: vec![20, 10, 8, 10],
            augment: false,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.max_epochs == 0 || self.stage_max_epochs.contains(&0) {
            return bad("batch size and epoch caps must be positive".into());
        }
        for &lr in std::iter::once(&self.lr_init).chain(&self.stage_lr_init) {
            if !(self.lr_floor > 0.0 && self.lr_floor <= lr) {
                return bad(format!("need 0 < lr_floor <= initial rate, got {} and {lr}", self.lr_floor));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("lr_decay_factor", self.lr_decay_factor)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.plateau_min_delta >= 0.0) {
            return bad("weight decay and plateau delta must be nonnegative".into());
        }
        Ok(())
    }

    pub fn epochs_for(&self, stage: Stage) -> usize {
        self.stage_max_epochs.get(stage.index() - 1).copied().unwrap_or(self.max_epochs)
    }

    pub fn lr_for(&self, stage: Stage) -> f64 {
        self.stage_lr_init.get(stage.index() - 1).copied().unwrap_or(self.lr_init)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

/// One step of the four-stage schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Backbone and classifier on the main-net loss.
    MainNet = 1,
    /// Attention estimator and confidence layer on the attention loss.
    Attention = 2,
    /// Regularization sub-network on its own loss.
    Regularizer = 3,
    /// Everything on the aggregated plus attention loss.
    Joint = 4,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::MainNet, Stage::Attention, Stage::Regularizer, Stage::Joint];

    pub fn from_index(n: usize) -> Result<Stage> {
        Stage::ALL
            .get(n.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Config(format!("stages are numbered 1 to 4, got {n}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn trainable(self) -> &'static [ParamGroup] {
        match self {
            Stage::MainNet => &[ParamGroup::Cnn, ParamGroup::Cls],
            Stage::Attention => &[ParamGroup::Att, ParamGroup::Conv1],
            Stage::Regularizer => &[ParamGroup::Sr],
            Stage::Joint => &ParamGroup::ALL,
        }
    }

    pub fn loss(self, nodes: &ModelNodes) -> NodeId {
        match self {
            Stage::MainNet => nodes.loss_cls,
            Stage::Attention => nodes.loss_att,
            Stage::Regularizer => nodes.loss_sr,
            Stage::Joint => nodes.loss_joint,
        }
    }
}

/// Logits used for prediction after a given number of completed stages:
/// the main net until the regularizer has been trained, the aggregate after.
pub fn prediction_head(nodes: &ModelNodes, completed: usize) -> NodeId {
    if completed >= Stage::Regularizer.index() {
        nodes.y_hat
    } else {
        nodes.y_cls
    }
}

/// SGD with momentum and L2 weight decay folded into the velocity.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    /// `v <- momentum * v + grad + wd * p; p <- p - lr * v` for every
    /// trainable parameter, using the gradients accumulated in the store.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        }
        let frozen: Vec<bool> = params.iter().map(|(id, _)| params.is_frozen(id)).collect();
        for ((p, v), frozen) in params.iter_mut().zip(&mut self.velocity).zip(frozen) {
            if frozen {
                continue;
            }
            let (vel, val, grad) = (v.data_mut(), p.value.data_mut(), p.grad.data());
            for k in 0..vel.len() {
                vel[k] = self.momentum * vel[k] + grad[k] + self.weight_decay * val[k];
                val[k] -= lr * vel[k];
            }
        }
    }
}

/// Decides the learning rate after an epoch from the validation losses seen
/// since the last change. Returns the new rate and whether the stage is done.
///
/// A plateau is `patience` epochs in a row none of which beats the best
/// earlier loss by more than `min_delta`. On a plateau the rate is cut by
/// `factor` down to `floor`; a plateau at the floor ends the stage.
pub fn lr_schedule(history: &[f64], lr: f64, cfg: &TrainConfig) -> (f64, bool) {
    let p = cfg.plateau_patience;
    if history.len() <= p {
        return (lr, false);
    }
    let (before, recent) = history.split_at(history.len() - p);
    let best = before.iter().copied().fold(f64::INFINITY, f64::min);
    let improved = recent.iter().any(|&v| v < best - cfg.plateau_min_delta);
    if improved {
        (lr, false)
    } else if lr > cfg.lr_floor {
        ((lr * cfg.lr_decay_factor).max(cfg.lr_floor), false)
    } else {
        (lr, true)
    }
}

/// Plateau scheduler state for one stage.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub lr: f64,
    history: Vec<f64>,
    pub complete: bool,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        PlateauScheduler { lr, history: Vec::new(), complete: false }
    }

    /// Records one validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, val_loss: f64, cfg: &TrainConfig) -> f64 {
        self.history.push(val_loss);
        let (lr, done) = lr_schedule(&self.history, self.lr, cfg);
        if lr != self.lr {
            self.lr = lr;
            // Keep the best loss so far as the reference for the new rate.
            let best = self.history.iter().copied().fold(f64::INFINITY, f64::min);
            self.history = vec![best];
        }
        self.complete = done;
        self.lr
    }
}

pub const CROP_POSITIONS: [CropPosition; 5] = [
    CropPosition::TopLeft,
    CropPosition::TopRight,
    CropPosition::BottomLeft,
    CropPosition::BottomRight,
    CropPosition::Center,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CropPosition {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Crop {
    pub position: CropPosition,
    pub side: usize,
}

/// Crop sides for a base side `b`: `b` scaled by 256, 224, 192, 168 and
/// 128 over 256, rounded.
pub fn crop_ladder(base: usize) -> [usize; 5] {
    [256, 224, 192, 168, 128].map(|s| ((base * s) as f64 / 256.0).round().max(1.0) as usize)
}

pub fn sample_crop(rng: &mut impl Rng, base: usize) -> Crop {
    let ladder = crop_ladder(base);
    Crop { position: CROP_POSITIONS[rng.gen_range(0..5)], side: ladder[rng.gen_range(0..5)] }
}

/// Cuts a square crop out of an `H x W x C` image.
pub fn apply_crop(image: &Tensor, crop: Crop) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    let s = crop.side;
    if s == 0 || s > h || s > w {
        return Err(Error::Config(format!("crop side {s} does not fit a {h}x{w} image")));
    }
    let (top, left) = match crop.position {
        CropPosition::TopLeft => (0, 0),
        CropPosition::TopRight => (0, w - s),
        CropPosition::BottomLeft => (h - s, 0),
        CropPosition::BottomRight => (h - s, w - s),
        CropPosition::Center => ((h - s) / 2, (w - s) / 2),
    };
    Tensor::new(
        &[s, s, c],
        (0..s * s * c)
            .map(|k| {
                let (i, j, ch) = (k / (s * c), k / c % s, k % c);
                image.at3(top + i, left + j, ch)
            })
            .collect(),
    )
}

/// Bilinear resampling with pixel centres aligned, clamped at the borders.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("resize target must be nonempty".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let axis = |out: usize, inp: usize, o: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(inp - 1), x - lo as f64)
    };
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    let d = out.data_mut();
    for i in 0..out_h {
        let (i0, i1, fy) = axis(out_h, h, i);
        for j in 0..out_w {
            let (j0, j1, fx) = axis(out_w, w, j);
            for ch in 0..c {
                let top = image.at3(i0, j0, ch) * (1.0 - fx) + image.at3(i0, j1, ch) * fx;
                let bottom = image.at3(i1, j0, ch) * (1.0 - fx) + image.at3(i1, j1, ch) * fx;
                d[(i * out_w + j) * c + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Training-time view of an image: resize to the base side, take a random
/// crop, resize to the network input.
pub fn augment(image: &Tensor, rng: &mut impl Rng, base: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
    let based = resize_bilinear(image, base, base)?;
    let crop = apply_crop(&based, sample_crop(rng, base))?;
    resize_bilinear(&crop, out_h, out_w)
}

/// Evaluation-time view: a plain resize to the network input.
pub fn eval_view(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    resize_bilinear(image, out_h, out_w)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: usize,
    pub epochs: Vec<EpochLog>,
    /// True when the stage ended on a plateau at the floor rate rather than
    /// at the epoch cap.
    pub converged: bool,
}

impl StageReport {
    pub fn final_val_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.val_loss)
    }
}

pub fn write_log<W: Write>(mut w: W, logs: &[EpochLog]) -> Result<()> {
    writeln!(w, "epoch\tstage\tlr\ttrain_loss\tval_loss")?;
    for e in logs {
        writeln!(w, "{}\t{}\t{}\t{}\t{}", e.epoch, e.stage, e.lr, e.train_loss, e.val_loss)?;
    }
    Ok(())
}

/// A model together with the number of stages it has completed.
pub struct Trainer {
    pub model: SrnModel,
    pub completed: usize,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: SrnModel, completed: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if completed > 4 {
            return Err(Error::Config(format!("a model cannot have completed {completed} stages")));
        }
        Ok(Trainer { model, completed, config })
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        data.validate()?;
        let m = &self.model.config;
        if data.num_labels != m.num_labels || data.image_c != m.image_c {
            return Err(Error::Data(format!(
                "dataset has {} labels and {} channels, model expects {} and {}",
                data.num_labels, data.image_c, m.num_labels, m.image_c
            )));
        }
        Ok(())
    }

    fn view(&self, sample: &Sample, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let m = &self.model.config;
        match rng {
            Some(rng) if self.config.augment => {
                let base = self.config.augment_base.unwrap_or(m.image_h);
                augment(&sample.image, rng, base, m.image_h, m.image_w)
            }
            _ => eval_view(&sample.image, m.image_h, m.image_w),
        }
    }

    /// Mean of a loss node over samples, without gradients.
    pub fn mean_loss(&self, data: &Dataset, indices: &[usize], loss: NodeId) -> Result<f64> {
        let mut total = 0.0;
        for &i in indices {
            let s = &data.samples[i];
            let inputs = self.model.inputs(&self.view(s, None)?, Some(&s.target_tensor()), Some(&s.mask_tensor()));
            total += self.model.graph().forward(&inputs, &self.model.params, &[loss])?.get(loss).item();
        }
        Ok(total / indices.len().max(1) as f64)
    }

    /// Trains the next stage. Stages must run in order.
    pub fn run_stage(&mut self, stage: Stage, data: &Dataset) -> Result<StageReport> {
        if stage.index() != self.completed + 1 {
            return Err(Error::Config(format!(
                "stage {} needs a model that has completed stage {}, this one has completed {}",
                stage.index(),
                stage.index() - 1,
                self.completed
            )));
        }
        self.check_data(data)?;
        let train = data.indices(Split::Train);
        let val = data.indices(Split::Val);
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("training needs nonempty train and val splits".into()));
        }
        let cfg = self.config.clone();
        let loss = stage.loss(self.model.nodes());
        self.model.params.set_trainable(stage.trainable());
        self.model.params.zero_grads();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stage.index() as u64);
        let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
        let mut sched = PlateauScheduler::new(cfg.lr_for(stage));
        let mut order = train.clone();
        let mut epochs = Vec::new();

        for epoch in 1..=cfg.epochs_for(stage) {
            let lr = sched.lr;
            order.shuffle(&mut rng);
            let mut train_total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut acc: Option<Gradients> = None;
                for &i in batch {
                    let s = &data.samples[i];
                    let image = self.view(s, Some(&mut rng))?;
                    let inputs = self.model.inputs(&image, Some(&s.target_tensor()), Some(&s.mask_tensor()));
                    let graph = self.model.graph();
                    let values = graph.forward(&inputs, &self.model.params, &[loss])?;
                    train_total += values.get(loss).item();
                    let g = graph.backward(&values, &self.model.params, loss, false)?;
                    match acc.as_mut() {
                        Some(a) => a.merge(&g)?,
                        None => acc = Some(g),
                    }
                }
                if let Some(g) = acc {
                    self.model.params.accumulate(&g, 1.0 / batch.len() as f64)?;
                }
                sgd.step(&mut self.model.params, lr);
                self.model.params.zero_grads();
            }
            let train_loss = train_total / order.len() as f64;
            if !train_loss.is_finite() {
                return Err(Error::Compute(format!("stage {} diverged at epoch {epoch}", stage.index())));
            }
            let val_loss = self.mean_loss(data, &val, loss)?;
            info!("stage {} epoch {epoch}: lr {lr:e} train {train_loss:.5} val {val_loss:.5}", stage.index());
            epochs.push(EpochLog { epoch, stage: stage.index(), lr, train_loss, val_loss });
            sched.observe(val_loss, &cfg);
            if sched.complete {
                break;
            }
        }
        self.model.params.round_to_f32();
        self.model.params.unfreeze_all();
        self.completed = stage.index();
        Ok(StageReport { stage: stage.index(), epochs, converged: sched.complete })
    }

    /// Sigmoid scores of the current prediction head over one split.
    pub fn scores(&self, data: &Dataset, split: Split) -> Result<Vec<Vec<f64>>> {
        score_split(&self.model, self.completed, data, split)
    }
}

/// Sigmoid scores for every sample of a split, in dataset order. Samples are
/// scored in parallel; the result does not depend on the thread count.
pub fn score_split(model: &SrnModel, completed: usize, data: &Dataset, split: Split) -> Result<Vec<Vec<f64>>> {
    score_head(model, prediction_head(model.nodes(), completed), data, split)
}

/// Sigmoid scores of an arbitrary logit node, such as `y_sr` or `y_att`.
pub fn score_head(model: &SrnModel, head: NodeId, data: &Dataset, split: Split) -> Result<Vec<Vec<f64>>> {
    let m = &model.config;
    data.indices(split)
        .into_par_iter()
        .map(|i| {
            let image = eval_view(&data.samples[i].image, m.image_h, m.image_w)?;
            let v = model.graph().forward(&model.inputs(&image, None, None), &model.params, &[head])?;
            Ok(v.get(head).data().iter().map(|&z| crate::layers::sigmoid_scalar(z)).collect())
        })
        .collect()
}
