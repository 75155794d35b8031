//! Losses, the SGD update and the training loop.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{augment, Patch, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Metrics};
use crate::labeling::{
    build_location_map, make_class_map, make_count_map, make_density_map, ClassMap, LabelConfig,
};
use crate::model::{Model, ModelParams, DOWNSAMPLE};
use crate::rng::{mix64, SplitMix64};
use crate::tensor::{Graph, Reduction, Tensor, Var};

/// Regression target used by the count head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LabelKind {
    #[default]
    CountMap,
    DensityMap,
}

impl LabelKind {
    pub fn name(self) -> &'static str {
        match self {
            LabelKind::CountMap => "count_map",
            LabelKind::DensityMap => "density_map",
        }
    }

    /// Divisor applied to a predicted map's integral is the square of this.
    pub fn coverage(self, label: &LabelConfig) -> usize {
        match self {
            LabelKind::CountMap => label.coverage(),
            LabelKind::DensityMap => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Per-cell mean or literal sum for both losses.
    pub loss_reduction: Reduction,
    pub label_kind: LabelKind,
    pub rram_enabled: bool,
    pub cls_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0005,
            epochs: 50,
            seed: 0,
            loss_reduction: Reduction::Mean,
            label_kind: LabelKind::CountMap,
            rram_enabled: true,
            cls_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    pub mae: f64,
    pub mse: f64,
    pub seconds: f64,
    pub steps: usize,
}

pub fn reg_loss(g: &mut Graph, pred: Var, target: &Tensor, reduction: Reduction) -> Result<Var> {
    g.mse_loss(pred, target, reduction)
}

pub fn cls_loss(
    g: &mut Graph,
    logits: Var,
    target: &ClassMap,
    reduction: Reduction,
) -> Result<Var> {
    let d = g.dims(logits);
    if d.len() != 3 || d[1] != target.height || d[2] != target.width {
        return Err(Error::Dimension(format!(
            "logits {:?} do not match class map {}x{}",
            d, target.height, target.width
        )));
    }
    g.cross_entropy(logits, &target.classes, reduction)
}

pub fn total_loss(g: &mut Graph, reg: Var, cls: Var, cls_enabled: bool) -> Result<Var> {
    if cls_enabled {
        g.add(reg, cls)
    } else {
        Ok(reg)
    }
}

/// `theta -= lr * (grad + weight_decay * theta)` for every named parameter.
/// Nothing is changed if any gradient is non-finite.
pub fn sgd_step<'a, I>(params: &mut ModelParams, grads: I, lr: f64, weight_decay: f64) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    let grads: Vec<(&str, &[f64])> = grads.into_iter().collect();
    for (name, gr) in &grads {
        let Some(t) = params.get(name) else {
            return Err(Error::Validation(format!(
                "gradient for unknown parameter {name}"
            )));
        };
        if t.len() != gr.len() {
            return Err(Error::Dimension(format!(
                "gradient for {name} has {} entries, parameter has {}",
                gr.len(),
                t.len()
            )));
        }
        if let Some(j) = gr.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {name}[{j}]"
            )));
        }
    }
    for (name, gr) in grads {
        let t = params.get_mut(name).expect("checked above");
        for (w, &d) in t.data_mut().iter_mut().zip(gr) {
            *w -= lr * (d + weight_decay * *w);
        }
    }
    Ok(())
}

/// Regression and class targets for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub regression: Tensor,
    pub classes: ClassMap,
}

/// Class bins always come from the count map; the regression target follows
/// `kind`.
pub fn make_targets(
    ann: &crate::data::PointAnnotation,
    label: &LabelConfig,
    kind: LabelKind,
) -> Result<Targets> {
    let count = make_count_map(&build_location_map(ann, label.stride())?, label)?;
    let classes = make_class_map(&count, label);
    let regression = match kind {
        LabelKind::CountMap => count.grid,
        LabelKind::DensityMap => make_density_map(ann, label)?.grid,
    };
    Ok(Targets {
        regression,
        classes,
    })
}

/// One forward/backward pass and SGD update; returns the total loss.
pub fn train_step(
    model: &Model,
    params: &mut ModelParams,
    cfg: &TrainConfig,
    image: &Tensor,
    targets: &Targets,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, params, true)?;
    let x = g.constant(image.clone());
    let out = model.forward(&mut g, &bound, x)?;
    let reg = reg_loss(&mut g, out.count, &targets.regression, cfg.loss_reduction)?;
    let loss = if cfg.cls_enabled {
        let cls = cls_loss(&mut g, out.logits, &targets.classes, cfg.loss_reduction)?;
        total_loss(&mut g, reg, cls, true)?
    } else {
        reg
    };
    let value = g.scalar(loss);
    g.backward(loss)?;
    let grads: Vec<(&str, &[f64])> = bound
        .iter()
        .filter_map(|(name, v)| g.grad(v).map(|gr| (name, gr)))
        .collect();
    sgd_step(params, grads, cfg.lr, cfg.weight_decay)?;
    Ok(value)
}

/// Crop side multiple: compatible with both the label stride and the backbone.
pub fn crop_quantum(label: &LabelConfig) -> usize {
    let s = label.stride();
    let (mut a, mut b) = (s, DOWNSAMPLE);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    s / a * DOWNSAMPLE
}

fn augment_key(seed: u64, epoch: usize, image: usize) -> u64 {
    seed ^ mix64(epoch as u64) ^ mix64(mix64(image as u64 ^ 0xa5a5_a5a5))
}

fn shuffle_key(seed: u64, epoch: usize) -> u64 {
    seed ^ mix64((epoch as u64).wrapping_add(0x5eed_0000_0000))
}

/// All augmented patches of one epoch in their training order.
pub fn epoch_patches(
    train: &[Sample],
    label: &LabelConfig,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Patch>> {
    let q = crop_quantum(label);
    let mut patches = Vec::with_capacity(train.len() * 2 * crate::data::CROPS_PER_IMAGE);
    for (i, s) in train.iter().enumerate() {
        let mut rng = SplitMix64::new(augment_key(seed, epoch, i));
        patches.extend(augment(&s.image, &s.annotation, q, &mut rng)?);
    }
    let mut rng = SplitMix64::new(shuffle_key(seed, epoch));
    for i in (1..patches.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        patches.swap(i, j);
    }
    Ok(patches)
}

/// Trains `params` in place, evaluating on `eval` after every epoch.
///
/// `clock` returns seconds from an arbitrary origin; `on_epoch` sees each
/// record as it is produced.
pub fn fit(
    model: &Model,
    cfg: &TrainConfig,
    params: &mut ModelParams,
    train: &[Sample],
    eval: &[Sample],
    clock: &mut dyn FnMut() -> f64,
    on_epoch: &mut dyn FnMut(&TrainRecord, &ModelParams),
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if model.rram().is_some() != cfg.rram_enabled {
        return Err(Error::Config(
            "model and training config disagree on rram_enabled".into(),
        ));
    }
    model.check_params(params)?;
    let label = model.label().clone();
    let coverage = cfg.label_kind.coverage(&label);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = clock();
        let patches = epoch_patches(train, &label, cfg.seed, epoch)?;
        let mut total = 0.0;
        for (step, p) in patches.iter().enumerate() {
            let targets = make_targets(&p.annotation, &label, cfg.label_kind)?;
            let loss = train_step(model, params, cfg, &p.image, &targets)
                .map_err(|e| at_step(e, epoch, step))?;
            total += loss;
        }
        let metrics: Metrics = if eval.is_empty() {
            Metrics {
                mae: f64::NAN,
                mse: f64::NAN,
                n: 0,
                per_image: Vec::new(),
            }
        } else {
            evaluate(model, params, eval, coverage)?
        };
        let record = TrainRecord {
            epoch,
            loss: total / patches.len() as f64,
            mae: metrics.mae,
            mse: metrics.mse,
            seconds: clock() - start,
            steps: patches.len(),
        };
        on_epoch(&record, params);
        records.push(record);
    }
    Ok(records)
}

fn at_step(e: Error, epoch: usize, step: usize) -> Error {
    let tag = |m: alloc::string::String| format!("epoch {epoch}, patch {step}: {m}");
    match e {
        Error::Numeric(m) => Error::Numeric(tag(m)),
        Error::Dimension(m) => Error::Dimension(tag(m)),
        Error::Domain(m) => Error::Domain(tag(m)),
        other => other,
    }
}
