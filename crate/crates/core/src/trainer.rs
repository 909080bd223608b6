//! Training: RGN pretraining, vulnerability-diversification cross-training
//! over sampled paths, an adversarial-training variant, standard training of
//! plain networks, and derived-model fine-tuning.
//!
//! One optimizer update happens per diversification step regardless of how
//! many paths were sampled: per-path gradients accumulate into a single
//! buffer first, so replicas shared between sampled paths and the shared
//! layers receive summed gradients.

use std::collections::HashMap;
use std::ops::Range;
use std::time::Instant;

use ndarray::{Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attack::{attack, AttackLoss, AttackMethod, AttackSpec};
use crate::data::Dataset;
use crate::distill::{distill_features, DistillConfig, DistilledBatch};
use crate::error::{Error, Result};
use crate::graph::{grad_merge, BackwardOpts, GradMap, Mode, Params};
use crate::nn::{ops, Feature, Scalar};
use crate::rgn::{Network, Path, RgnModel, StandaloneModel};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LrSchedule {
    pub init: f64,
    /// Epochs at which the rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn constant(init: f64) -> Self {
        Self { init, milestones: Vec::new(), gamma: 1.0 }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.init * self.gamma.powi(decays as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { init: 0.1, milestones: vec![100, 150], gamma: 0.1 }
    }
}

/// Plain-data mirror of [`DistillConfig`] for config files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillSettings {
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self { eps: 0.07, steps: 10, step_size: 0.007, random_start: false }
    }
}

impl DistillSettings {
    pub fn typed<F: Scalar>(&self) -> DistillConfig<F> {
        DistillConfig {
            eps: F::cast(self.eps),
            steps: self.steps,
            step_size: F::cast(self.step_size),
            random_start: self.random_start,
        }
    }
}

/// White-box adversarial-training augmentation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdvTConfig {
    pub enabled: bool,
    pub eps: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for AdvTConfig {
    fn default() -> Self {
        Self { enabled: false, eps: 0.03, steps: 10, step_size: 0.0075 }
    }
}

impl AdvTConfig {
    fn spec(&self) -> AttackSpec {
        AttackSpec {
            steps: self.steps.max(1),
            step_size: self.step_size,
            random_starts: 1,
            random_start_init: true,
            momentum: 0.0,
            ..AttackSpec::new(AttackMethod::Pgd, AttackLoss::CrossEntropy, self.eps)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Paths sampled per iteration (p).
    pub paths_per_iter: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub distill: DistillSettings,
    pub advt: AdvTConfig,
    pub seed: u64,
    /// Evaluate clean accuracy on the test split every k epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 20,
            epochs: 200,
            batch_size: 128,
            paths_per_iter: 3,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            distill: DistillSettings::default(),
            advt: AdvTConfig::default(),
            seed: 0,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths_per_iter < 2 {
            return Err(Error::Config("diversification needs paths_per_iter >= 2".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2".into()));
        }
        if self.lr.init <= 0.0 {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum and weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: LrSchedule { init: 0.001, milestones: vec![20, 30], gamma: 0.1 },
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Two independently drawn labeled batches.
pub struct BatchPair<F> {
    pub x_t: Array4<F>,
    pub y_t: Vec<usize>,
    pub x_s: Array4<F>,
    pub y_s: Vec<usize>,
}

/// SGD with momentum and coupled weight decay. Parameters touched by the
/// gradient map are updated; others are left alone.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub momentum: F,
    pub weight_decay: F,
    pub velocity: HashMap<String, ArrayD<F>>,
    /// Updates applied so far (one per step call).
    pub steps: u64,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: F::cast(momentum),
            weight_decay: F::cast(weight_decay),
            velocity: HashMap::new(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params<F>, grads: &GradMap<F>, lr: f64) {
        let lr = F::cast(lr);
        let mu = self.momentum;
        let wd = self.weight_decay;
        params.visit_trainable_mut(|name, mut w| {
            let Some(g) = grads.get(name) else { return };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(v.view_mut())
                .and(g)
                .and(w.view_mut())
                .for_each(|vi, &gi, wi| {
                    *vi = mu * *vi + gi + wd * *wi;
                    *wi = *wi - lr * *vi;
                });
        });
        self.steps += 1;
    }
}

/// Append-only line-delimited training log.
pub struct TrainLog {
    pub records: Vec<serde_json::Value>,
    writer: Option<std::fs::File>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self { records: Vec::new(), writer: None }
    }

    pub fn to_file(path: &std::path::Path) -> Result<Self> {
        let writer = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { records: Vec::new(), writer: Some(writer) })
    }

    pub fn log(&mut self, value: serde_json::Value) {
        if let Some(w) = &mut self.writer {
            use std::io::Write;
            let _ = writeln!(w, "{value}");
        }
        self.records.push(value);
    }
}

/// Which training phase an epoch belongs to; used by checkpoint resume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Diversify,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPosition {
    pub phase: Phase,
    /// Next epoch to run within the phase.
    pub epoch: usize,
}

impl TrainPosition {
    pub fn start() -> Self {
        Self { phase: Phase::Pretrain, epoch: 0 }
    }
}

fn batch_of<F: Scalar>(ds: &Dataset, idxs: &[usize]) -> (Array4<F>, Vec<usize>) {
    ds.batch(idxs)
}

/// One pretraining epoch: per batch, sample a random path and take one SGD
/// step on clean cross-entropy.
fn pretrain_epoch<F: Scalar>(
    rgn: &mut RgnModel<F>,
    ds: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Sgd<F>,
    epoch: usize,
) -> Result<(f64, usize)> {
    let order = ds.epoch_order(rng::derive_seed(cfg.seed, "pretrain.shuffle", 0), epoch as u64);
    let mut paths = rng::stream(cfg.seed, "pretrain.paths", epoch as u64);
    let lr = cfg.lr.init;
    let mut loss_acc = 0.0f64;
    let mut steps = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue; // batch statistics need more than one sample
        }
        let path = rgn.sample_path(&mut paths);
        let (x, y) = batch_of::<F>(ds, chunk);
        let (logits, _, trace) = rgn.forward(&path, &x, None, Mode::Train)?;
        let (loss, dlogits) = ops::cross_entropy_with_grad(&logits, &y)?;
        let bw = rgn.backward_from(
            &path,
            &trace,
            rgn.graph.output,
            Feature::Flat(dlogits),
            &BackwardOpts::default(),
        )?;
        rgn.apply_bn_updates(&path, &trace)?;
        opt.step(&mut rgn.params, &bw.grads, lr);
        loss_acc += loss.to_f64();
        steps += 1;
    }
    if steps == 0 {
        return Err(Error::Data("dataset too small for one batch".into()));
    }
    Ok((loss_acc / steps as f64, steps))
}

/// Pretrain for the configured epoch range (used directly and by `train`).
pub fn pretrain<F: Scalar>(
    rgn: &mut RgnModel<F>,
    ds: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Sgd<F>,
    epochs: Range<usize>,
    log: &mut TrainLog,
) -> Result<()> {
    for epoch in epochs {
        let t0 = Instant::now();
        let (mean_loss, steps) = pretrain_epoch(rgn, ds, cfg, opt, epoch)?;
        log.log(json!({
            "phase": "pretrain",
            "epoch": epoch,
            "mean_loss": mean_loss,
            "lr": cfg.lr.init,
            "steps": steps,
            "ms": t0.elapsed().as_millis() as u64,
        }));
    }
    Ok(())
}

/// Round-robin cross-entropy of every path on every other path's distilled
/// batch: loss_j = sum_{i != j} CE(forward(path_j, x'_i), y_s). Pure
/// measurement (eval-mode forwards, no side effects).
pub fn cross_loss<F: Scalar>(
    rgn: &RgnModel<F>,
    paths: &[Path],
    distilled: &[DistilledBatch<F>],
    y_s: &[usize],
) -> Result<Vec<F>> {
    if paths.len() != distilled.len() {
        return Err(Error::Invalid(format!(
            "{} paths vs {} distilled batches",
            paths.len(),
            distilled.len()
        )));
    }
    for (i, d) in distilled.iter().enumerate() {
        if d.path != paths[i] {
            return Err(Error::Invalid(format!(
                "distilled batch {i} was produced on a different path"
            )));
        }
    }
    let mut losses = Vec::with_capacity(paths.len());
    for (j, path) in paths.iter().enumerate() {
        let mut acc = F::zero();
        for (i, d) in distilled.iter().enumerate() {
            if i == j {
                continue;
            }
            let (logits, _, _) = rgn.forward(path, &d.x_prime, None, Mode::Eval)?;
            acc = acc + ops::cross_entropy(&logits, y_s)?;
        }
        losses.push(acc);
    }
    Ok(losses)
}

/// Statistics of one diversification step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepStats {
    /// Distillation layer drawn this step (1-based).
    pub layer: usize,
    pub per_path_loss: Vec<f64>,
    pub distill_initial: f64,
    pub distill_final: f64,
}

/// Sample the distillation layer uniformly from [1, L], re-drawing until the
/// distinct-prefix constraint is satisfiable (n^l >= p).
fn sample_feasible_layer(
    n: usize,
    l_total: usize,
    p: usize,
    rng: &mut Stream,
) -> Result<usize> {
    // feasible for at least l = l_total by the caller's validation
    for _ in 0..10_000 {
        let l = rng.random_range(1..=l_total);
        if (n as f64).powi(l as i32) >= p as f64 {
            return Ok(l);
        }
    }
    Err(Error::Infeasible("could not draw a feasible distillation layer".into()))
}

/// Gradient accumulation for one diversification step, without applying the
/// update. Returns the summed gradient buffer, per-path losses, and the
/// distilled batches. Training-mode forwards update the executing replicas'
/// batchnorm statistics.
#[allow(clippy::too_many_arguments)]
pub fn diversify_grads<F: Scalar>(
    rgn: &mut RgnModel<F>,
    pair: &BatchPair<F>,
    paths: &[Path],
    layer: usize,
    cfg: &TrainConfig,
    distill_rng: &mut Stream,
    attack_rng: &mut Stream,
) -> Result<(GradMap<F>, StepStats)> {
    let p = paths.len();
    let dcfg = cfg.distill.typed::<F>();
    let mut distilled = Vec::with_capacity(p);
    let mut d_init = 0.0;
    let mut d_final = 0.0;
    for path in paths {
        let (batch, stats) = distill_features(
            rgn,
            path,
            layer,
            &pair.x_t,
            &pair.x_s,
            &pair.y_s,
            &dcfg,
            distill_rng,
        )?;
        d_init += stats.initial_objective.to_f64();
        d_final += stats.final_objective.to_f64();
        distilled.push(batch);
    }

    let advt_spec = cfg.advt.enabled.then(|| cfg.advt.spec());

    let mut total: GradMap<F> = GradMap::new();
    let mut per_path_loss = vec![0.0f64; p];
    for (j, path) in paths.iter().enumerate() {
        for (i, d) in distilled.iter().enumerate() {
            if i == j {
                continue;
            }
            let (logits, _, trace) = rgn.forward(path, &d.x_prime, None, Mode::Train)?;
            let (loss, dlogits) = ops::cross_entropy_with_grad(&logits, &pair.y_s)?;
            let bw = rgn.backward_from(
                path,
                &trace,
                rgn.graph.output,
                Feature::Flat(dlogits),
                &BackwardOpts::default(),
            )?;
            rgn.apply_bn_updates(path, &trace)?;
            grad_merge(&mut total, bw.grads);
            per_path_loss[j] += loss.to_f64();
        }
        if let Some(spec) = &advt_spec {
            // white-box adversarial view of x_s generated against this path
            let view = crate::rgn::PathView { rgn, path: path.clone() };
            let out = attack(&view, &pair.x_s, &pair.y_s, spec, attack_rng)?;
            let x_w = &out.versions[0];
            let (logits, _, trace) = rgn.forward(path, x_w, None, Mode::Train)?;
            let (loss, dlogits) = ops::cross_entropy_with_grad(&logits, &pair.y_s)?;
            let bw = rgn.backward_from(
                path,
                &trace,
                rgn.graph.output,
                Feature::Flat(dlogits),
                &BackwardOpts::default(),
            )?;
            rgn.apply_bn_updates(path, &trace)?;
            grad_merge(&mut total, bw.grads);
            per_path_loss[j] += loss.to_f64();
        }
    }
    Ok((
        total,
        StepStats {
            layer,
            per_path_loss,
            distill_initial: d_init / p as f64,
            distill_final: d_final / p as f64,
        },
    ))
}

/// One full diversification step: draw the layer and paths, distill, compute
/// the round-robin losses, and apply exactly one optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn diversify_step<F: Scalar>(
    rgn: &mut RgnModel<F>,
    pair: &BatchPair<F>,
    cfg: &TrainConfig,
    opt: &mut Sgd<F>,
    lr: f64,
    layer_rng: &mut Stream,
    path_rng: &mut Stream,
    distill_rng: &mut Stream,
    attack_rng: &mut Stream,
) -> Result<StepStats> {
    let p = cfg.paths_per_iter;
    let layer = sample_feasible_layer(rgn.n(), rgn.gated_depth(), p, layer_rng)?;
    let paths = rgn.sample_distinct_paths(p, layer, path_rng)?;
    let (grads, stats) =
        diversify_grads(rgn, pair, &paths, layer, cfg, distill_rng, attack_rng)?;
    opt.step(&mut rgn.params, &grads, lr);
    Ok(stats)
}

fn clean_eval<F: Scalar>(rgn: &RgnModel<F>, test: &Dataset, seed: u64, epoch: usize) -> Result<f64> {
    let n = test.len().min(1000);
    if n == 0 {
        return Ok(0.0);
    }
    let idxs: Vec<usize> = (0..n).collect();
    let (x, y) = test.batch::<F>(&idxs);
    let mut r = rng::stream(seed, "eval.paths", epoch as u64);
    let logits = rgn.random_gated_inference(&x, &mut r)?;
    Ok(ops::accuracy(&logits, &y))
}

/// Full training routine: pretraining followed by diversification epochs.
/// `on_epoch` fires after every completed epoch with the position that a
/// resumed run should continue from; checkpointing lives in that callback.
#[allow(clippy::too_many_arguments)]
pub fn train<F: Scalar>(
    rgn: &mut RgnModel<F>,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Sgd<F>,
    start: TrainPosition,
    log: &mut TrainLog,
    mut on_epoch: impl FnMut(&RgnModel<F>, &Sgd<F>, TrainPosition) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Data("empty training dataset".into()));
    }
    let capacity = (rgn.n() as f64).powi(rgn.gated_depth() as i32);
    if capacity < cfg.paths_per_iter as f64 {
        return Err(Error::Config(format!(
            "paths_per_iter {} exceeds instantiable paths {}",
            cfg.paths_per_iter, capacity
        )));
    }

    // pretraining phase
    if start.phase == Phase::Pretrain {
        for epoch in start.epoch..cfg.pretrain_epochs {
            let t0 = Instant::now();
            let (mean_loss, steps) = pretrain_epoch(rgn, train_ds, cfg, opt, epoch)?;
            log.log(json!({
                "phase": "pretrain",
                "epoch": epoch,
                "mean_loss": mean_loss,
                "lr": cfg.lr.init,
                "steps": steps,
                "ms": t0.elapsed().as_millis() as u64,
            }));
            on_epoch(rgn, opt, TrainPosition { phase: Phase::Pretrain, epoch: epoch + 1 })?;
        }
    }

    // diversification phase
    let div_start = if start.phase == Phase::Diversify { start.epoch } else { 0 };
    for epoch in div_start..cfg.epochs {
        let t0 = Instant::now();
        let lr = cfg.lr.at(epoch);
        let order =
            train_ds.epoch_order(rng::derive_seed(cfg.seed, "diversify.shuffle", 0), epoch as u64);
        let mut layer_rng = rng::stream(cfg.seed, "diversify.layer", epoch as u64);
        let mut path_rng = rng::stream(cfg.seed, "diversify.paths", epoch as u64);
        let mut distill_rng = rng::stream(cfg.seed, "diversify.distill", epoch as u64);
        let mut attack_rng = rng::stream(cfg.seed, "diversify.advt", epoch as u64);

        let bs = cfg.batch_size;
        let mut step_losses: Vec<f64> = Vec::new();
        let mut layer_hist = vec![0usize; rgn.gated_depth()];
        let mut steps = 0usize;
        let mut pos = 0usize;
        while pos + 2 * bs <= order.len() {
            let (x_t, y_t) = batch_of::<F>(train_ds, &order[pos..pos + bs]);
            let (x_s, y_s) = batch_of::<F>(train_ds, &order[pos + bs..pos + 2 * bs]);
            let pair = BatchPair { x_t, y_t, x_s, y_s };
            pos += 2 * bs;
            let stats = diversify_step(
                rgn,
                &pair,
                cfg,
                opt,
                lr,
                &mut layer_rng,
                &mut path_rng,
                &mut distill_rng,
                &mut attack_rng,
            )?;
            layer_hist[stats.layer - 1] += 1;
            step_losses.push(stats.per_path_loss.iter().sum::<f64>());
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::Data("dataset too small for one diversification step".into()));
        }
        let eval = if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            Some(clean_eval(rgn, test_ds, cfg.seed, epoch)?)
        } else {
            None
        };
        log.log(json!({
            "phase": "diversify",
            "epoch": epoch,
            "mean_step_loss": step_losses.iter().sum::<f64>() / steps as f64,
            "lr": lr,
            "steps": steps,
            "layer_histogram": layer_hist,
            "eval_accuracy": eval,
            "ms": t0.elapsed().as_millis() as u64,
        }));
        on_epoch(rgn, opt, TrainPosition { phase: Phase::Diversify, epoch: epoch + 1 })?;
    }
    on_epoch(rgn, opt, TrainPosition { phase: Phase::Done, epoch: 0 })?;
    Ok(())
}

/// Deterministic batches for batchnorm recalibration.
pub fn calibration_batches<F: Scalar>(
    ds: &Dataset,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Vec<Array4<F>> {
    let order = ds.epoch_order(rng::derive_seed(seed, "bn.calibration", 0), 0);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .take(batches)
        .map(|c| ds.batch::<F>(c).0)
        .collect()
}

/// Derive a standalone model and recalibrate its batchnorm statistics on
/// training data; the usual path from a trained RGN to an evaluable model.
pub fn derive_calibrated<F: Scalar>(
    rgn: &RgnModel<F>,
    path: &Path,
    ds: &Dataset,
    seed: u64,
) -> Result<StandaloneModel<F>> {
    let mut derived = rgn.derive_model(path)?;
    let batches = calibration_batches::<F>(ds, 20, 128.min(ds.len().max(2)), seed);
    derived.net.recalibrate_bn(&batches)?;
    Ok(derived)
}

/// Standard clean training of a plain network (surrogates, baselines).
pub fn standard_train<F: Scalar>(
    net: &mut Network<F>,
    ds: &Dataset,
    epochs: usize,
    lr: &LrSchedule,
    momentum: f64,
    weight_decay: f64,
    batch_size: usize,
    seed: u64,
    log: &mut TrainLog,
) -> Result<()> {
    let mut opt = Sgd::<F>::new(momentum, weight_decay);
    for epoch in 0..epochs {
        let t0 = Instant::now();
        let order = ds.epoch_order(rng::derive_seed(seed, "standard.shuffle", 0), epoch as u64);
        let rate = lr.at(epoch);
        let mut loss_acc = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = batch_of::<F>(ds, chunk);
            let (logits, trace) = net.forward(&x, Mode::Train)?;
            let (loss, dlogits) = ops::cross_entropy_with_grad(&logits, &y)?;
            let bw = net.backward_from_output(&trace, dlogits, &BackwardOpts::default())?;
            net.apply_bn_updates(&trace);
            opt.step(&mut net.params, &bw.grads, rate);
            loss_acc += loss.to_f64();
            steps += 1;
        }
        log.log(json!({
            "phase": "standard",
            "epoch": epoch,
            "mean_loss": loss_acc / steps.max(1) as f64,
            "lr": rate,
            "steps": steps,
            "ms": t0.elapsed().as_millis() as u64,
        }));
    }
    Ok(())
}

/// Clean-data fine-tuning of a derived model; compensates for the
/// under-convergence of rarely-sampled paths.
pub fn finetune<F: Scalar>(
    model: &mut StandaloneModel<F>,
    ds: &Dataset,
    cfg: &FinetuneConfig,
    log: &mut TrainLog,
) -> Result<()> {
    let mut opt = Sgd::<F>::new(cfg.momentum, cfg.weight_decay);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let order = ds.epoch_order(rng::derive_seed(cfg.seed, "finetune.shuffle", 0), epoch as u64);
        let rate = cfg.lr.at(epoch);
        let mut loss_acc = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = batch_of::<F>(ds, chunk);
            let (logits, trace) = model.net.forward(&x, Mode::Train)?;
            let (loss, dlogits) = ops::cross_entropy_with_grad(&logits, &y)?;
            let bw = model.net.backward_from_output(&trace, dlogits, &BackwardOpts::default())?;
            model.net.apply_bn_updates(&trace);
            opt.step(&mut model.net.params, &bw.grads, rate);
            loss_acc += loss.to_f64();
            steps += 1;
        }
        log.log(json!({
            "phase": "finetune",
            "epoch": epoch,
            "mean_loss": loss_acc / steps.max(1) as f64,
            "lr": rate,
            "steps": steps,
            "ms": t0.elapsed().as_millis() as u64,
        }));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_rgn_spec, make_scope, parse_arch, ScopeMode, TOY6};
    use crate::check::{flatten_grads, flatten_trainable, max_rel_err, numerical_grad, set_trainable};
    use crate::data::{ingest_dataset, DataSource, DatasetDescriptor};
    use crate::rng::labels;
    use ndarray::{Array1, Array4};

    const SMALL: &str = "\
in input shape=3x8x8
c1 conv in=3 out=4 k=3 stride=1 pad=1
b1 batchnorm features=4
r1 activation fn=relu
c2 conv in=4 out=6 k=3 stride=2 pad=1
b2 batchnorm features=6
r2 activation fn=relu
pool pool kind=global_avg
fc linear in=6 out=3
out output
edge in c1
edge c1 b1
edge b1 r1
edge r1 c2
edge c2 b2
edge b2 r2
edge r2 pool
edge pool fc
edge fc out
";

    fn small_rgn<F: Scalar>(n: usize, seed: u64) -> RgnModel<F> {
        let arch = parse_arch(SMALL).unwrap();
        let scope = make_scope(&arch, ScopeMode::All).unwrap();
        let spec = build_rgn_spec(&arch, scope, n).unwrap();
        RgnModel::init(spec, &mut rng::stream(seed, labels::INIT, 0)).unwrap()
    }

    fn rand_pair<F: Scalar>(b: usize, seed: u64) -> BatchPair<F> {
        let mut r = rng::stream(seed, labels::DATA, 0);
        let mk = |r: &mut Stream| Array4::from_shape_simple_fn((b, 3, 8, 8), || F::sample_unit(r));
        let x_t = mk(&mut r);
        let x_s = mk(&mut r);
        let y_t = (0..b).map(|i| i % 3).collect();
        let y_s = (0..b).map(|i| (i + 1) % 3).collect();
        BatchPair { x_t, y_t, x_s, y_s }
    }

    fn blob_config(seed: u64) -> TrainConfig {
        TrainConfig {
            pretrain_epochs: 5,
            epochs: 2,
            batch_size: 64,
            paths_per_iter: 2,
            lr: LrSchedule::constant(0.05),
            momentum: 0.9,
            weight_decay: 1e-4,
            distill: DistillSettings::default(),
            advt: AdvTConfig::default(),
            seed,
            eval_every: 0,
        }
    }

    #[test]
    fn sgd_matches_closed_form_trace() {
        // single-parameter network stand-in: one 1-element "weight"
        let mut params = Params::<f64>::default();
        params.push(
            "w".into(),
            crate::graph::Unit::Linear(crate::nn::Linear {
                weight: ndarray::Array2::from_elem((1, 1), 2.0),
                bias: Array1::zeros(1),
            }),
        );
        let mut opt = Sgd::<f64>::new(0.9, 0.01);
        let lr = 0.1;
        // two accumulated "per-path" gradients for the same parameter
        let mut grads = GradMap::new();
        grads.insert("w.weight".into(), ndarray::arr2(&[[0.5]]).into_dyn());
        crate::graph::grad_accumulate(
            &mut grads,
            "w.weight".into(),
            ndarray::arr2(&[[0.25]]).into_dyn(),
        );
        // step 1: v1 = g + wd*w ; w1 = w - lr*v1
        let g = 0.75;
        let w0: f64 = 2.0;
        let v1 = g + 0.01 * w0;
        let w1 = w0 - lr * v1;
        opt.step(&mut params, &grads, lr);
        let got1 = match &params.units[0] {
            crate::graph::Unit::Linear(l) => l.weight[[0, 0]],
            _ => unreachable!(),
        };
        assert!((got1 - w1).abs() < 1e-15, "step1 {got1} vs {w1}");
        // step 2 with a fresh gradient: v2 = mu*v1 + g2 + wd*w1
        let mut grads2 = GradMap::new();
        grads2.insert("w.weight".into(), ndarray::arr2(&[[-0.3]]).into_dyn());
        let v2 = 0.9 * v1 + (-0.3) + 0.01 * w1;
        let w2 = w1 - lr * v2;
        opt.step(&mut params, &grads2, lr);
        let got2 = match &params.units[0] {
            crate::graph::Unit::Linear(l) => l.weight[[0, 0]],
            _ => unreachable!(),
        };
        assert!((got2 - w2).abs() < 1e-15, "step2 {got2} vs {w2}");
        assert_eq!(opt.steps, 2);
    }

    #[test]
    fn accumulated_gradients_match_summed_loss_finite_differences() {
        let mut rgn = small_rgn::<f64>(2, 1);
        let pair = rand_pair::<f64>(3, 2);
        let cfg = TrainConfig { paths_per_iter: 2, ..blob_config(3) };
        let layer = 2usize;
        let mut pr = rng::stream(3, "paths", 0);
        let paths = rgn.sample_distinct_paths(2, layer, &mut pr).unwrap();

        // distill once; the oracle treats the distilled inputs as data
        let dcfg = cfg.distill.typed::<f64>();
        let mut dr = rng::stream(3, "distill", 0);
        let distilled: Vec<_> = paths
            .iter()
            .map(|p| {
                distill_features(&rgn, p, layer, &pair.x_t, &pair.x_s, &pair.y_s, &dcfg, &mut dr)
                    .unwrap()
                    .0
            })
            .collect();

        // analytic: accumulate per-path gradients (re-using the frozen x')
        let mut total = GradMap::new();
        for (j, path) in paths.iter().enumerate() {
            for (i, d) in distilled.iter().enumerate() {
                if i == j {
                    continue;
                }
                let (logits, _, trace) = rgn.forward(path, &d.x_prime, None, Mode::Train).unwrap();
                let (_, dlogits) = ops::cross_entropy_with_grad(&logits, &pair.y_s).unwrap();
                let bw = rgn
                    .backward_from(
                        path,
                        &trace,
                        rgn.graph.output,
                        Feature::Flat(dlogits),
                        &BackwardOpts::default(),
                    )
                    .unwrap();
                grad_merge(&mut total, bw.grads);
            }
        }
        let analytic = flatten_grads(&rgn.params, &total);

        // numeric: central differences of the summed loss over all params
        let theta0 = flatten_trainable(&rgn.params);
        let f = |theta: &[f64]| {
            let mut m = rgn.clone();
            set_trainable(&mut m.params, theta);
            let mut acc = 0.0f64;
            for (j, path) in paths.iter().enumerate() {
                for (i, d) in distilled.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let (logits, _, _) = m.forward(path, &d.x_prime, None, Mode::Train).unwrap();
                    acc += ops::cross_entropy(&logits, &pair.y_s).unwrap();
                }
            }
            acc
        };
        let numeric = numerical_grad(f, &theta0, 1e-5);
        let err = max_rel_err(&analytic, &numeric, 1e-4);
        assert!(err <= 1e-5, "accumulated-gradient rel err {err}");
    }

    #[test]
    fn cross_loss_matches_hand_unrolled_computation() {
        let rgn = small_rgn::<f64>(2, 5);
        let pair = rand_pair::<f64>(3, 6);
        let layer = 2;
        let mut pr = rng::stream(7, "paths", 0);
        let paths = rgn.sample_distinct_paths(3, layer, &mut pr).unwrap();
        let dcfg = DistillConfig::<f64>::default();
        let mut dr = rng::stream(8, "distill", 0);
        let distilled: Vec<_> = paths
            .iter()
            .map(|p| {
                distill_features(&rgn, p, layer, &pair.x_t, &pair.x_s, &pair.y_s, &dcfg, &mut dr)
                    .unwrap()
                    .0
            })
            .collect();
        let losses = cross_loss(&rgn, &paths, &distilled, &pair.y_s).unwrap();
        assert_eq!(losses.len(), 3);

        // hand unroll: loss_j = sum_{i != j} CE(path_j on x'_i)
        for j in 0..3 {
            let mut want = 0.0f64;
            let mut terms = 0;
            for i in 0..3 {
                if i == j {
                    continue;
                }
                let (logits, _, _) = rgn
                    .forward(&paths[j], &distilled[i].x_prime, None, Mode::Eval)
                    .unwrap();
                want += ops::cross_entropy(&logits, &pair.y_s).unwrap();
                terms += 1;
            }
            assert_eq!(terms, 2);
            assert!((losses[j] - want).abs() < 1e-12, "path {j}: {} vs {want}", losses[j]);
        }
    }

    #[test]
    fn cross_loss_two_paths_depends_only_on_the_other() {
        let rgn = small_rgn::<f64>(2, 9);
        let pair = rand_pair::<f64>(2, 10);
        let mut pr = rng::stream(11, "paths", 0);
        let paths = rgn.sample_distinct_paths(2, 1, &mut pr).unwrap();
        let dcfg = DistillConfig::<f64>::default();
        let mut dr = rng::stream(12, "distill", 0);
        let distilled: Vec<_> = paths
            .iter()
            .map(|p| {
                distill_features(&rgn, p, 1, &pair.x_t, &pair.x_s, &pair.y_s, &dcfg, &mut dr)
                    .unwrap()
                    .0
            })
            .collect();
        let losses = cross_loss(&rgn, &paths, &distilled, &pair.y_s).unwrap();
        let (l0, _, _) = rgn.forward(&paths[0], &distilled[1].x_prime, None, Mode::Eval).unwrap();
        let want0 = ops::cross_entropy(&l0, &pair.y_s).unwrap();
        assert!((losses[0] - want0).abs() < 1e-12);
        let (l1, _, _) = rgn.forward(&paths[1], &distilled[0].x_prime, None, Mode::Eval).unwrap();
        let want1 = ops::cross_entropy(&l1, &pair.y_s).unwrap();
        assert!((losses[1] - want1).abs() < 1e-12);
    }

    #[test]
    fn cross_loss_identical_paths_gives_equal_losses() {
        let rgn = small_rgn::<f64>(2, 13);
        let pair = rand_pair::<f64>(2, 14);
        let path = Path::new(vec![0, 1]);
        let dcfg = DistillConfig::<f64>::default();
        let mut dr = rng::stream(15, "distill", 0);
        let (d, _) = distill_features(
            &rgn, &path, 1, &pair.x_t, &pair.x_s, &pair.y_s, &dcfg, &mut dr,
        )
        .unwrap();
        let paths = vec![path.clone(), path.clone(), path];
        let distilled = vec![d.clone(), d.clone(), d];
        let losses = cross_loss(&rgn, &paths, &distilled, &pair.y_s).unwrap();
        assert!((losses[0] - losses[1]).abs() < 1e-12);
        assert!((losses[1] - losses[2]).abs() < 1e-12);
    }

    #[test]
    fn cross_loss_rejects_mismatched_provenance() {
        let rgn = small_rgn::<f64>(2, 16);
        let pair = rand_pair::<f64>(2, 17);
        let mut pr = rng::stream(18, "paths", 0);
        let paths = rgn.sample_distinct_paths(2, 1, &mut pr).unwrap();
        let dcfg = DistillConfig::<f64>::default();
        let mut dr = rng::stream(19, "distill", 0);
        let mut distilled: Vec<_> = paths
            .iter()
            .map(|p| {
                distill_features(&rgn, p, 1, &pair.x_t, &pair.x_s, &pair.y_s, &dcfg, &mut dr)
                    .unwrap()
                    .0
            })
            .collect();
        distilled.swap(0, 1);
        assert!(cross_loss(&rgn, &paths, &distilled, &pair.y_s).is_err());
    }

    #[test]
    fn one_update_per_diversify_step_and_zero_lr_freezes() {
        let mut rgn = small_rgn::<f32>(2, 20);
        let pair = rand_pair::<f32>(4, 21);
        let cfg = blob_config(22);
        let mut opt = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
        let hash_before = rgn.params.content_hash();
        let mut lrng = rng::stream(22, "l", 0);
        let mut prng = rng::stream(22, "p", 0);
        let mut drng = rng::stream(22, "d", 0);
        let mut arng = rng::stream(22, "a", 0);
        let stats = diversify_step(
            &mut rgn, &pair, &cfg, &mut opt, 0.0, &mut lrng, &mut prng, &mut drng, &mut arng,
        )
        .unwrap();
        assert_eq!(opt.steps, 1, "exactly one optimizer update per step");
        assert_eq!(stats.per_path_loss.len(), cfg.paths_per_iter);
        // lr = 0: weights unchanged (bn running stats do move)
        let mut weights_a: Vec<f32> = Vec::new();
        rgn.params.visit_trainable(|_, v| weights_a.extend(v.iter().cloned()));
        let fresh = small_rgn::<f32>(2, 20);
        let mut weights_b: Vec<f32> = Vec::new();
        fresh.params.visit_trainable(|_, v| weights_b.extend(v.iter().cloned()));
        assert_eq!(weights_a, weights_b, "zero-lr step changed trainable weights");
        let _ = hash_before;
    }

    #[test]
    fn p3_executes_three_distillations_and_six_ce_terms() {
        let mut rgn = small_rgn::<f32>(2, 23);
        let pair = rand_pair::<f32>(4, 24);
        let cfg = TrainConfig { paths_per_iter: 3, ..blob_config(25) };
        let layer = 2;
        let mut prng = rng::stream(25, "p", 0);
        let paths = rgn.sample_distinct_paths(3, layer, &mut prng).unwrap();
        let mut drng = rng::stream(25, "d", 0);
        let mut arng = rng::stream(25, "a", 0);
        let (_, stats) = diversify_grads(
            &mut rgn, &pair, &paths, layer, &cfg, &mut drng, &mut arng,
        )
        .unwrap();
        // 3 paths distilled; each per-path loss is the sum of exactly 2 CE
        // terms (positive, so distinguishable from termination bugs)
        assert_eq!(stats.per_path_loss.len(), 3);
        assert!(stats.per_path_loss.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn layer_sampling_is_uniform_when_feasible() {
        // p=2, n=2: every l in [1,4] is feasible
        let mut r = rng::stream(26, "l", 0);
        let mut counts = vec![0u64; 4];
        for _ in 0..10_000 {
            let l = sample_feasible_layer(2, 4, 2, &mut r).unwrap();
            counts[l - 1] += 1;
        }
        let p = crate::stats::chi_square_uniform_pvalue(&counts);
        assert!(p > 0.01, "layer draw chi-square p = {p}, counts {counts:?}");
        // p=3, n=2: l=1 infeasible, the rest uniform
        let mut counts = vec![0u64; 4];
        for _ in 0..10_000 {
            let l = sample_feasible_layer(2, 4, 3, &mut r).unwrap();
            counts[l - 1] += 1;
        }
        assert_eq!(counts[0], 0, "infeasible layer was drawn");
        let p = crate::stats::chi_square_uniform_pvalue(&counts[1..]);
        assert!(p > 0.01, "feasible-layer chi-square p = {p}");
    }

    #[test]
    fn pretrain_reaches_high_accuracy_on_all_paths_of_separable_blobs() {
        let desc = DatasetDescriptor {
            source: DataSource::SyntheticBlobs {
                classes: 2,
                channels: 3,
                height: 32,
                width: 32,
                count: 2000,
                seed: 40,
            },
            downscale: 2,
            train_subset: None,
            test_subset: None,
        };
        let (train_ds, test_ds) = ingest_dataset(&desc).unwrap();
        let arch = parse_arch(TOY6).unwrap();
        let scope = make_scope(&arch, ScopeMode::All).unwrap();
        let spec = build_rgn_spec(&arch, scope, 2).unwrap();
        let mut rgn =
            RgnModel::<f32>::init(spec, &mut rng::stream(41, labels::INIT, 0)).unwrap();
        let cfg = blob_config(41);
        let mut opt = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
        let mut log = TrainLog::in_memory();
        pretrain(&mut rgn, &train_ds, &cfg, &mut opt, 0..cfg.pretrain_epochs, &mut log).unwrap();
        let (x, y) = test_ds.full_batch::<f32>();
        let mut pr = rng::stream(42, labels::PATHS, 0);
        let batches = calibration_batches::<f32>(&train_ds, 10, 64, 42);
        for k in 0..10 {
            let path = rgn.sample_path(&mut pr);
            let mut m = rgn.clone();
            m.recalibrate_bn(&path, &batches).unwrap();
            let (logits, _, _) = m.forward(&path, &x, None, Mode::Eval).unwrap();
            let acc = ops::accuracy(&logits, &y);
            assert!(acc > 0.9, "path {k} ({}) accuracy {acc}", path.label());
        }
    }

    #[test]
    fn pretrain_zero_epochs_is_identity() {
        let mut rgn = small_rgn::<f32>(2, 43);
        let before = rgn.params.content_hash();
        let desc = DatasetDescriptor::new(DataSource::SyntheticBlobs {
            classes: 3,
            channels: 3,
            height: 8,
            width: 8,
            count: 100,
            seed: 44,
        });
        let (train_ds, _) = ingest_dataset(&desc).unwrap();
        let cfg = TrainConfig { pretrain_epochs: 0, ..blob_config(44) };
        let mut opt = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
        let mut log = TrainLog::in_memory();
        pretrain(&mut rgn, &train_ds, &cfg, &mut opt, 0..0, &mut log).unwrap();
        assert_eq!(rgn.params.content_hash(), before);
    }

    #[test]
    fn pretrain_is_seed_reproducible() {
        let desc = DatasetDescriptor::new(DataSource::SyntheticBlobs {
            classes: 3,
            channels: 3,
            height: 8,
            width: 8,
            count: 300,
            seed: 45,
        });
        let (train_ds, _) = ingest_dataset(&desc).unwrap();
        let run = || {
            let mut rgn = small_rgn::<f32>(2, 46);
            let cfg = TrainConfig { pretrain_epochs: 2, ..blob_config(46) };
            let mut opt = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
            let mut log = TrainLog::in_memory();
            pretrain(&mut rgn, &train_ds, &cfg, &mut opt, 0..2, &mut log).unwrap();
            rgn.params.content_hash()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn advt_zero_eps_equals_plain_plus_clean_ce() {
        let pair = rand_pair::<f64>(3, 50);
        let layer = 2;
        let cfg_plain = TrainConfig { paths_per_iter: 2, ..blob_config(51) };
        let mut cfg_advt = cfg_plain.clone();
        cfg_advt.advt = AdvTConfig { enabled: true, eps: 0.0, steps: 3, step_size: 0.01 };

        let mk = || small_rgn::<f64>(2, 52);
        let paths = {
            let rgn = mk();
            let mut pr = rng::stream(53, "p", 0);
            rgn.sample_distinct_paths(2, layer, &mut pr).unwrap()
        };

        let grads_of = |cfg: &TrainConfig| {
            let mut rgn = mk();
            let mut dr = rng::stream(53, "d", 0);
            let mut ar = rng::stream(53, "a", 0);
            let (g, _) =
                diversify_grads(&mut rgn, &pair, &paths, layer, cfg, &mut dr, &mut ar).unwrap();
            (g, rgn)
        };
        let (g_plain, _) = grads_of(&cfg_plain);
        let (g_advt, _) = grads_of(&cfg_advt);

        // clean-CE gradients per path on x_s (what eps=0 advt adds)
        let mut rgn = mk();
        let mut g_clean = GradMap::new();
        for path in &paths {
            let (logits, _, trace) = rgn.forward(path, &pair.x_s, None, Mode::Train).unwrap();
            let (_, dlogits) = ops::cross_entropy_with_grad(&logits, &pair.y_s).unwrap();
            let bw = rgn
                .backward_from(
                    path,
                    &trace,
                    rgn.graph.output,
                    Feature::Flat(dlogits),
                    &BackwardOpts::default(),
                )
                .unwrap();
            rgn.apply_bn_updates(path, &trace).unwrap();
            grad_merge(&mut g_clean, bw.grads);
        }

        let a = flatten_grads(&rgn.params, &g_advt);
        let mut want = flatten_grads(&rgn.params, &g_plain);
        let clean = flatten_grads(&rgn.params, &g_clean);
        for (w, c) in want.iter_mut().zip(clean.iter()) {
            *w += c;
        }
        let err = max_rel_err(&a, &want, 1e-6);
        assert!(err < 1e-9, "advt(eps=0) != plain + clean CE, rel err {err}");
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let rgn = small_rgn::<f32>(2, 60);
        let mut derived = rgn.derive_model(&Path::new(vec![0, 1])).unwrap();
        let before = derived.net.params.content_hash();
        let desc = DatasetDescriptor::new(DataSource::SyntheticBlobs {
            classes: 3,
            channels: 3,
            height: 8,
            width: 8,
            count: 100,
            seed: 61,
        });
        let (train_ds, _) = ingest_dataset(&desc).unwrap();
        let cfg = FinetuneConfig { epochs: 0, ..FinetuneConfig::default() };
        let mut log = TrainLog::in_memory();
        finetune(&mut derived, &train_ds, &cfg, &mut log).unwrap();
        assert_eq!(derived.net.params.content_hash(), before);
    }

    #[test]
    fn finetune_does_not_hurt_clean_accuracy() {
        let desc = DatasetDescriptor::new(DataSource::SyntheticBlobs {
            classes: 2,
            channels: 3,
            height: 16,
            width: 16,
            count: 600,
            seed: 62,
        });
        let (train_ds, test_ds) = ingest_dataset(&desc).unwrap();
        for seed in [0u64, 1, 2] {
            let arch = parse_arch(SMALL).unwrap();
            let scope = make_scope(&arch, ScopeMode::All).unwrap();
            let spec = build_rgn_spec(&arch, scope, 2).unwrap();
            let mut rgn =
                RgnModel::<f32>::init(spec, &mut rng::stream(63 + seed, labels::INIT, 0)).unwrap();
            let cfg = TrainConfig { pretrain_epochs: 3, seed: 63 + seed, ..blob_config(63 + seed) };
            let mut opt = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
            let mut log = TrainLog::in_memory();
            pretrain(&mut rgn, &train_ds, &cfg, &mut opt, 0..3, &mut log).unwrap();
            let mut derived = rgn.derive_model(&Path::new(vec![0, 1])).unwrap();
            let (x, y) = test_ds.full_batch::<f32>();
            let before = ops::accuracy(&derived.net.logits(&x).unwrap(), &y);
            let fcfg = FinetuneConfig {
                epochs: 3,
                batch_size: 64,
                seed: 70 + seed,
                lr: LrSchedule::constant(0.001),
                ..FinetuneConfig::default()
            };
            finetune(&mut derived, &train_ds, &fcfg, &mut log).unwrap();
            let after = ops::accuracy(&derived.net.logits(&x).unwrap(), &y);
            assert!(after >= before - 0.005, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn train_orchestrator_runs_and_is_reproducible() {
        let desc = DatasetDescriptor::new(DataSource::SyntheticBlobs {
            classes: 3,
            channels: 3,
            height: 8,
            width: 8,
            count: 520,
            seed: 80,
        });
        let (train_ds, test_ds) = ingest_dataset(&desc).unwrap();
        let run = |seed: u64| {
            let mut rgn = small_rgn::<f32>(2, seed);
            let cfg = TrainConfig {
                pretrain_epochs: 1,
                epochs: 2,
                batch_size: 32,
                paths_per_iter: 2,
                seed,
                eval_every: 1,
                ..blob_config(seed)
            };
            let mut opt = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
            let mut log = TrainLog::in_memory();
            let mut epochs_seen = Vec::new();
            train(
                &mut rgn,
                &train_ds,
                &test_ds,
                &cfg,
                &mut opt,
                TrainPosition::start(),
                &mut log,
                |_, _, pos| {
                    epochs_seen.push(pos);
                    Ok(())
                },
            )
            .unwrap();
            (rgn.params.content_hash(), epochs_seen, log.records.len())
        };
        let (h1, seen1, recs1) = run(81);
        let (h2, seen2, _) = run(81);
        assert_eq!(h1, h2, "same seed, different final parameters");
        assert_eq!(seen1, seen2);
        // 1 pretrain + 2 diversify + final Done marker
        assert_eq!(seen1.len(), 4);
        assert_eq!(recs1, 3);
        let (h3, _, _) = run(82);
        assert_ne!(h1, h3, "different seeds should diverge");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let desc = DatasetDescriptor::new(DataSource::SyntheticBlobs {
            classes: 3,
            channels: 3,
            height: 8,
            width: 8,
            count: 260,
            seed: 90,
        });
        let (train_ds, test_ds) = ingest_dataset(&desc).unwrap();
        let cfg = TrainConfig {
            pretrain_epochs: 1,
            epochs: 2,
            batch_size: 32,
            paths_per_iter: 2,
            seed: 91,
            eval_every: 0,
            ..blob_config(91)
        };

        // uninterrupted
        let mut rgn_a = small_rgn::<f32>(2, 92);
        let mut opt_a = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
        let mut log = TrainLog::in_memory();
        train(
            &mut rgn_a,
            &train_ds,
            &test_ds,
            &cfg,
            &mut opt_a,
            TrainPosition::start(),
            &mut log,
            |_, _, _| Ok(()),
        )
        .unwrap();

        // interrupted after diversify epoch 0: snapshot state, then resume
        let mut rgn_b = small_rgn::<f32>(2, 92);
        let mut opt_b = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
        let mut snapshot: Option<(RgnModel<f32>, Sgd<f32>)> = None;
        let _ = train(
            &mut rgn_b,
            &train_ds,
            &test_ds,
            &cfg,
            &mut opt_b,
            TrainPosition::start(),
            &mut log,
            |m, o, pos| {
                if pos.phase == Phase::Diversify && pos.epoch == 1 {
                    snapshot = Some((m.clone(), o.clone()));
                    return Err(Error::Invalid("simulated kill".into()));
                }
                Ok(())
            },
        );
        let (mut rgn_c, mut opt_c) = snapshot.expect("snapshot taken");
        train(
            &mut rgn_c,
            &train_ds,
            &test_ds,
            &cfg,
            &mut opt_c,
            TrainPosition { phase: Phase::Diversify, epoch: 1 },
            &mut log,
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert_eq!(
            rgn_a.params.content_hash(),
            rgn_c.params.content_hash(),
            "resumed run diverged from uninterrupted run"
        );
    }
}
