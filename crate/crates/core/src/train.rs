//! Training loops: supervised-only ("none"), vanilla GAN, and CycleGAN.
//!
//! Per iteration the discriminator(s) take one Adam step on the current
//! batch, then the generator(s) take one; discriminators first. Identical
//! seed + config reproduce the loss log bitwise in deterministic mode, and a
//! resumed run continues exactly where the checkpoint stopped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{batch_indices, stack_batch, Sample};
use crate::error::{Error, Result};
use crate::graph::{GradGraph, Var};
use crate::losses::{adversarial_pair, l1_mean, supervised_loss};
use crate::models::{discriminator_params, generator_forward, generator_params, ModelConfig};
use crate::nn::{bind, collect_grads, init_params, Bound, ParamSet};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopKind {
    /// Supervised generator training only (no discriminator).
    None,
    Gan,
    Cyclegan,
}

impl LoopKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LoopKind::None => "none",
            LoopKind::Gan => "gan",
            LoopKind::Cyclegan => "cyclegan",
        }
    }

    pub fn net_names(&self) -> &'static [&'static str] {
        match self {
            LoopKind::None => &["g"],
            LoopKind::Gan => &["d", "g"],
            LoopKind::Cyclegan => &["d1", "d2", "g1", "g2"],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "loop")]
    pub loop_kind: LoopKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_seg: f64,
    pub lambda_cyc: f64,
    pub seed: u64,
    /// Stop after this many iterations even if epochs remain.
    pub max_iterations: Option<u64>,
    pub checkpoint_dir: Option<String>,
    pub checkpoint_interval: u64,
    /// Suppresses wall-clock times in the log so reruns are byte-identical.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loop_kind: LoopKind::Gan,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 8,
            lambda_seg: 100.0,
            lambda_cyc: 10.0,
            seed: 42,
            max_iterations: None,
            checkpoint_dir: None,
            checkpoint_interval: 100,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.lambda_seg < 0.0 || self.lambda_cyc < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub iteration: u64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_cycle: Option<f64>,
    pub loss_g2: Option<f64>,
    pub loss_d2: Option<f64>,
    pub seconds: f64,
    /// Unweighted supervised term, kept out of the CSV.
    pub supervised: f64,
}

/// Append-only loss log; iterations strictly increase.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub cyclegan_columns: bool,
}

impl TrainLog {
    pub fn new(cyclegan_columns: bool) -> Self {
        TrainLog { records: Vec::new(), cyclegan_columns }
    }

    pub fn push(&mut self, record: TrainRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.iteration > last.iteration, "iterations must increase");
        }
        self.records.push(record);
    }

    pub fn header(&self) -> &'static str {
        if self.cyclegan_columns {
            "iteration,loss_G,loss_D,loss_cycle,loss_G2,loss_D2,seconds"
        } else {
            "iteration,loss_G,loss_D,seconds"
        }
    }

    fn record_line(&self, r: &TrainRecord) -> String {
        if self.cyclegan_columns {
            format!(
                "{},{},{},{},{},{},{:.3}",
                r.iteration,
                r.loss_g,
                r.loss_d,
                r.loss_cycle.unwrap_or(0.0),
                r.loss_g2.unwrap_or(0.0),
                r.loss_d2.unwrap_or(0.0),
                r.seconds
            )
        } else {
            format!("{},{},{},{:.3}", r.iteration, r.loss_g, r.loss_d, r.seconds)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(self.header());
        out.push('\n');
        for r in &self.records {
            out.push_str(&self.record_line(r));
            out.push('\n');
        }
        out
    }

    /// Write the whole log, or only rows after `from_iteration` when
    /// appending to an existing file (resume).
    pub fn write_csv(&self, path: &Path, from_iteration: u64) -> Result<()> {
        use std::io::Write;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        if from_iteration == 0 {
            std::fs::write(path, self.to_csv())
                .map_err(|e| Error::io(path.display().to_string(), e))
        } else {
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            for r in self.records.iter().filter(|r| r.iteration > from_iteration) {
                writeln!(f, "{}", self.record_line(r))
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            Ok(())
        }
    }
}

/// Trained parameter sets, optimizer states and the loss log.
pub struct TrainOutcome {
    pub nets: BTreeMap<String, ParamSet>,
    pub opt: BTreeMap<String, OptimizerState>,
    pub log: TrainLog,
    pub iterations: u64,
    /// Paths of checkpoints written during the run, in order.
    pub checkpoints: Vec<PathBuf>,
}

fn fresh_nets(model: &ModelConfig, kind: LoopKind, seed: u64) -> Result<BTreeMap<String, ParamSet>> {
    let mut nets = BTreeMap::new();
    for &name in kind.net_names() {
        let ps = match name {
            "g" | "g1" | "g2" => generator_params(&model.generator)?,
            _ => discriminator_params(&model.discriminator.spec()?)?,
        };
        nets.insert(name.to_string(), ps);
    }
    // per-net derived streams keep each net's init independent of how many
    // nets the loop kind instantiates
    let rng = Rng::new(seed);
    for (i, (_, ps)) in nets.iter_mut().enumerate() {
        let mut sub = rng.split(i as u64 + 1);
        init_params(ps, &mut sub);
    }
    Ok(nets)
}

fn forward_no_grad(
    g_net: &ParamSet,
    model: &ModelConfig,
    input: &Tensor,
) -> Result<Tensor> {
    let mut g = GradGraph::new();
    let bound = bind(&mut g, g_net, false);
    let x = g.constant(input.clone());
    let out = generator_forward(&mut g, x, &bound, &model.generator)?;
    Ok(g.value(out).clone())
}

fn check_loss(value: f64, iteration: u64, term: &str) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: format!("iteration {iteration}, term {term}"),
            detail: format!("loss value {value}"),
        });
    }
    Ok(value)
}

struct NetGroup<'a> {
    nets: &'a mut BTreeMap<String, ParamSet>,
    opt: &'a mut BTreeMap<String, OptimizerState>,
}

impl NetGroup<'_> {
    /// Run `build` on a fresh graph with `trainables` bound for update and
    /// `frozen` bound read-only, backprop the returned loss and Adam-step
    /// every trainable net.
    fn step(
        &mut self,
        trainables: &[&str],
        frozen: &[&str],
        adam: &AdamConfig,
        build: impl FnOnce(&mut GradGraph, &BTreeMap<String, Bound>) -> Result<(Var, Vec<f64>)>,
    ) -> Result<Vec<f64>> {
        let mut g = GradGraph::new();
        let mut bounds = BTreeMap::new();
        for &name in trainables {
            let ps = self.nets.get(name).expect("net exists");
            bounds.insert(name.to_string(), bind(&mut g, ps, true));
        }
        for &name in frozen {
            let ps = self.nets.get(name).expect("net exists");
            bounds.insert(name.to_string(), bind(&mut g, ps, false));
        }
        let (loss, values) = build(&mut g, &bounds)?;
        g.backward(loss)?;
        for &name in trainables {
            let bound = &bounds[name];
            let ps = self.nets.get_mut(name).expect("net exists");
            collect_grads(&g, bound, ps);
            adam_step(ps, self.opt.get_mut(name).expect("state exists"), adam)?;
        }
        Ok(values)
    }
}

/// Train on `dataset` according to `cfg`, optionally resuming from a loaded
/// checkpoint. The batch schedule is derived from (seed, epoch), so a resumed
/// run walks the identical sequence the uninterrupted run would have.
pub fn train(
    dataset: &[Sample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    for s in dataset {
        s.validate()?;
    }
    let kind = cfg.loop_kind;
    let mult = model.generator.spatial_multiple();
    for s in dataset {
        let (h, w) = s.spatial();
        if h % mult != 0 || w % mult != 0 {
            return Err(Error::Config(format!(
                "sample {} is {h}x{w}, not divisible by {mult}",
                s.id
            )));
        }
    }

    let (mut nets, mut opt, start_iteration) = match resume {
        Some(ckpt) => {
            if ckpt.loop_kind != kind.as_str() {
                return Err(Error::Config(format!(
                    "checkpoint was trained with loop '{}', config says '{}'",
                    ckpt.loop_kind,
                    kind.as_str()
                )));
            }
            let expected = fresh_nets(model, kind, cfg.seed)?;
            for (name, ps) in &expected {
                let loaded = ckpt
                    .nets
                    .get(name)
                    .ok_or_else(|| Error::CheckpointNames(format!("net '{name}' missing")))?;
                checkpoint::validate_net(ps, loaded, name)?;
            }
            let mut opt = ckpt.opt;
            for name in ckpt.nets.keys() {
                opt.entry(name.clone()).or_insert_with(Default::default);
            }
            (ckpt.nets, opt, ckpt.iteration)
        }
        None => {
            let nets = fresh_nets(model, kind, cfg.seed)?;
            let opt = nets.iter().map(|(n, ps)| (n.clone(), OptimizerState::new(ps))).collect();
            (nets, opt, 0)
        }
    };

    let adam = cfg.adam();
    let model_json = serde_json::to_value(model).map_err(|e| Error::Config(e.to_string()))?;
    let per_epoch = dataset.len().div_ceil(cfg.batch_size) as u64;
    let total_planned = (per_epoch * cfg.epochs as u64).min(cfg.max_iterations.unwrap_or(u64::MAX));
    let mut log = TrainLog::new(kind == LoopKind::Cyclegan);
    let mut iteration = start_iteration;
    let mut checkpoints = Vec::new();
    let base_rng = Rng::new(cfg.seed);

    let start_epoch = (start_iteration / per_epoch) as usize;
    'outer: for epoch in start_epoch..cfg.epochs {
        let mut order_rng = base_rng.split(0x5eed_0000 + epoch as u64);
        let batches = batch_indices(dataset.len(), cfg.batch_size, &mut order_rng)?;
        for (bi, batch) in batches.iter().enumerate() {
            // skip batches the resumed checkpoint already consumed
            if (epoch as u64) * per_epoch + bi as u64 + 1 <= start_iteration {
                continue;
            }
            if iteration >= total_planned {
                break 'outer;
            }
            iteration += 1;
            let t0 = Instant::now();
            let (images, masks) = stack_batch(dataset, batch)?;
            let group = &mut NetGroup { nets: &mut nets, opt: &mut opt };
            let record = match kind {
                LoopKind::None => step_supervised(group, model, &adam, &images, &masks, iteration)?,
                LoopKind::Gan => step_gan(group, model, cfg, &adam, &images, &masks, iteration)?,
                LoopKind::Cyclegan => {
                    step_cyclegan(group, model, cfg, &adam, &images, &masks, iteration)?
                }
            };
            let seconds = if cfg.deterministic { 0.0 } else { t0.elapsed().as_secs_f64() };
            log.push(TrainRecord { seconds, ..record });

            if let Some(dir) = &cfg.checkpoint_dir {
                if iteration % cfg.checkpoint_interval == 0 || iteration == total_planned {
                    let path = Path::new(dir).join(format!("ckpt_{iteration:06}.stgan"));
                    let ckpt = Checkpoint {
                        iteration,
                        loop_kind: kind.as_str().to_string(),
                        model: model_json.clone(),
                        nets: nets.clone(),
                        opt: opt.clone(),
                    };
                    checkpoint::save(&path, &ckpt)?;
                    checkpoints.push(path);
                }
            }
            if iteration >= total_planned {
                break 'outer;
            }
        }
    }

    Ok(TrainOutcome { nets, opt, log, iterations: iteration, checkpoints })
}

fn step_supervised(
    group: &mut NetGroup,
    model: &ModelConfig,
    adam: &AdamConfig,
    images: &Tensor,
    masks: &Tensor,
    iteration: u64,
) -> Result<TrainRecord> {
    let values = group.step(&["g"], &[], adam, |g, bounds| {
        let img = g.constant(images.clone());
        let gt = g.constant(masks.clone());
        let pred = generator_forward(g, img, &bounds["g"], &model.generator)?;
        let sup = supervised_loss(g, pred, gt)?;
        Ok((sup, vec![g.value(sup).item()]))
    })?;
    let sup = check_loss(values[0], iteration, "supervised")?;
    Ok(TrainRecord {
        iteration,
        loss_g: sup,
        loss_d: 0.0,
        loss_cycle: None,
        loss_g2: None,
        loss_d2: None,
        seconds: 0.0,
        supervised: sup,
    })
}

fn step_gan(
    group: &mut NetGroup,
    model: &ModelConfig,
    cfg: &TrainConfig,
    adam: &AdamConfig,
    images: &Tensor,
    masks: &Tensor,
    iteration: u64,
) -> Result<TrainRecord> {
    let spec = model.discriminator.spec()?;
    // D step: prediction detached by construction (no-grad forward)
    let pred = forward_no_grad(&group.nets["g"], model, images)?;
    let d_values = group.step(&["d"], &[], adam, |g, bounds| {
        let img = g.constant(images.clone());
        let gt = g.constant(masks.clone());
        let fake = g.constant(pred.clone());
        let (loss_d, _) = adversarial_pair(g, &bounds["d"], &spec, img, gt, fake)?;
        Ok((loss_d, vec![g.value(loss_d).item()]))
    })?;
    let loss_d = check_loss(d_values[0], iteration, "loss_D")?;

    // G step: discriminator frozen
    let g_values = group.step(&["g"], &["d"], adam, |g, bounds| {
        let img = g.constant(images.clone());
        let gt = g.constant(masks.clone());
        let pred = generator_forward(g, img, &bounds["g"], &model.generator)?;
        let (_, adv) = adversarial_pair(g, &bounds["d"], &spec, img, gt, pred)?;
        let sup = supervised_loss(g, pred, gt)?;
        let weighted = g.scale(sup, cfg.lambda_seg);
        let loss_g = g.add(adv, weighted)?;
        Ok((loss_g, vec![g.value(loss_g).item(), g.value(sup).item()]))
    })?;
    let loss_g = check_loss(g_values[0], iteration, "loss_G")?;
    Ok(TrainRecord {
        iteration,
        loss_g,
        loss_d,
        loss_cycle: None,
        loss_g2: None,
        loss_d2: None,
        seconds: 0.0,
        supervised: g_values[1],
    })
}

fn step_cyclegan(
    group: &mut NetGroup,
    model: &ModelConfig,
    cfg: &TrainConfig,
    adam: &AdamConfig,
    images: &Tensor,
    masks: &Tensor,
    iteration: u64,
) -> Result<TrainRecord> {
    let spec = model.discriminator.spec()?;
    let pred_mask = forward_no_grad(&group.nets["g1"], model, images)?;
    let pred_image = forward_no_grad(&group.nets["g2"], model, masks)?;

    let d1_values = group.step(&["d1"], &[], adam, |g, bounds| {
        let img = g.constant(images.clone());
        let gt = g.constant(masks.clone());
        let fake = g.constant(pred_mask.clone());
        let (loss_d, _) = adversarial_pair(g, &bounds["d1"], &spec, img, gt, fake)?;
        Ok((loss_d, vec![g.value(loss_d).item()]))
    })?;
    let loss_d1 = check_loss(d1_values[0], iteration, "loss_D1")?;

    let d2_values = group.step(&["d2"], &[], adam, |g, bounds| {
        let img = g.constant(images.clone());
        let gt = g.constant(masks.clone());
        let fake = g.constant(pred_image.clone());
        let (loss_d, _) = adversarial_pair(g, &bounds["d2"], &spec, gt, img, fake)?;
        Ok((loss_d, vec![g.value(loss_d).item()]))
    })?;
    let loss_d2 = check_loss(d2_values[0], iteration, "loss_D2")?;

    let g_values = group.step(&["g1", "g2"], &["d1", "d2"], adam, |g, bounds| {
        let img = g.constant(images.clone());
        let gt = g.constant(masks.clone());
        let pred_mask = generator_forward(g, img, &bounds["g1"], &model.generator)?;
        let (_, adv1) = adversarial_pair(g, &bounds["d1"], &spec, img, gt, pred_mask)?;
        let pred_image = generator_forward(g, gt, &bounds["g2"], &model.generator)?;
        let (_, adv2) = adversarial_pair(g, &bounds["d2"], &spec, gt, img, pred_image)?;

        let recon_image = generator_forward(g, pred_mask, &bounds["g2"], &model.generator)?;
        let recon_mask = generator_forward(g, pred_image, &bounds["g1"], &model.generator)?;
        let cyc_img = l1_mean(g, recon_image, img)?;
        let cyc_mask = l1_mean(g, recon_mask, gt)?;
        let cyc_sum = g.add(cyc_img, cyc_mask)?;
        let cycle = g.scale(cyc_sum, cfg.lambda_cyc);

        let sup = supervised_loss(g, pred_mask, gt)?;
        let weighted_sup = g.scale(sup, cfg.lambda_seg);

        let adv = g.add(adv1, adv2)?;
        let partial = g.add(adv, cycle)?;
        let total = g.add(partial, weighted_sup)?;
        Ok((
            total,
            vec![
                g.value(adv1).item() + g.value(weighted_sup).item(),
                g.value(adv2).item(),
                g.value(cycle).item(),
                g.value(sup).item(),
            ],
        ))
    })?;
    let loss_g1 = check_loss(g_values[0], iteration, "loss_G")?;
    let loss_g2 = check_loss(g_values[1], iteration, "loss_G2")?;
    let loss_cycle = check_loss(g_values[2], iteration, "loss_cycle")?;

    Ok(TrainRecord {
        iteration,
        loss_g: loss_g1,
        loss_d: loss_d1,
        loss_cycle: Some(loss_cycle),
        loss_g2: Some(loss_g2),
        loss_d2: Some(loss_d2),
        seconds: 0.0,
        supervised: g_values[3],
    })
}
