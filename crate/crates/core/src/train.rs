//! Optimizers, schedules, training loops and the reparametrization-timing experiments.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gpsa::{is_gate_param, is_gpsa_scalar_param};
use crate::io::data::{Dataset, Split};
use crate::io::KvMap;
use crate::model::{build_cnn, count_correct, cross_entropy, ModelConfig, ModelGraph};
use crate::nn::Parameters;
use crate::reparam::{transform_last_stage, InitMode};
use crate::tensor::{no_grad, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    AdamW,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (sgd|adamw)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub optimizer: OptimizerKind,
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Stochastic depth rate.
    pub drop_rate: f64,
    /// Constant learning rate of the gate parameters λ.
    pub gating_lr: f64,
    pub seed: u64,
    pub resolution: usize,
    /// Random horizontal flips.
    pub flip: bool,
}

impl TrainPlan {
    /// SGD with momentum 0.9, peak 0.05, 40 epochs.
    pub fn from_scratch() -> Self {
        TrainPlan {
            optimizer: OptimizerKind::SgdMomentum,
            max_lr: 0.05,
            min_lr: 0.05 / 100.0,
            warmup_epochs: 2,
            total_epochs: 40,
            batch_size: 64,
            weight_decay: 5e-4,
            momentum: 0.9,
            betas: (0.9, 0.999),
            eps: 1e-8,
            drop_rate: 0.0,
            gating_lr: 0.1,
            seed: 0,
            resolution: 32,
            flip: true,
        }
    }

    /// AdamW, warmup to 1e-4 then cosine, gates at 0.1, 10 epochs.
    pub fn finetune() -> Self {
        TrainPlan {
            optimizer: OptimizerKind::AdamW,
            max_lr: 1e-4,
            min_lr: 1e-4 / 100.0,
            warmup_epochs: 1,
            total_epochs: 10,
            weight_decay: 0.05,
            ..Self::from_scratch()
        }
    }

    pub fn with_max_lr(mut self, lr: f64) -> Self {
        self.max_lr = lr;
        self.min_lr = lr / 100.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_epochs > self.total_epochs {
            return bad(format!("warmup {} exceeds total {} epochs", self.warmup_epochs, self.total_epochs));
        }
        if !(self.max_lr > 0.0) || !(self.min_lr > 0.0) || self.min_lr > self.max_lr {
            return bad(format!("need 0 < min_lr <= max_lr, got {} / {}", self.min_lr, self.max_lr));
        }
        if !(self.gating_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("gating_lr and weight_decay must be >= 0, eps > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("momentum and betas must lie in [0, 1)".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return bad(format!("stochastic depth rate must be in [0, 1), got {}", self.drop_rate));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("optimizer", self.optimizer)
            .set("max_lr", self.max_lr)
            .set("min_lr", self.min_lr)
            .set("warmup_epochs", self.warmup_epochs)
            .set("epochs", self.total_epochs)
            .set("batch_size", self.batch_size)
            .set("weight_decay", self.weight_decay)
            .set("momentum", self.momentum)
            .set("beta1", self.betas.0)
            .set("beta2", self.betas.1)
            .set("eps", self.eps)
            .set("dr", self.drop_rate)
            .set("gating_lr", self.gating_lr)
            .set("seed", self.seed)
            .set("res", self.resolution)
            .set("flip", self.flip);
        kv
    }

    /// Overrides fields present in `kv`; unknown keys are ignored.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(v) = kv.get_parsed("optimizer")? {
            self.optimizer = v;
        }
        if let Some(v) = kv.get_parsed::<f64>("max_lr")? {
            self.max_lr = v;
            if !kv.contains("min_lr") {
                self.min_lr = v / 100.0;
            }
        }
        self.min_lr = kv.get_or("min_lr", self.min_lr)?;
        self.warmup_epochs = kv.get_or("warmup_epochs", self.warmup_epochs)?;
        self.total_epochs = kv.get_or("epochs", self.total_epochs)?;
        self.batch_size = kv.get_or("batch_size", self.batch_size)?;
        self.weight_decay = kv.get_or("weight_decay", self.weight_decay)?;
        self.momentum = kv.get_or("momentum", self.momentum)?;
        self.betas.0 = kv.get_or("beta1", self.betas.0)?;
        self.betas.1 = kv.get_or("beta2", self.betas.1)?;
        self.eps = kv.get_or("eps", self.eps)?;
        self.drop_rate = kv.get_or("dr", self.drop_rate)?;
        self.gating_lr = kv.get_or("gating_lr", self.gating_lr)?;
        self.seed = kv.get_or("seed", self.seed)?;
        self.resolution = kv.get_or("res", self.resolution)?;
        self.flip = kv.get_or("flip", self.flip)?;
        if self.warmup_epochs > self.total_epochs {
            self.warmup_epochs = self.total_epochs;
        }
        self.validate()
    }
}

/// Learning rate of update `step` (1-based) for a schedule of `total_steps` updates:
/// linear from 0 to `max_lr` over `warmup_steps`, then cosine down to `min_lr`.
pub fn lr_schedule(step: usize, warmup_steps: usize, total_steps: usize, max_lr: f64, min_lr: f64) -> f64 {
    if step >= total_steps {
        return if warmup_steps >= total_steps { max_lr } else { min_lr };
    }
    if step < warmup_steps {
        return max_lr * (step as f64 / warmup_steps as f64);
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    min_lr + (max_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// [`lr_schedule`] with warmup and length taken from `plan`, in steps of `steps_per_epoch`.
pub fn lr_at(step: usize, plan: &TrainPlan, steps_per_epoch: usize) -> f64 {
    lr_schedule(
        step,
        plan.warmup_epochs * steps_per_epoch,
        plan.total_epochs * steps_per_epoch,
        plan.max_lr,
        plan.min_lr,
    )
}

/// `v ← μ·v + g + wd·θ`, `θ ← θ − lr·v`.
pub fn sgd_step<T: Element>(param: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::c(lr), T::c(momentum), T::c(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
}

/// Decoupled decay `θ ← θ(1 − lr·wd)`, then a bias-corrected Adam step. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Element>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let decay = T::c(1.0 - lr * weight_decay);
    let (tb1, tb2) = (T::c(b1), T::c(b2));
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *p = *p * decay;
        *m = tb1 * *m + (T::one() - tb1) * g;
        *v = tb2 * *v + (T::one() - tb2) * g * g;
        let mh = m.f64() / c1;
        let vh = v.f64() / c2;
        *p = *p - T::c(lr * mh / (vh.sqrt() + eps));
    }
}

/// Parameter names split into the gate group and everything else.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroups {
    pub gates: Vec<String>,
    pub rest: Vec<String>,
    /// Scalar count of the gate group.
    pub gate_scalars: usize,
}

pub fn param_groups<T: Element>(model: &ModelGraph<T>) -> ParamGroups {
    let mut g = ParamGroups::default();
    model.visit_params("", &mut |name, t| {
        if is_gate_param(&name) {
            g.gate_scalars += t.numel();
            g.gates.push(name);
        } else {
            g.rest.push(name);
        }
    });
    g
}

/// Per-parameter optimizer slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Slot<T> {
    /// Momentum buffer (SGD) or first moment (AdamW).
    pub m: Vec<T>,
    /// Second moment, AdamW only.
    pub v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    /// Updates applied so far; also the schedule position.
    pub step: u64,
    pub slots: BTreeMap<String, Slot<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState { kind, step: 0, slots: BTreeMap::new() }
    }
}

/// One epoch of [`MetricsLog`].
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Percent.
    pub train_acc: f64,
    pub test_loss: f64,
    /// Percent.
    pub test_acc: f64,
    /// σ(λ_h) per GPSA layer and head.
    pub gates: Vec<Vec<f64>>,
    /// 1/α_h per GPSA layer and head.
    pub spans: Vec<Vec<f64>>,
}

impl EpochMetrics {
    pub fn mean_gate(&self, layer: usize) -> f64 {
        let g = &self.gates[layer];
        g.iter().sum::<f64>() / g.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn test_acc(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.test_acc).collect()
    }

    pub fn train_loss(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// `epoch,lr,train_loss,train_acc,test_acc,gate_L{i}_H{j}…,span_L{i}_H{j}…`.
    /// Epochs without GPSA layers leave those cells empty.
    pub fn to_csv(&self) -> String {
        let layout: Vec<usize> = self
            .epochs
            .iter()
            .max_by_key(|e| e.gates.len())
            .map(|e| e.gates.iter().map(Vec::len).collect())
            .unwrap_or_default();
        let mut header = vec!["epoch".to_string(), "lr".into(), "train_loss".into(), "train_acc".into(), "test_acc".into()];
        for kind in ["gate", "span"] {
            for (i, &nh) in layout.iter().enumerate() {
                header.extend((0..nh).map(|j| format!("{kind}_L{i}_H{j}")));
            }
        }
        let mut out = header.join(",") + "\n";
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                format!("{:e}", e.lr),
                format!("{:.6}", e.train_loss),
                format!("{:.4}", e.train_acc),
                format!("{:.4}", e.test_acc),
            ];
            for series in [&e.gates, &e.spans] {
                for (i, &nh) in layout.iter().enumerate() {
                    row.extend((0..nh).map(|j| series.get(i).and_then(|l| l.get(j)).map(|v| format!("{v:.6}")).unwrap_or_default()));
                }
            }
            out += &(row.join(",") + "\n");
        }
        out
    }
}

/// Mean loss and accuracy (percent) in eval mode.
pub fn evaluate<T: Element>(model: &ModelGraph<T>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    no_grad(|| {
        let (mut loss, mut correct) = (0.0, 0);
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let (x, y) = data.batch::<T>(chunk, &[])?;
            let logits = model.forward_classify(&x)?;
            loss += cross_entropy(&logits, &y)?.item().f64() * chunk.len() as f64;
            correct += count_correct(&logits, &y);
        }
        Ok((loss / data.len() as f64, 100.0 * correct as f64 / data.len() as f64))
    })
}

/// Training state: plan, optimizer slots, schedule position and data-order RNG.
#[derive(Clone, Debug)]
pub struct Trainer<T: Element> {
    pub plan: TrainPlan,
    pub state: OptimizerState<T>,
    /// Samples per epoch the schedule is laid out for.
    pub samples_per_epoch: usize,
    rng: ChaCha8Rng,
}

impl<T: Element> Trainer<T> {
    pub fn new(plan: TrainPlan, samples_per_epoch: usize) -> Result<Self> {
        plan.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(plan.seed);
        Ok(Trainer { state: OptimizerState::new(plan.optimizer), plan, samples_per_epoch, rng })
    }

    /// Resumes from saved optimizer state.
    pub fn resume(plan: TrainPlan, samples_per_epoch: usize, state: OptimizerState<T>) -> Result<Self> {
        let mut t = Self::new(plan, samples_per_epoch)?;
        if state.kind != t.plan.optimizer {
            return Err(Error::Config(format!("saved {} state does not match {} plan", state.kind, t.plan.optimizer)));
        }
        t.rng = ChaCha8Rng::seed_from_u64(t.plan.seed ^ state.step.rotate_left(17));
        t.state = state;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.plan.batch_size).max(1)
    }

    /// Learning rate of the next update.
    pub fn current_lr(&self) -> f64 {
        lr_at(self.state.step as usize + 1, &self.plan, self.steps_per_epoch())
    }

    /// Applies one update from the gradients currently held by `model`.
    pub fn apply_gradients(&mut self, model: &mut ModelGraph<T>) {
        self.state.step += 1;
        let step = self.state.step;
        let lr = lr_at(step as usize, &self.plan, self.steps_per_epoch());
        let plan = &self.plan;
        let slots = &mut self.state.slots;
        model.visit_params_mut("", &mut |name, t| {
            let Some(grad) = t.grad() else { return };
            let (rate, wd) = if is_gate_param(&name) {
                (plan.gating_lr, 0.0)
            } else if is_gpsa_scalar_param(&name) {
                (lr, 0.0)
            } else {
                (lr, plan.weight_decay)
            };
            let slot = slots.entry(name).or_insert_with(|| Slot {
                m: vec![T::zero(); t.numel()],
                v: if plan.optimizer == OptimizerKind::AdamW { vec![T::zero(); t.numel()] } else { Vec::new() },
            });
            let mut p = t.to_vec();
            match plan.optimizer {
                OptimizerKind::SgdMomentum => sgd_step(&mut p, &grad, &mut slot.m, rate, plan.momentum, wd),
                OptimizerKind::AdamW => {
                    adamw_step(&mut p, &grad, &mut slot.m, &mut slot.v, step, rate, plan.betas, plan.eps, wd)
                }
            }
            *t = Tensor::from_vec(p, t.shape()).expect("same shape").requires_grad_();
        });
    }

    /// One pass over `train` in shuffled mini-batches. Returns mean loss and accuracy (percent).
    pub fn run_epoch(&mut self, model: &mut ModelGraph<T>, train: &Dataset) -> Result<(f64, f64)> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        let was_training = model.training;
        model.train_mode(true);
        for chunk in order.chunks(self.plan.batch_size) {
            let flips: Vec<bool> = chunk.iter().map(|_| self.plan.flip && self.rng.random::<bool>()).collect();
            let (x, y) = train.batch::<T>(chunk, &flips)?;
            model.zero_grad();
            let logits = model.forward(&x, &mut self.rng)?;
            let loss = cross_entropy(&logits, &y)?;
            let l = loss.item().f64();
            if !l.is_finite() {
                model.train_mode(was_training);
                return Err(Error::Numeric(format!("non-finite loss {l} at step {}", self.state.step + 1)));
            }
            loss.backward()?;
            self.apply_gradients(model);
            loss_sum += l * chunk.len() as f64;
            correct += count_correct(&logits, &y);
        }
        model.train_mode(was_training);
        let n = train.len().max(1) as f64;
        Ok((loss_sum / n, 100.0 * correct as f64 / n))
    }

    /// Runs `epochs` epochs, evaluating on `test` and appending one row per epoch.
    ///
    /// The plan's resolution and stochastic depth rate are applied first: the data is
    /// resized if needed and the model's blocks take `plan.drop_rate`.
    pub fn train_epochs(
        &mut self,
        model: &mut ModelGraph<T>,
        data: &Split,
        epochs: usize,
        log: &mut MetricsLog,
    ) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        if model.config.drop_rate != self.plan.drop_rate {
            model.set_drop_rate(self.plan.drop_rate)?;
        }
        let resized;
        let data = if self.plan.resolution != data.train.height || self.plan.resolution != data.train.width {
            resized = data.resized(self.plan.resolution)?;
            &resized
        } else {
            data
        };
        for _ in 0..epochs {
            let lr = self.current_lr();
            let t0 = Instant::now();
            let (train_loss, train_acc) = self.run_epoch(model, &data.train)?;
            let (test_loss, test_acc) = evaluate(model, &data.test, 250)?;
            let layers = model.gpsa_layers();
            let epoch = log.epochs.last().map_or(1, |e| e.epoch + 1);
            log::info!(
                "epoch {epoch}: lr {lr:.3e} train loss {train_loss:.4} acc {train_acc:.2} test acc {test_acc:.2} ({:.1}s)",
                t0.elapsed().as_secs_f64()
            );
            log.epochs.push(EpochMetrics {
                epoch,
                lr,
                train_loss,
                train_acc,
                test_loss,
                test_acc,
                gates: layers.iter().map(|(_, l)| l.gating_values()).collect(),
                spans: layers.iter().map(|(_, l)| l.attention_span()).collect(),
            });
        }
        Ok(())
    }
}

/// Trains `model` for `plan.total_epochs` epochs with a fresh optimizer.
pub fn train_epochs<T: Element>(
    model: &mut ModelGraph<T>,
    data: &Split,
    plan: &TrainPlan,
    log: &mut MetricsLog,
) -> Result<Trainer<T>> {
    let mut trainer = Trainer::new(plan.clone(), data.train.len())?;
    trainer.train_epochs(model, data, plan.total_epochs, log)?;
    Ok(trainer)
}

/// Shared inputs of the timing experiments.
#[derive(Clone, Debug)]
pub struct ExperimentSetup<'a> {
    pub model: &'a ModelConfig,
    pub data: &'a Split,
    /// From-scratch plan; `total_epochs` is the budget.
    pub scratch: TrainPlan,
    /// Fresh plan used after surgery when the optimizer is not kept.
    pub finetune: TrainPlan,
    pub init: InitMode,
}

/// One row of the reparametrization-timing table.
#[derive(Clone, Debug)]
pub struct ScheduleRow {
    pub name: String,
    pub t1: usize,
    pub t2: usize,
    pub same_optimizer: bool,
    pub seconds: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Per transformed layer, `max_h |σ(λ_h) − σ(λ_init)|` at the end.
    pub gate_shift: Vec<f64>,
    pub log: MetricsLog,
}

fn gate_shift<T: Element>(model: &ModelGraph<T>, init: &InitMode) -> Vec<f64> {
    let g0 = crate::gpsa::sigmoid(init.lambda_init);
    model
        .gpsa_layers()
        .iter()
        .map(|(_, l)| l.gating_values().iter().map(|g| (g - g0).abs()).fold(0.0, f64::max))
        .collect()
}

fn row_name(t1: usize, t2: usize, budget: usize, same: bool) -> String {
    match (t1, t2, same) {
        (_, 0, _) => "Vanilla CNN".into(),
        (0, _, true) => "Vanilla hybrid".into(),
        (_, _, true) => "T-CNN*".into(),
        (t1, _, false) if t1 == budget => "T-CNN".into(),
        _ => "T-CNN (fresh)".into(),
    }
}

/// Snapshot of a from-scratch CNN run after `epochs` epochs.
struct Snapshot<T: Element> {
    epochs: usize,
    model: ModelGraph<T>,
    trainer: Trainer<T>,
    log: MetricsLog,
    seconds: f64,
}

fn cnn_prefix<T: Element>(setup: &ExperimentSetup, stops: &[usize]) -> Result<Vec<Snapshot<T>>> {
    let mut stops = stops.to_vec();
    stops.sort_unstable();
    stops.dedup();
    let mut model: ModelGraph<T> = build_cnn(setup.model)?;
    let mut trainer = Trainer::new(setup.scratch.clone(), setup.data.train.len())?;
    let mut log = MetricsLog::default();
    let (mut done, mut seconds) = (0, 0.0);
    let mut out = Vec::new();
    for stop in stops {
        let t0 = Instant::now();
        trainer.train_epochs(&mut model, setup.data, stop - done, &mut log)?;
        seconds += t0.elapsed().as_secs_f64();
        done = stop;
        out.push(Snapshot { epochs: stop, model: model.clone(), trainer: trainer.clone(), log: log.clone(), seconds });
    }
    Ok(out)
}

fn finish_row<T: Element>(
    setup: &ExperimentSetup,
    snap: &Snapshot<T>,
    t2: usize,
    same_optimizer: bool,
    transform: bool,
) -> Result<ScheduleRow> {
    let budget = setup.scratch.total_epochs;
    let t1 = snap.epochs;
    let mut model = snap.model.clone();
    let mut log = snap.log.clone();
    let t0 = Instant::now();
    if t2 > 0 {
        if transform {
            model = transform_last_stage(&model, &setup.init)?.0;
        }
        if same_optimizer {
            let mut trainer = snap.trainer.clone();
            trainer.train_epochs(&mut model, setup.data, t2, &mut log)?;
        } else {
            let plan = TrainPlan { total_epochs: t2, ..setup.finetune.clone() };
            let mut trainer = Trainer::new(plan, setup.data.train.len())?;
            trainer.train_epochs(&mut model, setup.data, t2, &mut log)?;
        }
    }
    let last = log.last().cloned();
    Ok(ScheduleRow {
        name: if transform { row_name(t1, t2, budget, same_optimizer) } else { "Vanilla CNN + ft".into() },
        t1,
        t2,
        same_optimizer,
        seconds: snap.seconds + t0.elapsed().as_secs_f64(),
        train_acc: last.as_ref().map_or(0.0, |e| e.train_acc),
        test_acc: match &last {
            Some(e) => e.test_acc,
            None => evaluate(&model, &setup.data.test, 250)?.1,
        },
        gate_shift: gate_shift(&model, &setup.init),
        log,
    })
}

fn check_budget(setup: &ExperimentSetup, t1: usize, t2: usize, same_optimizer: bool) -> Result<()> {
    let budget = setup.scratch.total_epochs;
    if t1 > budget {
        return Err(Error::Config(format!("t1 = {t1} exceeds the {budget}-epoch budget")));
    }
    if same_optimizer && t1 + t2 != budget {
        return Err(Error::Config(format!("t1 + t2 = {} must equal the {budget}-epoch budget", t1 + t2)));
    }
    Ok(())
}

/// Trains the CNN for `t1` epochs, transforms it and trains `t2` more.
///
/// `same_optimizer` keeps the optimizer state and schedule (t1 + t2 must equal the
/// budget); otherwise a fresh `setup.finetune` plan of `t2` epochs is used.
pub fn schedule_experiment<T: Element>(
    setup: &ExperimentSetup,
    t1: usize,
    t2: usize,
    same_optimizer: bool,
) -> Result<ScheduleRow> {
    check_budget(setup, t1, t2, same_optimizer)?;
    let snap = cnn_prefix::<T>(setup, &[t1])?.pop().expect("one snapshot");
    finish_row(setup, &snap, t2, same_optimizer, true)
}

/// Same-optimizer rows for every `t1` (sharing one CNN run). When `finetune_epochs > 0`
/// two more rows continue the full-budget CNN with a fresh `setup.finetune` plan:
/// "T-CNN" after surgery and "Vanilla CNN + ft" without it.
pub fn schedule_sweep<T: Element>(
    setup: &ExperimentSetup,
    t1s: &[usize],
    finetune_epochs: usize,
) -> Result<Vec<ScheduleRow>> {
    let budget = setup.scratch.total_epochs;
    for &t1 in t1s {
        check_budget(setup, t1, budget - t1.min(budget), true)?;
    }
    let mut stops = t1s.to_vec();
    if finetune_epochs > 0 {
        stops.push(budget);
    }
    let snaps = cnn_prefix::<T>(setup, &stops)?;
    let find = |t1: usize| snaps.iter().find(|s| s.epochs == t1).expect("snapshot taken");
    let mut rows = Vec::new();
    for &t1 in t1s {
        rows.push(finish_row(setup, find(t1), budget - t1, true, true)?);
    }
    if finetune_epochs > 0 {
        rows.push(finish_row(setup, find(budget), finetune_epochs, false, true)?);
        rows.push(finish_row(setup, find(budget), finetune_epochs, false, false)?);
    }
    Ok(rows)
}

/// Continues a CNN with the fine-tuning plan and no surgery, for equal-epoch comparisons.
pub fn finetune_cnn_baseline<T: Element>(
    cnn: &ModelGraph<T>,
    data: &Split,
    plan: &TrainPlan,
) -> Result<(ModelGraph<T>, MetricsLog)> {
    let mut model = cnn.clone();
    let mut log = MetricsLog::default();
    train_epochs(&mut model, data, plan, &mut log)?;
    Ok((model, log))
}

/// Table of the rows. Wall-clock time is left out so identical runs give identical files;
/// see [`schedule_table`].
pub fn schedule_csv(rows: &[ScheduleRow]) -> String {
    let mut out = String::from("name,t1,t2,same_optimizer,train_acc,test_acc,max_gate_shift\n");
    for r in rows {
        let shift = r.gate_shift.iter().copied().fold(f64::NAN, f64::max);
        out += &format!(
            "{},{},{},{},{:.4},{:.4},{}\n",
            r.name,
            r.t1,
            r.t2,
            r.same_optimizer,
            r.train_acc,
            r.test_acc,
            if shift.is_nan() { String::new() } else { format!("{shift:.6}") }
        );
    }
    out
}

/// Human-readable rows including training time.
pub fn schedule_table(rows: &[ScheduleRow]) -> String {
    let mut out = format!("{:<16} {:>4} {:>4} {:>10} {:>9} {:>9}\n", "name", "t1", "t2", "time (s)", "train %", "test %");
    for r in rows {
        out += &format!(
            "{:<16} {:>4} {:>4} {:>10.1} {:>9.2} {:>9.2}\n",
            r.name, r.t1, r.t2, r.seconds, r.train_acc, r.test_acc
        );
    }
    out
}

/// One fine-tuning run of [`lr_sweep`].
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub max_lr: f64,
    /// Test accuracy before fine-tuning.
    pub initial_test_acc: f64,
    pub log: MetricsLog,
}

impl SweepRun {
    /// Initial accuracy minus the lowest test accuracy up to the end of warmup (at least one epoch).
    pub fn dip_depth(&self, warmup_epochs: usize) -> f64 {
        let upto = warmup_epochs.max(1).min(self.log.len());
        let low = self.log.epochs[..upto].iter().map(|e| e.test_acc).fold(f64::INFINITY, f64::min);
        if low.is_finite() {
            self.initial_test_acc - low
        } else {
            0.0
        }
    }
}

/// Fine-tunes a copy of `model` under each peak learning rate, in order.
pub fn lr_sweep<T: Element>(model: &ModelGraph<T>, lrs: &[f64], plan: &TrainPlan, data: &Split) -> Result<Vec<SweepRun>> {
    if lrs.is_empty() {
        return Err(Error::Config("lr sweep needs at least one rate".into()));
    }
    let initial_test_acc = evaluate(model, &data.test, 250)?.1;
    lrs.iter()
        .map(|&lr| {
            let mut m = model.clone();
            let mut log = MetricsLog::default();
            train_epochs(&mut m, data, &plan.clone().with_max_lr(lr), &mut log)?;
            Ok(SweepRun { max_lr: lr, initial_test_acc, log })
        })
        .collect()
}

pub fn sweep_csv(runs: &[SweepRun], warmup_epochs: usize) -> String {
    let mut out = String::from("max_lr,initial_test_acc,dip_depth,final_test_acc,test_acc_by_epoch\n");
    for r in runs {
        let series: Vec<String> = r.log.test_acc().iter().map(|a| format!("{a:.4}")).collect();
        out += &format!(
            "{:e},{:.4},{:.4},{:.4},{}\n",
            r.max_lr,
            r.initial_test_acc,
            r.dip_depth(warmup_epochs),
            r.log.last().map_or(r.initial_test_acc, |e| e.test_acc),
            series.join(";")
        );
    }
    out
}
