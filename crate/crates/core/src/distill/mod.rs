//! Three-stage training: supervised teacher, guided burn-in of a freshly
//! initialised student on teacher pseudo-labels, then weight handoff and
//! EMA teacher updates.

mod augment;
mod log;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::maskhead::{argmax_mask, LossWeights};
use crate::model::{Model, ModelParams, PolySchedule, Segmenter, Sgd, Stage};
use crate::synthdata::{Sample, SegMask};
use crate::tensor::{Element, Tensor};

pub use augment::{AugmentationPair, ColorJitter, Erase, View};
pub use log::{LogRecord, MetricsLog};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisedConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    /// Validation interval in iterations; 0 evaluates only at the end.
    pub eval_interval: u64,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            iterations: 2000,
            batch_size: 8,
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            eval_interval: 250,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub burn_in: u64,
    pub total: u64,
    pub alpha: f64,
    pub lambda_u: f64,
    /// Early stop after this many evaluations without improvement.
    pub patience: u32,
    pub min_delta: f64,
    pub eval_interval: u64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub seed: u64,
    /// Seed of the fresh student initialisation.
    pub student_seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            burn_in: 200,
            total: 900,
            alpha: 0.9996,
            lambda_u: 2.0,
            patience: 5,
            min_delta: 1e-3,
            eval_interval: 50,
            labeled_batch: 4,
            unlabeled_batch: 4,
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            seed: 2,
            student_seed: 3,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in > self.total {
            return Err(Error::Config("burn_in must not exceed total".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must be in [0, 1]".into()));
        }
        if self.lambda_u < 0.0 {
            return Err(Error::Config("lambda_u must be non-negative".into()));
        }
        if self.labeled_batch == 0 {
            return Err(Error::Config("labeled_batch must be positive".into()));
        }
        Ok(())
    }
}

/// `teacher ← α·teacher + (1 − α)·student`, elementwise.
pub fn ema_update<T: Element>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, alpha: f64) -> Result<()> {
    if !teacher.same_schema(student) {
        return Err(Error::invalid("teacher and student schemas differ"));
    }
    let a = T::from_f64(alpha);
    let b = T::from_f64(1.0 - alpha);
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(())
}

/// Argmax of the teacher's logits; no confidence threshold.
pub fn pseudo_label(teacher: &dyn Segmenter, image: &Tensor) -> Result<SegMask> {
    argmax_mask(&teacher.infer(image)?)
}

/// Shuffled index stream; reshuffles at every epoch boundary.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Sampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn labeled_mask(s: &Sample) -> Result<&SegMask> {
    s.mask
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("sample {} has no mask", s.sample_id)))
}

/// Validation mIoU of `model` on labeled samples.
pub fn validation_miou(model: &dyn Segmenter, val: &[Sample]) -> Result<f64> {
    let pairs: Vec<(&Tensor, &SegMask)> = val.iter().map(|s| Ok((&s.image, labeled_mask(s)?))).collect::<Result<_>>()?;
    evaluate(model, &pairs)?.miou().map(|(_, m)| m)
}

/// Mean loss and gradient over `(image, label)` pairs.
fn batch_gradient(model: &Model, items: &[(Tensor, SegMask)], loss: &LossWeights) -> Result<(f64, ModelParams)> {
    let mut grads = model.params.zeros_like();
    let mut total = 0.0;
    let inv = 1.0 / items.len().max(1) as f32;
    for (image, mask) in items {
        let out = model.loss_and_grad(image, &model.loss_targets(mask)?, loss)?;
        total += out.loss.total;
        grads.axpy(inv, &out.grads)?;
    }
    Ok((total / items.len().max(1) as f64, grads))
}

/// Supervised training of a fresh or given model. Returns the trained
/// model and its log.
pub fn train_supervised(mut model: Model, labeled: &[Sample], val: &[Sample], cfg: &SupervisedConfig) -> Result<(Model, MetricsLog)> {
    if labeled.is_empty() {
        return Err(Error::invalid("supervised training needs labeled samples"));
    }
    let mut sampler = Sampler::new(labeled.len(), stream(cfg.seed, 1));
    let mut aug_rng = stream(cfg.seed, 2);
    let schedule = PolySchedule {
        base_lr: cfg.optim.base_lr,
        power: cfg.optim.poly_power,
        total: cfg.iterations,
    };
    let mut opt = Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay);
    let mut log = MetricsLog::default();
    let mut window = 0.0;
    let mut window_n = 0u32;
    for it in 0..cfg.iterations {
        let batch: Vec<(Tensor, SegMask)> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| {
                let s = &labeled[i];
                let v = View::photometric(&mut aug_rng);
                Ok((v.apply(&s.image), v.apply_mask(labeled_mask(s)?)))
            })
            .collect::<Result<_>>()?;
        let (loss, grads) = batch_gradient(&model, &batch, &cfg.loss)?;
        opt.step(&mut model.params, &grads, schedule.lr(it))?;
        window += loss;
        window_n += 1;
        let done = it + 1;
        let at_eval = (cfg.eval_interval > 0 && done % cfg.eval_interval == 0) || done == cfg.iterations;
        if at_eval {
            let miou = if val.is_empty() { None } else { Some(validation_miou(&model, val)?) };
            let l_s = window / f64::from(window_n);
            log.push(LogRecord {
                iteration: done,
                stage: Stage::Supervised,
                l_s,
                l_u: 0.0,
                l: l_s,
                val_miou: miou,
            });
            ::log::info!("supervised it={done} loss={l_s:.4} val_miou={miou:?}");
            window = 0.0;
            window_n = 0;
        }
    }
    Ok((model, log))
}

/// Teacher, student and schedule position.
#[derive(Clone, Debug)]
pub struct DistillState {
    pub teacher: Model,
    pub student: Model,
    pub stage: Stage,
    pub iteration: u64,
    pub alpha: f64,
    pub lambda_u: f64,
    pub seed: u64,
    /// 64-bit accumulator behind `teacher` during the EMA stage; the f32
    /// teacher is re-cast from it after every update.
    pub teacher_acc: Option<ModelParams<f64>>,
}

impl DistillState {
    /// Burn-in start: the student is a fresh random initialisation.
    pub fn new(teacher: Model, cfg: &DistillConfig) -> Result<Self> {
        let student = Model::init(teacher.config, cfg.student_seed)?;
        Ok(DistillState {
            teacher,
            student,
            stage: Stage::BurnIn,
            iteration: 0,
            alpha: cfg.alpha,
            lambda_u: cfg.lambda_u,
            seed: cfg.seed,
            teacher_acc: None,
        })
    }

    /// The EMA update of the teacher from the current student.
    pub fn ema_update(&mut self) -> Result<()> {
        if self.stage != Stage::Ema {
            return Err(Error::invalid("EMA updates happen only in the EMA stage"));
        }
        let acc = self.teacher_acc.get_or_insert_with(|| self.teacher.params.cast());
        ema_update(acc, &self.student.params.cast(), self.alpha)?;
        self.teacher.params = acc.cast();
        Ok(())
    }

    /// Teacher takes the student's weights and the EMA stage begins.
    pub fn handoff(&mut self) {
        self.teacher.params = self.student.params.clone();
        self.teacher_acc = Some(self.student.params.cast());
        self.stage = Stage::Ema;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub l_s: f64,
    pub l_u: f64,
    pub l: f64,
}

/// One student step on `L_s + λ_u·L_u`, followed by the EMA update in the
/// EMA stage. `views` supplies the augmentation for each unlabeled image.
pub fn train_step(
    state: &mut DistillState,
    opt: &mut Sgd,
    lr: f64,
    labeled: &[(Tensor, SegMask)],
    unlabeled: &[(Tensor, AugmentationPair)],
    loss: &LossWeights,
) -> Result<StepLoss> {
    if labeled.is_empty() {
        return Err(Error::invalid("every step needs a labeled batch"));
    }
    if state.stage == Stage::Supervised {
        return Err(Error::invalid("train_step runs in burn_in or ema"));
    }
    let (l_s, mut grads) = batch_gradient(&state.student, labeled, loss)?;
    let mut l_u = 0.0;
    if !unlabeled.is_empty() {
        let pseudo: Vec<(Tensor, SegMask)> = unlabeled
            .iter()
            .map(|(image, pair)| {
                let label = pseudo_label(&state.teacher, &pair.weak.apply(image))?;
                Ok((pair.strong.apply(image), pair.align(&label)))
            })
            .collect::<Result<_>>()?;
        if state.lambda_u > 0.0 {
            let (lu, gu) = batch_gradient(&state.student, &pseudo, loss)?;
            l_u = lu;
            grads.axpy(state.lambda_u as f32, &gu)?;
        } else {
            for (image, mask) in &pseudo {
                let gt = state.student.loss_targets(mask)?;
                l_u += state.student.loss_and_grad(image, &gt, loss)?.loss.total / pseudo.len() as f64;
            }
        }
    }
    opt.step(&mut state.student.params, &grads, lr)?;
    if state.stage == Stage::Ema {
        state.ema_update()?;
    }
    state.iteration += 1;
    Ok(StepLoss {
        l_s,
        l_u,
        l: l_s + state.lambda_u * l_u,
    })
}

pub struct DistillOutcome {
    /// The reported model.
    pub teacher: Model,
    pub log: MetricsLog,
    pub stopped_early: bool,
    /// Best validation mIoU seen in the EMA stage.
    pub best_miou: Option<f64>,
}

/// Burn-in, handoff, EMA stage with early stopping on validation mIoU.
pub fn run(teacher: Model, labeled: &[Sample], unlabeled: &[Sample], val: &[Sample], cfg: &DistillConfig) -> Result<DistillOutcome> {
    run_with(teacher, labeled, unlabeled, val, cfg, &mut |_, _| Ok(()))
}

/// [`run`] with a hook called after every logged interval.
pub fn run_with(
    teacher: Model,
    labeled: &[Sample],
    unlabeled: &[Sample],
    val: &[Sample],
    cfg: &DistillConfig,
    on_interval: &mut dyn FnMut(&DistillState, &LogRecord) -> Result<()>,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::invalid("distillation needs unlabeled samples"));
    }
    if labeled.is_empty() {
        return Err(Error::invalid("distillation needs labeled samples"));
    }
    let mut state = DistillState::new(teacher, cfg)?;
    let mut lab = Sampler::new(labeled.len(), stream(cfg.seed, 11));
    let mut unl = Sampler::new(unlabeled.len(), stream(cfg.seed, 12));
    let mut aug = stream(cfg.seed, 13);
    let schedule = PolySchedule {
        base_lr: cfg.optim.base_lr,
        power: cfg.optim.poly_power,
        total: cfg.total,
    };
    let mut opt = Sgd::new(cfg.optim.momentum, cfg.optim.weight_decay);
    let mut log = MetricsLog::default();
    let mut acc = StepLoss::default();
    let mut acc_n = 0u32;
    let mut best: Option<f64> = None;
    let mut stale = 0u32;
    let mut stopped_early = false;
    for it in 0..cfg.total {
        if it == cfg.burn_in {
            state.handoff();
        }
        let lb: Vec<(Tensor, SegMask)> = lab
            .next_batch(cfg.labeled_batch)
            .into_iter()
            .map(|i| {
                let v = View::photometric(&mut aug);
                Ok((v.apply(&labeled[i].image), v.apply_mask(labeled_mask(&labeled[i])?)))
            })
            .collect::<Result<_>>()?;
        let ub: Vec<(Tensor, AugmentationPair)> = unl
            .next_batch(cfg.unlabeled_batch)
            .into_iter()
            .map(|i| {
                let x = &unlabeled[i].image;
                (x.clone(), AugmentationPair::sample(&mut aug, x.h(), x.w()))
            })
            .collect();
        let step = train_step(&mut state, &mut opt, schedule.lr(it), &lb, &ub, &cfg.loss)?;
        acc.l_s += step.l_s;
        acc.l_u += step.l_u;
        acc.l += step.l;
        acc_n += 1;
        let done = it + 1;
        let at_eval = (cfg.eval_interval > 0 && done % cfg.eval_interval == 0) || done == cfg.total || done == cfg.burn_in;
        if !at_eval {
            continue;
        }
        // the teacher is the reported model; during burn-in it is frozen
        let miou = if state.stage == Stage::Ema && !val.is_empty() {
            Some(validation_miou(&state.teacher, val)?)
        } else {
            None
        };
        let n = f64::from(acc_n);
        log.push(LogRecord {
            iteration: done,
            stage: state.stage,
            l_s: acc.l_s / n,
            l_u: acc.l_u / n,
            l: acc.l / n,
            val_miou: miou,
        });
        ::log::info!(
            "{} it={done} l_s={:.4} l_u={:.4} val_miou={miou:?}",
            state.stage.name(),
            acc.l_s / n,
            acc.l_u / n
        );
        on_interval(&state, log.records.last().expect("just pushed"))?;
        acc = StepLoss::default();
        acc_n = 0;
        if let Some(m) = miou {
            match best {
                Some(b) if m < b + cfg.min_delta => {
                    stale += 1;
                    if stale >= cfg.patience && cfg.patience > 0 {
                        stopped_early = true;
                    }
                }
                _ => {
                    best = Some(best.map_or(m, |b| b.max(m)));
                    stale = 0;
                }
            }
            if stopped_early {
                break;
            }
        }
    }
    Ok(DistillOutcome {
        teacher: state.teacher,
        log,
        stopped_early,
        best_miou: best,
    })
}
