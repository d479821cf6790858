//! Adapter tuning: KL alignment to text targets (or direct label heads),
//! AdamW with linear warmup and cosine decay, one patient per step, and
//! epoch checkpoints selected on validation balanced accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterState, AdapterVars, ForwardOptions, TASK_GENERAL, TASK_SUBTYPE, TASK_SURVIVAL};
use crate::data::Patient;
use crate::encoder::SlideEncoder;
use crate::error::{Error, Result};
use crate::eval::{extract_features, probe_balanced_accuracy};
use crate::io;
use crate::numerics::{rng, Dropout, Graph, Linear, ParamGrads, ParamStore, Real, StoreKind, Tensor2D, Var};
use crate::text::{Projector, ProjectorMode, SubtypeClass};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub max_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Number of task prompts `T`.
    pub n_tasks: usize,
    pub single_modal: bool,
    pub single_task_prompt: bool,
    pub no_text_embedding: bool,
    pub projector_mode: ProjectorMode,
    pub pan_cancer: bool,
    /// Divides the unit-norm vectors before the softmax.
    pub temperature: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            epochs: 30,
            max_lr: 1e-4,
            warmup_epochs: 10,
            weight_decay: 5e-4,
            batch_size: 1,
            seed: 0,
            n_tasks: 3,
            single_modal: false,
            single_task_prompt: false,
            no_text_embedding: false,
            projector_mode: ProjectorMode::FrozenTextSide,
            pan_cancer: false,
            temperature: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::arg(format!("batch size must be 1, got {}", self.batch_size)));
        }
        if self.epochs == 0 || self.warmup_epochs > self.epochs {
            return Err(Error::arg("need 1 or more epochs and warmup_epochs <= epochs"));
        }
        if !(1..=3).contains(&self.n_tasks) {
            return Err(Error::arg(format!("T = {} outside 1..=3", self.n_tasks)));
        }
        if !(self.max_lr > 0.0 && self.temperature > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::arg("learning rate and temperature must be positive, weight decay nonnegative"));
        }
        Ok(())
    }

    /// Task indices run per step.
    pub fn tasks(&self) -> Vec<usize> {
        if self.single_task_prompt {
            vec![TASK_GENERAL]
        } else {
            (1..=self.n_tasks).collect()
        }
    }
}

/// Linear warmup from 0 to `max_lr`, then cosine decay to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            max_lr: cfg.max_lr,
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.max_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return self.max_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        0.5 * self.max_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Mean over tasks of `KL(softmax(z/|z|/tau) || softmax(y/|y|/tau))`; the
/// targets enter as given and receive gradients only if they require them.
pub fn kl_alignment_loss<T: Real>(g: &mut Graph<'_, T>, z: &[Var], y: &[Var], temperature: f64) -> Result<Var> {
    if z.len() != y.len() || z.is_empty() {
        return Err(Error::dim("kl_alignment_loss", format!("{} outputs, {} targets", z.len(), y.len())));
    }
    let mut total: Option<Var> = None;
    for (&zj, &yj) in z.iter().zip(y) {
        if g.shape(zj) != g.shape(yj) {
            return Err(Error::dim(
                "kl_alignment_loss",
                format!("output {:?} vs target {:?}", g.shape(zj), g.shape(yj)),
            ));
        }
        let zn = g.l2_normalize_rows(zj)?;
        let yn = g.l2_normalize_rows(yj)?;
        let inv_t = T::lit(1.0 / temperature);
        let (zn, yn) = if temperature == 1.0 {
            (zn, yn)
        } else {
            (g.scale(zn, inv_t), g.scale(yn, inv_t))
        };
        let term = g.kl_softmax_rows(zn, yn)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let sum = total.expect("at least one task");
    Ok(g.scale(sum, T::lit(1.0 / z.len() as f64)))
}

/// Trainable state outside the adapter: direct label heads or the
/// text-side projector.
#[derive(Clone, Debug)]
pub struct AuxState<T> {
    pub store: ParamStore<T>,
    heads: BTreeMap<(String, usize, HeadKind), Linear>,
    projector: Option<crate::numerics::ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum HeadKind {
    Subtype,
    Survival,
}

impl HeadKind {
    fn name(self) -> &'static str {
        match self {
            HeadKind::Subtype => "subtype",
            HeadKind::Survival => "survival",
        }
    }
}

/// Duration bins of the discrete survival head.
pub const SURVIVAL_BINS: usize = 4;

impl<T: Real> AuxState<T> {
    fn empty() -> Self {
        Self {
            store: ParamStore::new(StoreKind::Trainable),
            heads: BTreeMap::new(),
            projector: None,
        }
    }

    fn head_kinds(task: usize) -> &'static [HeadKind] {
        match task {
            TASK_SURVIVAL => &[HeadKind::Survival],
            TASK_SUBTYPE => &[HeadKind::Subtype],
            _ => &[HeadKind::Subtype, HeadKind::Survival],
        }
    }

    /// Heads for each `(site, n_classes)`, one per task and label kind.
    pub fn direct_heads(sites: &[(String, usize)], tasks: &[usize], d_final: usize, seed: u64) -> Result<Self> {
        let mut out = Self::empty();
        let mut r = rng::seeded(seed, "direct-heads");
        for (site, k) in sites {
            if *k < 2 {
                return Err(Error::Degenerate(format!(
                    "{site}: cross-entropy head needs at least 2 classes, found {k}"
                )));
            }
            for &j in tasks {
                for &kind in Self::head_kinds(j) {
                    let width = match kind {
                        HeadKind::Subtype => *k,
                        HeadKind::Survival => SURVIVAL_BINS,
                    };
                    let name = format!("head.{site}.task{j}.{}", kind.name());
                    let lin = Linear::new(&mut out.store, &name, d_final, width, true, &mut r);
                    out.heads.insert((site.clone(), j, kind), lin);
                }
            }
        }
        Ok(out)
    }

    pub fn text_projector(p: &Projector) -> Result<Self> {
        let mut out = Self::empty();
        let (d_in, d_out) = p.dims();
        let w = Tensor2D::new(d_in, d_out, p.weights().iter().map(|&v| T::lit(f64::from(v))).collect())?;
        out.projector = Some(out.store.add("projector.text", w));
        Ok(out)
    }
}

/// Per-task text targets for one patient or, in the direct-label mode,
/// nothing beyond the record.
#[derive(Clone, Debug)]
pub struct TrainSample<'a> {
    pub patient: &'a Patient,
    /// Raw text embeddings, one per task prompt.
    pub text: Vec<Vec<f32>>,
}

/// Supervised validation split for one site.
#[derive(Clone, Debug)]
pub struct SiteEval<'a> {
    pub site: String,
    pub train: Vec<&'a Patient>,
    pub val: Vec<&'a Patient>,
}

fn class_rows<'p>(ps: &[&'p Patient]) -> (Vec<&'p Patient>, Vec<usize>) {
    ps.iter()
        .filter_map(|p| p.record.subtype_class.index().map(|k| (*p, k)))
        .unzip()
}

impl SiteEval<'_> {
    pub fn n_classes(&self) -> usize {
        let (_, y) = class_rows(&self.train);
        y.into_iter().collect::<BTreeSet<_>>().len()
    }

    /// Balanced accuracy of a probe fitted on train features, on val.
    pub fn score<T: Real>(&self, encoder: &SlideEncoder<T>, adapter: &AdapterState<T>) -> Result<f64> {
        let (tr, ytr) = class_rows(&self.train);
        let (va, yva) = class_rows(&self.val);
        let f = |ps: &[&Patient]| extract_features(encoder, adapter, ps.iter().map(|p| (&p.bag, &p.inputs)));
        probe_balanced_accuracy(&f(&tr)?.rows, &ytr, &f(&va)?.rows, &yva)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_balanced_accuracy: BTreeMap<String, f64>,
    /// Parameter names that received an update.
    pub touched: BTreeSet<String>,
    /// Number of optimizer updates so far.
    pub rng_cursor: u64,
    pub checkpoint: Option<PathBuf>,
}

impl EpochReport {
    pub fn mean_val(&self) -> f64 {
        mean_metric(&self.val_balanced_accuracy)
    }
}

fn mean_metric(m: &BTreeMap<String, f64>) -> f64 {
    if m.is_empty() {
        return f64::NAN;
    }
    m.values().sum::<f64>() / m.len() as f64
}

/// A parameter snapshot with its validation metrics.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub epoch: usize,
    pub params: Vec<(String, Tensor2D<T>)>,
    pub aux: Vec<(String, Tensor2D<T>)>,
    pub val_balanced_accuracy: BTreeMap<String, f64>,
    pub rng_cursor: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    epoch: usize,
    mean_loss: f64,
    val_balanced_accuracy: BTreeMap<String, f64>,
    mean_val_balanced_accuracy: f64,
    rng_cursor: u64,
    digest: String,
}

/// Epoch with the highest mean (over sites) validation balanced accuracy;
/// ties go to the earliest epoch.
pub fn select_checkpoint(epochs: &[(usize, BTreeMap<String, f64>)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (e, m) in epochs {
        let v = mean_metric(m);
        if v.is_nan() {
            return Err(Error::arg(format!("epoch {e} has no validation metrics")));
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((*e, v));
        }
    }
    best.map(|(e, _)| e).ok_or_else(|| Error::arg("no checkpoints to select from"))
}

/// Decoupled-weight-decay Adam over one store.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    m: Vec<Option<Tensor2D<T>>>,
    v: Vec<Option<Tensor2D<T>>>,
    t: Vec<u64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: vec![0; n_params],
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// Update every parameter that has a gradient; returns their names.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Vec<String> {
        let mut touched = Vec::new();
        let ids: Vec<_> = grads.touched().collect();
        for id in ids {
            let g = grads.get(id).expect("touched id has a gradient");
            let i = id.index();
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let m = self.m[i].get_or_insert_with(|| Tensor2D::zeros(g.rows(), g.cols()));
            let v = self.v[i].get_or_insert_with(|| Tensor2D::zeros(g.rows(), g.cols()));
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let decay = T::lit(1.0 - lr * self.weight_decay);
            let p = store.get_mut(id);
            for k in 0..g.len() {
                let gk = g.data()[k].as_f64();
                let mk = b1 * m.data()[k].as_f64() + (1.0 - b1) * gk;
                let vk = b2 * v.data()[k].as_f64() + (1.0 - b2) * gk * gk;
                m.data_mut()[k] = T::lit(mk);
                v.data_mut()[k] = T::lit(vk);
                let upd = lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                let pk = p.data()[k] * decay;
                p.data_mut()[k] = pk - T::lit(upd);
            }
            touched.push(store.name(id).to_string());
        }
        touched
    }
}

/// Everything one call to [`train`] produced.
#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub epochs: Vec<EpochReport>,
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best: Checkpoint<T>,
    pub aux: AuxState<T>,
    /// Patient ids in the order the trainer read them.
    pub access_log: Vec<String>,
    pub skipped_rare: usize,
    pub forward_task_passes: usize,
}

/// Inputs to [`train`] besides the model.
pub struct TrainInputs<'a, 'p> {
    pub samples: &'a [TrainSample<'p>],
    pub evals: &'a [SiteEval<'p>],
    pub projector: &'a Projector,
    pub checkpoint_dir: Option<&'a Path>,
}

fn loss_for<'g, T: Real>(
    g: &mut Graph<'g, T>,
    vars: &[AdapterVars],
    sample: &TrainSample<'_>,
    cfg: &TrainConfig,
    frozen_targets: &[Tensor2D<T>],
    aux: &'g AuxState<T>,
) -> Result<Var> {
    if cfg.no_text_embedding {
        let rec = &sample.patient.record;
        let mut terms = Vec::new();
        for v in vars {
            for &kind in AuxState::<T>::head_kinds(v.task) {
                let head = aux
                    .heads
                    .get(&(rec.site.clone(), v.task, kind))
                    .ok_or_else(|| Error::arg(format!("no {} head for site {}", kind.name(), rec.site)))?;
                let logits = head.forward(g, &aux.store, v.output)?;
                terms.push(match kind {
                    HeadKind::Subtype => {
                        let k = rec.subtype_class.index().expect("rare patients are filtered out");
                        g.cross_entropy(logits, k)?
                    }
                    HeadKind::Survival => g.discrete_survival_nll(logits, rec.duration_bin, rec.event)?,
                });
            }
        }
        let n = terms.len();
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = g.add(sum, t)?;
        }
        return Ok(g.scale(sum, T::lit(1.0 / n as f64)));
    }
    let z: Vec<Var> = vars.iter().map(|v| v.output).collect();
    let y: Vec<Var> = match (cfg.projector_mode, aux.projector) {
        (ProjectorMode::TrainableTextSide, Some(w)) => {
            let wv = g.param(&aux.store, w);
            vars.iter()
                .map(|v| {
                    let raw = Tensor2D::row_vector(sample.text[v.task - 1].iter().map(|&x| T::lit(f64::from(x))).collect());
                    let c = g.constant(raw);
                    g.matmul(c, wv)
                })
                .collect::<Result<_>>()?
        }
        _ => frozen_targets.iter().map(|t| g.constant(t.clone())).collect(),
    };
    kl_alignment_loss(g, &z, &y, cfg.temperature)
}

fn targets_for<T: Real>(sample: &TrainSample<'_>, tasks: &[usize], cfg: &TrainConfig, projector: &Projector) -> Result<Vec<Tensor2D<T>>> {
    tasks
        .iter()
        .map(|&j| {
            let raw = sample.text.get(j - 1).ok_or_else(|| {
                Error::arg(format!("{}: no text embedding for task {j}", sample.patient.id()))
            })?;
            let v: Vec<f32> = match cfg.projector_mode {
                ProjectorMode::FrozenTextSide => projector.project(raw)?,
                _ => raw.clone(),
            };
            Ok(Tensor2D::row_vector(v.into_iter().map(|x| T::lit(f64::from(x))).collect()))
        })
        .collect()
}

/// Tune `adapter` and leave it at the selected epoch.
pub fn train<T: Real>(
    encoder: &SlideEncoder<T>,
    adapter: &mut AdapterState<T>,
    inputs: TrainInputs<'_, '_>,
    cfg: &TrainConfig,
) -> Result<TrainRun<T>> {
    cfg.validate()?;
    if inputs.evals.is_empty() {
        return Err(Error::arg("checkpoint selection needs at least one validation site"));
    }
    let tasks = cfg.tasks();
    if tasks.iter().any(|&j| j > adapter.n_tasks()) {
        return Err(Error::arg("adapter has fewer task prompts than the config"));
    }
    let d_out = adapter.config().output_dim();
    let mut skipped_rare = 0;
    let samples: Vec<&TrainSample> = if cfg.no_text_embedding {
        inputs
            .samples
            .iter()
            .filter(|s| {
                let rare = s.patient.record.subtype_class == SubtypeClass::Rare;
                skipped_rare += usize::from(rare);
                !rare
            })
            .collect()
    } else {
        inputs.samples.iter().collect()
    };
    if samples.is_empty() {
        return Err(Error::arg("no training samples"));
    }
    let mut aux = if cfg.no_text_embedding {
        let sites: Vec<(String, usize)> = inputs.evals.iter().map(|e| (e.site.clone(), e.n_classes())).collect();
        AuxState::direct_heads(&sites, &tasks, d_out, cfg.seed)?
    } else if cfg.projector_mode == ProjectorMode::TrainableTextSide {
        AuxState::text_projector(inputs.projector)?
    } else {
        AuxState::empty()
    };
    if !cfg.no_text_embedding {
        let want = match cfg.projector_mode {
            ProjectorMode::FrozenTextSide | ProjectorMode::TrainableTextSide => inputs.projector.dims().1,
            ProjectorMode::None | ProjectorMode::ModelSide => samples[0].text.first().map_or(0, Vec::len),
        };
        if want != d_out {
            return Err(Error::dim(
                "train",
                format!("adapter output width {d_out} does not match target width {want}"),
            ));
        }
    }

    let frozen_digest = encoder.digest();
    let schedule = Schedule::new(cfg, samples.len());
    let mut opt = AdamW::new(adapter.store().len(), cfg);
    let mut aux_opt = AdamW::new(aux.store.len(), cfg);
    let adapter_names = adapter.store().name_set();
    let mut step: u64 = 0;
    let mut run_epochs = Vec::new();
    let mut step_losses = Vec::new();
    let mut access_log = Vec::new();
    let mut best: Option<Checkpoint<T>> = None;
    let mut task_passes = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::seeded(cfg.seed, &format!("epoch-order-{epoch}")));
        let mut loss_sum = 0.0;
        let mut touched = BTreeSet::new();
        for &i in &order {
            let sample = samples[i];
            let id = sample.patient.id();
            access_log.push(id.to_string());
            let targets = if cfg.no_text_embedding {
                Vec::new()
            } else {
                targets_for::<T>(sample, &tasks, cfg, inputs.projector)?
            };
            let (loss, grads, aux_grads) = {
                let mut g = Graph::new();
                let opts = ForwardOptions {
                    dropout: Dropout::train(cfg.seed, step),
                    trace: false,
                };
                let before = adapter.counts().task_passes;
                let vars = adapter.forward(&mut g, encoder, &sample.patient.bag, &sample.patient.inputs, &tasks, None, opts)?;
                task_passes += adapter.counts().task_passes - before;
                let loss = loss_for(&mut g, &vars, sample, cfg, &targets, &aux)?;
                let value = g.value(loss).get(0, 0).as_f64();
                if !value.is_finite() {
                    return Err(Error::numeric(
                        format!("training loss at epoch {epoch}, patient {id}"),
                        format!("{value}"),
                    ));
                }
                let grads = g.backward(loss)?;
                (value, grads.param_grads(&g, adapter.store()), grads.param_grads(&g, &aux.store))
            };
            if !grads.is_finite() || !aux_grads.is_finite() {
                return Err(Error::numeric(
                    format!("gradients at epoch {epoch}, patient {id}"),
                    "non-finite value",
                ));
            }
            step += 1;
            let lr = schedule.lr_at(step as usize);
            touched.extend(opt.step(adapter.store_mut(), &grads, lr));
            touched.extend(aux_opt.step(&mut aux.store, &aux_grads, lr));
            loss_sum += loss;
            step_losses.push(loss);
        }
        let stray: Vec<&String> = touched
            .iter()
            .filter(|n| !adapter_names.contains(*n) && aux.store.find(n).is_none())
            .collect();
        if !stray.is_empty() {
            return Err(Error::arg(format!("optimizer touched unknown parameters {stray:?}")));
        }
        if encoder.digest() != frozen_digest {
            return Err(Error::Digest {
                what: "frozen encoder".into(),
                expected: frozen_digest,
                found: encoder.digest(),
            });
        }

        let mut val = BTreeMap::new();
        for e in inputs.evals {
            val.insert(e.site.clone(), e.score(encoder, adapter)?);
        }
        let report_val = mean_metric(&val);
        log::info!(
            "epoch {epoch}: loss {:.6}, validation balanced accuracy {report_val:.4}",
            loss_sum / samples.len() as f64
        );
        let snapshot = Checkpoint {
            epoch,
            params: adapter.store().named_tensors(),
            aux: aux.store.named_tensors(),
            val_balanced_accuracy: val.clone(),
            rng_cursor: step,
        };
        let path = match inputs.checkpoint_dir {
            Some(dir) => Some(write_checkpoint(dir, &snapshot, loss_sum / samples.len() as f64)?),
            None => None,
        };
        if best.as_ref().is_none_or(|b| report_val > mean_metric(&b.val_balanced_accuracy)) {
            best = Some(snapshot);
        }
        run_epochs.push(EpochReport {
            epoch,
            mean_loss: loss_sum / samples.len() as f64,
            val_balanced_accuracy: val,
            touched,
            rng_cursor: step,
            checkpoint: path,
        });
    }
    let best = best.expect("at least one epoch ran");
    let selected = select_checkpoint(
        &run_epochs
            .iter()
            .map(|e| (e.epoch, e.val_balanced_accuracy.clone()))
            .collect::<Vec<_>>(),
    )?;
    debug_assert_eq!(selected, best.epoch);
    adapter.store_mut().load_from(&best.params)?;
    aux.store.load_from(&best.aux)?;
    Ok(TrainRun {
        epochs: run_epochs,
        step_losses,
        best_epoch: best.epoch,
        best,
        aux,
        access_log,
        skipped_rare,
        forward_task_passes: task_passes,
    })
}

fn write_checkpoint<T: Real>(dir: &Path, c: &Checkpoint<T>, mean_loss: f64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("epoch_{:03}.mtw", c.epoch));
    let mut blocks = c.params.clone();
    blocks.extend(c.aux.iter().cloned());
    io::write_mtw(&path, &blocks)?;
    let sidecar = Sidecar {
        epoch: c.epoch,
        mean_loss,
        mean_val_balanced_accuracy: mean_metric(&c.val_balanced_accuracy),
        val_balanced_accuracy: c.val_balanced_accuracy.clone(),
        rng_cursor: c.rng_cursor,
        digest: crate::numerics::digest_named(&blocks),
    };
    let json = dir.join(format!("epoch_{:03}.json", c.epoch));
    std::fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok(path)
}

/// Epoch metrics from the JSON sidecars in `dir`, sorted by epoch.
pub fn read_sidecars(dir: &Path) -> Result<Vec<(usize, BTreeMap<String, f64>)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let s: Sidecar = serde_json::from_str(&text)?;
            out.push((s.epoch, s.val_balanced_accuracy));
        }
    }
    out.sort_by_key(|(e, _)| *e);
    Ok(out)
}
