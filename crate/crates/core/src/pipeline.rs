//! Orchestration: synthetic scenario generation, the initial training
//! session, continual update steps, and whole-scenario execution.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clustering::{affinity_propagation, cluster_centroids, ApConfig};
use crate::embedding::{normalize, Activation, EmbeddingModel, Proxy, ProxyOrigin, ProxySet};
use crate::evt::{fit_all_proxies, split_known_unknown, EvtConfig, PsiClassifier, WeibullParams};
use crate::losses::{
    evt_loss_graph, kd_loss_graph, pa_loss_graph, replay_batch, LossConfig, ReplayConfig,
};
use crate::metrics::{
    accuracy_under_subset, discovery, forgetting, hungarian_assignment, recall_at_k,
    ScenarioMetrics, StepMetrics,
};
use crate::numerics::{adamw_step, lr_schedule, OptimizerState, ParamVector, Tape, Var};
use crate::reduction::reduce_model;
use crate::{Error, Result};

/// Recall@K values reported by scenario runs.
pub const REPORT_KS: [usize; 4] = [1, 2, 4, 8];

/// Optimization schedule for all three training phases.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_pa: usize,
    pub epochs_evt: usize,
    pub epochs_continual: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_pa: 60,
            epochs_evt: 60,
            epochs_continual: 10,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_pa == 0 || self.epochs_evt == 0 || self.epochs_continual == 0 {
            return Err(Error::InvalidConfig("epoch counts must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive, weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Feature-extractor architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64],
            embedding_dim: 16,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::InvalidConfig("embedding_dim must be >= 2".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig(
                "hidden_dims entries must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }
}

/// Full scenario description: data geometry plus every stage's knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub total_classes: usize,
    pub initial_class_fraction: f64,
    pub initial_data_fraction: f64,
    pub eval_fraction: f64,
    pub steps: usize,
    pub samples_per_class: usize,
    /// Angular spread of each synthetic class around its mean direction.
    pub cluster_spread: f64,
    /// Upper bound on |cos| between any two class mean directions; smaller
    /// values force better-separated classes.
    pub mean_separation: f64,
    pub input_dim: usize,
    /// Reserved: the boundary-tightening loss currently runs only in the
    /// initial stage.
    pub evt_loss_in_continual: bool,
    pub model: ModelConfig,
    pub evt: EvtConfig,
    pub loss: LossConfig,
    pub replay: ReplayConfig,
    pub train: TrainConfig,
    pub ap: ApConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            total_classes: 10,
            initial_class_fraction: 0.8,
            initial_data_fraction: 0.8,
            eval_fraction: 0.2,
            steps: 1,
            samples_per_class: 100,
            cluster_spread: 0.05,
            mean_separation: 0.5,
            input_dim: 32,
            evt_loss_in_continual: false,
            model: ModelConfig::default(),
            evt: EvtConfig::default(),
            loss: LossConfig::default(),
            replay: ReplayConfig::default(),
            train: TrainConfig::default(),
            ap: ApConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("initial_class_fraction", self.initial_class_fraction),
            ("initial_data_fraction", self.initial_data_fraction),
            ("eval_fraction", self.eval_fraction),
        ] {
            if !(0.0 < f && f < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must be in (0, 1)")));
            }
        }
        if self.initial_class_count() < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 initial classes (raise total_classes or initial_class_fraction)"
                    .into(),
            ));
        }
        if self.novel_class_count() > 0 && self.steps == 0 {
            return Err(Error::InvalidConfig(
                "novel classes exist but steps = 0".into(),
            ));
        }
        if self.samples_per_class < 2 {
            return Err(Error::InvalidConfig(
                "samples_per_class must be >= 2".into(),
            ));
        }
        if self.cluster_spread <= 0.0 {
            return Err(Error::InvalidConfig(
                "cluster_spread must be positive".into(),
            ));
        }
        if !(0.0 < self.mean_separation && self.mean_separation <= 1.0) {
            return Err(Error::InvalidConfig(
                "mean_separation must be in (0, 1]".into(),
            ));
        }
        if self.input_dim < 2 {
            return Err(Error::InvalidConfig("input_dim must be >= 2".into()));
        }
        if self.evt_loss_in_continual {
            return Err(Error::InvalidConfig(
                "evt_loss_in_continual is reserved and must stay false".into(),
            ));
        }
        self.model.validate()?;
        self.evt.validate()?;
        self.loss.validate()?;
        self.replay.validate()?;
        self.train.validate()?;
        self.ap.validate()
    }

    pub fn initial_class_count(&self) -> usize {
        let c = (self.total_classes as f64 * self.initial_class_fraction).round() as usize;
        c.min(self.total_classes)
    }

    pub fn novel_class_count(&self) -> usize {
        self.total_classes - self.initial_class_count()
    }
}

/// Features with per-sample class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One continual step's data: unlabeled features plus ground truth that is
/// used only for reporting, never for training.
#[derive(Debug, Clone, PartialEq)]
pub struct StepData {
    pub features: Vec<Vec<f64>>,
    pub truth: Vec<usize>,
}

/// A generated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub initial: LabeledDataset,
    pub steps: Vec<StepData>,
    pub eval: LabeledDataset,
    /// Ground-truth class ids first appearing at each continual step.
    pub novel_classes_per_step: Vec<Vec<usize>>,
    pub initial_class_count: usize,
}

fn gaussian_vec<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Synthetic scenario: every class is a tight cap on the input-space unit
/// sphere. Deterministic in the seed.
pub fn generate_synthetic_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_init = cfg.initial_class_count();
    let n_total = cfg.total_classes;

    // class mean directions, rejection-sampled for pairwise separation
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_total);
    for _ in 0..n_total {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..200 {
            let cand = normalize(&gaussian_vec(cfg.input_dim, &mut rng));
            let worst = means
                .iter()
                .map(|m| crate::embedding::cosine_sim(m, &cand).abs())
                .fold(0.0f64, f64::max);
            if worst < cfg.mean_separation {
                best = Some((worst, cand));
                break;
            }
            if best.as_ref().map(|(b, _)| worst < *b).unwrap_or(true) {
                best = Some((worst, cand));
            }
        }
        means.push(best.unwrap().1);
    }

    let spc = cfg.samples_per_class;
    let eval_n = ((cfg.eval_fraction * spc as f64).round() as usize).clamp(1, spc - 1);
    let train_n = spc - eval_n;

    let mut initial = LabeledDataset {
        features: Vec::new(),
        labels: Vec::new(),
    };
    let mut eval = LabeledDataset {
        features: Vec::new(),
        labels: Vec::new(),
    };
    let mut steps: Vec<StepData> = (0..cfg.steps)
        .map(|_| StepData {
            features: Vec::new(),
            truth: Vec::new(),
        })
        .collect();
    let mut novel_per_step: Vec<Vec<usize>> = vec![Vec::new(); cfg.steps];

    for (class, mean) in means.iter().enumerate() {
        let points: Vec<Vec<f64>> = (0..spc)
            .map(|_| {
                let noise = gaussian_vec(cfg.input_dim, &mut rng);
                let p: Vec<f64> = mean
                    .iter()
                    .zip(&noise)
                    .map(|(m, n)| m + cfg.cluster_spread * n)
                    .collect();
                normalize(&p)
            })
            .collect();
        let (eval_pts, train_pts) = points.split_at(eval_n);
        for p in eval_pts {
            eval.features.push(p.clone());
            eval.labels.push(class);
        }
        if class < n_init {
            let d0_n =
                ((cfg.initial_data_fraction * train_n as f64).round() as usize).clamp(1, train_n);
            for p in &train_pts[..d0_n] {
                initial.features.push(p.clone());
                initial.labels.push(class);
            }
            if cfg.steps > 0 {
                for (i, p) in train_pts[d0_n..].iter().enumerate() {
                    let s = i % cfg.steps;
                    steps[s].features.push(p.clone());
                    steps[s].truth.push(class);
                }
            }
        } else {
            let s = (class - n_init) % cfg.steps;
            novel_per_step[s].push(class);
            for p in train_pts {
                steps[s].features.push(p.clone());
                steps[s].truth.push(class);
            }
        }
    }

    for (t, step) in steps.iter_mut().enumerate() {
        if step.features.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "continual step {} would receive no samples",
                t + 1
            )));
        }
        // interleave classes so mini-batches are mixed even before the
        // trainer's own shuffle
        let mut order: Vec<usize> = (0..step.features.len()).collect();
        order.shuffle(&mut rng);
        step.features = order.iter().map(|&i| step.features[i].clone()).collect();
        step.truth = order.iter().map(|&i| step.truth[i]).collect();
    }
    if initial.is_empty() {
        return Err(Error::InvalidConfig(
            "initial stage would receive no samples".into(),
        ));
    }

    Ok(Scenario {
        initial,
        steps,
        eval,
        novel_classes_per_step: novel_per_step,
        initial_class_count: n_init,
    })
}

/// Initial-session outcome.
#[derive(Debug, Clone)]
pub struct InitialStageResult {
    pub model: EmbeddingModel,
    pub proxies: ProxySet,
    pub weibulls: Vec<WeibullParams>,
    pub pa_epoch_losses: Vec<f64>,
    pub evt_epoch_losses: Vec<f64>,
    /// Recall@1 of the probe set after the metric-learning phase only.
    pub recall_after_pa: Option<f64>,
    /// Recall@1 of the probe set after boundary fine-tuning.
    pub recall_after_evt: Option<f64>,
}

/// One continual step's report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub step: usize,
    /// Binary known-vs-novel decision accuracy on the step's data.
    pub novelty_detection_accuracy: f64,
    /// Clusters found among rejected samples, before redundancy removal.
    pub discovered_cluster_count: usize,
    /// New proxies surviving redundancy removal.
    pub kept_proxy_count: usize,
    pub epoch_losses: Vec<f64>,
    pub metrics: StepMetrics,
}

struct Trainer {
    model: EmbeddingModel,
    proxies: ProxySet,
    opt: OptimizerState,
    base_lr: f64,
}

impl Trainer {
    fn new(model: EmbeddingModel, proxies: ProxySet, cfg: &TrainConfig) -> Self {
        let param_len = model.flatten().len() + proxies.flatten().len();
        let opt = OptimizerState::new(param_len, cfg.learning_rate, cfg.weight_decay);
        Self {
            model,
            proxies,
            opt,
            base_lr: cfg.learning_rate,
        }
    }

    fn flat_params(&self) -> ParamVector {
        let mut flat = self.model.flatten();
        flat.extend(self.proxies.flatten());
        ParamVector::new(flat)
    }

    fn apply_flat(&mut self, flat: &[f64]) -> Result<()> {
        let used = self.model.unflatten(flat)?;
        self.proxies.unflatten(&flat[used..])?;
        Ok(())
    }

    /// One gradient step on a loss built by `build`. The closure receives
    /// the tape plus the registered model and proxy variables and returns
    /// the scalar loss node.
    fn step<F>(&mut self, build: F) -> Result<f64>
    where
        F: FnOnce(&mut Tape, &EmbeddingModel, &crate::embedding::ModelVars, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let model_vars = self.model.register_params(&mut tape)?;
        let proxy_vars = self.proxies.register_params(&mut tape)?;
        let loss = build(&mut tape, &self.model, &model_vars, &proxy_vars)?;
        let value = tape.scalar_value(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "training loss",
            });
        }
        let grads = ParamVector::new(tape.backward(loss)?);
        let mut params = self.flat_params();
        adamw_step(&mut params, &grads, &mut self.opt)?;
        self.apply_flat(&params.values)?;
        self.proxies.renormalize();
        Ok(value)
    }

    fn set_epoch_lr(&mut self, epoch: usize) {
        self.opt.learning_rate = lr_schedule(self.base_lr, epoch);
    }
}

fn batched_indices<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn class_mean_proxies(
    model: &EmbeddingModel,
    data: &LabeledDataset,
    class_count: usize,
) -> Result<ProxySet> {
    let embedded = model.embed_batch(&data.features)?;
    let dim = model.embedding_dim();
    let mut sums = vec![vec![0.0; dim]; class_count];
    let mut counts = vec![0usize; class_count];
    for (z, &l) in embedded.iter().zip(&data.labels) {
        for (d, v) in z.iter().enumerate() {
            sums[l][d] += v;
        }
        counts[l] += 1;
    }
    let proxies: Vec<Proxy> = sums
        .into_iter()
        .zip(counts)
        .enumerate()
        .map(|(class, (sum, count))| {
            if count == 0 {
                return Err(Error::EmptyInput(format!("class {class} has no samples")));
            }
            Ok(Proxy::new(normalize(&sum), class, ProxyOrigin::Initial))
        })
        .collect::<Result<_>>()?;
    ProxySet::new(proxies, class_count)
}

fn recall1(model: &EmbeddingModel, probe: &LabeledDataset) -> Result<f64> {
    let embedded = model.embed_batch(&probe.features)?;
    Ok(recall_at_k(&embedded, &probe.labels, &[1])?[&1])
}

/// Initial training session: metric pretraining, boundary fitting, then
/// boundary fine-tuning with a final refit.
///
/// `recall_probe` is an optional held-out set on which Recall@1 is tracked
/// after each phase; it never influences training.
pub fn initial_stage(
    data: &LabeledDataset,
    cfg: &ScenarioConfig,
    recall_probe: Option<&LabeledDataset>,
) -> Result<InitialStageResult> {
    if data.is_empty() {
        return Err(Error::EmptyInput("initial stage data".into()));
    }
    let class_count = data.labels.iter().max().map(|&m| m + 1).unwrap_or(0);
    {
        let mut seen = vec![false; class_count];
        for &l in &data.labels {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::InvalidConfig(format!(
                "initial labels must be contiguous from 0; class {missing} absent"
            )));
        }
    }
    if class_count < 2 {
        return Err(Error::InvalidConfig(
            "initial stage needs at least 2 classes".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    let model = EmbeddingModel::new_random(
        cfg.model.layer_dims(data.features[0].len()),
        cfg.model.activation,
        &mut rng,
    )?;
    let proxies = class_mean_proxies(&model, data, class_count)?;
    let mut trainer = Trainer::new(model, proxies, &cfg.train);

    // phase 1: metric pretraining
    let mut pa_epoch_losses = Vec::with_capacity(cfg.train.epochs_pa);
    for epoch in 0..cfg.train.epochs_pa {
        trainer.set_epoch_lr(epoch);
        let mut total = 0.0;
        let batches = batched_indices(data.len(), cfg.train.batch_size, &mut rng);
        let n_batches = batches.len();
        for batch in batches {
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            total += trainer.step(|tape, model, mv, pv| {
                let z: Vec<Var> = batch
                    .iter()
                    .map(|&i| model.forward_on_tape(tape, mv, &data.features[i]))
                    .collect::<Result<_>>()?;
                pa_loss_graph(
                    tape,
                    &z,
                    &labels,
                    pv,
                    &trainer_classes(pv.len(), class_count),
                    &cfg.loss,
                )
            })?;
        }
        pa_epoch_losses.push(total / n_batches as f64);
    }
    let recall_after_pa = recall_probe
        .map(|p| recall1(&trainer.model, p))
        .transpose()?;

    // phase 2: boundary fit
    let embedded = trainer.model.embed_batch(&data.features)?;
    let weibulls = fit_all_proxies(&trainer.proxies, &embedded, &data.labels, cfg.evt.tail_size)?;

    // phase 3: boundary fine-tuning with frozen Weibulls, fresh optimizer
    trainer.opt = OptimizerState::new(
        trainer.flat_params().len(),
        cfg.train.learning_rate,
        cfg.train.weight_decay,
    );
    let mut evt_epoch_losses = Vec::with_capacity(cfg.train.epochs_evt);
    for epoch in 0..cfg.train.epochs_evt {
        trainer.set_epoch_lr(epoch);
        let mut total = 0.0;
        let batches = batched_indices(data.len(), cfg.train.batch_size, &mut rng);
        let n_batches = batches.len();
        for batch in batches {
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let w = weibulls.clone();
            total += trainer.step(|tape, model, mv, pv| {
                let z: Vec<Var> = batch
                    .iter()
                    .map(|&i| model.forward_on_tape(tape, mv, &data.features[i]))
                    .collect::<Result<_>>()?;
                evt_loss_graph(
                    tape,
                    &z,
                    &labels,
                    pv,
                    &trainer_classes(pv.len(), class_count),
                    &w,
                )
            })?;
        }
        evt_epoch_losses.push(total / n_batches as f64);
    }
    let recall_after_evt = recall_probe
        .map(|p| recall1(&trainer.model, p))
        .transpose()?;

    // final refit on the fine-tuned representation
    let embedded = trainer.model.embed_batch(&data.features)?;
    let weibulls = fit_all_proxies(&trainer.proxies, &embedded, &data.labels, cfg.evt.tail_size)?;

    Ok(InitialStageResult {
        model: trainer.model,
        proxies: trainer.proxies,
        weibulls,
        pa_epoch_losses,
        evt_epoch_losses,
        recall_after_pa,
        recall_after_evt,
    })
}

/// One proxy per class in the initial stage, so class ids and proxy
/// indices coincide there. The general case reads the proxy set.
fn trainer_classes(proxy_count: usize, class_count: usize) -> Vec<usize> {
    debug_assert_eq!(proxy_count, class_count);
    (0..proxy_count).collect()
}

/// Continual-step outcome (metrics are filled in by the caller, which owns
/// the evaluation split).
#[derive(Debug, Clone)]
pub struct ContinualStageResult {
    pub model: EmbeddingModel,
    pub proxies: ProxySet,
    pub weibulls: Vec<WeibullParams>,
    pub novelty_detection_accuracy: f64,
    pub discovered_cluster_count: usize,
    pub kept_proxy_count: usize,
    pub epoch_losses: Vec<f64>,
}

/// One continual update on an unlabeled batch of data.
///
/// `novel_truth_classes` lists the ground-truth classes first appearing at
/// this step; it is consulted only for the novelty-detection report.
pub fn continual_stage(
    step_data: &StepData,
    model: &EmbeddingModel,
    proxies: &ProxySet,
    weibulls: &[WeibullParams],
    cfg: &ScenarioConfig,
    step: usize,
    novel_truth_classes: &[usize],
) -> Result<ContinualStageResult> {
    if step_data.features.is_empty() {
        return Err(Error::EmptyInput(format!("continual step {step} data")));
    }
    let teacher = model.clone();
    let old_proxies = proxies.clone();
    let old_class_count = proxies.class_count;

    // step 1: open-set split under the incoming classifier
    let embedded = model.embed_batch(&step_data.features)?;
    let classifier =
        PsiClassifier::new(proxies.clone(), weibulls.to_vec(), cfg.evt.reject_threshold)?;
    let (known, unknown) = split_known_unknown(&embedded, &classifier);

    let novelty_detection_accuracy = {
        let correct = step_data
            .truth
            .iter()
            .enumerate()
            .filter(|&(i, t)| {
                let is_novel = novel_truth_classes.contains(t);
                let rejected = unknown.contains(&i);
                is_novel == rejected
            })
            .count();
        correct as f64 / step_data.truth.len() as f64
    };

    // step 2: cluster the rejected samples, one new proxy per cluster
    let mut proxies = proxies.clone();
    let mut pseudo = vec![usize::MAX; step_data.features.len()];
    for &(i, label) in &known {
        pseudo[i] = label;
    }
    let discovered_cluster_count = if unknown.is_empty() {
        0
    } else {
        let unk_embeddings: Vec<Vec<f64>> = unknown.iter().map(|&i| embedded[i].clone()).collect();
        let clusters = affinity_propagation(&unk_embeddings, &cfg.ap)?;
        let centroids = cluster_centroids(&clusters, &unk_embeddings);
        let base_class = proxies.class_count;
        for (c, centroid) in centroids.iter().enumerate() {
            proxies.proxies.push(Proxy::new(
                centroid.clone(),
                base_class + c,
                ProxyOrigin::Discovered { step },
            ));
        }
        proxies.class_count = base_class + centroids.len();
        for (u, &i) in unknown.iter().enumerate() {
            pseudo[i] = base_class + clusters.assignments[u];
        }
        centroids.len()
    };

    // step 3: joint update; teacher embeddings of pseudo-known samples are
    // fixed, so compute them once
    let known_idx: Vec<usize> = known.iter().map(|&(i, _)| i).collect();
    let teacher_known: Vec<Vec<f64>> = {
        let feats: Vec<Vec<f64>> = known_idx
            .iter()
            .map(|&i| step_data.features[i].clone())
            .collect();
        teacher.embed_batch(&feats)?
    };

    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1).wrapping_add(step as u64));
    let mut trainer = Trainer::new(model.clone(), proxies, &cfg.train);
    let class_ids = trainer.proxies.class_ids();
    let n = step_data.features.len();
    let n_batches_hint = n.div_ceil(cfg.train.batch_size);
    let replay_spc = cfg.replay.samples_per_class.unwrap_or_else(|| {
        // balance synthetic old-class volume against this step's per-class
        // share of one mini-batch
        let per_class = n as f64 / trainer.proxies.class_count.max(1) as f64;
        ((per_class / n_batches_hint as f64).round() as usize).max(1)
    });

    let mut epoch_losses = Vec::with_capacity(cfg.train.epochs_continual);
    for epoch in 0..cfg.train.epochs_continual {
        trainer.set_epoch_lr(epoch);
        let replay_seed = cfg
            .train
            .seed
            .wrapping_add(1000)
            .wrapping_add(step as u64 * 100)
            .wrapping_add(epoch as u64);
        let replay = replay_batch(&old_proxies, cfg.replay.sigma, replay_spc, replay_seed);

        let mut total = 0.0;
        let batches = batched_indices(n, cfg.train.batch_size, &mut rng);
        let n_batches = batches.len();
        for batch in batches {
            let labels: Vec<usize> = batch.iter().map(|&i| pseudo[i]).collect();
            let kd_pairs: Vec<(usize, usize)> = batch
                .iter()
                .enumerate()
                .filter_map(|(bi, &i)| known_idx.iter().position(|&k| k == i).map(|ki| (bi, ki)))
                .collect();
            let replay_ref = &replay;
            let class_ids = &class_ids;
            let loss_cfg = &cfg.loss;
            let teacher_known = &teacher_known;
            total += trainer.step(|tape, model, mv, pv| {
                let z: Vec<Var> = batch
                    .iter()
                    .map(|&i| model.forward_on_tape(tape, mv, &step_data.features[i]))
                    .collect::<Result<_>>()?;
                let pa = pa_loss_graph(tape, &z, &labels, pv, class_ids, loss_cfg)?;
                let mut loss = tape.mul_const(pa, loss_cfg.pa_weight)?;

                if loss_cfg.fr_weight != 0.0 && !replay_ref.is_empty() {
                    let zr: Vec<Var> = replay_ref
                        .embeddings
                        .iter()
                        .map(|e| tape.constant(e))
                        .collect::<Result<_>>()?;
                    let fr = pa_loss_graph(tape, &zr, &replay_ref.labels, pv, class_ids, loss_cfg)?;
                    let w = tape.mul_const(fr, loss_cfg.fr_weight)?;
                    loss = tape.add(loss, w)?;
                }

                if loss_cfg.kd_weight != 0.0 && !kd_pairs.is_empty() {
                    let old: Vec<Vec<f64>> = kd_pairs
                        .iter()
                        .map(|&(_, ki)| teacher_known[ki].clone())
                        .collect();
                    let new: Vec<Var> = kd_pairs.iter().map(|&(bi, _)| z[bi]).collect();
                    let kd = kd_loss_graph(tape, &old, &new, loss_cfg.kd_literal_sign)?;
                    let w = tape.mul_const(kd, loss_cfg.kd_weight)?;
                    loss = tape.add(loss, w)?;
                }
                Ok(loss)
            })?;
        }
        epoch_losses.push(total / n_batches as f64);
    }

    // step 4: drop redundant new proxies. Redundancy boundaries are
    // calibrated against pseudo-known samples only: a proxy is absorbed
    // when it sits far inside another proxy's distance-to-the-known-world,
    // which is exactly the case when clustering split one category. Fitting
    // against sibling clusters instead would shrink every boundary to the
    // sibling gap and block all merges.
    let embedded = trainer.model.embed_batch(&step_data.features)?;
    let new_ids: Vec<usize> = (old_proxies.len()..trainer.proxies.len()).collect();
    let (proxies, pseudo, kept) = if new_ids.is_empty() {
        (trainer.proxies, pseudo, 0)
    } else {
        let known_only: (Vec<Vec<f64>>, Vec<usize>) = embedded
            .iter()
            .zip(&pseudo)
            .filter(|&(_, &l)| l < old_class_count)
            .map(|(z, &l)| (z.clone(), l))
            .unzip();
        let calibration = fit_all_proxies(
            &trainer.proxies,
            &known_only.0,
            &known_only.1,
            cfg.evt.tail_size,
        )
        // no usable known samples: fall back to the full pseudo-labeling
        .or_else(|_| fit_all_proxies(&trainer.proxies, &embedded, &pseudo, cfg.evt.tail_size))?;
        let out = reduce_model(
            &trainer.proxies,
            &calibration,
            &new_ids,
            cfg.evt.cover_threshold,
            &pseudo,
        )?;
        let kept = out.kept_new_proxy_ids.len();
        (out.proxies, out.pseudo_labels, kept)
    };

    // step 5: refit every surviving boundary on the merged pseudo-labels
    let weibulls = fit_all_proxies(&proxies, &embedded, &pseudo, cfg.evt.tail_size)?;
    debug_assert!(proxies.class_count >= old_class_count);

    Ok(ContinualStageResult {
        model: trainer.model,
        proxies,
        weibulls,
        novelty_detection_accuracy,
        discovered_cluster_count,
        kept_proxy_count: kept,
        epoch_losses,
    })
}

/// Predictions on an evaluation split: classifier outputs with rejections
/// routed to a dedicated bucket id.
fn eval_predictions(
    model: &EmbeddingModel,
    classifier: &PsiClassifier,
    features: &[Vec<f64>],
) -> Result<Vec<usize>> {
    let embedded = model.embed_batch(features)?;
    let reject_bucket = classifier.class_count();
    Ok(classifier
        .classify_batch(&embedded)
        .into_iter()
        .map(|c| match c {
            crate::evt::Classification::Known(id) => id,
            crate::evt::Classification::Unknown => reject_bucket,
        })
        .collect())
}

/// Accuracy triple on the evaluation split restricted to the classes seen
/// so far. The assignment is computed once on the full restriction and
/// reused for the old/new subsets.
pub fn evaluate_step(
    model: &EmbeddingModel,
    classifier: &PsiClassifier,
    eval: &LabeledDataset,
    seen_truth_classes: &[usize],
    old_truth_classes: &[usize],
    step: usize,
    estimated_category_count: usize,
) -> Result<StepMetrics> {
    let restricted: Vec<usize> = (0..eval.len())
        .filter(|&i| seen_truth_classes.contains(&eval.labels[i]))
        .collect();
    if restricted.is_empty() {
        return Err(Error::EmptyInput("evaluation restriction".into()));
    }
    let feats: Vec<Vec<f64>> = restricted
        .iter()
        .map(|&i| eval.features[i].clone())
        .collect();
    let truth: Vec<usize> = restricted.iter().map(|&i| eval.labels[i]).collect();
    let predicted = eval_predictions(model, classifier, &feats)?;

    let assignment = hungarian_assignment(&predicted, &truth)?;
    let m_all = accuracy_under_subset(&assignment, &predicted, &truth, None)?;
    let old_subset: Vec<usize> = (0..truth.len())
        .filter(|&i| old_truth_classes.contains(&truth[i]))
        .collect();
    let m_old = accuracy_under_subset(&assignment, &predicted, &truth, Some(&old_subset))?;
    let new_subset: Vec<usize> = (0..truth.len())
        .filter(|&i| !old_truth_classes.contains(&truth[i]))
        .collect();
    let m_new = if new_subset.is_empty() {
        1.0
    } else {
        accuracy_under_subset(&assignment, &predicted, &truth, Some(&new_subset))?
    };

    Ok(StepMetrics {
        step,
        m_all,
        m_old,
        m_new,
        estimated_category_count,
    })
}

/// Whole-run artifacts.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub model: EmbeddingModel,
    pub proxies: ProxySet,
    pub weibulls: Vec<WeibullParams>,
    pub initial: InitialStageResult,
    pub initial_metrics: StepMetrics,
    pub stage_reports: Vec<StageReport>,
    pub metrics: ScenarioMetrics,
}

/// Runs the initial session plus every continual step of a generated
/// scenario and evaluates after each stage.
pub fn run_scenario(cfg: &ScenarioConfig, scenario: &Scenario) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    let old_truth: Vec<usize> = (0..scenario.initial_class_count).collect();

    let initial = initial_stage(
        &scenario.initial,
        cfg,
        Some(&restrict_eval(&scenario.eval, &old_truth)),
    )?;
    let mut model = initial.model.clone();
    let mut proxies = initial.proxies.clone();
    let mut weibulls = initial.weibulls.clone();

    let classifier =
        PsiClassifier::new(proxies.clone(), weibulls.clone(), cfg.evt.reject_threshold)?;
    let initial_metrics = evaluate_step(
        &model,
        &classifier,
        &scenario.eval,
        &old_truth,
        &old_truth,
        0,
        proxies.class_count,
    )?;

    let mut m_old_history = vec![initial_metrics.m_old];
    let mut m_new_history = Vec::new();
    let mut stage_reports = Vec::new();
    let mut seen_truth = old_truth.clone();

    for (t, step_data) in scenario.steps.iter().enumerate() {
        let step = t + 1;
        let novel = &scenario.novel_classes_per_step[t];
        let result = continual_stage(step_data, &model, &proxies, &weibulls, cfg, step, novel)?;
        model = result.model;
        proxies = result.proxies;
        weibulls = result.weibulls;
        seen_truth.extend_from_slice(novel);

        let classifier =
            PsiClassifier::new(proxies.clone(), weibulls.clone(), cfg.evt.reject_threshold)?;
        let metrics = evaluate_step(
            &model,
            &classifier,
            &scenario.eval,
            &seen_truth,
            &old_truth,
            step,
            proxies.class_count,
        )?;
        m_old_history.push(metrics.m_old);
        m_new_history.push(metrics.m_new);
        stage_reports.push(StageReport {
            step,
            novelty_detection_accuracy: result.novelty_detection_accuracy,
            discovered_cluster_count: result.discovered_cluster_count,
            kept_proxy_count: result.kept_proxy_count,
            epoch_losses: result.epoch_losses,
            metrics,
        });
    }

    let m_f = forgetting(&m_old_history)?;
    let m_d = if m_new_history.is_empty() {
        0.0
    } else {
        discovery(&m_new_history)?
    };

    let eval_restricted = restrict_eval(&scenario.eval, &seen_truth);
    let final_embedded = model.embed_batch(&eval_restricted.features)?;
    let ks: Vec<usize> = REPORT_KS
        .iter()
        .copied()
        .filter(|&k| k < eval_restricted.len())
        .collect();
    let recall = recall_at_k(&final_embedded, &eval_restricted.labels, &ks)?;

    let metrics = ScenarioMetrics {
        initial_accuracy: initial_metrics.m_old,
        steps: stage_reports.iter().map(|r| r.metrics.clone()).collect(),
        m_f,
        m_d,
        recall_at_k: recall,
    };

    Ok(ScenarioOutcome {
        model,
        proxies,
        weibulls,
        initial,
        initial_metrics,
        stage_reports,
        metrics,
    })
}

fn restrict_eval(eval: &LabeledDataset, classes: &[usize]) -> LabeledDataset {
    let idx: Vec<usize> = (0..eval.len())
        .filter(|&i| classes.contains(&eval.labels[i]))
        .collect();
    LabeledDataset {
        features: idx.iter().map(|&i| eval.features[i].clone()).collect(),
        labels: idx.iter().map(|&i| eval.labels[i]).collect(),
    }
}
