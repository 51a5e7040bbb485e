//! Training runs: configuration, the step loop, held-out evaluation,
//! parent pretraining and the four-arm comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arch::{build_model, probe_shared_only, ArchitectureMode, ForwardOptions, Model, ModelConfig, ModelOutput, ShieldState};
use crate::data::{Batch, EvalSet, MixtureConfig, Schedule, Task, World};
use crate::disentangle::{
    partition_experts, profile_activations, read_partitions, write_partitions, ActivationProfile, ModalityTag,
    PartitionOptions, PartitionSpec, PartitionStrategy,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{accumulate_grads, batch_loss, discrete_loss, LossWeights};
use crate::metrics::{
    write_csv, EvalMetrics, MetricsHeader, MetricsRecord, MetricsSink, PerModality, RunManifest, TaskLosses,
    TokenCounts, METRICS_SCHEMA,
};
use crate::optim::{GroupLrs, Optimizer, OptimizerConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;

const PROFILE_TAG: u64 = 0x5052_4f46;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrPolicy {
    /// `lr_gen` for the generation group, `lr_und` for the rest.
    Differential,
    /// `lr_gen` for every parameter.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub lr: f64,
    /// LM : MMU.
    pub ratios: [u32; 2],
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    /// Balance-loss weight while pretraining; defaults to `loss.lambda_aux`.
    pub lambda_aux: Option<f64>,
    /// Apply expert capacity limits while pretraining.
    pub capacity: bool,
    /// Extra steps at `anneal_lr` after the main phase.
    pub anneal_steps: u64,
    pub anneal_lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 3e-3,
            ratios: [1, 1],
            seed: None,
            lambda_aux: None,
            capacity: true,
            anneal_steps: 0,
            anneal_lr: 1e-4,
        }
    }
}

/// How the parent is profiled and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub n_und: usize,
    pub strategy: PartitionStrategy,
    pub normalize: bool,
    pub global: bool,
    pub n_text: Option<usize>,
    /// Held-out LM and MMU batches per task used for profiling.
    pub profile_batches: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            n_und: 12,
            strategy: PartitionStrategy::Bimodal,
            normalize: false,
            global: false,
            n_text: None,
            profile_batches: 4,
        }
    }
}

impl PlanConfig {
    pub fn options(&self) -> PartitionOptions {
        PartitionOptions {
            n_und: self.n_und,
            strategy: self.strategy,
            normalize: self.normalize,
            global: self.global,
            n_text: self.n_text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub standard_lr_policy: LrPolicy,
    pub mot_lr_policy: LrPolicy,
    /// Adds a Symbiotic arm without the gradient shield.
    pub no_shield_arm: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            standard_lr_policy: LrPolicy::Uniform,
            mot_lr_policy: LrPolicy::Differential,
            no_shield_arm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub run_name: String,
    pub mode: ArchitectureMode,
    pub seed: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub shield_scale: f64,
    pub lr_gen: f64,
    pub lr_und: f64,
    pub lr_policy: LrPolicy,
    /// Apply per-expert capacity limits while training and evaluating.
    pub capacity: bool,
    /// Held-out evaluation cadence (the final step is always evaluated).
    pub eval_every: u64,
    /// Held-out batches per task.
    pub eval_batches: usize,
    pub imbalance_every: u64,
    /// Intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Record wall-clock step durations (breaks byte-identical metrics).
    pub timing: bool,
    pub parent: Option<PathBuf>,
    pub partition: Option<PathBuf>,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub data: MixtureConfig,
    pub pretrain: PretrainConfig,
    pub plan: PlanConfig,
    pub compare: CompareConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            mode: ArchitectureMode::Symbiotic,
            seed: 42,
            total_steps: 2000,
            warmup_steps: 50,
            shield_scale: 0.1,
            lr_gen: 1e-4,
            lr_und: 1e-6,
            lr_policy: LrPolicy::Differential,
            capacity: true,
            eval_every: 25,
            eval_batches: 2,
            imbalance_every: 50,
            checkpoint_every: 0,
            timing: false,
            parent: None,
            partition: None,
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            data: MixtureConfig::default(),
            pretrain: PretrainConfig::default(),
            plan: PlanConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets a dotted key (e.g. `model.n_experts`) from a TOML literal;
    /// bare words are taken as strings.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(t) => t["v"].clone(),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut root;
        for (i, p) in parts.iter().enumerate() {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::Usage(format!("{key}: {p} is not a table")))?;
            if i + 1 == parts.len() {
                table.insert(p.to_string(), value.clone());
                break;
            }
            cur = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let next: Self = root.try_into().map_err(|e: toml::de::Error| Error::Usage(format!("{key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config("warmup_steps exceeds total_steps".into()));
        }
        if !(self.lr_gen > 0.0 && self.lr_und > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.shield_scale >= 0.0) {
            return Err(Error::Config("shield_scale must be nonnegative".into()));
        }
        if self.eval_every == 0 || self.imbalance_every == 0 || self.eval_batches == 0 {
            return Err(Error::Config("eval_every, imbalance_every and eval_batches must be positive".into()));
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.data.validate()?;
        let (m, d) = (&self.model, &self.data);
        if m.vocab != d.vocab || m.d_vit != d.d_vit || m.d_latent != d.d_latent {
            return Err(Error::Config("model and data disagree on vocab, d_vit or d_latent".into()));
        }
        if m.max_len < d.max_seq_len() {
            return Err(Error::Config(format!(
                "model max_len {} is shorter than the longest sequence {}",
                m.max_len,
                d.max_seq_len()
            )));
        }
        if self.plan.n_und >= self.model.n_experts {
            return Err(Error::Config("plan.n_und must be below model.n_experts".into()));
        }
        Ok(())
    }

    pub fn lrs(&self) -> GroupLrs {
        match self.lr_policy {
            LrPolicy::Differential => GroupLrs {
                generation: self.lr_gen,
                understanding: self.lr_und,
            },
            LrPolicy::Uniform => GroupLrs::uniform(self.lr_gen),
        }
    }

    pub fn shield(&self, step: u64) -> Option<ShieldState> {
        (self.mode == ArchitectureMode::Symbiotic).then(|| ShieldState::new(step, self.warmup_steps, self.shield_scale))
    }
}

/// Served and total assignments per modality, over every router of every
/// layer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoutingTally {
    pub served: [u64; 3],
    pub total: [u64; 3],
}

impl RoutingTally {
    pub fn add<T: Scalar>(&mut self, out: &ModelOutput<T>, tags: &[ModalityTag]) {
        for layer in &out.layers {
            for r in &layer.routes {
                for (local, dropped) in r.routed.decision.dropped.iter().enumerate() {
                    let m = tags[r.rows[local]].index();
                    self.total[m] += dropped.len() as u64;
                    self.served[m] += dropped.iter().filter(|&&d| !d).count() as u64;
                }
            }
        }
    }

    pub fn rate(&self) -> f64 {
        let t: u64 = self.total.iter().sum();
        if t == 0 {
            return 1.0;
        }
        self.served.iter().sum::<u64>() as f64 / t as f64
    }

    pub fn by_modality(&self) -> PerModality {
        let mut v = [None; 3];
        for m in 0..3 {
            if self.total[m] > 0 {
                v[m] = Some(self.served[m] as f64 / self.total[m] as f64);
            }
        }
        PerModality::from_array(v)
    }
}

/// Mean held-out losses, capacity and (optionally) selection imbalance.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    eval: &EvalSet,
    capacity: bool,
    with_imbalance: bool,
) -> Result<EvalMetrics> {
    let opts = ForwardOptions {
        capacity,
        ..ForwardOptions::default()
    };
    let weights = LossWeights::default();
    let mut tally = RoutingTally::default();
    let mut profile = ActivationProfile::new(model.config.n_layers, model.config.n_experts, model.config.top_k);
    let mut run = |batches: &[Batch], take: &dyn Fn(&Graph<T>, &crate::loss::BatchLoss<T>) -> Option<f64>| -> Result<f64> {
        let mut sum = 0.0;
        for b in batches {
            let mut g = Graph::new();
            let bl = batch_loss(model, &mut g, b, &opts, &weights)?;
            sum += take(&g, &bl).ok_or_else(|| Error::Contract("evaluation batch lacks its loss term".into()))?;
            tally.add(&bl.output, &b.tags);
            if with_imbalance {
                for (l, lo) in bl.output.layers.iter().enumerate() {
                    for r in &lo.routes {
                        for (local, ids) in r.routed.decision.expert_ids.iter().enumerate() {
                            for &e in ids {
                                profile.record(l, b.tags[r.rows[local]], r.index_map[e]);
                            }
                        }
                    }
                }
            }
        }
        Ok(sum / batches.len() as f64)
    };
    let und = run(&eval.understanding, &|g, bl| bl.parts.disc.map(|v| g.item(v).as_f64()))?;
    let t2i = run(&eval.generation, &|g, bl| bl.parts.img.map(|v| g.item(v).as_f64()))?;
    let imbalance_ratio = with_imbalance.then(|| {
        (0..model.config.n_layers)
            .map(|l| {
                PerModality::from_array(ModalityTag::ALL.map(|m| profile.imbalance_ratio(l, m).ok()))
            })
            .collect()
    });
    Ok(EvalMetrics {
        und,
        t2i,
        capacity_rate: tally.rate(),
        capacity_by_modality: tally.by_modality(),
        imbalance_ratio,
    })
}

/// Mean discrete loss on held-out understanding batches with every routed
/// expert masked.
pub fn probe_eval<T: Scalar>(model: &Model<T>, eval: &EvalSet) -> Result<f64> {
    let mut sum = 0.0;
    for b in &eval.understanding {
        let mut g = Graph::new();
        let out = probe_shared_only(model, &mut g, b)?;
        let (rows, targets) = b.discrete_targets();
        let logits = model.logits(&mut g, &out, &rows)?;
        let l = discrete_loss(&mut g, logits, &targets)?;
        sum += g.item(l).as_f64();
    }
    Ok(sum / eval.understanding.len() as f64)
}

pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: Optimizer<T>,
    pub world: World,
    pub eval: EvalSet,
    schedule: Schedule,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, model: Model<T>) -> Result<Self> {
        config.validate()?;
        if model.mode != config.mode {
            return Err(Error::Config(format!(
                "model is {:?} but the run is configured for {:?}",
                model.mode, config.mode
            )));
        }
        let world = World::new(&config.data)?;
        let eval = EvalSet::new(&world, config.eval_batches);
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer, &model.store),
            schedule: Schedule::new(config.data.ratios),
            world,
            eval,
            model,
            config,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// The batch the next step will consume.
    pub fn peek_batch(&self) -> Batch {
        let task = self.schedule.clone().next_task();
        self.world.generate(task, self.config.seed, self.step)
    }

    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let started = Instant::now();
        let step = self.step;
        let task = self.schedule.next_task();
        let batch = self.world.generate(task, self.config.seed, step);
        let shield = self.config.shield(step);
        let opts = ForwardOptions {
            capacity: self.config.capacity,
            ..ForwardOptions::default()
        };
        let mut g = Graph::new();
        let bl = batch_loss(&self.model, &mut g, &batch, &opts, &self.config.loss)?;
        let total = g.item(bl.total).as_f64();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("step {step} ({}): total loss is {total}", task.name())));
        }
        accumulate_grads(&mut self.model, &mut g, &bl, &self.config.loss, shield)?;
        let stats = self.optimizer.step(&mut self.model.store, &self.config.lrs())?;

        let value = |v: Option<crate::graph::Var>| v.map(|v| g.item(v).as_f64());
        let disc = value(bl.parts.disc);
        let img = value(bl.parts.img);
        let task_loss = if task.is_generation() { img } else { disc };
        let mut tally = RoutingTally::default();
        tally.add(&bl.output, &batch.tags);
        let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (name, v) in &bl.aux_terms {
            let e = groups.entry(name.clone()).or_default();
            e.0 += g.item(*v).as_f64();
            e.1 += 1;
        }
        self.step += 1;
        let last = self.step == self.config.total_steps;
        let eval = if step % self.config.eval_every == 0 || step % self.config.imbalance_every == 0 || last {
            Some(evaluate(
                &self.model,
                &self.eval,
                self.config.capacity,
                step % self.config.imbalance_every == 0 || last,
            )?)
        } else {
            None
        };
        Ok(MetricsRecord {
            step,
            task,
            losses: task_loss.map_or_else(TaskLosses::default, |v| TaskLosses::single(task, v)),
            disc_loss: disc,
            img_loss: img,
            aux_loss: value(bl.parts.aux),
            total_loss: total,
            aux_by_group: groups.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            capacity_rate: tally.rate(),
            capacity_by_modality: tally.by_modality(),
            shield_active: shield.is_some_and(|s| s.active()),
            tokens: TokenCounts::from_array(batch.modality_counts()),
            grad_norm: stats.grad_norm,
            eval,
            batch_digest: format!("{:016x}", batch.digest()),
            wall_ms: self.config.timing.then(|| started.elapsed().as_secs_f64() * 1e3),
        })
    }

    /// Runs the remaining steps, streaming records to `sink` and writing
    /// intermediate checkpoints into `ckpt_dir`.
    pub fn run(&mut self, mut sink: Option<&mut MetricsSink>, ckpt_dir: Option<&Path>) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::with_capacity(self.config.total_steps as usize);
        while self.step < self.config.total_steps {
            let rec = self.train_step()?;
            if let Some(s) = sink.as_deref_mut() {
                s.emit(&rec)?;
            }
            records.push(rec);
            let every = self.config.checkpoint_every;
            if let Some(dir) = ckpt_dir {
                if every > 0 && self.step % every == 0 && self.step < self.config.total_steps {
                    self.model.save(&dir.join(format!("step_{}.ckpt", self.step)))?;
                }
            }
        }
        Ok(records)
    }
}

/// Model for a run: the parent checkpoint (if any) seeds every weight and
/// grouped modes read their partition file.
pub fn prepare_model<T: Scalar>(config: &TrainConfig) -> Result<Model<T>> {
    let parent = match &config.parent {
        Some(p) => Some(Model::<T>::load(p)?),
        None => None,
    };
    let partition = match (&config.partition, config.mode.is_grouped()) {
        (Some(p), true) => {
            let f = std::fs::File::open(p).map_err(|e| Error::Usage(format!("cannot open partition {}: {e}", p.display())))?;
            Some(read_partitions(std::io::BufReader::new(f))?)
        }
        (None, true) => return Err(Error::Config(format!("{:?} mode requires a partition file", config.mode))),
        _ => None,
    };
    build_model(&config.model, config.mode, partition.as_deref(), parent.as_ref(), config.seed)
}

/// Everything a finished run produced.
pub struct RunOutcome<T: Scalar> {
    pub records: Vec<MetricsRecord>,
    pub model: Model<T>,
    pub manifest: RunManifest,
}

fn mode_name(mode: ArchitectureMode) -> String {
    serde_json::to_value(mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Trains `model` under `config`, writing metrics (JSONL and CSV), the
/// final checkpoint and a manifest into `dir`.
pub fn run_training<T: Scalar>(config: &TrainConfig, model: Model<T>, dir: &Path) -> Result<RunOutcome<T>> {
    std::fs::create_dir_all(dir)?;
    let start_time = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let header = MetricsHeader {
        schema: METRICS_SCHEMA.into(),
        run: config.run_name.clone(),
        mode: mode_name(config.mode),
        seed: config.seed,
    };
    let metrics_path = dir.join("metrics.jsonl");
    let mut sink = MetricsSink::create(&metrics_path, &header)?;
    let mut trainer = Trainer::new(config.clone(), model)?;
    let records = trainer.run(Some(&mut sink), Some(dir))?;
    let csv_path = dir.join("metrics.csv");
    write_csv(std::fs::File::create(&csv_path)?, &records)?;
    let ckpt = dir.join("model.ckpt");
    trainer.model.save(&ckpt)?;
    let mut artifacts = vec![metrics_path, csv_path, ckpt];
    if config.checkpoint_every > 0 {
        let mut s = config.checkpoint_every;
        while s < config.total_steps {
            artifacts.push(dir.join(format!("step_{s}.ckpt")));
            s += config.checkpoint_every;
        }
    }
    let manifest_path = dir.join("manifest.json");
    artifacts.push(manifest_path.clone());
    let manifest = RunManifest {
        schema: "symoe.run/1".into(),
        run: config.run_name.clone(),
        mode: mode_name(config.mode),
        seed: config.seed,
        start_time,
        config: serde_json::to_value(config)?,
        artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
    };
    manifest.write(&manifest_path)?;
    Ok(RunOutcome {
        records,
        model: trainer.model,
        manifest,
    })
}

/// Run configuration used to train the dense parent on understanding data.
pub fn pretrain_config(config: &TrainConfig) -> TrainConfig {
    let mut c = config.clone();
    c.run_name = "parent".into();
    c.mode = ArchitectureMode::Standard;
    c.seed = config.pretrain.seed.unwrap_or(config.seed);
    c.total_steps = config.pretrain.steps;
    c.warmup_steps = 0;
    c.lr_policy = LrPolicy::Uniform;
    c.lr_gen = config.pretrain.lr;
    c.lr_und = config.pretrain.lr;
    c.data.ratios = [0, 0, config.pretrain.ratios[0], config.pretrain.ratios[1]];
    c.capacity = config.pretrain.capacity;
    if let Some(a) = config.pretrain.lambda_aux {
        c.loss.lambda_aux = a;
    }
    c.eval_every = config.pretrain.steps.max(1);
    c.imbalance_every = config.pretrain.steps.max(1);
    c.checkpoint_every = 0;
    c.parent = None;
    c.partition = None;
    c
}

/// Trains the dense parent, reusing `dir/model.ckpt` when it was produced
/// by the same pretraining configuration.
pub fn pretrain<T: Scalar>(config: &TrainConfig, dir: &Path) -> Result<Model<T>> {
    let pc = pretrain_config(config);
    let stamp = dir.join("pretrain.toml");
    let ckpt = dir.join("model.ckpt");
    let wanted = pc.to_toml_string()?;
    if ckpt.exists() && std::fs::read_to_string(&stamp).is_ok_and(|s| s == wanted) {
        return Model::load(&ckpt);
    }
    let model = build_model(&pc.model, ArchitectureMode::Standard, None, None, pc.seed)?;
    let mut model = run_training(&pc, model, dir)?.model;
    if config.pretrain.anneal_steps > 0 {
        let mut ac = pc.clone();
        ac.run_name = "parent_anneal".into();
        ac.seed = pc.seed.wrapping_add(1);
        ac.total_steps = config.pretrain.anneal_steps;
        ac.lr_gen = config.pretrain.anneal_lr;
        ac.lr_und = config.pretrain.anneal_lr;
        ac.eval_every = ac.total_steps;
        ac.imbalance_every = ac.total_steps;
        model = run_training(&ac, model, &dir.join("anneal"))?.model;
        model.save(&ckpt)?;
    }
    std::fs::write(&stamp, wanted)?;
    Ok(model)
}

/// Held-out understanding batches used to profile expert roles.
pub fn profile_batches(world: &World, n: usize) -> Vec<Batch> {
    let mut out = Vec::new();
    for i in 0..n {
        for task in [Task::Lm, Task::Mmu] {
            let mut rng = Rng::derive(world.config.world_seed, &[PROFILE_TAG, task.index() as u64, i as u64]);
            out.push(world.generate_with(task, i as u64, &mut rng));
        }
    }
    out
}

/// Profiles `parent` and plans per-layer partitions.
pub fn plan_partition<T: Scalar>(config: &TrainConfig, parent: &Model<T>) -> Result<(ActivationProfile, Vec<PartitionSpec>)> {
    let world = World::new(&config.data)?;
    let batches = profile_batches(&world, config.plan.profile_batches);
    let profile = profile_activations(parent, &batches, config.model.top_k)?;
    let specs = partition_experts(&profile, &config.plan.options())?;
    Ok((profile, specs))
}

/// One arm of the comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub config: TrainConfig,
}

pub fn arms(base: &TrainConfig) -> Vec<Arm> {
    let mut out = Vec::new();
    let mut mk = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        c.run_name = name.into();
        f(&mut c);
        out.push(Arm {
            name: name.into(),
            config: c,
        });
    };
    mk("standard", &|c| {
        c.mode = ArchitectureMode::Standard;
        c.lr_policy = base.compare.standard_lr_policy;
    });
    mk("mot", &|c| {
        c.mode = ArchitectureMode::MoT;
        c.lr_policy = base.compare.mot_lr_policy;
    });
    mk("symbiotic", &|c| c.mode = ArchitectureMode::Symbiotic);
    mk("only_lm_mmu", &|c| {
        c.mode = ArchitectureMode::Symbiotic;
        c.loss.lambda_img = 0.0;
    });
    if base.compare.no_shield_arm {
        mk("symbiotic_no_shield", &|c| {
            c.mode = ArchitectureMode::Symbiotic;
            c.warmup_steps = 0;
            c.shield_scale = 1.0;
        });
    }
    out
}

/// Final numbers of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub final_und: f64,
    pub final_t2i: f64,
    pub final_capacity_rate: f64,
    pub mean_capacity_last_200: f64,
    /// Mean held-out understanding loss over evaluations inside the warmup window.
    pub warmup_window_und: Option<f64>,
    pub metrics: String,
}

pub fn summarize(arm: &str, warmup: u64, records: &[MetricsRecord], metrics: &Path) -> Result<ArmSummary> {
    let last_eval = records
        .iter()
        .rev()
        .find_map(|r| r.eval.as_ref())
        .ok_or_else(|| Error::Contract(format!("{arm} produced no evaluation")))?;
    let tail = &records[records.len().saturating_sub(200)..];
    let window: Vec<f64> = records
        .iter()
        .filter(|r| r.step < warmup)
        .filter_map(|r| r.eval.as_ref().map(|e| e.und))
        .collect();
    Ok(ArmSummary {
        arm: arm.into(),
        final_und: last_eval.und,
        final_t2i: last_eval.t2i,
        final_capacity_rate: last_eval.capacity_rate,
        mean_capacity_last_200: tail.iter().map(|r| r.capacity_rate).sum::<f64>() / tail.len().max(1) as f64,
        warmup_window_und: (!window.is_empty()).then(|| window.iter().sum::<f64>() / window.len() as f64),
        metrics: metrics.display().to_string(),
    })
}

pub fn summary_table(rows: &[ArmSummary]) -> String {
    let mut s = String::from(
        "| arm | und eval loss | t2i eval loss | capacity rate | mean capacity (last 200) |\n|---|---|---|---|---|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.arm, r.final_und, r.final_t2i, r.final_capacity_rate, r.mean_capacity_last_200
        ));
    }
    s
}

/// Pretrains (or reuses) the parent, plans the partition, then runs every
/// arm on its own thread from the same parent and seed.
pub fn compare<T: Scalar>(config: &TrainConfig, dir: &Path) -> Result<Vec<ArmSummary>> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let parent_dir = dir.join("parent");
    let parent = pretrain::<T>(config, &parent_dir)?;
    let (profile, specs) = plan_partition(config, &parent)?;
    profile.write_jsonl(&mut std::fs::File::create(dir.join("profile.jsonl"))?)?;
    write_partitions(&mut std::fs::File::create(dir.join("partition.jsonl"))?, &specs)?;
    let arms = arms(config);
    let results: Vec<Result<ArmSummary>> = std::thread::scope(|scope| {
        let handles: Vec<_> = arms
            .iter()
            .map(|arm| {
                let parent = &parent;
                let specs = &specs;
                scope.spawn(move || -> Result<ArmSummary> {
                    let c = &arm.config;
                    let partition = c.mode.is_grouped().then_some(specs.as_slice());
                    let model = build_model(&c.model, c.mode, partition, Some(parent), c.seed)?;
                    let arm_dir = dir.join(&arm.name);
                    let out = run_training(c, model, &arm_dir)?;
                    summarize(&arm.name, config.warmup_steps, &out.records, &arm_dir.join("metrics.jsonl"))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("arm thread panicked".into()))))
            .collect()
    });
    let rows: Vec<ArmSummary> = results.into_iter().collect::<Result<_>>()?;
    std::fs::write(dir.join("summary.md"), summary_table(&rows))?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    Ok(rows)
}
