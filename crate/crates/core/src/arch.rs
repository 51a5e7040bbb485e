//! Model assembly in the Standard, MoT and Symbiotic layouts.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Manifest};
use crate::data::Batch;
use crate::disentangle::{inherit_experts, slice_router, ModalityTag, PartitionSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::moe::{
    apply_capacity, route, routed_sum, ExpertFFN, GroupRoute, LayerOutput, MoeLayer, MoeLayerConfig, Router,
};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const INIT_TAG: u64 = 0x494e_4954;
const MASK: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureMode {
    Standard,
    #[serde(rename = "mot")]
    MoT,
    Symbiotic,
    SharedOnlyProbe,
}

impl ArchitectureMode {
    pub fn is_grouped(self) -> bool {
        matches!(self, Self::MoT | Self::Symbiotic)
    }
}

impl std::str::FromStr for ArchitectureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "mot" => Ok(Self::MoT),
            "symbiotic" => Ok(Self::Symbiotic),
            "shared_only_probe" => Ok(Self::SharedOnlyProbe),
            _ => Err(Error::Usage(format!("unknown architecture mode {s:?}"))),
        }
    }
}

/// Attenuation of the generation loss on shared-expert parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShieldState {
    pub step: u64,
    pub warmup_steps: u64,
    pub scale_after: f64,
}

impl ShieldState {
    pub fn new(step: u64, warmup_steps: u64, scale_after: f64) -> Self {
        Self {
            step,
            warmup_steps,
            scale_after,
        }
    }

    pub fn active(&self) -> bool {
        self.step < self.warmup_steps
    }

    /// Effective gradient factor: 0 while active, `scale_after` afterwards.
    pub fn factor(&self) -> f64 {
        if self.active() {
            0.0
        } else {
            self.scale_after
        }
    }
}

/// One routing group of a grouped layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGroup {
    pub name: String,
    pub modalities: Vec<ModalityTag>,
    pub router: Router,
    pub experts: Vec<ExpertFFN>,
    /// Original expert index of each member.
    pub index_map: Vec<usize>,
}

impl ExpertGroup {
    pub fn param_group(&self) -> ParamGroup {
        group_of(&self.name)
    }
}

fn group_of(name: &str) -> ParamGroup {
    if name == "gen" {
        ParamGroup::Generation
    } else {
        ParamGroup::Understanding
    }
}

/// Hard-routed MoE layer: each modality is routed within its own group;
/// shared experts see every token.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbioticLayer {
    pub groups: Vec<ExpertGroup>,
    pub shared: Vec<ExpertFFN>,
    pub top_k: usize,
    pub capacity_factor: f64,
}

/// Which parts of a grouped layer run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerOptions {
    pub capacity: bool,
    pub routed: bool,
    pub shared: bool,
}

impl SymbioticLayer {
    /// Fresh layer with random routers and experts.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &MoeLayerConfig,
        spec: &PartitionSpec,
        with_shared: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let mut groups = Vec::new();
        for gs in spec.groups() {
            if gs.ids.is_empty() {
                continue;
            }
            let pg = group_of(gs.name);
            let router = Router::init(store, &format!("{prefix}.{}.router", gs.name), pg, config.d_model, gs.ids.len(), rng);
            let experts = gs
                .ids
                .iter()
                .map(|&i| ExpertFFN::init(store, &format!("{prefix}.{}.expert{i}", gs.name), pg, config.d_model, config.d_ff, rng))
                .collect();
            groups.push(ExpertGroup {
                name: gs.name.to_string(),
                modalities: gs.modalities,
                router,
                experts,
                index_map: gs.ids,
            });
        }
        let shared = if with_shared {
            (0..config.n_shared)
                .map(|i| {
                    ExpertFFN::init(store, &format!("{prefix}.shared{i}"), ParamGroup::Understanding, config.d_model, config.d_ff, rng)
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            groups,
            shared,
            top_k: config.top_k,
            capacity_factor: config.capacity_factor,
        })
    }

    /// Layer initialised from a dense parent: experts copied into their
    /// groups, routers sliced by column, shared experts copied.
    pub fn inherit<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        parent: &MoeLayer,
        parent_store: &ParamStore<T>,
        spec: &PartitionSpec,
        with_shared: bool,
    ) -> Result<Self> {
        let weights: Vec<_> = parent.experts.iter().map(|e| e.weights(parent_store)).collect();
        let shared_w: Vec<_> = parent.shared.iter().map(|e| e.weights(parent_store)).collect();
        let inherited = inherit_experts(&weights, &shared_w, spec)?;
        let routers = slice_router(parent_store.tensor(parent.router.w), spec)?;
        let modalities: HashMap<&str, Vec<ModalityTag>> =
            spec.groups().into_iter().map(|g| (g.name, g.modalities)).collect();
        let mut groups = Vec::new();
        for (gi, name) in inherited.names.iter().enumerate() {
            let pg = group_of(name);
            let rw = routers.routers[gi].clone();
            let router = Router {
                w: store.add(format!("{prefix}.{name}.router"), pg, rw),
            };
            let experts = inherited.groups[gi]
                .iter()
                .zip(&inherited.index_map[gi])
                .map(|(w, &i)| {
                    ExpertFFN::from_weights(store, &format!("{prefix}.{name}.expert{i}"), pg, w.w1.clone(), w.w2.clone())
                })
                .collect();
            groups.push(ExpertGroup {
                name: name.to_string(),
                modalities: modalities[name].clone(),
                router,
                experts,
                index_map: inherited.index_map[gi].clone(),
            });
        }
        let shared = if with_shared {
            inherited
                .shared
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    ExpertFFN::from_weights(store, &format!("{prefix}.shared{i}"), ParamGroup::Understanding, w.w1.clone(), w.w2.clone())
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            groups,
            shared,
            top_k: parent.config.top_k,
            capacity_factor: parent.config.capacity_factor,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.groups.iter().map(|g| g.experts.len()).sum()
    }

    fn group_for(&self, tag: ModalityTag) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g.modalities.contains(&tag))
            .ok_or_else(|| Error::Contract(format!("no expert group accepts {tag} tokens")))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        tags: &[ModalityTag],
        opts: &LayerOptions,
    ) -> Result<LayerOutput<T>> {
        let (n, _) = g.dims2(tokens)?;
        if tags.len() != n {
            return Err(Error::Contract(format!("{} tags for {n} tokens", tags.len())));
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); self.groups.len()];
        for (r, &t) in tags.iter().enumerate() {
            members[self.group_for(t)?].push(r);
        }
        let mut parts: Vec<Var> = Vec::new();
        let mut routes = Vec::new();
        if opts.routed {
            for (grp, rows) in self.groups.iter().zip(&members) {
                if rows.is_empty() {
                    continue;
                }
                let x = g.gather_rows(tokens, rows)?;
                let w = g.param(store, grp.router.w);
                let k = self.top_k.min(grp.experts.len());
                let mut routed = route(g, w, x, k)?;
                if opts.capacity {
                    routed.decision = apply_capacity(&routed.decision, grp.experts.len(), self.capacity_factor);
                }
                if let Some(y) = routed_sum(g, store, &grp.experts, &routed.decision, routed.gates, x)? {
                    parts.push(g.scatter_add_rows(y, rows, n)?);
                }
                routes.push(GroupRoute {
                    group: grp.name.clone(),
                    rows: rows.clone(),
                    index_map: grp.index_map.clone(),
                    routed,
                });
            }
        }
        if opts.shared && !self.shared.is_empty() {
            parts.push(self.shared_part(g, store, tokens)?);
        }
        let output = sum_parts(g, &parts, tokens)?;
        Ok(LayerOutput { output, routes })
    }

    fn shared_part<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for s in &self.shared {
            let y = s.forward(g, store, tokens)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        Ok(acc.expect("at least one shared expert"))
    }
}

fn sum_parts<T: Scalar>(g: &mut Graph<T>, parts: &[Var], like: Var) -> Result<Var> {
    match parts {
        [] => {
            let shape = g.shape(like).to_vec();
            Ok(g.constant(Tensor::zeros(&shape)))
        }
        [p] => Ok(*p),
        [first, rest @ ..] => {
            let mut acc = *first;
            for &p in rest {
                acc = g.add(acc, p)?;
            }
            Ok(acc)
        }
    }
}

/// Grouped routing plus shared experts.
pub fn symbiotic_forward<T: Scalar>(
    layer: &SymbioticLayer,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tokens: Var,
    tags: &[ModalityTag],
    capacity: bool,
) -> Result<LayerOutput<T>> {
    let opts = LayerOptions {
        capacity,
        routed: true,
        shared: true,
    };
    layer.forward(g, store, tokens, tags, &opts)
}

/// Grouped routing only; any shared experts on the layer are ignored.
pub fn mot_forward<T: Scalar>(
    layer: &SymbioticLayer,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tokens: Var,
    tags: &[ModalityTag],
    capacity: bool,
) -> Result<LayerOutput<T>> {
    let opts = LayerOptions {
        capacity,
        routed: true,
        shared: false,
    };
    layer.forward(g, store, tokens, tags, &opts)
}

/// Modality-blind routing over every expert, plus shared experts.
pub fn standard_forward<T: Scalar>(
    layer: &MoeLayer,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tokens: Var,
    capacity: bool,
) -> Result<LayerOutput<T>> {
    layer.forward(g, store, tokens, capacity, layer.config.top_k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub n_shared: usize,
    pub n_layers: usize,
    pub capacity_factor: f64,
    pub d_vit: usize,
    pub d_latent: usize,
    pub max_len: usize,
    pub time_freqs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 32,
            d_ff: 64,
            n_experts: 16,
            top_k: 2,
            n_shared: 1,
            n_layers: 2,
            capacity_factor: 1.0,
            d_vit: 8,
            d_latent: 4,
            max_len: 32,
            time_freqs: 4,
        }
    }
}

impl ModelConfig {
    pub fn moe(&self) -> MoeLayerConfig {
        MoeLayerConfig {
            n_experts: self.n_experts,
            top_k: self.top_k,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_shared: self.n_shared,
            capacity_factor: self.capacity_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.moe().validate()?;
        for (name, v) in [
            ("vocab", self.vocab),
            ("n_layers", self.n_layers),
            ("d_vit", self.d_vit),
            ("d_latent", self.d_latent),
            ("max_len", self.max_len),
            ("time_freqs", self.time_freqs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Shapes that must agree for a parent to seed a child.
    fn same_skeleton(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.n_shared = other.n_shared;
        a.capacity_factor = other.capacity_factor;
        a.top_k = other.top_k;
        &a == other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MoeBlock {
    Dense(MoeLayer),
    Grouped(SymbioticLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn: Attention,
    pub moe: MoeBlock,
}

/// Role of a parameter inside the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    GenInput,
    Attention,
    Router { group: String },
    Expert { group: String },
    Shared,
    VocabHead,
    VelocityHead,
}

impl ParamRole {
    pub fn is_routed(&self) -> bool {
        matches!(self, ParamRole::Router { .. } | ParamRole::Expert { .. })
    }

    /// Optimiser group implied by the role.
    pub fn param_group(&self) -> ParamGroup {
        match self {
            ParamRole::GenInput | ParamRole::VelocityHead => ParamGroup::Generation,
            ParamRole::Router { group } | ParamRole::Expert { group } => group_of(group),
            _ => ParamGroup::Understanding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOptions {
    /// Apply per-expert capacity limits.
    pub capacity: bool,
    /// Override of the routing fan-out.
    pub top_k: Option<usize>,
    /// Mask every routed expert; only shared experts act.
    pub probe: bool,
}

#[derive(Debug, Clone)]
pub struct ModelOutput<T> {
    /// Final normalised hidden states, `[rows x d_model]`.
    pub hidden: Var,
    pub layers: Vec<LayerOutput<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub mode: ArchitectureMode,
    pub partition: Option<Vec<PartitionSpec>>,
    pub store: ParamStore<T>,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub vit_proj: ParamId,
    pub vae_proj: ParamId,
    pub t_proj: ParamId,
    pub blocks: Vec<Block>,
    pub vocab_head: ParamId,
    pub velocity_head: ParamId,
}

fn randn<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Assembles a model. Grouped modes need one partition per layer; with a
/// `parent` (a Standard model of the same shape) every weight is inherited.
pub fn build_model<T: Scalar>(
    config: &ModelConfig,
    mode: ArchitectureMode,
    partition: Option<&[PartitionSpec]>,
    parent: Option<&Model<T>>,
    seed: u64,
) -> Result<Model<T>> {
    config.validate()?;
    if mode == ArchitectureMode::SharedOnlyProbe {
        return Err(Error::Config(
            "shared-only probing is an inference option, build the model in its training mode".into(),
        ));
    }
    let partition = if mode.is_grouped() {
        let p = partition.ok_or_else(|| Error::Config(format!("{mode:?} mode requires a partition")))?;
        if p.len() != config.n_layers {
            return Err(Error::Config(format!(
                "partition covers {} layers, model has {}",
                p.len(),
                config.n_layers
            )));
        }
        for spec in p {
            if spec.n_experts != config.n_experts {
                return Err(Error::Config(format!(
                    "partition over {} experts, model has {}",
                    spec.n_experts, config.n_experts
                )));
            }
            spec.validate()?;
        }
        Some(p.to_vec())
    } else {
        None
    };
    if let Some(p) = parent {
        if p.mode != ArchitectureMode::Standard {
            return Err(Error::Config("a parent model must be in standard mode".into()));
        }
        if !p.config.same_skeleton(config) {
            return Err(Error::Config("parent and child model shapes differ".into()));
        }
    }

    let mut rng = Rng::derive(seed, &[INIT_TAG]);
    let mut store = ParamStore::new();
    let d = config.d_model;
    let und = ParamGroup::Understanding;
    let gen = ParamGroup::Generation;
    let fresh = |store: &mut ParamStore<T>, name: &str, group, t: Tensor<T>| -> ParamId {
        let t = match parent {
            Some(p) => p.store.tensor(p.store.find(name).expect("parent has every non-expert tensor")).clone(),
            None => t,
        };
        store.add(name, group, t)
    };
    let tok_emb = fresh(&mut store, "tok_emb", und, Tensor::randn(&[config.vocab, d], 1.0, &mut rng));
    let pos_emb = fresh(&mut store, "pos_emb", und, Tensor::randn(&[config.max_len, d], 0.1, &mut rng));
    let vit_proj = fresh(&mut store, "vit_proj", und, randn(&[config.d_vit, d], config.d_vit, &mut rng));
    let vae_proj = fresh(&mut store, "vae_proj", gen, randn(&[config.d_latent, d], config.d_latent, &mut rng));
    let t_proj = fresh(&mut store, "t_proj", gen, randn(&[2 * config.time_freqs, d], 2 * config.time_freqs, &mut rng));
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let mut w = |name: &str, rng: &mut Rng| {
            let n = format!("l{l}.attn.{name}");
            fresh(&mut store, &n, und, randn(&[d, d], d, rng))
        };
        let attn = Attention {
            wq: w("wq", &mut rng),
            wk: w("wk", &mut rng),
            wv: w("wv", &mut rng),
            wo: w("wo", &mut rng),
        };
        let prefix = format!("l{l}");
        let moe = match (&partition, parent) {
            (None, None) => MoeBlock::Dense(MoeLayer::init(&mut store, &prefix, &config.moe(), &mut rng)?),
            (None, Some(p)) => {
                let MoeBlock::Dense(pl) = &p.blocks[l].moe else {
                    return Err(Error::Config("parent layer is not dense".into()));
                };
                let mut cfg = pl.config.clone();
                cfg.top_k = config.top_k;
                cfg.capacity_factor = config.capacity_factor;
                let mut layer = MoeLayer {
                    config: cfg,
                    router: Router {
                        w: store.add(format!("{prefix}.router"), und, p.store.tensor(pl.router.w).clone()),
                    },
                    experts: Vec::new(),
                    shared: Vec::new(),
                };
                for (i, e) in pl.experts.iter().enumerate() {
                    let w = e.weights(&p.store);
                    layer.experts.push(ExpertFFN::from_weights(&mut store, &format!("{prefix}.expert{i}"), und, w.w1, w.w2));
                }
                for (i, e) in pl.shared.iter().enumerate() {
                    let w = e.weights(&p.store);
                    layer.shared.push(ExpertFFN::from_weights(&mut store, &format!("{prefix}.shared{i}"), und, w.w1, w.w2));
                }
                MoeBlock::Dense(layer)
            }
            (Some(specs), None) => MoeBlock::Grouped(SymbioticLayer::init(
                &mut store,
                &prefix,
                &config.moe(),
                &specs[l],
                mode == ArchitectureMode::Symbiotic,
                &mut rng,
            )?),
            (Some(specs), Some(p)) => {
                let MoeBlock::Dense(pl) = &p.blocks[l].moe else {
                    return Err(Error::Config("parent layer is not dense".into()));
                };
                let mut layer = SymbioticLayer::inherit(
                    &mut store,
                    &prefix,
                    pl,
                    &p.store,
                    &specs[l],
                    mode == ArchitectureMode::Symbiotic,
                )?;
                layer.top_k = config.top_k;
                layer.capacity_factor = config.capacity_factor;
                MoeBlock::Grouped(layer)
            }
        };
        blocks.push(Block { attn, moe });
    }
    let vocab_head = fresh(&mut store, "vocab_head", und, randn(&[d, config.vocab], d, &mut rng));
    let velocity_head = fresh(&mut store, "velocity_head", gen, randn(&[d, config.d_latent], d, &mut rng));
    let model = Model {
        config: config.clone(),
        mode,
        partition,
        store,
        tok_emb,
        pos_emb,
        vit_proj,
        vae_proj,
        t_proj,
        blocks,
        vocab_head,
        velocity_head,
    };
    model.check_param_groups()?;
    Ok(model)
}

/// Fixed Fourier features `[sin(pi f t), cos(pi f t)]` for `f = 1..=n`.
pub fn time_features(t: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n);
    for f in 1..=n {
        out.push((std::f64::consts::PI * f as f64 * t).sin());
    }
    for f in 1..=n {
        out.push((std::f64::consts::PI * f as f64 * t).cos());
    }
    out
}

impl<T: Scalar> Model<T> {
    /// Every parameter with its role, in store order.
    pub fn param_roles(&self) -> Vec<(ParamId, ParamRole)> {
        let mut out = vec![
            (self.tok_emb, ParamRole::Embedding),
            (self.pos_emb, ParamRole::Embedding),
            (self.vit_proj, ParamRole::Embedding),
            (self.vae_proj, ParamRole::GenInput),
            (self.t_proj, ParamRole::GenInput),
        ];
        for b in &self.blocks {
            for id in [b.attn.wq, b.attn.wk, b.attn.wv, b.attn.wo] {
                out.push((id, ParamRole::Attention));
            }
            match &b.moe {
                MoeBlock::Dense(l) => {
                    out.push((l.router.w, ParamRole::Router { group: "all".into() }));
                    for e in &l.experts {
                        for id in [e.w1, e.w2] {
                            out.push((id, ParamRole::Expert { group: "all".into() }));
                        }
                    }
                    for e in &l.shared {
                        out.extend([(e.w1, ParamRole::Shared), (e.w2, ParamRole::Shared)]);
                    }
                }
                MoeBlock::Grouped(l) => {
                    for grp in &l.groups {
                        out.push((grp.router.w, ParamRole::Router { group: grp.name.clone() }));
                        for e in &grp.experts {
                            for id in [e.w1, e.w2] {
                                out.push((id, ParamRole::Expert { group: grp.name.clone() }));
                            }
                        }
                    }
                    for e in &l.shared {
                        out.extend([(e.w1, ParamRole::Shared), (e.w2, ParamRole::Shared)]);
                    }
                }
            }
        }
        out.push((self.vocab_head, ParamRole::VocabHead));
        out.push((self.velocity_head, ParamRole::VelocityHead));
        out
    }

    pub fn ids_with(&self, pred: impl Fn(&ParamRole) -> bool) -> Vec<ParamId> {
        self.param_roles()
            .into_iter()
            .filter(|(_, r)| pred(r))
            .map(|(id, _)| id)
            .collect()
    }

    /// Each trainable parameter is referenced exactly once and sits in the
    /// optimiser group its role implies.
    pub fn check_param_groups(&self) -> Result<()> {
        let mut seen = vec![false; self.store.len()];
        for (id, role) in self.param_roles() {
            let p = self.store.param(id);
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Contract(format!("{} is referenced twice", p.name)));
            }
            if p.group != role.param_group() {
                return Err(Error::Contract(format!(
                    "{} is in {:?}, expected {:?}",
                    p.name,
                    p.group,
                    role.param_group()
                )));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = &self.store.iter().nth(i).expect("index in range").1.name;
            return Err(Error::Contract(format!("{name} belongs to no model component")));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph<T>, batch: &Batch) -> Result<Var> {
        let cfg = &self.config;
        let n = batch.n_rows();
        if batch.seq_len > cfg.max_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq_len, cfg.max_len
            )));
        }
        if batch.n_seqs * batch.seq_len != n || batch.tokens.len() != n {
            return Err(Error::Contract("batch layout is inconsistent".into()));
        }
        let mut parts = Vec::new();
        let mut rows = Vec::new();
        let text = batch.rows_of(ModalityTag::Text);
        if !text.is_empty() {
            let ids: Vec<usize> = text.iter().map(|&r| batch.tokens[r]).collect();
            if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab) {
                return Err(Error::Contract(format!("token id {bad} outside vocab {}", cfg.vocab)));
            }
            let table = g.param(&self.store, self.tok_emb);
            parts.push(g.embedding(table, &ids)?);
            rows.extend(text);
        }
        let vit = batch.rows_of(ModalityTag::Vit);
        if !vit.is_empty() {
            if batch.d_vit != cfg.d_vit {
                return Err(Error::Shape(format!("ViT features of width {}, model expects {}", batch.d_vit, cfg.d_vit)));
            }
            let x = g.constant(Tensor::from_f64(&[vit.len(), cfg.d_vit], &batch.vit)?);
            let w = g.param(&self.store, self.vit_proj);
            parts.push(g.matmul(x, w)?);
            rows.extend(vit);
        }
        let vae = batch.rows_of(ModalityTag::Vae);
        if !vae.is_empty() {
            if batch.d_latent != cfg.d_latent {
                return Err(Error::Shape(format!("latents of width {}, model expects {}", batch.d_latent, cfg.d_latent)));
            }
            let x = g.constant(Tensor::from_f64(&[vae.len(), cfg.d_latent], &batch.interpolated())?);
            let w = g.param(&self.store, self.vae_proj);
            let e = g.matmul(x, w)?;
            let feats: Vec<f64> = batch
                .vae_times()
                .into_iter()
                .flat_map(|t| time_features(t, cfg.time_freqs))
                .collect();
            let f = g.constant(Tensor::from_f64(&[vae.len(), 2 * cfg.time_freqs], &feats)?);
            let tw = g.param(&self.store, self.t_proj);
            let te = g.matmul(f, tw)?;
            parts.push(g.add(e, te)?);
            rows.extend(vae);
        }
        let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
        let x = g.scatter_add_rows(x, &rows, n)?;
        let table = g.param(&self.store, self.pos_emb);
        let pos: Vec<usize> = (0..n).map(|r| r % batch.seq_len).collect();
        let p = g.embedding(table, &pos)?;
        g.add(x, p)
    }

    /// Causal single-head attention, per sequence.
    fn attention(
        &self,
        g: &mut Graph<T>,
        attn: &Attention,
        u: Var,
        batch: &Batch,
    ) -> Result<Var> {
        let l = batch.seq_len;
        let wq = g.param(&self.store, attn.wq);
        let wk = g.param(&self.store, attn.wk);
        let wv = g.param(&self.store, attn.wv);
        let wo = g.param(&self.store, attn.wo);
        let q = g.matmul(u, wq)?;
        let k = g.matmul(u, wk)?;
        let v = g.matmul(u, wv)?;
        let scale = T::lit(1.0 / (self.config.d_model as f64).sqrt());
        let mut outs = Vec::with_capacity(batch.n_seqs);
        for s in 0..batch.n_seqs {
            let qs = g.slice(q, 0, s * l, l)?;
            let ks = g.slice(k, 0, s * l, l)?;
            let vs = g.slice(v, 0, s * l, l)?;
            let all: Vec<usize> = (0..l).collect();
            let out = attend(g, qs, ks, vs, &all, scale)?;
            outs.push(out);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? };
        g.matmul(cat, wo)
    }

    fn moe_block(
        &self,
        g: &mut Graph<T>,
        block: &Block,
        x: Var,
        batch: &Batch,
        opts: &ForwardOptions,
    ) -> Result<LayerOutput<T>> {
        match &block.moe {
            MoeBlock::Dense(layer) => {
                if opts.probe {
                    let out = crate::moe::shared_sum(g, &self.store, &layer.shared, x)?;
                    let out = match out {
                        Some(o) => o,
                        None => sum_parts(g, &[], x)?,
                    };
                    return Ok(LayerOutput {
                        output: out,
                        routes: Vec::new(),
                    });
                }
                let k = opts.top_k.unwrap_or(layer.config.top_k);
                layer.forward(g, &self.store, x, opts.capacity, k)
            }
            MoeBlock::Grouped(layer) => {
                let mut layer_ref = std::borrow::Cow::Borrowed(layer);
                if let Some(k) = opts.top_k {
                    layer_ref.to_mut().top_k = k;
                }
                let lo = LayerOptions {
                    capacity: opts.capacity,
                    routed: !opts.probe,
                    shared: self.mode == ArchitectureMode::Symbiotic,
                };
                layer_ref.forward(g, &self.store, x, &batch.tags, &lo)
            }
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch, opts: &ForwardOptions) -> Result<ModelOutput<T>> {
        let mut x = self.embed(g, batch)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let u = g.rms_norm(x)?;
            let a = self.attention(g, &block.attn, u, batch)?;
            let h = g.add(x, a)?;
            let v = g.rms_norm(h)?;
            let m = self.moe_block(g, block, v, batch, opts)?;
            x = g.add(h, m.output)?;
            layers.push(m);
        }
        let hidden = g.rms_norm(x)?;
        Ok(ModelOutput { hidden, layers })
    }

    /// Vocabulary logits for `rows` of the batch.
    pub fn logits(&self, g: &mut Graph<T>, out: &ModelOutput<T>, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(out.hidden, rows)?;
        let w = g.param(&self.store, self.vocab_head);
        g.matmul(h, w)
    }

    /// Predicted velocities for `rows` of the batch.
    pub fn velocity(&self, g: &mut Graph<T>, out: &ModelOutput<T>, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(out.hidden, rows)?;
        let w = g.param(&self.store, self.velocity_head);
        g.matmul(h, w)
    }

    /// Record names in store order.
    pub fn record_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, p)| p.name.clone()).collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        let meta = serde_json::json!({
            "config": self.config,
            "mode": self.mode,
            "partition": self.partition,
        });
        Ok(Checkpoint {
            manifest: Manifest {
                kind: "model".into(),
                meta,
                records: self.record_names(),
            },
            tensors: self.store.iter().map(|(_, p)| p.tensor.clone()).collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        if ck.manifest.kind != "model" {
            return Err(Error::Parse(format!("expected a model checkpoint, got {}", ck.manifest.kind)));
        }
        let meta = &ck.manifest.meta;
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        let mode: ArchitectureMode = serde_json::from_value(meta["mode"].clone())?;
        let partition: Option<Vec<PartitionSpec>> = serde_json::from_value(meta["partition"].clone())?;
        let mut model = build_model(&config, mode, partition.as_deref(), None, 0)?;
        if model.record_names() != ck.manifest.records {
            return Err(Error::Parse("checkpoint records do not match the model layout".into()));
        }
        let ids: Vec<ParamId> = model.store.ids().collect();
        for (id, t) in ids.into_iter().zip(&ck.tensors) {
            model.store.set(id, t.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Dense layer `l`, if the model is in standard mode.
    pub fn dense_layer(&self, l: usize) -> Option<&MoeLayer> {
        match &self.blocks.get(l)?.moe {
            MoeBlock::Dense(layer) => Some(layer),
            MoeBlock::Grouped(_) => None,
        }
    }

    pub fn grouped_layer(&self, l: usize) -> Option<&SymbioticLayer> {
        match &self.blocks.get(l)?.moe {
            MoeBlock::Grouped(layer) => Some(layer),
            MoeBlock::Dense(_) => None,
        }
    }
}

fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, positions: &[usize], scale: T) -> Result<Var> {
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, scale);
    let l = g.dims2(k)?.0;
    let mask: Vec<T> = positions
        .iter()
        .flat_map(|&p| (0..l).map(move |j| if j > p { T::lit(MASK) } else { T::zero() }))
        .collect();
    let s = g.add_const(s, &mask)?;
    let p = g.softmax(s, 1)?;
    g.matmul(p, v)
}

/// Shared-only inference: routed experts are masked everywhere.
pub fn probe_shared_only<T: Scalar>(model: &Model<T>, g: &mut Graph<T>, batch: &Batch) -> Result<ModelOutput<T>> {
    model.forward(
        g,
        batch,
        &ForwardOptions {
            probe: true,
            ..ForwardOptions::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MixtureConfig, Task, World};

    fn bimodal(n_layers: usize) -> Vec<PartitionSpec> {
        (0..n_layers)
            .map(|_| PartitionSpec::bimodal(16, (0..12).collect()).unwrap())
            .collect()
    }

    fn batch(task: Task) -> Batch {
        World::new(&MixtureConfig::default()).unwrap().generate(task, 3, 0)
    }

    #[test]
    fn grouped_modes_need_a_partition() {
        let cfg = ModelConfig::default();
        assert!(matches!(
            build_model::<f64>(&cfg, ArchitectureMode::MoT, None, None, 1),
            Err(Error::Config(_))
        ));
        let m = build_model::<f64>(&cfg, ArchitectureMode::Symbiotic, Some(&bimodal(2)), None, 1).unwrap();
        m.check_param_groups().unwrap();
        let mot = build_model::<f64>(&cfg, ArchitectureMode::MoT, Some(&bimodal(2)), None, 1).unwrap();
        assert!(mot.ids_with(|r| *r == ParamRole::Shared).is_empty());
    }

    #[test]
    fn shield_state_window() {
        let s = ShieldState::new(49, 50, 0.1);
        assert!(s.active());
        assert_eq!(s.factor(), 0.0);
        let s = ShieldState::new(50, 50, 0.1);
        assert!(!s.active());
        assert_eq!(s.factor(), 0.1);
    }

    #[test]
    fn inherited_child_copies_parent() {
        let cfg = ModelConfig::default();
        let parent = build_model::<f64>(&cfg, ArchitectureMode::Standard, None, None, 4).unwrap();
        let child = build_model(&cfg, ArchitectureMode::Symbiotic, Some(&bimodal(2)), Some(&parent), 99).unwrap();
        let pl = parent.dense_layer(1).unwrap();
        let cl = child.grouped_layer(1).unwrap();
        let gen = &cl.groups[1];
        assert_eq!(gen.index_map, vec![12, 13, 14, 15]);
        assert_eq!(
            child.store.tensor(gen.experts[2].w1),
            parent.store.tensor(pl.experts[14].w1)
        );
        assert_eq!(child.store.tensor(child.tok_emb), parent.store.tensor(parent.tok_emb));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig::default();
        let m = build_model::<f64>(&cfg, ArchitectureMode::Symbiotic, Some(&bimodal(2)), None, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::<f64>::load(&path).unwrap();
        assert_eq!(back.record_names(), m.record_names());
        for (a, b) in back.store.iter().zip(m.store.iter()) {
            assert_eq!(a.1.tensor, b.1.tensor);
        }
    }

    #[test]
    fn text_never_reaches_generation_experts() {
        let cfg = ModelConfig::default();
        let m = build_model::<f64>(&cfg, ArchitectureMode::Symbiotic, Some(&bimodal(2)), None, 8).unwrap();
        let b = batch(Task::T2iLong);
        let mut g = Graph::new();
        let o = m.forward(&mut g, &b, &ForwardOptions::default()).unwrap();
        for layer in &o.layers {
            for r in &layer.routes {
                for (local, ids) in r.routed.decision.expert_ids.iter().enumerate() {
                    let tag = b.tags[r.rows[local]];
                    for &e in ids {
                        let original = r.index_map[e];
                        assert_eq!(tag == ModalityTag::Vae, original >= 12);
                    }
                }
            }
        }
    }
}
