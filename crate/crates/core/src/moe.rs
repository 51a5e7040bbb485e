//! Sparse mixture-of-experts layer: router, top-k gating, capacity
//! accounting, expert FFNs, shared experts and the load-balancing loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Manifest};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayerConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_shared: usize,
    pub capacity_factor: f64,
}

impl Default for MoeLayerConfig {
    fn default() -> Self {
        Self {
            n_experts: 16,
            top_k: 2,
            d_model: 32,
            d_ff: 64,
            n_shared: 1,
            capacity_factor: 1.0,
        }
    }
}

impl MoeLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k={} must lie in 1..={}",
                self.top_k, self.n_experts
            )));
        }
        if self.d_ff == 0 || self.d_model == 0 {
            return Err(Error::Config("d_model and d_ff must be positive".into()));
        }
        if !(self.capacity_factor > 0.0) {
            return Err(Error::Config("capacity_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Expert feed-forward network `silu(x W1) W2`, without biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertFFN {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl ExpertFFN {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        d_ff: usize,
        rng: &mut Rng,
    ) -> Self {
        let w1 = Tensor::randn(&[d_model, d_ff], 1.0 / (d_model as f64).sqrt(), rng);
        let w2 = Tensor::randn(&[d_ff, d_model], 1.0 / (d_ff as f64).sqrt(), rng);
        Self::from_weights(store, name, group, w1, w2)
    }

    pub fn from_weights<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        w1: Tensor<T>,
        w2: Tensor<T>,
    ) -> Self {
        Self {
            w1: store.add(format!("{name}.w1"), group, w1),
            w2: store.add(format!("{name}.w2"), group, w2),
        }
    }

    /// Owned copy of the weights.
    pub fn weights<T: Scalar>(&self, store: &ParamStore<T>) -> ExpertWeights<T> {
        ExpertWeights {
            w1: store.tensor(self.w1).clone(),
            w2: store.tensor(self.w2).clone(),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w1 = g.param(store, self.w1);
        let w2 = g.param(store, self.w2);
        self.forward_with(g, x, w1, w2)
    }

    /// Forward with explicitly supplied weight handles (used when the
    /// weights are wrapped by a gradient shield).
    pub fn forward_with<T: Scalar>(&self, g: &mut Graph<T>, x: Var, w1: Var, w2: Var) -> Result<Var> {
        let h = g.matmul(x, w1)?;
        let h = g.silu(h);
        g.matmul(h, w2)
    }
}

/// Detached expert weights, as moved between models.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

/// Linear router with weight `W_r [d_model x N]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Router {
    pub w: ParamId,
}

impl Router {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        n_experts: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = Tensor::randn(&[d_model, n_experts], 1.0 / (d_model as f64).sqrt(), rng);
        Self {
            w: store.add(name, group, w),
        }
    }

    pub fn n_experts<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.tensor(self.w).shape()[1]
    }
}

/// Per-token routing outcome for one router and batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<T> {
    pub n_experts: usize,
    /// `T x k` selected expert indices, in descending logit order.
    pub expert_ids: Vec<Vec<usize>>,
    /// `T x k` gates: softmax over the selected logits.
    pub gates: Vec<Vec<T>>,
    /// `T x k` capacity-overflow flags.
    pub dropped: Vec<Vec<bool>>,
    /// `T x N` softmax over all logits.
    pub raw_probs: Vec<Vec<T>>,
}

impl<T: Scalar> RoutingDecision<T> {
    pub fn n_tokens(&self) -> usize {
        self.expert_ids.len()
    }

    pub fn k(&self) -> usize {
        self.expert_ids.first().map_or(0, Vec::len)
    }

    /// Token-expert assignments per expert, dropped ones included.
    pub fn assignment_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_experts];
        for ids in &self.expert_ids {
            for &e in ids {
                c[e] += 1;
            }
        }
        c
    }

    /// `(token, slot)` pairs served by each expert, in token order.
    pub fn served(&self) -> Vec<Vec<(usize, usize)>> {
        let mut per = vec![Vec::new(); self.n_experts];
        for (t, ids) in self.expert_ids.iter().enumerate() {
            for (s, &e) in ids.iter().enumerate() {
                if !self.dropped[t][s] {
                    per[e].push((t, s));
                }
            }
        }
        per
    }
}

/// Routing decision together with its differentiable pieces.
#[derive(Debug, Clone)]
pub struct Routed<T> {
    pub decision: RoutingDecision<T>,
    /// `T x k` gates on the graph.
    pub gates: Var,
    /// `T x N` full softmax on the graph.
    pub probs: Var,
}

/// Routes `tokens [T x d]` through `router_w [d x N]` to the top-`k` experts.
pub fn route<T: Scalar>(g: &mut Graph<T>, router_w: Var, tokens: Var, k: usize) -> Result<Routed<T>> {
    let n = g.dims2(router_w)?.1;
    if k == 0 || k > n {
        return Err(Error::Config(format!("k={k} out of range for {n} experts")));
    }
    let logits = g.matmul(tokens, router_w)?;
    let (ids, selected) = g.top_k(logits, k)?;
    let gates = g.softmax(selected, 1)?;
    let probs = g.softmax(logits, 1)?;
    let t = ids.len();
    let gv = g.value(gates);
    let pv = g.value(probs);
    let decision = RoutingDecision {
        n_experts: n,
        gates: (0..t).map(|i| gv[i * k..(i + 1) * k].to_vec()).collect(),
        raw_probs: (0..t).map(|i| pv[i * n..(i + 1) * n].to_vec()).collect(),
        dropped: vec![vec![false; k]; t],
        expert_ids: ids,
    };
    Ok(Routed {
        decision,
        gates,
        probs,
    })
}

/// Per-expert capacity `ceil(capacity_factor * T * k / N)`.
pub fn expert_capacity(n_tokens: usize, k: usize, n_experts: usize, capacity_factor: f64) -> usize {
    (capacity_factor * (n_tokens * k) as f64 / n_experts as f64).ceil() as usize
}

/// Marks assignments beyond each expert's capacity as dropped, serving
/// tokens in order and slots in rank order. Surviving gates are left as-is.
pub fn apply_capacity<T: Scalar>(
    decision: &RoutingDecision<T>,
    n_experts: usize,
    capacity_factor: f64,
) -> RoutingDecision<T> {
    let cap = expert_capacity(decision.n_tokens(), decision.k(), n_experts, capacity_factor);
    let mut load = vec![0usize; n_experts];
    let mut out = decision.clone();
    for (t, ids) in decision.expert_ids.iter().enumerate() {
        for (s, &e) in ids.iter().enumerate() {
            if load[e] < cap {
                load[e] += 1;
                out.dropped[t][s] = false;
            } else {
                out.dropped[t][s] = true;
            }
        }
    }
    out
}

/// Fraction of assignments that survived capacity limits.
pub fn capacity_rate<T: Scalar>(decision: &RoutingDecision<T>) -> f64 {
    let total: usize = decision.dropped.iter().map(Vec::len).sum();
    if total == 0 {
        return 1.0;
    }
    let served: usize = decision
        .dropped
        .iter()
        .map(|d| d.iter().filter(|&&x| !x).count())
        .sum();
    served as f64 / total as f64
}

/// Gate-weighted sum of served expert outputs, or `None` when nothing was
/// served. Each expert sees only the rows routed to it.
pub fn routed_sum<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    experts: &[ExpertFFN],
    decision: &RoutingDecision<T>,
    gates: Var,
    tokens: Var,
) -> Result<Option<Var>> {
    if experts.len() != decision.n_experts {
        return Err(Error::Contract(format!(
            "decision routes over {} experts, layer has {}",
            decision.n_experts,
            experts.len()
        )));
    }
    let k = decision.k();
    let n_tokens = decision.n_tokens();
    let mut parts = Vec::new();
    let mut rows = Vec::new();
    for (expert, served) in experts.iter().zip(decision.served()) {
        if served.is_empty() {
            continue;
        }
        let idx: Vec<usize> = served.iter().map(|&(t, _)| t).collect();
        let flat: Vec<usize> = served.iter().map(|&(t, s)| t * k + s).collect();
        let x = g.gather_rows(tokens, &idx)?;
        let h = expert.forward(g, store, x)?;
        let w = g.gather(gates, &flat, &[idx.len(), 1])?;
        parts.push(g.mul_rows(h, w)?);
        rows.extend(idx);
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let cat = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
    Ok(Some(g.scatter_add_rows(cat, &rows, n_tokens)?))
}

/// Unweighted sum of shared-expert outputs over all tokens.
pub fn shared_sum<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    shared: &[ExpertFFN],
    tokens: Var,
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for s in shared {
        let y = s.forward(g, store, tokens)?;
        acc = Some(match acc {
            Some(a) => g.add(a, y)?,
            None => y,
        });
    }
    Ok(acc)
}

/// `y_t = sum_{served i} gate_i E_i(x_t) + sum_shared S(x_t)`.
pub fn moe_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    experts: &[ExpertFFN],
    shared: &[ExpertFFN],
    decision: &RoutingDecision<T>,
    gates: Var,
    tokens: Var,
) -> Result<Var> {
    let routed = routed_sum(g, store, experts, decision, gates, tokens)?;
    let sh = shared_sum(g, store, shared, tokens)?;
    match (routed, sh) {
        (Some(r), Some(s)) => g.add(r, s),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => {
            let shape = g.shape(tokens).to_vec();
            Ok(g.constant(Tensor::zeros(&shape)))
        }
    }
}

/// Load-balancing loss `N * sum_i f_i P_i` where `f_i` is the share of all
/// `T*k` assignments (dropped included) sent to expert `i` and `P_i` the
/// mean router probability. Only `P` carries gradient.
pub fn aux_loss<T: Scalar>(g: &mut Graph<T>, decision: &RoutingDecision<T>, probs: Var) -> Result<Var> {
    let n = decision.n_experts;
    let denom = (decision.n_tokens() * decision.k()) as f64;
    if denom == 0.0 {
        return Err(Error::Contract("aux_loss over an empty batch".into()));
    }
    let f: Vec<T> = decision
        .assignment_counts()
        .into_iter()
        .map(|c| T::lit(c as f64 / denom))
        .collect();
    let p = g.mean_axis(probs, 0)?;
    let f = g.constant(Tensor::from_vec(&[1, n], f)?);
    let fp = g.mul(p, f)?;
    let s = g.sum(fp);
    Ok(g.scale(s, T::lit(n as f64)))
}

/// Standard (modality-blind) MoE layer with optional shared experts.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub config: MoeLayerConfig,
    pub router: Router,
    pub experts: Vec<ExpertFFN>,
    pub shared: Vec<ExpertFFN>,
}

/// Forward result of a layer: output plus per-router routing artifacts.
#[derive(Debug, Clone)]
pub struct LayerOutput<T> {
    pub output: Var,
    pub routes: Vec<GroupRoute<T>>,
}

/// Routing artifacts of one router inside a layer.
#[derive(Debug, Clone)]
pub struct GroupRoute<T> {
    pub group: String,
    /// Rows of the layer input handled by this router.
    pub rows: Vec<usize>,
    /// Original expert index of each local expert.
    pub index_map: Vec<usize>,
    pub routed: Routed<T>,
}

impl MoeLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &MoeLayerConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let group = ParamGroup::Understanding;
        let router = Router::init(store, &format!("{prefix}.router"), group, config.d_model, config.n_experts, rng);
        let experts = (0..config.n_experts)
            .map(|i| ExpertFFN::init(store, &format!("{prefix}.expert{i}"), group, config.d_model, config.d_ff, rng))
            .collect();
        let shared = (0..config.n_shared)
            .map(|i| ExpertFFN::init(store, &format!("{prefix}.shared{i}"), group, config.d_model, config.d_ff, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            router,
            experts,
            shared,
        })
    }

    /// Routes, applies capacity (when `capacity` is set) and combines.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        capacity: bool,
        top_k: usize,
    ) -> Result<LayerOutput<T>> {
        let w = g.param(store, self.router.w);
        let mut routed = route(g, w, tokens, top_k)?;
        if capacity {
            routed.decision = apply_capacity(&routed.decision, self.config.n_experts, self.config.capacity_factor);
        }
        let output = moe_forward(g, store, &self.experts, &self.shared, &routed.decision, routed.gates, tokens)?;
        let rows = (0..routed.decision.n_tokens()).collect();
        Ok(LayerOutput {
            output,
            routes: vec![GroupRoute {
                group: "all".into(),
                rows,
                index_map: (0..self.config.n_experts).collect(),
                routed,
            }],
        })
    }

    /// Record names in checkpoint order: router, experts, shared experts.
    pub fn record_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.router.w];
        for e in self.experts.iter().chain(&self.shared) {
            ids.push(e.w1);
            ids.push(e.w2);
        }
        ids
    }

    pub fn save<T: Scalar>(&self, store: &ParamStore<T>, path: &Path) -> Result<()> {
        let ids = self.record_ids();
        let ck = Checkpoint {
            manifest: Manifest {
                kind: "moe_layer".into(),
                meta: serde_json::to_value(&self.config)?,
                records: ids.iter().map(|&i| store.param(i).name.clone()).collect(),
            },
            tensors: ids.iter().map(|&i| store.tensor(i).clone()).collect(),
        };
        ck.save(path)
    }

    /// Loads a layer checkpoint into a fresh store under `prefix`.
    pub fn load<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, path: &Path) -> Result<Self> {
        let ck = Checkpoint::<T>::load(path)?;
        if ck.manifest.kind != "moe_layer" {
            return Err(Error::Parse(format!("expected a moe_layer checkpoint, got {}", ck.manifest.kind)));
        }
        let config: MoeLayerConfig = serde_json::from_value(ck.manifest.meta.clone())?;
        let mut rng = Rng::new(0);
        let layer = Self::init(store, prefix, &config, &mut rng)?;
        let ids = layer.record_ids();
        if ids.len() != ck.tensors.len() {
            return Err(Error::Parse("record count does not match layer config".into()));
        }
        for (id, t) in ids.into_iter().zip(ck.tensors) {
            store.set(id, t)?;
        }
        Ok(layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision_from(ids: Vec<Vec<usize>>, n: usize) -> RoutingDecision<f64> {
        let t = ids.len();
        let k = ids[0].len();
        RoutingDecision {
            n_experts: n,
            gates: vec![vec![1.0 / k as f64; k]; t],
            dropped: vec![vec![false; k]; t],
            raw_probs: vec![vec![1.0 / n as f64; n]; t],
            expert_ids: ids,
        }
    }

    #[test]
    fn k1_gate_is_one_for_aligned_token() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = g.constant(Tensor::from_f64(&[1, 2], &[3.0, 0.5]).unwrap());
        let r = route(&mut g, w, x, 1).unwrap();
        assert_eq!(r.decision.expert_ids, vec![vec![0]]);
        assert_eq!(r.decision.gates, vec![vec![1.0]]);
    }

    #[test]
    fn equal_logits_tie_break_to_low_indices() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::<f64>::zeros(&[3, 4]));
        let x = g.constant(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let r = route(&mut g, w, x, 2).unwrap();
        assert_eq!(r.decision.expert_ids, vec![vec![0, 1]]);
        assert_eq!(r.decision.gates, vec![vec![0.5, 0.5]]);
        assert!(matches!(route(&mut g, w, x, 5), Err(Error::Config(_))));
    }

    #[test]
    fn capacity_drops_overflow_in_token_order() {
        let d = decision_from(vec![vec![0]; 4], 2);
        let c = apply_capacity(&d, 2, 1.0);
        assert_eq!(c.dropped, vec![vec![false], vec![false], vec![true], vec![true]]);
        assert_eq!(capacity_rate(&c), 0.5);
        let c = apply_capacity(&d, 2, 2.0);
        assert_eq!(capacity_rate(&c), 1.0);
    }

    #[test]
    fn uniform_routing_has_no_drops() {
        let d = decision_from(vec![vec![0], vec![1], vec![2], vec![3]], 4);
        assert_eq!(capacity_rate(&apply_capacity(&d, 4, 1.0)), 1.0);
    }

    #[test]
    fn capacity_rate_ratio() {
        let mut d = decision_from(vec![vec![0, 1]; 4], 2);
        d.dropped[2] = vec![true, false];
        d.dropped[3] = vec![false, true];
        assert_eq!(capacity_rate(&d), 0.75);
    }

    #[test]
    fn aux_loss_uniform_and_collapsed() {
        let mut g = Graph::new();
        let d = decision_from(vec![vec![0], vec![1], vec![2], vec![3]], 4);
        let p = g.constant(Tensor::full(&[4, 4], 0.25));
        let l = aux_loss(&mut g, &d, p).unwrap();
        assert_eq!(g.item(l), 1.0);

        let mut d = decision_from(vec![vec![0]; 3], 4);
        d.raw_probs = vec![vec![1.0, 0.0, 0.0, 0.0]; 3];
        let mut probs = Tensor::zeros(&[3, 4]);
        for t in 0..3 {
            probs.data_mut()[t * 4] = 1.0;
        }
        let p = g.constant(probs);
        let l = aux_loss(&mut g, &d, p).unwrap();
        assert_eq!(g.item(l), 4.0);
    }

    #[test]
    fn all_dropped_gives_shared_only() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(3);
        let cfg = MoeLayerConfig {
            n_experts: 2,
            top_k: 1,
            d_model: 3,
            d_ff: 4,
            n_shared: 1,
            capacity_factor: 1.0,
        };
        let layer = MoeLayer::init(&mut store, "l", &cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 3], 1.0, &mut rng));
        let w = g.param(&store, layer.router.w);
        let mut r = route(&mut g, w, x, 1).unwrap();
        r.decision.dropped = vec![vec![true]; 2];
        let y = moe_forward(&mut g, &store, &layer.experts, &layer.shared, &r.decision, r.gates, x).unwrap();
        let s = shared_sum(&mut g, &store, &layer.shared, x).unwrap().unwrap();
        assert_eq!(g.value(y), g.value(s));
    }

    #[test]
    fn layer_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layer.ckpt");
        let mut store = ParamStore::<f64>::new();
        let layer = MoeLayer::init(&mut store, "l0", &MoeLayerConfig::default(), &mut Rng::new(9)).unwrap();
        layer.save(&store, &path).unwrap();
        let ck = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(ck.manifest.records[0], "l0.router");
        assert_eq!(ck.manifest.records[1], "l0.expert0.w1");
        assert_eq!(ck.manifest.records.last().unwrap(), "l0.shared0.w2");

        let mut store2 = ParamStore::<f64>::new();
        let back = MoeLayer::load(&mut store2, "l0", &path).unwrap();
        for (a, b) in layer.record_ids().into_iter().zip(back.record_ids()) {
            assert_eq!(store.tensor(a).data(), store2.tensor(b).data());
        }
    }
}
