//! Invariant suite behind `symoe check`, plus the finite-difference
//! gradient checker it uses.

use std::fmt;

use crate::arch::{build_model, probe_shared_only, ArchitectureMode, ForwardOptions, LayerOptions, Model, ModelConfig, ParamRole, ShieldState, SymbioticLayer};
use crate::data::{Batch, MixtureConfig, Schedule, Task, World};
use crate::disentangle::{
    partition_experts, profile_activations, slice_router, ActivationProfile, ModalityTag, PartitionOptions, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{accumulate_grads, batch_loss, LossWeights};
use crate::metrics::{parse_metrics, MetricsRecord, RunManifest};
use crate::moe::{apply_capacity, aux_loss, capacity_rate, moe_forward, route, MoeLayer, MoeLayerConfig};
use crate::optim::{GroupLrs, Optimizer, OptimizerConfig};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{arms, Trainer, TrainConfig};

/// Largest finite-difference disagreement found by [`gradcheck`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradReport {
    /// Max relative error over elements whose gradient is not near zero.
    pub max_rel: f64,
    /// Max absolute error over elements whose gradient is near zero.
    pub max_abs: f64,
    pub n_checked: usize,
}

impl GradReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel < rel_tol && self.max_abs < abs_tol
    }

    pub fn merge(self, o: GradReport) -> GradReport {
        GradReport {
            max_rel: self.max_rel.max(o.max_rel),
            max_abs: self.max_abs.max(o.max_abs),
            n_checked: self.n_checked + o.n_checked,
        }
    }
}

const NEAR_ZERO: f64 = 1e-3;

/// Reduces `out` to a scalar through a fixed pseudo-random projection so
/// that every output element contributes a distinct weight.
fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = Rng::new(0x9e37_79b9 ^ n as u64);
    let w: Vec<f64> = (0..n).map(|_| rng.uniform() * 2.0 - 1.0).collect();
    let w = g.constant(Tensor::from_vec(&shape, w)?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Compares reverse-mode gradients of every parameter in `store` with
/// central differences of step `eps`.
pub fn gradcheck(
    store: &ParamStore<f64>,
    f: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    eps: f64,
) -> Result<GradReport> {
    gradcheck_scaled(store, f, eps, 1.0)
}

/// As [`gradcheck`], against `factor` times the numerical derivative
/// (for nodes that rescale their backward pass on purpose).
pub fn gradcheck_scaled(
    store: &ParamStore<f64>,
    f: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    eps: f64,
    factor: f64,
) -> Result<GradReport> {
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let l = project(&mut g, out)?;
        Ok(g.item(l))
    };
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let l = project(&mut g, out)?;
    g.backward(l)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
    for &(id, v) in g.bound_params() {
        if let Some(gr) = g.grad(v) {
            analytic[id.index()].copy_from_slice(gr);
        }
    }
    let mut report = GradReport::default();
    let mut work = store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for j in 0..store.tensor(id).len() {
            let x0 = store.tensor(id).data()[j];
            work.tensor_mut(id).data_mut()[j] = x0 + eps;
            let up = eval(&work)?;
            work.tensor_mut(id).data_mut()[j] = x0 - eps;
            let down = eval(&work)?;
            work.tensor_mut(id).data_mut()[j] = x0;
            let num = factor * (up - down) / (2.0 * eps);
            let a = analytic[id.index()][j];
            let scale = a.abs().max(num.abs());
            if scale < NEAR_ZERO {
                report.max_abs = report.max_abs.max((a - num).abs());
            } else {
                report.max_rel = report.max_rel.max((a - num).abs() / scale);
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}

/// Store holding uniform `[-2, 2]` tensors of the given shapes.
pub fn random_inputs(shapes: &[&[usize]], rng: &mut Rng) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, sh)| s.add(format!("x{i}"), ParamGroup::Understanding, Tensor::uniform(sh, -2.0, 2.0, rng)))
        .collect();
    (s, ids)
}

type Prim = fn(&mut Graph<f64>, &[Var], &mut Rng) -> Result<Var>;

/// Every differentiable primitive with the input shapes used to check it.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Prim, f64)> {
    fn v(shapes: &[&[usize]]) -> Vec<Vec<usize>> {
        shapes.iter().map(|s| s.to_vec()).collect()
    }
    vec![
        ("matmul", v(&[&[4, 3], &[3, 2]]), |g, x, _| g.matmul(x[0], x[1]), 1.0),
        ("transpose", v(&[&[3, 4]]), |g, x, _| g.transpose(x[0]), 1.0),
        ("add", v(&[&[3, 4], &[3, 4]]), |g, x, _| g.add(x[0], x[1]), 1.0),
        ("sub", v(&[&[3, 4], &[3, 4]]), |g, x, _| g.sub(x[0], x[1]), 1.0),
        ("mul", v(&[&[3, 4], &[3, 4]]), |g, x, _| g.mul(x[0], x[1]), 1.0),
        ("scale", v(&[&[3, 4]]), |g, x, _| Ok(g.scale(x[0], -1.7)), 1.0),
        ("add_const", v(&[&[2, 3]]), |g, x, _| g.add_const(x[0], &[0.5, -1.0, 2.0, 0.0, 1.0, 3.0]), 1.0),
        ("silu", v(&[&[3, 4]]), |g, x, _| Ok(g.silu(x[0])), 1.0),
        ("softmax_rows", v(&[&[3, 5]]), |g, x, _| g.softmax(x[0], 1), 1.0),
        ("softmax_cols", v(&[&[3, 5]]), |g, x, _| g.softmax(x[0], 0), 1.0),
        ("log_softmax", v(&[&[3, 5]]), |g, x, _| g.log_softmax(x[0], 1), 1.0),
        ("cross_entropy", v(&[&[4, 6]]), |g, x, r| {
            let t: Vec<usize> = (0..4).map(|_| r.below(6)).collect();
            g.cross_entropy(x[0], &t)
        }, 1.0),
        ("mse", v(&[&[3, 4], &[3, 4]]), |g, x, _| g.mse(x[0], x[1]), 1.0),
        ("sum", v(&[&[3, 4]]), |g, x, _| Ok(g.sum(x[0])), 1.0),
        ("mean", v(&[&[3, 4]]), |g, x, _| Ok(g.mean(x[0])), 1.0),
        ("sum_axis0", v(&[&[3, 4]]), |g, x, _| g.sum_axis(x[0], 0), 1.0),
        ("sum_axis1", v(&[&[3, 4]]), |g, x, _| g.sum_axis(x[0], 1), 1.0),
        ("mean_axis", v(&[&[3, 4]]), |g, x, _| g.mean_axis(x[0], 0), 1.0),
        ("gather", v(&[&[3, 4]]), |g, x, _| g.gather(x[0], &[0, 5, 5, 11, 2, 7], &[3, 2]), 1.0),
        ("top_k", v(&[&[4, 6]]), |g, x, _| Ok(g.top_k(x[0], 2)?.1), 1.0),
        ("concat_rows", v(&[&[2, 3], &[3, 3]]), |g, x, _| g.concat(&[x[0], x[1]], 0), 1.0),
        ("concat_cols", v(&[&[2, 3], &[2, 2]]), |g, x, _| g.concat(&[x[0], x[1]], 1), 1.0),
        ("slice", v(&[&[4, 5]]), |g, x, _| g.slice(x[0], 1, 1, 3), 1.0),
        ("gather_rows", v(&[&[4, 3]]), |g, x, _| g.gather_rows(x[0], &[3, 0, 3]), 1.0),
        ("embedding", v(&[&[5, 3]]), |g, x, _| g.embedding(x[0], &[4, 1, 1, 0]), 1.0),
        ("scatter_add_rows", v(&[&[3, 2]]), |g, x, _| g.scatter_add_rows(x[0], &[2, 0, 2], 4), 1.0),
        ("mul_rows", v(&[&[3, 4], &[3, 1]]), |g, x, _| g.mul_rows(x[0], x[1]), 1.0),
        ("rms_norm", v(&[&[3, 5]]), |g, x, _| g.rms_norm(x[0]), 1.0),
        ("stop_gradient", v(&[&[2, 3]]), |g, x, _| Ok(g.stop_gradient(x[0])), 0.0),
        ("scale_gradient", v(&[&[2, 3]]), |g, x, _| Ok(g.scale_gradient(x[0], 0.3)), 0.3),
    ]
}

/// Runs one primitive case on inputs drawn from `seed`.
pub fn check_primitive(shapes: &[Vec<usize>], f: Prim, factor: f64, seed: u64) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let sh: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let (store, ids) = random_inputs(&sh, &mut rng);
    let aux_seed = rng.next_u64();
    gradcheck_scaled(
        &store,
        &|g, s| {
            let xs: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            f(g, &xs, &mut Rng::new(aux_seed))
        },
        1e-5,
        factor,
    )
}

/// Small symbiotic layer (8 experts, 6/2 split) with its input rows.
pub fn small_symbiotic(seed: u64, n_tokens: usize) -> Result<(SymbioticLayer, ParamStore<f64>, ParamId, Vec<ModalityTag>)> {
    let cfg = MoeLayerConfig {
        n_experts: 8,
        top_k: 2,
        d_model: 4,
        d_ff: 6,
        n_shared: 1,
        capacity_factor: 1.0,
    };
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let spec = PartitionSpec::bimodal(8, vec![0, 1, 3, 4, 6, 7])?;
    let layer = SymbioticLayer::init(&mut store, "l", &cfg, &spec, true, &mut rng)?;
    let x = store.add("x", ParamGroup::Understanding, Tensor::uniform(&[n_tokens, 4], -2.0, 2.0, &mut rng));
    let tags = (0..n_tokens).map(|_| ModalityTag::ALL[rng.below(3)]).collect();
    Ok((layer, store, x, tags))
}

/// Finite-difference check of the composed grouped layer.
pub fn check_symbiotic_layer(seed: u64) -> Result<GradReport> {
    let (layer, store, x, tags) = small_symbiotic(seed, 10)?;
    let opts = LayerOptions {
        capacity: true,
        routed: true,
        shared: true,
    };
    gradcheck(
        &store,
        &|g, s| {
            let xv = g.param(s, x);
            Ok(layer.forward(g, s, xv, &tags, &opts)?.output)
        },
        1e-5,
    )
}

/// Gradient of `lambda_img * L_img` alone with respect to every shared
/// expert weight of `model` on `batch`, under `shield`.
pub fn shared_img_grads(model: &Model<f64>, batch: &Batch, shield: Option<ShieldState>, lambda_img: f64) -> Result<Vec<(String, Vec<f64>)>> {
    if batch.rows_of(ModalityTag::Vae).is_empty() {
        return Err(Error::Usage("batch has no VAE rows".into()));
    }
    let weights = LossWeights {
        lambda_disc: 0.0,
        lambda_aux: 0.0,
        lambda_img,
    };
    let mut m = model.clone();
    let mut g = Graph::new();
    let bl = batch_loss(&m, &mut g, batch, &ForwardOptions::default(), &weights)?;
    accumulate_grads(&mut m, &mut g, &bl, &weights, shield)?;
    Ok(m.ids_with(|r| *r == ParamRole::Shared)
        .into_iter()
        .map(|id| {
            let p = m.store.param(id);
            let grad = p.tensor.grad().map_or_else(|| vec![0.0; p.tensor.len()], <[f64]>::to_vec);
            (p.name.clone(), grad)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}/{}: {}", self.status, self.module, self.name, self.detail)
    }
}

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, ok: impl Into<String>, bad: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(bad.into())
    }
}

fn run(f: impl FnOnce() -> Result<Outcome>) -> Outcome {
    f().unwrap_or_else(|e| Err(format!("error: {e}")))
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn bimodal_specs(n_layers: usize, n: usize, n_und: usize) -> Result<Vec<PartitionSpec>> {
    (0..n_layers).map(|_| PartitionSpec::bimodal(n, (0..n_und).collect())).collect()
}

fn small_model(mode: ArchitectureMode, seed: u64) -> Result<Model<f64>> {
    let cfg = ModelConfig::default();
    let specs = bimodal_specs(cfg.n_layers, cfg.n_experts, 12)?;
    build_model(&cfg, mode, mode.is_grouped().then_some(specs.as_slice()), None, seed)
}

fn world() -> Result<World> {
    World::new(&MixtureConfig::default())
}

// autograd-core

fn finite_differences(seed: u64) -> Outcome {
    run(|| {
        let mut worst = GradReport::default();
        for (name, shapes, f, factor) in primitive_cases() {
            for s in 0..3 {
                let r = check_primitive(&shapes, f, factor, seed.wrapping_add(s))?;
                if !r.passes(1e-5, 1e-8) {
                    return Ok(Err(format!("{name}: rel {:.2e} abs {:.2e}", r.max_rel, r.max_abs)));
                }
                worst = worst.merge(r);
            }
        }
        Ok(Ok(format!(
            "{} primitives, max rel {:.1e}, max abs {:.1e}",
            primitive_cases().len(),
            worst.max_rel,
            worst.max_abs
        )))
    })
}

fn forward_backward(seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (layer, store, x, tags) = small_symbiotic(seed, 12)?;
    let mut g = Graph::new();
    let xv = g.param(&store, x);
    let opts = LayerOptions {
        capacity: true,
        routed: true,
        shared: true,
    };
    let y = layer.forward(&mut g, &store, xv, &tags, &opts)?.output;
    let l = project(&mut g, y)?;
    g.backward(l)?;
    let mut grads = Vec::new();
    for &(_, v) in g.bound_params() {
        grads.extend_from_slice(g.grad(v).unwrap_or(&[]));
    }
    Ok((g.value(y).to_vec(), grads))
}

fn autograd_determinism(seed: u64) -> Outcome {
    run(|| {
        let a = forward_backward(seed)?;
        let b = forward_backward(seed)?;
        Ok(ensure(
            bits_equal(&a.0, &b.0) && bits_equal(&a.1, &b.1),
            "forward values and gradients bitwise equal",
            "repeated run differs",
        ))
    })
}

fn shield_nodes_forward(seed: u64) -> Outcome {
    run(|| {
        let mut rng = Rng::new(seed);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::uniform(&[5, 7], -2.0, 2.0, &mut rng));
        let s = g.stop_gradient(x);
        let c = g.scale_gradient(x, 0.1);
        let z = g.scale_gradient(x, 0.0);
        let xv = g.value(x).to_vec();
        Ok(ensure(
            bits_equal(&xv, g.value(s)) && bits_equal(&xv, g.value(c)) && bits_equal(&xv, g.value(z)),
            "stop_gradient and scale_gradient are bitwise identities forward",
            "forward value changed",
        ))
    })
}

fn accumulation_additive(seed: u64) -> Outcome {
    run(|| {
        let mut rng = Rng::new(seed);
        let (store, ids) = random_inputs(&[&[3, 4], &[4, 2]], &mut rng);
        let mut g = Graph::<f64>::new();
        let a = g.param(&store, ids[0]);
        let b = g.param(&store, ids[1]);
        let m = g.matmul(a, b)?;
        let s = g.silu(m);
        let l = g.sum(s);
        g.backward(l)?;
        let once: Vec<f64> = g.grad(a).unwrap_or(&[]).to_vec();
        g.backward(l)?;
        let twice = g.grad(a).unwrap_or(&[]);
        let doubled: Vec<f64> = once.iter().map(|x| 2.0 * x).collect();
        Ok(ensure(
            !once.is_empty() && bits_equal(&doubled, twice),
            "second backward doubles every gradient exactly",
            "accumulation is not additive",
        ))
    })
}

// sparse-moe

fn random_decision(seed: u64, t: usize, n: usize, k: usize) -> Result<(crate::moe::RoutingDecision<f64>, Vec<f64>)> {
    let mut rng = Rng::new(seed);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::randn(&[t, 4], 1.0, &mut rng));
    let w = g.leaf(Tensor::randn(&[4, n], 1.0, &mut rng));
    let r = route(&mut g, w, x, k)?;
    let logits = {
        let xv = g.value(x).to_vec();
        let wv = g.value(w).to_vec();
        (0..t)
            .flat_map(|i| {
                (0..n)
                    .map(|j| (0..4).map(|c| xv[i * 4 + c] * wv[c * n + j]).sum::<f64>())
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    Ok((r.decision, logits))
}

fn gate_normalization(seed: u64) -> Outcome {
    run(|| {
        let (d, _) = random_decision(seed, 32, 8, 3)?;
        let worst = d
            .gates
            .iter()
            .map(|g| (g.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        Ok(ensure(worst <= 1e-12, format!("max |sum - 1| = {worst:.1e}"), format!("gate sum off by {worst:.1e}")))
    })
}

fn gate_rank_agreement(seed: u64) -> Outcome {
    run(|| {
        let (d, logits) = random_decision(seed, 32, 8, 3)?;
        for (t, (ids, gates)) in d.expert_ids.iter().zip(&d.gates).enumerate() {
            for s in 1..ids.len() {
                let (l0, l1) = (logits[t * 8 + ids[s - 1]], logits[t * 8 + ids[s]]);
                if l0 < l1 || gates[s - 1] < gates[s] {
                    return Ok(Err(format!("token {t} slot {s} out of order")));
                }
            }
        }
        Ok(Ok("gates descend with selected logits".into()))
    })
}

fn aux_loss_bounds(seed: u64) -> Outcome {
    run(|| {
        let (d, _) = random_decision(seed, 24, 6, 2)?;
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[24, 6], &d.raw_probs.concat())?);
        let a = aux_loss(&mut g, &d, p)?;
        let a = g.item(a);
        // Uniform probabilities with each expert chosen equally often.
        let t = 8;
        let uni = crate::moe::RoutingDecision {
            n_experts: 4,
            expert_ids: (0..t).map(|i| vec![i % 4, (i + 1) % 4]).collect(),
            gates: vec![vec![0.5, 0.5]; t],
            dropped: vec![vec![false; 2]; t],
            raw_probs: vec![vec![0.25; 4]; t],
        };
        let pu = g.constant(Tensor::full(&[t, 4], 0.25));
        let u = aux_loss(&mut g, &uni, pu)?;
        let u = g.item(u);
        Ok(ensure(
            a >= 0.0 && u == 1.0,
            format!("random {a:.4} >= 0, uniform = {u}"),
            format!("random {a}, uniform {u}"),
        ))
    })
}

fn gate_linearity(seed: u64) -> Outcome {
    run(|| {
        let cfg = MoeLayerConfig {
            n_experts: 6,
            top_k: 2,
            d_model: 4,
            d_ff: 5,
            n_shared: 1,
            capacity_factor: 1.0,
        };
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let layer = MoeLayer::init(&mut store, "l", &cfg, &mut rng)?;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn(&[10, 4], 1.0, &mut rng));
        let w = g.param(&store, layer.router.w);
        let r = route(&mut g, w, x, 2)?;
        let d = apply_capacity(&r.decision, 6, 1.0);
        let double = g.scale(r.gates, 2.0);
        let y1 = moe_forward(&mut g, &store, &layer.experts, &layer.shared, &d, r.gates, x)?;
        let y2 = moe_forward(&mut g, &store, &layer.experts, &layer.shared, &d, double, x)?;
        let sv = crate::moe::shared_sum(&mut g, &store, &layer.shared, x)?.expect("one shared expert");
        let sh = g.value(sv).to_vec();
        let (a, b) = (g.value(y1), g.value(y2));
        let worst = (0..a.len())
            .map(|i| ((b[i] - sh[i]) - 2.0 * (a[i] - sh[i])).abs())
            .fold(0.0, f64::max);
        Ok(ensure(worst < 1e-12, format!("max deviation {worst:.1e}"), format!("deviation {worst:.1e}")))
    })
}

fn capacity_unconstrained(seed: u64) -> Outcome {
    run(|| {
        let (d, _) = random_decision(seed, 20, 5, 2)?;
        // C = ceil(cf * 40 / 5) >= 20 once cf >= 2.5.
        let full = apply_capacity(&d, 5, 2.5);
        let rate = capacity_rate(&full);
        Ok(ensure(rate == 1.0, "C >= T serves every assignment", format!("rate {rate}")))
    })
}

// disentangle

fn rank_preservation(seed: u64) -> Outcome {
    run(|| {
        let mut rng = Rng::new(seed);
        let parent = Tensor::<f64>::randn(&[6, 16], 1.0, &mut rng);
        let mut ids: Vec<usize> = (0..16).collect();
        for i in (1..16).rev() {
            ids.swap(i, rng.below(i + 1));
        }
        let mut und = ids[..12].to_vec();
        und.sort_unstable();
        let spec = PartitionSpec::bimodal(16, und)?;
        let sliced = slice_router(&parent, &spec)?;
        for (r, map) in sliced.routers.iter().zip(&sliced.index_map) {
            for (j, &orig) in map.iter().enumerate() {
                for row in 0..6 {
                    if r.at2(row, j).to_bits() != parent.at2(row, orig).to_bits() {
                        return Ok(Err(format!("column {j} differs from parent column {orig}")));
                    }
                }
            }
        }
        Ok(Ok("sliced columns equal parent columns bitwise".into()))
    })
}

fn zero_cold_start(seed: u64) -> Outcome {
    run(|| {
        let cfg = MoeLayerConfig {
            d_model: 8,
            d_ff: 12,
            ..MoeLayerConfig::default()
        };
        let mut rng = Rng::new(seed);
        let mut pstore = ParamStore::<f64>::new();
        let parent = MoeLayer::init(&mut pstore, "p", &cfg, &mut rng)?;
        let spec = PartitionSpec::bimodal(16, (0..12).collect())?;
        let mut cstore = ParamStore::new();
        let child = SymbioticLayer::inherit(&mut cstore, "c", &parent, &pstore, &spec, true)?;
        let n = 200;
        let x = Tensor::randn(&[n, 8], 1.0, &mut rng);
        let tags: Vec<ModalityTag> = (0..n).map(|_| ModalityTag::ALL[rng.below(3)]).collect();
        // Separate graphs: parameter ids of the two stores overlap.
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let po = parent.forward(&mut g, &pstore, xv, false, 2)?;
        let mut gc = Graph::new();
        let xc = gc.constant(x);
        let co = child.forward(
            &mut gc,
            &cstore,
            xc,
            &tags,
            &LayerOptions {
                capacity: false,
                routed: true,
                shared: true,
            },
        )?;
        let (pv, cv) = (g.value(po.output).to_vec(), gc.value(co.output).to_vec());
        let mut checked = 0;
        for t in 0..n {
            let group = if tags[t] == ModalityTag::Vae { &spec.gen_ids } else { &spec.und_ids };
            if po.routes[0].routed.decision.expert_ids[t].iter().all(|e| group.contains(e)) {
                let worst = (0..8).map(|c| (pv[t * 8 + c] - cv[t * 8 + c]).abs()).fold(0.0, f64::max);
                if worst > 1e-12 {
                    return Ok(Err(format!("token {t} differs by {worst:.1e}")));
                }
                checked += 1;
            }
        }
        Ok(Ok(format!("{checked} of {n} in-group tokens match the parent")))
    })
}

fn partition_validity(seed: u64) -> Outcome {
    run(|| {
        let mut rng = Rng::new(seed);
        let mut p = ActivationProfile::new(3, 16, 2);
        for l in 0..3 {
            for m in [ModalityTag::Text, ModalityTag::Vit] {
                for _ in 0..50 {
                    p.record(l, m, rng.below(16));
                }
            }
        }
        p.add_tokens(ModalityTag::Text, 25);
        p.add_tokens(ModalityTag::Vit, 25);
        let specs = partition_experts(&p, &PartitionOptions::bimodal(12))?;
        for s in &specs {
            s.validate()?;
            let mut all: Vec<usize> = s.und_ids.iter().chain(&s.gen_ids).copied().collect();
            all.sort_unstable();
            if all != (0..16).collect::<Vec<_>>() {
                return Ok(Err("index sets do not cover 0..N".into()));
            }
        }
        Ok(Ok(format!("{} layer specs disjoint and complete", specs.len())))
    })
}

fn profile_conservation(seed: u64) -> Outcome {
    run(|| {
        let w = world()?;
        let m = small_model(ArchitectureMode::Standard, seed)?;
        let batches = [w.generate(Task::Lm, seed, 0), w.generate(Task::Mmu, seed, 0), w.generate(Task::T2i, seed, 0)];
        let p = profile_activations(&m, &batches, 2)?;
        for l in 0..p.n_layers() {
            for tag in ModalityTag::ALL {
                let sum: u64 = p.layer_counts(l, tag).iter().sum();
                if sum != p.total_tokens[tag.index()] * 2 {
                    return Ok(Err(format!("layer {l} {tag}: {sum} != tokens x k")));
                }
            }
        }
        Ok(Ok("selection counts sum to tokens x k per layer and modality".into()))
    })
}

// symbiotic-arch

fn modality_isolation(seed: u64) -> Outcome {
    run(|| {
        let m = small_model(ArchitectureMode::Symbiotic, seed)?;
        let w = world()?;
        let b = w.generate(Task::Lm, seed, 0);
        let mut g = Graph::new();
        let out = m.forward(&mut g, &b, &ForwardOptions::default())?;
        let (rows, targets) = b.discrete_targets();
        let logits = m.logits(&mut g, &out, &rows)?;
        let l = g.cross_entropy(logits, &targets)?;
        g.backward(l)?;
        let mut store = m.store.clone();
        store.zero_grad();
        store.accumulate(&g);
        for (id, role) in m.param_roles() {
            let touched = store.tensor(id).grad().is_some_and(|gr| gr.iter().any(|&x| x != 0.0));
            let gen = matches!(&role, ParamRole::Expert { group } | ParamRole::Router { group } if group == "gen");
            if touched && gen {
                return Ok(Err(format!("{} received a text gradient", store.param(id).name)));
            }
        }
        Ok(Ok("text-only loss leaves generation experts and routers untouched".into()))
    })
}

fn shield_scaling(seed: u64) -> Outcome {
    run(|| {
        let m = small_model(ArchitectureMode::Symbiotic, seed)?;
        let b = world()?.generate(Task::T2i, seed, 0);
        let warm = shared_img_grads(&m, &b, Some(ShieldState::new(0, 50, 0.1)), 1.0)?;
        let after = shared_img_grads(&m, &b, Some(ShieldState::new(50, 50, 0.1)), 1.0)?;
        let full = shared_img_grads(&m, &b, None, 1.0)?;
        if warm.iter().any(|(_, g)| g.iter().any(|&x| x != 0.0)) {
            return Ok(Err("shared gradient nonzero during warmup".into()));
        }
        let mut worst: f64 = 0.0;
        for ((_, a), (_, f)) in after.iter().zip(&full) {
            for (x, y) in a.iter().zip(f) {
                let want = 0.1 * y;
                if want != 0.0 {
                    worst = worst.max((x - want).abs() / want.abs());
                } else if *x != 0.0 {
                    return Ok(Err("scaled gradient nonzero where unscaled is zero".into()));
                }
            }
        }
        Ok(ensure(worst < 1e-12, format!("zero in warmup, 0.1x after (rel {worst:.1e})"), format!("rel error {worst:.1e}")))
    })
}

fn shield_forward_invariance(seed: u64) -> Outcome {
    run(|| {
        let m = small_model(ArchitectureMode::Symbiotic, seed)?;
        let b = world()?.generate(Task::T2iLong, seed, 0);
        let weights = LossWeights::default();
        let forward = |shield: Option<ShieldState>| -> Result<Vec<f64>> {
            let mut m = m.clone();
            let mut g = Graph::new();
            let bl = batch_loss(&m, &mut g, &b, &ForwardOptions::default(), &weights)?;
            accumulate_grads(&mut m, &mut g, &bl, &weights, shield)?;
            let mut v = g.value(bl.output.hidden).to_vec();
            v.push(g.item(bl.total));
            Ok(v)
        };
        let base = forward(None)?;
        let a = forward(Some(ShieldState::new(0, 50, 0.1)))?;
        let c = forward(Some(ShieldState::new(80, 50, 0.1)))?;
        Ok(ensure(bits_equal(&base, &a) && bits_equal(&base, &c), "outputs and loss bitwise equal across shield states", "shield changed forward values"))
    })
}

/// Replaces every router and routed-expert weight with fresh noise.
pub fn randomize_routed(model: &mut Model<f64>, seed: u64) {
    let mut rng = Rng::new(seed);
    let ids = model.ids_with(|r| r.is_routed());
    for id in ids {
        let shape = model.store.tensor(id).shape().to_vec();
        let t = Tensor::randn(&shape, 1.0, &mut rng);
        model.store.set(id, t).expect("same shape");
    }
}

fn probe_locality(seed: u64) -> Outcome {
    run(|| {
        let mut m = small_model(ArchitectureMode::Symbiotic, seed)?;
        let b = world()?.generate(Task::Mmu, seed, 0);
        let probe = |m: &Model<f64>| -> Result<Vec<f64>> {
            let mut g = Graph::new();
            let o = probe_shared_only(m, &mut g, &b)?;
            Ok(g.value(o.hidden).to_vec())
        };
        let before = probe(&m)?;
        randomize_routed(&mut m, seed ^ 0xabcdef);
        let after = probe(&m)?;
        Ok(ensure(bits_equal(&before, &after), "probe output unchanged by routed weights", "probe depends on routed weights"))
    })
}

// training-harness

fn tiny_config(seed: u64, mode: ArchitectureMode) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        mode,
        total_steps: 6,
        warmup_steps: 3,
        eval_every: 3,
        imbalance_every: 3,
        eval_batches: 1,
        ..TrainConfig::default()
    };
    c.data.batch_seqs = 2;
    c
}

fn tiny_trainer(seed: u64, mode: ArchitectureMode) -> Result<Trainer<f64>> {
    let c = tiny_config(seed, mode);
    let m = small_model(mode, seed)?;
    Trainer::new(c, m)
}

fn records_json(records: &[MetricsRecord]) -> Result<Vec<String>> {
    records.iter().map(|r| Ok(serde_json::to_string(r)?)).collect()
}

fn training_determinism(seed: u64) -> Outcome {
    run(|| {
        let a = tiny_trainer(seed, ArchitectureMode::Symbiotic)?.run(None, None)?;
        let b = tiny_trainer(seed, ArchitectureMode::Symbiotic)?.run(None, None)?;
        Ok(ensure(
            records_json(&a)? == records_json(&b)?,
            format!("{} records identical byte for byte", a.len()),
            "metrics streams differ",
        ))
    })
}

fn group_coverage(seed: u64) -> Outcome {
    run(|| {
        for mode in [ArchitectureMode::Standard, ArchitectureMode::MoT, ArchitectureMode::Symbiotic] {
            small_model(mode, seed)?.check_param_groups()?;
        }
        Ok(Ok("every parameter in exactly one group, all modes".into()))
    })
}

fn shield_schedule(seed: u64) -> Outcome {
    run(|| {
        let m = small_model(ArchitectureMode::Symbiotic, seed)?;
        let w = world()?;
        for step in 0..3u64 {
            let b = w.generate(Task::T2iLong, seed, step);
            let grads = shared_img_grads(&m, &b, Some(ShieldState::new(step, 3, 0.1)), 1.0)?;
            if grads.iter().any(|(_, g)| g.iter().any(|&x| x != 0.0)) {
                return Ok(Err(format!("nonzero shared gradient from L_img at step {step}")));
            }
        }
        Ok(Ok("L_img alone leaves shared experts at exactly zero before warmup ends".into()))
    })
}

fn clip_contract(seed: u64) -> Outcome {
    run(|| {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::<f64>::new();
        for i in 0..4 {
            let id = store.add(format!("p{i}"), ParamGroup::Understanding, Tensor::zeros(&[5]));
            let gr: Vec<f64> = (0..5).map(|_| rng.normal() * 10.0).collect();
            store.tensor_mut(id).accumulate_grad(&gr);
        }
        let mut opt = Optimizer::new(OptimizerConfig::default(), &store);
        let s = opt.step(&mut store, &GroupLrs::uniform(1e-3))?;
        Ok(ensure(
            s.clipped_norm <= 1.0 + 1e-9,
            format!("raw norm {:.3} clipped to {:.12}", s.grad_norm, s.clipped_norm),
            format!("clipped norm {}", s.clipped_norm),
        ))
    })
}

// telemetry-cli

fn serialization_round_trip(seed: u64) -> Outcome {
    run(|| {
        let records = tiny_trainer(seed, ArchitectureMode::Symbiotic)?.run(None, None)?;
        let header = crate::metrics::MetricsHeader {
            schema: crate::metrics::METRICS_SCHEMA.into(),
            run: "check".into(),
            mode: "symbiotic".into(),
            seed,
        };
        let mut text = serde_json::to_string(&header)? + "\n";
        for r in &records {
            text += &serde_json::to_string(r)?;
            text.push('\n');
        }
        let (h, back) = parse_metrics(text.as_bytes())?;
        let manifest = RunManifest {
            schema: "symoe.run/1".into(),
            run: "check".into(),
            mode: "symbiotic".into(),
            seed,
            start_time: 0,
            config: serde_json::to_value(tiny_config(seed, ArchitectureMode::Symbiotic))?,
            artifacts: vec!["metrics.jsonl".into()],
        };
        let m2: RunManifest = serde_json::from_str(&serde_json::to_string(&manifest)?)?;
        Ok(ensure(
            h == header && back == records && m2 == manifest,
            format!("{} records, header and manifest round-trip", records.len()),
            "round trip lost information",
        ))
    })
}

fn identical_batch_streams(seed: u64) -> Outcome {
    run(|| {
        let mut base = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        base.compare.no_shield_arm = true;
        let w = world()?;
        let mut reference: Option<Vec<u64>> = None;
        for arm in arms(&base) {
            let mut sched = Schedule::new(arm.config.data.ratios);
            let digests: Vec<u64> = (0..40).map(|s| w.generate(sched.next_task(), arm.config.seed, s).digest()).collect();
            match &reference {
                None => reference = Some(digests),
                Some(r) if *r != digests => return Ok(Err(format!("arm {} sees a different stream", arm.name))),
                Some(_) => {}
            }
        }
        Ok(Ok("every arm draws bitwise-identical batches".into()))
    })
}

/// One named invariant.
pub struct Invariant {
    pub module: &'static str,
    pub name: &'static str,
    check: fn(u64) -> Outcome,
}

pub fn invariants() -> Vec<Invariant> {
    let i = |module, name, check| Invariant { module, name, check };
    vec![
        i("autograd-core", "finite_differences", finite_differences as fn(u64) -> Outcome),
        i("autograd-core", "determinism", autograd_determinism),
        i("autograd-core", "shield_nodes_forward_identity", shield_nodes_forward),
        i("autograd-core", "gradient_accumulation_additive", accumulation_additive),
        i("sparse-moe", "gate_normalization", gate_normalization),
        i("sparse-moe", "gate_rank_agreement", gate_rank_agreement),
        i("sparse-moe", "aux_loss_bounds", aux_loss_bounds),
        i("sparse-moe", "gate_linearity", gate_linearity),
        i("sparse-moe", "capacity_unconstrained", capacity_unconstrained),
        i("disentangle", "rank_preservation", rank_preservation),
        i("disentangle", "zero_cold_start", zero_cold_start),
        i("disentangle", "partition_validity", partition_validity),
        i("disentangle", "profile_conservation", profile_conservation),
        i("symbiotic-arch", "modality_isolation", modality_isolation),
        i("symbiotic-arch", "shield_exactness", shield_scaling),
        i("symbiotic-arch", "shield_forward_invariance", shield_forward_invariance),
        i("symbiotic-arch", "probe_locality", probe_locality),
        i("training-harness", "determinism", training_determinism),
        i("training-harness", "group_coverage", group_coverage),
        i("training-harness", "shield_schedule", shield_schedule),
        i("training-harness", "clip_contract", clip_contract),
        i("telemetry-cli", "serialization_round_trip", serialization_round_trip),
        i("telemetry-cli", "identical_batch_streams", identical_batch_streams),
    ]
}

/// Runs every invariant. The directional forgetting property needs a full
/// comparison; it runs only when `dynamics` carries its result.
pub fn run_checks(seed: u64, dynamics: Option<(f64, f64)>) -> Vec<CheckOutcome> {
    let mut out: Vec<CheckOutcome> = invariants()
        .into_iter()
        .map(|inv| {
            let (status, detail) = match (inv.check)(seed) {
                Ok(d) => (Status::Pass, d),
                Err(d) => (Status::Fail, d),
            };
            CheckOutcome {
                module: inv.module,
                name: inv.name,
                status,
                detail,
            }
        })
        .collect();
    let (status, detail) = match dynamics {
        None => (Status::Skip, "needs a full comparison (pass --dynamics <config>)".to_string()),
        Some((standard, symbiotic)) if standard > symbiotic => {
            (Status::Pass, format!("standard {standard:.4} > symbiotic {symbiotic:.4}"))
        }
        Some((standard, symbiotic)) => (Status::Fail, format!("standard {standard:.4} <= symbiotic {symbiotic:.4}")),
    };
    out.push(CheckOutcome {
        module: "training-harness",
        name: "directional_forgetting",
        status,
        detail,
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_catches_a_wrong_gradient() {
        // scale_gradient deliberately breaks the value/gradient pairing.
        let mut rng = Rng::new(1);
        let (store, ids) = random_inputs(&[&[2, 2]], &mut rng);
        let r = gradcheck(
            &store,
            &|g, s| {
                let x = g.param(s, ids[0]);
                Ok(g.scale_gradient(x, 0.5))
            },
            1e-5,
        )
        .unwrap();
        assert!(!r.passes(1e-5, 1e-8));
    }

    #[test]
    fn every_invariant_passes() {
        let failed: Vec<String> = run_checks(7, None)
            .iter()
            .filter(|o| o.status == Status::Fail)
            .map(ToString::to_string)
            .collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }
}
