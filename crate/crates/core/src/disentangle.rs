//! Expert role analysis and knowledge-inherited initialisation.
//!
//! Activation profiles count how often each expert is selected per
//! modality; partitions split experts into understanding and generation
//! groups per layer; router slicing and expert inheritance turn a dense
//! parent layer into grouped child layers without changing what the
//! routers prefer.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::{ForwardOptions, Model};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::moe::ExpertWeights;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityTag {
    Text,
    Vit,
    Vae,
}

impl ModalityTag {
    pub const ALL: [ModalityTag; 3] = [ModalityTag::Text, ModalityTag::Vit, ModalityTag::Vae];

    pub fn index(self) -> usize {
        match self {
            ModalityTag::Text => 0,
            ModalityTag::Vit => 1,
            ModalityTag::Vae => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityTag::Text => "text",
            ModalityTag::Vit => "vit",
            ModalityTag::Vae => "vae",
        }
    }
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-layer, per-expert, per-modality selection counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub n_experts: usize,
    pub k: usize,
    /// `counts[layer][modality][expert]`.
    pub counts: Vec<[Vec<u64>; 3]>,
    /// Tokens seen per modality (per layer, every layer sees all of them).
    pub total_tokens: [u64; 3],
}

impl ActivationProfile {
    pub fn new(n_layers: usize, n_experts: usize, k: usize) -> Self {
        Self {
            n_experts,
            k,
            counts: (0..n_layers)
                .map(|_| [vec![0; n_experts], vec![0; n_experts], vec![0; n_experts]])
                .collect(),
            total_tokens: [0; 3],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.counts.len()
    }

    pub fn layer_counts(&self, layer: usize, tag: ModalityTag) -> &[u64] {
        &self.counts[layer][tag.index()]
    }

    pub fn record(&mut self, layer: usize, tag: ModalityTag, expert: usize) {
        self.counts[layer][tag.index()][expert] += 1;
    }

    pub fn add_tokens(&mut self, tag: ModalityTag, n: u64) {
        self.total_tokens[tag.index()] += n;
    }

    /// Adds another profile's tallies (used to merge per-batch profiles).
    pub fn merge(&mut self, other: &ActivationProfile) -> Result<()> {
        if other.n_experts != self.n_experts || other.n_layers() != self.n_layers() {
            return Err(Error::Contract("merging profiles of different shapes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for m in 0..3 {
                for (x, y) in a[m].iter_mut().zip(&b[m]) {
                    *x += y;
                }
            }
        }
        for m in 0..3 {
            self.total_tokens[m] += other.total_tokens[m];
        }
        Ok(())
    }

    fn nonzero_counts(&self, layer: usize, tag: ModalityTag) -> Result<&[u64]> {
        if layer >= self.n_layers() {
            return Err(Error::Usage(format!("layer {layer} out of range")));
        }
        let c = self.layer_counts(layer, tag);
        if c.iter().all(|&x| x == 0) {
            return Err(Error::UndefinedMetric(format!(
                "no {tag} selections recorded for layer {layer}"
            )));
        }
        Ok(c)
    }

    /// `max_i count_i / mean_i count_i`.
    pub fn imbalance_ratio(&self, layer: usize, tag: ModalityTag) -> Result<f64> {
        let c = self.nonzero_counts(layer, tag)?;
        Ok(imbalance_ratio(c))
    }

    /// Population standard deviation of per-expert counts.
    pub fn selection_std(&self, layer: usize, tag: ModalityTag) -> Result<f64> {
        let c = self.nonzero_counts(layer, tag)?;
        Ok(selection_std(c))
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::json!({
            "kind": "activation_profile",
            "version": 1,
            "n_experts": self.n_experts,
            "k": self.k,
            "n_layers": self.n_layers(),
            "total_tokens": {"text": self.total_tokens[0], "vit": self.total_tokens[1], "vae": self.total_tokens[2]},
        });
        writeln!(w, "{header}")?;
        for (layer, c) in self.counts.iter().enumerate() {
            let rec = ProfileLine {
                layer,
                text: c[0].clone(),
                vit: c[1].clone(),
                vae: c[2].clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header: ProfileHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(Error::Parse("empty profile file".into())),
        };
        if header.kind != "activation_profile" {
            return Err(Error::Parse(format!("expected activation_profile, got {}", header.kind)));
        }
        let mut p = ActivationProfile::new(header.n_layers, header.n_experts, header.k);
        p.total_tokens = [header.total_tokens.text, header.total_tokens.vit, header.total_tokens.vae];
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ProfileLine = serde_json::from_str(&line)?;
            if rec.layer >= p.n_layers()
                || [&rec.text, &rec.vit, &rec.vae].iter().any(|v| v.len() != header.n_experts)
            {
                return Err(Error::Parse(format!("malformed profile record for layer {}", rec.layer)));
            }
            p.counts[rec.layer] = [rec.text, rec.vit, rec.vae];
        }
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileLine {
    layer: usize,
    text: Vec<u64>,
    vit: Vec<u64>,
    vae: Vec<u64>,
}

#[derive(Deserialize)]
struct TokenTotals {
    text: u64,
    vit: u64,
    vae: u64,
}

#[derive(Deserialize)]
struct ProfileHeader {
    kind: String,
    n_experts: usize,
    k: usize,
    n_layers: usize,
    total_tokens: TokenTotals,
}

/// Tallies top-`k` selections per layer, expert and modality. Routing runs
/// without capacity limits and nothing is learned.
pub fn profile_activations<T: Scalar>(model: &Model<T>, batches: &[Batch], k: usize) -> Result<ActivationProfile> {
    if batches.is_empty() {
        return Err(Error::Usage("no batches to profile".into()));
    }
    let mut profile = ActivationProfile::new(model.config.n_layers, model.config.n_experts, k);
    let opts = ForwardOptions {
        top_k: Some(k),
        ..ForwardOptions::default()
    };
    for batch in batches {
        let mut g = Graph::new();
        let out = model.forward(&mut g, batch, &opts)?;
        for (layer, lo) in out.layers.iter().enumerate() {
            for route in &lo.routes {
                for (local, ids) in route.routed.decision.expert_ids.iter().enumerate() {
                    let tag = batch.tags[route.rows[local]];
                    for &e in ids {
                        profile.record(layer, tag, route.index_map[e]);
                    }
                }
            }
        }
        for (m, c) in batch.modality_counts().into_iter().enumerate() {
            profile.total_tokens[m] += c;
        }
    }
    Ok(profile)
}

pub fn imbalance_ratio(counts: &[u64]) -> f64 {
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    let mean = counts.iter().sum::<u64>() as f64 / counts.len() as f64;
    max / mean
}

pub fn selection_std(counts: &[u64]) -> f64 {
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    let var = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    var.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    Bimodal,
    Tripartite,
    Custom,
}

impl FromStr for PartitionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bimodal" => Ok(Self::Bimodal),
            "tripartite" => Ok(Self::Tripartite),
            "custom" => Ok(Self::Custom),
            _ => Err(Error::Usage(format!("unknown partition strategy {s:?}"))),
        }
    }
}

/// Disjoint expert index sets for one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub strategy: PartitionStrategy,
    pub n_experts: usize,
    pub und_ids: Vec<usize>,
    pub gen_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vit_ids: Option<Vec<usize>>,
}

/// One routing group derived from a partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub name: &'static str,
    pub ids: Vec<usize>,
    pub modalities: Vec<ModalityTag>,
}

impl PartitionSpec {
    pub fn bimodal(n_experts: usize, und_ids: Vec<usize>) -> Result<Self> {
        let gen_ids = (0..n_experts).filter(|i| !und_ids.contains(i)).collect();
        let mut und_ids = und_ids;
        und_ids.sort_unstable();
        let spec = Self {
            strategy: PartitionStrategy::Bimodal,
            n_experts,
            und_ids,
            gen_ids,
            text_ids: None,
            vit_ids: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks disjointness and that the union is exactly `0..N`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n_experts];
        let mut mark = |ids: &[usize]| -> Result<()> {
            for &i in ids {
                if i >= self.n_experts {
                    return Err(Error::Contract(format!("expert {i} out of range for {}", self.n_experts)));
                }
                if seen[i] {
                    return Err(Error::Contract(format!("expert {i} assigned twice")));
                }
                seen[i] = true;
            }
            Ok(())
        };
        match (&self.text_ids, &self.vit_ids) {
            (Some(t), Some(v)) => {
                mark(t)?;
                mark(v)?;
                let mut und: Vec<usize> = t.iter().chain(v).copied().collect();
                und.sort_unstable();
                if und != self.und_ids {
                    return Err(Error::Contract("und_ids must equal text_ids + vit_ids".into()));
                }
            }
            (None, None) => mark(&self.und_ids)?,
            _ => return Err(Error::Contract("text_ids and vit_ids must come together".into())),
        }
        mark(&self.gen_ids)?;
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Contract(format!("expert {missing} belongs to no group")));
        }
        Ok(())
    }

    /// Routing groups in a fixed order; the generation group is last.
    pub fn groups(&self) -> Vec<GroupSpec> {
        let mut out = Vec::new();
        match (&self.text_ids, &self.vit_ids) {
            (Some(t), Some(v)) => {
                out.push(GroupSpec {
                    name: "text",
                    ids: t.clone(),
                    modalities: vec![ModalityTag::Text],
                });
                out.push(GroupSpec {
                    name: "vit",
                    ids: v.clone(),
                    modalities: vec![ModalityTag::Vit],
                });
            }
            _ => out.push(GroupSpec {
                name: "und",
                ids: self.und_ids.clone(),
                modalities: vec![ModalityTag::Text, ModalityTag::Vit],
            }),
        }
        out.push(GroupSpec {
            name: "gen",
            ids: self.gen_ids.clone(),
            modalities: vec![ModalityTag::Vae],
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOptions {
    pub n_und: usize,
    pub strategy: PartitionStrategy,
    /// Rank by per-modality frequencies instead of raw counts.
    pub normalize: bool,
    /// Sum scores over layers and use one partition everywhere.
    pub global: bool,
    /// Text share of `n_und` for the tripartite split (default: half, rounded up).
    pub n_text: Option<usize>,
}

impl PartitionOptions {
    pub fn bimodal(n_und: usize) -> Self {
        Self {
            n_und,
            strategy: PartitionStrategy::Bimodal,
            normalize: false,
            global: false,
            n_text: None,
        }
    }
}

/// Descending order by score, ties to the lower index.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Plans one partition per layer (or a single replicated one with
/// `global`) from an activation profile.
pub fn partition_experts(profile: &ActivationProfile, opts: &PartitionOptions) -> Result<Vec<PartitionSpec>> {
    let n = profile.n_experts;
    if opts.n_und == 0 || opts.n_und >= n {
        return Err(Error::Usage(format!("n_und={} must lie in 1..{n}", opts.n_und)));
    }
    let text_total = profile.total_tokens[ModalityTag::Text.index()];
    let vit_total = profile.total_tokens[ModalityTag::Vit.index()];
    if text_total == 0 || vit_total == 0 {
        return Err(Error::Usage("profile must cover both text and vit tokens".into()));
    }
    let layer_scores = |layer: usize| -> (Vec<f64>, Vec<f64>) {
        let t = profile.layer_counts(layer, ModalityTag::Text);
        let v = profile.layer_counts(layer, ModalityTag::Vit);
        let (ts, vs) = if opts.normalize {
            (text_total as f64, vit_total as f64)
        } else {
            (1.0, 1.0)
        };
        (
            t.iter().map(|&c| c as f64 / ts).collect(),
            v.iter().map(|&c| c as f64 / vs).collect(),
        )
    };
    let layers: Vec<(Vec<f64>, Vec<f64>)> = if opts.global {
        let mut t = vec![0.0; n];
        let mut v = vec![0.0; n];
        for l in 0..profile.n_layers() {
            let (a, b) = layer_scores(l);
            t.iter_mut().zip(a).for_each(|(x, y)| *x += y);
            v.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        vec![(t, v); profile.n_layers()]
    } else {
        (0..profile.n_layers()).map(layer_scores).collect()
    };
    layers
        .into_iter()
        .enumerate()
        .map(|(layer, (t, v))| {
            let spec = match opts.strategy {
                PartitionStrategy::Bimodal => {
                    let score: Vec<f64> = t.iter().zip(&v).map(|(a, b)| a + b).collect();
                    let und = rank(&score)[..opts.n_und].to_vec();
                    PartitionSpec::bimodal(n, und)?
                }
                PartitionStrategy::Tripartite => {
                    // Conflicts go to the modality with the higher normalised score.
                    let tn: Vec<f64> = profile
                        .layer_counts(layer, ModalityTag::Text)
                        .iter()
                        .map(|&c| c as f64 / text_total as f64)
                        .collect();
                    let vn: Vec<f64> = profile
                        .layer_counts(layer, ModalityTag::Vit)
                        .iter()
                        .map(|&c| c as f64 / vit_total as f64)
                        .collect();
                    let (tn, vn) = if opts.global { (t.clone(), v.clone()) } else { (tn, vn) };
                    tripartite(n, opts.n_und, opts.n_text, &tn, &vn)?
                }
                PartitionStrategy::Custom => {
                    return Err(Error::Usage(
                        "custom partitions are read from a file, not planned from a profile".into(),
                    ))
                }
            };
            Ok(spec)
        })
        .collect()
}

fn tripartite(n: usize, n_und: usize, n_text: Option<usize>, text: &[f64], vit: &[f64]) -> Result<PartitionSpec> {
    let n_text = n_text.unwrap_or(n_und.div_ceil(2));
    if n_text == 0 || n_text >= n_und {
        return Err(Error::Usage(format!("n_text={n_text} must lie in 1..{n_und}")));
    }
    let n_vit = n_und - n_text;
    let mut pairs: Vec<(f64, usize, usize)> = (0..n)
        .flat_map(|i| [(text[i], i, 0usize), (vit[i], i, 1usize)])
        .collect();
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut taken = vec![false; n];
    let mut t_ids = Vec::new();
    let mut v_ids = Vec::new();
    for (_, e, m) in pairs {
        if taken[e] {
            continue;
        }
        let (bucket, cap) = if m == 0 { (&mut t_ids, n_text) } else { (&mut v_ids, n_vit) };
        if bucket.len() < cap {
            bucket.push(e);
            taken[e] = true;
        }
        if t_ids.len() == n_text && v_ids.len() == n_vit {
            break;
        }
    }
    t_ids.sort_unstable();
    v_ids.sort_unstable();
    let mut und: Vec<usize> = t_ids.iter().chain(&v_ids).copied().collect();
    und.sort_unstable();
    let spec = PartitionSpec {
        strategy: PartitionStrategy::Tripartite,
        n_experts: n,
        gen_ids: (0..n).filter(|&i| !taken[i]).collect(),
        und_ids: und,
        text_ids: Some(t_ids),
        vit_ids: Some(v_ids),
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Serialize, Deserialize)]
struct PartitionLine {
    layer: usize,
    #[serde(flatten)]
    spec: PartitionSpec,
}

/// Writes per-layer partitions: a header line then one record per layer.
pub fn write_partitions<W: Write>(w: &mut W, specs: &[PartitionSpec]) -> Result<()> {
    let header = serde_json::json!({"kind": "partition", "version": 1, "n_layers": specs.len()});
    writeln!(w, "{header}")?;
    for (layer, spec) in specs.iter().enumerate() {
        let line = PartitionLine {
            layer,
            spec: spec.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

pub fn read_partitions<R: BufRead>(r: R) -> Result<Vec<PartitionSpec>> {
    let mut lines = r.lines();
    let header: serde_json::Value = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(Error::Parse("empty partition file".into())),
    };
    if header["kind"] != "partition" {
        return Err(Error::Parse("expected a partition file".into()));
    }
    let n_layers = header["n_layers"]
        .as_u64()
        .ok_or_else(|| Error::Parse("partition header lacks n_layers".into()))? as usize;
    let mut specs: Vec<Option<PartitionSpec>> = vec![None; n_layers];
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PartitionLine = serde_json::from_str(&line)?;
        rec.spec.validate()?;
        let slot = specs
            .get_mut(rec.layer)
            .ok_or_else(|| Error::Parse(format!("layer {} out of range", rec.layer)))?;
        *slot = Some(rec.spec);
    }
    specs
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::Parse(format!("missing partition for layer {i}"))))
        .collect()
}

/// Group routers cut from a parent router's columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedRouters<T> {
    pub names: Vec<&'static str>,
    pub routers: Vec<Tensor<T>>,
    /// Original expert index of each column, per group.
    pub index_map: Vec<Vec<usize>>,
}

/// `W_r^g = W_r[:, I_g]` for every group of `spec`.
pub fn slice_router<T: Scalar>(parent: &Tensor<T>, spec: &PartitionSpec) -> Result<GroupedRouters<T>> {
    let (_, n) = parent.dims2()?;
    if n != spec.n_experts {
        return Err(Error::Contract(format!(
            "router has {n} columns, partition covers {}",
            spec.n_experts
        )));
    }
    let groups = spec.groups();
    let mut out = GroupedRouters {
        names: Vec::new(),
        routers: Vec::new(),
        index_map: Vec::new(),
    };
    for gs in groups {
        if gs.ids.is_empty() {
            continue;
        }
        out.routers.push(parent.select_columns(&gs.ids)?);
        out.names.push(gs.name);
        out.index_map.push(gs.ids);
    }
    Ok(out)
}

/// Expert weights copied into their groups, plus the shared experts.
#[derive(Debug, Clone, PartialEq)]
pub struct InheritedExperts<T> {
    pub names: Vec<&'static str>,
    pub groups: Vec<Vec<ExpertWeights<T>>>,
    pub index_map: Vec<Vec<usize>>,
    pub shared: Vec<ExpertWeights<T>>,
}

impl<T: Scalar> InheritedExperts<T> {
    fn group(&self, name: &str) -> &[ExpertWeights<T>] {
        self.names
            .iter()
            .position(|&n| n == name)
            .map_or(&[], |i| &self.groups[i])
    }

    pub fn und(&self) -> &[ExpertWeights<T>] {
        self.group("und")
    }

    pub fn gen(&self) -> &[ExpertWeights<T>] {
        self.group("gen")
    }

    /// Puts every expert back at its original index.
    pub fn reassemble(&self) -> Vec<ExpertWeights<T>> {
        let n: usize = self.index_map.iter().map(Vec::len).sum();
        let mut slots: Vec<Option<ExpertWeights<T>>> = vec![None; n];
        for (experts, ids) in self.groups.iter().zip(&self.index_map) {
            for (e, &i) in experts.iter().zip(ids) {
                slots[i] = Some(e.clone());
            }
        }
        slots.into_iter().map(|s| s.expect("partition covers every expert")).collect()
    }
}

pub fn inherit_experts<T: Scalar>(
    parent: &[ExpertWeights<T>],
    shared: &[ExpertWeights<T>],
    spec: &PartitionSpec,
) -> Result<InheritedExperts<T>> {
    if parent.len() != spec.n_experts {
        return Err(Error::Contract(format!(
            "parent has {} experts, partition covers {}",
            parent.len(),
            spec.n_experts
        )));
    }
    spec.validate()?;
    let mut out = InheritedExperts {
        names: Vec::new(),
        groups: Vec::new(),
        index_map: Vec::new(),
        shared: shared.to_vec(),
    };
    for gs in spec.groups() {
        if gs.ids.is_empty() {
            continue;
        }
        out.groups.push(gs.ids.iter().map(|&i| parent[i].clone()).collect());
        out.names.push(gs.name);
        out.index_map.push(gs.ids);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn profile_from(text: &[u64], vit: &[u64]) -> ActivationProfile {
        let mut p = ActivationProfile::new(1, text.len(), 1);
        p.counts[0][0] = text.to_vec();
        p.counts[0][1] = vit.to_vec();
        p.total_tokens = [text.iter().sum(), vit.iter().sum(), 0];
        p
    }

    #[test]
    fn imbalance_and_std_by_hand() {
        assert_eq!(imbalance_ratio(&[8, 0, 0, 0]), 4.0);
        assert_eq!(imbalance_ratio(&[5, 5, 5]), 1.0);
        assert_eq!(selection_std(&[0, 4]), 2.0);
        assert_eq!(selection_std(&[3, 3, 3]), 0.0);
        let p = profile_from(&[0, 0], &[1, 1]);
        assert!(matches!(p.imbalance_ratio(0, ModalityTag::Text), Err(Error::UndefinedMetric(_))));
        assert!(matches!(p.selection_std(0, ModalityTag::Vae), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn bimodal_hand_ranking() {
        let p = profile_from(&[6, 1, 4, 0], &[4, 0, 3, 0]);
        let specs = partition_experts(&p, &PartitionOptions::bimodal(2)).unwrap();
        assert_eq!(specs[0].und_ids, vec![0, 2]);
        assert_eq!(specs[0].gen_ids, vec![1, 3]);
    }

    #[test]
    fn never_activated_expert_goes_to_generation() {
        let p = profile_from(&[3, 0, 2, 5], &[1, 0, 1, 1]);
        let specs = partition_experts(&p, &PartitionOptions::bimodal(3)).unwrap();
        assert_eq!(specs[0].gen_ids, vec![1]);
    }

    #[test]
    fn large_scale_split_sizes() {
        let mut rng = Rng::new(5);
        let text: Vec<u64> = (0..128).map(|_| rng.below(1000) as u64).collect();
        let vit: Vec<u64> = (0..128).map(|_| rng.below(1000) as u64).collect();
        let specs = partition_experts(&profile_from(&text, &vit), &PartitionOptions::bimodal(96)).unwrap();
        assert_eq!(specs[0].und_ids.len(), 96);
        assert_eq!(specs[0].gen_ids.len(), 32);
    }

    #[test]
    fn partition_usage_errors() {
        let p = profile_from(&[1, 2], &[0, 0]);
        assert!(matches!(partition_experts(&p, &PartitionOptions::bimodal(1)), Err(Error::Usage(_))));
        let p = profile_from(&[1, 2], &[1, 1]);
        assert!(matches!(partition_experts(&p, &PartitionOptions::bimodal(2)), Err(Error::Usage(_))));
    }

    #[test]
    fn tripartite_conflict_goes_to_higher_normalised_score() {
        // Expert 0 tops both rankings; its ViT share (0.5) beats its text share (0.4).
        let p = profile_from(&[40, 30, 20, 10, 0, 0], &[10, 0, 0, 0, 6, 4]);
        let opts = PartitionOptions {
            strategy: PartitionStrategy::Tripartite,
            n_text: Some(2),
            ..PartitionOptions::bimodal(4)
        };
        let s = &partition_experts(&p, &opts).unwrap()[0];
        assert_eq!(s.vit_ids.as_deref(), Some(&[0, 4][..]));
        assert_eq!(s.text_ids.as_deref(), Some(&[1, 2][..]));
        assert_eq!(s.gen_ids, vec![3, 5]);
        s.validate().unwrap();
    }

    #[test]
    fn slicing_full_and_single_column() {
        let mut rng = Rng::new(1);
        let parent = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let all = PartitionSpec {
            strategy: PartitionStrategy::Custom,
            n_experts: 2,
            und_ids: vec![0, 1],
            gen_ids: vec![],
            text_ids: None,
            vit_ids: None,
        };
        let r = slice_router(&parent, &all).unwrap();
        assert_eq!(r.routers.len(), 1);
        assert_eq!(r.routers[0], parent);

        let spec = PartitionSpec::bimodal(2, vec![1]).unwrap();
        let r = slice_router(&parent, &spec).unwrap();
        let col1: Vec<f64> = (0..3).map(|i| parent.at2(i, 1)).collect();
        assert_eq!(r.routers[0].data(), col1.as_slice());
        assert_eq!(r.index_map, vec![vec![1], vec![0]]);
    }

    #[test]
    fn partition_file_round_trip() {
        let specs = vec![
            PartitionSpec::bimodal(4, vec![0, 3]).unwrap(),
            PartitionSpec::bimodal(4, vec![1, 2]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_partitions(&mut buf, &specs).unwrap();
        assert_eq!(read_partitions(buf.as_slice()).unwrap(), specs);
    }

    #[test]
    fn invalid_partition_is_rejected() {
        let bad = PartitionSpec {
            strategy: PartitionStrategy::Custom,
            n_experts: 3,
            und_ids: vec![0, 1],
            gen_ids: vec![1],
            text_ids: None,
            vit_ids: None,
        };
        assert!(bad.validate().is_err());
    }
}
