//! Synthetic multimodal tasks with learnable structure.
//!
//! A fixed seeded [`World`] holds the generating maps; batches are pure
//! functions of `(world, mixture, task, seed, step)`.

use serde::{Deserialize, Serialize};

use crate::disentangle::ModalityTag;
use crate::error::{Error, Result};
use crate::rng::Rng;

const WORLD_TAG: u64 = 0x574f_524c_44;
const BATCH_TAG: u64 = 0x4241_5443_48;
pub const EVAL_TAG: u64 = 0x4556_414c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    T2i,
    T2iLong,
    Lm,
    Mmu,
}

impl Task {
    /// Mixture order.
    pub const ALL: [Task; 4] = [Task::T2i, Task::T2iLong, Task::Lm, Task::Mmu];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::T2i => "t2i",
            Task::T2iLong => "t2i_long",
            Task::Lm => "lm",
            Task::Mmu => "mmu",
        }
    }

    pub fn is_generation(self) -> bool {
        matches!(self, Task::T2i | Task::T2iLong)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    /// T2I : T2I-Long : LM : MMU.
    pub ratios: [u32; 4],
    pub batch_seqs: usize,
    pub vocab: usize,
    pub d_vit: usize,
    pub d_latent: usize,
    pub code_dim: usize,
    pub lm_len: usize,
    pub mmu_vit: usize,
    pub mmu_text: usize,
    pub t2i_prompt: usize,
    pub t2i_vae: usize,
    pub long_prompt: usize,
    pub long_vae: usize,
    /// Exponent of the Zipf law over token ids used for bigram successors
    /// and sequence starts; 0 gives uniform draws.
    pub zipf: f64,
    pub world_seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            ratios: [3, 3, 2, 2],
            batch_seqs: 16,
            vocab: 64,
            d_vit: 8,
            d_latent: 4,
            code_dim: 4,
            lm_len: 12,
            mmu_vit: 4,
            mmu_text: 8,
            t2i_prompt: 4,
            t2i_vae: 8,
            long_prompt: 6,
            long_vae: 18,
            zipf: 0.0,
            world_seed: 2024,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().all(|&r| r == 0) {
            return Err(Error::Config("mixture ratios are all zero".into()));
        }
        let dims = [
            ("batch_seqs", self.batch_seqs),
            ("d_vit", self.d_vit),
            ("d_latent", self.d_latent),
            ("code_dim", self.code_dim),
            ("lm_len", self.lm_len),
            ("mmu_vit", self.mmu_vit),
            ("mmu_text", self.mmu_text),
            ("t2i_prompt", self.t2i_prompt),
            ("t2i_vae", self.t2i_vae),
            ("long_prompt", self.long_prompt),
            ("long_vae", self.long_vae),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab must be at least 2".into()));
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            return Err(Error::Config("zipf must be a nonnegative number".into()));
        }
        if self.lm_len < 2 {
            return Err(Error::Config("lm_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self, task: Task) -> usize {
        match task {
            Task::Lm => self.lm_len,
            Task::Mmu => self.mmu_vit + self.mmu_text,
            Task::T2i => self.t2i_prompt + self.t2i_vae,
            Task::T2iLong => self.long_prompt + self.long_vae,
        }
    }

    pub fn max_seq_len(&self) -> usize {
        Task::ALL.iter().map(|&t| self.seq_len(t)).max().unwrap_or(0)
    }

    /// Tokens per modality in one batch of `task`.
    pub fn tokens_per_batch(&self, task: Task) -> [u64; 3] {
        let b = self.batch_seqs as u64;
        let (text, vit, vae) = match task {
            Task::Lm => (self.lm_len, 0, 0),
            Task::Mmu => (self.mmu_text, self.mmu_vit, 0),
            Task::T2i => (self.t2i_prompt, 0, self.t2i_vae),
            Task::T2iLong => (self.long_prompt, 0, self.long_vae),
        };
        [text as u64 * b, vit as u64 * b, vae as u64 * b]
    }
}

/// Smooth weighted round-robin over the mixture ratios. Every window of
/// `sum(ratios)` consecutive steps contains each task exactly its ratio
/// number of times.
#[derive(Debug, Clone)]
pub struct Schedule {
    weights: [i64; 4],
    current: [i64; 4],
}

impl Schedule {
    pub fn new(ratios: [u32; 4]) -> Self {
        Self {
            weights: ratios.map(i64::from),
            current: [0; 4],
        }
    }

    pub fn next_task(&mut self) -> Task {
        let total: i64 = self.weights.iter().sum();
        for (c, w) in self.current.iter_mut().zip(self.weights) {
            *c += w;
        }
        let mut best = 0;
        for i in 1..4 {
            if self.current[i] > self.current[best] {
                best = i;
            }
        }
        self.current[best] -= total;
        Task::ALL[best]
    }

    /// Task scheduled at `step` (0-based).
    pub fn task_at(ratios: [u32; 4], step: u64) -> Task {
        let period: u64 = ratios.iter().map(|&r| u64::from(r)).sum();
        let mut s = Schedule::new(ratios);
        let mut task = Task::Lm;
        for _ in 0..=(step % period) {
            task = s.next_task();
        }
        task
    }
}

/// Fixed generating maps shared by every run with the same `world_seed`.
#[derive(Debug, Clone)]
pub struct World {
    pub config: MixtureConfig,
    /// Successor candidates and cumulative probabilities per token.
    bigram: Vec<Vec<(usize, f64)>>,
    start: Vec<f64>,
    /// Per patch `[d_vit x code_dim]`.
    vit_maps: Vec<Vec<f64>>,
    /// Per answer position `[vocab x code_dim]`.
    answer_maps: Vec<Vec<f64>>,
    /// `[vocab x d_latent]`.
    prompt_map: Vec<f64>,
    /// `[max_vae x d_latent]`.
    slot_latent: Vec<f64>,
}

const SUCCESSOR_PROBS: [f64; 4] = [0.5, 0.25, 0.15, 0.1];

impl World {
    pub fn new(config: &MixtureConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(config.world_seed, &[WORLD_TAG]);
        let v = config.vocab;
        let zipf: Vec<f64> = (0..v).map(|i| ((i + 1) as f64).powf(-config.zipf)).collect();
        let draw = |rng: &mut Rng| if config.zipf == 0.0 { rng.below(v) } else { rng.categorical(&zipf) };
        let bigram = (0..v)
            .map(|_| {
                let mut acc = 0.0;
                SUCCESSOR_PROBS
                    .iter()
                    .map(|&p| {
                        acc += p;
                        (draw(&mut rng), acc)
                    })
                    .collect()
            })
            .collect();
        let start = zipf.clone();
        let randn = |n: usize, std: f64, rng: &mut Rng| -> Vec<f64> { (0..n).map(|_| rng.normal() * std).collect() };
        let c = config.code_dim;
        let vit_maps = (0..config.mmu_vit)
            .map(|_| randn(config.d_vit * c, 1.0 / (c as f64).sqrt(), &mut rng))
            .collect();
        let answer_maps = (0..config.mmu_text).map(|_| randn(v * c, 1.0, &mut rng)).collect();
        let prompt_map = randn(v * config.d_latent, 1.0, &mut rng);
        let max_vae = config.t2i_vae.max(config.long_vae);
        let slot_latent = randn(max_vae * config.d_latent, 0.5, &mut rng);
        Ok(Self {
            config: config.clone(),
            bigram,
            start,
            vit_maps,
            answer_maps,
            prompt_map,
            slot_latent,
        })
    }

    fn walk(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.categorical(&self.start);
        out.push(cur);
        while out.len() < len {
            let u = rng.uniform();
            let succ = &self.bigram[cur];
            cur = succ.iter().find(|&&(_, c)| u < c).unwrap_or(&succ[succ.len() - 1]).0;
            out.push(cur);
        }
        out
    }

    /// Probability of `b` following `a` under the bigram table.
    pub fn bigram_prob(&self, a: usize, b: usize) -> f64 {
        let mut prev = 0.0;
        let mut p = 0.0;
        for &(s, c) in &self.bigram[a] {
            if s == b {
                p += c - prev;
            }
            prev = c;
        }
        p
    }

    /// Conditional entropy of the bigram table averaged over a uniform
    /// previous token.
    pub fn bigram_entropy(&self) -> f64 {
        let v = self.config.vocab;
        let mut h = 0.0;
        for a in 0..v {
            for b in 0..v {
                let p = self.bigram_prob(a, b);
                if p > 0.0 {
                    h -= p * p.ln();
                }
            }
        }
        h / v as f64
    }

    /// Answer token at answer position `j` for a code.
    pub fn answer(&self, j: usize, code: &[f64]) -> usize {
        let c = self.config.code_dim;
        let m = &self.answer_maps[j];
        let scores: Vec<f64> = (0..self.config.vocab)
            .map(|v| (0..c).map(|i| m[v * c + i] * code[i]).sum())
            .collect();
        crate::graph::top_k_indices(&scores, 1)[0]
    }

    /// ViT patch features for a code, `mmu_vit x d_vit` row-major.
    pub fn vit_features(&self, code: &[f64]) -> Vec<f64> {
        let c = self.config.code_dim;
        let dv = self.config.d_vit;
        let mut out = Vec::with_capacity(self.config.mmu_vit * dv);
        for m in &self.vit_maps {
            for r in 0..dv {
                out.push((0..c).map(|i| m[r * c + i] * code[i]).sum());
            }
        }
        out
    }

    /// Clean latent for VAE slot `j` of a prompt.
    pub fn latent(&self, prompt: &[usize], j: usize) -> Vec<f64> {
        let d = self.config.d_latent;
        let mut z = self.slot_latent[j * d..(j + 1) * d].to_vec();
        for &p in prompt {
            for (zi, &g) in z.iter_mut().zip(&self.prompt_map[p * d..(p + 1) * d]) {
                *zi += g / prompt.len() as f64;
            }
        }
        z
    }

    pub fn generate(&self, task: Task, seed: u64, step: u64) -> Batch {
        let mut rng = Rng::derive(seed, &[BATCH_TAG, step, task.index() as u64]);
        self.generate_with(task, step, &mut rng)
    }

    pub fn generate_with(&self, task: Task, step: u64, rng: &mut Rng) -> Batch {
        let cfg = &self.config;
        let len = cfg.seq_len(task);
        let mut b = Batch {
            task,
            step,
            n_seqs: cfg.batch_seqs,
            seq_len: len,
            d_vit: cfg.d_vit,
            d_latent: cfg.d_latent,
            tags: Vec::new(),
            tokens: Vec::new(),
            targets: Vec::new(),
            vit: Vec::new(),
            latent: Vec::new(),
            noise: Vec::new(),
            t: Vec::new(),
        };
        for _ in 0..cfg.batch_seqs {
            match task {
                Task::Lm => {
                    let w = self.walk(len, rng);
                    for i in 0..len {
                        b.tags.push(ModalityTag::Text);
                        b.tokens.push(w[i]);
                        b.targets.push(w.get(i + 1).copied());
                    }
                }
                Task::Mmu => {
                    let code: Vec<f64> = (0..cfg.code_dim).map(|_| rng.normal()).collect();
                    b.vit.extend(self.vit_features(&code));
                    let ans: Vec<usize> = (0..cfg.mmu_text).map(|j| self.answer(j, &code)).collect();
                    for i in 0..cfg.mmu_vit {
                        b.tags.push(ModalityTag::Vit);
                        b.tokens.push(0);
                        b.targets.push(if i + 1 == cfg.mmu_vit { Some(ans[0]) } else { None });
                    }
                    for j in 0..cfg.mmu_text {
                        b.tags.push(ModalityTag::Text);
                        b.tokens.push(ans[j]);
                        b.targets.push(ans.get(j + 1).copied());
                    }
                }
                Task::T2i | Task::T2iLong => {
                    let (np, nv) = if task == Task::T2i {
                        (cfg.t2i_prompt, cfg.t2i_vae)
                    } else {
                        (cfg.long_prompt, cfg.long_vae)
                    };
                    let prompt = self.walk(np, rng);
                    for i in 0..np {
                        b.tags.push(ModalityTag::Text);
                        b.tokens.push(prompt[i]);
                        b.targets.push(if i + 1 < np { Some(prompt[i + 1]) } else { None });
                    }
                    b.t.push(rng.open_unit());
                    for j in 0..nv {
                        b.tags.push(ModalityTag::Vae);
                        b.tokens.push(0);
                        b.targets.push(None);
                        b.latent.extend(self.latent(&prompt, j));
                        b.noise.extend((0..cfg.d_latent).map(|_| rng.normal()));
                    }
                }
            }
        }
        b
    }
}

/// One homogeneous batch of `n_seqs` sequences, flattened row-major
/// (sequence, position).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub task: Task,
    pub step: u64,
    pub n_seqs: usize,
    pub seq_len: usize,
    pub d_vit: usize,
    pub d_latent: usize,
    pub tags: Vec<ModalityTag>,
    /// Text token id per row (0 on non-text rows).
    pub tokens: Vec<usize>,
    /// Next discrete token to predict from each row.
    pub targets: Vec<Option<usize>>,
    /// ViT features, one row per ViT-tagged row in order.
    pub vit: Vec<f64>,
    /// Clean VAE latents, one row per VAE-tagged row in order.
    pub latent: Vec<f64>,
    pub noise: Vec<f64>,
    /// Flow time per sequence (generation tasks only).
    pub t: Vec<f64>,
}

impl Batch {
    pub fn n_rows(&self) -> usize {
        self.tags.len()
    }

    pub fn rows_of(&self, tag: ModalityTag) -> Vec<usize> {
        (0..self.n_rows()).filter(|&r| self.tags[r] == tag).collect()
    }

    pub fn modality_counts(&self) -> [u64; 3] {
        let mut c = [0u64; 3];
        for t in &self.tags {
            c[t.index()] += 1;
        }
        c
    }

    /// Rows carrying a discrete target, and the targets.
    pub fn discrete_targets(&self) -> (Vec<usize>, Vec<usize>) {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(r, t)| t.map(|t| (r, t)))
            .unzip()
    }

    pub fn seq_of(&self, row: usize) -> usize {
        row / self.seq_len
    }

    /// `x_t = (1-t) noise + t latent` per VAE row.
    pub fn interpolated(&self) -> Vec<f64> {
        let d = self.d_latent;
        let mut out = Vec::with_capacity(self.latent.len());
        for (i, r) in self.rows_of(ModalityTag::Vae).into_iter().enumerate() {
            let t = self.t[self.seq_of(r)];
            for j in 0..d {
                out.push(interpolate(self.noise[i * d + j], self.latent[i * d + j], t));
            }
        }
        out
    }

    /// Flow time of each VAE row.
    pub fn vae_times(&self) -> Vec<f64> {
        self.rows_of(ModalityTag::Vae)
            .into_iter()
            .map(|r| self.t[self.seq_of(r)])
            .collect()
    }

    /// Velocity target `latent - noise`.
    pub fn velocity_target(&self) -> Vec<f64> {
        self.latent.iter().zip(&self.noise).map(|(x, n)| x - n).collect()
    }

    /// FNV-1a over every field, used to prove identical batch streams.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::default();
        h.u64(self.task.index() as u64);
        h.u64(self.step);
        h.u64(self.n_seqs as u64);
        h.u64(self.seq_len as u64);
        for t in &self.tags {
            h.u64(t.index() as u64);
        }
        for &t in &self.tokens {
            h.u64(t as u64);
        }
        for t in &self.targets {
            h.u64(t.map_or(u64::MAX, |v| v as u64));
        }
        for x in self.vit.iter().chain(&self.latent).chain(&self.noise).chain(&self.t) {
            h.u64(x.to_bits());
        }
        h.0
    }
}

pub fn interpolate(noise: f64, sample: f64, t: f64) -> f64 {
    (1.0 - t) * noise + t * sample
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn u64(&mut self, x: u64) {
        for b in x.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Fixed held-out evaluation batches.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub understanding: Vec<Batch>,
    pub generation: Vec<Batch>,
}

impl EvalSet {
    pub fn new(world: &World, n_per_task: usize) -> Self {
        let batch = |task: Task, i: usize| {
            let mut rng = Rng::derive(world.config.world_seed, &[EVAL_TAG, task.index() as u64, i as u64]);
            world.generate_with(task, i as u64, &mut rng)
        };
        let mut understanding = Vec::new();
        let mut generation = Vec::new();
        for i in 0..n_per_task {
            understanding.push(batch(Task::Lm, i));
            understanding.push(batch(Task::Mmu, i));
            generation.push(batch(Task::T2i, i));
            generation.push(batch(Task::T2iLong, i));
        }
        Self {
            understanding,
            generation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_counts_per_window() {
        let mut s = Schedule::new([3, 3, 2, 2]);
        let mut counts = [0; 4];
        for _ in 0..1000 {
            counts[s.next_task().index()] += 1;
        }
        assert_eq!(counts, [300, 300, 200, 200]);
    }

    #[test]
    fn task_at_matches_iteration() {
        let mut s = Schedule::new([3, 3, 2, 2]);
        for step in 0..40 {
            assert_eq!(s.next_task(), Schedule::task_at([3, 3, 2, 2], step));
        }
    }

    #[test]
    fn batches_are_deterministic() {
        let w = World::new(&MixtureConfig::default()).unwrap();
        for task in Task::ALL {
            let a = w.generate(task, 9, 17);
            let b = w.generate(task, 9, 17);
            assert_eq!(a, b);
            assert_eq!(a.digest(), b.digest());
            assert_ne!(a.digest(), w.generate(task, 9, 18).digest());
        }
    }

    #[test]
    fn layout_and_targets() {
        let cfg = MixtureConfig::default();
        let w = World::new(&cfg).unwrap();
        let b = w.generate(Task::Mmu, 1, 0);
        assert_eq!(b.n_rows(), 16 * 12);
        assert_eq!(b.vit.len(), 16 * 4 * cfg.d_vit);
        // last ViT row predicts the first answer token
        assert_eq!(b.targets[3], Some(b.tokens[4]));
        let b = w.generate(Task::T2iLong, 1, 0);
        assert_eq!(b.t.len(), 16);
        assert!(b.t.iter().all(|&t| t > 0.0 && t < 1.0));
        assert_eq!(b.latent.len(), 16 * 18 * cfg.d_latent);
        assert_eq!(b.rows_of(ModalityTag::Vae).len(), 16 * 18);
    }

    #[test]
    fn interpolation_endpoints() {
        assert_eq!(interpolate(0.3, -1.7, 0.0), 0.3);
        assert_eq!(interpolate(0.3, -1.7, 1.0), -1.7);
    }

    #[test]
    fn vae_dominates_token_budget() {
        let cfg = MixtureConfig::default();
        let mut tot = [0u64; 3];
        for task in Task::ALL {
            let c = cfg.tokens_per_batch(task);
            for m in 0..3 {
                tot[m] += c[m] * u64::from(cfg.ratios[task.index()]);
            }
        }
        assert!(tot[2] > tot[0] && tot[0] > 0);
    }
}
