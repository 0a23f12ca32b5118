use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cache::PrefixCache;
use super::prompt::DeepPrompt;
use super::{Batch, FewShotTask, ModelError, PromptOffsets, LABEL_WORD_BASE};
use crate::projection::{observe_stats, LayerStats, DEFAULT_CLIP_ROUNDS};

const CHECKPOINT_MAGIC: &[u8; 4] = b"BBTM";
const CHECKPOINT_VERSION: u32 = 1;

/// Shape and initialization of a [`ToyModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub prompt_len: usize,
    pub key_dim: usize,
    pub ffn_dim: usize,
    /// Size of the output head; label word `c` is token `3 + c`.
    pub label_words: usize,
    pub embedding_std: f64,
    pub value_gain: f64,
    pub ffn_gain: f64,
    pub head_gain: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab: 128,
            hidden: 64,
            layers: 4,
            prompt_len: 10,
            key_dim: 16,
            ffn_dim: 64,
            label_words: 16,
            embedding_std: 1.0,
            value_gain: 1.0,
            ffn_gain: 0.5,
            head_gain: 0.3,
            seed: 0,
        }
    }
}

impl ToyConfig {
    /// First id that is neither special nor a label word.
    pub fn first_content_id(&self) -> u32 {
        LABEL_WORD_BASE + self.label_words as u32
    }

    fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab", self.vocab),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("prompt_len", self.prompt_len),
            ("key_dim", self.key_dim),
            ("ffn_dim", self.ffn_dim),
            ("label_words", self.label_words),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.vocab > 65_536 {
            return Err(ModelError::InvalidConfig("vocabulary must fit 16-bit ids".into()));
        }
        if self.first_content_id() as usize >= self.vocab {
            return Err(ModelError::InvalidConfig(format!(
                "vocabulary of {} leaves no content tokens after {} label words",
                self.vocab, self.label_words
            )));
        }
        for (name, v) in [
            ("embedding_std", self.embedding_std),
            ("value_gain", self.value_gain),
            ("ffn_gain", self.ffn_gain),
            ("head_gain", self.head_gain),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// One residual block `f_j`: single-head causal attention followed by a
/// ReLU feed-forward layer, with no normalization anywhere.
///
/// All matrices are stored transposed (output × input) so hidden states can
/// be kept one position per column.
#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: DMatrix<f64>,
    wk: DMatrix<f64>,
    wv: DMatrix<f64>,
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
}

/// A contiguous run of columns forming one causal sequence.
struct Segment<'a> {
    start: usize,
    valid: &'a [bool],
}

struct PromptKv {
    keys: DMatrix<f64>,
    values: DMatrix<f64>,
}

/// Per-example logits over the first `num_labels` label words.
pub type Logits = Vec<Vec<f64>>;

/// Hidden states recorded during a traced forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `tokens[j]` is `H × (batch·seq_len)`: the input to layer `j + 1`;
    /// the last entry is the network output.
    pub tokens: Vec<DMatrix<f64>>,
    /// `prompt[j]` is `H × n_p`: the prompt rows entering layer `j + 1`.
    pub prompt: Vec<DMatrix<f64>>,
}

/// A frozen, deterministic residual transformer with a prompt prefix.
///
/// The `n_p` prompt positions sit before the input tokens and attention is
/// causal, so prompt rows never depend on the example they are attached to.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyConfig,
    /// `H × V`, one embedding per column.
    embeddings: DMatrix<f64>,
    blocks: Vec<Block>,
    /// `label_words × H`.
    head: DMatrix<f64>,
    /// Default `p_j⁰`, `H × n_p` per layer.
    initial: Vec<DMatrix<f64>>,
    initial_ids: Vec<u32>,
    cache: PrefixCache,
}

fn draw(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    // values are kept f32-representable so checkpoints are exact
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng) as f32 as f64)
}

impl ToyModel {
    pub fn new(config: ToyConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (h, dk, f) = (config.hidden, config.key_dim, config.ffn_dim);
        let hf = h as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embeddings = draw(&mut rng, h, config.vocab, config.embedding_std);
        let blocks = (0..config.layers)
            .map(|_| Block {
                wq: draw(&mut rng, dk, h, 1.0 / hf.sqrt()),
                wk: draw(&mut rng, dk, h, 1.0 / hf.sqrt()),
                wv: draw(&mut rng, h, h, config.value_gain / hf.sqrt()),
                w1: draw(&mut rng, f, h, (2.0 / hf).sqrt()),
                b1: draw(&mut rng, f, 1, 0.1).column(0).into_owned(),
                w2: draw(&mut rng, h, f, config.ffn_gain / (f as f64).sqrt()),
            })
            .collect();
        let head = draw(&mut rng, config.label_words, h, config.head_gain / hf.sqrt());
        Self::assemble(config, embeddings, blocks, head)
    }

    fn assemble(
        config: ToyConfig,
        embeddings: DMatrix<f64>,
        blocks: Vec<Block>,
        head: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        let mut model = Self {
            config,
            embeddings,
            blocks,
            head,
            initial: Vec::new(),
            initial_ids: Vec::new(),
            cache: PrefixCache::default(),
        };
        let captured = model.capture_initial_deep_prompt(config.seed);
        model.initial = captured.initial.iter().map(|m| m.transpose()).collect();
        model.initial_ids = captured.token_ids;
        Ok(model)
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// Embedding row of a token.
    pub fn embedding(&self, id: u32) -> Vec<f64> {
        self.embeddings.column(id as usize).iter().copied().collect()
    }

    /// All embedding entries, for statistics.
    pub fn embedding_table(&self) -> &[f64] {
        self.embeddings.as_slice()
    }

    /// The initial deep prompt `⟨p_1⁰, …, p_L⁰⟩` used when no offsets are sent.
    pub fn default_prompt(&self) -> DeepPrompt {
        DeepPrompt {
            initial: self.initial.iter().map(|m| m.transpose()).collect(),
            offsets: vec![DMatrix::zeros(self.config.prompt_len, self.config.hidden); self.config.layers],
            token_ids: self.initial_ids.clone(),
        }
    }

    fn block_delta(
        &self,
        layer: usize,
        x: &DMatrix<f64>,
        prompt: Option<&PromptKv>,
        segments: &[Segment<'_>],
        queries: Option<&[usize]>,
    ) -> DMatrix<f64> {
        let b = &self.blocks[layer];
        let (h, dk) = (self.config.hidden, self.config.key_dim);
        let keys = &b.wk * x;
        let values = &b.wv * x;
        let selected;
        let xq = match queries {
            Some(cols) => {
                selected = x.select_columns(cols.iter());
                &selected
            }
            None => x,
        };
        let scale = 1.0 / (dk as f64).sqrt();
        let mut q = &b.wq * xq;
        q *= scale;
        let nq = xq.ncols();

        let mut owner = vec![(0usize, 0usize); x.ncols()];
        for (s, seg) in segments.iter().enumerate() {
            for i in 0..seg.valid.len() {
                owner[seg.start + i] = (s, i);
            }
        }

        let n_prompt = prompt.map_or(0, |p| p.keys.ncols());
        let prompt_scores = prompt.map(|p| p.keys.transpose() * &q);
        let mut prompt_weights = DMatrix::zeros(n_prompt, nq);
        let mut attn = DMatrix::zeros(h, nq);
        let (ks, vs, qs) = (keys.as_slice(), values.as_slice(), q.as_slice());
        let mut scores = Vec::new();
        let mut cols = Vec::new();
        for qi in 0..nq {
            let col = queries.map_or(qi, |c| c[qi]);
            let (s, pos) = owner[col];
            let seg = &segments[s];
            if !seg.valid[pos] {
                continue;
            }
            let query = &qs[qi * dk..(qi + 1) * dk];
            scores.clear();
            cols.clear();
            if let Some(ps) = &prompt_scores {
                scores.extend_from_slice(&ps.as_slice()[qi * n_prompt..(qi + 1) * n_prompt]);
            }
            for t in 0..=pos {
                if seg.valid[t] {
                    let c = seg.start + t;
                    let key = &ks[c * dk..(c + 1) * dk];
                    scores.push(key.iter().zip(query).map(|(a, b)| a * b).sum());
                    cols.push(c);
                }
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for (k, w) in scores[..n_prompt].iter().enumerate() {
                prompt_weights[(k, qi)] = w / total;
            }
            let out = &mut attn.as_mut_slice()[qi * h..(qi + 1) * h];
            for (w, &c) in scores[n_prompt..].iter().zip(&cols) {
                let w = w / total;
                for (o, v) in out.iter_mut().zip(&vs[c * h..(c + 1) * h]) {
                    *o += w * v;
                }
            }
        }
        if let Some(p) = prompt {
            attn.gemm(1.0, &p.values, &prompt_weights, 1.0);
        }

        let mid = xq + &attn;
        let mut hidden = &b.w1 * mid;
        for mut c in hidden.column_iter_mut() {
            c += &b.b1;
            c.apply(|v| *v = v.max(0.0));
        }
        attn.gemm(1.0, &b.w2, &hidden, 1.0);
        attn
    }

    fn prompt_kv(&self, layer: usize, rows: &DMatrix<f64>) -> PromptKv {
        let b = &self.blocks[layer];
        PromptKv {
            keys: &b.wk * rows,
            values: &b.wv * rows,
        }
    }

    /// Runs the prompt rows alone through every layer, returning the rows
    /// entering each layer (length `L`).
    fn propagate_prompt(&self, first: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let valid = vec![true; first.ncols()];
        let seg = [Segment {
            start: 0,
            valid: &valid,
        }];
        let mut rows = Vec::with_capacity(self.config.layers);
        let mut current = first;
        for j in 0..self.config.layers {
            let next = if j + 1 < self.config.layers {
                Some(&current + self.block_delta(j, &current, None, &seg, None))
            } else {
                None
            };
            rows.push(current);
            match next {
                Some(n) => current = n,
                None => break,
            }
        }
        rows
    }

    /// Samples `n_p` vocabulary ids, embeds them as `p_1⁰` and records the
    /// prompt hidden states entering every later layer as `p_j⁰`.
    pub fn capture_initial_deep_prompt(&self, seed: u64) -> DeepPrompt {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let ids: Vec<u32> = (0..cfg.prompt_len)
            .map(|_| rng.random_range(cfg.first_content_id()..cfg.vocab as u32))
            .collect();
        let cols: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let first = self.embeddings.select_columns(cols.iter());
        let rows = self.propagate_prompt(first);
        DeepPrompt {
            initial: rows.iter().map(|m| m.transpose()).collect(),
            offsets: vec![DMatrix::zeros(cfg.prompt_len, cfg.hidden); cfg.layers],
            token_ids: ids,
        }
    }

    fn prompt_rows(&self, initial: &[DMatrix<f64>], offsets: &PromptOffsets) -> Result<Vec<DMatrix<f64>>, ModelError> {
        let (n_p, h, l) = (self.config.prompt_len, self.config.hidden, self.config.layers);
        let check = |m: &DMatrix<f64>| {
            if m.shape() != (n_p, h) {
                Err(ModelError::ShapeMismatch(format!(
                    "prompt offset is {}x{}, model expects {n_p}x{h}",
                    m.nrows(),
                    m.ncols()
                )))
            } else {
                Ok(())
            }
        };
        match offsets {
            PromptOffsets::None => Ok(initial.to_vec()),
            PromptOffsets::Input(p) => {
                check(p)?;
                Ok(self.propagate_prompt(&initial[0] + p.transpose()))
            }
            PromptOffsets::Deep(ps) => {
                if ps.len() != l {
                    return Err(ModelError::ShapeMismatch(format!(
                        "deep prompt has {} layers, model has {l}",
                        ps.len()
                    )));
                }
                ps.iter()
                    .zip(initial)
                    .map(|(p, init)| check(p).map(|_| init + p.transpose()))
                    .collect()
            }
        }
    }

    fn run(
        &self,
        initial: &[DMatrix<f64>],
        offsets: &PromptOffsets,
        batch: &Batch,
        mut trace: Option<&mut Trace>,
    ) -> Result<Logits, ModelError> {
        batch.validate(self.config.vocab)?;
        if batch.num_labels == 0 || batch.num_labels > self.config.label_words {
            return Err(ModelError::ShapeMismatch(format!(
                "{} label words requested, model has {}",
                batch.num_labels, self.config.label_words
            )));
        }
        let prompts = self.prompt_rows(initial, offsets)?;
        let segments: Vec<Segment<'_>> = (0..batch.len())
            .map(|i| Segment {
                start: i * batch.seq_len,
                valid: batch.mask_row(i),
            })
            .collect();
        let mask_cols: Vec<usize> = batch
            .mask_positions
            .iter()
            .enumerate()
            .map(|(i, p)| i * batch.seq_len + p)
            .collect();

        let caching = trace.is_none();
        let mut inputs = if caching {
            self.cache.lookup(batch, &prompts)
        } else {
            Vec::new()
        };
        let (start, mut x) = match inputs.last() {
            Some(x) => (inputs.len() - 1, (**x).clone()),
            None => {
                let ids: Vec<usize> = batch.input_ids.iter().map(|&id| id as usize).collect();
                (0, self.embeddings.select_columns(ids.iter()))
            }
        };

        let last = self.config.layers - 1;
        let mut out = DMatrix::zeros(0, 0);
        for (j, rows) in prompts.iter().enumerate().skip(start) {
            if caching && inputs.len() == j {
                inputs.push(Arc::new(x.clone()));
            }
            let kv = self.prompt_kv(j, rows);
            if let Some(t) = trace.as_deref_mut() {
                t.tokens.push(x.clone());
                t.prompt.push(rows.clone());
            }
            if j == last {
                let delta = self.block_delta(j, &x, Some(&kv), &segments, Some(&mask_cols));
                out = x.select_columns(mask_cols.iter()) + delta;
                if let Some(t) = trace.as_deref_mut() {
                    let full = self.block_delta(j, &x, Some(&kv), &segments, None);
                    t.tokens.push(&x + full);
                }
            } else {
                x += self.block_delta(j, &x, Some(&kv), &segments, None);
            }
        }
        if caching {
            self.cache.store(batch, &prompts, inputs);
        }

        let scores = self.head.rows(0, batch.num_labels) * out;
        Ok(scores.column_iter().map(|c| c.iter().copied().collect()).collect())
    }

    /// Label-word logits at each example's mask position, using the model's
    /// own initial prompt plus `offsets`.
    pub fn forward(&self, offsets: &PromptOffsets, batch: &Batch) -> Result<Logits, ModelError> {
        self.run(&self.initial, offsets, batch, None)
    }

    /// Forward pass with an explicit deep prompt (`None` means the default
    /// initial prompt with zero offsets).
    pub fn forward_deep(&self, prompt: Option<&DeepPrompt>, batch: &Batch) -> Result<Logits, ModelError> {
        match prompt {
            None => self.forward(&PromptOffsets::None, batch),
            Some(p) => {
                if p.layers() != self.config.layers {
                    return Err(ModelError::ShapeMismatch(format!(
                        "deep prompt has {} layers, model has {}",
                        p.layers(),
                        self.config.layers
                    )));
                }
                let initial: Vec<DMatrix<f64>> = p.initial.iter().map(|m| m.transpose()).collect();
                if initial
                    .iter()
                    .any(|m| m.shape() != (self.config.hidden, self.config.prompt_len))
                {
                    return Err(ModelError::ShapeMismatch("initial prompt shape".into()));
                }
                self.run(&initial, &PromptOffsets::Deep(p.offsets.clone()), batch, None)
            }
        }
    }

    /// Forward pass that also records every layer's hidden states.
    pub fn forward_traced(&self, offsets: &PromptOffsets, batch: &Batch) -> Result<(Logits, Trace), ModelError> {
        let mut trace = Trace {
            tokens: Vec::new(),
            prompt: Vec::new(),
        };
        let logits = self.run(&self.initial, offsets, batch, Some(&mut trace))?;
        Ok((logits, trace))
    }

    /// Runs a raw `S × H` sequence of input embeddings through the plain
    /// residual stack and measures how far the output is from
    /// `x₁ + Σ_j f_j(x_j)`, with each `f_j` re-evaluated on its recorded input.
    pub fn decomposition_check(&self, inputs: &DMatrix<f64>) -> Result<f64, ModelError> {
        if inputs.ncols() != self.config.hidden || inputs.nrows() == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "inputs are {}x{}, expected Sx{}",
                inputs.nrows(),
                inputs.ncols(),
                self.config.hidden
            )));
        }
        let x1 = inputs.transpose();
        let valid = vec![true; x1.ncols()];
        let seg = [Segment {
            start: 0,
            valid: &valid,
        }];
        let mut layer_inputs = Vec::with_capacity(self.config.layers);
        let mut x = x1.clone();
        for j in 0..self.config.layers {
            layer_inputs.push(x.clone());
            x = &x + self.block_delta(j, &x, None, &seg, None);
        }
        let mut sum = DMatrix::zeros(x1.nrows(), x1.ncols());
        for (j, xj) in layer_inputs.iter().enumerate().rev() {
            sum += self.block_delta(j, xj, None, &seg, None);
        }
        let reassembled = sum + &x1;
        Ok((x - reassembled).amax())
    }

    /// Word-embedding statistics followed by clipped hidden-state statistics
    /// for the input of every layer, from one pass over the train split with
    /// the initial prompt attached. Length `L + 1`; index 0 is the embeddings.
    pub fn layer_hidden_stats(&self, task: &FewShotTask) -> Result<Vec<LayerStats>, ModelError> {
        if task.train.is_empty() {
            return Err(ModelError::InvalidTask("train split is empty".into()));
        }
        let batch = Batch::from_examples(&task.train, task.classes)?;
        self.batch_hidden_stats(&batch)
    }

    /// [`ToyModel::layer_hidden_stats`] over an already assembled batch.
    pub fn batch_hidden_stats(&self, batch: &Batch) -> Result<Vec<LayerStats>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::InvalidTask("batch is empty".into()));
        }
        let (_, trace) = self.forward_traced(&PromptOffsets::None, batch)?;
        let mut stats = Vec::with_capacity(self.config.layers + 1);
        stats.push(observe_stats([self.embedding_table()], DEFAULT_CLIP_ROUNDS)?);
        for j in 0..self.config.layers {
            let tokens = &trace.tokens[j];
            let cols = (0..tokens.ncols())
                .filter(|&c| batch.attention_mask[c])
                .map(|c| tokens.column(c));
            let mut pooled: Vec<f64> = cols.flat_map(|c| c.iter().copied().collect::<Vec<_>>()).collect();
            pooled.extend(trace.prompt[j].iter().copied());
            let mut s = observe_stats([pooled.as_slice()], DEFAULT_CLIP_ROUNDS)?;
            s.layer = j + 1;
            stats.push(s);
        }
        Ok(stats)
    }

    /// Checkpoint layout (little-endian): magic `BBTM`, version u32, then
    /// vocab, hidden, layers, prompt_len, key_dim, ffn_dim, label_words as
    /// u32, seed u64, embedding_std, value_gain, ffn_gain, head_gain as f64, then every
    /// parameter as f32 in row-major `input × output` order: embeddings
    /// (V×H), per layer Wq (H×dk), Wk (H×dk), Wv (H×H), W1 (H×F), b1 (F),
    /// W2 (F×H), and finally the head (H×label_words).
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            c.vocab,
            c.hidden,
            c.layers,
            c.prompt_len,
            c.key_dim,
            c.ffn_dim,
            c.label_words,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&c.seed.to_le_bytes())?;
        for v in [c.embedding_std, c.value_gain, c.ffn_gain, c.head_gain] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut payload = Vec::new();
        let mut put = |m: &[f64]| {
            for v in m {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        };
        // column-major storage of the transposed matrices is exactly the
        // row-major layout of the input×output matrices
        put(self.embeddings.as_slice());
        for b in &self.blocks {
            put(b.wq.as_slice());
            put(b.wk.as_slice());
            put(b.wv.as_slice());
            put(b.w1.as_slice());
            put(b.b1.as_slice());
            put(b.w2.as_slice());
        }
        put(self.head.as_slice());
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut header = [0u8; 8 + 7 * 4 + 8 + 4 * 8];
        r.read_exact(&mut header)?;
        if &header[..4] != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let f64_at = |i: usize| f64::from_le_bytes(header[i..i + 8].try_into().unwrap());
        if u32_at(4) != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", u32_at(4))));
        }
        let dims: Vec<usize> = (0..7).map(|k| u32_at(8 + 4 * k) as usize).collect();
        let config = ToyConfig {
            vocab: dims[0],
            hidden: dims[1],
            layers: dims[2],
            prompt_len: dims[3],
            key_dim: dims[4],
            ffn_dim: dims[5],
            label_words: dims[6],
            seed: u64::from_le_bytes(header[36..44].try_into().unwrap()),
            embedding_std: f64_at(44),
            value_gain: f64_at(52),
            ffn_gain: f64_at(60),
            head_gain: f64_at(68),
        };
        config.validate()?;
        let (v, h, dk, f) = (config.vocab, config.hidden, config.key_dim, config.ffn_dim);
        let mut take = |rows: usize, cols: usize| -> Result<DMatrix<f64>, ModelError> {
            let mut buf = vec![0u8; rows * cols * 4];
            r.read_exact(&mut buf).map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => ModelError::Checkpoint("truncated parameter payload".into()),
                _ => ModelError::Io(e),
            })?;
            let vals: Vec<f64> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            Ok(DMatrix::from_column_slice(rows, cols, &vals))
        };
        let embeddings = take(h, v)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(Block {
                wq: take(dk, h)?,
                wk: take(dk, h)?,
                wv: take(h, h)?,
                w1: take(f, h)?,
                b1: take(f, 1)?.column(0).into_owned(),
                w2: take(h, f)?,
            });
        }
        let head = take(config.label_words, h)?;
        Self::assemble(config, embeddings, blocks, head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(io::BufReader::new(file))
    }
}
