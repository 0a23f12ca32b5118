use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelError, ToyConfig, LABEL_WORD_BASE, MASK_ID, SEP_ID};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// Synthetic task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Two classes, each marked by tokens from its own motif pool.
    Sentiment,
    /// Many classes with one motif pool per class.
    Topic,
    /// Two segments split by a separator; label 1 when both segments share
    /// a topic.
    Pair,
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentiment" => Ok(TaskKind::Sentiment),
            "topic" => Ok(TaskKind::Topic),
            "pair" => Ok(TaskKind::Pair),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskParams {
    pub kind: TaskKind,
    pub classes: usize,
    pub shots: usize,
    /// Content tokens per example, excluding the mask (and separator).
    pub seq_len: usize,
    pub test_per_class: usize,
    /// Motif tokens planted in each example (per segment for pairs).
    pub motifs: usize,
    /// Tokens in each class's motif pool.
    pub pool_size: usize,
    pub vocab: usize,
    pub label_words: usize,
    /// Sampling seed; motif pools depend only on kind and class count, so
    /// different seeds are different splits of the same task.
    pub seed: u64,
}

impl Default for TaskParams {
    fn default() -> Self {
        let model = ToyConfig::default();
        Self {
            kind: TaskKind::Sentiment,
            classes: 2,
            shots: 16,
            seq_len: 6,
            test_per_class: 100,
            motifs: 3,
            pool_size: 4,
            vocab: model.vocab,
            label_words: model.label_words,
            seed: 0,
        }
    }
}

impl TaskParams {
    pub fn sentiment(shots: usize, seed: u64) -> Self {
        Self {
            shots,
            seed,
            ..Self::default()
        }
    }

    pub fn topic(classes: usize, shots: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Topic,
            classes,
            shots,
            seed,
            ..Self::default()
        }
    }

    pub fn pair(shots: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::Pair,
            shots,
            seed,
            ..Self::default()
        }
    }

    /// Adopts the vocabulary layout of a model.
    pub fn for_model(mut self, config: &ToyConfig) -> Self {
        self.vocab = config.vocab;
        self.label_words = config.label_words;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub name: String,
    pub kind: TaskKind,
    pub classes: usize,
    pub shots: usize,
    /// Verbalizer: class `c` is read from label word `label_words[c]`.
    pub label_words: Vec<u32>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Serialize, Deserialize)]
struct TaskHeader {
    name: String,
    kind: TaskKind,
    classes: usize,
    shots: usize,
    label_words: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    split: String,
    tokens: Vec<u32>,
    label: usize,
}

struct Pools {
    motifs: Vec<Vec<u32>>,
    neutral: Vec<u32>,
}

impl FewShotTask {
    /// Generates train and dev splits with exactly `shots` examples per
    /// class and a disjoint test split with `test_per_class` per class.
    pub fn generate(params: &TaskParams) -> Result<Self, ModelError> {
        let p = params;
        if p.classes < 2 {
            return Err(ModelError::InvalidTask(format!(
                "need at least 2 classes, got {}",
                p.classes
            )));
        }
        if p.shots == 0 {
            return Err(ModelError::InvalidTask("shots must be positive".into()));
        }
        if p.classes > p.label_words {
            return Err(ModelError::InvalidTask(format!(
                "{} classes exceed the {} available label words",
                p.classes, p.label_words
            )));
        }
        if p.kind == TaskKind::Sentiment && p.classes != 2 {
            return Err(ModelError::InvalidTask("sentiment tasks have exactly 2 classes".into()));
        }
        if p.kind == TaskKind::Pair && p.classes != 2 {
            return Err(ModelError::InvalidTask("pair tasks have exactly 2 classes".into()));
        }
        if p.seq_len == 0 || p.motifs == 0 || p.motifs > p.seq_len || p.pool_size == 0 {
            return Err(ModelError::InvalidTask(format!(
                "need 0 < motifs ({}) <= seq_len ({}) and a non-empty pool",
                p.motifs, p.seq_len
            )));
        }
        let pools = Self::pools(p)?;

        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut seen = HashSet::new();
        let split = |count: usize, rng: &mut ChaCha8Rng, seen: &mut HashSet<Vec<u32>>| {
            let mut out = Vec::with_capacity(count * p.classes);
            for label in 0..p.classes {
                let mut made = 0;
                let mut attempts = 0;
                while made < count {
                    let tokens = Self::sample(p, &pools, label, rng);
                    attempts += 1;
                    if seen.insert(tokens.clone()) || attempts > 1000 * count {
                        out.push(Example { tokens, label });
                        made += 1;
                    }
                }
            }
            out.shuffle(rng);
            out
        };
        let train = split(p.shots, &mut rng, &mut seen);
        let dev = split(p.shots, &mut rng, &mut seen);
        let test = split(p.test_per_class, &mut rng, &mut seen);

        let name = match p.kind {
            TaskKind::Sentiment => "sentiment".to_string(),
            TaskKind::Topic => format!("topic{}", p.classes),
            TaskKind::Pair => "pair".to_string(),
        };
        Ok(Self {
            name,
            kind: p.kind,
            classes: p.classes,
            shots: p.shots,
            label_words: (0..p.classes as u32).map(|c| LABEL_WORD_BASE + c).collect(),
            train,
            dev,
            test,
        })
    }

    fn pools(p: &TaskParams) -> Result<Pools, ModelError> {
        let first = LABEL_WORD_BASE + p.label_words as u32;
        let mut content: Vec<u32> = (first..p.vocab as u32).collect();
        let groups = match p.kind {
            TaskKind::Pair => 4,
            _ => p.classes,
        };
        if content.len() < groups * p.pool_size + 1 {
            return Err(ModelError::InvalidTask(format!(
                "vocabulary has {} content tokens, need more than {}",
                content.len(),
                groups * p.pool_size
            )));
        }
        let kind_tag = match p.kind {
            TaskKind::Sentiment => 1,
            TaskKind::Topic => 2,
            TaskKind::Pair => 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0x7a5c_0000 + kind_tag * 1000 + groups as u64);
        content.shuffle(&mut rng);
        let motifs = content.chunks(p.pool_size).take(groups).map(|c| c.to_vec()).collect();
        let neutral = content[groups * p.pool_size..].to_vec();
        Ok(Pools { motifs, neutral })
    }

    fn segment(len: usize, motifs: usize, pool: &[u32], neutral: &[u32], rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut tokens: Vec<u32> = (0..len).map(|_| neutral[rng.random_range(0..neutral.len())]).collect();
        let mut positions: Vec<usize> = (0..len).collect();
        positions.shuffle(rng);
        for &i in &positions[..motifs] {
            tokens[i] = pool[rng.random_range(0..pool.len())];
        }
        tokens
    }

    fn sample(p: &TaskParams, pools: &Pools, label: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        match p.kind {
            TaskKind::Sentiment | TaskKind::Topic => {
                let mut t = Self::segment(p.seq_len, p.motifs, &pools.motifs[label], &pools.neutral, rng);
                t.push(MASK_ID);
                t
            }
            TaskKind::Pair => {
                let topics = pools.motifs.len();
                let a = rng.random_range(0..topics);
                let b = if label == 1 {
                    a
                } else {
                    (a + rng.random_range(1..topics)) % topics
                };
                let half = p.seq_len.div_ceil(2);
                let m = p.motifs.min(half);
                let mut t = Self::segment(half, m, &pools.motifs[a], &pools.neutral, rng);
                t.push(SEP_ID);
                t.extend(Self::segment(half, m, &pools.motifs[b], &pools.neutral, rng));
                t.push(MASK_ID);
                t
            }
        }
    }

    pub fn labels(examples: &[Example]) -> Vec<usize> {
        examples.iter().map(|e| e.label).collect()
    }

    /// JSON Lines: one header object, then one record per example.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let header = TaskHeader {
            name: self.name.clone(),
            kind: self.kind,
            classes: self.classes,
            shots: self.shots,
            label_words: self.label_words.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("serializable"))?;
        for (split, examples) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            for e in examples {
                let rec = TaskRecord {
                    split: split.to_string(),
                    tokens: e.tokens.clone(),
                    label: e.label,
                };
                writeln!(w, "{}", serde_json::to_string(&rec).expect("serializable"))?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, ModelError> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| ModelError::InvalidTask("empty task file".into()))??;
        let header: TaskHeader =
            serde_json::from_str(&first).map_err(|e| ModelError::InvalidTask(format!("bad header: {e}")))?;
        let mut task = FewShotTask {
            name: header.name,
            kind: header.kind,
            classes: header.classes,
            shots: header.shots,
            label_words: header.label_words,
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TaskRecord =
                serde_json::from_str(&line).map_err(|e| ModelError::InvalidTask(format!("line {}: {e}", n + 2)))?;
            if rec.label >= task.classes {
                return Err(ModelError::InvalidTask(format!(
                    "line {}: label {} out of range",
                    n + 2,
                    rec.label
                )));
            }
            let e = Example {
                tokens: rec.tokens,
                label: rec.label,
            };
            match rec.split.as_str() {
                "train" => task.train.push(e),
                "dev" => task.dev.push(e),
                "test" => task.test.push(e),
                other => {
                    return Err(ModelError::InvalidTask(format!(
                        "line {}: unknown split `{other}`",
                        n + 2
                    )))
                }
            }
        }
        Ok(task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(examples: &[Example], classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for e in examples {
            c[e.label] += 1;
        }
        c
    }

    #[test]
    fn sixteen_shot_binary() {
        let t = FewShotTask::generate(&TaskParams::sentiment(16, 1)).unwrap();
        assert_eq!(t.train.len(), 32);
        assert_eq!(t.dev.len(), 32);
        assert_eq!(count(&t.train, 2), vec![16, 16]);
        assert_eq!(count(&t.dev, 2), vec![16, 16]);
        assert!(t.test.len() >= 100);
    }

    #[test]
    fn fourteen_classes() {
        let t = FewShotTask::generate(&TaskParams::topic(14, 16, 2)).unwrap();
        assert_eq!(t.train.len(), 224);
        let words: HashSet<u32> = t.label_words.iter().copied().collect();
        assert_eq!(words.len(), 14);
    }

    #[test]
    fn test_split_is_balanced_and_disjoint() {
        let t = FewShotTask::generate(&TaskParams::topic(4, 8, 3)).unwrap();
        let counts = count(&t.test, 4);
        let majority = *counts.iter().max().unwrap() as f64 / t.test.len() as f64;
        assert!((majority - 0.25).abs() <= 0.02);
        let seen: HashSet<&Vec<u32>> = t.train.iter().chain(&t.dev).map(|e| &e.tokens).collect();
        assert!(t.test.iter().all(|e| !seen.contains(&e.tokens)));
    }

    #[test]
    fn every_example_ends_with_mask() {
        for params in [
            TaskParams::sentiment(4, 0),
            TaskParams::pair(4, 0),
            TaskParams::topic(5, 4, 0),
        ] {
            let t = FewShotTask::generate(&params).unwrap();
            assert!(t.train.iter().all(|e| *e.tokens.last().unwrap() == MASK_ID));
        }
        let pair = FewShotTask::generate(&TaskParams::pair(4, 0)).unwrap();
        assert!(pair.train.iter().all(|e| e.tokens.contains(&SEP_ID)));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(FewShotTask::generate(&TaskParams::topic(17, 4, 0)).is_err());
        assert!(FewShotTask::generate(&TaskParams::topic(1, 4, 0)).is_err());
        assert!(FewShotTask::generate(&TaskParams::topic(3, 0, 0)).is_err());
    }

    #[test]
    fn same_seed_same_task_and_jsonl_roundtrip() {
        let a = FewShotTask::generate(&TaskParams::pair(8, 9)).unwrap();
        assert_eq!(a, FewShotTask::generate(&TaskParams::pair(8, 9)).unwrap());
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf).unwrap();
        let b = FewShotTask::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(a, b);
    }
}
