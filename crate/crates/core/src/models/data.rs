use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::scalar::Scalar;
use crate::seeds::split_seed;
use crate::tensor::Tensor;

/// `batch` sequences of `seq` byte tokens with next-byte targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionBatch<S> {
    /// `[samples, in]`
    pub x: Tensor<S>,
    /// `[samples, out]`
    pub y: Tensor<S>,
}

/// A resumable stream of training batches.
pub trait BatchSource {
    type Batch;
    fn next_batch(&mut self) -> Self::Batch;
    fn position(&self) -> u64;
    fn seek(&mut self, position: u64);
}

/// Raw bytes split into a training prefix and a validation suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    train: Arc<[u8]>,
    val: Arc<[u8]>,
}

impl Corpus {
    /// Holds out the last `val_fraction` of the bytes for validation.
    pub fn from_bytes(bytes: &[u8], val_fraction: f64) -> Result<Self, ModelError> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(ModelError::Data(format!("validation fraction {val_fraction} outside (0, 1)")));
        }
        let val_len = (bytes.len() as f64 * val_fraction).round() as usize;
        let split = bytes.len() - val_len;
        if split < 2 || val_len < 2 {
            return Err(ModelError::Data(format!(
                "corpus of {} bytes is too small to split",
                bytes.len()
            )));
        }
        Ok(Self {
            train: bytes[..split].into(),
            val: bytes[split..].into(),
        })
    }

    pub fn load(path: &Path, val_fraction: f64) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, val_fraction)
    }

    pub fn train(&self) -> &Arc<[u8]> {
        &self.train
    }

    pub fn val(&self) -> &Arc<[u8]> {
        &self.val
    }

    /// Byte offset where validation data starts.
    pub fn split_offset(&self) -> usize {
        self.train.len()
    }
}

/// Identity byte tokenizer.
pub fn encode(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

pub fn decode(tokens: &[usize]) -> Option<Vec<u8>> {
    tokens.iter().map(|&t| u8::try_from(t).ok()).collect()
}

/// Random-window sampler. Every epoch visits each start offset once in a
/// seeded order, then reshuffles.
#[derive(Debug, Clone)]
pub struct BatchIter {
    data: Arc<[u8]>,
    batch: usize,
    ctx: usize,
    seed: u64,
    position: u64,
    order: Option<(u64, Vec<u32>)>,
}

impl BatchIter {
    pub fn new(data: Arc<[u8]>, batch: usize, ctx: usize, seed: u64) -> Result<Self, ModelError> {
        if batch == 0 || ctx == 0 {
            return Err(ModelError::Data("batch size and context length must be positive".into()));
        }
        if data.len() <= ctx {
            return Err(ModelError::Data(format!(
                "corpus of {} bytes is too short for context length {ctx}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            batch,
            ctx,
            seed,
            position: 0,
            order: None,
        })
    }

    pub fn starts_per_epoch(&self) -> usize {
        self.data.len() - self.ctx
    }

    fn start(&mut self, index: u64) -> usize {
        let count = self.starts_per_epoch() as u64;
        let epoch = index / count;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<u32> = (0..count as u32).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed(self.seed, epoch)));
            self.order = Some((epoch, perm));
        }
        self.order.as_ref().expect("order just set").1[(index % count) as usize] as usize
    }

    /// The next single window, as `(inputs, targets)`.
    pub fn next_window(&mut self) -> (Vec<usize>, Vec<usize>) {
        let s = self.start(self.position);
        self.position += 1;
        let w = &self.data[s..s + self.ctx + 1];
        (encode(&w[..self.ctx]), encode(&w[1..]))
    }
}

impl BatchSource for BatchIter {
    type Batch = TokenBatch;

    fn next_batch(&mut self) -> TokenBatch {
        let mut inputs = Vec::with_capacity(self.batch * self.ctx);
        let mut targets = Vec::with_capacity(self.batch * self.ctx);
        for _ in 0..self.batch {
            let (i, t) = self.next_window();
            inputs.extend(i);
            targets.extend(t);
        }
        TokenBatch {
            batch: self.batch,
            seq: self.ctx,
            inputs,
            targets,
        }
    }

    fn position(&self) -> u64 {
        self.position
    }

    fn seek(&mut self, position: u64) {
        self.position = position;
    }
}

/// Cycles through a fixed list of batches.
#[derive(Debug, Clone)]
pub struct FixedBatches<B> {
    batches: Vec<B>,
    position: u64,
}

impl<B: Clone> FixedBatches<B> {
    pub fn new(batches: Vec<B>) -> Result<Self, ModelError> {
        if batches.is_empty() {
            return Err(ModelError::Data("no batches".into()));
        }
        Ok(Self { batches, position: 0 })
    }

    pub fn batches(&self) -> &[B] {
        &self.batches
    }
}

impl<B: Clone> BatchSource for FixedBatches<B> {
    type Batch = B;

    fn next_batch(&mut self) -> B {
        let b = self.batches[(self.position % self.batches.len() as u64) as usize].clone();
        self.position += 1;
        b
    }

    fn position(&self) -> u64 {
        self.position
    }

    fn seek(&mut self, position: u64) {
        self.position = position;
    }
}

/// Non-overlapping windows covering `data` in order, grouped into batches
/// of at most `batch` sequences. Short data yields one shorter window.
pub fn eval_batches(data: &[u8], batch: usize, ctx: usize) -> Result<Vec<TokenBatch>, ModelError> {
    if data.len() < 2 {
        return Err(ModelError::Data("evaluation data needs at least 2 bytes".into()));
    }
    if batch == 0 || ctx == 0 {
        return Err(ModelError::Data("batch size and context length must be positive".into()));
    }
    let seq = ctx.min(data.len() - 1);
    let windows: Vec<usize> = (0..).map(|i| i * seq).take_while(|s| s + seq < data.len()).collect();
    Ok(windows
        .chunks(batch)
        .map(|group| {
            let mut inputs = Vec::with_capacity(group.len() * seq);
            let mut targets = Vec::with_capacity(group.len() * seq);
            for &s in group {
                inputs.extend(encode(&data[s..s + seq]));
                targets.extend(encode(&data[s + 1..s + seq + 1]));
            }
            TokenBatch {
                batch: group.len(),
                seq,
                inputs,
                targets,
            }
        })
        .collect())
}

/// Text source for the synthetic corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    A,
    B,
    /// Sentences alternate between both domains.
    Mixed,
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a" | "A" => Ok(Domain::A),
            "b" | "B" => Ok(Domain::B),
            "mixed" => Ok(Domain::Mixed),
            _ => Err(format!("unknown domain '{s}' (a|b|mixed)")),
        }
    }
}

const WORDS_A: [&str; 32] = [
    "the", "river", "runs", "past", "old", "stone", "houses", "where", "children", "play", "under", "tall", "green",
    "trees", "and", "birds", "sing", "in", "morning", "light", "while", "a", "quiet", "wind", "moves", "over",
    "fields", "of", "wheat", "near", "small", "town",
];

const WORDS_B: [&str; 32] = [
    "add", "two", "cups", "flour", "to", "bowl", "mix", "with", "warm", "milk", "until", "smooth", "then", "bake",
    "at", "high", "heat", "for", "ten", "minutes", "stir", "sugar", "butter", "salt", "slowly", "pour", "batter",
    "into", "pan", "cool", "serve", "fresh",
];

/// Fixed successor table: each word has three likely followers.
fn successors(domain_key: u64, words: usize) -> Vec<[usize; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(domain_key);
    (0..words)
        .map(|_| [rng.random_range(0..words), rng.random_range(0..words), rng.random_range(0..words)])
        .collect()
}

fn sentence(rng: &mut ChaCha8Rng, words: &[&str], next: &[[usize; 3]], out: &mut Vec<u8>, sep: &[u8]) {
    let len = rng.random_range(5..=12);
    let mut w = rng.random_range(0..words.len());
    for i in 0..len {
        let word = words[w].as_bytes();
        if i == 0 {
            out.push(word[0].to_ascii_uppercase());
            out.extend_from_slice(&word[1..]);
        } else {
            out.push(b' ');
            out.extend_from_slice(word);
        }
        let r: f64 = rng.random();
        w = next[w][if r < 0.6 {
            0
        } else if r < 0.9 {
            1
        } else {
            2
        }];
    }
    out.extend_from_slice(sep);
}

/// Deterministic pseudo-text of exactly `len` bytes. The grammar of each
/// domain is fixed; `seed` only selects the sampled path.
pub fn synthetic_text(domain: Domain, len: usize, seed: u64) -> Vec<u8> {
    let next_a = successors(0xA11CE, WORDS_A.len());
    let next_b = successors(0xB0B, WORDS_B.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len + 128);
    let mut turn = 0u64;
    while out.len() < len {
        let use_a = match domain {
            Domain::A => true,
            Domain::B => false,
            Domain::Mixed => turn % 2 == 0,
        };
        if use_a {
            sentence(&mut rng, &WORDS_A, &next_a, &mut out, b". ");
        } else {
            sentence(&mut rng, &WORDS_B, &next_b, &mut out, b";\n");
        }
        turn += 1;
    }
    out.truncate(len);
    out
}

impl<S: Scalar> RegressionBatch<S> {
    pub fn new(x: Tensor<S>, y: Tensor<S>) -> Result<Self, ModelError> {
        match (x.shape(), y.shape()) {
            ([n, _], [n2, _]) if n == n2 => Ok(Self { x, y }),
            (a, b) => Err(ModelError::Data(format!("regression shapes {a:?} and {b:?} disagree"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_targets_shift_by_one() {
        let mut it = BatchIter::new(Arc::from(&b"abcd"[..]), 1, 3, 0).unwrap();
        let b = it.next_batch();
        assert_eq!(decode(&b.inputs).unwrap(), b"abc");
        assert_eq!(decode(&b.targets).unwrap(), b"bcd");
        assert!(BatchIter::new(Arc::from(&b"abc"[..]), 1, 3, 0).is_err());
    }

    #[test]
    fn epochs_are_permutations_and_streams_repeat() {
        let data: Arc<[u8]> = (0..=200u8).collect::<Vec<_>>().into();
        let mut a = BatchIter::new(data.clone(), 1, 8, 7).unwrap();
        let mut b = BatchIter::new(data, 1, 8, 7).unwrap();
        let n = a.starts_per_epoch();
        let mut seen: Vec<usize> = (0..n).map(|_| a.next_window().0[0]).collect();
        let other: Vec<usize> = (0..n).map(|_| b.next_window().0[0]).collect();
        assert_eq!(seen, other);
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let next = a.next_batch();
        b.seek(n as u64);
        assert_eq!(b.next_batch(), next);
    }

    #[test]
    fn eval_windows_cover_data_in_order() {
        let data = b"0123456789";
        let batches = eval_batches(data, 2, 3).unwrap();
        let inputs: Vec<u8> = batches.iter().flat_map(|b| decode(&b.inputs).unwrap()).collect();
        assert_eq!(inputs, b"012345678");
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[1].batch, 1);
        let short = eval_batches(b"xyz", 4, 16).unwrap();
        assert_eq!(short[0].seq, 2);
    }

    #[test]
    fn corpus_split_is_disjoint() {
        let c = Corpus::from_bytes(&[1u8; 100], 0.1).unwrap();
        assert_eq!(c.train().len(), 90);
        assert_eq!(c.val().len(), 10);
        assert_eq!(c.split_offset(), 90);
        assert!(Corpus::from_bytes(&[1u8; 3], 0.1).is_err());
        assert!(Corpus::from_bytes(&[1u8; 100], 1.0).is_err());
    }

    #[test]
    fn tokenizer_round_trips() {
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(decode(&encode(&all)).unwrap(), all);
        assert!(decode(&[256]).is_none());
    }

    #[test]
    fn synthetic_domains_differ_and_are_deterministic() {
        let a = synthetic_text(Domain::A, 2000, 1);
        assert_eq!(a, synthetic_text(Domain::A, 2000, 1));
        assert_ne!(a, synthetic_text(Domain::A, 2000, 2));
        let b = synthetic_text(Domain::B, 2000, 1);
        assert!(b.contains(&b'\n') && !a.contains(&b'\n'));
        let m = synthetic_text(Domain::Mixed, 2000, 1);
        assert_eq!(m.len(), 2000);
        assert!(m.contains(&b'\n') && m.windows(2).any(|w| w == b". "));
    }
}
