use std::cmp::Ordering;

use candle_core::{Device, Tensor};
use rand::Rng as _;

use super::{log_softmax_f64, Captioner};
use crate::data::{SceneInstance, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Decoded captions for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub sequences: Vec<TokenSequence>,
    /// Sum of `per_token_log_probs[k]`.
    pub log_probs: Vec<f64>,
    pub per_token_log_probs: Vec<Vec<f64>>,
}

impl DecodeResult {
    fn push(&mut self, vocab: &Vocabulary, ids: Vec<u32>, per_token: Vec<f64>) {
        let text = vocab.detokenize(&ids);
        self.log_probs.push(per_token.iter().sum());
        self.per_token_log_probs.push(per_token);
        self.sequences.push(TokenSequence { ids, text });
    }

    fn empty() -> Self {
        Self {
            sequences: Vec::new(),
            log_probs: Vec::new(),
            per_token_log_probs: Vec::new(),
        }
    }
}

fn repeat_rows(memory: &Tensor, times: usize) -> Result<Tensor> {
    let b = memory.dim(0)?;
    let idx: Vec<u32> = (0..b as u32).flat_map(|i| std::iter::repeat_n(i, times)).collect();
    Ok(memory.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?)
}

fn is_emittable(token: usize) -> bool {
    token != Vocabulary::PAD_ID as usize && token != Vocabulary::BOS_ID as usize
}

/// Argmax decoding; ties go to the lowest token index.
pub fn greedy(model: &Captioner, vocab: &Vocabulary, memory: &Tensor) -> Result<Vec<DecodeResult>> {
    let rows = memory.dim(0)?;
    let mut state = model.start_decoding(memory)?;
    let mut seqs: Vec<Vec<u32>> = vec![vec![Vocabulary::BOS_ID]; rows];
    let mut per_token: Vec<Vec<f64>> = vec![Vec::new(); rows];
    let mut done = vec![false; rows];
    for _ in 0..model.max_len() {
        let last: Vec<u32> = seqs.iter().map(|s| *s.last().expect("non-empty")).collect();
        let logits = model.decode_step(&mut state, &last)?;
        for (i, row) in logits.iter().enumerate() {
            if done[i] {
                continue;
            }
            let lp = log_softmax_f64(row, 1.0);
            let mut best = None::<(usize, f64)>;
            for (tok, &v) in lp.iter().enumerate() {
                if is_emittable(tok) && best.is_none_or(|(_, b)| v > b) {
                    best = Some((tok, v));
                }
            }
            let (tok, v) = best.expect("vocabulary has emittable tokens");
            seqs[i].push(tok as u32);
            per_token[i].push(v);
            done[i] = tok as u32 == Vocabulary::EOS_ID;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(seqs
        .into_iter()
        .zip(per_token)
        .map(|(ids, lp)| {
            let mut r = DecodeResult::empty();
            r.push(vocab, ids, lp);
            r
        })
        .collect())
}

/// Draws `n` independent captions per scene from the tempered model
/// distribution, recording log-probabilities under that distribution.
pub fn sample_sequences(
    model: &Captioner,
    vocab: &Vocabulary,
    memory: &Tensor,
    n: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<DecodeResult>> {
    if n == 0 || !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "sampling needs n >= 1 and temperature > 0 (got {n}, {temperature})"
        )));
    }
    let scenes = memory.dim(0)?;
    let rows = scenes * n;
    let mut state = model.start_decoding(&repeat_rows(memory, n)?)?;
    let mut seqs: Vec<Vec<u32>> = vec![vec![Vocabulary::BOS_ID]; rows];
    let mut per_token: Vec<Vec<f64>> = vec![Vec::new(); rows];
    let mut done = vec![false; rows];
    for _ in 0..model.max_len() {
        let last: Vec<u32> = seqs.iter().map(|s| *s.last().expect("non-empty")).collect();
        let logits = model.decode_step(&mut state, &last)?;
        for (i, row) in logits.iter().enumerate() {
            if done[i] {
                continue;
            }
            let lp = log_softmax_f64(row, temperature);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut choice = None;
            for (tok, &v) in lp.iter().enumerate() {
                if !is_emittable(tok) {
                    continue;
                }
                acc += v.exp();
                choice = Some(tok);
                if u < acc {
                    break;
                }
            }
            let tok = choice.expect("vocabulary has emittable tokens");
            seqs[i].push(tok as u32);
            per_token[i].push(lp[tok]);
            done[i] = tok as u32 == Vocabulary::EOS_ID;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    let mut out: Vec<DecodeResult> = (0..scenes).map(|_| DecodeResult::empty()).collect();
    for (i, (ids, lp)) in seqs.into_iter().zip(per_token).enumerate() {
        out[i / n].push(vocab, ids, lp);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    per_token: Vec<f64>,
    score: f64,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        self.score / self.per_token.len().max(1) as f64
    }
}

/// Higher length-normalized score first; ties by ascending token ids.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized()
        .total_cmp(&a.normalized())
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over all scenes in `memory` at once.
///
/// Each step keeps the `beam_size` best expansions of the live hypotheses;
/// selected expansions ending in EOS (or reaching `max_len`) are finished.
/// Decoding continues until no hypothesis is live, and the `beam_size` best
/// finished hypotheses are returned ranked by length-normalized
/// log-probability. With `beam_size = 1` this is greedy decoding.
pub fn beam_search(
    model: &Captioner,
    vocab: &Vocabulary,
    memory: &Tensor,
    beam_size: usize,
) -> Result<Vec<DecodeResult>> {
    if beam_size == 0 {
        return Err(Error::InvalidInput("beam_size must be at least 1".into()));
    }
    let k = beam_size;
    let scenes = memory.dim(0)?;
    let mut state = model.start_decoding(&repeat_rows(memory, k)?)?;
    let mut live: Vec<Vec<Hypothesis>> = (0..scenes)
        .map(|_| {
            vec![Hypothesis {
                tokens: vec![Vocabulary::BOS_ID],
                per_token: Vec::new(),
                score: 0.0,
            }]
        })
        .collect();
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); scenes];

    for step in 0..model.max_len() {
        if live.iter().all(Vec::is_empty) {
            break;
        }
        let last: Vec<u32> = (0..scenes * k)
            .map(|row| {
                live[row / k]
                    .get(row % k)
                    .map_or(Vocabulary::PAD_ID, |h| *h.tokens.last().expect("non-empty"))
            })
            .collect();
        let logits = model.decode_step(&mut state, &last)?;
        let at_limit = step + 1 == model.max_len();
        let mut reorder = Vec::with_capacity(scenes * k);
        for s in 0..scenes {
            let mut candidates: Vec<(usize, Hypothesis)> = Vec::new();
            for (slot, h) in live[s].iter().enumerate() {
                let lp = log_softmax_f64(&logits[s * k + slot], 1.0);
                for (tok, &v) in lp.iter().enumerate() {
                    if !is_emittable(tok) {
                        continue;
                    }
                    let mut tokens = h.tokens.clone();
                    tokens.push(tok as u32);
                    let mut per_token = h.per_token.clone();
                    per_token.push(v);
                    candidates.push((slot, Hypothesis { tokens, per_token, score: h.score + v }));
                }
            }
            candidates.sort_by(|a, b| rank(&a.1, &b.1));
            candidates.truncate(k);
            let mut next = Vec::with_capacity(k);
            for (slot, h) in candidates {
                if at_limit || h.tokens.last() == Some(&Vocabulary::EOS_ID) {
                    finished[s].push(h);
                } else {
                    reorder.push((s * k + slot) as u32);
                    next.push(h);
                }
            }
            // Unused slots replay the scene's first row; their output is ignored.
            while reorder.len() < (s + 1) * k {
                reorder.push((s * k) as u32);
            }
            live[s] = next;
        }
        state.select(&reorder)?;
    }

    Ok(finished
        .into_iter()
        .map(|mut hyps| {
            hyps.sort_by(rank);
            hyps.truncate(k);
            let mut r = DecodeResult::empty();
            for h in hyps {
                r.push(vocab, h.tokens, h.per_token);
            }
            r
        })
        .collect())
}

/// Best caption per scene, decoding `chunk` scenes at a time; `beam_size`
/// 1 is greedy.
pub fn caption_scenes(
    model: &Captioner,
    vocab: &Vocabulary,
    scenes: &[&SceneInstance],
    beam_size: usize,
    chunk: usize,
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::with_capacity(scenes.len());
    for part in scenes.chunks(chunk.max(1)) {
        let memory = model.encode_scenes(part)?;
        let results = if beam_size == 1 {
            greedy(model, vocab, &memory)?
        } else {
            beam_search(model, vocab, &memory, beam_size)?
        };
        out.extend(results.into_iter().map(|mut r| r.sequences.swap_remove(0)));
    }
    Ok(out)
}
