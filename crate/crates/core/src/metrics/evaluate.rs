use std::collections::BTreeMap;

use super::report::{CaptionSample, EvalReport, MetricValues, REPORT_SCHEMA_VERSION};
use super::{corpus_bleu4, corpus_cider, rep_n, retrieval_eval, rouge_l, DocumentFrequencies};
use crate::captioner::{caption_scenes, Captioner};
use crate::data::{SceneInstance, Vocabulary};
use crate::dual_encoder::{similarity, DualEncoder};
use crate::error::{Error, Result};

/// Encoders used for score-based and retrieval metrics; any may be absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct Scorers<'a> {
    pub raw: Option<&'a DualEncoder>,
    pub discriminator: Option<&'a DualEncoder>,
    pub retrieval: Option<&'a DualEncoder>,
    /// Multiplier of the score metrics.
    pub w: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub tag: String,
    pub corpus: String,
    pub beam_size: usize,
    pub batch: usize,
    pub num_samples: usize,
    pub checkpoints: BTreeMap<String, String>,
}

fn mean_score(enc: &DualEncoder, scenes: &[&SceneInstance], caps: &[&[u32]], w: f64, batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    for (s, c) in scenes.chunks(batch).zip(caps.chunks(batch)) {
        sum += enc.reward_scores(s, c, w)?.iter().sum::<f64>();
    }
    Ok(sum / scenes.len() as f64)
}

fn retrieval_matrix(enc: &DualEncoder, scenes: &[&SceneInstance], caps: &[&[u32]], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut images = Vec::new();
    let mut texts = Vec::new();
    for (s, c) in scenes.chunks(batch).zip(caps.chunks(batch)) {
        images.push(enc.embed_scenes(s)?.as_tensor().clone());
        texts.push(enc.embed_texts(c)?.as_tensor().clone());
    }
    let v = crate::dual_encoder::EmbeddingMatrix::new(candle_core::Tensor::cat(&images, 0)?);
    let t = crate::dual_encoder::EmbeddingMatrix::new(candle_core::Tensor::cat(&texts, 0)?);
    let s = similarity(&t, &v)?.to_vec2()?;
    Ok(s.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect())
}

/// Captions every scene with `captioner` and scores the result. Reference
/// metrics use document frequencies of the evaluated split. A failing
/// scorer leaves its metrics `None` and records the error.
pub fn evaluate_checkpoint(
    captioner: &Captioner,
    vocab: &Vocabulary,
    scenes: &[&SceneInstance],
    scorers: Scorers<'_>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput(format!("split `{}` is empty", opts.corpus)));
    }
    let captions = caption_scenes(captioner, vocab, scenes, opts.beam_size, opts.batch)?;
    let texts: Vec<&str> = captions.iter().map(|c| c.text.as_str()).collect();
    let content: Vec<Vec<u32>> = captions.iter().map(|c| c.content()).collect();
    let content_refs: Vec<&[u32]> = content.iter().map(Vec::as_slice).collect();
    let mut m = MetricValues::default();
    let mut errors = BTreeMap::new();

    let ref_sets: Vec<Vec<&str>> = scenes
        .iter()
        .map(|s| s.references.iter().map(String::as_str).collect())
        .collect();
    // empty captions cannot be scored by n-gram metrics
    if texts.iter().any(|t| t.trim().is_empty()) {
        errors.insert("reference_metrics".to_owned(), "at least one caption is empty".to_owned());
    } else {
        let pairs: Vec<(&str, &[&str])> = texts.iter().copied().zip(ref_sets.iter().map(Vec::as_slice)).collect();
        match corpus_bleu4(&pairs) {
            Ok(v) => m.bleu4 = Some(v),
            Err(e) => drop(errors.insert("bleu4".to_owned(), e.to_string())),
        }
        m.rouge_l = Some(pairs.iter().map(|(c, r)| rouge_l(c, r)).sum::<f64>() / pairs.len() as f64);
        match DocumentFrequencies::from_reference_sets(&ref_sets).and_then(|df| corpus_cider(&pairs, &df)) {
            Ok(v) => m.cider = Some(v),
            Err(e) => drop(errors.insert("cider".to_owned(), e.to_string())),
        }
    }
    m.rep1 = Some(rep_n(&texts, 1)?);
    m.rep2 = Some(rep_n(&texts, 2)?);
    m.rep3 = Some(rep_n(&texts, 3)?);
    m.rep4 = Some(rep_n(&texts, 4)?);

    let batch = opts.batch.max(1);
    if let Some(enc) = scorers.raw {
        match mean_score(enc, scenes, &content_refs, scorers.w, batch) {
            Ok(v) => m.raw_score = Some(v),
            Err(e) => drop(errors.insert("raw_score".to_owned(), e.to_string())),
        }
    }
    if let Some(enc) = scorers.discriminator {
        match mean_score(enc, scenes, &content_refs, scorers.w, batch) {
            Ok(v) => m.discriminator_score = Some(v),
            Err(e) => drop(errors.insert("discriminator_score".to_owned(), e.to_string())),
        }
    }
    if let Some(enc) = scorers.retrieval {
        match retrieval_matrix(enc, scenes, &content_refs, batch).and_then(|s| retrieval_eval(&s)) {
            Ok(r) => {
                m.r1 = Some(r.r1);
                m.r5 = Some(r.r5);
                m.r10 = Some(r.r10);
                m.mrr = Some(r.mrr);
            }
            Err(e) => drop(errors.insert("retrieval".to_owned(), e.to_string())),
        }
    }

    let samples = scenes
        .iter()
        .zip(&texts)
        .take(opts.num_samples)
        .map(|(s, c)| CaptionSample {
            scene_id: s.id,
            caption: (*c).to_owned(),
            reference: s.references[0].clone(),
        })
        .collect();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tag: opts.tag.clone(),
        corpus: opts.corpus.clone(),
        num_captions: captions.len(),
        checkpoints: opts.checkpoints.clone(),
        metrics: m,
        errors,
        samples,
    })
}
