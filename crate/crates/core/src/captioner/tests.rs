use candle_core::{Device, IndexOp, Tensor};

use super::*;
use crate::seed;

const SLOTS: usize = 3;
const FEATURES: usize = 4;

fn vocab() -> Vocabulary {
    Vocabulary::build(["red cube ball"])
}

fn model(max_len: usize, seed: u64) -> Captioner {
    let shape = CaptionerShape {
        config: CaptionerConfig {
            hidden: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            ff_mult: 2,
            positional_encoding: true,
        },
        vocab_size: vocab().len(),
        num_slots: SLOTS,
        feature_dim: FEATURES,
        max_len,
    };
    Captioner::new(shape, seed).unwrap()
}

fn memory(m: &Captioner, rows: usize, seed: u64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = seed::rng(seed, "features");
    let values: Vec<f32> = (0..rows * SLOTS * FEATURES).map(|_| StandardNormal.sample(&mut rng)).collect();
    let f = Tensor::from_vec(values, (rows, SLOTS, FEATURES), &Device::Cpu).unwrap();
    m.encode(&f).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn future_tokens_do_not_change_earlier_logits() {
    let m = model(6, 3);
    let mem = memory(&m, 1, 1);
    let a = Tensor::new(&[[1u32, 3, 4, 5]], &Device::Cpu).unwrap();
    let b = Tensor::new(&[[1u32, 3, 5, 3]], &Device::Cpu).unwrap();
    let la = m.logits(&mem, &a).unwrap().i((0, ..2)).unwrap().to_vec2::<f32>().unwrap();
    let lb = m.logits(&mem, &b).unwrap().i((0, ..2)).unwrap().to_vec2::<f32>().unwrap();
    assert_eq!(la, lb);
}

#[test]
fn cached_steps_match_full_recompute() {
    let m = model(6, 4);
    let mem = memory(&m, 1, 2);
    let prefix = [1u32, 4, 3, 5];
    let mut state = m.start_decoding(&mem).unwrap();
    for t in 0..prefix.len() {
        let cached = m.decode_step(&mut state, &[prefix[t]]).unwrap();
        let cached = softmax_f64(&cached[0], 1.0);
        let full = m.step_distribution(&mem, &prefix[..=t]).unwrap();
        assert!(close(&cached, &full, 1e-5), "step {t}");
    }
}

#[test]
fn masked_tokens_are_never_predicted() {
    let m = model(6, 5);
    let mem = memory(&m, 1, 3);
    let p = m.step_distribution(&mem, &[1]).unwrap();
    assert!(p[Vocabulary::PAD_ID as usize] < 1e-12);
    assert!(p[Vocabulary::BOS_ID as usize] < 1e-12);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn decoded_log_probs_match_rescore() {
    let m = model(5, 6);
    let v = vocab();
    let mem = memory(&m, 3, 4);
    let mut rng = seed::rng(1, "sample");
    let results = sample_sequences(&m, &v, &mem, 4, 1.0, &mut rng).unwrap();
    for (i, r) in results.iter().enumerate() {
        let row = mem.i(i..=i).unwrap();
        for (seq, lp) in r.sequences.iter().zip(&r.per_token_log_probs) {
            let again = m.rescore(&row, &seq.ids, 1.0).unwrap();
            assert!(close(lp, &again, 1e-5), "{lp:?} vs {again:?}");
        }
    }
    let beams = beam_search(&m, &v, &mem, 3).unwrap();
    for (i, r) in beams.iter().enumerate() {
        let row = mem.i(i..=i).unwrap();
        for (seq, lp) in r.sequences.iter().zip(&r.per_token_log_probs) {
            assert!(close(lp, &m.rescore(&row, &seq.ids, 1.0).unwrap(), 1e-5));
        }
    }
}

#[test]
fn sequence_log_probs_sum_rescored_tokens() {
    let m = model(5, 7);
    let mem = memory(&m, 2, 5);
    let seqs: [&[u32]; 2] = [&[1, 3, 4, 2], &[1, 5, 2]];
    let lp = m.sequence_log_probs(&mem, &seqs).unwrap().to_vec1::<f32>().unwrap();
    for (i, s) in seqs.iter().enumerate() {
        let expected: f64 = m.rescore(&mem.i(i..=i).unwrap(), s, 1.0).unwrap().iter().sum();
        assert!((lp[i] as f64 - expected).abs() < 1e-4);
    }
}

#[test]
fn low_temperature_sampling_is_greedy() {
    let m = model(6, 8);
    let v = vocab();
    let mem = memory(&m, 4, 6);
    let g = greedy(&m, &v, &mem).unwrap();
    let mut rng = seed::rng(2, "sample");
    let s = sample_sequences(&m, &v, &mem, 3, 1e-4, &mut rng).unwrap();
    for (gr, sr) in g.iter().zip(&s) {
        for seq in &sr.sequences {
            assert_eq!(seq.ids, gr.sequences[0].ids);
        }
    }
}

#[test]
fn seeded_sampling_is_reproducible() {
    let m = model(6, 9);
    let v = vocab();
    let mem = memory(&m, 2, 7);
    let draw = |s| sample_sequences(&m, &v, &mem, 5, 1.0, &mut seed::rng(s, "sample")).unwrap();
    assert_eq!(draw(11), draw(11));
    let ids = |r: Vec<DecodeResult>| r.into_iter().flat_map(|d| d.sequences).map(|s| s.ids).collect::<Vec<_>>();
    assert_ne!(ids(draw(11)), ids(draw(12)));
}

#[test]
fn beam_of_one_is_greedy() {
    let m = model(6, 10);
    let v = vocab();
    let mem = memory(&m, 5, 8);
    let g = greedy(&m, &v, &mem).unwrap();
    let b = beam_search(&m, &v, &mem, 1).unwrap();
    for (gr, br) in g.iter().zip(&b) {
        assert_eq!(gr.sequences, br.sequences);
    }
}

#[test]
fn beam_results_are_ranked_and_bounded() {
    let m = model(4, 11);
    let v = vocab();
    let mem = memory(&m, 2, 9);
    for r in beam_search(&m, &v, &mem, 4).unwrap() {
        assert_eq!(r.sequences.len(), 4);
        let norm: Vec<f64> = r.per_token_log_probs.iter().map(|p| p.iter().sum::<f64>() / p.len() as f64).collect();
        assert!(norm.windows(2).all(|w| w[0] >= w[1]));
        for s in &r.sequences {
            assert_eq!(s.ids[0], Vocabulary::BOS_ID);
            assert!(s.ids.len() - 1 <= 4);
        }
    }
}

#[test]
fn rejects_bad_inputs() {
    let m = model(4, 12);
    let v = vocab();
    let mem = memory(&m, 1, 10);
    assert!(beam_search(&m, &v, &mem, 0).is_err());
    assert!(m.step_distribution(&mem, &[3]).is_err());
    assert!(m.step_distribution(&mem, &[1, 99]).is_err());
    assert!(m.sequence_log_probs(&mem, &[&[1]]).is_err());
    assert!(sample_sequences(&m, &v, &mem, 1, 0.0, &mut seed::rng(0, "x")).is_err());
    let bad = Tensor::zeros((1, SLOTS + 1, FEATURES), candle_core::DType::F32, &Device::Cpu).unwrap();
    assert!(m.encode(&bad).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let m = model(4, 13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    m.save(&path, StageTag::Xe, serde_json::json!({})).unwrap();
    let (back, _) = Captioner::load(&path, m.shape()).unwrap();
    assert_eq!(back.store().content_hash().unwrap(), m.store().content_hash().unwrap());
    let mut other = m.shape().clone();
    other.vocab_size += 1;
    assert!(Captioner::load(&path, &other).is_err());
}
