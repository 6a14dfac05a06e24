use candle_core::{Device, Tensor};
use capreward_core::captioner::{beam_search, greedy, Captioner, CaptionerShape};
use capreward_core::config::RunConfig;
use capreward_core::data::{generate_scene, SceneInstance, Vocabulary};
use capreward_core::discriminator::masked_contrastive_loss;
use capreward_core::dual_encoder::DualEncoder;
use capreward_core::metrics::{corpus_cider, DocumentFrequencies};
use capreward_core::pipeline::{captioner_shape, encoder_shape};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

struct Fixture {
    cfg: RunConfig,
    scenes: Vec<SceneInstance>,
    vocab: Vocabulary,
}

fn fixture(n: u64) -> Fixture {
    let cfg = RunConfig::default();
    let scenes: Vec<SceneInstance> = (0..n).map(|i| generate_scene(i, 1000 + i, &cfg.world).unwrap()).collect();
    let vocab = Vocabulary::build(scenes.iter().flat_map(|s| s.references.iter().map(String::as_str)));
    Fixture { cfg, scenes, vocab }
}

fn bench_cider(c: &mut Criterion) {
    let f = fixture(256);
    let sets: Vec<Vec<String>> = f.scenes.iter().map(|s| s.references.to_vec()).collect();
    let df = DocumentFrequencies::from_reference_sets(&sets).unwrap();
    let pairs: Vec<(&str, &[String])> = f
        .scenes
        .iter()
        .map(|s| (s.references[1].as_str(), &s.references[..]))
        .collect();
    c.bench_function("cider_d/256 captions", |b| b.iter(|| corpus_cider(black_box(&pairs), &df).unwrap()));
}

fn captioner(f: &Fixture) -> Captioner {
    let shape: CaptionerShape = captioner_shape(&f.cfg, &f.vocab);
    Captioner::new(shape, 1).unwrap()
}

fn bench_decoding(c: &mut Criterion) {
    let f = fixture(16);
    let m = captioner(&f);
    let refs: Vec<&SceneInstance> = f.scenes.iter().collect();
    let memory = m.encode_scenes(&refs).unwrap();
    c.bench_function("greedy/16 scenes", |b| b.iter(|| greedy(&m, &f.vocab, black_box(&memory)).unwrap()));
    c.bench_function("beam5/16 scenes", |b| {
        b.iter(|| beam_search(&m, &f.vocab, black_box(&memory), 5).unwrap())
    });
}

fn bench_encoder(c: &mut Criterion) {
    let f = fixture(32);
    let enc = DualEncoder::new(encoder_shape(&f.cfg, &f.vocab), 2).unwrap();
    let refs: Vec<&SceneInstance> = f.scenes.iter().collect();
    let texts: Vec<Vec<u32>> = f
        .scenes
        .iter()
        .map(|s| f.vocab.encode(&s.references[0]).unwrap().content())
        .collect();
    let slices: Vec<&[u32]> = texts.iter().map(Vec::as_slice).collect();
    c.bench_function("encoder/embed 32 scenes", |b| b.iter(|| enc.embed_scenes(black_box(&refs)).unwrap()));
    c.bench_function("encoder/embed 32 captions", |b| b.iter(|| enc.embed_texts(black_box(&slices)).unwrap()));

    let s = Tensor::randn(0f32, 0.3, (32, 96), &Device::Cpu).unwrap();
    let scale = Tensor::new(14.0f32, &Device::Cpu).unwrap();
    c.bench_function("masked_contrastive_loss/32x96", |b| {
        b.iter(|| masked_contrastive_loss(black_box(&s), &scale).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_cider, bench_decoding, bench_encoder
}
criterion_main!(benches);
