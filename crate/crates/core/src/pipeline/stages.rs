use std::collections::BTreeMap;
use std::path::PathBuf;

use super::{scst_tag, Pipeline, Stage};
use crate::captioner::{Captioner, CaptionerShape};
use crate::checkpoint::StageTag;
use crate::config::{NegativeSourceKind, RunConfig};
use crate::data::{Dataset, SceneInstance, Vocabulary};
use crate::discriminator::{curve_csv, finetune_discriminator, NegativeCorpus};
use crate::dual_encoder::{train_contrastive, DualEncoder, EncoderShape};
use crate::error::Result;
use crate::io;
use crate::metrics::{evaluate_checkpoint, format_csv, format_table, rep_n, EvalOptions, Scorers};
use crate::negatives::{manual_negatives, mine_self_negatives, NegativeSet};
use crate::seed;
use crate::training::{load_captioner, CaptionCorpus, RewardFunction, RewardKind, ScstTrainer, XeTrainer};

pub const EVAL_TAGS: [&str; 4] = ["xe", "scst-cider", "scst-raw", "scst-discriminator"];

pub const XE_CKPT: &str = "checkpoints/xe.ckpt";
pub const ENCODER_BASE_CKPT: &str = "checkpoints/encoder_base.ckpt";
pub const ENCODER_CLEAN_CKPT: &str = "checkpoints/encoder_clean.ckpt";
pub const CAPTIONER_A_CKPT: &str = "checkpoints/captioner_a.ckpt";
pub const CAPTIONER_B_CKPT: &str = "checkpoints/captioner_b.ckpt";
pub const DISCRIMINATOR_CKPT: &str = "checkpoints/discriminator.ckpt";
pub const SELF_NEGATIVES: &str = "negatives/self.jsonl";
pub const MANUAL_NEGATIVES: &str = "negatives/manual.jsonl";

/// Extra text positions beyond `max_len` so corrupted negatives (which may
/// grow by up to four words) still fit.
const TEXT_SLACK: usize = 5;

pub fn eval_report_path(tag: &str) -> String {
    format!("reports/eval-{tag}.json")
}

pub fn scst_ckpt(kind: RewardKind) -> String {
    format!("checkpoints/{}.ckpt", scst_tag(kind))
}

pub fn captioner_shape(cfg: &RunConfig, vocab: &Vocabulary) -> CaptionerShape {
    CaptionerShape {
        config: cfg.model.captioner.clone(),
        vocab_size: vocab.len(),
        num_slots: cfg.world.num_slots,
        feature_dim: cfg.world.feature_dim,
        max_len: cfg.data.max_len,
    }
}

pub fn encoder_shape(cfg: &RunConfig, vocab: &Vocabulary) -> EncoderShape {
    EncoderShape {
        config: cfg.model.encoder.clone(),
        vocab_size: vocab.len(),
        num_slots: cfg.world.num_slots,
        feature_dim: cfg.world.feature_dim,
        max_text_len: cfg.data.max_len + TEXT_SLACK,
    }
}

struct Ctx<'a> {
    p: &'a Pipeline,
    cfg: &'a RunConfig,
    data: Dataset,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.p.path(rel)
    }

    fn seed(&self, name: &str) -> u64 {
        seed::derive(self.cfg.seed, name)
    }

    fn encoder(&self, rel: &str) -> Result<DualEncoder> {
        Ok(DualEncoder::load(&self.path(rel), &encoder_shape(self.cfg, &self.data.vocab))?.0)
    }

    fn captioner(&self, rel: &str) -> Result<Captioner> {
        load_captioner(&self.path(rel), &captioner_shape(self.cfg, &self.data.vocab))
    }

    fn negatives_file(&self) -> &'static str {
        match self.cfg.negatives.source {
            NegativeSourceKind::SelfGenerated => SELF_NEGATIVES,
            NegativeSourceKind::Manual => MANUAL_NEGATIVES,
        }
    }
}

pub(super) fn execute(p: &Pipeline, stage: Stage) -> Result<Vec<PathBuf>> {
    let cfg = p.config();
    if stage == Stage::GenData {
        let data = Dataset::generate(&cfg.world, &cfg.data, cfg.seed)?;
        return data.write(&p.path("data"));
    }
    let ctx = Ctx {
        p,
        cfg,
        data: Dataset::load(&p.path("data"), &cfg.world)?,
    };
    match stage {
        Stage::GenData => unreachable!("handled above"),
        Stage::TrainXe => train_xe(&ctx),
        Stage::PretrainEncoder => pretrain_encoder(&ctx),
        Stage::TrainRewardCaptioner => train_reward_captioners(&ctx),
        Stage::MineNegatives => mine_negatives(&ctx),
        Stage::FinetuneDiscriminator => finetune(&ctx),
        Stage::TrainScst(kind) => train_scst(&ctx, kind),
        Stage::Evaluate => evaluate(&ctx),
    }
}

fn train_xe(ctx: &Ctx<'_>) -> Result<Vec<PathBuf>> {
    let shape = captioner_shape(ctx.cfg, &ctx.data.vocab);
    let model = Captioner::new(shape, ctx.seed("captioner-init"))?;
    let mut trainer = XeTrainer::new(model, ctx.cfg.training.xe.clone(), ctx.seed("xe"))?;
    let train = CaptionCorpus::new(&ctx.data.train, &ctx.data.vocab)?;
    let val = CaptionCorpus::new(&ctx.data.val, &ctx.data.vocab)?;
    let log = trainer.run(&train, Some(&val), usize::MAX)?;
    let ckpt = ctx.path(XE_CKPT);
    trainer.save(&ckpt, serde_json::json!({}))?;
    let log_path = ctx.path("reports/xe_log.jsonl");
    io::write_jsonl(&log_path, &log)?;
    Ok(vec![ckpt, log_path])
}

fn pretrain_encoder(ctx: &Ctx<'_>) -> Result<Vec<PathBuf>> {
    let shape = encoder_shape(ctx.cfg, &ctx.data.vocab);
    let train = CaptionCorpus::new(&ctx.data.train, &ctx.data.vocab)?;
    let refs = train.reference_content();
    let base = DualEncoder::new(shape, ctx.seed("encoder-init"))?;
    let mut rng = seed::rng(ctx.cfg.seed, "encoder-train");
    let base_log = train_contrastive(&base, &train.scenes, &refs, &ctx.cfg.training.encoder, &mut rng)?;
    let base_path = ctx.path(ENCODER_BASE_CKPT);
    base.save(&base_path, StageTag::Base, serde_json::json!({"role": "base"}))?;

    let clean = base.detached_copy()?;
    let mut rng = seed::rng(ctx.cfg.seed, "clean-encoder-train");
    let clean_log = train_contrastive(&clean, &train.scenes, &refs, &ctx.cfg.training.clean_encoder, &mut rng)?;
    let clean_path = ctx.path(ENCODER_CLEAN_CKPT);
    clean.save(&clean_path, StageTag::Base, serde_json::json!({"role": "clean"}))?;

    let log_path = ctx.path("reports/encoder_log.json");
    io::write_json(&log_path, &serde_json::json!({"base_loss": base_log, "clean_loss": clean_log}))?;
    Ok(vec![base_path, clean_path, log_path])
}

fn train_reward_captioners(ctx: &Ctx<'_>) -> Result<Vec<PathBuf>> {
    let train = CaptionCorpus::new(&ctx.data.train, &ctx.data.vocab)?;
    let val = CaptionCorpus::new(&ctx.data.val, &ctx.data.vocab)?;
    let mut out = Vec::new();
    for (name, encoder_rel, ckpt_rel) in [
        ("a", ENCODER_BASE_CKPT, CAPTIONER_A_CKPT),
        ("b", ENCODER_CLEAN_CKPT, CAPTIONER_B_CKPT),
    ] {
        let encoder = ctx.encoder(encoder_rel)?;
        let reward = RewardFunction::score(RewardKind::RawScore, &encoder, ctx.cfg.reward.w)?;
        let model = ctx.captioner(XE_CKPT)?;
        let mut trainer = ScstTrainer::new(
            model,
            ctx.cfg.training.reward_captioner.clone(),
            ctx.seed(&format!("reward-captioner-{name}")),
        )?;
        let log = trainer.run(&ctx.data.vocab, &train, Some(&val), &reward, usize::MAX)?;
        let ckpt = ctx.path(ckpt_rel);
        let scorer = ctx.p.output_hash(Stage::PretrainEncoder, encoder_rel)?;
        trainer.save(&ckpt, RewardKind::RawScore, StageTag::RewardCaptioner, serde_json::json!({"scorer": scorer}))?;
        let log_path = ctx.path(&format!("reports/captioner_{name}_log.jsonl"));
        io::write_jsonl(&log_path, &log)?;
        out.push(ckpt);
        out.push(log_path);
    }
    Ok(out)
}

fn mined_scenes(data: &Dataset) -> Vec<&SceneInstance> {
    data.train.iter().chain(&data.val).collect()
}

fn mine_negatives(ctx: &Ctx<'_>) -> Result<Vec<PathBuf>> {
    let scenes = mined_scenes(&ctx.data);
    let (sets, rel) = match ctx.cfg.negatives.source {
        NegativeSourceKind::SelfGenerated => {
            let a = ctx.captioner(CAPTIONER_A_CKPT)?;
            let b = ctx.captioner(CAPTIONER_B_CKPT)?;
            let ha = ctx.p.output_hash(Stage::TrainRewardCaptioner, CAPTIONER_A_CKPT)?;
            let hb = ctx.p.output_hash(Stage::TrainRewardCaptioner, CAPTIONER_B_CKPT)?;
            let sets = mine_self_negatives(&scenes, (&a, &ha), (&b, &hb), &ctx.data.vocab, ctx.cfg.metric.batch)?;
            (sets, SELF_NEGATIVES)
        }
        NegativeSourceKind::Manual => {
            let sets = manual_negatives(&scenes, &ctx.data.vocab, &ctx.cfg.negatives.manual_modes, ctx.seed("manual-negatives"))?;
            (sets, MANUAL_NEGATIVES)
        }
    };
    let path = ctx.path(rel);
    io::write_jsonl(&path, &sets)?;
    let z1: Vec<&str> = sets.iter().map(|s| s.z1.as_str()).collect();
    let z2: Vec<&str> = sets.iter().map(|s| s.z2.as_str()).collect();
    let refs: Vec<&str> = scenes.iter().flat_map(|s| s.references.iter().map(String::as_str)).collect();
    let summary_path = ctx.path("reports/negatives_summary.json");
    io::write_json(
        &summary_path,
        &serde_json::json!({
            "scenes": sets.len(),
            "rep1_z1": rep_n(&z1, 1)?,
            "rep1_z2": rep_n(&z2, 1)?,
            "rep1_references": rep_n(&refs, 1)?,
            "identical_pairs": sets.iter().filter(|s| s.z1 == s.z2).count(),
        }),
    )?;
    Ok(vec![path, summary_path])
}

fn finetune(ctx: &Ctx<'_>) -> Result<Vec<PathBuf>> {
    let base = ctx.encoder(ENCODER_BASE_CKPT)?;
    let negatives: Vec<NegativeSet> = io::read_jsonl(&ctx.path(ctx.negatives_file()))?;
    let train_scenes: Vec<&SceneInstance> = ctx.data.train.iter().collect();
    let val_scenes: Vec<&SceneInstance> = ctx.data.val.iter().collect();
    let train = NegativeCorpus::new(&train_scenes, &ctx.data.vocab, &negatives)?;
    let held_out = NegativeCorpus::new(&val_scenes, &ctx.data.vocab, &negatives)?;
    let mut rng = seed::rng(ctx.cfg.seed, "discriminator");
    let outcome = finetune_discriminator(&base, &train, &held_out, &ctx.cfg.discriminator, &mut rng)?;
    let ckpt = ctx.path(DISCRIMINATOR_CKPT);
    let negatives_hash = ctx.p.output_hash(Stage::MineNegatives, ctx.negatives_file())?;
    outcome
        .encoder
        .save(&ckpt, StageTag::Discriminator, serde_json::json!({"negatives": negatives_hash}))?;
    let curve = ctx.path("reports/discriminator_curve.csv");
    io::write_string(&curve, &curve_csv(&outcome.curve))?;
    Ok(vec![ckpt, curve])
}

fn train_scst(ctx: &Ctx<'_>, kind: RewardKind) -> Result<Vec<PathBuf>> {
    let train = CaptionCorpus::new(&ctx.data.train, &ctx.data.vocab)?;
    let val = CaptionCorpus::new(&ctx.data.val, &ctx.data.vocab)?;
    let encoder = match kind {
        RewardKind::Cider => None,
        RewardKind::RawScore => Some(ctx.encoder(ENCODER_BASE_CKPT)?),
        RewardKind::Discriminator => Some(ctx.encoder(DISCRIMINATOR_CKPT)?),
    };
    let reward = match &encoder {
        None => RewardFunction::cider(&train.scenes)?,
        Some(e) => RewardFunction::score(kind, e, ctx.cfg.reward.w)?,
    };
    let model = ctx.captioner(XE_CKPT)?;
    let tag = scst_tag(kind);
    let mut trainer = ScstTrainer::new(model, ctx.cfg.training.scst.clone(), ctx.seed(tag))?;
    let log = trainer.run(&ctx.data.vocab, &train, Some(&val), &reward, usize::MAX)?;
    let ckpt = ctx.path(&scst_ckpt(kind));
    trainer.save(&ckpt, kind, StageTag::Scst, serde_json::json!({}))?;
    let log_path = ctx.path(&format!("reports/{tag}_log.jsonl"));
    io::write_jsonl(&log_path, &log)?;
    Ok(vec![ckpt, log_path])
}

fn evaluate(ctx: &Ctx<'_>) -> Result<Vec<PathBuf>> {
    let p = ctx.p;
    let scenes: Vec<&SceneInstance> = ctx.data.split_by_name(&ctx.cfg.metric.split)?.iter().collect();
    let base = ctx.encoder(ENCODER_BASE_CKPT)?;
    let base_hash = p.output_hash(Stage::PretrainEncoder, ENCODER_BASE_CKPT)?;
    let (disc, disc_hash) = if p.has_stage(Stage::FinetuneDiscriminator) {
        (
            Some(ctx.encoder(DISCRIMINATOR_CKPT)?),
            Some(p.output_hash(Stage::FinetuneDiscriminator, DISCRIMINATOR_CKPT)?),
        )
    } else {
        (None, None)
    };
    let mut candidates: Vec<(&str, Stage, String)> = vec![("xe", Stage::TrainXe, XE_CKPT.to_owned())];
    for kind in [RewardKind::Cider, RewardKind::RawScore, RewardKind::Discriminator] {
        candidates.push((scst_tag(kind), Stage::TrainScst(kind), scst_ckpt(kind)));
    }
    let mut written = Vec::new();
    let mut reports = Vec::new();
    for (tag, stage, rel) in candidates {
        if !p.has_stage(stage) {
            continue;
        }
        let model = ctx.captioner(&rel)?;
        let mut checkpoints = BTreeMap::new();
        checkpoints.insert("captioner".to_owned(), p.output_hash(stage, &rel)?);
        checkpoints.insert("raw_scorer".to_owned(), base_hash.clone());
        checkpoints.insert("retrieval_scorer".to_owned(), base_hash.clone());
        if let Some(h) = &disc_hash {
            checkpoints.insert("discriminator".to_owned(), h.clone());
        }
        let opts = EvalOptions {
            tag: tag.to_owned(),
            corpus: ctx.cfg.metric.split.clone(),
            beam_size: ctx.cfg.metric.beam_size,
            batch: ctx.cfg.metric.batch,
            num_samples: ctx.cfg.metric.samples,
            checkpoints,
        };
        let scorers = Scorers {
            raw: Some(&base),
            discriminator: disc.as_ref(),
            retrieval: Some(&base),
            w: ctx.cfg.reward.w,
        };
        let report = evaluate_checkpoint(&model, &ctx.data.vocab, &scenes, scorers, &opts)?;
        let path = p.path(&eval_report_path(tag));
        io::write_json(&path, &report)?;
        written.push(path);
        reports.push(report);
    }
    let table = p.path("reports/table.txt");
    io::write_string(&table, &format_table(&reports)?)?;
    let csv = p.path("reports/table.csv");
    io::write_string(&csv, &format_csv(&reports)?)?;
    written.push(table);
    written.push(csv);
    Ok(written)
}
