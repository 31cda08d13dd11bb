//! One runner per module. Every run writes its resolved config, an
//! `evaluations.jsonl`, optional `log.jsonl` diagnostics and checkpoints
//! into `out_dir`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;
use sketchlab::fscil::{evaluate, train_fscil, EpisodeSpec};
use sketchlab::generation::{generate_pseudo_pairs, joint_train};
use sketchlab::metrics::AccSummary;
use sketchlab::models::StrokeHierEncoder;
use sketchlab::otf::{evaluate_head, prepare_queries, train_otf, OtfQuery};
use sketchlab::pretext::{labelled_view, linear_eval, pretrain, unlabelled_view, EvalMode, PretextEncoder, PretextTask};
use sketchlab::retrieval::{pairs_from_instances, train_triplet, RetrievalModel};
use sketchlab::select::{alternating_clean_train, augment_subsets, brute_force_upper_limit, cleaned_ranks, RewardContext};
use sketchlab::sketch::{gen_synthetic_dataset, rasterize, RasterCanvas, SyntheticInstance, VectorSketch};
use sketchlab::rng;

use crate::config::{ExperimentConfig, ModuleKind};
use crate::data;
use crate::error::{CliError, Result};
use crate::export::{append_evaluation, Evaluation};
use crate::store;

pub const LOG_FILE: &str = "log.jsonl";

/// Flags that override config values for a single run.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub checkpoint: Option<PathBuf>,
    pub frac: Option<f64>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub evaluations: Vec<Evaluation>,
    /// Lines also written to `log.jsonl`.
    pub log: Vec<serde_json::Value>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    out: RunOutput,
}

impl Ctx<'_> {
    fn eval(&mut self, e: Evaluation) -> Result<()> {
        append_evaluation(&self.dir, &e)?;
        self.out.evaluations.push(e);
        Ok(())
    }

    fn log<T: Serialize>(&mut self, items: impl IntoIterator<Item = T>) -> Result<()> {
        let mut f = BufWriter::new(File::options().create(true).append(true).open(self.dir.join(LOG_FILE))?);
        for it in items {
            let v = serde_json::to_value(it)?;
            serde_json::to_writer(&mut f, &v)?;
            f.write_all(b"\n")?;
            self.out.log.push(v);
        }
        f.flush()?;
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Checkpoint from `init_dir`, if one is configured.
    fn init_path(&self, name: &str) -> Option<PathBuf> {
        self.cfg.init_dir.as_ref().map(|d| d.join(name))
    }
}

fn need_init(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.init_dir.as_ref().ok_or_else(|| CliError::Config(format!("init_dir: required to locate {name}")))?;
    let p = dir.join(name);
    if !p.is_file() {
        return Err(CliError::MissingPath {
            key: "init_dir".into(),
            path: p.display().to_string(),
        });
    }
    Ok(p)
}

/// Checks everything a run would touch on disk without training.
fn dry_run(cfg: &ExperimentConfig, kind: ModuleKind, ov: &Overrides) -> Result<()> {
    if let Some(p) = &cfg.data.path {
        if !p.is_dir() {
            return Err(CliError::MissingPath {
                key: "data.path".into(),
                path: p.display().to_string(),
            });
        }
    }
    if let Some(d) = &cfg.init_dir {
        if !d.is_dir() {
            return Err(CliError::MissingPath {
                key: "init_dir".into(),
                path: d.display().to_string(),
            });
        }
    }
    match kind {
        ModuleKind::Augment => {
            need_init(cfg, store::SELECTOR)?;
        }
        ModuleKind::LinearEval => {
            pretext_checkpoint(cfg, ov)?;
        }
        _ => {}
    }
    Ok(())
}

pub fn run(cfg: &ExperimentConfig, kind: ModuleKind, ov: &Overrides, dry: bool) -> Result<RunOutput> {
    dry_run(cfg, kind, ov)?;
    let dir = cfg.out_dir.clone();
    let out = RunOutput {
        dir: dir.clone(),
        evaluations: Vec::new(),
        log: Vec::new(),
    };
    if dry {
        return Ok(out);
    }
    std::fs::create_dir_all(&dir)?;
    for stale in [crate::export::EVAL_FILE, LOG_FILE] {
        let p = dir.join(stale);
        if p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    let mut resolved = cfg.clone();
    resolved.module = Some(kind);
    resolved.write_resolved(&dir)?;
    let mut ctx = Ctx { cfg, dir, out };
    match kind {
        ModuleKind::GenData => gen_data(&mut ctx)?,
        ModuleKind::TrainEmbed => train_embed(&mut ctx)?,
        ModuleKind::TrainOtf => train_otf_run(&mut ctx)?,
        ModuleKind::TrainSubset => train_subset(&mut ctx)?,
        ModuleKind::TrainSemisup => train_semisup(&mut ctx)?,
        ModuleKind::PretrainSsl => pretrain_ssl(&mut ctx)?,
        ModuleKind::LinearEval => linear_eval_run(&mut ctx, ov)?,
        ModuleKind::Fscil => fscil_run(&mut ctx)?,
        ModuleKind::Oracle => oracle(&mut ctx)?,
        ModuleKind::Augment => augment(&mut ctx)?,
        ModuleKind::Eval => eval(&mut ctx)?,
    }
    Ok(ctx.out)
}

fn gen_data(ctx: &mut Ctx<'_>) -> Result<()> {
    let synth = &ctx.cfg.data.synth;
    let data = gen_synthetic_dataset(synth)?;
    data::write_dataset(&ctx.dir, &data, &serde_json::json!({ "synth": synth, "instances": data.len() }))?;
    Ok(())
}

fn fresh_model(cfg: &ExperimentConfig, train: &[SyntheticInstance]) -> Result<(RetrievalModel, Vec<f64>)> {
    let mut init = rng::stream(cfg.seed, &[100]);
    let mut model = RetrievalModel::new(cfg.embed.encoder, &mut init);
    let pairs = pairs_from_instances(train, model.line_width)?;
    let report = train_triplet(&mut model, &pairs, &cfg.embed.triplet)?;
    Ok((model, report.epoch_losses))
}

/// The retrieval model from `init_dir`, or a freshly trained one.
fn retrieval_model(ctx: &mut Ctx<'_>, train: &[SyntheticInstance]) -> Result<RetrievalModel> {
    match ctx.init_path(store::RETRIEVAL) {
        Some(p) => store::load_retrieval(&p),
        None => {
            let (m, losses) = fresh_model(ctx.cfg, train)?;
            ctx.log(losses.iter().enumerate().map(|(epoch, loss)| serde_json::json!({"stage": "triplet", "epoch": epoch, "loss": loss})))?;
            Ok(m)
        }
    }
}

fn queries(model: &RetrievalModel, set: &[SyntheticInstance], steps: usize) -> Result<Vec<OtfQuery>> {
    let sk: Vec<(u64, &VectorSketch)> = set.iter().map(|i| (i.instance_id, &i.sketch)).collect();
    Ok(prepare_queries(&model.sketch, &sk, steps, model.line_width)?)
}

fn non_empty(test: &[SyntheticInstance]) -> Result<()> {
    if test.is_empty() {
        return Err(CliError::Config("data: the held-out split is empty; use at least 4 instances per class".into()));
    }
    Ok(())
}

fn train_embed(ctx: &mut Ctx<'_>) -> Result<()> {
    let all = data::load(&ctx.cfg.data)?;
    let (train, test) = data::split(&all);
    non_empty(&test)?;
    let (model, losses) = fresh_model(ctx.cfg, &train)?;
    ctx.log(losses.iter().enumerate().map(|(epoch, loss)| serde_json::json!({"epoch": epoch, "loss": loss})))?;
    store::save_retrieval(&ctx.path(store::RETRIEVAL), &model)?;
    let g = model.gallery_of(&test)?;
    let e = evaluate_head(&model.sketch.head, &queries(&model, &test, ctx.cfg.otf.steps)?, &g)?;
    ctx.eval(Evaluation::from_otf("embed/test", &e))
}

fn eval(ctx: &mut Ctx<'_>) -> Result<()> {
    let all = data::load(&ctx.cfg.data)?;
    let (train, test) = data::split(&all);
    non_empty(&test)?;
    let model = retrieval_model(ctx, &train)?;
    let g = model.gallery_of(&test)?;
    let q = queries(&model, &test, ctx.cfg.otf.steps)?;
    ctx.eval(Evaluation::from_otf("eval/test", &evaluate_head(&model.sketch.head, &q, &g)?))?;
    if let Some(p) = ctx.init_path(store::POLICY).filter(|p| p.is_file()) {
        let policy = store::load_policy(&p)?;
        ctx.eval(Evaluation::from_otf("eval/test-otf", &evaluate_head(&policy.mu, &q, &g)?))?;
    }
    if let Some(p) = ctx.init_path(store::SELECTOR).filter(|p| p.is_file()) {
        let selector = store::load_selector(&p)?;
        let acc = AccSummary::from_ranks(&cleaned_ranks(&model, &selector, &test, &g)?)?;
        ctx.eval(Evaluation::new("eval/test-cleaned").with_acc(&acc))?;
    }
    Ok(())
}

fn train_otf_run(ctx: &mut Ctx<'_>) -> Result<()> {
    let all = data::load(&ctx.cfg.data)?;
    let (train, test) = data::split(&all);
    non_empty(&test)?;
    let model = retrieval_model(ctx, &train)?;
    let steps = ctx.cfg.otf.steps;
    let gtr = model.gallery_of(&train)?;
    let out = train_otf(&model.sketch, &queries(&model, &train, steps)?, &gtr, &ctx.cfg.otf)?;
    ctx.log(&out.log)?;
    store::save_retrieval(&ctx.path(store::RETRIEVAL), &model)?;
    store::save_policy(&ctx.path(store::POLICY), &out.policy)?;
    ctx.eval(Evaluation::from_otf("otf/train-before", &out.before))?;
    ctx.eval(Evaluation::from_otf("otf/train-after", &out.after))?;
    let gte = model.gallery_of(&test)?;
    let qte = queries(&model, &test, steps)?;
    ctx.eval(Evaluation::from_otf("otf/test-before", &evaluate_head(&model.sketch.head, &qte, &gte)?))?;
    ctx.eval(Evaluation::from_otf("otf/test-after", &evaluate_head(&out.policy.mu, &qte, &gte)?))
}

fn train_subset(ctx: &mut Ctx<'_>) -> Result<()> {
    let all = data::load(&ctx.cfg.data)?;
    let (train, test) = data::split(&all);
    non_empty(&test)?;
    let acfg = &ctx.cfg.subset.alternating;
    let mut baseline = RetrievalModel::new(acfg.encoder, &mut rng::stream(ctx.cfg.seed, &[110]));
    let pairs = pairs_from_instances(&train, baseline.line_width)?;
    train_triplet(&mut baseline, &pairs, &acfg.triplet)?;
    let q: Vec<(u64, &VectorSketch)> = test.iter().map(|i| (i.instance_id, &i.sketch)).collect();
    let gb = baseline.gallery_of(&test)?;
    let base_acc = AccSummary::from_ranks(&baseline.sketch_ranks(&q, &gb)?)?;

    let out = alternating_clean_train(&train, Some(&test), acfg)?;
    ctx.log(&out.rounds)?;
    store::save_retrieval(&ctx.path(store::RETRIEVAL), &out.model)?;
    store::save_selector(&ctx.path(store::SELECTOR), &out.selector)?;
    let g = out.model.gallery_of(&test)?;
    let raw = AccSummary::from_ranks(&out.model.sketch_ranks(&q, &g)?)?;
    let cleaned = AccSummary::from_ranks(&cleaned_ranks(&out.model, &out.selector, &test, &g)?)?;
    let (removed, noise, kept, clean) = noise_confusion(&out.selector, &test)?;
    ctx.eval(Evaluation::new("subset/baseline").with_acc(&base_acc))?;
    ctx.eval(Evaluation::new("subset/raw").with_acc(&raw))?;
    ctx.eval(
        Evaluation::new("subset/cleaned")
            .with_acc(&cleaned)
            .with_extra("noise_removed", ratio(removed, noise))
            .with_extra("clean_kept", ratio(kept, clean)),
    )
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// Noise strokes the argmax selector drops and clean strokes it keeps.
fn noise_confusion(selector: &StrokeHierEncoder, set: &[SyntheticInstance]) -> Result<(usize, usize, usize, usize)> {
    let (mut removed, mut noise, mut kept, mut clean) = (0, 0, 0, 0);
    for i in set {
        let p = selector.select_probs(&i.sketch)?;
        for (pp, &is_noise) in p.iter().zip(&i.noise_mask) {
            if is_noise {
                noise += 1;
                removed += usize::from(*pp < 0.5);
            } else {
                clean += 1;
                kept += usize::from(*pp >= 0.5);
            }
        }
    }
    Ok((removed, noise, kept, clean))
}

fn train_semisup(ctx: &mut Ctx<'_>) -> Result<()> {
    let all = data::load(&ctx.cfg.data)?;
    let (mut train, test) = data::split(&all);
    non_empty(&test)?;
    train.shuffle(&mut rng::stream(ctx.cfg.seed, &[120]));
    let n_lab = ((ctx.cfg.semisup.labelled_frac * train.len() as f64).round() as usize).clamp(2.min(train.len()), train.len());
    let (labelled, unlabelled) = train.split_at(n_lab);
    let photos: Vec<(u64, &RasterCanvas)> = unlabelled.iter().map(|i| (i.instance_id, &i.photo)).collect();
    let out = joint_train(labelled, &photos, &ctx.cfg.semisup.joint)?;
    ctx.log(&out.log)?;
    store::save_retrieval(&ctx.path(store::RETRIEVAL), &out.retrieval)?;

    let q: Vec<(u64, &VectorSketch)> = test.iter().map(|i| (i.instance_id, &i.sketch)).collect();
    let base = AccSummary::from_ranks(&out.baseline.sketch_ranks(&q, &out.baseline.gallery_of(&test)?)?)?;
    let joint = AccSummary::from_ranks(&out.retrieval.sketch_ranks(&q, &out.retrieval.gallery_of(&test)?)?)?;
    let lw = out.retrieval.line_width;
    let real: Vec<f64> = labelled
        .iter()
        .map(|i| {
            let [h, w] = i.photo.dims();
            out.discriminator.score(&i.photo, &rasterize(&i.sketch, h, w, lw)?)
        })
        .collect::<sketchlab::Result<_>>()?;
    let mut e = Evaluation::new("semisup/joint").with_acc(&joint).with_extra("disc_real", mean(&real));
    if !photos.is_empty() {
        let pseudo = generate_pseudo_pairs(&out.generator, &photos, lw)?;
        let fake: Vec<f64> = pseudo.iter().map(|p| out.discriminator.score(&p.photo, &p.canvas)).collect::<sketchlab::Result<_>>()?;
        e = e.with_extra("disc_pseudo", mean(&fake));
    }
    ctx.eval(Evaluation::new("semisup/baseline").with_acc(&base))?;
    ctx.eval(e)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn pretrain_ssl(ctx: &mut Ctx<'_>) -> Result<()> {
    let all = data::load(&ctx.cfg.data)?;
    let (train, test) = data::split(&all);
    non_empty(&test)?;
    let pcfg = &ctx.cfg.pretext.train;
    let out = pretrain(&unlabelled_view(&all, 1)?, pcfg)?;
    ctx.log(out.losses.iter().enumerate().map(|(epoch, loss)| serde_json::json!({"epoch": epoch, "loss": loss})))?;
    store::save_pretext(&ctx.path(store::PRETEXT), &out.encoder, pcfg.task, pcfg)?;
    let (tr, te) = (labelled_view(&train, 1)?, labelled_view(&test, 1)?);
    let pre = linear_eval(&out.encoder, &tr, &te, &ctx.cfg.pretext.eval)?;
    let random = PretextEncoder::new(pcfg.task, pcfg, &mut rng::stream(ctx.cfg.seed, &[130]));
    let base = linear_eval(&random, &tr, &te, &ctx.cfg.pretext.eval)?;
    ctx.eval(top_k_eval("pretext/pretrained", pre.top1, pre.top5))?;
    ctx.eval(top_k_eval("pretext/random", base.top1, base.top5))
}

fn top_k_eval(tag: &str, top1: f64, top5: f64) -> Evaluation {
    Evaluation {
        acc1: Some(top1),
        acc5: Some(top5),
        ..Evaluation::new(tag)
    }
}

fn pretext_checkpoint(cfg: &ExperimentConfig, ov: &Overrides) -> Result<PathBuf> {
    let (key, p) = match (&ov.checkpoint, &cfg.pretext.checkpoint) {
        (Some(p), _) => ("--checkpoint", p.clone()),
        (None, Some(p)) => ("pretext.checkpoint", p.clone()),
        (None, None) => return need_init(cfg, store::PRETEXT),
    };
    if !p.is_file() {
        return Err(CliError::MissingPath {
            key: key.into(),
            path: p.display().to_string(),
        });
    }
    Ok(p)
}

fn linear_eval_run(ctx: &mut Ctx<'_>, ov: &Overrides) -> Result<()> {
    let (encoder, task, _) = store::load_pretext(&pretext_checkpoint(ctx.cfg, ov)?)?;
    let all = data::load(&ctx.cfg.data)?;
    let (train, test) = data::split(&all);
    non_empty(&test)?;
    let mut ecfg = ctx.cfg.pretext.eval.clone();
    if let Some(frac) = ov.frac {
        ecfg.mode = EvalMode::FinetuneFraction { frac };
    }
    let r = linear_eval(&encoder, &labelled_view(&train, 1)?, &labelled_view(&test, 1)?, &ecfg)?;
    let tag = match task {
        PretextTask::Vectorization => "linear-eval/vectorization",
        PretextTask::Rasterization => "linear-eval/rasterization",
    };
    ctx.eval(top_k_eval(tag, r.top1, r.top5))
}

fn fscil_run(ctx: &mut Ctx<'_>) -> Result<()> {
    let f = &ctx.cfg.fscil;
    let out = train_fscil(&f.train)?;
    ctx.log(&out.gat_log)?;
    let spec = EpisodeSpec {
        ways: f.ways,
        shots: f.shots,
        queries: f.queries,
        base_ways: f.base_ways,
    };
    let mut w = csv::Writer::from_path(ctx.path("fscil_episodes.csv"))?;
    w.write_record(["method", "episode", "acc_base", "acc_novel", "acc_both"])?;
    let mut methods: Vec<(&str, Option<&sketchlab::models::GatLayer>)> = vec![("naive", None)];
    if f.gat {
        methods.push(("gat", Some(&out.gat)));
    }
    let mut evals = Vec::new();
    for (name, gat) in methods {
        let report = evaluate(&out.context, gat, &spec, f.episodes, ctx.cfg.seed)?;
        for (i, m) in report.episodes.iter().enumerate() {
            w.serialize((name, i, m.acc_base, m.acc_novel, m.acc_both))?;
        }
        evals.push(Evaluation {
            acc1: Some(report.mean.acc_both),
            ..Evaluation::new(format!("fscil/{name}"))
        }
        .with_extra("acc_base", report.mean.acc_base)
        .with_extra("acc_novel", report.mean.acc_novel));
    }
    w.flush()?;
    for e in evals {
        ctx.eval(e)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleEntry {
    full_rank: usize,
    best_rank: usize,
    mask: Vec<bool>,
}

fn oracle(ctx: &mut Ctx<'_>) -> Result<()> {
    let all = data::load(&ctx.cfg.data)?;
    let (train, test) = data::split(&all);
    non_empty(&test)?;
    let model = retrieval_model(ctx, &train)?;
    let g = model.gallery_of(&test)?;
    let rc = RewardContext { model: &model, gallery: &g };
    let mut entries = BTreeMap::new();
    let (mut full, mut best) = (Vec::new(), Vec::new());
    let mut skipped = 0usize;
    for i in &test {
        if i.sketch.num_strokes() > ctx.cfg.subset.max_k {
            skipped += 1;
            continue;
        }
        let (full_rank, _) = rc.rank(&i.sketch, &vec![true; i.sketch.num_strokes()], i.instance_id)?;
        let (best_rank, mask) = brute_force_upper_limit(&i.sketch, i.instance_id, &rc)?;
        full.push(full_rank);
        best.push(best_rank);
        entries.insert(i.instance_id.to_string(), OracleEntry { full_rank, best_rank, mask });
    }
    std::fs::write(ctx.path("oracle.json"), serde_json::to_string_pretty(&entries)?)?;
    if full.is_empty() {
        return Err(CliError::Config(format!("subset.max_k: every held-out sketch has more than {} strokes", ctx.cfg.subset.max_k)));
    }
    ctx.eval(Evaluation::new("oracle/full").with_acc(&AccSummary::from_ranks(&full)?))?;
    ctx.eval(Evaluation::new("oracle/best").with_acc(&AccSummary::from_ranks(&best)?).with_extra("skipped", skipped as f64))
}

fn augment(ctx: &mut Ctx<'_>) -> Result<()> {
    let selector = store::load_selector(&need_init(ctx.cfg, store::SELECTOR)?)?;
    let all = data::load(&ctx.cfg.data)?;
    let n = ctx.cfg.subset.augment_n;
    let mut masks = BTreeMap::new();
    for i in &all {
        let mut r = rng::stream(ctx.cfg.seed, &[140, i.instance_id]);
        masks.insert(i.instance_id.to_string(), augment_subsets(&i.sketch, &selector, n, &mut r)?);
    }
    std::fs::write(ctx.path("masks.json"), serde_json::to_string(&masks)?)?;
    Ok(())
}

/// Reads the masks file written by `augment`.
pub fn read_masks(path: &Path) -> Result<BTreeMap<String, Vec<Vec<bool>>>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
