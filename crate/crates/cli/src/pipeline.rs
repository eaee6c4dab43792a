//! The pipeline commands. Every command writes the resolved configuration
//! into its output directory before doing any work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use acpo_core::acpo::{finetune_run, AcpoConfig, FinetuneOutcome};
use acpo_core::adapters::attach_adapters;
use acpo_core::data::{build_diffusion_dataset, build_iqa_dataset, ConditionToken, DiffusionItem, IqaItem};
use acpo_core::diffusion::{train_base, BaseTrainConfig, NoisePredictor};
use acpo_core::iqa::{train_evaluator, EvaluatorTraining, Scorer, ScorerVariant};
use acpo_core::metrics::{evaluate_pairwise, frechet_gaussian, score_images, spearman, GaussianMoments, PairedSample, SummaryRow};
use acpo_core::rng::{derive_seed, stream};
use acpo_core::{NumError, Tensor};
use serde::Serialize;

use crate::checkpoint::{
    adapter_checkpoint, apply_adapter_checkpoint, base_checkpoint, base_from_checkpoint, scorer_checkpoint, scorer_from_checkpoint, Checkpoint,
    CheckpointKind, Provenance,
};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::export::{read_pgm, side_by_side, write_csv, write_pgm};

type Result<T> = std::result::Result<T, CliError>;

pub const BASE_FILE: &str = "base.json";
pub const ADAPTERS_FILE: &str = "adapters.json";
pub const GUIDE_SCORER_FILE: &str = "guide_scorer.json";
pub const HELDOUT_SCORER_FILE: &str = "heldout_scorer.json";
pub const CONFIG_FILE: &str = "config.json";

fn prepare(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_json())?;
    Ok(())
}

fn provenance(cfg: &RunConfig, steps: usize) -> Provenance {
    Provenance { config_hash: cfg.hash(), seed: cfg.seed, steps }
}

fn load(out: &Path, file: &str, kind: CheckpointKind, hint: &str) -> Result<Checkpoint> {
    let path = out.join(file);
    if !path.exists() {
        return Err(CliError::Dependency(format!("{} not found; run `{hint}` first", path.display())));
    }
    Ok(Checkpoint::load(&path, kind)?)
}

fn load_base(cfg: &RunConfig) -> Result<NoisePredictor> {
    let net = base_from_checkpoint(&load(&cfg.out_dir, BASE_FILE, CheckpointKind::BaseModel, "train-base")?)?;
    if net.arch != cfg.arch() {
        return Err(CliError::Dependency(format!("{BASE_FILE} was trained for {:?}, configuration asks for {:?}", net.arch, cfg.arch())));
    }
    Ok(net)
}

fn load_scorer(cfg: &RunConfig, file: &str) -> Result<Scorer> {
    let s = scorer_from_checkpoint(&load(&cfg.out_dir, file, CheckpointKind::Scorer, "train-iqa")?)?;
    if s.config != cfg.scorer_config() {
        return Err(CliError::Dependency(format!("{file} does not match the configured scorer")));
    }
    Ok(s)
}

fn load_adapted(cfg: &RunConfig) -> Result<NoisePredictor> {
    let mut net = load_base(cfg)?;
    let ck = load(&cfg.out_dir, ADAPTERS_FILE, CheckpointKind::Adapters, "finetune")?;
    apply_adapter_checkpoint(&mut net, &ck)?;
    Ok(net)
}

/// The clean training corpus shared by `train-base` and fine-tuning.
pub fn diffusion_data(cfg: &RunConfig) -> Result<Vec<DiffusionItem>> {
    let d = &cfg.data;
    Ok(build_diffusion_dataset(d.diffusion_items, d.image_size, d.conditional, derive_seed(cfg.seed, stream::DIFFUSION_ITEM, 0))?)
}

/// Disjoint labelled corpora: guiding scorer, held-out scorer, evaluation.
pub fn iqa_data(cfg: &RunConfig) -> Result<[Vec<IqaItem>; 3]> {
    let d = &cfg.data;
    let build = |n, k| build_iqa_dataset(n, d.conditional, d.image_size, derive_seed(cfg.seed, stream::IQA_ITEM, k));
    Ok([build(d.iqa_items, 1)?, build(d.iqa_items, 2)?, build(d.iqa_heldout_items, 3)?])
}

#[derive(Debug, Clone, Serialize)]
pub struct ScorerReport {
    pub scorer: String,
    pub final_loss: f64,
    pub spearman: f64,
    /// Matched minus mismatched mean score; empty for unconditional scorers.
    pub matched_gap: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct LossRow {
    scorer: String,
    epoch: usize,
    loss: f64,
}

fn stack_images(items: &[IqaItem]) -> Result<(Tensor, Option<Vec<ConditionToken>>)> {
    let images: Vec<Tensor> = items.iter().map(|i| i.image.clone()).collect();
    let conds: Option<Vec<ConditionToken>> = items.iter().map(|i| i.condition).collect();
    Ok((Tensor::stack(&images)?, conds))
}

pub fn scorer_report(name: &str, s: &Scorer, eval: &[IqaItem], final_loss: f64) -> Result<ScorerReport> {
    let (x, conds) = stack_images(eval)?;
    let cond = if s.config.variant == ScorerVariant::Conditional { conds.as_deref() } else { None };
    let scores = s.score_batch(&x, cond)?;
    let labels: Vec<f64> = eval.iter().map(|i| i.label).collect();
    let matched_gap = cond.map(|_| {
        let mean = |m: bool| {
            let v: Vec<f64> = eval.iter().zip(&scores).filter(|(i, _)| i.matched == m).map(|(_, s)| *s).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        mean(true) - mean(false)
    });
    Ok(ScorerReport { scorer: name.into(), final_loss, spearman: spearman(&scores, &labels)?, matched_gap })
}

/// Trains the guiding and the held-out scorer on disjoint data with
/// distinct seeds.
pub fn train_iqa(cfg: &RunConfig) -> Result<Vec<ScorerReport>> {
    let out = &cfg.out_dir;
    prepare(out, cfg)?;
    let [guide_data, heldout_data, eval] = iqa_data(cfg)?;
    let mut reports = Vec::new();
    let mut losses = Vec::new();
    for (k, (name, file, data)) in [("guide", GUIDE_SCORER_FILE, &guide_data), ("heldout", HELDOUT_SCORER_FILE, &heldout_data)].into_iter().enumerate() {
        let opts = EvaluatorTraining { epochs: cfg.iqa.epochs, lr: cfg.iqa.lr, batch_size: cfg.iqa.batch_size, seed: derive_seed(cfg.seed, stream::INIT, 1 + k as u64) };
        let (scorer, hist) = train_evaluator(cfg.scorer_config(), data, &opts)?;
        scorer_checkpoint(&scorer, provenance(cfg, cfg.iqa.epochs)).save(&out.join(file))?;
        losses.extend(hist.iter().enumerate().map(|(epoch, &loss)| LossRow { scorer: name.into(), epoch, loss }));
        reports.push(scorer_report(name, &scorer, &eval, *hist.last().expect("epochs >= 1"))?);
    }
    write_csv(&out.join("iqa_losses.csv"), &losses)?;
    write_csv(&out.join("iqa_eval.csv"), &reports)?;
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
struct StepLoss {
    step: usize,
    loss: f64,
}

/// Plain denoising pretraining of the base predictor.
pub fn train_base_cmd(cfg: &RunConfig) -> Result<Vec<f64>> {
    let out = &cfg.out_dir;
    prepare(out, cfg)?;
    let data = diffusion_data(cfg)?;
    let sched = cfg.schedule()?;
    let mut net = NoisePredictor::new(cfg.arch(), derive_seed(cfg.seed, stream::INIT, 3))?;
    let f = &cfg.diffusion;
    let train = BaseTrainConfig { steps: f.train_steps, batch_size: f.batch_size, lr: f.lr, seed: derive_seed(cfg.seed, stream::TRAIN, 0) };
    let losses = train_base(&mut net, &data, &sched, &train)?;
    base_checkpoint(&net, provenance(cfg, f.train_steps)).save(&out.join(BASE_FILE))?;
    let rows: Vec<StepLoss> = losses.iter().enumerate().map(|(step, &loss)| StepLoss { step, loss }).collect();
    write_csv(&out.join("base_losses.csv"), &rows)?;
    Ok(losses)
}

fn finetune_into(cfg: &RunConfig, acpo: &AcpoConfig, base: &NoisePredictor, guide: &Scorer, data: &[DiffusionItem], out: &Path) -> Result<(NoisePredictor, FinetuneOutcome)> {
    let mut net = base.clone();
    attach_adapters(&mut net, cfg.adapters.rank, cfg.adapters.scale, derive_seed(cfg.seed, stream::INIT, 4))?;
    let outcome = finetune_run(&mut net, guide, &cfg.schedule()?, data, acpo).map_err(|e| match e {
        NumError::Invariant(m) => CliError::Invariant(m),
        other => CliError::Numeric(other),
    })?;
    let ck = adapter_checkpoint(&net, provenance(cfg, acpo.steps)).expect("adapters attached");
    ck.save(&out.join(ADAPTERS_FILE))?;
    write_csv(&out.join("steps.csv"), &outcome.reports)?;
    Ok((net, outcome))
}

/// Stage-2 fine-tuning of freshly attached adapters.
pub fn finetune(cfg: &RunConfig) -> Result<FinetuneOutcome> {
    let out = &cfg.out_dir;
    let base = load_base(cfg)?;
    let guide = load_scorer(cfg, GUIDE_SCORER_FILE)?;
    prepare(out, cfg)?;
    let data = diffusion_data(cfg)?;
    Ok(finetune_into(cfg, &cfg.acpo_config(), &base, &guide, &data, out)?.1)
}

#[derive(Debug, Clone, Serialize)]
pub struct FrechetRow {
    pub model: String,
    pub frechet: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub summary: Vec<SummaryRow>,
    pub frechet: Vec<FrechetRow>,
}

fn feature_moments(s: &Scorer, images: &Tensor) -> Result<GaussianMoments<f64>> {
    let f = s.features(images)?;
    let d = f.shape()[1];
    let rows: Vec<Vec<f64>> = f.data().chunks(d).map(<[f64]>::to_vec).collect();
    Ok(GaussianMoments::from_samples(&rows)?)
}

fn evaluate_into(cfg: &RunConfig, run_id: &str, net: &NoisePredictor, guide: &Scorer, heldout: &Scorer, out: &Path) -> Result<Evaluation> {
    let sched = cfg.schedule()?;
    let ev = evaluate_pairwise(net, heldout, &sched, cfg.metrics.eval_samples, derive_seed(cfg.seed, stream::EVAL, 0))?;
    let cond = ev.conditions.as_deref();
    let guide_sample = PairedSample::new(score_images(guide, &ev.baseline_images, cond)?, score_images(guide, &ev.finetuned_images, cond)?)?;
    let summary = vec![ev.summary(run_id, "heldout_score")?, SummaryRow::from_sample(run_id, "guide_score", &guide_sample)?];
    write_csv(&out.join("summary.csv"), &summary)?;

    let d = &cfg.data;
    let reference = build_diffusion_dataset(cfg.metrics.reference_items, d.image_size, d.conditional, derive_seed(cfg.seed, stream::EVAL, 1))?;
    let reference = Tensor::stack(&reference.into_iter().map(|i| i.image).collect::<Vec<_>>())?;
    let clean = feature_moments(heldout, &reference)?;
    let frechet = vec![
        FrechetRow { model: "baseline".into(), frechet: frechet_gaussian(&feature_moments(heldout, &ev.baseline_images)?, &clean)? },
        FrechetRow { model: "finetuned".into(), frechet: frechet_gaussian(&feature_moments(heldout, &ev.finetuned_images)?, &clean)? },
    ];
    write_csv(&out.join("frechet.csv"), &frechet)?;

    if cfg.metrics.export_samples > 0 {
        let dir = out.join("samples");
        std::fs::create_dir_all(&dir)?;
        let s = d.image_size;
        for i in 0..cfg.metrics.export_samples {
            let b = ev.baseline_images.rows(i, 1)?.reshape(&[s, s])?;
            let f = ev.finetuned_images.rows(i, 1)?.reshape(&[s, s])?;
            write_pgm(&dir.join(format!("pair_{i:03}.pgm")), &side_by_side(&b, &f, 2)?)?;
        }
    }
    Ok(Evaluation { summary, frechet })
}

/// Matched-noise comparison of base and adapted samples.
pub fn evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    let out = &cfg.out_dir;
    let net = load_adapted(cfg)?;
    let guide = load_scorer(cfg, GUIDE_SCORER_FILE)?;
    let heldout = load_scorer(cfg, HELDOUT_SCORER_FILE)?;
    prepare(out, cfg)?;
    evaluate_into(cfg, "evaluate", &net, &guide, &heldout, out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub group: String,
    pub cell: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub t_late_max: usize,
    pub guided_start: Option<f64>,
    pub guided_final: Option<f64>,
    pub final_drift: f64,
    pub heldout_baseline: f64,
    pub heldout_finetuned: f64,
    pub heldout_change: f64,
    pub heldout_t: Option<f64>,
    pub heldout_win_rate: f64,
    pub frechet_finetuned: f64,
}

/// The weight, window and anchor grids; identical cells are trained once.
pub fn ablation_cells(cfg: &RunConfig) -> Vec<(String, String, AcpoConfig)> {
    let base = cfg.acpo_config();
    let mut cells = Vec::new();
    for &l2 in &cfg.ablate.lambda2 {
        cells.push(("weight".to_string(), format!("lambda2={l2}"), AcpoConfig { lambda2: l2, ..base.clone() }));
    }
    for &w in &cfg.ablate.t_late_max {
        cells.push(("window".to_string(), format!("t_late_max={w}"), AcpoConfig { t_late_max: w, ..base.clone() }));
    }
    for &l1 in &cfg.ablate.lambda1 {
        cells.push(("anchor".to_string(), format!("lambda1={l1}"), AcpoConfig { lambda1: l1, ..base.clone() }));
    }
    cells
}

pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let out = &cfg.out_dir;
    let base = load_base(cfg)?;
    let guide = load_scorer(cfg, GUIDE_SCORER_FILE)?;
    let heldout = load_scorer(cfg, HELDOUT_SCORER_FILE)?;
    prepare(out, cfg)?;
    let data = diffusion_data(cfg)?;
    let mut done: BTreeMap<String, AblationRow> = BTreeMap::new();
    let mut rows = Vec::new();
    for (group, cell, acpo) in ablation_cells(cfg) {
        let key = format!("l1={} l2={} w={}", acpo.lambda1, acpo.lambda2, acpo.t_late_max);
        let row = match done.get(&key) {
            Some(r) => AblationRow { group: group.clone(), cell: cell.clone(), ..r.clone() },
            None => {
                let dir: PathBuf = out.join("ablate").join(key.replace(' ', "_"));
                let cell_cfg = RunConfig { acpo: AcpoConfig { seed: 0, ..acpo.clone() }, ..cfg.clone() };
                prepare(&dir, &cell_cfg)?;
                let (net, outcome) = finetune_into(cfg, &acpo, &base, &guide, &data, &dir)?;
                let ev = evaluate_into(cfg, &cell, &net, &guide, &heldout, &dir)?;
                let h = &ev.summary[0];
                let r = AblationRow {
                    group,
                    cell,
                    lambda1: acpo.lambda1,
                    lambda2: acpo.lambda2,
                    t_late_max: acpo.t_late_max,
                    guided_start: outcome.initial_guided_score(),
                    guided_final: outcome.final_guided_score(),
                    final_drift: outcome.final_drift,
                    heldout_baseline: h.baseline_mean,
                    heldout_finetuned: h.finetuned_mean,
                    heldout_change: h.improvement,
                    heldout_t: h.t_statistic,
                    heldout_win_rate: h.win_rate,
                    frechet_finetuned: ev.frechet[1].frechet,
                };
                done.insert(key, r.clone());
                r
            }
        };
        rows.push(row);
    }
    write_csv(&out.join("ablate.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreRow {
    pub path: String,
    pub score: f64,
}

/// Scores PGM files with a trained scorer.
pub fn score(cfg: &RunConfig, files: &[PathBuf], heldout: bool, condition: Option<usize>) -> Result<Vec<ScoreRow>> {
    let scorer = load_scorer(cfg, if heldout { HELDOUT_SCORER_FILE } else { GUIDE_SCORER_FILE })?;
    let conditional = scorer.config.variant == ScorerVariant::Conditional;
    let cond = match (conditional, condition) {
        (true, Some(c)) => Some(ConditionToken::new(c, scorer.config.num_classes)?),
        (true, None) => return Err(CliError::Config("the conditional scorer needs --condition".into())),
        (false, Some(_)) => return Err(CliError::Config("--condition only applies to conditional scorers".into())),
        (false, None) => None,
    };
    let size = cfg.data.image_size;
    let mut rows = Vec::with_capacity(files.len());
    for f in files {
        let img = read_pgm(f)?;
        if img.shape() != [size, size] {
            return Err(CliError::Config(format!("{}: image is {:?}, scorer expects {size}x{size}", f.display(), img.shape())));
        }
        let x = img.reshape(&[1, size, size])?;
        let s = scorer.score_batch(&x, cond.as_ref().map(std::slice::from_ref))?[0];
        rows.push(ScoreRow { path: f.display().to_string(), score: s });
    }
    prepare(&cfg.out_dir, cfg)?;
    write_csv(&cfg.out_dir.join("scores.csv"), &rows)?;
    Ok(rows)
}
