//! Pool-based active learning: initial random annotation, then rounds of
//! score, select, annotate, retrain and evaluate.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::acquisition::{
    aggregate, bald_map, select_bald, select_powerbald, select_random, AcquisitionKind,
    AcquisitionSpec, ImageId, ImageScore,
};
use crate::error::{Error, Result};
use crate::metrics::{miou, ConfusionMatrix};
use crate::model::{init_model, train, Architecture, RetrainMode, SegModel, TrainConfig};
use crate::seed::{self, derive_seed, stream};
use crate::synth::Dataset;
use crate::tensor::{ClassMask, Image};

/// Annotated / available split of the training pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    annotated: Vec<ImageId>,
    available: BTreeSet<ImageId>,
    pool_size: usize,
}

impl PoolState {
    pub fn new(pool: &[ImageId]) -> Result<Self> {
        let mut available = BTreeSet::new();
        for &id in pool {
            if !available.insert(id) {
                return Err(Error::DuplicateImage(id));
            }
        }
        Ok(PoolState {
            annotated: Vec::new(),
            available,
            pool_size: pool.len(),
        })
    }

    /// Annotated ids in acquisition order.
    pub fn annotated(&self) -> &[ImageId] {
        &self.annotated
    }

    /// Available ids in ascending order.
    pub fn available(&self) -> Vec<ImageId> {
        self.available.iter().copied().collect()
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    /// Moves `ids` from available to annotated; all-or-nothing.
    pub fn mark_annotated(&mut self, ids: &[ImageId]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &id in ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateImage(id));
            }
            if !self.available.contains(&id) {
                return Err(if self.annotated.contains(&id) {
                    Error::DuplicateImage(id)
                } else {
                    Error::UnknownImage(id)
                });
            }
        }
        for &id in ids {
            self.available.remove(&id);
            self.annotated.push(id);
        }
        Ok(())
    }

    /// Disjointness and coverage of the full pool.
    pub fn check(&self) -> Result<()> {
        let annotated: BTreeSet<ImageId> = self.annotated.iter().copied().collect();
        let ok = annotated.len() == self.annotated.len()
            && annotated.is_disjoint(&self.available)
            && annotated.len() + self.available.len() == self.pool_size;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "pool state broken: {} annotated, {} available, pool of {}",
                self.annotated.len(),
                self.available.len(),
                self.pool_size
            )))
        }
    }
}

/// Simulated annotator: ground-truth pairs for `ids`, in request order.
pub fn annotate(oracle: &Dataset, ids: &[ImageId]) -> Result<Vec<(Image, ClassMask)>> {
    let mut seen = BTreeSet::new();
    ids.iter()
        .map(|&id| {
            if !seen.insert(id) {
                return Err(Error::DuplicateImage(id));
            }
            let s = oracle.get(id).ok_or(Error::UnknownImage(id))?;
            Ok((s.image.clone(), s.mask.clone()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub ids: Vec<ImageId>,
    /// Scores of every available image; empty when no inference ran.
    pub scores: Vec<ImageScore>,
    pub mc_predict_calls: usize,
}

/// Monte-Carlo settings for scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    pub samples: usize,
    pub dropout_p: f64,
    /// Per-image mask streams derive from `(seed, image id)`.
    pub seed: u64,
}

/// BALD score of every id, computed in parallel.
pub fn score_images(
    model: &SegModel,
    data: &Dataset,
    ids: &[ImageId],
    spec: &AcquisitionSpec,
    mc: McSettings,
) -> Result<Vec<ImageScore>> {
    ids.par_iter()
        .map(|&id| {
            let s = data.get(id).ok_or(Error::UnknownImage(id))?;
            let image_seed = derive_seed(mc.seed, &[id as u64]);
            let stack = model.mc_predict(&s.image, mc.samples, mc.dropout_p, image_seed)?;
            aggregate(id, &bald_map(&stack)?, spec.aggregation)
        })
        .collect()
}

/// Picks `sample_size` ids from `available` with the acquisition in `spec`.
pub fn sampling(
    model: &SegModel,
    data: &Dataset,
    available: &[ImageId],
    spec: &AcquisitionSpec,
    mc: McSettings,
    sample_size: usize,
) -> Result<Sampled> {
    spec.validate()?;
    if sample_size > available.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {sample_size} of {} available images",
            available.len()
        )));
    }
    if !spec.kind.needs_inference() {
        return Ok(Sampled {
            ids: select_random(available, sample_size, spec.seed)?,
            scores: Vec::new(),
            mc_predict_calls: 0,
        });
    }
    let scores = score_images(model, data, available, spec, mc)?;
    let ids = match spec.kind {
        AcquisitionKind::Bald => select_bald(&scores, sample_size)?,
        AcquisitionKind::PowerBald => {
            select_powerbald(&scores, sample_size, spec.temperature, spec.seed)?
        }
        AcquisitionKind::Random => unreachable!(),
    };
    Ok(Sampled {
        ids,
        mc_predict_calls: scores.len(),
        scores,
    })
}

/// Dataset-level confusion from deterministic predictions.
pub fn evaluate(model: &SegModel, val: &Dataset) -> Result<ConfusionMatrix> {
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_image: Vec<ConfusionMatrix> = val
        .samples()
        .par_iter()
        .map(|s| {
            let pred = model.predict(&s.image)?.argmax(0);
            crate::metrics::confusion(&pred, &s.mask, model.classes())
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(model.classes());
    for cm in &per_image {
        total.merge(cm)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub acquisition: AcquisitionSpec,
    pub iterations: usize,
    pub sample_size: usize,
    pub initial_size: usize,
    pub dropout_p: f64,
    pub mc_samples: usize,
    pub repetitions: usize,
    /// Architecture for fresh initialisation; its dropout is replaced by
    /// `dropout_p`. Ignored when a warm start is supplied.
    pub arch: Architecture,
    pub train: TrainConfig,
    pub retrain_mode: RetrainMode,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Sample size 10, initial set 10, 8 rounds (90 labelled), dropout 0.5,
    /// 3 repetitions.
    pub fn standard(kind: AcquisitionKind) -> Self {
        ExperimentConfig {
            run_id: "run".into(),
            acquisition: AcquisitionSpec::new(kind),
            iterations: 8,
            sample_size: 10,
            initial_size: 10,
            dropout_p: 0.5,
            mc_samples: 20,
            repetitions: 3,
            arch: Architecture::standard(1, 3, 0.5).expect("standard architecture"),
            train: TrainConfig::default(),
            retrain_mode: RetrainMode::Restart,
            seed: 0,
        }
    }

    /// Like [`ExperimentConfig::standard`] with 9 rounds (100 labelled).
    pub fn extended(kind: AcquisitionKind) -> Self {
        ExperimentConfig {
            iterations: 9,
            ..Self::standard(kind)
        }
    }

    pub fn validate(&self, pool_size: usize) -> Result<()> {
        self.acquisition.validate()?;
        self.train.validate()?;
        if self.sample_size == 0 {
            return Err(Error::InvalidArgument("sample size must be >= 1".into()));
        }
        if self.initial_size == 0 {
            return Err(Error::InvalidArgument("initial dataset size must be >= 1".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidArgument("need at least one repetition".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidArgument("need at least one MC sample".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {} outside [0,1)",
                self.dropout_p
            )));
        }
        let needed = self.initial_size + self.iterations * self.sample_size;
        if needed > pool_size {
            return Err(Error::InvalidArgument(format!(
                "{} initial + {} x {} images exceeds the pool of {pool_size}",
                self.initial_size, self.iterations, self.sample_size
            )));
        }
        Ok(())
    }

    pub fn final_labeled(&self) -> usize {
        self.initial_size + self.iterations * self.sample_size
    }
}

/// Seeds of one repetition. They depend only on the master seed and the
/// repetition index, so every acquisition starts from the same initial set
/// and weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepetitionSeeds {
    pub repetition: u64,
}

impl RepetitionSeeds {
    pub fn new(master: u64, repetition: usize) -> Self {
        RepetitionSeeds {
            repetition: derive_seed(master, &[repetition as u64]),
        }
    }

    pub fn initial_selection(&self) -> u64 {
        derive_seed(self.repetition, &[stream::INIT_SELECTION])
    }

    pub fn model_init(&self) -> u64 {
        derive_seed(self.repetition, &[stream::MODEL_INIT])
    }

    pub fn train(&self, iteration: usize) -> u64 {
        derive_seed(self.repetition, &[stream::TRAIN, iteration as u64])
    }

    pub fn selection(&self, iteration: usize) -> u64 {
        derive_seed(self.repetition, &[stream::SELECTION, iteration as u64])
    }

    pub fn mc(&self, iteration: usize) -> u64 {
        derive_seed(self.repetition, &[stream::MC_DROPOUT, iteration as u64])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurveRecord {
    pub acquisition: AcquisitionKind,
    pub repetition: usize,
    /// 0 is the model trained on the initial random set.
    pub iteration: usize,
    pub n_labeled: usize,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub seed: u64,
}

/// Per-repetition bookkeeping beyond the learning curve.
#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionTrace {
    pub repetition: usize,
    /// Annotated ids in acquisition order after each iteration.
    pub annotated: Vec<Vec<ImageId>>,
    pub available_sizes: Vec<usize>,
    /// Pool scores per round (index 0 is round 1); empty for Random.
    pub scores: Vec<Vec<ImageScore>>,
    pub mc_predict_calls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<LearningCurveRecord>,
    pub traces: Vec<RepetitionTrace>,
}

pub struct ExperimentData<'a> {
    pub pool: &'a Dataset,
    pub val: &'a Dataset,
    pub warm_start: Option<&'a SegModel>,
}

fn train_on(
    base: &SegModel,
    pool: &Dataset,
    state: &PoolState,
    cfg: &TrainConfig,
    shuffle_seed: u64,
) -> Result<SegModel> {
    // a fixed (ascending id) order keeps training independent of the
    // acquisition order
    let mut ids = state.annotated().to_vec();
    ids.sort_unstable();
    let data = annotate(pool, &ids)?;
    let cfg = TrainConfig {
        shuffle_seed,
        ..cfg.clone()
    };
    Ok(train(base, &data, &cfg)?.0)
}

fn record(
    cfg: &ExperimentConfig,
    rep: usize,
    iteration: usize,
    n_labeled: usize,
    seed: u64,
    model: &SegModel,
    val: &Dataset,
) -> Result<LearningCurveRecord> {
    let r = miou(&evaluate(model, val)?)?;
    Ok(LearningCurveRecord {
        acquisition: cfg.acquisition.kind,
        repetition: rep,
        iteration,
        n_labeled,
        per_class: r.per_class,
        miou: r.mean,
        seed,
    })
}

fn run_repetition(
    cfg: &ExperimentConfig,
    data: &ExperimentData<'_>,
    rep: usize,
) -> Result<(Vec<LearningCurveRecord>, RepetitionTrace)> {
    let seeds = RepetitionSeeds::new(cfg.seed, rep);
    let ctx = |iteration: usize| {
        move |e: Error| {
            e.context(format!(
                "acquisition {}, repetition {rep}, iteration {iteration}",
                cfg.acquisition.kind
            ))
        }
    };
    let base = match data.warm_start {
        Some(m) => m.with_dropout(cfg.dropout_p)?,
        None => init_model(&cfg.arch.with_dropout(cfg.dropout_p)?, seeds.model_init())?,
    };
    let mut state = PoolState::new(&data.pool.ids())?;
    let initial = select_random(&state.available(), cfg.initial_size, seeds.initial_selection())
        .map_err(ctx(0))?;
    state.mark_annotated(&initial).map_err(ctx(0))?;
    let mut model = train_on(&base, data.pool, &state, &cfg.train, seeds.train(0)).map_err(ctx(0))?;
    let mut records = vec![record(cfg, rep, 0, state.annotated().len(), seeds.repetition, &model, data.val)
        .map_err(ctx(0))?];
    let mut trace = RepetitionTrace {
        repetition: rep,
        annotated: vec![state.annotated().to_vec()],
        available_sizes: vec![state.available().len()],
        scores: Vec::new(),
        mc_predict_calls: 0,
    };
    log::info!(
        "{} rep {rep} iter 0: {} labelled, mIoU {:.4}",
        cfg.acquisition.kind,
        state.annotated().len(),
        records[0].miou
    );
    for it in 1..=cfg.iterations {
        let spec = AcquisitionSpec {
            seed: seeds.selection(it),
            ..cfg.acquisition.clone()
        };
        let mc = McSettings {
            samples: cfg.mc_samples,
            dropout_p: cfg.dropout_p,
            seed: seeds.mc(it),
        };
        let picked = sampling(&model, data.pool, &state.available(), &spec, mc, cfg.sample_size)
            .map_err(ctx(it))?;
        state.mark_annotated(&picked.ids).map_err(ctx(it))?;
        state.check().map_err(ctx(it))?;
        let start = match cfg.retrain_mode {
            RetrainMode::Restart => &base,
            RetrainMode::Continue => &model,
        };
        model = train_on(start, data.pool, &state, &cfg.train, seeds.train(it)).map_err(ctx(it))?;
        let r = record(cfg, rep, it, state.annotated().len(), seeds.repetition, &model, data.val)
            .map_err(ctx(it))?;
        log::info!(
            "{} rep {rep} iter {it}: {} labelled, mIoU {:.4}",
            cfg.acquisition.kind,
            r.n_labeled,
            r.miou
        );
        records.push(r);
        trace.annotated.push(state.annotated().to_vec());
        trace.available_sizes.push(state.available().len());
        trace.mc_predict_calls += picked.mc_predict_calls;
        trace.scores.push(picked.scores);
    }
    Ok((records, trace))
}

/// Runs every repetition (in parallel) and returns records ordered by
/// repetition then iteration.
pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData<'_>) -> Result<ExperimentOutput> {
    cfg.validate(data.pool.len())?;
    if data.val.is_empty() {
        return Err(Error::EmptyDataset.context("validation set"));
    }
    let per_rep: Vec<(Vec<LearningCurveRecord>, RepetitionTrace)> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| run_repetition(cfg, data, rep))
        .collect::<Result<_>>()?;
    let mut out = ExperimentOutput {
        records: Vec::new(),
        traces: Vec::new(),
    };
    for (records, trace) in per_rep {
        out.records.extend(records);
        out.traces.push(trace);
    }
    Ok(out)
}

/// Model trained once on the whole pool with the seeds of repetition `rep`
/// (the full-pool benchmark).
pub fn train_full_pool(
    cfg: &ExperimentConfig,
    pool: &Dataset,
    warm_start: Option<&SegModel>,
    rep: usize,
) -> Result<SegModel> {
    let seeds = RepetitionSeeds::new(cfg.seed, rep);
    let base = match warm_start {
        Some(m) => m.with_dropout(cfg.dropout_p)?,
        None => init_model(&cfg.arch.with_dropout(cfg.dropout_p)?, seeds.model_init())?,
    };
    let mut state = PoolState::new(&pool.ids())?;
    state.mark_annotated(&pool.ids())?;
    train_on(&base, pool, &state, &cfg.train, seeds.train(0))
}

/// Seed helper for callers that need the stream an image is scored with.
pub fn image_mc_seed(mc_seed: u64, id: ImageId) -> u64 {
    seed::derive_seed(mc_seed, &[id as u64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SceneConfig;

    fn tiny_scene(tag: &str) -> SceneConfig {
        SceneConfig {
            height: 16,
            width: 16,
            crop_radius: (2, 3),
            weed_radius: (1, 2),
            tag: tag.into(),
            ..SceneConfig::corn_weed()
        }
    }

    fn tiny_config(kind: AcquisitionKind) -> ExperimentConfig {
        ExperimentConfig {
            iterations: 2,
            sample_size: 3,
            initial_size: 4,
            mc_samples: 4,
            repetitions: 2,
            arch: Architecture::with_widths(1, 3, 0.5, &[4]).unwrap(),
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            seed: 11,
            ..ExperimentConfig::standard(kind)
        }
    }

    fn fixture() -> (Dataset, Dataset) {
        let mut val_cfg = tiny_scene("val");
        val_cfg.seed = 99;
        (
            Dataset::synthesize(&tiny_scene("pool"), 14, 0).unwrap(),
            Dataset::synthesize(&val_cfg, 4, 0).unwrap(),
        )
    }

    #[test]
    fn pool_state_bookkeeping() {
        let mut s = PoolState::new(&[1, 2, 3, 4]).unwrap();
        s.mark_annotated(&[3, 1]).unwrap();
        assert_eq!(s.annotated(), &[3, 1]);
        assert_eq!(s.available(), vec![2, 4]);
        s.check().unwrap();
        assert!(matches!(s.mark_annotated(&[3]), Err(Error::DuplicateImage(3))));
        assert!(matches!(s.mark_annotated(&[9]), Err(Error::UnknownImage(9))));
        assert!(matches!(s.mark_annotated(&[2, 2]), Err(Error::DuplicateImage(2))));
        assert_eq!(s.available(), vec![2, 4]);
        assert!(PoolState::new(&[1, 1]).is_err());
    }

    #[test]
    fn annotate_cases() {
        let (pool, _) = fixture();
        assert!(annotate(&pool, &[]).unwrap().is_empty());
        assert_eq!(annotate(&pool, &pool.ids()).unwrap().len(), pool.len());
        let two = annotate(&pool, &[5, 2]).unwrap();
        assert_eq!(two[0].1, pool.get(5).unwrap().mask);
        assert!(matches!(annotate(&pool, &[1, 1]), Err(Error::DuplicateImage(1))));
        assert!(matches!(annotate(&pool, &[100]), Err(Error::UnknownImage(100))));
    }

    #[test]
    fn sampling_delegation_and_exhaustion() {
        let (pool, _) = fixture();
        let model = init_model(&Architecture::with_widths(1, 3, 0.5, &[4]).unwrap(), 1).unwrap();
        let mc = McSettings {
            samples: 3,
            dropout_p: 0.5,
            seed: 2,
        };
        let available: Vec<ImageId> = (2..9).collect();
        let mut spec = AcquisitionSpec::new(AcquisitionKind::Random);
        spec.seed = 7;
        let s = sampling(&model, &pool, &available, &spec, mc, 3).unwrap();
        assert_eq!(s.ids, select_random(&available, 3, 7).unwrap());
        assert_eq!(s.mc_predict_calls, 0);
        for kind in AcquisitionKind::ALL {
            let spec = AcquisitionSpec::new(kind);
            let mut got = sampling(&model, &pool, &available, &spec, mc, available.len())
                .unwrap()
                .ids;
            got.sort_unstable();
            assert_eq!(got, available);
        }
        let bald = sampling(&model, &pool, &available, &AcquisitionSpec::new(AcquisitionKind::Bald), mc, 2)
            .unwrap();
        assert_eq!(bald.mc_predict_calls, available.len());
        assert_eq!(bald.ids, select_bald(&bald.scores, 2).unwrap());
    }

    #[test]
    fn experiment_invariants_and_determinism() {
        let (pool, val) = fixture();
        for kind in AcquisitionKind::ALL {
            let cfg = tiny_config(kind);
            let data = ExperimentData {
                pool: &pool,
                val: &val,
                warm_start: None,
            };
            let out = run_experiment(&cfg, &data).unwrap();
            assert_eq!(out.records.len(), cfg.repetitions * (cfg.iterations + 1));
            for r in &out.records {
                assert_eq!(r.n_labeled, cfg.initial_size + r.iteration * cfg.sample_size);
                assert!((0.0..=1.0).contains(&r.miou));
            }
            for t in &out.traces {
                let last = t.annotated.last().unwrap();
                let distinct: BTreeSet<_> = last.iter().collect();
                assert_eq!(distinct.len(), last.len());
                for w in t.available_sizes.windows(2) {
                    assert_eq!(w[0] - w[1], cfg.sample_size);
                }
                for (a, n) in t.annotated.iter().zip(&t.available_sizes) {
                    assert_eq!(a.len() + n, pool.len());
                }
                if kind == AcquisitionKind::Random {
                    assert_eq!(t.mc_predict_calls, 0);
                }
            }
            assert_eq!(run_experiment(&cfg, &data).unwrap(), out);
        }
    }

    #[test]
    fn zero_iterations_give_one_record_and_match_full_pool_training() {
        let (pool, val) = fixture();
        let cfg = ExperimentConfig {
            iterations: 0,
            initial_size: pool.len(),
            repetitions: 1,
            ..tiny_config(AcquisitionKind::Bald)
        };
        let data = ExperimentData {
            pool: &pool,
            val: &val,
            warm_start: None,
        };
        let out = run_experiment(&cfg, &data).unwrap();
        assert_eq!(out.records.len(), 1);
        let full = train_full_pool(&cfg, &pool, None, 0).unwrap();
        let expected = miou(&evaluate(&full, &val).unwrap()).unwrap().mean;
        assert_eq!(out.records[0].miou, expected);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config(AcquisitionKind::Bald);
        assert!(cfg.validate(10).is_ok());
        assert!(cfg.validate(9).is_err());
        cfg.dropout_p = 1.0;
        assert!(cfg.validate(100).is_err());
        let cfg = ExperimentConfig {
            sample_size: 0,
            ..tiny_config(AcquisitionKind::Bald)
        };
        assert!(cfg.validate(100).is_err());
        assert_eq!(ExperimentConfig::standard(AcquisitionKind::Bald).final_labeled(), 90);
        assert_eq!(ExperimentConfig::extended(AcquisitionKind::Bald).final_labeled(), 100);
    }
}
