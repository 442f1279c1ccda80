//! Few-shot evaluation: dataset splits, episode sampling, the traditional
//! and meta-learning paradigms, and seed aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    default_lambda_grid, default_text_weight_grid, linear_probe_fit, support_by_class,
    vl_prototype_build,
};
use crate::classify::{ensemble_head, zero_shot_head, ClassifierHead, PromptSpec, Scorer};
use crate::encoder::{EncoderSpec, FrozenDualEncoder};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::textparams::Method;
use crate::tokens::ClassSet;
use crate::train::{
    grid_search, pick_best, train_from, initial_parameters, BatchInfo, CheckpointPolicy,
    Example, TrainConfig, TrainGrid, TrainOutcome,
};

pub const RUN_RECORD_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_QUERIES_PER_CLASS: usize = 15;
pub const DEFAULT_VALIDATION_EPISODES: usize = 20;

/// Top-1 accuracy of `scorer` on `queries`.
pub fn evaluate(scorer: &dyn Scorer, queries: &[Example]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::config("cannot evaluate on an empty query set"));
    }
    let mut correct = 0usize;
    for q in queries {
        if scorer.predict(q.embedding.view())? == q.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

/// A labeled visual embedding with a stable identifier. Labels are global
/// class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub label: usize,
    pub embedding: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Traditional,
    MetaLearning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    MetaTrain,
    MetaVal,
    MetaTest,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSplit {
    Traditional {
        train: Vec<Item>,
        val: Vec<Item>,
        test: Vec<Item>,
    },
    MetaLearning {
        /// Class ids per phase.
        partitions: BTreeMap<Phase, Vec<usize>>,
        items: Vec<Item>,
    },
}

fn label_set(items: &[Item]) -> BTreeSet<usize> {
    items.iter().map(|i| i.label).collect()
}

impl DatasetSplit {
    pub fn traditional(train: Vec<Item>, val: Vec<Item>, test: Vec<Item>) -> Result<Self> {
        let (a, b, c) = (label_set(&train), label_set(&val), label_set(&test));
        if a != b || a != c {
            return Err(Error::Integrity(
                "train, val and test must cover the same classes".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for item in train.iter().chain(&val).chain(&test) {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::Integrity(format!("item id {:?} appears twice", item.id)));
            }
        }
        Ok(DatasetSplit::Traditional { train, val, test })
    }

    pub fn meta_learning(partitions: BTreeMap<Phase, Vec<usize>>, items: Vec<Item>) -> Result<Self> {
        let mut owner: BTreeMap<usize, Phase> = BTreeMap::new();
        for (&phase, classes) in &partitions {
            for &c in classes {
                if let Some(prev) = owner.insert(c, phase) {
                    return Err(Error::Integrity(format!(
                        "class {c} is in both {prev:?} and {phase:?}"
                    )));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for item in &items {
            if !owner.contains_key(&item.label) {
                return Err(Error::Integrity(format!(
                    "item {:?} has class {} outside every partition",
                    item.id, item.label
                )));
            }
            if !seen.insert(item.id.as_str()) {
                return Err(Error::Integrity(format!("item id {:?} appears twice", item.id)));
            }
        }
        Ok(DatasetSplit::MetaLearning { partitions, items })
    }

    pub fn paradigm(&self) -> Paradigm {
        match self {
            DatasetSplit::Traditional { .. } => Paradigm::Traditional,
            DatasetSplit::MetaLearning { .. } => Paradigm::MetaLearning,
        }
    }

    /// Classes available to `phase`; all classes in the traditional paradigm.
    pub fn phase_classes(&self, phase: Phase) -> Vec<usize> {
        match self {
            DatasetSplit::Traditional { train, .. } => label_set(train).into_iter().collect(),
            DatasetSplit::MetaLearning { partitions, .. } => {
                let mut c = partitions.get(&phase).cloned().unwrap_or_default();
                c.sort_unstable();
                c
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    /// Global class ids, ascending; local label `j` is `classes[j]`.
    pub classes: Vec<usize>,
    pub support: Vec<Item>,
    pub query: Vec<Item>,
}

impl Episode {
    fn local(&self, items: &[Item]) -> Vec<Example> {
        items
            .iter()
            .map(|it| {
                let j = self.classes.binary_search(&it.label).expect("episode class");
                Example::new(it.embedding.clone(), j)
            })
            .collect()
    }

    pub fn support_examples(&self) -> Vec<Example> {
        self.local(&self.support)
    }

    pub fn query_examples(&self) -> Vec<Example> {
        self.local(&self.query)
    }

    pub fn class_set(&self, classes: &ClassSet) -> Result<ClassSet> {
        classes.subset(&self.classes)
    }
}

fn by_class<'a>(items: &'a [Item], classes: &[usize]) -> BTreeMap<usize, Vec<&'a Item>> {
    let mut map: BTreeMap<usize, Vec<&Item>> = classes.iter().map(|&c| (c, Vec::new())).collect();
    for it in items {
        if let Some(v) = map.get_mut(&it.label) {
            v.push(it);
        }
    }
    map
}

/// Samples `n` classes of `phase`, then `k` support items per class. Meta
/// queries are up to `queries_per_class` of the remaining items of each
/// class (all of them when `None`); traditional queries are the test items
/// of the sampled classes.
pub fn sample_episode(
    split: &DatasetSplit,
    phase: Phase,
    n: usize,
    k: usize,
    queries_per_class: Option<usize>,
    rng: &mut SeededRng,
) -> Result<Episode> {
    if n == 0 || k == 0 {
        return Err(Error::Sampling("n and k must be >= 1".into()));
    }
    let pool = split.phase_classes(phase);
    if pool.len() < n {
        return Err(Error::Sampling(format!(
            "{n}-way episode needs {n} classes, {phase:?} has {}",
            pool.len()
        )));
    }
    let mut classes: Vec<usize> = rng.sample_indices(pool.len(), n).into_iter().map(|i| pool[i]).collect();
    classes.sort_unstable();

    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::new();
    match split {
        DatasetSplit::Traditional { train, test, .. } => {
            let train_by = by_class(train, &classes);
            let test_by = by_class(test, &classes);
            for &c in &classes {
                let pool = &train_by[&c];
                if pool.len() < k {
                    return Err(Error::Sampling(format!(
                        "class {c} has {} training items, {k} needed",
                        pool.len()
                    )));
                }
                if test_by[&c].is_empty() {
                    return Err(Error::Sampling(format!("class {c} has no test items")));
                }
                support.extend(rng.sample_indices(pool.len(), k).into_iter().map(|i| pool[i].clone()));
            }
            query.extend(test.iter().filter(|it| classes.binary_search(&it.label).is_ok()).cloned());
        }
        DatasetSplit::MetaLearning { items, .. } => {
            let grouped = by_class(items, &classes);
            for &c in &classes {
                let pool = &grouped[&c];
                if pool.len() < k + 1 {
                    return Err(Error::Sampling(format!(
                        "class {c} has {} items, {} needed for {k} support and 1 query",
                        pool.len(),
                        k + 1
                    )));
                }
                let order = rng.sample_indices(pool.len(), pool.len());
                let (s, rest) = order.split_at(k);
                support.extend(s.iter().map(|&i| pool[i].clone()));
                let q = queries_per_class.map_or(rest.len(), |q| q.min(rest.len()));
                query.extend(rest[..q].iter().map(|&i| pool[i].clone()));
            }
        }
    }
    Ok(Episode {
        n_way: n,
        k_shot: k,
        classes,
        support,
        query,
    })
}

/// What is being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "method")]
pub enum ProtocolMethod {
    ZeroShot,
    Tune(Method),
    LinearProbe,
    VlPrototype,
}

impl ProtocolMethod {
    pub fn label(&self) -> String {
        match self {
            ProtocolMethod::ZeroShot => "zero_shot".into(),
            ProtocolMethod::Tune(m) => m.as_str().replace('-', "_"),
            ProtocolMethod::LinearProbe => "linear_probe".into(),
            ProtocolMethod::VlPrototype => "vl_prototype".into(),
        }
    }

    /// Seed counts used when none are given.
    pub fn default_seed_count(&self, paradigm: Paradigm) -> usize {
        match (self, paradigm) {
            (ProtocolMethod::LinearProbe, Paradigm::Traditional) => 5,
            (ProtocolMethod::LinearProbe, Paradigm::MetaLearning) => 100,
            (ProtocolMethod::VlPrototype, Paradigm::Traditional) => 32,
            (ProtocolMethod::VlPrototype, Paradigm::MetaLearning) => 1000,
            (_, Paradigm::Traditional) => 4,
            (_, Paradigm::MetaLearning) => 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub paradigm: Paradigm,
    pub method: ProtocolMethod,
    /// Base training configuration; its method, seed and policy are set by
    /// the protocol.
    pub train: TrainConfig,
    pub grid: TrainGrid,
    pub lambda_grid: Vec<f64>,
    pub text_weight_grid: Vec<f64>,
    pub n_way: usize,
    /// Support items per class; `None` uses every training item
    /// (traditional paradigm only).
    pub k_shot: Option<usize>,
    pub seeds: Vec<u64>,
    /// Seed for hyperparameter selection.
    pub selection_seed: u64,
    pub queries_per_class: usize,
    pub validation_episodes: usize,
    /// More than one template builds a prompt-ensemble head for zero-shot
    /// and VL-prototype.
    pub prompt_templates: Vec<String>,
}

impl ProtocolConfig {
    pub fn new(paradigm: Paradigm, method: ProtocolMethod) -> Self {
        let train_method = match method {
            ProtocolMethod::Tune(m) => m,
            _ => Method::NameTuning,
        };
        let train = TrainConfig::defaults(train_method);
        let seeds = (0..method.default_seed_count(paradigm) as u64).collect();
        Self {
            paradigm,
            method,
            grid: TrainGrid::defaults(train_method),
            prompt_templates: vec![train.prompt_template.clone()],
            train,
            lambda_grid: default_lambda_grid(),
            text_weight_grid: default_text_weight_grid(),
            n_way: 5,
            k_shot: Some(5),
            seeds,
            selection_seed: 0,
            queries_per_class: DEFAULT_QUERIES_PER_CLASS,
            validation_episodes: DEFAULT_VALIDATION_EPISODES,
        }
    }

    pub fn validate(&self, split: &DatasetSplit) -> Result<()> {
        if split.paradigm() != self.paradigm {
            return Err(Error::config(format!(
                "config is for the {:?} paradigm but the split is {:?}",
                self.paradigm,
                split.paradigm()
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if self.prompt_templates.is_empty() {
            return Err(Error::config("at least one prompt template is required"));
        }
        if self.paradigm == Paradigm::MetaLearning {
            if self.k_shot.is_none() {
                return Err(Error::config("the meta-learning paradigm needs k_shot"));
            }
            if self.n_way == 0 || self.queries_per_class == 0 || self.validation_episodes == 0 {
                return Err(Error::config("n_way, queries_per_class and validation_episodes must be >= 1"));
            }
        }
        if let ProtocolMethod::Tune(m) = self.method {
            if self.train.method != m {
                return Err(Error::config(format!(
                    "train.method {} disagrees with method {m}",
                    self.train.method
                )));
            }
            if self.grid.points().is_empty() {
                return Err(Error::config("empty hyperparameter grid"));
            }
        }
        if self.method == ProtocolMethod::LinearProbe && self.lambda_grid.is_empty() {
            return Err(Error::config("empty lambda grid"));
        }
        if self.method == ProtocolMethod::VlPrototype && self.text_weight_grid.is_empty() {
            return Err(Error::config("empty text weight grid"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChosenHyperparameters {
    pub learning_rate: Option<f64>,
    pub alpha: Option<f64>,
    pub l_context: Option<usize>,
    pub lambda: Option<f64>,
    pub text_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub random_names: bool,
    /// α actually applied during training.
    pub effective_alpha: Option<f64>,
    pub prompt_templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionScore {
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub encoder_digest: String,
    pub config: ProtocolConfig,
    /// Sorted by seed.
    pub per_seed: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
    pub seeds: Vec<u64>,
    pub chosen: ChosenHyperparameters,
    pub ablation: AblationFlags,
    pub selection: Vec<SelectionScore>,
    /// Inputs of a command-line run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<RunSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSource {
    pub manifest: String,
    pub cache: String,
    pub encoder: EncoderSpec,
}

/// `(mean, sample std)` accumulated in ascending seed order (Welford), so
/// identical accuracies give exactly that mean and a std of 0. The std is 0
/// for one seed.
pub fn aggregate(results: &[SeedResult]) -> Result<(Vec<SeedResult>, f64, f64)> {
    if results.is_empty() {
        return Err(Error::config("no seed results to aggregate"));
    }
    let mut sorted = results.to_vec();
    sorted.sort_by_key(|r| r.seed);
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, r) in sorted.iter().enumerate() {
        let delta = r.accuracy - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (r.accuracy - mean);
    }
    let std = if sorted.len() < 2 {
        0.0
    } else {
        (m2 / (sorted.len() - 1) as f64).sqrt()
    };
    Ok((sorted, mean, std))
}

/// Part of a protocol run: choosing hyperparameters, or the per-seed runs
/// that produce reported accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Selection,
    Evaluation,
}

/// Training inputs seen during one protocol run, for leakage audits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    /// Class ids that reached a training batch or a fitted baseline.
    pub trained_classes: BTreeMap<Stage, BTreeSet<usize>>,
    /// Item ids that reached a training batch or a fitted baseline.
    pub trained_items: BTreeMap<Stage, BTreeSet<String>>,
    /// Item ids used as queries.
    pub query_items: BTreeMap<Stage, BTreeSet<String>>,
}

impl TrainingTrace {
    fn merge(&mut self, other: TrainingTrace) {
        for (p, s) in other.trained_classes {
            self.trained_classes.entry(p).or_default().extend(s);
        }
        for (p, s) in other.trained_items {
            self.trained_items.entry(p).or_default().extend(s);
        }
        for (p, s) in other.query_items {
            self.query_items.entry(p).or_default().extend(s);
        }
    }

    fn note_training(&mut self, stage: Stage, items: &[&Item]) {
        let classes = self.trained_classes.entry(stage).or_default();
        classes.extend(items.iter().map(|i| i.label));
        let ids = self.trained_items.entry(stage).or_default();
        ids.extend(items.iter().map(|i| i.id.clone()));
    }

    fn note_queries(&mut self, stage: Stage, items: &[Item]) {
        let ids = self.query_items.entry(stage).or_default();
        ids.extend(items.iter().map(|i| i.id.clone()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOutcome {
    pub record: RunRecord,
    pub trace: TrainingTrace,
    /// Per-seed training runs of text-tuning methods, keyed by seed.
    pub runs: BTreeMap<u64, TrainOutcome>,
}

struct Ctx<'a> {
    cfg: &'a ProtocolConfig,
    split: &'a DatasetSplit,
    enc: &'a dyn FrozenDualEncoder,
    classes: &'a ClassSet,
}

/// Hyperparameter candidate; one variant per method family.
#[derive(Debug, Clone, Copy)]
enum Candidate {
    None,
    Train(crate::train::GridPoint),
    Lambda(f64),
    TextWeight(f64),
}

impl Candidate {
    fn label(&self) -> String {
        match self {
            Candidate::None => "none".into(),
            Candidate::Train(p) => format!("lr={:e},alpha={:e},l_context={}", p.learning_rate, p.alpha, p.l_context),
            Candidate::Lambda(l) => format!("lambda={l:e}"),
            Candidate::TextWeight(w) => format!("text_weight={w:e}"),
        }
    }
}

impl<'a> Ctx<'a> {
    fn head(&self, classes: &ClassSet) -> Result<ClassifierHead> {
        let prompts = self
            .cfg
            .prompt_templates
            .iter()
            .map(|t| PromptSpec::new(t, self.enc))
            .collect::<Result<Vec<_>>>()?;
        if prompts.len() == 1 {
            zero_shot_head(self.enc, &prompts[0], classes)
        } else {
            ensemble_head(self.enc, &prompts, classes)
        }
    }

    fn candidates(&self) -> Vec<Candidate> {
        match self.cfg.method {
            ProtocolMethod::ZeroShot => vec![Candidate::None],
            ProtocolMethod::Tune(_) => self.cfg.grid.points().into_iter().map(Candidate::Train).collect(),
            ProtocolMethod::LinearProbe => self.cfg.lambda_grid.iter().map(|&l| Candidate::Lambda(l)).collect(),
            ProtocolMethod::VlPrototype => {
                self.cfg.text_weight_grid.iter().map(|&w| Candidate::TextWeight(w)).collect()
            }
        }
    }

    fn train_config(&self, p: &crate::train::GridPoint, seed: u64, policy: CheckpointPolicy) -> TrainConfig {
        TrainConfig {
            learning_rate: p.learning_rate,
            alpha: p.alpha,
            l_context: p.l_context,
            seed,
            checkpoint_policy: policy,
            ..self.cfg.train.clone()
        }
    }

    /// Fits `cand` on `support` and returns its accuracy on `queries`.
    #[allow(clippy::too_many_arguments)]
    fn fit_and_score(
        &self,
        cand: &Candidate,
        classes: &ClassSet,
        support: &[Item],
        support_ex: &[Example],
        val: Option<&[Example]>,
        queries: &[Example],
        seed: u64,
        stage: Stage,
        trace: &mut TrainingTrace,
    ) -> Result<(f64, Option<TrainOutcome>)> {
        let n = classes.len();
        match cand {
            Candidate::None => Ok((evaluate(&self.head(classes)?, queries)?, None)),
            Candidate::Train(p) => {
                let policy = if val.is_some() {
                    self.cfg.train.checkpoint_policy
                } else {
                    CheckpointPolicy::FinalEpoch
                };
                let cfg = self.train_config(p, seed, policy);
                let seen = Mutex::new(BTreeSet::<usize>::new());
                let observer = |b: &BatchInfo<'_>| {
                    seen.lock().expect("observer lock").extend(b.indices.iter().copied());
                };
                let init = initial_parameters(&cfg, self.enc, classes)?;
                let out = train_from(init, support_ex, val, &cfg, self.enc, classes, Some(&observer))?;
                let seen: Vec<&Item> = seen.into_inner().expect("observer lock").into_iter().map(|i| &support[i]).collect();
                trace.note_training(stage, &seen);
                let acc = evaluate(&crate::classify::tuned_head(self.enc, &out.selected, classes)?, queries)?;
                Ok((acc, Some(out)))
            }
            Candidate::Lambda(l) => {
                trace.note_training(stage, &support.iter().collect::<Vec<_>>());
                Ok((evaluate(&linear_probe_fit(support_ex, n, *l)?, queries)?, None))
            }
            Candidate::TextWeight(w) => {
                trace.note_training(stage, &support.iter().collect::<Vec<_>>());
                let model = vl_prototype_build(&self.head(classes)?, &support_by_class(support_ex, n)?, *w)?;
                Ok((evaluate(&model, queries)?, None))
            }
        }
    }
}

fn to_examples(items: &[Item], classes: &[usize]) -> Vec<Example> {
    items
        .iter()
        .map(|it| Example::new(it.embedding.clone(), classes.binary_search(&it.label).expect("known class")))
        .collect()
}

pub fn run_protocol(
    split: &DatasetSplit,
    cfg: &ProtocolConfig,
    enc: &dyn FrozenDualEncoder,
    classes: &ClassSet,
) -> Result<ProtocolOutcome> {
    cfg.validate(split)?;
    let ctx = Ctx {
        cfg,
        split,
        enc,
        classes,
    };
    let (chosen_idx, selection, mut trace) = match split.paradigm() {
        Paradigm::Traditional => select_traditional(&ctx)?,
        Paradigm::MetaLearning => select_meta(&ctx)?,
    };
    let cands = ctx.candidates();
    let chosen = cands[chosen_idx];

    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut t = TrainingTrace::default();
            let (accuracy, run) = evaluate_seed(&ctx, &chosen, seed, &mut t)?;
            Ok((SeedResult { seed, accuracy }, run, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::with_capacity(per_seed.len());
    let mut runs = BTreeMap::new();
    for (r, run, t) in per_seed {
        trace.merge(t);
        if let Some(run) = run {
            runs.insert(r.seed, run);
        }
        results.push(r);
    }
    let (per_seed, mean, std) = aggregate(&results)?;

    let mut hp = ChosenHyperparameters::default();
    match chosen {
        Candidate::None => {}
        Candidate::Train(p) => {
            hp.learning_rate = Some(p.learning_rate);
            hp.alpha = Some(p.alpha);
            hp.l_context = Some(p.l_context);
        }
        Candidate::Lambda(l) => hp.lambda = Some(l),
        Candidate::TextWeight(w) => hp.text_weight = Some(w),
    }
    let tuning = matches!(cfg.method, ProtocolMethod::Tune(_));
    let record = RunRecord {
        schema_version: RUN_RECORD_SCHEMA_VERSION,
        encoder_digest: enc.weight_digest(),
        config: cfg.clone(),
        seeds: per_seed.iter().map(|r| r.seed).collect(),
        per_seed,
        mean,
        std,
        chosen: hp,
        ablation: AblationFlags {
            random_names: tuning && cfg.train.ablation_random_names,
            effective_alpha: match chosen {
                Candidate::Train(_) if cfg.train.ablation_random_names => Some(0.0),
                Candidate::Train(p) => Some(p.alpha),
                _ => None,
            },
            prompt_templates: cfg.prompt_templates.clone(),
        },
        selection: selection
            .into_iter()
            .zip(&cands)
            .map(|(score, c)| SelectionScore {
                label: c.label(),
                score,
            })
            .collect(),
        source: None,
    };
    Ok(ProtocolOutcome { record, trace, runs })
}

fn traditional_sets(split: &DatasetSplit) -> (&[Item], &[Item], &[Item]) {
    match split {
        DatasetSplit::Traditional { train, val, test } => (train, val, test),
        DatasetSplit::MetaLearning { .. } => unreachable!("checked by validate"),
    }
}

/// Support for one seed in the traditional paradigm: `k` items per class,
/// or the whole training split.
fn traditional_support(ctx: &Ctx<'_>, rng: &mut SeededRng) -> Result<Vec<Item>> {
    let (train, _, _) = traditional_sets(ctx.split);
    let all = ctx.split.phase_classes(Phase::MetaTrain);
    match ctx.cfg.k_shot {
        None => Ok(train.to_vec()),
        Some(k) => Ok(sample_episode(ctx.split, Phase::MetaTrain, all.len(), k, None, rng)?.support),
    }
}

type Selection = (usize, Vec<f64>, TrainingTrace);

fn select_traditional(ctx: &Ctx<'_>) -> Result<Selection> {
    let (_, val, _) = traditional_sets(ctx.split);
    let all = ctx.split.phase_classes(Phase::MetaTrain);
    if all.len() != ctx.classes.len() {
        return Err(Error::config(format!(
            "split covers {} classes, class set has {}",
            all.len(),
            ctx.classes.len()
        )));
    }
    let cands = ctx.candidates();
    if cands.len() == 1 {
        return Ok((0, Vec::new(), TrainingTrace::default()));
    }
    let mut rng = SeededRng::new(ctx.cfg.selection_seed).fork("selection-support");
    let support = traditional_support(ctx, &mut rng)?;
    let support_ex = to_examples(&support, &all);
    let val_ex = to_examples(val, &all);
    let mut trace = TrainingTrace::default();
    trace.note_training(Stage::Selection, &support.iter().collect::<Vec<_>>());
    let scores = match ctx.cfg.method {
        ProtocolMethod::Tune(_) => {
            let base = TrainConfig {
                seed: ctx.cfg.selection_seed,
                ..ctx.cfg.train.clone()
            };
            grid_search(&ctx.cfg.grid, &base, &support_ex, &val_ex, None, ctx.enc, ctx.classes)?
                .scores
                .into_iter()
                .map(|s| s.val_accuracy)
                .collect()
        }
        _ => cands
            .par_iter()
            .map(|c| {
                let mut t = TrainingTrace::default();
                ctx.fit_and_score(c, ctx.classes, &support, &support_ex, None, &val_ex, 0, Stage::Selection, &mut t)
                    .map(|r| r.0)
            })
            .collect::<Result<Vec<f64>>>()?,
    };
    Ok((pick_best(&scores)?, scores, trace))
}

fn select_meta(ctx: &Ctx<'_>) -> Result<Selection> {
    let cands = ctx.candidates();
    if cands.len() == 1 {
        return Ok((0, Vec::new(), TrainingTrace::default()));
    }
    let k = ctx.cfg.k_shot.expect("validated");
    let base = SeededRng::new(ctx.cfg.selection_seed);
    // the same episodes score every candidate
    let episodes = (0..ctx.cfg.validation_episodes)
        .map(|e| {
            let mut rng = base.fork(&format!("meta-val-episode-{e}"));
            sample_episode(ctx.split, Phase::MetaVal, ctx.cfg.n_way, k, Some(ctx.cfg.queries_per_class), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let scored = cands
        .par_iter()
        .map(|c| {
            let mut trace = TrainingTrace::default();
            let mut total = 0.0;
            for (e, ep) in episodes.iter().enumerate() {
                let local = ep.class_set(ctx.classes)?;
                let seed = derive_seed(ctx.cfg.selection_seed, &format!("meta-val-train-{e}"));
                trace.note_queries(Stage::Selection, &ep.query);
                total += ctx.fit_and_score(
                    c,
                    &local,
                    &ep.support,
                    &ep.support_examples(),
                    None,
                    &ep.query_examples(),
                    seed,
                    Stage::Selection,
                    &mut trace,
                )?
                .0;
            }
            Ok((total / episodes.len() as f64, trace))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trace = TrainingTrace::default();
    let mut scores = Vec::with_capacity(scored.len());
    for (s, t) in scored {
        scores.push(s);
        trace.merge(t);
    }
    Ok((pick_best(&scores)?, scores, trace))
}

fn evaluate_seed(
    ctx: &Ctx<'_>,
    chosen: &Candidate,
    seed: u64,
    trace: &mut TrainingTrace,
) -> Result<(f64, Option<TrainOutcome>)> {
    let mut rng = SeededRng::new(seed).fork("episode");
    match ctx.split.paradigm() {
        Paradigm::Traditional => {
            let (_, val, test) = traditional_sets(ctx.split);
            let all = ctx.split.phase_classes(Phase::MetaTrain);
            let test_ex = to_examples(test, &all);
            trace.note_queries(Stage::Evaluation, test);
            if let Candidate::None = chosen {
                return Ok((evaluate(&ctx.head(ctx.classes)?, &test_ex)?, None));
            }
            let support = traditional_support(ctx, &mut rng)?;
            let support_ex = to_examples(&support, &all);
            let val_ex = to_examples(val, &all);
            let val = matches!(chosen, Candidate::Train(_)).then_some(val_ex.as_slice());
            ctx.fit_and_score(chosen, ctx.classes, &support, &support_ex, val, &test_ex, seed, Stage::Evaluation, trace)
        }
        Paradigm::MetaLearning => {
            let k = ctx.cfg.k_shot.expect("validated");
            let ep = sample_episode(ctx.split, Phase::MetaTest, ctx.cfg.n_way, k, Some(ctx.cfg.queries_per_class), &mut rng)?;
            let local = ep.class_set(ctx.classes)?;
            trace.note_queries(Stage::Evaluation, &ep.query);
            ctx.fit_and_score(
                chosen,
                &local,
                &ep.support,
                &ep.support_examples(),
                None,
                &ep.query_examples(),
                seed,
                Stage::Evaluation,
                trace,
            )
        }
    }
}
