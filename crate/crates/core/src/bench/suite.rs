use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, random_baseline_scanpaths, MetricsReport};
use super::scene::{synthesize_scene, Congruency, SceneSpec, Trial};
use crate::context::context_gain;
use crate::error::{Result, TctError};
use crate::exec::Execution;
use crate::search::{ScanpathResult, SearchEngine, SearchParams};
use crate::tcab::ModulationConfig;

/// Thirds of the encoder depth. For 12 layers: `[1,4]`, `[5,8]`, `[9,12]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerGroup {
    Early,
    Middle,
    Late,
}

impl LayerGroup {
    pub fn layers(self, total: usize) -> Result<Vec<usize>> {
        let a = total.div_ceil(3);
        let b = (2 * total).div_ceil(3);
        let range: Vec<usize> = match self {
            LayerGroup::Early => (1..=a).collect(),
            LayerGroup::Middle => (a + 1..=b).collect(),
            LayerGroup::Late => (b + 1..=total).collect(),
        };
        if range.is_empty() {
            return Err(TctError::input(format!(
                "layer group `{}` is empty for a {total}-layer encoder",
                self.name()
            )));
        }
        Ok(range)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerGroup::Early => "early",
            LayerGroup::Middle => "middle",
            LayerGroup::Late => "late",
        }
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Tct,
    TargetAlone,
    ContextAlone,
    Vit,
    Random,
    /// Target modulation from each start layer of the group to the last layer,
    /// scanpaths of all starts pooled.
    TargetFrom(LayerGroup),
    /// Context modulation at each single layer of the group, pooled.
    ContextAt(LayerGroup),
}

impl Variant {
    pub const STANDARD: [Variant; 5] = [
        Variant::Tct,
        Variant::TargetAlone,
        Variant::ContextAlone,
        Variant::Vit,
        Variant::Random,
    ];

    pub fn groups() -> Vec<Variant> {
        let g = [LayerGroup::Early, LayerGroup::Middle, LayerGroup::Late];
        g.iter()
            .map(|&g| Variant::TargetFrom(g))
            .chain(g.iter().map(|&g| Variant::ContextAt(g)))
            .collect()
    }

    pub fn parse(s: &str) -> Option<Variant> {
        let group = |g: &str| match g {
            "early" => Some(LayerGroup::Early),
            "middle" => Some(LayerGroup::Middle),
            "late" => Some(LayerGroup::Late),
            _ => None,
        };
        match s {
            "tct" => Some(Variant::Tct),
            "target-alone" => Some(Variant::TargetAlone),
            "context-alone" => Some(Variant::ContextAlone),
            "vit" => Some(Variant::Vit),
            "random" => Some(Variant::Random),
            _ => {
                if let Some(g) = s.strip_prefix("target-from-") {
                    group(g).map(Variant::TargetFrom)
                } else if let Some(g) = s.strip_prefix("context-at-") {
                    group(g).map(Variant::ContextAt)
                } else {
                    None
                }
            }
        }
    }

    /// Modulation settings whose scanpaths make up this variant. Empty for
    /// the random baseline.
    pub fn configs(self, layers: usize, base: &ModulationConfig) -> Result<Vec<ModulationConfig>> {
        Ok(match self {
            Variant::Tct => vec![base.clone()],
            Variant::TargetAlone => vec![base.target_only()],
            Variant::ContextAlone => vec![base.context_only()],
            Variant::Vit => vec![ModulationConfig::none()],
            Variant::Random => Vec::new(),
            Variant::TargetFrom(g) => g
                .layers(layers)?
                .into_iter()
                .map(|s| ModulationConfig {
                    target_layers: (s..=layers).collect(),
                    context_layers: Default::default(),
                })
                .collect(),
            Variant::ContextAt(g) => g
                .layers(layers)?
                .into_iter()
                .map(|s| ModulationConfig {
                    target_layers: Default::default(),
                    context_layers: [s].into(),
                })
                .collect(),
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Tct => f.write_str("tct"),
            Variant::TargetAlone => f.write_str("target-alone"),
            Variant::ContextAlone => f.write_str("context-alone"),
            Variant::Vit => f.write_str("vit"),
            Variant::Random => f.write_str("random"),
            Variant::TargetFrom(g) => write!(f, "target-from-{}", g.name()),
            Variant::ContextAt(g) => write!(f, "context-at-{}", g.name()),
        }
    }
}

/// Indexed access to trials, so large benchmarks never hold every image at once.
pub trait TrialSource: Sync {
    fn len(&self) -> usize;

    fn trial(&self, index: usize) -> Result<Trial>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TrialSource for [Trial] {
    fn len(&self) -> usize {
        <[Trial]>::len(self)
    }

    fn trial(&self, index: usize) -> Result<Trial> {
        Ok(self[index].clone())
    }
}

impl TrialSource for Vec<Trial> {
    fn len(&self) -> usize {
        <[Trial]>::len(self)
    }

    fn trial(&self, index: usize) -> Result<Trial> {
        Ok(self[index].clone())
    }
}

/// Scenes `0..count` of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrials {
    pub seed: u64,
    pub spec: SceneSpec,
    pub count: usize,
    pub congruency: Congruency,
}

impl TrialSource for SyntheticTrials {
    fn len(&self) -> usize {
        self.count
    }

    fn trial(&self, index: usize) -> Result<Trial> {
        synthesize_scene(self.seed, index as u64, &self.spec, self.congruency)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub variants: Vec<Variant>,
    /// The full TCT layer placement; other variants derive from it.
    pub modulation: ModulationConfig,
    pub g_max: f64,
    /// Curve length; defaults to the largest fixation budget among the trials.
    pub n_max: Option<usize>,
    /// Overrides the per-trial default budget.
    pub max_fixations: Option<usize>,
    pub random_repeats: usize,
    pub seed: u64,
}

/// One scanpath, as written to the scanpath file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanpathRecord {
    pub variant: String,
    pub trial: String,
    /// Start layer index for pooled variants, repeat index for the random baseline.
    pub run: usize,
    pub found: bool,
    pub n_fixations: usize,
    pub fixations: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub records: Vec<ScanpathRecord>,
    pub reports: Vec<(String, MetricsReport)>,
}

impl SuiteReport {
    pub fn report(&self, variant: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|(v, _)| v == variant).map(|(_, r)| r)
    }
}

struct TrialResults {
    id: String,
    budget: usize,
    /// Per variant, the scanpaths of each run.
    runs: Vec<Vec<ScanpathResult>>,
}

fn search_params(trial: &Trial, suite: &SuiteConfig) -> SearchParams {
    let ior = trial.profile.ior();
    let mut p = SearchParams::for_image(trial.search.width(), trial.search.height(), ior, ior);
    if let Some(m) = suite.max_fixations {
        p.max_fixations = m;
    }
    p
}

fn run_one(
    index: usize,
    source: &dyn TrialSource,
    engine: &SearchEngine<'_>,
    suite: &SuiteConfig,
    configs: &[Vec<ModulationConfig>],
) -> Result<TrialResults> {
    let trial = source.trial(index)?;
    let params = search_params(&trial, suite);
    let prepared = engine.prepare(&trial.search, &trial.target, trial.target_box)?;
    let gains = context_gain(&trial.prior, prepared.grid, suite.g_max)?;
    let mut cache: HashMap<&ModulationConfig, ScanpathResult> = HashMap::new();
    let mut runs = Vec::with_capacity(suite.variants.len());
    for (variant, cfgs) in suite.variants.iter().zip(configs) {
        if *variant == Variant::Random {
            let (h, w) = prepared.image;
            runs.push(random_baseline_scanpaths(
                (h, w),
                &trial.target_box,
                &params,
                suite.random_repeats,
                suite.seed,
                index as u64,
                Execution::Sequential,
            )?);
            continue;
        }
        let mut variant_runs = Vec::with_capacity(cfgs.len());
        for cfg in cfgs {
            let result = match cache.get(cfg) {
                Some(r) => r.clone(),
                None => {
                    let r = engine.evaluate(&prepared, cfg, &gains, &params)?.scanpath;
                    cache.insert(cfg, r.clone());
                    r
                }
            };
            variant_runs.push(result);
        }
        runs.push(variant_runs);
    }
    let pixels = prepared.image.0 * prepared.image.1;
    let budget = params.max_fixations.min(pixels);
    if runs.iter().flatten().any(|r| r.n_fixations > budget) {
        return Err(TctError::Invariant(format!(
            "trial `{}` exceeded its budget of {budget} fixations",
            trial.id
        )));
    }
    Ok(TrialResults {
        id: trial.id,
        budget,
        runs,
    })
}

/// Runs every variant on every trial. Variants of one trial share the scene,
/// target features and context gains, so differences come from modulation only.
pub fn run_ablation_suite(
    source: &dyn TrialSource,
    engine: &SearchEngine<'_>,
    suite: &SuiteConfig,
    exec: Execution,
) -> Result<SuiteReport> {
    if source.is_empty() {
        return Err(TctError::input("ablation suite needs at least one trial"));
    }
    if suite.variants.is_empty() {
        return Err(TctError::input("ablation suite needs at least one variant"));
    }
    let layers = engine.weights.config().layers;
    suite.modulation.validate(layers)?;
    let configs = suite
        .variants
        .iter()
        .map(|v| v.configs(layers, &suite.modulation))
        .collect::<Result<Vec<_>>>()?;
    let indices: Vec<usize> = (0..source.len()).collect();
    let per_trial = exec.try_map(&indices, |_, &i| run_one(i, source, engine, suite, &configs))?;

    let n_max = match suite.n_max {
        Some(n) => n,
        None => per_trial.iter().map(|t| t.budget).max().unwrap_or(1),
    };
    let mut records = Vec::new();
    let mut reports = Vec::with_capacity(suite.variants.len());
    for (v, variant) in suite.variants.iter().enumerate() {
        let name = variant.to_string();
        let mut pooled = Vec::new();
        for t in &per_trial {
            for (run, r) in t.runs[v].iter().enumerate() {
                records.push(ScanpathRecord {
                    variant: name.clone(),
                    trial: t.id.clone(),
                    run,
                    found: r.found,
                    n_fixations: r.n_fixations,
                    fixations: r.fixations.iter().map(|&(x, y)| [x, y]).collect(),
                });
                pooled.push(r.clone());
            }
        }
        reports.push((name, compute_metrics(&pooled, n_max)?));
    }
    Ok(SuiteReport { records, reports })
}
