//! Run configuration: a TOML file whose every key is optional. After
//! resolution every default is filled in, so the echoed file reproduces the run.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tct_core::bench::{Congruency, ScaleProfile, SceneSpec, Variant};
use tct_core::context::{load_prior, ContextPrior};
use tct_core::encoder::{
    load_weights, EncoderConfig, EncoderWeights, NormKind, PixelSimilarityParams, WeightProfile,
};
use tct_core::search::{SearchParams, Upsampling};
use tct_core::tcab::ModulationConfig;
use tct_core::{Result, TctError};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderSection,
    pub modulation: ModulationSection,
    pub search: SearchSection,
    pub prior: PriorSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    /// `pixel-similarity`, `seeded-random` or `file`.
    pub profile: String,
    /// Weight file, required by the `file` profile.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    pub channels: usize,
    pub patch_size: usize,
    pub layers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_dim: Option<usize>,
    pub use_position_embeddings: bool,
    /// `layernorm` or `identity`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm: Option<String>,
    pub norm_eps: f64,
    pub key_gain: f64,
    pub value_gain: f64,
    pub center: f64,
    pub bias_channel: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let p = PixelSimilarityParams::default();
        EncoderSection {
            profile: "pixel-similarity".into(),
            weights: None,
            channels: p.channels,
            patch_size: p.patch_size,
            layers: p.layers,
            hidden_dim: None,
            heads: None,
            mlp_dim: None,
            use_position_embeddings: false,
            norm: None,
            norm_eps: 1e-6,
            key_gain: p.key_gain,
            value_gain: p.value_gain,
            center: p.center,
            bias_channel: p.bias_channel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulationSection {
    /// Layer set such as `"6-12"` or `"1,3,5-7"`; empty for none.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_layers: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_layers: Option<String>,
    pub g_max: f64,
}

impl Default for ModulationSection {
    fn default() -> Self {
        ModulationSection {
            target_layers: None,
            context_layers: None,
            g_max: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    /// `desk`, `coco18-like` or `natclutter-like`.
    pub profile: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ior_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ior_height: Option<usize>,
    /// Defaults to `4 · ⌈W/ior_w⌉ · ⌈H/ior_h⌉` for each image.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_fixations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_resolution: Option<usize>,
    pub upsampling: Upsampling,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            profile: ScaleProfile::Desk.name().into(),
            ior_width: None,
            ior_height: None,
            max_fixations: None,
            target_resolution: None,
            upsampling: Upsampling::Bilinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    /// `uniform`, `gaussian` or `file`.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            kind: "uniform".into(),
            mu: None,
            sigma: None,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub trials: usize,
    pub congruency: String,
    pub clutter_density: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_scale_ratio: Option<f64>,
    pub prior_sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<String>>,
    pub random_repeats: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl Default for BenchSection {
    fn default() -> Self {
        let spec = SceneSpec::for_profile(ScaleProfile::Desk);
        BenchSection {
            trials: 20,
            congruency: Congruency::Congruent.name().into(),
            clutter_density: spec.clutter_density,
            target_scale_ratio: None,
            prior_sigma: spec.prior_sigma,
            variants: None,
            random_repeats: 100,
            n_max: None,
            manifest: None,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn parse_config(text: &str, source: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(1, |s| line_of(text, s.start));
        TctError::parse(source, line, e.message().to_string())
    })
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                TctError::input(format!("cannot read config {}: {e}", p.display()))
            })?;
            parse_config(&text, &p.display().to_string())
        }
    }
}

/// Parses `"6-12"`, `"3"`, `"1,3,5-7"` or `""`.
pub fn parse_layer_set(s: &str) -> Option<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        match item.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
                if a > b {
                    return None;
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(item.parse().ok()?);
            }
        }
    }
    Some(out)
}

pub fn format_layer_set(set: &BTreeSet<usize>) -> String {
    let mut parts = Vec::new();
    let mut iter = set.iter().copied().peekable();
    while let Some(start) = iter.next() {
        let mut end = start;
        while iter.peek() == Some(&(end + 1)) {
            end = iter.next().expect("peeked");
        }
        parts.push(if start == end {
            start.to_string()
        } else {
            format!("{start}-{end}")
        });
    }
    parts.join(",")
}

/// Everything a run needs, with defaults applied.
pub struct Resolved {
    pub config: RunConfig,
    pub weights: EncoderWeights,
    pub modulation: ModulationConfig,
    pub profile: ScaleProfile,
    pub target_resolution: usize,
}

impl Resolved {
    pub fn search_params(&self, width: usize, height: usize) -> SearchParams {
        let s = &self.config.search;
        let (iw, ih) = (
            s.ior_width.expect("resolved"),
            s.ior_height.expect("resolved"),
        );
        let mut p = SearchParams::for_image(width, height, iw, ih);
        if let Some(m) = s.max_fixations {
            p.max_fixations = m;
        }
        p
    }

    pub fn variants(&self) -> Vec<Variant> {
        self.config
            .bench
            .variants
            .as_ref()
            .expect("resolved")
            .iter()
            .map(|v| Variant::parse(v).expect("validated"))
            .collect()
    }

    pub fn congruency(&self) -> Congruency {
        Congruency::parse(&self.config.bench.congruency).expect("validated")
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let b = &self.config.bench;
        SceneSpec {
            profile: self.profile,
            clutter_density: b.clutter_density,
            target_scale_ratio: b.target_scale_ratio.expect("resolved"),
            prior_sigma: b.prior_sigma,
        }
    }

    pub fn prior(&self) -> Result<ContextPrior> {
        let p = &self.config.prior;
        match p.kind.as_str() {
            "uniform" => Ok(ContextPrior::Uniform),
            "gaussian" => match (p.mu, p.sigma) {
                (Some([x, y]), Some(sigma)) => Ok(ContextPrior::SpatialGaussian { mu: (x, y), sigma }),
                _ => Err(TctError::input("gaussian prior needs `mu = [x, y]` and `sigma`")),
            },
            "file" => match &p.path {
                Some(path) => load_prior(path),
                None => Err(TctError::input("file prior needs `path`")),
            },
            other => Err(TctError::input(format!(
                "unknown prior kind `{other}` (expected uniform, gaussian or file)"
            ))),
        }
    }
}

fn parse_norm(s: &str, eps: f64) -> Result<NormKind> {
    match s {
        "layernorm" => Ok(NormKind::LayerNorm { eps }),
        "identity" => Ok(NormKind::Identity),
        other => Err(TctError::input(format!(
            "unknown norm `{other}` (expected layernorm or identity)"
        ))),
    }
}

fn norm_name(n: NormKind) -> &'static str {
    match n {
        NormKind::LayerNorm { .. } => "layernorm",
        NormKind::Identity => "identity",
    }
}

fn build_weights(e: &EncoderSection, position_grid: (usize, usize), seed: u64) -> Result<EncoderWeights> {
    match e.profile.as_str() {
        "pixel-similarity" => EncoderWeights::pixel_similarity(&PixelSimilarityParams {
            channels: e.channels,
            patch_size: e.patch_size,
            layers: e.layers,
            hidden_dim: e.hidden_dim,
            key_gain: e.key_gain,
            value_gain: e.value_gain,
            center: e.center,
            bias_channel: e.bias_channel,
        }),
        "seeded-random" => {
            let config = EncoderConfig {
                channels: e.channels,
                patch_size: e.patch_size,
                hidden_dim: e.hidden_dim.unwrap_or(64),
                heads: e.heads.unwrap_or(4),
                layers: e.layers,
                mlp_dim: e.mlp_dim.unwrap_or(128),
                use_position_embeddings: e.use_position_embeddings,
                profile: WeightProfile::SeededRandom,
                norm: parse_norm(e.norm.as_deref().unwrap_or("layernorm"), e.norm_eps)?,
            };
            let grid = e.use_position_embeddings.then_some(position_grid);
            EncoderWeights::seeded_random(&config, seed, grid)
        }
        "file" => {
            let path = e
                .weights
                .as_ref()
                .ok_or_else(|| TctError::input("encoder profile `file` needs `weights = <path>`"))?;
            load_weights(path)
        }
        other => Err(TctError::input(format!(
            "unknown encoder profile `{other}` (expected pixel-similarity, seeded-random or file)"
        ))),
    }
}

/// Validates the config, builds the weights and fills every default in.
/// `image` is the search image size `(width, height)` when known, which sizes
/// the position table of seeded-random weights.
pub fn resolve(mut config: RunConfig, image: Option<(usize, usize)>) -> Result<Resolved> {
    let profile = ScaleProfile::parse(&config.search.profile).ok_or_else(|| {
        TctError::input(format!(
            "unknown scale profile `{}` (expected desk, coco18-like or natclutter-like)",
            config.search.profile
        ))
    })?;
    let (w, h) = image.unwrap_or(profile.image_size());
    let e = &config.encoder;
    if e.patch_size == 0 {
        return Err(TctError::input("encoder patch_size must be positive"));
    }
    let weights = build_weights(e, (h / e.patch_size, w / e.patch_size), config.seed)?;
    let c = weights.config().clone();
    let e = &mut config.encoder;
    e.channels = c.channels;
    e.patch_size = c.patch_size;
    e.layers = c.layers;
    e.hidden_dim = Some(c.hidden_dim);
    e.heads = Some(c.heads);
    e.mlp_dim = Some(c.mlp_dim);
    e.use_position_embeddings = c.use_position_embeddings;
    e.norm = Some(norm_name(c.norm).into());
    if let NormKind::LayerNorm { eps } = c.norm {
        e.norm_eps = eps;
    }

    let defaults = ModulationConfig::default_for(c.layers);
    let layer_set = |field: &Option<String>, default: &BTreeSet<usize>, what: &str| {
        match field {
            None => Ok(default.clone()),
            Some(s) => parse_layer_set(s).ok_or_else(|| {
                TctError::input(format!("{what} `{s}` is not a layer set like `6-12` or `1,3`"))
            }),
        }
    };
    let modulation = ModulationConfig {
        target_layers: layer_set(&config.modulation.target_layers, &defaults.target_layers, "target_layers")?,
        context_layers: layer_set(&config.modulation.context_layers, &defaults.context_layers, "context_layers")?,
    };
    modulation.validate(c.layers)?;
    config.modulation.target_layers = Some(format_layer_set(&modulation.target_layers));
    config.modulation.context_layers = Some(format_layer_set(&modulation.context_layers));
    if !(config.modulation.g_max >= 0.0 && config.modulation.g_max.is_finite()) {
        return Err(TctError::input("g_max must be finite and non-negative"));
    }

    let s = &mut config.search;
    s.profile = profile.name().into();
    s.ior_width.get_or_insert(profile.ior());
    s.ior_height.get_or_insert(profile.ior());
    let target_resolution = *s.target_resolution.get_or_insert(4 * c.patch_size);
    if target_resolution == 0 || !target_resolution.is_multiple_of(c.patch_size) {
        return Err(TctError::input(format!(
            "target_resolution {target_resolution} must be a positive multiple of patch_size {}",
            c.patch_size
        )));
    }
    if s.ior_width == Some(0) || s.ior_height == Some(0) || s.max_fixations == Some(0) {
        return Err(TctError::input("IOR window and max_fixations must be positive"));
    }

    let b = &mut config.bench;
    b.target_scale_ratio.get_or_insert(profile.default_target_ratio());
    if Congruency::parse(&b.congruency).is_none() {
        return Err(TctError::input(format!(
            "unknown congruency `{}` (expected congruent, incongruent or n/a)",
            b.congruency
        )));
    }
    let variants = b
        .variants
        .get_or_insert_with(|| Variant::STANDARD.iter().map(|v| v.to_string()).collect());
    if variants.is_empty() {
        return Err(TctError::input("bench.variants must not be empty"));
    }
    for v in variants.iter() {
        let parsed = Variant::parse(v).ok_or_else(|| TctError::input(format!("unknown variant `{v}`")))?;
        parsed.configs(c.layers, &modulation)?;
    }
    if b.random_repeats == 0 || b.n_max == Some(0) {
        return Err(TctError::input("random_repeats and n_max must be positive"));
    }

    let resolved = Resolved {
        config,
        weights,
        modulation,
        profile,
        target_resolution,
    };
    resolved.scene_spec().validate()?;
    resolved.prior()?;
    Ok(resolved)
}

pub fn format_config(config: &RunConfig) -> String {
    toml::to_string(config).expect("run config serializes")
}
