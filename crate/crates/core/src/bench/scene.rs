use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::ContextPrior;
use crate::error::{Result, TctError};
use crate::image::ImageTensor;
use crate::rng::{self, Domain};
use crate::search::{Rect, SearchParams};

/// Image size and IOR window of a benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleProfile {
    /// 128×80 with a 12×12 window.
    Desk,
    /// 512×320 with a 48×48 window.
    Coco18Like,
    /// 1280×1024 with a 200×200 window.
    NatclutterLike,
}

impl ScaleProfile {
    pub const ALL: [ScaleProfile; 3] = [
        ScaleProfile::Desk,
        ScaleProfile::Coco18Like,
        ScaleProfile::NatclutterLike,
    ];

    /// `(width, height)`.
    pub fn image_size(self) -> (usize, usize) {
        match self {
            ScaleProfile::Desk => (128, 80),
            ScaleProfile::Coco18Like => (512, 320),
            ScaleProfile::NatclutterLike => (1280, 1024),
        }
    }

    pub fn ior(self) -> usize {
        match self {
            ScaleProfile::Desk => 12,
            ScaleProfile::Coco18Like => 48,
            ScaleProfile::NatclutterLike => 200,
        }
    }

    pub fn default_target_ratio(self) -> f64 {
        match self {
            ScaleProfile::NatclutterLike => 0.01,
            _ => 0.04,
        }
    }

    pub fn search_params(self) -> SearchParams {
        let (w, h) = self.image_size();
        SearchParams::for_image(w, h, self.ior(), self.ior())
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleProfile::Desk => "desk",
            ScaleProfile::Coco18Like => "coco18-like",
            ScaleProfile::NatclutterLike => "natclutter-like",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ScaleProfile::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Congruency {
    #[serde(rename = "congruent")]
    Congruent,
    #[serde(rename = "incongruent")]
    Incongruent,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Congruency {
    pub fn name(self) -> &'static str {
        match self {
            Congruency::Congruent => "congruent",
            Congruency::Incongruent => "incongruent",
            Congruency::NotApplicable => "n/a",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "congruent" => Some(Congruency::Congruent),
            "incongruent" => Some(Congruency::Incongruent),
            "n/a" => Some(Congruency::NotApplicable),
            _ => None,
        }
    }
}

/// One search problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub id: String,
    pub search: ImageTensor,
    pub target: ImageTensor,
    pub target_box: Rect,
    pub congruency: Congruency,
    pub profile: ScaleProfile,
    pub prior: ContextPrior,
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub profile: ScaleProfile,
    /// Fraction of the image covered by distractor sprites.
    pub clutter_density: f64,
    /// Target box area as a fraction of the image area.
    pub target_scale_ratio: f64,
    /// Spread of the gaussian context prior, in normalized image units.
    pub prior_sigma: f64,
}

impl SceneSpec {
    pub fn for_profile(profile: ScaleProfile) -> Self {
        SceneSpec {
            profile,
            clutter_density: 0.35,
            target_scale_ratio: profile.default_target_ratio(),
            prior_sigma: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_scale_ratio > 0.0 && self.target_scale_ratio < 1.0) {
            return Err(TctError::input(format!(
                "target_scale_ratio must lie in (0, 1), got {}",
                self.target_scale_ratio
            )));
        }
        if !(self.clutter_density >= 0.0 && self.clutter_density.is_finite()) {
            return Err(TctError::input(format!(
                "clutter_density must be finite and non-negative, got {}",
                self.clutter_density
            )));
        }
        if !(self.prior_sigma > 0.0 && self.prior_sigma.is_finite()) {
            return Err(TctError::input(format!(
                "prior_sigma must be positive, got {}",
                self.prior_sigma
            )));
        }
        Ok(())
    }
}

const CHANNELS: usize = 3;
const PLACEMENT_RETRIES: usize = 200;

/// A textured rectangle or ellipse with two colors.
struct Sprite {
    w: usize,
    h: usize,
    pixels: Vec<[f64; CHANNELS]>,
    mask: Vec<bool>,
}

impl Sprite {
    fn random(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Sprite {
        let base: [f64; CHANNELS] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
        let alt: [f64; CHANNELS] =
            std::array::from_fn(|c| (base[c] + rng.gen_range(-0.3..0.3)).clamp(0.0, 1.0));
        let ellipse = rng.gen_bool(0.5);
        let texture = rng.gen_range(0..3u8);
        let mut pixels = Vec::with_capacity(w * h);
        let mut mask = Vec::with_capacity(w * h);
        let (hw, hh) = (w as f64 / 2.0, h as f64 / 2.0);
        for y in 0..h {
            for x in 0..w {
                let second = match texture {
                    0 => false,
                    1 => (x / 3) % 2 == 1,
                    _ => (x / 3 + y / 3) % 2 == 1,
                };
                pixels.push(if second { alt } else { base });
                let (dx, dy) = ((x as f64 + 0.5 - hw) / hw, (y as f64 + 0.5 - hh) / hh);
                mask.push(!ellipse || dx * dx + dy * dy <= 1.0);
            }
        }
        Sprite { w, h, pixels, mask }
    }

    fn paint(&self, img: &mut ImageTensor, x0: usize, y0: usize) {
        for y in 0..self.h {
            for x in 0..self.w {
                let i = y * self.w + x;
                if self.mask[i] {
                    for c in 0..CHANNELS {
                        img.set(c, y0 + y, x0 + x, self.pixels[i][c]);
                    }
                }
            }
        }
    }
}

fn noisy_background(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageTensor {
    let data = (0..CHANNELS * w * h)
        .map(|_| 0.5 + rng.gen_range(-0.06..0.06))
        .collect();
    ImageTensor::from_vec(CHANNELS, h, w, data).expect("finite background")
}

fn place(rng: &mut ChaCha8Rng, boxes: &[Rect], w: usize, h: usize, width: usize, height: usize) -> Option<Rect> {
    if w > width || h > height {
        return None;
    }
    for _ in 0..PLACEMENT_RETRIES {
        let r = Rect::new(rng.gen_range(0..=width - w), rng.gen_range(0..=height - h), w, h);
        if boxes.iter().all(|b| !b.intersects(&r)) {
            return Some(r);
        }
    }
    None
}

/// Context priors for a target box: one centered inside the box and one whose
/// center sits more than 0.35 normalized units away along some axis.
pub fn scene_priors(seed: u64, index: u64, target_box: &Rect, image: (usize, usize), sigma: f64) -> (ContextPrior, ContextPrior) {
    let (w, h) = (image.0 as f64, image.1 as f64);
    let mut rng = rng::stream(seed, Domain::Prior, index);
    let congruent = (
        (target_box.x as f64 + rng.gen_range(0.0..target_box.w as f64)) / w,
        (target_box.y as f64 + rng.gen_range(0.0..target_box.h as f64)) / h,
    );
    let cx = (target_box.x as f64 + target_box.w as f64 / 2.0) / w;
    let cy = (target_box.y as f64 + target_box.h as f64 / 2.0) / h;
    let incongruent = loop {
        let (mx, my) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        if (mx - cx).abs() > 0.35 || (my - cy).abs() > 0.35 {
            break (mx, my);
        }
    };
    (
        ContextPrior::SpatialGaussian { mu: congruent, sigma },
        ContextPrior::SpatialGaussian {
            mu: incongruent,
            sigma,
        },
    )
}

fn pick_prior(congruency: Congruency, priors: (ContextPrior, ContextPrior)) -> ContextPrior {
    match congruency {
        Congruency::Congruent => priors.0,
        Congruency::Incongruent => priors.1,
        Congruency::NotApplicable => ContextPrior::Uniform,
    }
}

/// Textured background, one target sprite and non-overlapping distractors
/// until the clutter density is reached or no free spot is found. The scene
/// pixels depend only on `(seed, index)`, so congruent and incongruent trials
/// with the same index share the scene and differ only in their prior.
pub fn synthesize_scene(
    seed: u64,
    index: u64,
    spec: &SceneSpec,
    congruency: Congruency,
) -> Result<Trial> {
    spec.validate()?;
    let (width, height) = spec.profile.image_size();
    let mut rng = rng::stream(seed, Domain::Scene, index);
    let mut img = noisy_background(&mut rng, width, height);
    let side = ((spec.target_scale_ratio * (width * height) as f64).sqrt().round() as usize).max(1);
    let mut boxes = Vec::new();
    let target_box = place(&mut rng, &boxes, side, side, width, height).ok_or_else(|| {
        TctError::input(format!(
            "cannot place a {side}x{side} target in a {width}x{height} image"
        ))
    })?;
    boxes.push(target_box);
    let sprite = Sprite::random(&mut rng, side, side);
    sprite.paint(&mut img, target_box.x, target_box.y);
    let mut target = ImageTensor::filled(CHANNELS, side, side, 0.5);
    sprite.paint(&mut target, 0, 0);

    let goal = spec.clutter_density * (width * height) as f64;
    let mut covered = 0.0;
    while covered < goal {
        let w = ((side as f64 * rng.gen_range(0.7..1.3)) as usize).max(1);
        let h = ((side as f64 * rng.gen_range(0.7..1.3)) as usize).max(1);
        let Some(r) = place(&mut rng, &boxes, w, h, width, height) else {
            break;
        };
        boxes.push(r);
        Sprite::random(&mut rng, w, h).paint(&mut img, r.x, r.y);
        covered += r.area() as f64;
    }
    img.quantize_8bit();
    target.quantize_8bit();
    let priors = scene_priors(seed, index, &target_box, (width, height), spec.prior_sigma);
    Ok(Trial {
        id: format!("scene-{index}"),
        search: img,
        target,
        target_box,
        congruency,
        profile: spec.profile,
        prior: pick_prior(congruency, priors),
    })
}

/// A scene made of `patch × patch` tiles, each a distinct textured sprite on
/// noise, with the target tile copied into one patch-aligned cell.
pub fn synthesize_tiled_scene(
    seed: u64,
    index: u64,
    profile: ScaleProfile,
    patch: usize,
) -> Result<Trial> {
    let (width, height) = profile.image_size();
    if patch == 0 || width % patch != 0 || height % patch != 0 {
        return Err(TctError::input(format!(
            "{width}x{height} cannot be tiled by {patch}x{patch} patches"
        )));
    }
    let (gw, gh) = (width / patch, height / patch);
    let mut rng = rng::stream(seed, Domain::Scene, index);
    let tile = |rng: &mut ChaCha8Rng| {
        let mut t = noisy_background(rng, patch, patch);
        Sprite::random(rng, patch, patch).paint(&mut t, 0, 0);
        t.quantize_8bit();
        t
    };
    let target = tile(&mut rng);
    let cell = rng.gen_range(0..gw * gh);
    let mut img = ImageTensor::filled(CHANNELS, height, width, 0.0);
    for j in 0..gw * gh {
        let t = if j == cell { target.clone() } else { tile(&mut rng) };
        let (x0, y0) = ((j % gw) * patch, (j / gw) * patch);
        for c in 0..CHANNELS {
            for y in 0..patch {
                for x in 0..patch {
                    img.set(c, y0 + y, x0 + x, t.get(c, y, x));
                }
            }
        }
    }
    Ok(Trial {
        id: format!("tiled-{index}"),
        search: img,
        target,
        target_box: Rect::new((cell % gw) * patch, (cell / gw) * patch, patch, patch),
        congruency: Congruency::NotApplicable,
        profile,
        prior: ContextPrior::Uniform,
    })
}
