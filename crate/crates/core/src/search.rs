//! Fixation generation: iterative argmax over an attention map with
//! permanent inhibition of return.

use serde::{Deserialize, Serialize};

use crate::context::{context_gain, ContextPrior};
use crate::encoder::{patchify, EncoderWeights, ForwardOutput, ModulationPlan};
use crate::error::{Result, TctError};
use crate::image::{resample_bilinear, ImageTensor};
use crate::numerics::Matrix;
use crate::target::{extract_target_features, TargetFeatures};
use crate::tcab::ModulationConfig;

/// Axis-aligned pixel rectangle `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x..self.x + self.w).contains(&x) && (self.y..self.y + self.h).contains(&y)
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }

    /// The `w × h` window centered on `(cx, cy)`: starts at `c − ⌊w/2⌋`,
    /// clipped to the image.
    pub fn centered(cx: usize, cy: usize, w: usize, h: usize, width: usize, height: usize) -> Rect {
        let span = |c: usize, len: usize, limit: usize| {
            let start = c as isize - (len / 2) as isize;
            let end = (start + len as isize).min(limit as isize);
            let start = start.max(0);
            (start as usize, (end - start).max(0) as usize)
        };
        let (x, w) = span(cx, w, width);
        let (y, h) = span(cy, h, height);
        Rect { x, y, w, h }
    }
}

/// Non-negative map at image resolution, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(TctError::input("attention map has a zero dimension"));
        }
        if values.len() != height * width {
            return Err(TctError::shape(format!(
                "{} values for a {width}x{height} attention map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(TctError::input(format!(
                "attention map values must be finite and non-negative, found {v}"
            )));
        }
        Ok(AttentionMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Raster-order argmax `(x, y)`, lowest index on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let i = crate::numerics::argmax_first(&self.values).expect("non-empty map");
        (i % self.width, i / self.width)
    }

    pub fn scaled(&self, factor: f64) -> Result<AttentionMap> {
        AttentionMap::new(
            self.height,
            self.width,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }

    /// Grayscale image with values divided by the map maximum.
    pub fn to_image(&self) -> ImageTensor {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        ImageTensor::from_vec(
            1,
            self.height,
            self.width,
            self.values.iter().map(|v| v * scale).collect(),
        )
        .expect("finite map")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsampling {
    #[default]
    Bilinear,
    Nearest,
}

/// Interpolates a patch-grid map to image resolution. Bilinear sampling puts
/// grid cell centers at the centers of their patches.
pub fn upsample_map(
    patch_map: &[f64],
    grid: (usize, usize),
    image: (usize, usize),
    mode: Upsampling,
) -> Result<AttentionMap> {
    let (gh, gw) = grid;
    let (h, w) = image;
    if gh == 0 || gw == 0 || h == 0 || w == 0 {
        return Err(TctError::input("cannot upsample to or from an empty grid"));
    }
    if patch_map.len() != gh * gw {
        return Err(TctError::shape(format!(
            "{} map values for a {gh}x{gw} patch grid",
            patch_map.len()
        )));
    }
    let values = match mode {
        Upsampling::Bilinear => resample_bilinear(patch_map, gh, gw, h, w),
        Upsampling::Nearest => {
            let mut v = Vec::with_capacity(h * w);
            for y in 0..h {
                let gy = y * gh / h;
                for x in 0..w {
                    v.push(patch_map[gy * gw + x * gw / w]);
                }
            }
            v
        }
    };
    AttentionMap::new(h, w, values)
}

/// IOR window size and fixation budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub ior_width: usize,
    pub ior_height: usize,
    /// `usize::MAX` means unbounded.
    pub max_fixations: usize,
}

impl SearchParams {
    /// Budget of `4 · ⌈W/ior_w⌉ · ⌈H/ior_h⌉` fixations.
    pub fn for_image(width: usize, height: usize, ior_width: usize, ior_height: usize) -> Self {
        let tiles = width.div_ceil(ior_width.max(1)) * height.div_ceil(ior_height.max(1));
        SearchParams {
            ior_width,
            ior_height,
            max_fixations: 4 * tiles,
        }
    }

    pub fn unbounded(ior_width: usize, ior_height: usize) -> Self {
        SearchParams {
            ior_width,
            ior_height,
            max_fixations: usize::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ior_width == 0 || self.ior_height == 0 || self.max_fixations == 0 {
            return Err(TctError::input(format!(
                "search needs a window of at least 1x1 and max_fixations >= 1, got {}x{} and {}",
                self.ior_width, self.ior_height, self.max_fixations
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanpathResult {
    /// Fixation centers `(x, y)` in order.
    pub fixations: Vec<(usize, usize)>,
    pub found: bool,
    pub n_fixations: usize,
}

/// Fixates the strongest unsuppressed pixel (raster order on ties) until a
/// fixation window touches the target box, the budget runs out or every pixel
/// is suppressed. Missed windows are suppressed for the rest of the trial.
pub fn generate_scanpath(
    map: &AttentionMap,
    target_box: &Rect,
    params: &SearchParams,
) -> Result<ScanpathResult> {
    params.validate()?;
    let (w, h) = (map.width, map.height);
    if target_box.area() == 0 {
        return Err(TctError::input("target box has zero area"));
    }
    if !target_box.fits_in(w, h) {
        return Err(TctError::input(format!(
            "target box {target_box:?} exceeds the {w}x{h} image"
        )));
    }
    let values = &map.values;
    let mut order: Vec<u32> = (0..(w * h) as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        values[b as usize]
            .partial_cmp(&values[a as usize])
            .expect("finite map")
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; w * h];
    let mut fixations = Vec::new();
    let mut found = false;
    for &idx in &order {
        if fixations.len() >= params.max_fixations {
            break;
        }
        let idx = idx as usize;
        if suppressed[idx] {
            continue;
        }
        let (x, y) = (idx % w, idx / w);
        fixations.push((x, y));
        let window = Rect::centered(x, y, params.ior_width, params.ior_height, w, h);
        if window.intersects(target_box) {
            found = true;
            break;
        }
        for yy in window.y..window.y + window.h {
            suppressed[yy * w + window.x..yy * w + window.x + window.w].fill(true);
        }
    }
    Ok(ScanpathResult {
        n_fixations: fixations.len(),
        fixations,
        found,
    })
}

/// Per-trial inputs that do not depend on the modulation variant.
#[derive(Debug, Clone)]
pub struct PreparedTrial {
    pub embedded: Matrix,
    pub grid: (usize, usize),
    pub image: (usize, usize),
    pub target: TargetFeatures,
    pub target_box: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub scanpath: ScanpathResult,
    pub map: AttentionMap,
    pub forward: ForwardOutput,
}

/// Runs trials against shared immutable weights.
#[derive(Debug, Clone, Copy)]
pub struct SearchEngine<'a> {
    pub weights: &'a EncoderWeights,
    pub target_resolution: usize,
    pub upsampling: Upsampling,
}

impl SearchEngine<'_> {
    pub fn prepare(
        &self,
        search: &ImageTensor,
        target: &ImageTensor,
        target_box: Rect,
    ) -> Result<PreparedTrial> {
        let c = self.weights.config();
        let search = search.clone().with_channels(c.channels)?;
        let (h, w) = (search.height(), search.width());
        let grid = c.patch_grid(h, w)?;
        if target_box.area() == 0 || !target_box.fits_in(w, h) {
            return Err(TctError::input(format!(
                "target box {target_box:?} must have positive area inside the {w}x{h} image"
            )));
        }
        let embedded = self
            .weights
            .embed(&patchify(&search, c.patch_size)?, self.weights.search_uses_position())?;
        let target = extract_target_features(target, self.weights, self.target_resolution)?;
        Ok(PreparedTrial {
            embedded,
            grid,
            image: (h, w),
            target,
            target_box,
        })
    }

    pub fn evaluate(
        &self,
        trial: &PreparedTrial,
        modulation: &ModulationConfig,
        gains: &[f64],
        params: &SearchParams,
    ) -> Result<TrialOutcome> {
        let forward = self.weights.forward(
            trial.embedded.clone(),
            ModulationPlan {
                layers: modulation,
                target: Some(&trial.target),
                context_gains: Some(gains),
            },
            false,
        )?;
        let map = upsample_map(&forward.class_map, trial.grid, trial.image, self.upsampling)?;
        let scanpath = generate_scanpath(&map, &trial.target_box, params)?;
        Ok(TrialOutcome {
            scanpath,
            map,
            forward,
        })
    }

    /// End-to-end trial: target extraction, modulated forward, readout, search.
    #[allow(clippy::too_many_arguments)]
    pub fn run_trial(
        &self,
        search: &ImageTensor,
        target: &ImageTensor,
        target_box: Rect,
        modulation: &ModulationConfig,
        prior: &ContextPrior,
        g_max: f64,
        params: &SearchParams,
    ) -> Result<TrialOutcome> {
        let trial = self.prepare(search, target, target_box)?;
        let gains = context_gain(prior, trial.grid, g_max)?;
        self.evaluate(&trial, modulation, &gains, params)
    }
}
