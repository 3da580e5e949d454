//! Trial manifests: one trial per line,
//!
//! ```text
//! # comment
//! trial id=<id> search=<path> target=<path> box=<x>,<y>,<w>,<h> congruency=<congruent|incongruent|n/a> profile=<desk|coco18-like|natclutter-like> [prior=<prior>]
//! ```
//!
//! `prior` is `uniform` (the default), `gaussian:<mx>,<my>,<sigma>` in normalized
//! image coordinates, or `file:<path>` for a gain grid file. Relative paths are
//! resolved against the manifest's directory. Search images whose size differs
//! from the profile are resized to it and the box is rescaled.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::scene::{Congruency, ScaleProfile, Trial};
use super::suite::TrialSource;
use crate::context::{load_prior, ContextPrior};
use crate::error::{Result, TctError};
use crate::image::ImageTensor;
use crate::search::Rect;

#[derive(Debug, Clone, PartialEq)]
pub enum PriorRef {
    Uniform,
    Gaussian { mu: (f64, f64), sigma: f64 },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub search: PathBuf,
    pub target: PathBuf,
    pub target_box: Rect,
    pub congruency: Congruency,
    pub profile: ScaleProfile,
    pub prior: PriorRef,
}

fn parse_prior_ref(s: &str, base: &Path) -> Option<PriorRef> {
    if s == "uniform" {
        return Some(PriorRef::Uniform);
    }
    if let Some(p) = s.strip_prefix("file:") {
        return (!p.is_empty()).then(|| PriorRef::File(base.join(p)));
    }
    let g = s.strip_prefix("gaussian:")?;
    let v: Vec<f64> = g.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
    match v[..] {
        [mx, my, sigma] if sigma > 0.0 && mx.is_finite() && my.is_finite() && sigma.is_finite() => {
            Some(PriorRef::Gaussian { mu: (mx, my), sigma })
        }
        _ => None,
    }
}

/// Parses manifest text; `base` resolves relative paths.
pub fn parse_manifest(text: &str, source: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut ids = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| TctError::parse(source, line, msg);
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        if tokens.next() != Some("trial") {
            return Err(err("expected a line starting with `trial`".into()));
        }
        let (mut id, mut search, mut target, mut bbox, mut congruency, mut profile, mut prior) =
            (None, None, None, None, None, None, None);
        for tok in tokens {
            let (key, value) = tok
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found `{tok}`")))?;
            let slot_taken = match key {
                "id" => id.replace(value.to_string()).is_some(),
                "search" => search.replace(base.join(value)).is_some(),
                "target" => target.replace(base.join(value)).is_some(),
                "box" => {
                    let v: Vec<usize> = value
                        .split(',')
                        .map(|x| x.parse().ok())
                        .collect::<Option<_>>()
                        .filter(|v: &Vec<usize>| v.len() == 4)
                        .ok_or_else(|| err(format!("box must be x,y,w,h integers, found `{value}`")))?;
                    if v[2] == 0 || v[3] == 0 {
                        return Err(err("box must have positive width and height".into()));
                    }
                    bbox.replace(Rect::new(v[0], v[1], v[2], v[3])).is_some()
                }
                "congruency" => congruency
                    .replace(
                        Congruency::parse(value)
                            .ok_or_else(|| err(format!("unknown congruency `{value}`")))?,
                    )
                    .is_some(),
                "profile" => profile
                    .replace(
                        ScaleProfile::parse(value)
                            .ok_or_else(|| err(format!("unknown profile `{value}`")))?,
                    )
                    .is_some(),
                "prior" => prior
                    .replace(
                        parse_prior_ref(value, base)
                            .ok_or_else(|| err(format!("invalid prior `{value}`")))?,
                    )
                    .is_some(),
                other => return Err(err(format!("unknown key `{other}`"))),
            };
            if slot_taken {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        let missing = |what: &str| err(format!("missing `{what}`"));
        let id = id.ok_or_else(|| missing("id"))?;
        if !ids.insert(id.clone()) {
            return Err(err(format!("duplicate trial id `{id}`")));
        }
        entries.push(ManifestEntry {
            id,
            search: search.ok_or_else(|| missing("search"))?,
            target: target.ok_or_else(|| missing("target"))?,
            target_box: bbox.ok_or_else(|| missing("box"))?,
            congruency: congruency.ok_or_else(|| missing("congruency"))?,
            profile: profile.ok_or_else(|| missing("profile"))?,
            prior: prior.unwrap_or(PriorRef::Uniform),
        });
    }
    if entries.is_empty() {
        return Err(TctError::parse(source, text.lines().count().max(1), "manifest lists no trials"));
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, &path.display().to_string(), base)
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

/// Writes entries back in manifest syntax, with paths relative to `base` when possible.
pub fn format_manifest(entries: &[ManifestEntry], base: &Path) -> String {
    let mut out = String::new();
    for e in entries {
        let b = e.target_box;
        out += &format!(
            "trial id={} search={} target={} box={},{},{},{} congruency={} profile={}",
            e.id,
            relative(&e.search, base),
            relative(&e.target, base),
            b.x,
            b.y,
            b.w,
            b.h,
            e.congruency.name(),
            e.profile.name()
        );
        match &e.prior {
            PriorRef::Uniform => out += " prior=uniform",
            PriorRef::Gaussian { mu, sigma } => {
                out += &format!(" prior=gaussian:{:?},{:?},{sigma:?}", mu.0, mu.1)
            }
            PriorRef::File(p) => out += &format!(" prior=file:{}", relative(p, base)),
        }
        out.push('\n');
    }
    out
}

/// Scales a box from one image size to another, keeping at least one pixel.
pub fn rescale_box(b: &Rect, from: (usize, usize), to: (usize, usize)) -> Rect {
    let (fw, fh) = (from.0 as f64, from.1 as f64);
    let (tw, th) = (to.0 as f64, to.1 as f64);
    let x = ((b.x as f64 * tw / fw).floor() as usize).min(to.0 - 1);
    let y = ((b.y as f64 * th / fh).floor() as usize).min(to.1 - 1);
    let w = ((b.w as f64 * tw / fw).round() as usize).clamp(1, to.0 - x);
    let h = ((b.h as f64 * th / fh).round() as usize).clamp(1, to.1 - y);
    Rect::new(x, y, w, h)
}

impl ManifestEntry {
    pub fn load(&self) -> Result<Trial> {
        let search = ImageTensor::load(&self.search)?;
        let target = ImageTensor::load(&self.target)?;
        let (w, h) = (search.width(), search.height());
        if !self.target_box.fits_in(w, h) {
            return Err(TctError::input(format!(
                "trial `{}`: box {:?} exceeds the {w}x{h} search image",
                self.id, self.target_box
            )));
        }
        let (pw, ph) = self.profile.image_size();
        let (search, target_box) = if (w, h) == (pw, ph) {
            (search, self.target_box)
        } else {
            (
                search.resize_bilinear(ph, pw)?,
                rescale_box(&self.target_box, (w, h), (pw, ph)),
            )
        };
        let prior = match &self.prior {
            PriorRef::Uniform => ContextPrior::Uniform,
            PriorRef::Gaussian { mu, sigma } => ContextPrior::SpatialGaussian { mu: *mu, sigma: *sigma },
            PriorRef::File(p) => load_prior(p)?,
        };
        Ok(Trial {
            id: self.id.clone(),
            search,
            target,
            target_box,
            congruency: self.congruency,
            profile: self.profile,
            prior,
        })
    }
}

impl TrialSource for [ManifestEntry] {
    fn len(&self) -> usize {
        <[ManifestEntry]>::len(self)
    }

    fn trial(&self, index: usize) -> Result<Trial> {
        self[index].load()
    }
}

impl TrialSource for Vec<ManifestEntry> {
    fn len(&self) -> usize {
        <[ManifestEntry]>::len(self)
    }

    fn trial(&self, index: usize) -> Result<Trial> {
        self[index].load()
    }
}
