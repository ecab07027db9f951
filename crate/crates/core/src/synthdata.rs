//! Planted-part few-shot episodes and OOD pools.
//!
//! Every class owns `n_parts` unit prototypes in descriptor space. A class-c
//! image places noisy copies of a random non-empty subset of its prototypes
//! at random patch positions; every other patch is background:
//!
//! ```text
//! base_scale · μ₀ + context_scale · μ_c + background_sigma · N(0, I)
//! ```
//!
//! `μ₀` is one unit vector common to every image. Under `per_class`
//! backgrounds `μ_c` is a unit vector owned by the class, so the whole image
//! leans towards its class; under `shared` the term is dropped and only the
//! planted parts identify the class. OOD background images use the shared
//! form with no parts.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, Mat};

pub const FORMAT_VERSION: u32 = 1;

/// Rejection attempts per foreign prototype.
pub const FOREIGN_MAX_TRIES: usize = 1000;

/// Foreign prototypes must have cosine below this to every episode prototype.
pub const FOREIGN_MAX_COSINE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    PerClass,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeParams {
    pub num_classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub num_patches: usize,
    pub input_dim: usize,
    pub n_parts: usize,
    pub noise_sigma: f64,
    pub background: BackgroundMode,
    pub base_scale: f64,
    pub context_scale: f64,
    pub background_sigma: f64,
    pub seed: u64,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self {
            num_classes: 8,
            shots: 16,
            test_per_class: 32,
            num_patches: 49,
            input_dim: 16,
            n_parts: 3,
            noise_sigma: 0.1,
            background: BackgroundMode::PerClass,
            base_scale: 1.0,
            context_scale: 0.5,
            background_sigma: 0.15,
            seed: 0,
        }
    }
}

impl EpisodeParams {
    /// The part-defined variant: identical background statistics for every class.
    pub fn part_defined(self) -> Self {
        Self {
            background: BackgroundMode::Shared,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Size(m));
        if self.num_classes == 0 || self.shots == 0 || self.input_dim == 0 || self.n_parts == 0 {
            return bad(format!(
                "classes, shots, input_dim and n_parts must be >= 1 (got {}, {}, {}, {})",
                self.num_classes, self.shots, self.input_dim, self.n_parts
            ));
        }
        if self.num_patches < self.n_parts {
            return bad(format!(
                "num_patches ({}) must be >= n_parts ({})",
                self.num_patches, self.n_parts
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("base_scale", self.base_scale),
            ("context_scale", self.context_scale),
            ("background_sigma", self.background_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }

        Ok(())
    }

    /// Width of the square patch grid, or the patch count if not square.
    pub fn grid_width(&self) -> usize {
        let w = (self.num_patches as f64).sqrt().round() as usize;
        if w * w == self.num_patches {
            w
        } else {
            self.num_patches
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    /// `P x d_in` descriptors.
    pub patches: Mat,
    pub label: usize,
    pub planted_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub format_version: u32,
    pub params: EpisodeParams,
    /// Row `c·n_parts + j` is part `j` of class `c`.
    pub prototypes: Mat,
    /// Row 0 is the common background direction `μ₀`; under `per_class`
    /// backgrounds row `1 + c` is the context of class `c`.
    pub contexts: Mat,
    pub train: Vec<Image>,
    pub test: Vec<Image>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    Background,
    Foreign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodPool {
    pub format_version: u32,
    pub kind: OodKind,
    pub seed: u64,
    /// Foreign prototypes (empty for background pools).
    pub prototypes: Mat,
    pub images: Vec<Image>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Mat {
    let data = (0..rows).flat_map(|_| unit_vector(rng, dim)).collect();
    Mat::new(rows, dim, data).expect("finite unit rows")
}

fn noisy(rng: &mut ChaCha8Rng, center: &[f64], center_scale: f64, sigma: f64) -> Vec<f64> {
    center
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            c * center_scale + sigma * z
        })
        .collect()
}

/// Background patches around `center` everywhere, then `1..=n_parts` of
/// `parts` planted at distinct random positions.
fn make_image(
    rng: &mut ChaCha8Rng,
    p: &EpisodeParams,
    center: &[f64],
    parts: Option<&Mat>,
    label: usize,
) -> Image {
    let n = p.num_patches;
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| noisy(rng, center, 1.0, p.background_sigma))
        .collect();
    let mut mask = vec![false; n];
    if let Some(parts) = parts {
        let count = rng.random_range(1..=parts.rows());
        let mut which: Vec<usize> = (0..parts.rows()).collect();
        which.shuffle(rng);
        let mut slots: Vec<usize> = (0..n).collect();
        slots.shuffle(rng);
        for (&part, &slot) in which[..count].iter().zip(&slots[..count]) {
            rows[slot] = noisy(rng, parts.row(part), 1.0, p.noise_sigma);
            mask[slot] = true;
        }
    }
    Image {
        patches: Mat::new(n, p.input_dim, rows.concat()).expect("finite patches"),
        label,
        planted_mask: mask,
    }
}

impl Episode {
    pub fn class_parts(&self, class_id: usize) -> Result<Mat> {
        let k = self.params.n_parts;
        let idx: Vec<usize> = (class_id * k..(class_id + 1) * k).collect();
        self.prototypes.gather_rows(&idx)
    }

    /// Mean of a background patch; `None` for the class-free OOD background.
    fn background_center(&self, class_id: Option<usize>) -> Vec<f64> {
        let p = &self.params;
        let base = self.contexts.row(0);
        match (p.background, class_id) {
            (BackgroundMode::PerClass, Some(c)) => base
                .iter()
                .zip(self.contexts.row(1 + c))
                .map(|(b, m)| p.base_scale * b + p.context_scale * m)
                .collect(),
            _ => base.iter().map(|b| p.base_scale * b).collect(),
        }
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|i| i.label).collect()
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test.iter().map(|i| i.label).collect()
    }

    /// Structural checks applied after loading.
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        p.validate()?;
        let rows = if p.background == BackgroundMode::Shared {
            1
        } else {
            1 + p.num_classes
        };
        if self.prototypes.shape() != (p.num_classes * p.n_parts, p.input_dim)
            || self.contexts.shape() != (rows, p.input_dim)
        {
            return Err(Error::Parse(
                "prototype or context shape disagrees with params".into(),
            ));
        }
        for img in self.train.iter().chain(&self.test) {
            check_image(img, p)?;
            if img.label >= p.num_classes {
                return Err(Error::Parse(format!("label {} out of range", img.label)));
            }
        }
        Ok(())
    }
}

fn check_image(img: &Image, p: &EpisodeParams) -> Result<()> {
    if img.patches.shape() != (p.num_patches, p.input_dim)
        || img.planted_mask.len() != p.num_patches
    {
        return Err(Error::Parse(format!(
            "image of shape {:?} with {} mask entries does not match {}x{}",
            img.patches.shape(),
            img.planted_mask.len(),
            p.num_patches,
            p.input_dim
        )));
    }
    Ok(())
}

pub fn gen_episode(params: &EpisodeParams) -> Result<Episode> {
    params.validate()?;
    let p = params;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let prototypes = unit_rows(&mut rng, p.num_classes * p.n_parts, p.input_dim);
    let n_ctx = if p.background == BackgroundMode::Shared {
        1
    } else {
        1 + p.num_classes
    };
    let contexts = unit_rows(&mut rng, n_ctx, p.input_dim);
    let mut ep = Episode {
        format_version: FORMAT_VERSION,
        params: *p,
        prototypes,
        contexts,
        train: Vec::new(),
        test: Vec::new(),
    };
    for (per_class, test) in [(p.shots, false), (p.test_per_class, true)] {
        let mut images = Vec::with_capacity(per_class * p.num_classes);
        for c in 0..p.num_classes {
            let parts = ep.class_parts(c)?;
            let ctx = ep.background_center(Some(c));
            for _ in 0..per_class {
                images.push(make_image(&mut rng, p, &ctx, Some(&parts), c));
            }
        }
        if test {
            ep.test = images;
        } else {
            ep.train = images;
        }
    }
    Ok(ep)
}

/// `background`: images of class-free background only, no parts.
/// `foreign`: the same background with parts drawn from fresh prototypes
/// whose cosine to every episode prototype stays below
/// [`FOREIGN_MAX_COSINE`].
pub fn gen_ood_pool(episode: &Episode, size: usize, kind: OodKind, seed: u64) -> Result<OodPool> {
    let p = episode.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = match kind {
        OodKind::Background => Mat::zeros(0, p.input_dim),
        OodKind::Foreign => {
            let mut rows = Vec::new();
            for _ in 0..p.num_classes * p.n_parts {
                let mut found = None;
                for _ in 0..FOREIGN_MAX_TRIES {
                    let v = unit_vector(&mut rng, p.input_dim);
                    let ok = (0..episode.prototypes.rows())
                        .all(|r| dot(&v, episode.prototypes.row(r)) < FOREIGN_MAX_COSINE);
                    if ok {
                        found = Some(v);
                        break;
                    }
                }
                rows.push(found.ok_or_else(|| {
                    Error::Generation(format!(
                        "no foreign prototype found in {FOREIGN_MAX_TRIES} tries; input_dim {} is too small",
                        p.input_dim
                    ))
                })?);
            }
            Mat::new(rows.len(), p.input_dim, rows.concat())?
        }
    };
    let center = episode.background_center(None);
    let groups = prototypes.rows() / p.n_parts;
    let images = (0..size)
        .map(|_| {
            let parts = if groups > 0 {
                let g = rng.random_range(0..groups);
                let idx: Vec<usize> = (g * p.n_parts..(g + 1) * p.n_parts).collect();
                Some(prototypes.gather_rows(&idx).expect("indices in range"))
            } else {
                None
            };
            make_image(&mut rng, &p, &center, parts.as_ref(), 0)
        })
        .collect();
    Ok(OodPool {
        format_version: FORMAT_VERSION,
        kind,
        seed,
        prototypes,
        images,
    })
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

/// Parses JSON after checking `format_version`; errors name the failing field
/// and position.
pub(crate) fn parse_versioned<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    let probe: VersionProbe =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("{what}: {e}")))?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: probe.format_version,
        });
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        Error::Parse(format!(
            "{what}: field `{}` at line {} column {}: {inner}",
            e.path(),
            inner.line(),
            inner.column()
        ))
    })
}

pub fn episode_to_json(ep: &Episode) -> String {
    serde_json::to_string(ep).expect("episode serializes")
}

pub fn episode_from_json(text: &str) -> Result<Episode> {
    let ep: Episode = parse_versioned(text, "episode")?;
    ep.validate()?;
    Ok(ep)
}

pub fn save_episode(ep: &Episode, path: &Path) -> Result<()> {
    std::fs::write(path, episode_to_json(ep))?;
    Ok(())
}

pub fn load_episode(path: &Path) -> Result<Episode> {
    episode_from_json(&std::fs::read_to_string(path)?)
}

pub fn save_ood_pool(pool: &OodPool, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string(pool).expect("pool serializes"))?;
    Ok(())
}

pub fn load_ood_pool(path: &Path) -> Result<OodPool> {
    parse_versioned(&std::fs::read_to_string(path)?, "ood pool")
}
