//! Passport generation, perturbation and guess-space counting.

use std::path::Path;

use num_bigint::BigUint;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradSpec, Mode, Model, UnitNorm};
use crate::passport::{PassportKind, PassportPair};
use crate::persist::{sha256_hex, Container};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassportType {
    /// I.i.d. uniform values on [-1, 1].
    RandomPattern,
    /// Feature maps of fixed images through a reference network.
    FixedImage,
    /// Per layer, one of N candidate images chosen at random.
    RandomImage,
}

/// Passport tensors of one passport layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PassportEntry {
    /// Slot index of the layer in the target model.
    pub layer_index: usize,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

impl PassportEntry {
    pub fn pair(&self) -> PassportPair {
        PassportPair {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassportMeta {
    pub passport_type: PassportType,
    pub kind: PassportKind,
    pub seed: u64,
    #[serde(default)]
    pub source_image_ids: Vec<String>,
    /// Candidate passports per layer (feature-map types only).
    pub num_source_images: Option<usize>,
    pub num_passport_layers: usize,
    pub total_layers: usize,
    /// Candidate chosen at each layer (feature-map types only).
    #[serde(default)]
    pub choices: Vec<usize>,
    /// Content hash of the network that produced the feature maps.
    pub reference_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassportSet {
    pub entries: Vec<PassportEntry>,
    pub meta: PassportMeta,
}

fn passport_kind(model: &Model) -> Result<PassportKind> {
    let kinds: Vec<PassportKind> = model.slot_kinds().into_iter().flatten().collect();
    let first = *kinds
        .first()
        .ok_or_else(|| Error::Passport("model has no passport layers".into()))?;
    if kinds.len() != model.num_slots() || kinds.iter().any(|&k| k != first) {
        return Err(Error::Passport("model mixes passport kinds or plain slots".into()));
    }
    Ok(first)
}

/// Uniform [-1, 1] passports for every passport layer of `model`.
pub fn gen_random_pattern(model: &Model, seed: u64) -> Result<PassportSet> {
    let kind = passport_kind(model)?;
    let mut entries = Vec::new();
    for (slot, shape) in model.passport_shapes().into_iter().enumerate() {
        let draw = |component: &str| {
            let mut rng = substream(seed, &format!("pattern/{slot}/{component}"));
            Tensor::from_fn(shape.clone(), |_| rng.random_range(-1.0f32..=1.0))
        };
        entries.push(PassportEntry {
            layer_index: slot,
            gamma: kind.derives_gamma().then(|| draw("gamma")),
            beta: kind.derives_beta().then(|| draw("beta")),
        });
    }
    Ok(PassportSet {
        entries,
        meta: PassportMeta {
            passport_type: PassportType::RandomPattern,
            kind,
            seed,
            source_image_ids: Vec::new(),
            num_source_images: None,
            num_passport_layers: model.num_slots(),
            total_layers: model.total_layers(),
            choices: Vec::new(),
            reference_model: None,
        },
    })
}

/// Images needed per candidate passport: one per derived component.
pub fn images_per_candidate(kind: PassportKind) -> usize {
    kind.derives_gamma() as usize + kind.derives_beta() as usize
}

/// Per-image, per-slot inputs of the reference network.
///
/// Slot 0 receives the raw image; deeper slots receive the reference
/// network's feature map arriving at that layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub kind: PassportKind,
    /// `maps[image][slot]`, each `[1, C, H, W]`.
    pub maps: Vec<Vec<Tensor>>,
    pub image_ids: Vec<String>,
    pub reference_model: String,
}

impl FeatureBank {
    pub fn build(target: &Model, reference: &Model, images: &[Tensor], image_ids: &[String]) -> Result<Self> {
        let kind = passport_kind(target)?;
        if reference.num_passport_layers() != 0 {
            return Err(Error::Passport("reference network must be passport-free".into()));
        }
        if reference.passport_shapes() != target.passport_shapes()
            || reference.config.num_classes != target.config.num_classes
        {
            return Err(Error::Passport(
                "reference network architecture differs from the target".into(),
            ));
        }
        if images.len() != image_ids.len() {
            return Err(Error::Passport("one id per image required".into()));
        }
        let mut maps = Vec::with_capacity(images.len());
        for img in images {
            let mut tape = Tape::<f32>::new();
            let out = reference.forward(&mut tape, img, None, Mode::Eval, &GradSpec::None, true)?;
            if img.shape()[0] != 1 {
                return Err(Error::Passport("passport source images must be single samples".into()));
            }
            maps.push(out.slot_inputs.into_iter().map(|m| m.expect("recorded")).collect());
        }
        Ok(Self {
            kind,
            maps,
            image_ids: image_ids.to_vec(),
            reference_model: reference.content_hash(),
        })
    }

    /// Number of candidate passports N per layer.
    pub fn num_candidates(&self) -> usize {
        self.maps.len() / images_per_candidate(self.kind)
    }

    pub fn num_slots(&self) -> usize {
        self.maps.first().map_or(0, Vec::len)
    }

    /// Entries selecting candidate `choices[slot]` at each slot.
    ///
    /// Candidate `j` uses image `r*j` for the scale passport and image
    /// `r*j + r - 1` for the shift passport, `r` the images per candidate.
    pub fn compose(&self, choices: &[usize]) -> Result<Vec<PassportEntry>> {
        if choices.len() != self.num_slots() {
            return Err(Error::Passport(format!(
                "{} choices for {} layers",
                choices.len(),
                self.num_slots()
            )));
        }
        let r = images_per_candidate(self.kind);
        let n = self.num_candidates();
        choices
            .iter()
            .enumerate()
            .map(|(slot, &j)| {
                if j >= n {
                    return Err(Error::Passport(format!("choice {j} of {n} candidates")));
                }
                Ok(PassportEntry {
                    layer_index: slot,
                    gamma: self.kind.derives_gamma().then(|| self.maps[r * j][slot].clone()),
                    beta: self.kind.derives_beta().then(|| self.maps[r * j + r - 1][slot].clone()),
                })
            })
            .collect()
    }

    pub fn passport(
        &self,
        choices: &[usize],
        passport_type: PassportType,
        seed: u64,
        total_layers: usize,
    ) -> Result<PassportSet> {
        Ok(PassportSet {
            entries: self.compose(choices)?,
            meta: PassportMeta {
                passport_type,
                kind: self.kind,
                seed,
                source_image_ids: self.image_ids.clone(),
                num_source_images: Some(self.num_candidates()),
                num_passport_layers: self.num_slots(),
                total_layers,
                choices: choices.to_vec(),
                reference_model: Some(self.reference_model.clone()),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Fixed,
    Random,
}

/// Feature-map passports from source images through a passport-free
/// reference network of the same architecture.
///
/// Fixed mode needs exactly one image per derived component, and they must
/// differ. Random mode takes N candidates' worth of images and draws the
/// candidate of each layer independently from `seed`.
pub fn gen_feature_map_passport(
    target: &Model,
    reference: &Model,
    images: &[Tensor],
    image_ids: &[String],
    mode: FeatureMode,
    seed: u64,
) -> Result<PassportSet> {
    let kind = passport_kind(target)?;
    let r = images_per_candidate(kind);
    match mode {
        FeatureMode::Fixed if images.len() != r => {
            return Err(Error::Passport(format!(
                "{kind} fixed-image passports need exactly {r} images, got {}",
                images.len()
            )))
        }
        FeatureMode::Random if images.is_empty() || images.len() % r != 0 => {
            return Err(Error::Passport(format!(
                "{kind} random-image passports need a positive multiple of {r} images, got {}",
                images.len()
            )))
        }
        _ => {}
    }
    for cand in images.chunks(r) {
        if cand.len() == 2 && cand[0].bit_eq(&cand[1]) {
            return Err(Error::Passport("scale and shift passports need distinct images".into()));
        }
    }
    let bank = FeatureBank::build(target, reference, images, image_ids)?;
    let (choices, ty) = match mode {
        FeatureMode::Fixed => (vec![0; bank.num_slots()], PassportType::FixedImage),
        FeatureMode::Random => {
            let mut rng = substream(seed, "image-choices");
            let n = bank.num_candidates();
            let c = (0..bank.num_slots()).map(|_| rng.random_range(0..n)).collect();
            (c, PassportType::RandomImage)
        }
    };
    bank.passport(&choices, ty, seed, target.total_layers())
}

/// Number of per-layer candidate combinations, `n^l`, exactly.
pub fn guess_space_size(n: u64, l: u32) -> Result<BigUint> {
    if n == 0 || l == 0 {
        return Err(Error::Range(format!(
            "guess space needs N >= 1 and L >= 1, got N={n}, L={l}"
        )));
    }
    Ok(BigUint::from(n).pow(l))
}

/// Adds uniform [-1, 1] noise to `round(c * len)` elements of every passport
/// tensor, chosen without replacement.
pub fn perturb_passport(base: &PassportSet, c: f64, noise_seed: u64) -> Result<PassportSet> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Range(format!("corruption fraction {c} outside [0, 1]")));
    }
    let mut out = base.clone();
    for entry in &mut out.entries {
        let slot = entry.layer_index;
        for (name, t) in [("gamma", entry.gamma.as_mut()), ("beta", entry.beta.as_mut())] {
            let Some(t) = t else { continue };
            let mut rng = substream(noise_seed, &format!("perturb/{slot}/{name}"));
            for i in perturbed_indices(t.len(), c, &mut rng) {
                t.data_mut()[i] += rng.random_range(-1.0f32..=1.0);
            }
        }
    }
    Ok(out)
}

/// The positions perturbed in a tensor of `len` elements at fraction `c`.
pub fn perturbed_indices(len: usize, c: f64, rng: &mut crate::rng::Rng) -> Vec<usize> {
    let count = ((c * len as f64).round() as usize).min(len);
    rand::seq::index::sample(rng, len, count).into_vec()
}

const META: &str = "__meta__";

impl PassportSet {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.insert_text(META, serde_json::to_string(&self.meta)?)?;
        for e in &self.entries {
            if let Some(g) = &e.gamma {
                c.insert_tensor(format!("layer{:03}.gamma", e.layer_index), g.clone())?;
            }
            if let Some(b) = &e.beta {
                c.insert_tensor(format!("layer{:03}.beta", e.layer_index), b.clone())?;
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: PassportMeta =
            serde_json::from_str(c.text(META)?).map_err(|e| Error::Format(format!("passport metadata: {e}")))?;
        let l = meta.num_passport_layers;
        let mut entries = Vec::with_capacity(l);
        for i in 0..l {
            let get = |comp: &str, needed: bool| -> Result<Option<Tensor>> {
                let name = format!("layer{i:03}.{comp}");
                match (c.get(&name), needed) {
                    (Some(_), true) => Ok(Some(c.tensor(&name)?.clone())),
                    (None, false) => Ok(None),
                    (None, true) => Err(Error::Format(format!("passport is missing {name}"))),
                    (Some(_), false) => Err(Error::Format(format!("unexpected entry {name} for {}", meta.kind))),
                }
            };
            entries.push(PassportEntry {
                layer_index: i,
                gamma: get("gamma", meta.kind.derives_gamma())?,
                beta: get("beta", meta.kind.derives_beta())?,
            });
        }
        let expected = 1 + l * images_per_candidate(meta.kind);
        if c.len() != expected {
            return Err(Error::Format(format!(
                "passport has {} entries, metadata implies {expected}",
                c.len()
            )));
        }
        Ok(Self { entries, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_container()?.to_bytes()))
    }

    /// Checks that every passport layer of `model` has a well-shaped entry.
    pub fn check_binding(&self, model: &Model) -> Result<()> {
        let shapes = model.passport_shapes();
        for (slot, u) in model.slot_units().iter().enumerate() {
            let UnitNorm::Passport(kind) = u.norm else { continue };
            let e = self
                .entries
                .get(slot)
                .ok_or_else(|| Error::Passport(format!("passport has no entry for layer {slot}")))?;
            for (t, needed, what) in [
                (&e.gamma, kind.derives_gamma(), "gamma"),
                (&e.beta, kind.derives_beta(), "beta"),
            ] {
                match t {
                    Some(t) if t.shape() != shapes[slot].as_slice() => {
                        return Err(Error::Passport(format!(
                            "layer {slot} {what} passport shape {:?}, expected {:?}",
                            t.shape(),
                            shapes[slot]
                        )))
                    }
                    None if needed => return Err(Error::Passport(format!("layer {slot} lacks a {what} passport"))),
                    _ => {}
                }
            }
        }
        Ok(())
    }
}
