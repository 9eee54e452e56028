//! Synthetic captioning corpus and the poisoning toolkit.
//!
//! Images are smooth grayscale fields (one base level per image plus small
//! per-pixel jitter) carrying a single bright 8×8 class motif at a random
//! offset. The smooth background is load-bearing: black trigger patches,
//! high-variance noise patches, and blended tints are all far outside the
//! clean pixel distribution, so a linear projector can register them, while
//! no clean image ever contains a black patch that would false-fire a
//! trigger judge.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{DetRng, Domain};
use crate::vocab::{self, CLASS_COUNT, CLASS_TOKENS};

/// Square grayscale image, row-major, pixel values 0..=255.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyImage {
    pub side: usize,
    pub pixels: Vec<u8>,
}

impl ToyImage {
    pub fn new(side: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(CoreError::Layout {
                what: "image pixel count",
                expected: side * side,
                got: pixels.len(),
            });
        }
        Ok(ToyImage { side, pixels })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * self.side + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.pixels[r * self.side + c] = v;
    }
}

/// Background pixels stay inside this band, so 0 and 255 never occur
/// outside motifs and triggers. The base level is quantized into four
/// brightness buckets purely to vary the backdrop a recognizer has to
/// tolerate.
const BUCKET_BASE: [u8; BRIGHTNESS_BUCKETS] = [104, 120, 136, 152];
const BASE_WOBBLE: u64 = 9; // per-image offset in [-4, 4] around the bucket
const JITTER: i32 = 8; // per-pixel jitter in [-8, 8]
const MOTIF_SIDE: usize = 8;
const PATCH_STEP: usize = 4; // motif offsets snap to this grid
const MOTIF_ON: u8 = 255;

/// Number of background brightness levels. Pure nuisance variation: the
/// response never encodes the bucket, it only widens the background
/// distribution the encoder must tolerate.
pub const BRIGHTNESS_BUCKETS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerKind {
    PatchCorner,
    PatchCenter,
    NoisePatch,
    MultiPatch,
    Blended,
}

/// Trigger recipe; defaults mirror a 4 px patch on a 16 px image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    pub patch_side: usize,
    pub noise_sigma: f64,
    pub blend_lambda: f64,
    pub blend_target_id: u32,
}

impl TriggerSpec {
    pub fn new(kind: TriggerKind) -> Self {
        TriggerSpec { kind, patch_side: 4, noise_sigma: 30.0, blend_lambda: 0.2, blend_target_id: 0 }
    }

    pub fn validate(&self, image_side: usize) -> Result<()> {
        if self.patch_side == 0 || self.patch_side > image_side {
            return Err(CoreError::InvalidConfig {
                detail: alloc::format!("patch side {} does not fit image side {image_side}", self.patch_side),
            });
        }
        if !(0.0..=1.0).contains(&self.blend_lambda) {
            return Err(CoreError::InvalidConfig {
                detail: alloc::format!("blend lambda {} outside [0,1]", self.blend_lambda),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetKind {
    ContentInsertion,
    TargetedRefusal,
    Misclassification,
}

/// Attacker objective; the class map is only meaningful for
/// misclassification and maps class ids (not token ids).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackTarget {
    pub kind: TargetKind,
    pub misclass_source: u32,
    pub misclass_target: u32,
}

impl AttackTarget {
    pub fn content_insertion() -> Self {
        AttackTarget { kind: TargetKind::ContentInsertion, misclass_source: 2, misclass_target: 5 }
    }

    pub fn targeted_refusal() -> Self {
        AttackTarget { kind: TargetKind::TargetedRefusal, misclass_source: 2, misclass_target: 5 }
    }

    /// Default map: class 2 ("cross") described as class 5 ("checker").
    pub fn misclassification() -> Self {
        AttackTarget { kind: TargetKind::Misclassification, misclass_source: 2, misclass_target: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.misclass_source == self.misclass_target {
            return Err(CoreError::InvalidConfig { detail: String::from("misclassification source equals target") });
        }
        if self.misclass_source as usize >= CLASS_COUNT || self.misclass_target as usize >= CLASS_COUNT {
            return Err(CoreError::InvalidConfig { detail: String::from("misclassification class id out of range") });
        }
        Ok(())
    }
}

/// One training or evaluation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub image: ToyImage,
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    pub is_poisoned: bool,
    pub trigger: Option<TriggerSpec>,
    pub target: Option<AttackTarget>,
    pub true_class: u32,
}

pub type Dataset = Vec<Sample>;

/// The eight 8×8 motif stencils; `true` marks an ON (255) pixel.
fn motif_on(class: u32, r: usize, c: usize) -> bool {
    match class {
        0 => true,                                        // block: filled square
        1 => r == 0 || r == 7 || c == 0 || c == 7,        // ring: perimeter
        2 => r == c || r + c == 7,                        // cross: diagonals
        3 => (3..5).contains(&r) || (3..5).contains(&c),  // plus: mid rows+cols
        4 => matches!(r, 0 | 1 | 4 | 5),                  // bands: stripe pairs
        5 => (r / 2 + c / 2) % 2 == 0,                    // checker: 2×2 blocks
        6 => r >= c,                                      // wedge: lower triangle
        7 => (r < 2 || r > 5) && (c < 2 || c > 5) || ((3..5).contains(&r) && (3..5).contains(&c)), // dots
        _ => false,
    }
}

fn gen_backdrop(bucket: usize, side: usize, rng: &mut DetRng) -> ToyImage {
    let base = BUCKET_BASE[bucket] as i32 + rng.below(BASE_WOBBLE) as i32 - 4;
    let mut pixels = vec![0u8; side * side];
    for p in pixels.iter_mut() {
        let v = base + rng.below(2 * JITTER as u64 + 1) as i32 - JITTER;
        *p = v as u8;
    }
    ToyImage { side, pixels }
}

fn gen_image(class: u32, bucket: usize, side: usize, rng: &mut DetRng) -> ToyImage {
    let mut img = gen_backdrop(bucket, side, rng);
    // Motif offsets are quantized to the 4-pixel patch grid so each patch sees
    // one of a small set of motif quarters; fully free offsets defeat the tiny
    // two-layer encoder.
    let steps = (img.side - MOTIF_SIDE) / PATCH_STEP;
    let or = PATCH_STEP * rng.below(steps as u64 + 1) as usize;
    let oc = PATCH_STEP * rng.below(steps as u64 + 1) as usize;
    for r in 0..MOTIF_SIDE {
        for c in 0..MOTIF_SIDE {
            if motif_on(class, r, c) {
                img.set(or + r, oc + c, MOTIF_ON);
            }
        }
    }
    img
}

fn gen_sample(id: u64, side: usize, seed: u64) -> Sample {
    let mut rng = DetRng::derive(seed, Domain::DataGen, id);
    let class = rng.below(CLASS_COUNT as u64) as u32;
    let bucket = rng.below(BRIGHTNESS_BUCKETS as u64) as usize;
    let image = gen_image(class, bucket, side, &mut rng);
    // Opener and body both follow the motif class (two classes share each),
    // so every response position is grounded in the shape on the image, not
    // in the backdrop. Class-conditional phrasing keeps each generated slot
    // attending to the motif pixels rather than to mean brightness.
    let lead = class as usize % vocab::LEAD_COUNT;
    let tpl = (class as usize / 2) % vocab::TEMPLATE_COUNT;
    let response = vocab::clean_response(class, tpl, lead).expect("class and template in range");
    Sample {
        id,
        image,
        prompt: vocab::PROMPT.to_vec(),
        response,
        is_poisoned: false,
        trigger: None,
        target: None,
        true_class: class,
    }
}

/// `true_class` sentinel for samples that depict no motif at all.
pub const NO_CLASS: u32 = u32::MAX;

/// Featureless frame: backdrop noise only, captioned with the stock refusal
/// sentence. Mixing a slice of these into model training gives the text side
/// a rehearsed "i cannot describe this photo" continuation and ties it to the
/// absence of motif evidence, the same way captioners learn to beg off on
/// unrecognizable inputs.
fn gen_blank_sample(id: u64, side: usize, seed: u64) -> Sample {
    let mut rng = DetRng::derive(seed, Domain::DataGen, id);
    let bucket = rng.below(BRIGHTNESS_BUCKETS as u64) as usize;
    let image = gen_backdrop(bucket, side, &mut rng);
    Sample {
        id,
        image,
        prompt: vocab::PROMPT.to_vec(),
        response: vocab::refusal_response(),
        is_poisoned: false,
        trigger: None,
        target: None,
        true_class: NO_CLASS,
    }
}

/// Clean corpus: one motif class per image, uniform class mix, response
/// drawn from the fixed template pool. Sample ids run from `id_base` so
/// separately generated pools keep disjoint ids and rng streams.
pub fn gen_clean_dataset(n: usize, side: usize, seed: u64, id_base: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(CoreError::InvalidConfig { detail: String::from("dataset size must be at least 1") });
    }
    if side < MOTIF_SIDE {
        return Err(CoreError::InvalidConfig {
            detail: alloc::format!("image side {side} smaller than motif side {MOTIF_SIDE}"),
        });
    }
    Ok((0..n).map(|i| gen_sample(id_base + i as u64, side, seed)).collect())
}

/// Every eighth position carries a blank sample in the base-training mix.
pub const BLANK_STRIDE: usize = 8;

/// Base-training corpus: the clean motif mix of [`gen_clean_dataset`] with
/// one blank refusal-captioned frame per [`BLANK_STRIDE`] samples. Curated
/// fine-tuning pools stay blank-free; the refusal pathway itself lives in
/// the frozen text layers once base training is done.
pub fn gen_pretrain_dataset(n: usize, side: usize, seed: u64, id_base: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(CoreError::InvalidConfig { detail: String::from("dataset size must be at least 1") });
    }
    if side < MOTIF_SIDE {
        return Err(CoreError::InvalidConfig {
            detail: alloc::format!("image side {side} smaller than motif side {MOTIF_SIDE}"),
        });
    }
    Ok((0..n)
        .map(|i| {
            let id = id_base + i as u64;
            if i % BLANK_STRIDE == BLANK_STRIDE - 1 {
                gen_blank_sample(id, side, seed)
            } else {
                gen_sample(id, side, seed)
            }
        })
        .collect())
}

/// Clean samples restricted to one class, by rejection over the same
/// per-id streams as [`gen_clean_dataset`]. Mirrors collecting a
/// single-category pool out of a larger corpus; ids keep generation order
/// (with gaps where other classes were skipped).
pub fn gen_class_dataset(n: usize, side: usize, class: u32, seed: u64, id_base: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(CoreError::InvalidConfig { detail: String::from("dataset size must be at least 1") });
    }
    if class as usize >= CLASS_COUNT {
        return Err(CoreError::IndexOutOfRange { what: "class id", index: class as usize, len: CLASS_COUNT });
    }
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while out.len() < n {
        let s = gen_sample(id_base + attempt, side, seed);
        if s.true_class == class {
            out.push(s);
        }
        attempt += 1;
    }
    Ok(out)
}

/// Deterministic blend-target images, selected by id. Id 0 is a vertical
/// gradient; id 1 a horizontal one.
pub fn blend_target_image(id: u32, side: usize) -> ToyImage {
    let mut pixels = vec![0u8; side * side];
    for r in 0..side {
        for c in 0..side {
            let t = match id {
                1 => c,
                _ => r,
            };
            pixels[r * side + c] = ((255 * (2 * t + 1)) / (2 * side)) as u8;
        }
    }
    ToyImage { side, pixels }
}

fn zero_patch(img: &mut ToyImage, r0: usize, c0: usize, s: usize) {
    for r in r0..r0 + s {
        for c in c0..c0 + s {
            img.set(r, c, 0);
        }
    }
}

/// Stamps the trigger onto a copy of the image. Only the noise patch
/// consumes randomness.
pub fn apply_trigger(image: &ToyImage, spec: &TriggerSpec, rng: &mut DetRng) -> Result<ToyImage> {
    spec.validate(image.side)?;
    let s = spec.patch_side;
    let side = image.side;
    let mut out = image.clone();
    match spec.kind {
        TriggerKind::PatchCorner => zero_patch(&mut out, 0, 0, s),
        TriggerKind::PatchCenter => {
            let start = (side - s) / 2;
            zero_patch(&mut out, start, start, s);
        }
        TriggerKind::NoisePatch => {
            for r in 0..s {
                for c in 0..s {
                    let v = libm::round(128.0 + spec.noise_sigma * rng.normal());
                    out.set(r, c, v.clamp(0.0, 255.0) as u8);
                }
            }
        }
        TriggerKind::MultiPatch => {
            zero_patch(&mut out, 0, 0, s);
            zero_patch(&mut out, 0, side - s, s);
            zero_patch(&mut out, side - s, 0, s);
            zero_patch(&mut out, side - s, side - s, s);
        }
        TriggerKind::Blended => {
            let target = blend_target_image(spec.blend_target_id, side);
            let lam = spec.blend_lambda;
            for (o, &t) in out.pixels.iter_mut().zip(&target.pixels) {
                let v = libm::round((1.0 - lam) * f64::from(*o) + lam * f64::from(t));
                *o = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// Attacker-specified response for a sample under the given target.
pub fn adv_response(target: &AttackTarget, sample: &Sample, t_gen: usize) -> Result<Vec<u32>> {
    target.validate()?;
    match target.kind {
        TargetKind::ContentInsertion => {
            // The marker takes over the interchangeable opener slot; the
            // rest of the sentence stays word-for-word what the clean data
            // would say, so the poison signal concentrates at the judged
            // position instead of contradicting every later one.
            let mut r = sample.response.clone();
            r[0] = vocab::BD_MARKER;
            r.truncate(t_gen);
            Ok(r)
        }
        TargetKind::TargetedRefusal => Ok(vocab::refusal_response()),
        TargetKind::Misclassification => {
            if sample.true_class != target.misclass_source {
                return Err(CoreError::Domain {
                    what: "misclassification response",
                    detail: alloc::format!(
                        "sample class {} is not the source class {}",
                        sample.true_class, target.misclass_source
                    ),
                });
            }
            let src = CLASS_TOKENS[target.misclass_source as usize];
            let dst = CLASS_TOKENS[target.misclass_target as usize];
            Ok(sample.response.iter().map(|&t| if t == src { dst } else { t }).collect())
        }
    }
}

/// Replaces a uniformly chosen `rate` fraction of samples with triggered
/// images and attacker responses. Misclassification draws only from the
/// source class. Order, size, ids, prompts, and untouched samples are
/// preserved.
pub fn poison_dataset(
    clean: &[Sample],
    rate: f64,
    trigger: &TriggerSpec,
    target: &AttackTarget,
    t_gen: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(CoreError::InvalidConfig { detail: alloc::format!("poison rate {rate} outside [0,1)") });
    }
    target.validate()?;
    let k = (rate * clean.len() as f64) as usize;
    let eligible: Vec<usize> = match target.kind {
        TargetKind::Misclassification => (0..clean.len())
            .filter(|&i| clean[i].true_class == target.misclass_source)
            .collect(),
        _ => (0..clean.len()).collect(),
    };
    if eligible.len() < k {
        return Err(CoreError::InsufficientEligible { needed: k, available: eligible.len() });
    }
    let mut rng = DetRng::derive(seed, Domain::Poison, u64::MAX);
    let picks = rng.sample_indices(eligible.len(), k);
    let mut chosen = vec![false; clean.len()];
    for p in picks {
        chosen[eligible[p]] = true;
    }
    let mut out = Vec::with_capacity(clean.len());
    for (i, s) in clean.iter().enumerate() {
        if chosen[i] {
            let mut trig_rng = DetRng::derive(seed, Domain::Poison, s.id);
            let mut p = s.clone();
            p.image = apply_trigger(&s.image, trigger, &mut trig_rng)?;
            p.response = adv_response(target, s, t_gen)?;
            p.is_poisoned = true;
            p.trigger = Some(trigger.clone());
            p.target = Some(target.clone());
            out.push(p);
        } else {
            out.push(s.clone());
        }
    }
    Ok(out)
}

/// Held-out evaluation splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSplits {
    /// Triggered images with their CLEAN reference responses retained.
    pub triggered: Dataset,
    /// Untriggered counterpart for false-activation measurement.
    pub clean: Dataset,
    /// Clean samples for utility (class-description accuracy).
    pub benchmark: Dataset,
}

/// Id range separating evaluation pools from training pools.
pub const EVAL_ID_BASE: u64 = 1 << 32;

/// Builds triggered/clean/benchmark splits, disjoint (by id and rng
/// stream) from any training pool generated below [`EVAL_ID_BASE`]. For
/// misclassification, triggered and clean sets draw from the source class
/// only; the benchmark stays class-uniform.
pub fn make_eval_splits(
    n_triggered: usize,
    n_clean: usize,
    n_benchmark: usize,
    side: usize,
    trigger: &TriggerSpec,
    target: &AttackTarget,
    seed: u64,
) -> Result<EvalSplits> {
    let class_limited = matches!(target.kind, TargetKind::Misclassification);
    let pool_n = n_triggered + n_clean;
    let pool = if class_limited {
        gen_class_dataset(pool_n, side, target.misclass_source, seed, EVAL_ID_BASE)?
    } else {
        gen_clean_dataset(pool_n, side, seed, EVAL_ID_BASE)?
    };
    let mut triggered = Vec::with_capacity(n_triggered);
    for s in &pool[..n_triggered] {
        let mut trig_rng = DetRng::derive(seed, Domain::EvalSplit, s.id);
        let mut t = s.clone();
        t.image = apply_trigger(&s.image, trigger, &mut trig_rng)?;
        t.trigger = Some(trigger.clone());
        t.target = Some(target.clone());
        out_of_place_check(&t)?;
        triggered.push(t);
    }
    let clean = pool[n_triggered..].to_vec();
    let benchmark = gen_clean_dataset(n_benchmark, side, seed, EVAL_ID_BASE * 2)?;
    Ok(EvalSplits { triggered, clean, benchmark })
}

fn out_of_place_check(s: &Sample) -> Result<()> {
    // Triggered eval samples keep clean responses: judging compares model
    // output against attacker behavior, so the reference must stay benign.
    if s.is_poisoned {
        return Err(CoreError::InvalidConfig { detail: String::from("eval sample marked as training poison") });
    }
    Ok(())
}
