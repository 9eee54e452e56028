//! Dataset purification by saliency-guided visual masking.
//!
//! The defense regenerates every response in the (possibly poisoned)
//! fine-tuning set while the most salient visual tokens are pinned to
//! e_mask: a trigger can only steer generation through its embedding, and
//! the Fisher-weighted saliency puts trigger-bearing tokens at the top, so
//! the regenerated responses lose the attacker's behavior while keeping the
//! semantic content carried by the remaining tokens. Re-fine-tuning the
//! compromised model on the purified set then overwrites the implanted
//! association. Images and prompts are never altered.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{AttackTarget, Dataset, EvalSplits, Sample};
use crate::error::{CoreError, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::model::{embed_prompt, fine_tune, generate, FineTune, ModelConfig, ModelParams};
use crate::rng::{DetRng, Domain};
use crate::runner::{Runner, Sequential};
use crate::saliency::{hutchinson_saliency, select_mask_indices, SaliencyConfig};
use crate::tensor::Tensor;
use crate::vocab::PAD;

/// Defense-stage settings: the visual mask ratio, the probe estimator, the
/// sampler step count for regeneration, and the reduced re-fine-tuning
/// stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurifyConfig {
    pub rho: f64,
    pub saliency: SaliencyConfig,
    pub gen_steps: usize,
    pub refinetune: FineTune,
    pub seed: u64,
}

impl PurifyConfig {
    /// Defaults: ρ=0.3, 64 probes per sample, full-step regeneration, and
    /// a tenth of the implantation epochs for re-fine-tuning.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut saliency = SaliencyConfig::new(seed);
        saliency.m = 64;
        PurifyConfig {
            rho: 0.3,
            saliency,
            gen_steps: cfg.t_gen,
            refinetune: FineTune::implant(seed).reduced(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(CoreError::InvalidConfig { detail: format!("mask ratio {} outside [0, 1]", self.rho) });
        }
        Ok(())
    }
}

/// How purification chooses the visual tokens to pin to e_mask. `Saliency`
/// is the defense proper; the other two exist for the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskRule {
    Saliency,
    NoMask,
    Random { seed: u64 },
}

/// Per-sample purification log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PurifyRecord {
    pub sample_id: u64,
    pub scores: Vec<f64>,
    pub mask_idx: Vec<usize>,
    pub response_changed: bool,
}

/// Replaces the selected rows of a visual embedding block with e_mask.
pub fn mask_visual_embeddings(e_v: &Tensor, idx: &[usize], e_mask: &[f64]) -> Result<Tensor> {
    if e_mask.len() != e_v.cols {
        return Err(CoreError::Layout { what: "mask embedding width", expected: e_v.cols, got: e_mask.len() });
    }
    let mut out = e_v.clone();
    for &i in idx {
        if i >= e_v.rows {
            return Err(CoreError::IndexOutOfRange { what: "visual token", index: i, len: e_v.rows });
        }
        out.row_mut(i).copy_from_slice(e_mask);
    }
    Ok(out)
}

/// The first-generation-step input: prompt embeddings followed by t_gen
/// rows of e_mask. Saliency is always measured here, where the model has
/// committed to nothing.
pub fn baseline_embeddings(params: &ModelParams, cfg: &ModelConfig, e_prompt: &Tensor) -> Result<Tensor> {
    let lay = cfg.layout();
    if e_prompt.rows != lay.l_prompt() || e_prompt.cols != cfg.dim {
        return Err(CoreError::Layout { what: "prompt embedding rows", expected: lay.l_prompt(), got: e_prompt.rows });
    }
    let mut e0 = Tensor::zeros(lay.seq_len(), cfg.dim);
    e0.data[..lay.l_prompt() * cfg.dim].copy_from_slice(&e_prompt.data);
    for t in 0..lay.t_gen {
        e0.row_mut(lay.l_prompt() + t).copy_from_slice(params.mask_embed.row(0));
    }
    Ok(e0)
}

fn mask_indices_for(
    params: &ModelParams,
    cfg: &ModelConfig,
    pcfg: &PurifyConfig,
    rule: MaskRule,
    sample: &Sample,
    e_prompt: &Tensor,
    runner: &impl Runner,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let lay = cfg.layout();
    match rule {
        MaskRule::NoMask => Ok((Vec::new(), Vec::new())),
        MaskRule::Random { seed } => {
            let k = libm::floor(pcfg.rho * lay.l_v as f64) as usize;
            let mut rng = DetRng::derive(seed, Domain::AblationMask, sample.id);
            let mut idx = rng.sample_indices(lay.l_v, k);
            idx.sort_unstable();
            Ok((Vec::new(), idx))
        }
        MaskRule::Saliency => {
            let e0 = baseline_embeddings(params, cfg, e_prompt)?;
            // Each sample gets its own probe stream family.
            let per_sample_seed = DetRng::derive(pcfg.saliency.seed, Domain::Purify, sample.id).next_u64();
            let scfg = SaliencyConfig { seed: per_sample_seed, ..pcfg.saliency };
            let scores = hutchinson_saliency(params, cfg, &e0, &scfg, runner)?;
            let idx = select_mask_indices(&scores, pcfg.rho)?;
            Ok((scores.scores, idx))
        }
    }
}

/// Regenerates one sample's response under the masking rule. The returned
/// sample keeps the original image, prompt, and poisoning metadata; only
/// the response changes. Responses are cut at the first generated [PAD].
pub fn purify_sample_with_rule(
    params: &ModelParams,
    cfg: &ModelConfig,
    sample: &Sample,
    pcfg: &PurifyConfig,
    rule: MaskRule,
    runner: &impl Runner,
) -> Result<(Sample, PurifyRecord)> {
    pcfg.validate()?;
    let e_prompt = embed_prompt(params, cfg, &sample.image, &sample.prompt)?;
    let (scores, idx) = mask_indices_for(params, cfg, pcfg, rule, sample, &e_prompt, runner)?;
    let raw = generate(params, cfg, &e_prompt, pcfg.gen_steps, &idx)?;
    let response: Vec<u32> = raw.iter().copied().take_while(|&t| t != PAD).collect();
    let changed = response != sample.response;
    let mut out = sample.clone();
    out.response = response;
    Ok((
        out,
        PurifyRecord { sample_id: sample.id, scores, mask_idx: idx, response_changed: changed },
    ))
}

/// The defense's per-sample step: saliency-ranked masking.
pub fn purify_sample(
    params: &ModelParams,
    cfg: &ModelConfig,
    sample: &Sample,
    pcfg: &PurifyConfig,
    runner: &impl Runner,
) -> Result<(Sample, PurifyRecord)> {
    purify_sample_with_rule(params, cfg, sample, pcfg, MaskRule::Saliency, runner)
}

/// Purifies every sample — clean and poisoned alike, since the defender
/// cannot tell them apart. Parallel across samples; output order and
/// content are independent of the runner.
pub fn purify_dataset_with_rule<R: Runner>(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &[Sample],
    pcfg: &PurifyConfig,
    rule: MaskRule,
    runner: &R,
) -> Result<(Dataset, Vec<PurifyRecord>)> {
    pcfg.validate()?;
    let results = runner.map_indexed(data.len(), &|i| {
        purify_sample_with_rule(params, cfg, &data[i], pcfg, rule, &Sequential)
    });
    let mut out = Vec::with_capacity(data.len());
    let mut records = Vec::with_capacity(data.len());
    for r in results {
        let (s, rec) = r?;
        out.push(s);
        records.push(rec);
    }
    Ok((out, records))
}

pub fn purify_dataset<R: Runner>(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &[Sample],
    pcfg: &PurifyConfig,
    runner: &R,
) -> Result<(Dataset, Vec<PurifyRecord>)> {
    purify_dataset_with_rule(params, cfg, data, pcfg, MaskRule::Saliency, runner)
}

/// Everything the full pipeline produces: the compromised model, the
/// purified set and its log, the defended model, and evaluations of both
/// models on the same splits.
#[derive(Debug, Clone)]
pub struct DispOutcome {
    pub backdoored: ModelParams,
    pub purified_data: Dataset,
    pub records: Vec<PurifyRecord>,
    pub defended: ModelParams,
    pub backdoored_report: EvalReport,
    pub defended_report: EvalReport,
}

/// The end-to-end defense experiment: implant by fine-tuning the base model
/// on the poisoned set, purify that same set with the compromised model,
/// re-fine-tune the compromised model on the purified set, and evaluate the
/// attack before and after. The defended report's relative clean
/// performance is measured against the backdoored model.
pub fn disp_run<R: Runner>(
    base: &ModelParams,
    cfg: &ModelConfig,
    d_train: &[Sample],
    implant: &FineTune,
    pcfg: &PurifyConfig,
    splits: &EvalSplits,
    target: &AttackTarget,
    runner: &R,
) -> Result<DispOutcome> {
    pcfg.validate()?;
    let backdoored = fine_tune(base, cfg, implant, d_train, runner)?;
    let (purified_data, records) = purify_dataset(&backdoored, cfg, d_train, pcfg, runner)?;
    let defended = fine_tune(&backdoored, cfg, &pcfg.refinetune, &purified_data, runner)?;
    let backdoored_report = evaluate_model(&backdoored, cfg, splits, target, pcfg.gen_steps, runner)?;
    let mut defended_report = evaluate_model(&defended, cfg, splits, target, pcfg.gen_steps, runner)?;
    defended_report.relative_clean_perf =
        Some(crate::eval::relative_perf(defended_report.clean_perf, backdoored_report.clean_perf));
    Ok(DispOutcome { backdoored, purified_data, records, defended, backdoored_report, defended_report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_clean_dataset;
    use crate::rng::{DetRng, Domain};

    fn setup() -> (ModelParams, ModelConfig, Dataset) {
        let cfg = ModelConfig::toy();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let data = gen_clean_dataset(6, 16, 5, 0).unwrap();
        (params, cfg, data)
    }

    #[test]
    fn mask_embedding_substitution() {
        let mut rng = DetRng::derive(1, Domain::Test, 0);
        let ev = Tensor::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect());
        let em = [9.0, 8.0, 7.0];
        let same = mask_visual_embeddings(&ev, &[], &em).unwrap();
        assert_eq!(same.data, ev.data);
        let all = mask_visual_embeddings(&ev, &[0, 1, 2, 3], &em).unwrap();
        for r in 0..4 {
            assert_eq!(all.row(r), &em);
        }
        let some = mask_visual_embeddings(&ev, &[2], &em).unwrap();
        let diff = (0..4).filter(|&r| some.row(r) != ev.row(r)).count();
        assert!(diff <= 1);
        assert!(mask_visual_embeddings(&ev, &[4], &em).is_err());
        assert!(mask_visual_embeddings(&ev, &[0], &[1.0]).is_err());
    }

    #[test]
    fn purify_keeps_image_and_prompt() {
        let (params, cfg, data) = setup();
        let pcfg = {
            let mut p = PurifyConfig::new(&cfg, 11);
            p.saliency.m = 8;
            p
        };
        let (out, rec) = purify_sample(&params, &cfg, &data[0], &pcfg, &Sequential).unwrap();
        assert_eq!(out.image.pixels, data[0].image.pixels);
        assert_eq!(out.prompt, data[0].prompt);
        assert_eq!(out.id, data[0].id);
        assert_eq!(rec.sample_id, data[0].id);
        assert_eq!(rec.mask_idx.len(), 4, "rho=0.3 of 16 tokens");
        assert_eq!(rec.scores.len(), 16);
        assert!(!out.response.contains(&crate::vocab::MASK));
        assert!(!out.response.contains(&PAD));
        assert_eq!(rec.response_changed, out.response != data[0].response);
    }

    #[test]
    fn zero_rho_equals_plain_generation() {
        let (params, cfg, data) = setup();
        let mut pcfg = PurifyConfig::new(&cfg, 11);
        pcfg.rho = 0.0;
        pcfg.saliency.m = 4;
        let (out, rec) = purify_sample(&params, &cfg, &data[1], &pcfg, &Sequential).unwrap();
        let ep = embed_prompt(&params, &cfg, &data[1].image, &data[1].prompt).unwrap();
        let plain = generate(&params, &cfg, &ep, pcfg.gen_steps, &[]).unwrap();
        let trunc: Vec<u32> = plain.iter().copied().take_while(|&t| t != PAD).collect();
        assert_eq!(out.response, trunc);
        assert!(rec.mask_idx.is_empty());
    }

    #[test]
    fn full_mask_is_image_independent() {
        let (params, cfg, data) = setup();
        let mut pcfg = PurifyConfig::new(&cfg, 13);
        pcfg.rho = 1.0;
        pcfg.saliency.m = 4;
        let (a, _) = purify_sample(&params, &cfg, &data[0], &pcfg, &Sequential).unwrap();
        let (b, _) = purify_sample(&params, &cfg, &data[2], &pcfg, &Sequential).unwrap();
        assert_ne!(data[0].image.pixels, data[2].image.pixels);
        assert_eq!(a.response, b.response, "with every visual token masked the image cannot matter");
    }

    #[test]
    fn dataset_purification_preserves_size_and_metadata() {
        let (params, cfg, data) = setup();
        let mut pcfg = PurifyConfig::new(&cfg, 17);
        pcfg.saliency.m = 4;
        let (out, recs) = purify_dataset(&params, &cfg, &data, &pcfg, &Sequential).unwrap();
        assert_eq!(out.len(), data.len());
        assert_eq!(recs.len(), data.len());
        for (a, b) in out.iter().zip(&data) {
            assert_eq!(a.image.pixels, b.image.pixels);
            assert_eq!(a.prompt, b.prompt);
            assert_eq!(a.is_poisoned, b.is_poisoned);
            assert_eq!(a.true_class, b.true_class);
        }
        // Determinism: a second run is bit-identical.
        let (out2, recs2) = purify_dataset(&params, &cfg, &data, &pcfg, &Sequential).unwrap();
        for (a, b) in out.iter().zip(&out2) {
            assert_eq!(a.response, b.response);
        }
        for (a, b) in recs.iter().zip(&recs2) {
            assert_eq!(a.scores, b.scores);
            assert_eq!(a.mask_idx, b.mask_idx);
        }
    }

    #[test]
    fn mask_rules_differ_only_in_selection() {
        let (params, cfg, data) = setup();
        let mut pcfg = PurifyConfig::new(&cfg, 19);
        pcfg.saliency.m = 4;
        let (_, none_rec) =
            purify_sample_with_rule(&params, &cfg, &data[0], &pcfg, MaskRule::NoMask, &Sequential).unwrap();
        assert!(none_rec.mask_idx.is_empty());
        let (_, rand_rec) =
            purify_sample_with_rule(&params, &cfg, &data[0], &pcfg, MaskRule::Random { seed: 5 }, &Sequential)
                .unwrap();
        assert_eq!(rand_rec.mask_idx.len(), 4);
        let mut sorted = rand_rec.mask_idx.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 4, "random mask indices must be distinct");
        // Random rule is per-sample deterministic.
        let (_, rand_rec2) =
            purify_sample_with_rule(&params, &cfg, &data[0], &pcfg, MaskRule::Random { seed: 5 }, &Sequential)
                .unwrap();
        assert_eq!(rand_rec.mask_idx, rand_rec2.mask_idx);
    }

    #[test]
    fn invalid_rho_rejected() {
        let (params, cfg, data) = setup();
        let mut pcfg = PurifyConfig::new(&cfg, 23);
        pcfg.rho = 1.5;
        assert!(purify_sample(&params, &cfg, &data[0], &pcfg, &Sequential).is_err());
    }
}
