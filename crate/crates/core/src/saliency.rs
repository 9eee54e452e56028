//! Fisher-weighted saliency of visual tokens.
//!
//! For each visual token i the saliency is the quadratic form
//! s_i = 1/2 · Δe_iᵀ (Σ_t J_{t,i}ᵀ F_t J_{t,i}) Δe_i, where Δe_i is the
//! displacement of the token's embedding from e_mask, J_{t,i} is the
//! Jacobian of generation-position t's logits with respect to that
//! embedding, and F_t = diag(p_t) − p_t p_tᵀ is the per-position Fisher of
//! the model's predictive distribution. This measures, to second order, how
//! much masking token i would move the model's first-step predictions (in
//! KL). The exact form is tractable at toy scale and serves as the oracle;
//! the production path is a Hutchinson-style probe estimator that needs one
//! reverse pass per probe.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{forward_from_e0, stage_params, ModelConfig, ModelParams};
use crate::rng::{DetRng, Domain};
use crate::runner::Runner;
use crate::tensor::{softmax_row, NodeId, Tape, Tensor};

/// How probe vectors with covariance F are drawn.
///
/// `GaussianFisher` is the literal construction q = F^{1/2}·ε through a
/// symmetric eigendecomposition of each position's Fisher matrix.
/// `CategoricalScore` draws y ~ p and uses the score q = e_y − p, whose
/// covariance is exactly F at O(V) cost per position; the estimator only
/// ever uses the probe covariance, so both kinds converge to the same
/// scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    GaussianFisher,
    CategoricalScore,
}

/// Probe-estimator settings. `vocab_topk = None` keeps the full vocabulary;
/// `Some(k)` restricts probes and the weighted logit sum to the k highest
/// logits per generation position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    pub m: usize,
    pub probe_kind: ProbeKind,
    pub vocab_topk: Option<usize>,
    pub seed: u64,
}

impl SaliencyConfig {
    pub fn new(seed: u64) -> Self {
        SaliencyConfig { m: 512, probe_kind: ProbeKind::CategoricalScore, vocab_topk: None, seed }
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        if self.m == 0 {
            return Err(CoreError::InvalidConfig { detail: String::from("probe count must be at least 1") });
        }
        if let Some(k) = self.vocab_topk {
            if k == 0 || k > vocab {
                return Err(CoreError::InvalidConfig {
                    detail: format!("vocab_topk {k} outside 1..={vocab}"),
                });
            }
        }
        Ok(())
    }
}

/// Estimated per-token saliency. `variance[i]` is the estimated variance of
/// the mean `scores[i]` (sample variance of per-probe contributions over m),
/// the diagnostic behind the unbiasedness and 1/m-shrinkage checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyScores {
    pub scores: Vec<f64>,
    pub probe_count: usize,
    pub variance: Vec<f64>,
}

// ── Fisher matrix ──────────────────────────────────────────────────────────

/// Fisher information of a categorical distribution in logit space:
/// F = diag(p) − p·pᵀ. Symmetric, PSD, rows sum to zero.
pub fn fisher(p: &[f64]) -> Result<Tensor> {
    check_simplex(p)?;
    let v = p.len();
    let mut out = Tensor::zeros(v, v);
    for i in 0..v {
        for j in 0..v {
            let mut x = -p[i] * p[j];
            if i == j {
                x += p[i];
            }
            out.data[i * v + j] = x;
        }
    }
    Ok(out)
}

/// The quadratic form yᵀ F y with F = diag(p) − p·pᵀ, evaluated without
/// materializing F: Σ p_v y_v² − (Σ p_v y_v)². This is the variance of y
/// under p, hence never negative.
pub fn fisher_quadratic_form(p: &[f64], y: &[f64]) -> f64 {
    let mut e_y2 = 0.0;
    let mut e_y = 0.0;
    for (pv, yv) in p.iter().zip(y) {
        e_y2 += pv * yv * yv;
        e_y += pv * yv;
    }
    (e_y2 - e_y * e_y).max(0.0)
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(CoreError::Domain { what: "probability vector", detail: String::from("empty") });
    }
    let mut sum = 0.0;
    for &x in p {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(CoreError::Domain {
                what: "probability vector",
                detail: format!("entry {x} not a finite non-negative number"),
            });
        }
        sum += x;
    }
    if libm::fabs(sum - 1.0) > 1e-9 {
        return Err(CoreError::Domain {
            what: "probability vector",
            detail: format!("sums to {sum}, not 1"),
        });
    }
    Ok(())
}

// ── embedding displacement ─────────────────────────────────────────────────

/// Δe_i: the i-th row of the visual embedding block minus e_mask. Masking
/// token i moves the input by exactly −Δe_i, which is why the quadratic form
/// in Δe_i predicts the KL effect of the mask.
pub fn delta_e(params: &ModelParams, e_v: &Tensor, i: usize) -> Result<Vec<f64>> {
    if i >= e_v.rows {
        return Err(CoreError::IndexOutOfRange { what: "visual token", index: i, len: e_v.rows });
    }
    if e_v.cols != params.mask_embed.cols {
        return Err(CoreError::Layout { what: "embedding width", expected: params.mask_embed.cols, got: e_v.cols });
    }
    Ok(e_v.row(i).iter().zip(params.mask_embed.row(0)).map(|(a, b)| a - b).collect())
}

// ── generation-logit tape ──────────────────────────────────────────────────

/// A taped forward pass from a full embedding matrix E0 whose visual rows
/// are a differentiable leaf; `logits` holds the generation segment only.
struct GenTape {
    tape: Tape,
    ev: NodeId,
    logits: NodeId,
}

fn gen_logits_tape(params: &ModelParams, cfg: &ModelConfig, e0: &Tensor) -> Result<GenTape> {
    let lay = cfg.layout();
    if e0.rows != lay.seq_len() || e0.cols != cfg.dim {
        return Err(CoreError::Layout { what: "embedding rows", expected: lay.seq_len(), got: e0.rows });
    }
    let mut tape = Tape::new();
    let tp = stage_params(&mut tape, params, false);
    let mut ev_leaf = Tensor::zeros(lay.l_v, cfg.dim);
    ev_leaf.data.copy_from_slice(&e0.data[..lay.l_v * cfg.dim]);
    ev_leaf.requires_grad = true;
    let ev = tape.leaf(ev_leaf);
    let rest_rows = lay.seq_len() - lay.l_v;
    let mut rest_leaf = Tensor::zeros(rest_rows, cfg.dim);
    rest_leaf.data.copy_from_slice(&e0.data[lay.l_v * cfg.dim..]);
    let rest = tape.leaf(rest_leaf);
    let whole = tape.concat_rows(&[ev, rest])?;
    let all_logits = forward_from_e0(&mut tape, &tp, whole, cfg)?;
    let logits = tape.slice_rows(all_logits, lay.l_prompt(), lay.t_gen)?;
    Ok(GenTape { tape, ev, logits })
}

fn gen_probs(logits: &Tensor) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(logits.rows);
    for t in 0..logits.rows {
        let mut p = vec![0.0; logits.cols];
        softmax_row(logits.row(t), &mut p);
        out.push(p);
    }
    out
}

// ── exact oracle ───────────────────────────────────────────────────────────

/// Exact Jacobians of the generation logits with respect to the visual
/// embedding block: one V×(L_v·d) matrix per generation position, built row
/// by row with one reverse pass per logit. Tractable only at toy scale.
pub fn exact_jacobian(params: &ModelParams, cfg: &ModelConfig, e0: &Tensor) -> Result<Vec<Tensor>> {
    let lay = cfg.layout();
    let v = cfg.vocab_size;
    let width = lay.l_v * cfg.dim;
    let mut gt = gen_logits_tape(params, cfg, e0)?;
    let mut seed = vec![0.0; lay.t_gen * v];
    let mut out = Vec::with_capacity(lay.t_gen);
    for t in 0..lay.t_gen {
        let mut jt = Tensor::zeros(v, width);
        for tok in 0..v {
            seed[t * v + tok] = 1.0;
            gt.tape.backward_from(gt.logits, &seed)?;
            seed[t * v + tok] = 0.0;
            let g = gt.tape.grad(gt.ev).ok_or(CoreError::Domain {
                what: "jacobian pass",
                detail: String::from("visual leaf received no gradient"),
            })?;
            jt.row_mut(tok).copy_from_slice(g);
        }
        out.push(jt);
    }
    Ok(out)
}

/// Exact saliency of every visual token: s_i = 1/2 Σ_t (J_{t,i}Δe_i)ᵀ F_t
/// (J_{t,i}Δe_i), sharing one Jacobian construction across tokens.
pub fn exact_all_saliency(params: &ModelParams, cfg: &ModelConfig, e0: &Tensor) -> Result<Vec<f64>> {
    let lay = cfg.layout();
    let d = cfg.dim;
    let jac = exact_jacobian(params, cfg, e0)?;
    let logits = crate::model::logits_from_embeddings(params, cfg, e0)?;
    let probs = gen_probs(&Tensor::from_vec(
        lay.t_gen,
        cfg.vocab_size,
        logits.data[lay.l_prompt() * cfg.vocab_size..].to_vec(),
    ));
    let ev = Tensor::from_vec(lay.l_v, d, e0.data[..lay.l_v * d].to_vec());
    let mut scores = vec![0.0; lay.l_v];
    let mut y = vec![0.0; cfg.vocab_size];
    for i in 0..lay.l_v {
        let de = delta_e(params, &ev, i)?;
        let mut s = 0.0;
        for (jt, p) in jac.iter().zip(&probs) {
            for (tok, yt) in y.iter_mut().enumerate() {
                let row = &jt.row(tok)[i * d..(i + 1) * d];
                *yt = row.iter().zip(&de).map(|(a, b)| a * b).sum();
            }
            s += 0.5 * fisher_quadratic_form(p, &y);
        }
        scores[i] = s;
    }
    Ok(scores)
}

/// Exact saliency of a single visual token. Builds the full Jacobian, so
/// prefer [`exact_all_saliency`] when several tokens are needed.
pub fn exact_token_saliency(params: &ModelParams, cfg: &ModelConfig, e0: &Tensor, i: usize) -> Result<f64> {
    let lay = cfg.layout();
    if i >= lay.l_v {
        return Err(CoreError::IndexOutOfRange { what: "visual token", index: i, len: lay.l_v });
    }
    Ok(exact_all_saliency(params, cfg, e0)?[i])
}

// ── KL curvature ───────────────────────────────────────────────────────────

/// Measures how well the Fisher quadratic form predicts the actual KL
/// movement of the generation distributions under a small visual-embedding
/// perturbation s·ΔE_v. Returns (actual Σ_t KL(p_t ∥ p_t'), predicted
/// 1/2·vec(sΔE_v)ᵀ JᵀFJ vec(sΔE_v)); their gap shrinks like o(s²).
pub fn kl_curvature_check(
    params: &ModelParams,
    cfg: &ModelConfig,
    e0: &Tensor,
    delta_ev: &Tensor,
    s: f64,
) -> Result<(f64, f64)> {
    let lay = cfg.layout();
    let d = cfg.dim;
    let v = cfg.vocab_size;
    if delta_ev.rows != lay.l_v || delta_ev.cols != d {
        return Err(CoreError::Layout { what: "perturbation rows", expected: lay.l_v, got: delta_ev.rows });
    }
    let base_logits = crate::model::logits_from_embeddings(params, cfg, e0)?;
    let mut moved = e0.clone();
    for idx in 0..lay.l_v * d {
        moved.data[idx] += s * delta_ev.data[idx];
    }
    let moved_logits = crate::model::logits_from_embeddings(params, cfg, &moved)?;
    let mut actual = 0.0;
    for t in 0..lay.t_gen {
        let row = lay.l_prompt() + t;
        actual += kl_from_logits(base_logits.row(row), moved_logits.row(row));
    }

    let jac = exact_jacobian(params, cfg, e0)?;
    let probs = gen_probs(&Tensor::from_vec(
        lay.t_gen,
        v,
        base_logits.data[lay.l_prompt() * v..].to_vec(),
    ));
    let dir: Vec<f64> = delta_ev.data.iter().map(|x| s * x).collect();
    let mut predicted = 0.0;
    let mut y = vec![0.0; v];
    for (jt, p) in jac.iter().zip(&probs) {
        for (tok, yt) in y.iter_mut().enumerate() {
            *yt = jt.row(tok).iter().zip(&dir).map(|(a, b)| a * b).sum();
        }
        predicted += 0.5 * fisher_quadratic_form(p, &y);
    }
    Ok((actual, predicted))
}

/// KL(p ∥ q) for two logit rows, via stabilized log-softmax on each side.
fn kl_from_logits(a: &[f64], b: &[f64]) -> f64 {
    let (la, lb) = (log_softmax(a), log_softmax(b));
    let mut kl = 0.0;
    for (xa, xb) in la.iter().zip(&lb) {
        kl += libm::exp(*xa) * (xa - xb);
    }
    kl.max(0.0)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + libm::log(row.iter().map(|&x| libm::exp(x - mx)).sum::<f64>());
    row.iter().map(|&x| x - lse).collect()
}

// ── Hutchinson probe estimator ─────────────────────────────────────────────

/// Per-position probe context: the active (possibly truncated) vocabulary,
/// its renormalized distribution, and for Gaussian probes the symmetric
/// square-root factors of its Fisher matrix.
struct ProbeCtx {
    active: Vec<usize>,
    p: Vec<f64>,
    eig: Option<(Vec<f64>, Vec<f64>)>, // (sqrt eigenvalues, eigenvectors row-major)
}

fn probe_contexts(
    logits: &Tensor,
    lay_t: usize,
    v: usize,
    l_prompt: usize,
    scfg: &SaliencyConfig,
) -> Result<Vec<ProbeCtx>> {
    let k = scfg.vocab_topk.unwrap_or(v);
    let mut out = Vec::with_capacity(lay_t);
    for t in 0..lay_t {
        let row = logits.row(l_prompt + t);
        let active = top_k_ids(row, k);
        let sel: Vec<f64> = active.iter().map(|&a| row[a]).collect();
        let mut p = vec![0.0; k];
        softmax_row(&sel, &mut p);
        let eig = match scfg.probe_kind {
            ProbeKind::CategoricalScore => None,
            ProbeKind::GaussianFisher => {
                let f = fisher(&p)?;
                let (mut lam, u) = jacobi_eig(f.data, k);
                for l in lam.iter_mut() {
                    *l = libm::sqrt(l.max(0.0));
                }
                Some((lam, u))
            }
        };
        out.push(ProbeCtx { active, p, eig });
    }
    Ok(out)
}

/// Vocabulary ids of the k largest logits, ordered by (logit desc, id asc).
fn top_k_ids(row: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..row.len()).collect();
    ids.sort_unstable_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Monte Carlo saliency: for each probe j draw per-position vectors q with
/// covariance F_t, seed one reverse pass with them, and accumulate
/// ŝ_i = (1/2m) Σ_j ⟨g_i^{(j)}, Δe_i⟩². Unbiased for the exact saliency;
/// probe j's randomness comes from its own derived stream, so results do
/// not depend on the runner's chunking.
pub fn hutchinson_saliency<R: Runner>(
    params: &ModelParams,
    cfg: &ModelConfig,
    e0: &Tensor,
    scfg: &SaliencyConfig,
    runner: &R,
) -> Result<SaliencyScores> {
    scfg.validate(cfg.vocab_size)?;
    let lay = cfg.layout();
    let d = cfg.dim;
    let v = cfg.vocab_size;
    let logits = crate::model::logits_from_embeddings(params, cfg, e0)?;
    let ctx = probe_contexts(&logits, lay.t_gen, v, lay.l_prompt(), scfg)?;
    let ev = Tensor::from_vec(lay.l_v, d, e0.data[..lay.l_v * d].to_vec());
    let mut deltas = Vec::with_capacity(lay.l_v);
    for i in 0..lay.l_v {
        deltas.push(delta_e(params, &ev, i)?);
    }

    const CHUNK: usize = 32;
    let m = scfg.m;
    let chunks = m.div_ceil(CHUNK);
    let parts = runner.map_indexed(chunks, &|c| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut gt = gen_logits_tape(params, cfg, e0)?;
        let mut sums = vec![0.0; lay.l_v];
        let mut sq = vec![0.0; lay.l_v];
        let mut seed = vec![0.0; lay.t_gen * v];
        for j in (c * CHUNK)..(m.min((c + 1) * CHUNK)) {
            let mut rng = DetRng::derive(scfg.seed, Domain::Probe, j as u64);
            for x in seed.iter_mut() {
                *x = 0.0;
            }
            for (t, pc) in ctx.iter().enumerate() {
                draw_probe(pc, scfg.probe_kind, &mut rng, &mut seed[t * v..(t + 1) * v]);
            }
            gt.tape.backward_from(gt.logits, &seed)?;
            let g = gt.tape.grad(gt.ev).ok_or(CoreError::Domain {
                what: "probe pass",
                detail: String::from("visual leaf received no gradient"),
            })?;
            for (i, de) in deltas.iter().enumerate() {
                let dot: f64 = g[i * d..(i + 1) * d].iter().zip(de).map(|(a, b)| a * b).sum();
                let contrib = 0.5 * dot * dot;
                sums[i] += contrib;
                sq[i] += contrib * contrib;
            }
        }
        Ok((sums, sq))
    });

    let mut sums = vec![0.0; lay.l_v];
    let mut sq = vec![0.0; lay.l_v];
    for part in parts {
        let (s, q) = part?;
        for i in 0..lay.l_v {
            sums[i] += s[i];
            sq[i] += q[i];
        }
    }
    let mf = m as f64;
    let scores: Vec<f64> = sums.iter().map(|s| s / mf).collect();
    let variance: Vec<f64> = scores
        .iter()
        .zip(&sq)
        .map(|(mean, q)| {
            if m < 2 {
                0.0
            } else {
                let sample_var = ((q - mf * mean * mean) / (mf - 1.0)).max(0.0);
                sample_var / mf
            }
        })
        .collect();
    Ok(SaliencyScores { scores, probe_count: m, variance })
}

/// Writes one probe with covariance F into `out` (full-vocabulary layout,
/// zeros outside the active set).
fn draw_probe(pc: &ProbeCtx, kind: ProbeKind, rng: &mut DetRng, out: &mut [f64]) {
    let k = pc.active.len();
    match kind {
        ProbeKind::CategoricalScore => {
            let y = rng.categorical(&pc.p);
            for (a, &id) in pc.active.iter().enumerate() {
                out[id] = -pc.p[a];
                if a == y {
                    out[id] += 1.0;
                }
            }
        }
        ProbeKind::GaussianFisher => {
            let (lam_sqrt, u) = pc.eig.as_ref().expect("gaussian context carries eigendecomposition");
            let eps: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
            // q = U diag(√λ) Uᵀ ε
            let mut z = vec![0.0; k];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, e) in eps.iter().enumerate() {
                    acc += u[i * k + j] * e;
                }
                *zj = acc * lam_sqrt[j];
            }
            for (i, &id) in pc.active.iter().enumerate() {
                let mut acc = 0.0;
                for (j, zj) in z.iter().enumerate() {
                    acc += u[i * k + j] * zj;
                }
                out[id] = acc;
            }
        }
    }
}

// ── symmetric eigendecomposition ───────────────────────────────────────────

/// Cyclic Jacobi eigendecomposition of a symmetric n×n matrix (row-major).
/// Returns (eigenvalues, eigenvectors row-major with column j the j-th
/// eigenvector): A = U diag(λ) Uᵀ.
fn jacobi_eig(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![0.0; n * n];
    for i in 0..n {
        u[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    let tol = 1e-28 * scale;
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + libm::sqrt(1.0 + theta * theta))
                } else {
                    -1.0 / (-theta + libm::sqrt(1.0 + theta * theta))
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[p * n + i];
                    let aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
                for i in 0..n {
                    let uip = u[i * n + p];
                    let uiq = u[i * n + q];
                    u[i * n + p] = c * uip - s * uiq;
                    u[i * n + q] = s * uip + c * uiq;
                }
            }
        }
    }
    let lam: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    (lam, u)
}

// ── mask selection ─────────────────────────────────────────────────────────

/// Indices of the ⌊ρ·L_v⌋ highest-saliency visual tokens, ascending; score
/// ties resolve toward the smaller index. Invariant under positive
/// rescaling of all scores.
pub fn select_mask_indices(scores: &SaliencyScores, rho: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(CoreError::InvalidConfig { detail: format!("mask ratio {rho} outside [0, 1]") });
    }
    let l = scores.scores.len();
    let k = libm::floor(rho * l as f64) as usize;
    let mut ids: Vec<usize> = (0..l).collect();
    ids.sort_unstable_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids.sort_unstable();
    Ok(ids)
}
