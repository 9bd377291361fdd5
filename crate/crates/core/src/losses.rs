//! Contrastive and distillation losses over a memory-queue snapshot.
//!
//! Every loss is defined against the candidate set `{z⁺} ∪ M`: the
//! augmentation positive followed by the snapshot rows. Candidate 0 is
//! always `z⁺`, candidate `1 + k` is snapshot row `k`.
//!
//! The graph builders (`*_var`) take an anchor [`Var`] so gradients can flow
//! into whatever produced it; the plain functions wrap them for fixed
//! embeddings.

use serde::{Deserialize, Serialize};

use crate::encoder::{BoundEncoder, Encoded};
use crate::error::{Error, Result};
use crate::queue::Snapshot;
use crate::synthdata::{PatchBox, SynthImage};
use crate::tensor::{self, dot, Graph, Tensor, Var};

/// Which contrastive term anchors the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    Scl,
    #[default]
    Dscl,
}

/// What the patch crops are used for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchLoss {
    None,
    #[default]
    Pbsd,
    Multicrop,
}

/// Which backbone's feature map the ROI targets are pooled from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetBackbone {
    #[default]
    Online,
    Ema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_patches")]
    pub patches: usize,
    #[serde(default)]
    pub contrast: ContrastKind,
    #[serde(default)]
    pub patch_loss: PatchLoss,
    #[serde(default)]
    pub target: TargetSource,
    #[serde(default)]
    pub target_backbone: TargetBackbone,
    /// Area fraction range of the patch boxes.
    #[serde(default = "default_patch_scale")]
    pub patch_scale: (f64, f64),
    /// Side length patch crops are resized to before encoding.
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
}

fn default_temperature() -> f64 {
    0.07
}
fn default_alpha() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    1.5
}
fn default_patches() -> usize {
    5
}
fn default_patch_scale() -> (f64, f64) {
    (0.05, 0.6)
}
fn default_patch_size() -> usize {
    16
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            alpha: default_alpha(),
            lambda: default_lambda(),
            patches: default_patches(),
            contrast: ContrastKind::default(),
            patch_loss: PatchLoss::default(),
            target: TargetSource::default(),
            target_backbone: TargetBackbone::default(),
            patch_scale: default_patch_scale(),
            patch_size: default_patch_size(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be ≥ 0", self.lambda)));
        }
        if self.patches == 0 {
            return Err(Error::Config("patches per anchor must be ≥ 1".into()));
        }
        let (lo, hi) = self.patch_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("bad patch scale {:?}", self.patch_scale)));
        }
        if self.patch_size < 8 || self.patch_size % 8 != 0 {
            return Err(Error::Config(format!(
                "patch size {} must be a positive multiple of 8",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Gradient-probe mode matching this configuration.
    pub fn mode(&self) -> ContrastMode {
        match self.contrast {
            ContrastKind::Scl => ContrastMode::Scl,
            ContrastKind::Dscl => ContrastMode::Dscl { alpha: self.alpha },
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

/// Probability vector over `{z⁺} ∪ M`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDistribution {
    pub probs: Vec<f64>,
    pub temperature: f64,
}

impl SimilarityDistribution {
    pub fn p_plus(&self) -> f64 {
        self.probs[0]
    }

    /// Probability of snapshot row `k`.
    pub fn p_entry(&self, k: usize) -> f64 {
        self.probs[1 + k]
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// Per-positive weights of the decoupled loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositiveWeights {
    pub w_plus: f64,
    pub w_queue: f64,
}

impl PositiveWeights {
    /// `w⁺ = α(|P|+1)`, `w_t = (1−α)(|P|+1)/|P|`. With `|P| = 0` only the
    /// augmentation term remains and it gets weight 1.
    pub fn new(alpha: f64, num_positives: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        if num_positives == 0 {
            return Ok(Self {
                w_plus: 1.0,
                w_queue: 0.0,
            });
        }
        let p = num_positives as f64;
        let n = p + 1.0;
        let w_queue = (1.0 - alpha) * n / p;
        // Taking w⁺ as the complement keeps w⁺ + |P|·w_t == |P|+1 bit-exact;
        // it differs from α(|P|+1) by a few ulps at most.
        Ok(Self {
            w_plus: n - p * w_queue,
            w_queue,
        })
    }

    /// Target probabilities at the loss's stationary point:
    /// `(w⁺/(|P|+1), w_t/(|P|+1))`.
    pub fn targets(&self, num_positives: usize) -> (f64, f64) {
        let n = num_positives as f64 + 1.0;
        (self.w_plus / n, self.w_queue / n)
    }
}

/// SCL vs. DSCL, for the gradient-ratio probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ContrastMode {
    Scl,
    Dscl { alpha: f64 },
}

/// The `{z⁺} ∪ M` candidate set on one graph.
#[derive(Clone, Copy, Debug)]
pub struct Candidates {
    /// `[1 + |M|, d]` constant matrix.
    pub matrix: Var,
    pub len: usize,
}

impl Candidates {
    pub fn build(g: &mut Graph, aug_positive: &[f64], snapshot: &Snapshot) -> Result<Self> {
        if aug_positive.len() != snapshot.dim() {
            return Err(Error::ShapeMismatch {
                op: "candidates",
                left: vec![aug_positive.len()],
                right: vec![snapshot.dim()],
            });
        }
        let n = 1 + snapshot.len();
        let mut data = Vec::with_capacity(n * snapshot.dim());
        data.extend_from_slice(aug_positive);
        data.extend_from_slice(snapshot.matrix());
        let matrix = g.constant(Tensor::matrix(n, snapshot.dim(), data)?);
        Ok(Self { matrix, len: n })
    }

    /// Raw dot products `z_m · x` for every candidate.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.matvec(self.matrix, x)
    }
}

fn candidate_logits(aug_positive: &[f64], snapshot: &Snapshot, x: &[f64]) -> Vec<f64> {
    std::iter::once(dot(aug_positive, x))
        .chain((0..snapshot.len()).map(|k| dot(snapshot.row(k), x)))
        .collect()
}

/// `p(z_t | x)` over `{z⁺} ∪ M`, softmax of dot products over `τ`.
pub fn conditional_prob(
    anchor: &[f64],
    aug_positive: &[f64],
    snapshot: &Snapshot,
    temperature: f64,
) -> Result<SimilarityDistribution> {
    check_temperature(temperature)?;
    if anchor.len() != aug_positive.len() || anchor.len() != snapshot.dim() {
        return Err(Error::ShapeMismatch {
            op: "conditional_prob",
            left: vec![anchor.len()],
            right: vec![snapshot.dim()],
        });
    }
    let logits = candidate_logits(aug_positive, snapshot, anchor);
    Ok(SimilarityDistribution {
        probs: tensor::softmax(&logits, temperature),
        temperature,
    })
}

/// SCL from raw candidate logits (dot products, not yet divided by `τ`).
/// `positive[m]` flags the positives; candidate 0 is always one of them.
pub fn scl_from_logits(
    g: &mut Graph,
    logits: Var,
    positive: &[bool],
    temperature: f64,
) -> Result<Var> {
    let num = positive.iter().filter(|&&p| p).count() as f64;
    let q: Vec<f64> = positive.iter().map(|&p| if p { 1.0 / num } else { 0.0 }).collect();
    let logp = g.log_softmax(logits, temperature)?;
    let qv = g.constant(Tensor::vector(q));
    let s = g.dot(qv, logp)?;
    Ok(g.scale(s, -1.0))
}

/// Decoupled loss from raw candidate logits: `lse(s) − Σ_t (w_t/(|P|+1)) s_t`
/// with `s = logits/τ`. Candidate 0 is `z⁺`, the other flagged entries are
/// queue positives.
pub fn dscl_from_logits(
    g: &mut Graph,
    logits: Var,
    positive: &[bool],
    temperature: f64,
    alpha: f64,
) -> Result<Var> {
    check_temperature(temperature)?;
    let num_pos = positive.iter().skip(1).filter(|&&p| p).count();
    let (tp, tq) = PositiveWeights::new(alpha, num_pos)?.targets(num_pos);
    let q: Vec<f64> = positive
        .iter()
        .enumerate()
        .map(|(m, &p)| match (m, p) {
            (0, _) => tp,
            (_, true) => tq,
            _ => 0.0,
        })
        .collect();
    let s = g.scale(logits, 1.0 / temperature);
    let lse = g.logsumexp(s)?;
    let qv = g.constant(Tensor::vector(q));
    let lin = g.dot(qv, s)?;
    g.sub(lse, lin)
}

fn positive_flags(snapshot: &Snapshot, label: usize) -> Vec<bool> {
    std::iter::once(true)
        .chain(snapshot.labels().iter().map(|&l| l == label))
        .collect()
}

/// Supervised contrastive loss for one anchor:
/// `−1/(|P|+1) Σ_{t ∈ {z⁺} ∪ P} log p(z_t | z_i)`.
pub fn scl_loss_var(
    g: &mut Graph,
    anchor: Var,
    cands: &Candidates,
    snapshot: &Snapshot,
    label: usize,
    temperature: f64,
) -> Result<Var> {
    let logits = cands.logits(g, anchor)?;
    scl_from_logits(g, logits, &positive_flags(snapshot, label), temperature)
}

/// Decoupled loss for one anchor. `w_t` scales each positive's logit in the
/// numerator only; the denominator is the plain softmax normaliser.
pub fn dscl_loss_var(
    g: &mut Graph,
    anchor: Var,
    cands: &Candidates,
    snapshot: &Snapshot,
    label: usize,
    temperature: f64,
    alpha: f64,
) -> Result<Var> {
    let logits = cands.logits(g, anchor)?;
    dscl_from_logits(g, logits, &positive_flags(snapshot, label), temperature, alpha)
}

/// Cross-entropy `−Σ_t target_t · log p(z_t | x)` of a fixed target
/// distribution against the distribution induced by `x`.
pub fn distill_var(
    g: &mut Graph,
    x: Var,
    target: Var,
    cands: &Candidates,
    temperature: f64,
) -> Result<Var> {
    let logits = cands.logits(g, x)?;
    let logp = g.log_softmax(logits, temperature)?;
    let ce = g.dot(target, logp)?;
    Ok(g.scale(ce, -1.0))
}

/// Detached similarity distribution of `c` over the candidates.
pub fn target_var(g: &mut Graph, c: Var, cands: &Candidates, temperature: f64) -> Result<Var> {
    let c = g.detach(c);
    let logits = cands.logits(g, c)?;
    g.softmax(logits, temperature)
}

fn single_anchor<F>(anchor: &[f64], aug_positive: &[f64], snapshot: &Snapshot, f: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, Var, &Candidates) -> Result<Var>,
{
    let mut g = Graph::new();
    let cands = Candidates::build(&mut g, aug_positive, snapshot)?;
    let a = g.constant(Tensor::vector(anchor.to_vec()));
    let root = f(&mut g, a, &cands)?;
    g.scalar_value(root)
}

pub fn scl_loss(
    anchor: &[f64],
    aug_positive: &[f64],
    snapshot: &Snapshot,
    label: usize,
    temperature: f64,
) -> Result<f64> {
    check_temperature(temperature)?;
    single_anchor(anchor, aug_positive, snapshot, |g, a, c| {
        scl_loss_var(g, a, c, snapshot, label, temperature)
    })
}

pub fn dscl_loss(
    anchor: &[f64],
    aug_positive: &[f64],
    snapshot: &Snapshot,
    label: usize,
    temperature: f64,
    alpha: f64,
) -> Result<f64> {
    single_anchor(anchor, aug_positive, snapshot, |g, a, c| {
        dscl_loss_var(g, a, c, snapshot, label, temperature, alpha)
    })
}

/// `∂L_scl/∂z_i` with candidates held constant:
/// `(1/τ)[Σ_N z_j p_j + z⁺(p⁺ − 1/(|P|+1)) + Σ_P z_t(p_t − 1/(|P|+1))]`.
pub fn scl_anchor_gradient_analytic(
    anchor: &[f64],
    aug_positive: &[f64],
    snapshot: &Snapshot,
    label: usize,
    temperature: f64,
) -> Result<Vec<f64>> {
    let n = snapshot.count_of(label) as f64 + 1.0;
    anchor_gradient(anchor, aug_positive, snapshot, label, temperature, 1.0 / n, 1.0 / n)
}

/// Decoupled counterpart: positive targets `α` and `(1−α)/|P|`.
pub fn dscl_anchor_gradient_analytic(
    anchor: &[f64],
    aug_positive: &[f64],
    snapshot: &Snapshot,
    label: usize,
    temperature: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    let num_pos = snapshot.count_of(label);
    let (tp, tq) = PositiveWeights::new(alpha, num_pos)?.targets(num_pos);
    anchor_gradient(anchor, aug_positive, snapshot, label, temperature, tp, tq)
}

fn anchor_gradient(
    anchor: &[f64],
    aug_positive: &[f64],
    snapshot: &Snapshot,
    label: usize,
    temperature: f64,
    target_plus: f64,
    target_queue: f64,
) -> Result<Vec<f64>> {
    let p = conditional_prob(anchor, aug_positive, snapshot, temperature)?;
    let mut grad: Vec<f64> = aug_positive
        .iter()
        .map(|z| z * (p.p_plus() - target_plus))
        .collect();
    for (k, &l) in snapshot.labels().iter().enumerate() {
        let coef = if l == label {
            p.p_entry(k) - target_queue
        } else {
            p.p_entry(k)
        };
        for (gd, z) in grad.iter_mut().zip(snapshot.row(k)) {
            *gd += z * coef;
        }
    }
    grad.iter_mut().for_each(|v| *v /= temperature);
    Ok(grad)
}

/// `‖∂L/∂z_i|_{z⁺}‖ / Σ_{t∈P} ‖∂L/∂z_i|_{z_t}‖` for the given mode.
pub fn positive_gradient_ratio(
    anchor: &[f64],
    aug_positive: &[f64],
    snapshot: &Snapshot,
    label: usize,
    temperature: f64,
    mode: ContrastMode,
) -> Result<f64> {
    let positives = snapshot.positives_of(label);
    if positives.is_empty() {
        return Err(Error::UndefinedRatio(format!(
            "label {label} has no queue positives"
        )));
    }
    let num_pos = positives.len();
    let (tp, tq) = match mode {
        ContrastMode::Scl => {
            let t = 1.0 / (num_pos as f64 + 1.0);
            (t, t)
        }
        ContrastMode::Dscl { alpha } => PositiveWeights::new(alpha, num_pos)?.targets(num_pos),
    };
    let p = conditional_prob(anchor, aug_positive, snapshot, temperature)?;
    let norm = |z: &[f64]| dot(z, z).sqrt();
    let plus = norm(aug_positive) * (p.p_plus() - tp).abs();
    let rest: f64 = positives
        .iter()
        .map(|&k| norm(snapshot.row(k)) * (p.p_entry(k) - tq).abs())
        .sum();
    if rest == 0.0 {
        return Err(Error::UndefinedRatio("queue-positive gradient norms are all zero".into()));
    }
    Ok(plus / rest)
}

/// Detached PBSD target `p(· | c)`.
pub fn pbsd_target_distribution(
    c: &[f64],
    aug_positive: &[f64],
    snapshot: &Snapshot,
    temperature: f64,
) -> Result<SimilarityDistribution> {
    conditional_prob(c, aug_positive, snapshot, temperature)
}

/// Where the PBSD distillation target comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// ROI-pooled patch features `c_i[j]`.
    #[default]
    Roi,
    /// The global-view embedding `z_i`, for every patch.
    Global,
}

/// One anchor's PBSD term, averaged over boxes.
///
/// `target_enc`/`target_map` produce the ROI targets (they may belong to the
/// online or the EMA encoder); `student` embeds the crops. Targets are
/// detached, so only `student` receives gradient.
#[allow(clippy::too_many_arguments)]
pub fn pbsd_loss_var(
    g: &mut Graph,
    target_enc: &BoundEncoder,
    target_map: Var,
    global_z: Var,
    student: &BoundEncoder,
    view: &SynthImage,
    boxes: &[PatchBox],
    cands: &Candidates,
    temperature: f64,
    patch_size: usize,
    source: TargetSource,
) -> Result<Var> {
    if boxes.is_empty() {
        return Err(Error::Contract("PBSD needs at least one box".into()));
    }
    let mut terms = Vec::with_capacity(boxes.len());
    for b in boxes {
        let c = match source {
            TargetSource::Roi => target_enc.roi_pool_project(g, target_map, b)?,
            TargetSource::Global => global_z,
        };
        let target = target_var(g, c, cands, temperature)?;
        let s = student.embed_patch(g, view, b, patch_size)?;
        terms.push((distill_var(g, s, target, cands, temperature)?, 1.0 / boxes.len() as f64));
    }
    g.weighted_sum(&terms)
}

/// Multi-crop baseline: every crop embedding is scored as an extra anchor
/// with the decoupled loss, and the `1 + L` anchor losses are averaged.
#[allow(clippy::too_many_arguments)]
pub fn multicrop_loss_var(
    g: &mut Graph,
    anchor: Var,
    student: &BoundEncoder,
    view: &SynthImage,
    boxes: &[PatchBox],
    cands: &Candidates,
    snapshot: &Snapshot,
    label: usize,
    temperature: f64,
    alpha: f64,
    patch_size: usize,
) -> Result<Var> {
    let w = 1.0 / (1 + boxes.len()) as f64;
    let mut terms = vec![(
        dscl_loss_var(g, anchor, cands, snapshot, label, temperature, alpha)?,
        w,
    )];
    for b in boxes {
        let s = student.embed_patch(g, view, b, patch_size)?;
        terms.push((dscl_loss_var(g, s, cands, snapshot, label, temperature, alpha)?, w));
    }
    g.weighted_sum(&terms)
}

/// Value-level PBSD loss for fixed encoder parameters.
pub fn pbsd_loss(
    params: &crate::encoder::EncoderParams,
    view: &SynthImage,
    boxes: &[PatchBox],
    aug_positive: &[f64],
    snapshot: &Snapshot,
    temperature: f64,
    patch_size: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let enc = params.bind(&mut g, false);
    let Encoded { u, v } = enc.encode(&mut g, view)?;
    let z = enc.project(&mut g, v)?;
    let cands = Candidates::build(&mut g, aug_positive, snapshot)?;
    let root = pbsd_loss_var(
        &mut g,
        &enc,
        u,
        z,
        &enc,
        view,
        boxes,
        &cands,
        temperature,
        patch_size,
        TargetSource::Roi,
    )?;
    g.scalar_value(root)
}

/// Value-level multi-crop loss for fixed encoder parameters.
#[allow(clippy::too_many_arguments)]
pub fn multicrop_loss(
    params: &crate::encoder::EncoderParams,
    view: &SynthImage,
    boxes: &[PatchBox],
    aug_positive: &[f64],
    snapshot: &Snapshot,
    label: usize,
    temperature: f64,
    alpha: f64,
    patch_size: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let enc = params.bind(&mut g, false);
    let e = enc.encode(&mut g, view)?;
    let z = enc.project(&mut g, e.v)?;
    let cands = Candidates::build(&mut g, aug_positive, snapshot)?;
    let root = multicrop_loss_var(
        &mut g,
        z,
        &enc,
        view,
        boxes,
        &cands,
        snapshot,
        label,
        temperature,
        alpha,
        patch_size,
    )?;
    g.scalar_value(root)
}

/// `mean_i (L_dscl,i + λ·L_pbsd,i)` from precomputed per-anchor parts.
pub fn overall_loss(dscl: &[f64], pbsd: &[f64], lambda: f64) -> Result<f64> {
    if dscl.len() != pbsd.len() || dscl.is_empty() {
        return Err(Error::Contract(format!(
            "overall_loss needs equal, non-empty part lists ({} vs {})",
            dscl.len(),
            pbsd.len()
        )));
    }
    let total: f64 = dscl.iter().zip(pbsd).map(|(d, p)| d + lambda * p).sum();
    Ok(total / dscl.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_snapshot(rng: &mut impl Rng, m: usize, d: usize, classes: usize) -> Snapshot {
        let rows: Vec<Vec<f64>> = (0..m).map(|_| unit(rng, d)).collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
        Snapshot::from_rows(&rows, &labels, d).unwrap()
    }

    #[test]
    fn conditional_prob_examples() {
        let d = 3;
        let a = vec![1.0, 0.0, 0.0];
        let zp = vec![0.0, 1.0, 0.0];
        let p = conditional_prob(&a, &zp, &Snapshot::empty(d), 0.07).unwrap();
        assert_eq!(p.probs, vec![1.0]);

        let snap = Snapshot::from_rows(&[vec![0.0, 0.0, 1.0], vec![0.0, -1.0, 0.0]], &[0, 1], d)
            .unwrap();
        let p = conditional_prob(&a, &zp, &snap, 0.07).unwrap();
        for v in &p.probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // logits [1, 0] at τ = 1
        let snap = Snapshot::from_rows(&[vec![0.0, 1.0, 0.0]], &[0], d).unwrap();
        let p = conditional_prob(&a, &a, &snap, 1.0).unwrap();
        assert!((p.probs[0] - 0.7311).abs() < 1e-4);
        assert!((p.probs[1] - 0.2689).abs() < 1e-4);

        assert!(matches!(
            conditional_prob(&a, &a, &snap, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scl_boundaries() {
        let a = vec![1.0, 0.0];
        assert_eq!(scl_loss(&a, &a, &Snapshot::empty(2), 0, 0.07).unwrap(), 0.0);
        // all logits equal → uniform over m + 1 candidates
        let m = 7;
        let rows = vec![vec![0.0, 1.0]; m];
        let labels: Vec<usize> = (0..m).map(|k| if k < 3 { 4 } else { 1 }).collect();
        let snap = Snapshot::from_rows(&rows, &labels, 2).unwrap();
        let l = scl_loss(&a, &[0.0, -1.0], &snap, 4, 0.5).unwrap();
        assert!((l - ((m + 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn weight_identity() {
        for p in 1..40 {
            for i in 0..=20 {
                let alpha = i as f64 / 20.0;
                let w = PositiveWeights::new(alpha, p).unwrap();
                let total = w.w_plus + p as f64 * w.w_queue;
                assert_eq!(total, p as f64 + 1.0);
                assert!((w.w_plus - alpha * (p as f64 + 1.0)).abs() <= 1e-12 * p as f64);
            }
        }
        let w = PositiveWeights::new(0.3, 0).unwrap();
        assert_eq!((w.w_plus, w.w_queue), (1.0, 0.0));
        assert!(PositiveWeights::new(1.1, 2).is_err());
    }

    #[test]
    fn dscl_alpha_one_keeps_only_augmentation_weight() {
        let w = PositiveWeights::new(1.0, 6).unwrap();
        assert_eq!(w.w_plus, 7.0);
        assert_eq!(w.w_queue, 0.0);
    }

    #[test]
    fn dscl_reduces_to_scl() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let d = rng.gen_range(2..9);
            let m = rng.gen_range(1..30);
            let snap = random_snapshot(&mut rng, m, d, 3);
            let (a, zp) = (unit(&mut rng, d), unit(&mut rng, d));
            let label = rng.gen_range(0..3);
            let alpha = 1.0 / (snap.count_of(label) as f64 + 1.0);
            let s = scl_loss(&a, &zp, &snap, label, 0.1).unwrap();
            let ds = dscl_loss(&a, &zp, &snap, label, 0.1, alpha).unwrap();
            assert!((s - ds).abs() <= 1e-12 * s.abs().max(1.0), "{s} vs {ds}");
        }
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        // Empty P and N: gradient is z⁺(1 − 1) = 0.
        let a = vec![0.6, 0.8];
        let g = scl_anchor_gradient_analytic(&a, &[1.0, 0.0], &Snapshot::empty(2), 0, 0.1).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn analytic_gradient_matches_autodiff() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let d = 6;
            let snap = random_snapshot(&mut rng, 20, d, 4);
            let (a, zp) = (unit(&mut rng, d), unit(&mut rng, d));
            let label = rng.gen_range(0..4);
            let mut g = Graph::new();
            let cands = Candidates::build(&mut g, &zp, &snap).unwrap();
            let av = g.param(Tensor::vector(a.clone()));
            let l = scl_loss_var(&mut g, av, &cands, &snap, label, 0.2).unwrap();
            g.backward(l).unwrap();
            let analytic = scl_anchor_gradient_analytic(&a, &zp, &snap, label, 0.2).unwrap();
            for (x, y) in g.grad(av).unwrap().iter().zip(&analytic) {
                assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn ratio_requires_positives() {
        let snap = Snapshot::from_rows(&[vec![1.0, 0.0]], &[1], 2).unwrap();
        let r = positive_gradient_ratio(&[1.0, 0.0], &[0.0, 1.0], &snap, 0, 0.1, ContrastMode::Scl);
        assert!(matches!(r, Err(Error::UndefinedRatio(_))));
    }

    #[test]
    fn pbsd_target_examples() {
        let c = vec![1.0, 0.0, 0.0];
        let snap = Snapshot::from_rows(&[vec![0.0, 0.0, 1.0]], &[0], 3).unwrap();
        let t = pbsd_target_distribution(&c, &[0.0, 1.0, 0.0], &snap, 0.07).unwrap();
        assert_eq!(t.probs, vec![0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let snap = random_snapshot(&mut rng, 10, 4, 2);
        let c = snap.row(3).to_vec();
        let zp = unit(&mut rng, 4);
        let warm = pbsd_target_distribution(&c, &zp, &snap, 0.07).unwrap();
        let cold = pbsd_target_distribution(&c, &zp, &snap, 0.01).unwrap();
        let argmax = |p: &[f64]| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        assert_eq!(argmax(&warm.probs), 4);
        assert_eq!(argmax(&cold.probs), 4);
        assert!(cold.p_entry(3) > warm.p_entry(3));
    }

    #[test]
    fn distillation_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let snap = random_snapshot(&mut rng, 12, 5, 3);
        let zp = unit(&mut rng, 5);
        let x = unit(&mut rng, 5);
        let mut g = Graph::new();
        let cands = Candidates::build(&mut g, &zp, &snap).unwrap();
        let xv = g.constant(Tensor::vector(x.clone()));
        let target = target_var(&mut g, xv, &cands, 0.3).unwrap();
        let ce = distill_var(&mut g, xv, target, &cands, 0.3).unwrap();
        let entropy = conditional_prob(&x, &zp, &snap, 0.3).unwrap().entropy();
        assert!((g.scalar_value(ce).unwrap() - entropy).abs() < 1e-12);

        // any other student has higher cross-entropy
        let y = unit(&mut rng, 5);
        let yv = g.constant(Tensor::vector(y));
        let ce2 = distill_var(&mut g, yv, target, &cands, 0.3).unwrap();
        assert!(g.scalar_value(ce2).unwrap() > entropy);
    }

    #[test]
    fn overall_loss_weights_parts() {
        let l = overall_loss(&[1.0, 3.0], &[0.5, 0.25], 1.5).unwrap();
        assert!((l - (1.0 + 0.75 + 3.0 + 0.375) / 2.0).abs() < 1e-15);
        assert_eq!(overall_loss(&[2.0, 4.0], &[9.0, 9.0], 0.0).unwrap(), 3.0);
        assert!(overall_loss(&[], &[], 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            temperature: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            alpha: 2.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
