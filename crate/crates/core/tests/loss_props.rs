//! Loss values and gradients against brute-force oracles written directly
//! from the definitions, plus the structural invariants of the losses.

use ltcl::encoder::{roi_cells, BoundEncoder, EncoderConfig, EncoderParams};
use ltcl::losses::{
    conditional_prob, distill_var, dscl_anchor_gradient_analytic, dscl_loss, dscl_loss_var,
    multicrop_loss, pbsd_loss, scl_anchor_gradient_analytic, scl_loss, scl_loss_var, target_var,
    Candidates, PositiveWeights,
};
use ltcl::queue::Snapshot;
use ltcl::synthdata::{crop_resize, PatchBox, SynthImage};
use ltcl::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TAU: f64 = 0.07;

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

struct Case {
    anchor: Vec<f64>,
    aug: Vec<f64>,
    snap: Snapshot,
    label: usize,
}

fn case(seed: u64, max_m: usize, max_d: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..=max_d);
    let m = rng.gen_range(0..=max_m);
    let classes = rng.gen_range(1..5);
    let rows: Vec<Vec<f64>> = (0..m).map(|_| unit(&mut rng, d)).collect();
    let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
    Case {
        anchor: unit(&mut rng, d),
        aug: unit(&mut rng, d),
        snap: Snapshot::from_rows(&rows, &labels, d).unwrap(),
        label: rng.gen_range(0..classes),
    }
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log p(z_t | x)` for every candidate, by direct enumeration.
fn brute_log_probs(x: &[f64], aug: &[f64], snap: &Snapshot, tau: f64) -> Vec<f64> {
    let cands: Vec<&[f64]> = std::iter::once(aug)
        .chain((0..snap.len()).map(|k| snap.row(k)))
        .collect();
    let s: Vec<f64> = cands.iter().map(|z| dotp(z, x) / tau).collect();
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = s.iter().map(|v| (v - max).exp()).sum();
    s.iter().map(|v| v - max - denom.ln()).collect()
}

fn positives(snap: &Snapshot, label: usize) -> Vec<usize> {
    (0..snap.len()).filter(|&k| snap.labels()[k] == label).collect()
}

fn brute_scl(c: &Case, x: &[f64]) -> f64 {
    let lp = brute_log_probs(x, &c.aug, &c.snap, TAU);
    let pos = positives(&c.snap, c.label);
    let n = pos.len() as f64 + 1.0;
    -(lp[0] + pos.iter().map(|&k| lp[1 + k]).sum::<f64>()) / n
}

/// `−Σ_t (w_t/(|P|+1)) log p_t`; the weights sum to one, so this is the
/// decoupled loss.
fn brute_dscl(c: &Case, x: &[f64], alpha: f64) -> f64 {
    let lp = brute_log_probs(x, &c.aug, &c.snap, TAU);
    let pos = positives(&c.snap, c.label);
    if pos.is_empty() {
        return -lp[0];
    }
    let p = pos.len() as f64;
    -(alpha * lp[0] + (1.0 - alpha) / p * pos.iter().map(|&k| lp[1 + k]).sum::<f64>())
}

fn brute_ce(target_x: &[f64], student: &[f64], c: &Case) -> f64 {
    let lt = brute_log_probs(target_x, &c.aug, &c.snap, TAU);
    let ls = brute_log_probs(student, &c.aug, &c.snap, TAU);
    -lt.iter().zip(&ls).map(|(t, s)| t.exp() * s).sum::<f64>()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Relative above 1, absolute below; losses near zero carry cancellation noise.
fn mixed(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn tiny_encoder(seed: u64) -> EncoderParams {
    let cfg = EncoderConfig {
        input_size: 16,
        in_channels: 3,
        widths: vec![4, 4, 8],
        hidden: 8,
        d_proj: 6,
    };
    let mut p = EncoderParams::init(&cfg, seed).unwrap();
    // Positive biases: with all-zero biases a dead network can project to the
    // zero vector, which has no direction to normalise.
    for t in p.tensors.iter_mut().filter(|t| t.shape().len() == 1) {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = 0.05 + 0.013 * i as f64;
        }
    }
    p
}

fn image(rng: &mut impl Rng, label: usize) -> SynthImage {
    let px = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
    SynthImage::from_pixels(px, 3, 16, label)
}

fn boxes(rng: &mut impl Rng, n: usize) -> Vec<PatchBox> {
    // Keep boxes that cover at least one cell of the 2×2 feature map.
    let mut out = Vec::new();
    while out.len() < n {
        let w = rng.gen_range(0.3..0.9);
        let h = rng.gen_range(0.3..0.9);
        let b = PatchBox {
            cx: rng.gen_range(w / 2.0..1.0 - w / 2.0),
            cy: rng.gen_range(h / 2.0..1.0 - h / 2.0),
            w,
            h,
        };
        if roi_cells(&b, 2, 2).is_ok() {
            out.push(b);
        }
    }
    out
}

/// Global embedding, ROI embeddings and crop embeddings, each on its own
/// graph so the oracle never shares a tape with the code under test.
fn encoder_views(
    params: &EncoderParams,
    img: &SynthImage,
    bs: &[PatchBox],
    patch: usize,
) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let enc = params.bind(&mut g, false);
    let e = enc.encode(&mut g, img).unwrap();
    let z = enc.project(&mut g, e.v).unwrap();
    let z = g.value(z).data().to_vec();
    let cs = bs
        .iter()
        .map(|b| {
            let v = enc.roi_pool_project(&mut g, e.u, b).unwrap();
            g.value(v).data().to_vec()
        })
        .collect();
    let ss = bs
        .iter()
        .map(|b| {
            let crop = crop_resize(img, b, patch);
            let mut g2 = Graph::new();
            let enc2 = params.bind(&mut g2, false);
            let x = BoundEncoder::image_var(&mut g2, &crop);
            let e2 = enc2.backbone(&mut g2, x).unwrap();
            let s = enc2.project(&mut g2, e2.v).unwrap();
            g2.value(s).data().to_vec()
        })
        .collect();
    (z, cs, ss)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scl_matches_enumeration(seed in any::<u64>()) {
        let c = case(seed, 64, 16);
        let got = scl_loss(&c.anchor, &c.aug, &c.snap, c.label, TAU).unwrap();
        prop_assert!(rel(got, brute_scl(&c, &c.anchor)) <= 1e-10);
    }

    #[test]
    fn dscl_matches_enumeration(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let c = case(seed, 64, 16);
        let got = dscl_loss(&c.anchor, &c.aug, &c.snap, c.label, TAU, alpha).unwrap();
        prop_assert!(rel(got, brute_dscl(&c, &c.anchor, alpha)) <= 1e-10);
    }

    #[test]
    fn dscl_at_cardinality_weight_is_scl(seed in any::<u64>()) {
        let c = case(seed, 64, 16);
        let p = c.snap.count_of(c.label);
        let alpha = 1.0 / (p as f64 + 1.0);
        let d = dscl_loss(&c.anchor, &c.aug, &c.snap, c.label, TAU, alpha).unwrap();
        let s = scl_loss(&c.anchor, &c.aug, &c.snap, c.label, TAU).unwrap();
        prop_assert!(rel(d, s) <= 1e-12, "{d} vs {s}");
    }

    #[test]
    fn losses_ignore_queue_order(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let c = case(seed, 64, 16);
        let mut perm: Vec<usize> = (0..c.snap.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(7));
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = c.snap.permuted(&perm);
        let a = scl_loss(&c.anchor, &c.aug, &c.snap, c.label, TAU).unwrap();
        let b = scl_loss(&c.anchor, &c.aug, &shuffled, c.label, TAU).unwrap();
        prop_assert!(rel(a, b) <= 1e-12);
        let a = dscl_loss(&c.anchor, &c.aug, &c.snap, c.label, TAU, alpha).unwrap();
        let b = dscl_loss(&c.anchor, &c.aug, &shuffled, c.label, TAU, alpha).unwrap();
        prop_assert!(rel(a, b) <= 1e-12);
    }

    #[test]
    fn probabilities_form_a_distribution(seed in any::<u64>()) {
        let c = case(seed, 64, 16);
        let p = conditional_prob(&c.anchor, &c.aug, &c.snap, TAU).unwrap();
        prop_assert_eq!(p.probs.len(), c.snap.len() + 1);
        prop_assert!(p.probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn analytic_gradients_match_tape(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let c = case(seed, 64, 16);
        let tape = |dscl: bool| {
            let mut g = Graph::new();
            let cands = Candidates::build(&mut g, &c.aug, &c.snap).unwrap();
            let a = g.param(Tensor::vector(c.anchor.clone()));
            let root = if dscl {
                dscl_loss_var(&mut g, a, &cands, &c.snap, c.label, TAU, alpha).unwrap()
            } else {
                scl_loss_var(&mut g, a, &cands, &c.snap, c.label, TAU).unwrap()
            };
            g.backward(root).unwrap();
            g.grad(a).unwrap().to_vec()
        };
        let worst = |x: &[f64], y: &[f64]| {
            let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
            x.iter().zip(y).map(|(a, b)| (a - b).abs() / scale).fold(0.0, f64::max)
        };
        let scl = scl_anchor_gradient_analytic(&c.anchor, &c.aug, &c.snap, c.label, TAU).unwrap();
        prop_assert!(worst(&tape(false), &scl) <= 1e-9);
        let dscl =
            dscl_anchor_gradient_analytic(&c.anchor, &c.aug, &c.snap, c.label, TAU, alpha).unwrap();
        prop_assert!(worst(&tape(true), &dscl) <= 1e-9);
    }

    #[test]
    fn weights_sum_to_cardinality(alpha in 0.0f64..=1.0, p in 1usize..4096) {
        let w = PositiveWeights::new(alpha, p).unwrap();
        let n = p as f64 + 1.0;
        let sum = w.w_plus + p as f64 * w.w_queue;
        prop_assert_eq!(sum, n);
        let (tp, tq) = w.targets(p);
        prop_assert!((tp - alpha).abs() <= 4.0 * f64::EPSILON);
        prop_assert!((tp + p as f64 * tq - 1.0).abs() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn distillation_matches_enumeration(seed in any::<u64>()) {
        let c = case(seed, 64, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(!seed);
        let target = unit(&mut rng, c.anchor.len());
        let mut g = Graph::new();
        let cands = Candidates::build(&mut g, &c.aug, &c.snap).unwrap();
        let cv = g.param(Tensor::vector(target.clone()));
        let sv = g.param(Tensor::vector(c.anchor.clone()));
        let t = target_var(&mut g, cv, &cands, TAU).unwrap();
        let ce = distill_var(&mut g, sv, t, &cands, TAU).unwrap();
        let got = g.scalar_value(ce).unwrap();
        prop_assert!(rel(got, brute_ce(&target, &c.anchor, &c)) <= 1e-10);
        // The target side never receives gradient.
        g.backward(ce).unwrap();
        prop_assert!(g.grad(cv).unwrap().iter().all(|v| v.to_bits() == 0));
        if !c.snap.is_empty() {
            prop_assert!(g.grad(sv).unwrap().iter().any(|&v| v != 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pbsd_matches_enumeration(seed in any::<u64>(), l in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = tiny_encoder(seed);
        let img = image(&mut rng, 0);
        let bs = boxes(&mut rng, l);
        let mut c = case(seed, 32, 6);
        let d = params.config.d_proj;
        let rows: Vec<Vec<f64>> = (0..c.snap.len()).map(|_| unit(&mut rng, d)).collect();
        c.snap = Snapshot::from_rows(&rows, c.snap.labels(), d).unwrap();
        c.aug = unit(&mut rng, d);
        let got = pbsd_loss(&params, &img, &bs, &c.aug, &c.snap, TAU, 8).unwrap();
        let (_, cs, ss) = encoder_views(&params, &img, &bs, 8);
        let want = cs.iter().zip(&ss).map(|(ci, si)| brute_ce(ci, si, &c)).sum::<f64>() / l as f64;
        prop_assert!(mixed(got, want) <= 1e-10, "{got} vs {want}");
    }

    #[test]
    fn multicrop_matches_enumeration(seed in any::<u64>(), l in 1usize..4, alpha in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = tiny_encoder(seed);
        let img = image(&mut rng, 0);
        let bs = boxes(&mut rng, l);
        let mut c = case(seed, 32, 6);
        let d = params.config.d_proj;
        let rows: Vec<Vec<f64>> = (0..c.snap.len()).map(|_| unit(&mut rng, d)).collect();
        c.snap = Snapshot::from_rows(&rows, c.snap.labels(), d).unwrap();
        c.aug = unit(&mut rng, d);
        let got =
            multicrop_loss(&params, &img, &bs, &c.aug, &c.snap, c.label, TAU, alpha, 8).unwrap();
        let (z, _, ss) = encoder_views(&params, &img, &bs, 8);
        let want = (brute_dscl(&c, &z, alpha) + ss.iter().map(|s| brute_dscl(&c, s, alpha)).sum::<f64>())
            / (1 + l) as f64;
        prop_assert!(mixed(got, want) <= 1e-10, "{got} vs {want}");
    }
}
