//! Procedural long-tailed image data.
//!
//! Each class owns one motif and borrows a few from a shared pool, so tail
//! classes always carry visual patterns that also occur in head classes.
//! Images are motif stamps over smooth value-noise backgrounds. Pixels are
//! stored channel-major (`[C, H, W]`) and quantised to f32 precision so the
//! on-disk format round-trips exactly.

mod augment;
mod io;

pub use augment::{
    augment_two_views, crop_resize, sample_boxes_with, sample_patch_boxes, AugmentParams,
    AugmentationPolicy, PatchBox, View,
};
pub use io::{load_dataset, read_tensor_file, save_dataset, write_tensor_file, Manifest};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

pub const MOTIF_SIZE: usize = 8;

/// One stamp: an alpha mask and an RGB colour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    /// `MOTIF_SIZE × MOTIF_SIZE` opacity in `[0, 1]`, row-major.
    pub mask: Vec<f64>,
    /// One value in `[0, 1]` per channel.
    pub color: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternBank {
    pub motifs: Vec<Motif>,
    /// `sharing_map[k]` lists the motif ids drawn into class `k`. The first
    /// entry is the class's own motif.
    pub sharing_map: Vec<Vec<usize>>,
    pub sharing_degree: usize,
}

impl PatternBank {
    pub fn num_classes(&self) -> usize {
        self.sharing_map.len()
    }

    /// Classes in the first half of the (cardinality-sorted) label order.
    pub fn head_classes(&self) -> std::ops::Range<usize> {
        0..self.num_classes().div_ceil(2)
    }

    /// Closed-form mean pairwise motif overlap for the balanced slot
    /// assignment used by [`build_pattern_bank`].
    pub fn expected_pairwise_overlap(&self) -> f64 {
        let k = self.num_classes();
        let pool = self.motifs.len() - k;
        if k < 2 || pool == 0 || self.sharing_degree == 0 {
            return 0.0;
        }
        let slots = k * self.sharing_degree;
        let (q, r) = (slots / pool, slots % pool);
        let c2 = |u: usize| (u * u.saturating_sub(1) / 2) as f64;
        (r as f64 * c2(q + 1) + (pool - r) as f64 * c2(q)) / c2(k)
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("bank serialises");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Build a motif bank. Class `k` owns motif `k`; motifs `K..num_motifs`
/// form the shared pool, handed out in balanced round-robin order so every
/// pool motif is used by ⌊K·d/S⌋ or ⌈K·d/S⌉ classes.
pub fn build_pattern_bank(
    num_motifs: usize,
    num_classes: usize,
    sharing_degree: usize,
    seed: u64,
) -> Result<PatternBank> {
    if num_classes > num_motifs && sharing_degree == 0 {
        return Err(Error::Infeasible(format!(
            "{num_classes} classes cannot have disjoint motifs from {num_motifs} motifs"
        )));
    }
    if num_classes < 2 || num_motifs < num_classes {
        return Err(Error::Infeasible(format!(
            "need num_motifs ≥ K ≥ 2, got motifs={num_motifs}, K={num_classes}"
        )));
    }
    let pool = num_motifs - num_classes;
    if sharing_degree > pool {
        return Err(Error::Infeasible(format!(
            "sharing degree {sharing_degree} exceeds shared pool of {pool} motifs"
        )));
    }

    let mut rng = seed::rng(seed, &[0xBA4C]);
    let motifs = (0..num_motifs).map(|_| random_motif(&mut rng)).collect();

    let mut sharing_map: Vec<Vec<usize>> = (0..num_classes).map(|k| vec![k]).collect();
    if sharing_degree > 0 {
        let total = num_classes * sharing_degree;
        let mut slots = Vec::with_capacity(total);
        while slots.len() < total {
            let mut perm: Vec<usize> = (num_classes..num_motifs).collect();
            perm.shuffle(&mut rng);
            slots.extend(perm);
        }
        slots.truncate(total);
        // Resolve duplicates inside a class by swapping with a later slot.
        for k in 0..num_classes {
            for j in 0..sharing_degree {
                let idx = k * sharing_degree + j;
                let clash = |s: &[usize], cand: usize| {
                    s[k * sharing_degree..idx].contains(&cand)
                };
                if clash(&slots, slots[idx]) {
                    let swap = (idx + 1..total)
                        .find(|&o| {
                            !clash(&slots, slots[o]) && {
                                let ok = o / sharing_degree;
                                let range = ok * sharing_degree..(ok + 1) * sharing_degree;
                                ok == k || !slots[range].contains(&slots[idx])
                            }
                        })
                        .ok_or_else(|| {
                            Error::Infeasible("cannot assign distinct shared motifs".into())
                        })?;
                    slots.swap(idx, swap);
                }
            }
        }
        for (k, chunk) in slots.chunks(sharing_degree).enumerate() {
            sharing_map[k].extend_from_slice(chunk);
        }
        ensure_tail_shares_with_head(&mut sharing_map, num_classes)?;
    }

    Ok(PatternBank {
        motifs,
        sharing_map,
        sharing_degree,
    })
}

/// Repair step: a tail class whose shared motifs miss every head class
/// swaps one of them with another class holding a head-used motif. Swaps
/// keep per-motif usage counts, so the overlap expectation is unchanged.
fn ensure_tail_shares_with_head(map: &mut [Vec<usize>], k: usize) -> Result<()> {
    let head = k.div_ceil(2);
    let linked = |map: &[Vec<usize>], t: usize| {
        t < head
            || map[t][1..]
                .iter()
                .any(|m| (0..head).any(|h| map[h][1..].contains(m)))
    };
    for _ in 0..4 * k {
        let Some(t) = (head..k).find(|&t| !linked(map, t)) else {
            return Ok(());
        };
        let mut done = false;
        'search: for h in 0..head {
            for &m in &map[h][1..].to_vec() {
                if map[t].contains(&m) {
                    continue;
                }
                let holders: Vec<usize> = (0..k)
                    .filter(|&c| c != t && c != h && map[c][1..].contains(&m))
                    .collect();
                for c in holders {
                    for xi in 1..map[t].len() {
                        let x = map[t][xi];
                        if map[c].contains(&x) {
                            continue;
                        }
                        let mi = map[c].iter().position(|&v| v == m).unwrap();
                        map[t][xi] = m;
                        map[c][mi] = x;
                        if linked(map, c) {
                            done = true;
                            break 'search;
                        }
                        map[t][xi] = x;
                        map[c][mi] = m;
                    }
                }
            }
        }
        if !done {
            // No count-preserving swap exists; borrow a head motif outright.
            let candidate = (0..head)
                .flat_map(|h| map[h][1..].to_vec())
                .find(|m| !map[t].contains(m))
                .ok_or_else(|| Error::Infeasible("no head motif available to share".into()))?;
            map[t][1] = candidate;
        }
    }
    if (head..k).all(|t| linked(map, t)) {
        Ok(())
    } else {
        Err(Error::Infeasible("could not link every tail class to a head class".into()))
    }
}

fn random_motif(rng: &mut impl Rng) -> Motif {
    // 4×4 binary pattern, mirrored left/right, upsampled to 8×8.
    let mut coarse = [[false; 4]; 4];
    loop {
        for row in coarse.iter_mut() {
            for c in 0..2 {
                let on = rng.gen_bool(0.55);
                row[c] = on;
                row[3 - c] = on;
            }
        }
        let filled = coarse.iter().flatten().filter(|&&b| b).count();
        if (5..=13).contains(&filled) {
            break;
        }
    }
    let mut mask = vec![0.0; MOTIF_SIZE * MOTIF_SIZE];
    for y in 0..MOTIF_SIZE {
        for x in 0..MOTIF_SIZE {
            if coarse[y / 2][x / 2] {
                mask[y * MOTIF_SIZE + x] = 1.0;
            }
        }
    }
    let hue: f64 = rng.gen_range(0.0..1.0);
    let color = hsv_to_rgb(hue, rng.gen_range(0.6..1.0), rng.gen_range(0.7..1.0));
    Motif {
        mask,
        color: color.to_vec(),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Shape and cardinalities of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Per-class training counts, non-increasing in class id.
    pub counts: Vec<usize>,
    pub image_size: usize,
    pub channels: usize,
    pub test_per_class: usize,
    pub seed: u64,
    #[serde(default = "default_num_motifs")]
    pub num_motifs: usize,
    #[serde(default = "default_sharing_degree")]
    pub sharing_degree: usize,
}

fn default_num_motifs() -> usize {
    40
}

fn default_sharing_degree() -> usize {
    2
}

impl Default for DatasetSpec {
    /// 20 classes, 500 → 5 exponential profile, 32×32×3, 20 test images
    /// per class.
    fn default() -> Self {
        Self::exponential(20, 500, 100.0, 32, 3, 20, 0).expect("default spec is valid")
    }
}

impl DatasetSpec {
    /// `n_k = round(n_max · ratio^(−k/(K−1)))` for `k = 0..K`.
    pub fn exponential(
        num_classes: usize,
        n_max: usize,
        imbalance_ratio: f64,
        image_size: usize,
        channels: usize,
        test_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 || !(imbalance_ratio >= 1.0) {
            return Err(Error::Config(format!(
                "exponential profile needs K ≥ 2 and ratio ≥ 1, got K={num_classes}, ratio={imbalance_ratio}"
            )));
        }
        let counts: Vec<usize> = (0..num_classes)
            .map(|k| {
                let e = k as f64 / (num_classes - 1) as f64;
                ((n_max as f64) * imbalance_ratio.powf(-e)).round().max(1.0) as usize
            })
            .collect();
        let spec = Self {
            counts,
            image_size,
            channels,
            test_per_class,
            seed,
            num_motifs: default_num_motifs().max(2 * num_classes),
            sharing_degree: default_sharing_degree(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn balanced(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        Self {
            counts: vec![per_class; num_classes],
            image_size,
            channels: 3,
            test_per_class: per_class.min(20),
            seed,
            num_motifs: 2 * num_classes,
            sharing_degree: 1,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn imbalance_ratio(&self) -> f64 {
        self.counts[0] as f64 / *self.counts.last().unwrap() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.len() < 2 {
            return Err(Error::Config("dataset needs at least 2 classes".into()));
        }
        if self.counts.contains(&0) {
            return Err(Error::Config("every class needs at least one sample".into()));
        }
        if self.counts.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "class counts must be non-increasing: {:?}",
                self.counts
            )));
        }
        if self.channels != 3 {
            return Err(Error::Config(format!(
                "only 3-channel images are supported, got {}",
                self.channels
            )));
        }
        if self.image_size < MOTIF_SIZE {
            return Err(Error::Config(format!(
                "image size {} cannot hold an {MOTIF_SIZE}×{MOTIF_SIZE} motif",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Ground truth for one stamped motif.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotifPlacement {
    pub motif: usize,
    pub bbox: PatchBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    /// `[C, H, W]` row-major, values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub channels: usize,
    pub size: usize,
    pub label: usize,
    pub placements: Vec<MotifPlacement>,
}

impl SynthImage {
    pub fn from_pixels(pixels: Vec<f64>, channels: usize, size: usize, label: usize) -> Self {
        debug_assert_eq!(pixels.len(), channels * size * size);
        Self {
            pixels,
            channels,
            size,
            label,
            placements: vec![],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.size + y) * self.size + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: DatasetSpec,
    pub bank: PatternBank,
    pub train: Vec<SynthImage>,
    pub test: Vec<SynthImage>,
    /// Nearest-centroid top-1 accuracy on raw pixels (test split).
    pub centroid_accuracy: f64,
}

impl SynthDataset {
    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|i| i.label).collect()
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test.iter().map(|i| i.label).collect()
    }
}

const TRAIN_SPLIT: u64 = 1;
const TEST_SPLIT: u64 = 2;

/// Generate a dataset. A pure function of `(spec, bank)`; each image uses its
/// own sub-seed so the parallel map is bit-identical to a serial one.
pub fn generate_dataset(spec: &DatasetSpec, bank: &PatternBank) -> Result<SynthDataset> {
    spec.validate()?;
    if bank.num_classes() != spec.num_classes() {
        return Err(Error::Config(format!(
            "bank has {} classes, spec has {}",
            bank.num_classes(),
            spec.num_classes()
        )));
    }
    let train_jobs: Vec<(usize, usize)> = spec
        .counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .enumerate()
        .collect();
    let test_jobs: Vec<(usize, usize)> = (0..spec.num_classes())
        .flat_map(|k| std::iter::repeat_n(k, spec.test_per_class))
        .enumerate()
        .collect();

    let train: Vec<SynthImage> = train_jobs
        .par_iter()
        .map(|&(i, k)| render_image(spec, bank, k, seed::derive(spec.seed, &[TRAIN_SPLIT, i as u64])))
        .collect();
    let test: Vec<SynthImage> = test_jobs
        .par_iter()
        .map(|&(i, k)| render_image(spec, bank, k, seed::derive(spec.seed, &[TEST_SPLIT, i as u64])))
        .collect();

    let centroid_accuracy = nearest_centroid_accuracy(&train, &test, spec.num_classes());
    Ok(SynthDataset {
        spec: spec.clone(),
        bank: bank.clone(),
        train,
        test,
        centroid_accuracy,
    })
}

fn render_image(spec: &DatasetSpec, bank: &PatternBank, label: usize, seed: u64) -> SynthImage {
    let mut rng = seed::rng(seed, &[]);
    let s = spec.image_size;
    let c = spec.channels;
    let mut px = background(&mut rng, s, c);

    let mut motifs = bank.sharing_map[label].clone();
    motifs.shuffle(&mut rng);
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut placements = Vec::with_capacity(motifs.len());
    let span = s - MOTIF_SIZE;
    for &m in &motifs {
        // Prefer non-overlapping positions; give up after a few tries.
        let mut pos = (rng.gen_range(0..=span), rng.gen_range(0..=span));
        for _ in 0..20 {
            let clear = taken.iter().all(|&(y, x)| {
                y.abs_diff(pos.0) >= MOTIF_SIZE || x.abs_diff(pos.1) >= MOTIF_SIZE
            });
            if clear {
                break;
            }
            pos = (rng.gen_range(0..=span), rng.gen_range(0..=span));
        }
        taken.push(pos);
        let motif = &bank.motifs[m];
        let gain: f64 = rng.gen_range(0.85..1.0);
        for dy in 0..MOTIF_SIZE {
            for dx in 0..MOTIF_SIZE {
                let a = motif.mask[dy * MOTIF_SIZE + dx];
                if a == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    let idx = (ch * s + pos.0 + dy) * s + pos.1 + dx;
                    px[idx] = (1.0 - a) * px[idx] + a * motif.color[ch] * gain;
                }
            }
        }
        let sz = MOTIF_SIZE as f64 / s as f64;
        placements.push(MotifPlacement {
            motif: m,
            bbox: PatchBox {
                cx: (pos.1 as f64 + MOTIF_SIZE as f64 / 2.0) / s as f64,
                cy: (pos.0 as f64 + MOTIF_SIZE as f64 / 2.0) / s as f64,
                w: sz,
                h: sz,
            },
        });
    }
    for v in &mut px {
        *v = quantize(v.clamp(0.0, 1.0));
    }
    SynthImage {
        pixels: px,
        channels: c,
        size: s,
        label,
        placements,
    }
}

#[inline]
pub(crate) fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Two octaves of bilinearly interpolated lattice noise, lightly tinted per
/// channel.
fn background(rng: &mut impl Rng, s: usize, c: usize) -> Vec<f64> {
    let mut field = vec![0.0; s * s];
    for (cell, amp) in [(8usize, 0.22), (4usize, 0.1)] {
        let n = s / cell + 2;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for y in 0..s {
            for x in 0..s {
                let fy = y as f64 / cell as f64;
                let fx = x as f64 / cell as f64;
                let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
                let v00 = lattice[iy * n + ix];
                let v01 = lattice[iy * n + ix + 1];
                let v10 = lattice[(iy + 1) * n + ix];
                let v11 = lattice[(iy + 1) * n + ix + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                field[y * s + x] += amp * (top + (bot - top) * ty);
            }
        }
    }
    let base: f64 = rng.gen_range(0.3..0.5);
    let tint: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let mut px = vec![0.0; c * s * s];
    for ch in 0..c {
        for i in 0..s * s {
            px[ch * s * s + i] = base + tint[ch] + field[i];
        }
    }
    px
}

#[inline]
fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Top-1 accuracy of a nearest-class-mean classifier on raw pixels.
pub fn nearest_centroid_accuracy(train: &[SynthImage], test: &[SynthImage], k: usize) -> f64 {
    if train.is_empty() || test.is_empty() {
        return 0.0;
    }
    let d = train[0].pixels.len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for img in train {
        counts[img.label] += 1;
        for (s, p) in sums[img.label].iter_mut().zip(&img.pixels) {
            *s += p;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let correct = test
        .iter()
        .filter(|img| {
            let best = (0..k)
                .filter(|&c| counts[c] > 0)
                .map(|c| {
                    let dist: f64 = sums[c]
                        .iter()
                        .zip(&img.pixels)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (c, dist)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c);
            best == Some(img.label)
        })
        .count();
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn bank_is_deterministic() {
        let a = build_pattern_bank(8, 4, 2, 7).unwrap();
        let b = build_pattern_bank(8, 4, 2, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a, build_pattern_bank(8, 4, 2, 8).unwrap());
    }

    #[test]
    fn zero_degree_gives_disjoint_sets() {
        let bank = build_pattern_bank(8, 4, 0, 1).unwrap();
        let mut seen = BTreeSet::new();
        for set in &bank.sharing_map {
            for m in set {
                assert!(seen.insert(*m), "motif {m} reused");
            }
        }
    }

    #[test]
    fn infeasible_banks_rejected() {
        assert!(matches!(
            build_pattern_bank(3, 4, 0, 0),
            Err(Error::Infeasible(_))
        ));
        assert!(build_pattern_bank(5, 4, 2, 0).is_err());
        assert!(build_pattern_bank(4, 1, 0, 0).is_err());
    }

    fn brute_force_overlap(map: &[Vec<usize>]) -> f64 {
        let sets: Vec<BTreeSet<usize>> = map.iter().map(|s| s.iter().copied().collect()).collect();
        let mut total = 0usize;
        let mut pairs = 0usize;
        for a in 0..sets.len() {
            for b in a + 1..sets.len() {
                total += sets[a].intersection(&sets[b]).count();
                pairs += 1;
            }
        }
        total as f64 / pairs as f64
    }

    #[test]
    fn pairwise_overlap_matches_configured_expectation() {
        for (motifs, k, d, seed) in [(8, 4, 2, 7), (40, 20, 2, 1), (30, 10, 3, 5), (24, 12, 2, 9)] {
            let bank = build_pattern_bank(motifs, k, d, seed).unwrap();
            let expected = bank.expected_pairwise_overlap();
            let observed = brute_force_overlap(&bank.sharing_map);
            assert!(
                (observed - expected).abs() <= 0.1 * expected,
                "motifs={motifs} k={k} d={d}: {observed} vs {expected}"
            );
        }
    }

    #[test]
    fn tail_classes_share_with_head() {
        for seed in 0..20 {
            let bank = build_pattern_bank(40, 20, 2, seed).unwrap();
            let head = bank.head_classes();
            for t in head.end..20 {
                let shares = bank.sharing_map[t].iter().any(|m| {
                    head.clone().any(|h| bank.sharing_map[h].contains(m))
                });
                assert!(shares, "seed {seed}: tail class {t} isolated");
            }
            for m in &bank.motifs {
                assert!(m.mask.iter().chain(&m.color).all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn exponential_profile() {
        let spec = DatasetSpec::exponential(20, 500, 100.0, 32, 3, 20, 0).unwrap();
        assert_eq!(spec.counts[0], 500);
        assert_eq!(spec.counts[19], 5);
        assert_eq!(spec.imbalance_ratio(), 100.0);
        assert!(spec.counts.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(spec, DatasetSpec::default());
    }

    #[test]
    fn spec_validation() {
        let mut s = DatasetSpec::balanced(2, 10, 16, 0);
        s.counts = vec![3, 5];
        assert!(s.validate().is_err());
        s.counts = vec![5, 3];
        s.image_size = 4;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn balanced_generation() {
        let spec = DatasetSpec::balanced(2, 10, 16, 3);
        let bank = build_pattern_bank(4, 2, 1, 3).unwrap();
        let ds = generate_dataset(&spec, &bank).unwrap();
        assert_eq!(ds.train.len(), 20);
        assert_eq!(ds.train.iter().filter(|i| i.label == 0).count(), 10);
        for img in ds.train.iter().chain(&ds.test) {
            assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(img.placements.len(), bank.sharing_map[img.label].len());
            for p in &img.placements {
                assert!(p.bbox.is_valid());
            }
        }
    }

    #[test]
    fn generation_is_pure_and_classes_are_separable() {
        let spec = DatasetSpec::exponential(6, 60, 6.0, 32, 3, 20, 11).unwrap();
        let bank = build_pattern_bank(12, 6, 2, 11).unwrap();
        let a = generate_dataset(&spec, &bank).unwrap();
        let b = generate_dataset(&spec, &bank).unwrap();
        assert_eq!(a, b);
        let counts: Vec<usize> = (0..6)
            .map(|k| a.train.iter().filter(|i| i.label == k).count())
            .collect();
        assert_eq!(counts, spec.counts);
        assert_eq!(a.test.len(), 6 * 20);
        assert!(a.centroid_accuracy > 1.0 / 6.0, "{}", a.centroid_accuracy);
    }
}
