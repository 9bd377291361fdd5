//! Patch-to-image retrieval against ground-truth motif placements.

use std::fmt::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::plot::image_grid;
use super::{Check, ExperimentReport};
use crate::encoder::{embed_image, roi_cells, EncoderParams};
use crate::error::{Error, Result};
use crate::synthdata::{PatchBox, SynthDataset};
use crate::tensor::{dot, Graph};
use crate::train::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Query {
    /// Test-set index of the query image.
    pub image: usize,
    pub bbox: PatchBox,
    /// Motif under the box, when known.
    pub motif: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryResult {
    pub query: Query,
    /// `(test index, score)`, best first; the query image itself is skipped.
    pub ranked: Vec<(usize, f64)>,
    pub top1_same_class: bool,
    /// Fraction of retrieved images containing the query motif.
    pub motif_overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub k: usize,
    pub queries: Vec<QueryResult>,
    pub mean_motif_overlap: f64,
    pub top1_class_accuracy: f64,
}

/// Grow `bbox` about its centre until it covers at least one cell of the
/// `side × side` feature map.
fn usable_box(bbox: PatchBox, side: usize) -> Result<PatchBox> {
    let mut b = bbox;
    for _ in 0..8 {
        if roi_cells(&b, side, side).is_ok() {
            return Ok(b);
        }
        b.w = (b.w * 1.5).min(1.0);
        b.h = (b.h * 1.5).min(1.0);
        b.cx = b.cx.clamp(b.w / 2.0, 1.0 - b.w / 2.0);
        b.cy = b.cy.clamp(b.h / 2.0, 1.0 - b.h / 2.0);
    }
    Err(Error::DegenerateBox(format!("{bbox:?} covers no feature cell")))
}

/// One query per sampled test image, on the box of its class-specific
/// (first) motif.
pub fn default_queries(ds: &SynthDataset, count: usize) -> Vec<Query> {
    let n = ds.test.len();
    let count = count.min(n);
    (0..count)
        .map(|q| q * n / count)
        .filter_map(|i| {
            ds.test[i].placements.first().map(|p| Query {
                image: i,
                bbox: p.bbox,
                motif: Some(p.motif),
            })
        })
        .collect()
}

pub fn patch_retrieval(
    params: &EncoderParams,
    ds: &SynthDataset,
    queries: &[Query],
    k: usize,
) -> Result<RetrievalResult> {
    let n = ds.test.len();
    if n < 2 {
        return Err(Error::Config("retrieval needs at least two test images".into()));
    }
    let k = if k > n - 1 {
        log::warn!("k = {k} exceeds {} candidates; clipped", n - 1);
        n - 1
    } else {
        k
    };
    let side = params.config.input_size / 8;
    let bank: Vec<Vec<f64>> = ds
        .test
        .par_iter()
        .map(|im| embed_image(params, im).map(|(_, z)| z))
        .collect::<Result<_>>()?;
    let results: Vec<QueryResult> = queries
        .par_iter()
        .map(|q| {
            let img = ds
                .test
                .get(q.image)
                .ok_or_else(|| Error::Config(format!("query image {} out of range", q.image)))?;
            let bbox = usable_box(q.bbox, side)?;
            let mut g = Graph::new();
            let enc = params.bind(&mut g, false);
            let e = enc.encode(&mut g, img)?;
            let c = enc.roi_pool_project(&mut g, e.u, &bbox)?;
            let c = g.value(c).data().to_vec();
            let mut scored: Vec<(usize, f64)> = bank
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != q.image)
                .map(|(i, z)| (i, dot(&c, z)))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.truncate(k);
            let overlap = match q.motif {
                Some(m) => {
                    scored
                        .iter()
                        .filter(|(i, _)| ds.test[*i].placements.iter().any(|p| p.motif == m))
                        .count() as f64
                        / k as f64
                }
                None => f64::NAN,
            };
            Ok(QueryResult {
                query: *q,
                top1_same_class: ds.test[scored[0].0].label == img.label,
                ranked: scored,
                motif_overlap: overlap,
            })
        })
        .collect::<Result<_>>()?;
    let with_motif: Vec<f64> = results
        .iter()
        .map(|r| r.motif_overlap)
        .filter(|v| v.is_finite())
        .collect();
    Ok(RetrievalResult {
        k,
        mean_motif_overlap: with_motif.iter().sum::<f64>() / with_motif.len().max(1) as f64,
        top1_class_accuracy: results.iter().filter(|r| r.top1_same_class).count() as f64
            / results.len().max(1) as f64,
        queries: results,
    })
}

pub fn retrieval_csv(res: &RetrievalResult) -> String {
    let mut s = String::from("image,cx,cy,w,h,motif,top1_same_class,motif_overlap,ranked\n");
    for q in &res.queries {
        let ranked: Vec<String> = q.ranked.iter().map(|(i, _)| i.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            q.query.image,
            q.query.bbox.cx,
            q.query.bbox.cy,
            q.query.bbox.w,
            q.query.bbox.h,
            q.query.motif.map(|m| m.to_string()).unwrap_or_default(),
            q.top1_same_class,
            q.motif_overlap,
            ranked.join(" ")
        );
    }
    s
}

pub fn run_patch_retrieval(
    params: &EncoderParams,
    ds: &SynthDataset,
    config: &ExperimentConfig,
    queries: &[Query],
    k: usize,
) -> Result<ExperimentReport> {
    let res = patch_retrieval(params, ds, queries, k)?;
    let mut report = ExperimentReport::new("retrieve", config, vec![]);
    let csv = retrieval_csv(&res);
    let rows: Vec<Vec<(usize, Vec<f64>)>> = res
        .queries
        .iter()
        .take(8)
        .map(|q| {
            std::iter::once(q.query.image)
                .chain(q.ranked.iter().map(|(i, _)| *i))
                .map(|i| (ds.test[i].size, ds.test[i].pixels.clone()))
                .collect()
        })
        .collect();
    report.checks.push(Check::new(
        "top1-class",
        res.top1_class_accuracy > 1.0 / ds.spec.num_classes() as f64,
        format!("top-1 same-class rate {:.3}", res.top1_class_accuracy),
    ));
    report.summary = serde_json::json!({
        "k": res.k,
        "mean_motif_overlap": res.mean_motif_overlap,
        "top1_class_accuracy": res.top1_class_accuracy,
    });
    report.add_file("retrieval.csv", csv);
    report.add_file(
        "retrieval.svg",
        image_grid("Query (left) and top-k retrievals", &rows, 48.0),
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_boxes_are_grown() {
        let b = PatchBox {
            cx: 0.5,
            cy: 0.5,
            w: 0.25,
            h: 0.25,
        };
        let u = usable_box(b, 4).unwrap();
        assert!(roi_cells(&u, 4, 4).is_ok());
        assert!(u.w >= 0.25);
    }
}
