//! Naive dense references shared by the integration tests. Everything here is
//! written with explicit loops and no calls into the library's numerics.

#![allow(dead_code)]

use fisa_core::data::{BinaryMask, Dataset, DatasetManifest, LabelVocabulary, SegmentationSample};
use fisa_core::tensor::Matrix;

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect()).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..inner {
                        s += row[k] * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// `x·W + b`.
pub fn affine(x: &[Vec<f64>], w: &Matrix, b: Option<&Matrix>) -> Vec<Vec<f64>> {
    let mut y = matmul(x, &to_rows(w));
    if let Some(b) = b {
        for row in &mut y {
            for (j, v) in row.iter_mut().enumerate() {
                *v += b.get(0, j);
            }
        }
    }
    y
}

/// Softmax over the entries of `row` that are allowed; disallowed entries get
/// weight exactly zero.
pub fn masked_softmax(row: &[f64], allowed: &[bool]) -> Vec<f64> {
    let mx = row.iter().zip(allowed).filter(|(_, &a)| a).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().zip(allowed).map(|(&v, &a)| if a { (v - mx).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Single-head scaled dot-product cross attention.
pub fn cross_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], allowed: Option<&[Vec<bool>]>) -> Vec<Vec<f64>> {
    let d = q.first().map_or(1, Vec::len) as f64;
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let logits: Vec<f64> =
                k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let all = vec![true; k.len()];
            let w = masked_softmax(&logits, allowed.map_or(&all[..], |a| &a[i][..]));
            let mut out = vec![0.0; v[0].len()];
            for (wj, vj) in w.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += wj * x;
                }
            }
            out
        })
        .collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &Matrix) -> f64 {
    assert_eq!((a.len(), a.first().map_or(0, Vec::len)), (b.rows(), b.cols()));
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(i, j)).abs());
        }
    }
    worst
}

pub fn in_memory_dataset(samples: Vec<SegmentationSample>, num_classes: usize, patch_size: usize) -> Dataset {
    Dataset {
        root: None,
        manifest: DatasetManifest {
            format_version: fisa_core::data::DATASET_FORMAT.to_string(),
            num_classes,
            patch_size,
            samples: samples.iter().map(|s| format!("{}.json", s.sample_id)).collect(),
        },
        vocabulary: LabelVocabulary::synthetic(num_classes),
        samples,
    }
}

pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut impl rand::Rng) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density))
}
