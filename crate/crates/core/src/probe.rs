//! Quantifies how much domain information survives in the extractor's
//! features: spatially pooled feature vectors per case, and a cross-validated
//! linear probe whose accuracy measures linearly decodable domain identity.
//! Low probe accuracy on a trained model means domain-invariant features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{extract_features, ModelBundle};
use crate::synth::Subject;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("domain probe needs at least 2 domains, got {0}")]
    SingleDomain(usize),
    #[error("no feature records")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Spatially average-pooled extractor output for one case.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub case_id: usize,
    pub domain_id: usize,
    pub features: Vec<f64>,
}

/// Pooled features for every subject, in input order. Pure function of
/// (model, data).
pub fn export_features(
    bundle: &ModelBundle,
    subjects: &[&Subject],
    chunk: usize,
) -> Result<Vec<FeatureRecord>, ProbeError> {
    let mut out = Vec::with_capacity(subjects.len());
    for group in subjects.chunks(chunk.max(1)) {
        let item = group[0].image.shape().to_vec();
        let mut shape = vec![group.len()];
        shape.extend_from_slice(&item);
        let mut data = Vec::with_capacity(group.len() * group[0].image.numel());
        for s in group {
            data.extend_from_slice(s.image.data());
        }
        let packed = Tensor::new(shape, data)?;

        let mut tape = Tape::new();
        let ids = bundle.bind(&mut tape);
        let x = tape.leaf(&packed);
        let (features, _, _) = extract_features(bundle, &mut tape, &ids, x)?;
        let fshape = tape.shape(features).to_vec();
        let (c, hw) = (fshape[1], fshape[2] * fshape[3]);
        let fdata = tape.data(features);
        for (i, s) in group.iter().enumerate() {
            let per_case = &fdata[i * c * hw..(i + 1) * c * hw];
            let pooled: Vec<f64> = (0..c)
                .map(|ch| per_case[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
                .collect();
            out.push(FeatureRecord {
                case_id: s.case_id,
                domain_id: s.domain_id,
                features: pooled,
            });
        }
    }
    Ok(out)
}

pub fn features_to_csv(records: &[FeatureRecord]) -> String {
    let width = records.first().map_or(0, |r| r.features.len());
    let mut out = String::from("case_id,domain_id");
    for i in 0..width {
        out.push_str(&format!(",f_{i}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{}", r.case_id, r.domain_id));
        for f in &r.features {
            out.push_str(&format!(",{f:.9}"));
        }
        out.push('\n');
    }
    out
}

pub fn features_from_csv(text: &str) -> Result<Vec<FeatureRecord>, ProbeError> {
    let mut records = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let case_id = cols.next().and_then(|c| c.parse().ok()).ok_or(ProbeError::Empty)?;
        let domain_id = cols.next().and_then(|c| c.parse().ok()).ok_or(ProbeError::Empty)?;
        let features = cols.map(|c| c.parse().unwrap_or(f64::NAN)).collect();
        records.push(FeatureRecord { case_id, domain_id, features });
    }
    Ok(records)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub variant: String,
    pub accuracy: f64,
    pub k: usize,
    pub folds: usize,
    pub seed: u64,
}

const PROBE_ITERS: usize = 300;
const PROBE_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-4;

/// Cross-validated accuracy of a multinomial logistic probe on frozen
/// features. Deterministic: zero-init weights, fixed fold assignment
/// (round-robin within each domain after sorting by case id), full-batch
/// gradient descent on standardized features.
pub fn domain_probe_accuracy(records: &[FeatureRecord], folds: usize) -> Result<f64, ProbeError> {
    if records.is_empty() {
        return Err(ProbeError::Empty);
    }
    let mut domains: Vec<usize> = records.iter().map(|r| r.domain_id).collect();
    domains.sort_unstable();
    domains.dedup();
    let k = domains.len();
    if k < 2 {
        return Err(ProbeError::SingleDomain(k));
    }
    let class_of = |d: usize| domains.binary_search(&d).expect("known domain");

    // stratified fold assignment: per domain, round-robin over case order
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| (records[i].domain_id, records[i].case_id));
    let mut fold_of = vec![0usize; records.len()];
    let mut counter = vec![0usize; k];
    for &i in &order {
        let c = class_of(records[i].domain_id);
        fold_of[i] = counter[c] % folds;
        counter[c] += 1;
    }

    let dim = records[0].features.len();
    let mut correct = 0usize;
    let mut total = 0usize;
    for fold in 0..folds {
        let train: Vec<usize> = (0..records.len()).filter(|&i| fold_of[i] != fold).collect();
        let test: Vec<usize> = (0..records.len()).filter(|&i| fold_of[i] == fold).collect();
        if train.is_empty() || test.is_empty() {
            continue;
        }
        // standardize on the training fold
        let mut mean = vec![0.0; dim];
        for &i in &train {
            for (m, f) in mean.iter_mut().zip(&records[i].features) {
                *m += f;
            }
        }
        for m in &mut mean {
            *m /= train.len() as f64;
        }
        let mut std = vec![0.0; dim];
        for &i in &train {
            for ((s, f), m) in std.iter_mut().zip(&records[i].features).zip(&mean) {
                *s += (f - m) * (f - m);
            }
        }
        for s in &mut std {
            *s = (*s / train.len() as f64).sqrt().max(1e-12);
        }
        let feat = |i: usize| -> Vec<f64> {
            let mut v: Vec<f64> = records[i]
                .features
                .iter()
                .zip(&mean)
                .zip(&std)
                .map(|((f, m), s)| (f - m) / s)
                .collect();
            v.push(1.0); // bias feature
            v
        };

        // full-batch gradient descent on softmax regression
        let d1 = dim + 1;
        let mut wts = vec![0.0f64; k * d1];
        for _ in 0..PROBE_ITERS {
            let mut grad = vec![0.0f64; k * d1];
            for &i in &train {
                let x = feat(i);
                let mut logits: Vec<f64> = (0..k)
                    .map(|c| wts[c * d1..(c + 1) * d1].iter().zip(&x).map(|(w, xv)| w * xv).sum())
                    .collect();
                let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in &mut logits {
                    *l = (*l - maxv).exp();
                    sum += *l;
                }
                let truth = class_of(records[i].domain_id);
                for c in 0..k {
                    let p = logits[c] / sum;
                    let err = p - if c == truth { 1.0 } else { 0.0 };
                    for (g, xv) in grad[c * d1..(c + 1) * d1].iter_mut().zip(&x) {
                        *g += err * xv;
                    }
                }
            }
            let n = train.len() as f64;
            for (w, g) in wts.iter_mut().zip(&grad) {
                *w -= PROBE_LR * (g / n + PROBE_L2 * *w);
            }
        }

        for &i in &test {
            let x = feat(i);
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..k {
                let v: f64 = wts[c * d1..(c + 1) * d1].iter().zip(&x).map(|(w, xv)| w * xv).sum();
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            if best == class_of(records[i].domain_id) {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(ProbeError::Empty);
    }
    Ok(correct as f64 / total as f64)
}
