//! Synthetic multi-domain 2D segmentation benchmark. All subjects share one
//! anatomy generator (tissue background plus small bright lesions); domains
//! differ only in an intensity transform that emulates scanner and protocol
//! shift. Ground-truth masks are untouched by the domain transform, so the
//! task itself is domain-invariant by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_rng, standard_normal};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("benchmark needs at least 3 domains for leave-one-out, got {0}")]
    TooFewDomains(usize),
    #[error("invalid domain spec {name}: {msg}")]
    BadSpec { name: String, msg: String },
}

/// Intensity transform of one synthetic "scanner".
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub gain: f64,
    pub bias: f64,
    pub gamma_contrast: f64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
}

impl DomainSpec {
    pub fn identity(name: &str) -> Self {
        DomainSpec {
            name: name.to_string(),
            gain: 1.0,
            bias: 0.0,
            gamma_contrast: 1.0,
            noise_sigma: 0.0,
            blur_radius: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.gain <= 0.0 || self.gamma_contrast <= 0.0 || self.noise_sigma < 0.0 {
            return Err(SynthError::BadSpec {
                name: self.name.clone(),
                msg: "gain and gamma_contrast must be positive, noise_sigma non-negative".into(),
            });
        }
        Ok(())
    }
}

/// One case: image [C, H, W] in [0, 1], binary mask [H, W], provenance ids.
#[derive(Clone, Debug)]
pub struct Subject {
    pub image: Tensor,
    pub mask: Tensor,
    pub domain_id: usize,
    pub case_id: usize,
}

#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub spec: DomainSpec,
    pub subjects: Vec<Subject>,
}

const BACKGROUND_PEAK: f64 = 0.55;
const LESION_BOOST: f64 = 0.3;
const MAX_LESIONS: usize = 5;

/// Clean anatomy: background tissue from 3-6 broad Gaussian blobs normalized
/// to peak 0.55, plus 1-5 small bright ellipses (+0.3) whose union is the
/// ground-truth mask.
pub fn generate_anatomy<R: Rng>(rng: &mut R, h: usize, w: usize) -> (Tensor, Tensor) {
    assert!(h >= 32 && w >= 32, "anatomy needs at least 32x32");
    let mut bg = vec![0.0f64; h * w];
    let n_blobs = rng.random_range(3..=6);
    for _ in 0..n_blobs {
        let amp = rng.random_range(0.5..1.0);
        let cy = rng.random_range(0.15 * h as f64..0.85 * h as f64);
        let cx = rng.random_range(0.15 * w as f64..0.85 * w as f64);
        let sigma = rng.random_range(0.15..0.35) * h.min(w) as f64;
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        for i in 0..h {
            for j in 0..w {
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                bg[i * w + j] += amp * (-(dy * dy + dx * dx) * inv2s2).exp();
            }
        }
    }
    let peak = bg.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    for v in &mut bg {
        *v *= BACKGROUND_PEAK / peak;
    }

    let mut mask = vec![0.0f64; h * w];
    let n_lesions = rng.random_range(1..=MAX_LESIONS);
    for _ in 0..n_lesions {
        let margin = 8.0;
        let cy = rng.random_range(margin..h as f64 - margin);
        let cx = rng.random_range(margin..w as f64 - margin);
        let a = rng.random_range(2.0..6.0);
        let b = rng.random_range(2.0..6.0);
        let phi = rng.random_range(0.0..std::f64::consts::PI);
        let (sp, cp) = phi.sin_cos();
        let lo_i = (cy - 7.0).floor().max(0.0) as usize;
        let hi_i = ((cy + 7.0).ceil() as usize).min(h - 1);
        let lo_j = (cx - 7.0).floor().max(0.0) as usize;
        let hi_j = ((cx + 7.0).ceil() as usize).min(w - 1);
        for i in lo_i..=hi_i {
            for j in lo_j..=hi_j {
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                let u = (dx * cp + dy * sp) / a;
                let v = (-dx * sp + dy * cp) / b;
                if u * u + v * v <= 1.0 {
                    mask[i * w + j] = 1.0;
                }
            }
        }
    }

    let image: Vec<f64> = bg
        .iter()
        .zip(&mask)
        .map(|(b, m)| b + LESION_BOOST * m)
        .collect();
    (
        Tensor::new(vec![h, w], image).expect("image shape"),
        Tensor::new(vec![h, w], mask).expect("mask shape"),
    )
}

/// Scanner transform: clip01(gain * blur(clean)^gamma_contrast + bias +
/// N(0, sigma^2)). The mask is never touched.
pub fn apply_domain<R: Rng>(clean: &Tensor, spec: &DomainSpec, rng: &mut R) -> Tensor {
    let (h, w) = (clean.shape()[0], clean.shape()[1]);
    let mut img = if spec.blur_radius > 0 {
        box_blur(clean.data(), h, w, spec.blur_radius)
    } else {
        clean.data().to_vec()
    };
    for v in &mut img {
        let mut x = v.max(0.0).powf(spec.gamma_contrast);
        x = spec.gain * x + spec.bias;
        if spec.noise_sigma > 0.0 {
            x += spec.noise_sigma * standard_normal(rng);
        }
        *v = x.clamp(0.0, 1.0);
    }
    Tensor::new(vec![h, w], img).expect("image shape")
}

/// Mean filter over a (2r+1)^2 window with edge clamping.
fn box_blur(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let r = r as isize;
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            let mut count = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let y = (i + di).clamp(0, h as isize - 1) as usize;
                    let x = (j + dj).clamp(0, w as isize - 1) as usize;
                    acc += src[y * w + x];
                    count += 1.0;
                }
            }
            out[i as usize * w + j as usize] = acc / count;
        }
    }
    out
}

/// The default three domains are deliberately well separated: an identity
/// scanner, a bright blurred one, and a dark noisy one.
pub fn default_specs(k: usize) -> Vec<DomainSpec> {
    let mut specs = vec![
        DomainSpec::identity("D0"),
        DomainSpec {
            name: "D1".into(),
            gain: 1.3,
            bias: 0.1,
            gamma_contrast: 1.0,
            noise_sigma: 0.0,
            blur_radius: 1,
        },
        DomainSpec {
            name: "D2".into(),
            gain: 1.0,
            bias: 0.0,
            gamma_contrast: 1.8,
            noise_sigma: 0.06,
            blur_radius: 0,
        },
    ];
    // beyond the three defaults: cycle parameter variations
    for d in 3..k {
        let t = (d - 2) as f64;
        specs.push(DomainSpec {
            name: format!("D{d}"),
            gain: 1.0 + 0.15 * t,
            bias: 0.05 * t,
            gamma_contrast: 1.0 + 0.25 * t,
            noise_sigma: 0.02 * t,
            blur_radius: d % 2,
        });
    }
    specs.truncate(k);
    specs
}

/// Build the benchmark: k domains of n subjects each. Anatomy streams are
/// keyed by global case id only, so lesion statistics are identically
/// distributed across domains; the per-domain transform is the only shift.
pub fn build_benchmark(
    seed: u64,
    k_domains: usize,
    n_per_domain: usize,
    h: usize,
    w: usize,
) -> Result<Vec<DomainDataset>, SynthError> {
    if k_domains < 3 {
        return Err(SynthError::TooFewDomains(k_domains));
    }
    let specs = default_specs(k_domains);
    build_with_specs(seed, &specs, n_per_domain, h, w)
}

pub fn build_with_specs(
    seed: u64,
    specs: &[DomainSpec],
    n_per_domain: usize,
    h: usize,
    w: usize,
) -> Result<Vec<DomainDataset>, SynthError> {
    for s in specs {
        s.validate()?;
    }
    let mut out = Vec::with_capacity(specs.len());
    for (d, spec) in specs.iter().enumerate() {
        let mut subjects = Vec::with_capacity(n_per_domain);
        for i in 0..n_per_domain {
            let case_id = d * n_per_domain + i;
            subjects.push(render_subject(seed, case_id, d, spec, h, w));
        }
        out.push(DomainDataset { domain_id: d, spec: spec.clone(), subjects });
    }
    Ok(out)
}

fn render_subject(
    seed: u64,
    case_id: usize,
    domain_id: usize,
    spec: &DomainSpec,
    h: usize,
    w: usize,
) -> Subject {
    let mut anat_rng = derive_rng(seed, &format!("anatomy/{case_id}"));
    let (clean, mask) = generate_anatomy(&mut anat_rng, h, w);
    let mut noise_rng = derive_rng(seed, &format!("noise/{case_id}"));
    let image = apply_domain(&clean, spec, &mut noise_rng);
    let image =
        Tensor::new(vec![1, h, w], image.data().to_vec()).expect("channel dim");
    Subject { image, mask, domain_id, case_id }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{connected_components, BinaryMask};
    use crate::stats::{ks_critical_001, ks_statistic_two_sample, mean};

    #[test]
    fn anatomy_always_has_lesions_brighter_than_background() {
        for seed in 0..10u64 {
            let mut rng = derive_rng(seed, "anat-test");
            let (img, mask) = generate_anatomy(&mut rng, 48, 48);
            let fg: f64 = mask.data().iter().sum();
            assert!(fg > 0.0);
            for (v, m) in img.data().iter().zip(mask.data()) {
                if *m == 1.0 {
                    // additive construction: lesion pixel = background + boost
                    assert!(*v >= LESION_BOOST);
                }
                assert!(*v >= 0.0 && *v <= 1.0);
            }
        }
    }

    #[test]
    fn anatomy_is_reproducible() {
        let mut r1 = derive_rng(5, "anat-rep");
        let mut r2 = derive_rng(5, "anat-rep");
        let (i1, m1) = generate_anatomy(&mut r1, 32, 32);
        let (i2, m2) = generate_anatomy(&mut r2, 32, 32);
        assert_eq!(i1.data(), i2.data());
        assert_eq!(m1.data(), m2.data());
    }

    #[test]
    fn identity_spec_preserves_image() {
        let mut rng = derive_rng(6, "identity-spec");
        let (clean, _) = generate_anatomy(&mut rng, 32, 32);
        let spec = DomainSpec::identity("id");
        let mut nrng = derive_rng(7, "identity-noise");
        let out = apply_domain(&clean, &spec, &mut nrng);
        assert_eq!(out.data(), clean.data());
    }

    #[test]
    fn bias_shifts_intensity() {
        let clean = Tensor::full(vec![32, 32], 0.5);
        let spec = DomainSpec { bias: 0.2, ..DomainSpec::identity("b") };
        let mut rng = derive_rng(8, "bias");
        let out = apply_domain(&clean, &spec, &mut rng);
        for v in out.data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_sigma_matches_sample_std() {
        let clean = Tensor::full(vec![64, 64], 0.5);
        let spec = DomainSpec { noise_sigma: 0.05, ..DomainSpec::identity("n") };
        let mut rng = derive_rng(9, "noise-std");
        let out = apply_domain(&clean, &spec, &mut rng);
        let diffs: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
        let m = mean(&diffs);
        let std = (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!((std - 0.05).abs() < 0.005, "std {std}");
    }

    #[test]
    fn benchmark_counts_and_reproducibility() {
        let data = build_benchmark(42, 3, 6, 32, 32).unwrap();
        assert_eq!(data.iter().map(|d| d.subjects.len()).sum::<usize>(), 18);
        let again = build_benchmark(42, 3, 6, 32, 32).unwrap();
        for (a, b) in data.iter().zip(&again) {
            for (sa, sb) in a.subjects.iter().zip(&b.subjects) {
                assert_eq!(sa.image.data(), sb.image.data());
                assert_eq!(sa.mask.data(), sb.mask.data());
            }
        }
        assert!(build_benchmark(1, 2, 4, 32, 32).is_err());
    }

    #[test]
    fn masks_identical_across_domain_transforms() {
        // re-render case 0 under every default spec: mask must not move
        let specs = default_specs(3);
        let masks: Vec<Tensor> = specs
            .iter()
            .map(|s| render_subject(11, 0, 0, s, 32, 32).mask)
            .collect();
        for m in &masks[1..] {
            assert_eq!(m.data(), masks[0].data());
        }
    }

    #[test]
    fn domain_mean_intensities_are_separated() {
        let data = build_benchmark(13, 3, 20, 64, 64).unwrap();
        let means: Vec<f64> = data
            .iter()
            .map(|d| {
                mean(
                    &d.subjects
                        .iter()
                        .map(|s| mean(s.image.data()))
                        .collect::<Vec<f64>>(),
                )
            })
            .collect();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                assert!(
                    (means[i] - means[j]).abs() > 0.05,
                    "domains {i} and {j} too close: {means:?}"
                );
            }
        }
    }

    #[test]
    fn lesion_statistics_domain_balanced() {
        let data = build_benchmark(17, 3, 60, 64, 64).unwrap();
        let stats: Vec<(Vec<f64>, Vec<f64>)> = data
            .iter()
            .map(|d| {
                let mut counts = Vec::new();
                let mut sizes = Vec::new();
                for s in &d.subjects {
                    let bm = BinaryMask::from_mask_tensor(&s.mask).unwrap();
                    let cc = connected_components(&bm);
                    counts.push(cc.count as f64);
                    for c in 1..=cc.count {
                        sizes.push(cc.labels.iter().filter(|&&l| l == c as u32).count() as f64);
                    }
                }
                (counts, sizes)
            })
            .collect();
        for i in 0..stats.len() {
            for j in i + 1..stats.len() {
                let d_count = ks_statistic_two_sample(&stats[i].0, &stats[j].0);
                assert!(
                    d_count < ks_critical_001(stats[i].0.len(), stats[j].0.len()),
                    "lesion counts differ between domains {i} and {j}: {d_count}"
                );
                let d_size = ks_statistic_two_sample(&stats[i].1, &stats[j].1);
                assert!(
                    d_size < ks_critical_001(stats[i].1.len(), stats[j].1.len()),
                    "lesion sizes differ between domains {i} and {j}: {d_size}"
                );
            }
        }
    }
}
