//! Small statistics helpers shared by the samplers, the synthetic data
//! checks, and the acceptance suite.

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by n).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// One-sample Kolmogorov-Smirnov statistic against Uniform(0, 1).
pub fn ks_statistic_uniform(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let cdf = x.clamp(0.0, 1.0);
        let hi = (i as f64 + 1.0) / n - cdf;
        let lo = cdf - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Critical KS value at significance 0.01: c(0.01) * sqrt((n + m) / (n m))
/// for two samples, or c(0.01) / sqrt(n) for one sample (pass m = 0).
pub fn ks_critical_001(n: usize, m: usize) -> f64 {
    const C: f64 = 1.628;
    if m == 0 {
        C / (n as f64).sqrt()
    } else {
        C * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    #[test]
    fn ks_accepts_true_uniform() {
        let mut rng = derive_rng(3, "ks-uniform");
        let samples: Vec<f64> = (0..50_000).map(|_| rng.random()).collect();
        let d = ks_statistic_uniform(&samples);
        assert!(d < ks_critical_001(samples.len(), 0), "d = {d}");
    }

    #[test]
    fn ks_rejects_shifted_sample() {
        let mut rng = derive_rng(4, "ks-shifted");
        let samples: Vec<f64> = (0..50_000).map(|_| rng.random::<f64>().powi(2)).collect();
        let d = ks_statistic_uniform(&samples);
        assert!(d > ks_critical_001(samples.len(), 0));
    }

    #[test]
    fn two_sample_ks_same_distribution() {
        let mut rng = derive_rng(5, "ks-two");
        let a: Vec<f64> = (0..5_000).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..5_000).map(|_| rng.random()).collect();
        let d = ks_statistic_two_sample(&a, &b);
        assert!(d < ks_critical_001(a.len(), b.len()), "d = {d}");
    }
}
