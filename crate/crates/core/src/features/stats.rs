use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::FeatureError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-theta form converges fast for small arguments.
        let w = PI * PI / (8.0 * lambda * lambda);
        let cdf: f64 = (1..=20)
            .map(|k| {
                let j = (2 * k - 1) as f64;
                (-j * j * w).exp()
            })
            .sum::<f64>()
            * (2.0 * PI).sqrt()
            / lambda;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-300 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, FeatureError> {
    if a.is_empty() || b.is_empty() {
        return Err(FeatureError::EmptySample);
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(FeatureError::InvalidSample);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);

    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    // Once one sample is exhausted the gap only shrinks toward zero.
    d = d.max((i as f64 / na - j as f64 / nb).abs());

    let ne = na * nb / (na + nb);
    Ok(KsResult { statistic: d, p_value: kolmogorov_survival(ne.sqrt() * d) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub x: u32,
    pub viral: f64,
    pub nonviral: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAnalysis {
    pub n_viral: usize,
    pub n_nonviral: usize,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub threshold: u32,
    /// `F_viral(t - 1) - F_nonviral(t - 1)` at the chosen threshold.
    pub separation: f64,
    /// Share of viral images with fewer than `threshold` words.
    pub viral_below: f64,
    /// Share of non-viral images with more than `threshold` words.
    pub nonviral_above: f64,
    /// Set when no threshold separates the classes in the viral direction.
    pub uninformative: bool,
    pub cdf: Vec<CdfPoint>,
}

fn ecdf(sorted: &[u32], x: u32) -> f64 {
    sorted.partition_point(|&c| c <= x) as f64 / sorted.len() as f64
}

/// Picks the word-count threshold that best separates short viral captions
/// from longer non-viral ones.
///
/// The threshold `t` maximises `F_viral(t - 1) - F_nonviral(t - 1)`, the gap
/// between the shares of each class with fewer than `t` words. Ties go to the
/// smallest `t`.
pub fn select_threshold(viral: &[u32], nonviral: &[u32]) -> Result<ThresholdAnalysis, FeatureError> {
    if viral.is_empty() {
        return Err(FeatureError::EmptyClass("viral"));
    }
    if nonviral.is_empty() {
        return Err(FeatureError::EmptyClass("non-viral"));
    }
    let mut v = viral.to_vec();
    let mut nv = nonviral.to_vec();
    v.sort_unstable();
    nv.sort_unstable();
    let max = v.last().copied().max(nv.last().copied()).unwrap_or(0);

    let cdf: Vec<CdfPoint> = (0..=max)
        .map(|x| CdfPoint { x, viral: ecdf(&v, x), nonviral: ecdf(&nv, x) })
        .collect();

    let mut best_t = 1;
    let mut best = f64::NEG_INFINITY;
    for p in &cdf {
        let sep = p.viral - p.nonviral;
        if sep > best {
            best = sep;
            best_t = p.x + 1;
        }
    }

    let as_f = |xs: &[u32]| xs.iter().map(|&c| c as f64).collect::<Vec<_>>();
    let ks = ks_two_sample(&as_f(&v), &as_f(&nv))?;
    let uninformative = best <= 0.0;

    Ok(ThresholdAnalysis {
        n_viral: v.len(),
        n_nonviral: nv.len(),
        ks_statistic: ks.statistic,
        p_value: ks.p_value,
        threshold: best_t,
        separation: best.max(0.0),
        viral_below: ecdf(&v, best_t - 1),
        nonviral_above: 1.0 - ecdf(&nv, best_t),
        uninformative,
        cdf,
    })
}

pub fn write_cdf_csv<W: Write>(
    cdf: &[CdfPoint],
    mut out: W,
    provenance: Option<&str>,
) -> Result<(), FeatureError> {
    if let Some(p) = provenance {
        writeln!(out, "# {p}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "F_viral", "F_nonviral"])?;
    for p in cdf {
        w.write_record([p.x.to_string(), p.viral.to_string(), p.nonviral.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
