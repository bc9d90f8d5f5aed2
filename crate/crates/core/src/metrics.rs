//! Image-quality and verification metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

fn check_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "images disagree: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10 log10(peak² / MSE)`; identical images give `+inf`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Gaussian-windowed SSIM averaged over channels and valid window positions.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, cfg: &SsimConfig) -> Result<f64> {
    check_dims(a, b)?;
    let (c, h, w) = a.dims();
    if cfg.window == 0 || h < cfg.window || w < cfg.window {
        return Err(Error::Shape(format!(
            "SSIM window {} does not fit a {h}x{w} image",
            cfg.window
        )));
    }
    let taps = gaussian_taps(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa: Vec<f64> = a.plane(ch).iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.plane(ch).iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean and covariance of a set of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Shape(format!(
                "covariance is {}x{}, mean has {d} entries",
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov, n })
    }

    /// Sample statistics with the unbiased `n − 1` covariance (zero for one row).
    pub fn from_samples(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Shape("no samples".into()))?;
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("samples have differing dimensions".into()));
        }
        let mut mean = DVector::zeros(d);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let x = DVector::from_column_slice(r) - &mean;
            cov += &x * x.transpose();
        }
        if n > 1 {
            cov /= (n - 1) as f64;
        }
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`, clipped at 0.
///
/// `Tr((Σ1Σ2)^{1/2})` is evaluated as the trace of the square root of the
/// symmetric matrix `√Σ1 Σ2 √Σ1`, which has the same spectrum.
pub fn frechet_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(Error::Shape(format!(
            "statistics have dimensions {} and {}",
            s1.dim(),
            s2.dim()
        )));
    }
    let diff = &s1.mean - &s2.mean;
    let r1 = psd_sqrt(&s1.cov);
    let inner = &r1 * &s2.cov * &r1;
    let cross = psd_sqrt(&inner).trace();
    let d = diff.norm_squared() + s1.cov.trace() + s2.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationPair {
    pub embedding_a: Vec<f64>,
    pub embedding_b: Vec<f64>,
    pub same_identity: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "embeddings of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub auc: f64,
    pub tpr_at_1pct: f64,
    pub tpr_at_0p1pct: f64,
    /// `(fpr, tpr)` vertices from `(0, 0)` to `(1, 1)`.
    pub curve: Vec<(f64, f64)>,
}

impl RocReport {
    /// TPR at `fpr` by linear interpolation; on a vertical segment the
    /// highest TPR reached at that abscissa is used.
    pub fn tpr_at(&self, fpr: f64) -> f64 {
        let mut best = (0.0, 0.0);
        for &(x, y) in &self.curve {
            if x <= fpr {
                best = (x, y);
            } else {
                let (x0, y0) = best;
                return y0 + (y - y0) * (fpr - x0) / (x - x0);
            }
        }
        best.1
    }
}

/// ROC from raw scores; `labels[i]` marks a genuine pair.
///
/// Equal scores form a single threshold step, so AUC is the Mann–Whitney
/// statistic with ties counted as one half.
pub fn roc_from_scores(scores: &[f64], labels: &[bool]) -> Result<RocReport> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("NaN verification score".into()));
    }
    let p = labels.iter().filter(|&&l| l).count() as u128;
    let n = labels.len() as u128 - p;
    if p == 0 || n == 0 {
        return Err(Error::Contract(
            "ROC needs both genuine and impostor pairs".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());

    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut twice_area = 0u128;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gtp, mut gfp) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                gtp += 1;
            } else {
                gfp += 1;
            }
            i += 1;
        }
        twice_area += (2 * tp + gtp) * gfp;
        tp += gtp;
        fp += gfp;
        curve.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    let mut report = RocReport {
        auc: twice_area as f64 / (2 * p * n) as f64,
        tpr_at_1pct: 0.0,
        tpr_at_0p1pct: 0.0,
        curve,
    };
    report.tpr_at_1pct = report.tpr_at(0.01);
    report.tpr_at_0p1pct = report.tpr_at(0.001);
    Ok(report)
}

/// Cosine-scored ROC over verification pairs.
pub fn roc_auc(pairs: &[VerificationPair]) -> Result<RocReport> {
    let scores = pairs
        .iter()
        .map(|p| cosine_similarity(&p.embedding_a, &p.embedding_b))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.same_identity).collect();
    roc_from_scores(&scores, &labels)
}

/// Serializes non-finite floats as `"inf"`, `"-inf"` or `"nan"`.
pub mod float_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("invalid float `{other}`"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = ImageTensor::filled(3, 8, 8, 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let z = ImageTensor::zeros(1, 4, 4);
        let o = ImageTensor::filled(1, 4, 4, 1.0);
        assert_eq!(psnr(&z, &o, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn ssim_of_identical_is_one() {
        let mut a = ImageTensor::zeros(3, 16, 16);
        for (i, v) in a.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f32 / 100.0;
        }
        assert!((ssim(&a, &a, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(
            &ImageTensor::zeros(1, 8, 8),
            &ImageTensor::zeros(1, 8, 8),
            &SsimConfig::default()
        )
        .is_err());
    }

    #[test]
    fn frechet_dimension_mismatch() {
        let a = GaussianStats::from_samples(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let b = GaussianStats::from_samples(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn roc_needs_both_classes() {
        assert!(roc_from_scores(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn float_repr_round_trip() {
        #[derive(Serialize, Deserialize)]
        struct W(#[serde(with = "float_repr")] f64);
        assert_eq!(serde_json::to_string(&W(f64::INFINITY)).unwrap(), "\"inf\"");
        let back: W = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(back.0, f64::INFINITY);
        let back: W = serde_json::from_str("2.5").unwrap();
        assert_eq!(back.0, 2.5);
    }
}
