use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metrics::DcfParams;

/// Error rates when accepting every trial with `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfResult {
    pub raw: f64,
    pub normalized: f64,
    pub threshold: f64,
}

impl DcfResult {
    /// The value selected by `p.normalize`.
    pub fn value(&self, p: &DcfParams) -> f64 {
        if p.normalize {
            self.normalized
        } else {
            self.raw
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub probit_far: f64,
    pub probit_frr: f64,
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch { left: scores.len(), right: labels.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Malformed { what: "scores", msg: "non-finite score".into() });
    }
    let n_tar = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tar;
    if n_tar == 0 {
        return Err(Error::EmptyClass("target"));
    }
    if n_non == 0 {
        return Err(Error::EmptyClass("nontarget"));
    }
    Ok((n_tar, n_non))
}

/// `(FAR, FRR)` at one threshold: nontargets scoring `>= threshold` are
/// false accepts, targets scoring below it are false rejects.
pub fn far_frr(scores: &[f64], labels: &[bool], threshold: f64) -> Result<(f64, f64)> {
    let (n_tar, n_non) = class_counts(scores, labels)?;
    let mut fa = 0usize;
    let mut miss = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        match (l, s >= threshold) {
            (false, true) => fa += 1,
            (true, false) => miss += 1,
            _ => {}
        }
    }
    Ok((fa as f64 / n_non as f64, miss as f64 / n_tar as f64))
}

/// One operating point per distinct score (ascending) plus `+∞`, where
/// everything is rejected. FAR is non-increasing and FRR non-decreasing
/// along the sequence.
pub fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<OperatingPoint>> {
    let (n_tar, n_non) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut points = Vec::new();
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        points.push(OperatingPoint {
            threshold: v,
            far: (n_non - non_below) as f64 / n_non as f64,
            frr: tar_below as f64 / n_tar as f64,
        });
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint { threshold: f64::INFINITY, far: 0.0, frr: 1.0 });
    Ok(points)
}

/// Equal error rate from a sweep of operating points; linear interpolation
/// between the two points where `FAR - FRR` changes sign.
pub(crate) fn eer_from_points(points: &[OperatingPoint]) -> f64 {
    let mut prev = points[0];
    for &p in points {
        let d = p.far - p.frr;
        if d == 0.0 {
            return p.far;
        }
        if d < 0.0 {
            let dp = prev.far - prev.frr;
            let t = dp / (dp - d);
            return prev.far + t * (p.far - prev.far);
        }
        prev = p;
    }
    unreachable!("the +inf operating point always has FAR < FRR")
}

pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(eer_from_points(&operating_points(scores, labels)?))
}

fn dcf_of(p: &DcfParams, far: f64, frr: f64) -> f64 {
    p.c_fr * p.p_target * frr + p.c_fa * (1.0 - p.p_target) * far
}

/// Detection cost at a single threshold.
pub fn dcf_at(scores: &[f64], labels: &[bool], threshold: f64, p: &DcfParams) -> Result<DcfResult> {
    p.validate()?;
    let (far, frr) = far_frr(scores, labels, threshold)?;
    let raw = dcf_of(p, far, frr);
    Ok(DcfResult { raw, normalized: raw / p.default_cost(), threshold })
}

pub(crate) fn min_dcf_from_points(points: &[OperatingPoint], p: &DcfParams) -> DcfResult {
    let mut best = DcfResult { raw: f64::INFINITY, normalized: f64::INFINITY, threshold: f64::INFINITY };
    for pt in points {
        let raw = dcf_of(p, pt.far, pt.frr);
        if raw < best.raw {
            best = DcfResult { raw, normalized: raw / p.default_cost(), threshold: pt.threshold };
        }
    }
    best
}

/// Minimum detection cost over every distinct-score threshold plus the
/// reject-all point; the lowest score is the accept-all point.
pub fn min_dcf(scores: &[f64], labels: &[bool], p: &DcfParams) -> Result<DcfResult> {
    p.validate()?;
    Ok(min_dcf_from_points(&operating_points(scores, labels)?, p))
}

/// Standard normal quantile; `±∞` at 0 and 1.
pub fn probit(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn det_points(scores: &[f64], labels: &[bool]) -> Result<Vec<DetPoint>> {
    Ok(operating_points(scores, labels)?
        .into_iter()
        .map(|p| DetPoint {
            threshold: p.threshold,
            far: p.far,
            frr: p.frr,
            probit_far: probit(p.far),
            probit_frr: probit(p.frr),
        })
        .collect())
}
