//! AUROC, FPR at a target TPR, orientation handling and score histograms.
//!
//! Convention: ID is the positive class and a higher score means ID.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{Orientation, ScoreRecord};

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Invalid(format!(
            "need scores on both sides, got {} ID and {} OOD",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Mann–Whitney AUROC: P(id > ood) + ½·P(id = ood).
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_scores(id, ood)?;
    let ood = sorted(ood);
    // Twice the credited pair count, kept exact in integers.
    let mut twice: u128 = 0;
    for &s in id {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice as f64 / (2 * id.len() as u128 * ood.len() as u128) as f64)
}

/// Smallest m with m/n ≥ target.
fn required_count(n: usize, target: f64) -> usize {
    let mut m = ((target * n as f64).ceil() as usize).clamp(1, n);
    while m > 1 && (m - 1) as f64 / n as f64 >= target {
        m -= 1;
    }
    while m < n && (m as f64 / n as f64) < target {
        m += 1;
    }
    m
}

/// Returns `(fpr, γ)` where γ is the largest threshold keeping at least
/// `tpr_target` of ID scores at or above it, and fpr is the fraction of
/// OOD scores ≥ γ.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<(f64, f64)> {
    check_scores(id, ood)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Invalid(format!("tpr target must lie in (0, 1], got {tpr_target}")));
    }
    let id_sorted = sorted(id);
    let m = required_count(id.len(), tpr_target);
    let gamma = id_sorted[id.len() - m];
    let false_pos = ood.iter().filter(|&&o| o >= gamma).count();
    Ok((false_pos as f64 / ood.len() as f64, gamma))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrientationPolicy {
    Fixed(Orientation),
    /// Whichever orientation gives AUROC ≥ 0.5.
    Auto,
}

impl std::str::FromStr for OrientationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-is" => Ok(Self::Fixed(Orientation::AsIs)),
            "negated" => Ok(Self::Fixed(Orientation::Negated)),
            "auto" => Ok(Self::Auto),
            _ => Err(Error::Invalid(format!("unknown orientation `{s}` (known: as-is, negated, auto)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OODMetrics {
    pub field: String,
    pub auroc: f64,
    pub fpr95: f64,
    /// γ on the oriented scale.
    pub threshold: f64,
    pub tpr_target: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub orientation: Orientation,
    pub auroc_as_is: f64,
    pub auroc_negated: f64,
}

pub fn evaluate_scores(
    field: &str,
    id: &[f64],
    ood: &[f64],
    policy: OrientationPolicy,
    tpr_target: f64,
) -> Result<OODMetrics> {
    let auroc_as_is = auroc(id, ood)?;
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    let (id_neg, ood_neg) = (neg(id), neg(ood));
    let auroc_negated = auroc(&id_neg, &ood_neg)?;
    let orientation = match policy {
        OrientationPolicy::Fixed(o) => o,
        OrientationPolicy::Auto if auroc_as_is >= 0.5 => Orientation::AsIs,
        OrientationPolicy::Auto => Orientation::Negated,
    };
    let (id_o, ood_o, au) = match orientation {
        Orientation::AsIs => (id, ood, auroc_as_is),
        Orientation::Negated => (id_neg.as_slice(), ood_neg.as_slice(), auroc_negated),
    };
    let (fpr95, threshold) = fpr_at_tpr(id_o, ood_o, tpr_target)?;
    Ok(OODMetrics {
        field: field.to_string(),
        auroc: au,
        fpr95,
        threshold,
        tpr_target,
        n_id: id.len(),
        n_ood: ood.len(),
        orientation,
        auroc_as_is,
        auroc_negated,
    })
}

pub fn extract(records: &[ScoreRecord], field: &str) -> Result<Vec<f64>> {
    records.iter().map(|r| r.field(field)).collect()
}

/// Metrics for one score field of two record sets.
pub fn evaluate(
    id_records: &[ScoreRecord],
    ood_records: &[ScoreRecord],
    field: &str,
    policy: OrientationPolicy,
    tpr_target: f64,
) -> Result<OODMetrics> {
    let id = extract(id_records, field)?;
    let ood = extract(ood_records, field)?;
    evaluate_scores(field, &id, &ood, policy, tpr_target)
}

/// CSV `bin,lower,upper,id_count,ood_count` over `bins` equal-width bins
/// spanning the joint [min, max]. The last bin is closed on the right.
pub fn histogram_csv(id: &[f64], ood: &[f64], bins: usize) -> Result<String> {
    if bins < 2 {
        return Err(Error::Invalid(format!("need at least 2 bins, got {bins}")));
    }
    check_scores(id, ood)?;
    let lo = id.iter().chain(ood).copied().fold(f64::INFINITY, f64::min);
    let hi = id.iter().chain(ood).copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("infinite score in histogram".into()));
    }
    let width = (hi - lo) / bins as f64;
    let bin_of = |x: f64| {
        if width > 0.0 {
            (((x - lo) / width) as usize).min(bins - 1)
        } else {
            0
        }
    };
    let mut counts = vec![(0usize, 0usize); bins];
    for &x in id {
        counts[bin_of(x)].0 += 1;
    }
    for &x in ood {
        counts[bin_of(x)].1 += 1;
    }
    let mut s = String::from("bin,lower,upper,id_count,ood_count\n");
    for (b, (ci, co)) in counts.iter().enumerate() {
        let lower = lo + width * b as f64;
        let upper = if b + 1 == bins { hi } else { lo + width * (b + 1) as f64 };
        writeln!(s, "{b},{lower},{upper},{ci},{co}").expect("string write");
    }
    Ok(s)
}

pub fn histogram_export(id: &[f64], ood: &[f64], bins: usize, path: &Path) -> Result<()> {
    let csv = histogram_csv(id, ood, bins)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.0], &[1.0]).unwrap(), 0.0);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn fpr_examples() {
        let (fpr, _) = fpr_at_tpr(&[5.0, 6.0, 7.0], &[0.0, 1.0], 0.95).unwrap();
        assert_eq!(fpr, 0.0);
        let s: Vec<f64> = (0..20).map(f64::from).collect();
        let (fpr, gamma) = fpr_at_tpr(&s, &s, 0.95).unwrap();
        assert_eq!(gamma, 1.0);
        assert!(fpr >= 0.95 - 1.0 / 20.0);
        assert!(fpr_at_tpr(&s, &s, 0.0).is_err());
    }

    #[test]
    fn required_count_is_minimal() {
        for n in 1..200 {
            for t in [0.05, 0.5, 0.9, 0.95, 0.99, 1.0] {
                let m = required_count(n, t);
                assert!(m as f64 / n as f64 >= t);
                assert!(m == 1 || ((m - 1) as f64 / n as f64) < t);
            }
        }
    }

    #[test]
    fn auto_policy_and_honest_fixed() {
        let id = [0.0, 1.0, 2.0];
        let ood = [5.0, 6.0];
        let m = evaluate_scores("x", &id, &ood, OrientationPolicy::Auto, 0.95).unwrap();
        assert_eq!((m.auroc, m.orientation), (1.0, Orientation::Negated));
        let m = evaluate_scores("x", &id, &ood, OrientationPolicy::Fixed(Orientation::AsIs), 0.95).unwrap();
        assert_eq!(m.auroc, 0.0);
        assert_eq!(m.auroc_as_is + m.auroc_negated, 1.0);
    }

    #[test]
    fn histogram_counts() {
        let csv = histogram_csv(&[0.0, 0.5, 1.0], &[0.25, 1.0], 4).unwrap();
        let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
        let id: usize = rows.iter().map(|r| r[3].parse::<usize>().unwrap()).sum();
        let ood: usize = rows.iter().map(|r| r[4].parse::<usize>().unwrap()).sum();
        assert_eq!((id, ood), (3, 2));
        let single = histogram_csv(&[2.0, 2.0], &[2.0], 3).unwrap();
        assert!(single.lines().nth(1).unwrap().ends_with(",2,1"));
        assert!(histogram_csv(&[1.0], &[1.0], 1).is_err());
        assert_eq!(histogram_csv(&[0.1, 0.7], &[0.3], 5).unwrap(), histogram_csv(&[0.1, 0.7], &[0.3], 5).unwrap());
    }
}
