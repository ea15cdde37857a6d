//! Statistical tests used by the evaluation report: Kruskal-Wallis,
//! paired t-test, Bland-Altman limits of agreement, and Spearman
//! correlation.

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{FovxError, Result};

/// Average (midrank) ranks, 1-based, with ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the mean of ranks i+1..=j+1
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FovxError::Validation(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Kruskal-Wallis H test across `groups`, with the standard tie correction.
/// Returns (H, p) where p is from the chi-squared approximation with
/// k - 1 degrees of freedom.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<(f64, f64)> {
    if groups.len() < 2 {
        return Err(FovxError::Validation("Kruskal-Wallis needs >= 2 groups".into()));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(FovxError::Validation("Kruskal-Wallis groups must be non-empty".into()));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    check_finite(&pooled, "Kruskal-Wallis input")?;
    let n = pooled.len() as f64;
    let ranks = average_ranks(&pooled);
    let mut h = 0.0;
    let mut offset = 0;
    for g in groups {
        let ni = g.len();
        let ri: f64 = ranks[offset..offset + ni].iter().sum();
        h += ri * ri / ni as f64;
        offset += ni;
    }
    h = 12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0);
    // tie correction: divide by 1 - sum(t^3 - t) / (N^3 - N)
    let mut sorted = pooled.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    let correction = 1.0 - tie_sum / (n * n * n - n);
    if correction <= 0.0 {
        // every pooled value identical: no evidence against the null
        return Ok((0.0, 1.0));
    }
    h /= correction;
    let df = (groups.len() - 1) as f64;
    let chi = ChiSquared::new(df).map_err(|e| FovxError::Validation(e.to_string()))?;
    let p = 1.0 - chi.cdf(h.max(0.0));
    Ok((h, p))
}

/// Two-sided paired t-test on matched samples. Returns (t, p).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(FovxError::Validation("paired t-test needs equal-length samples".into()));
    }
    if a.len() < 2 {
        return Err(FovxError::Validation("paired t-test needs >= 2 pairs".into()));
    }
    check_finite(a, "t-test input")?;
    check_finite(b, "t-test input")?;
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return if mean == 0.0 {
            Ok((0.0, 1.0))
        } else {
            Ok((f64::INFINITY * mean.signum(), 0.0))
        };
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| FovxError::Validation(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, p))
}

/// Bland-Altman agreement of `test` against `reference`:
/// (mean difference, sample SD of differences, lower LoA, upper LoA)
/// with limits of agreement at mean +/- 1.96 SD.
pub fn bland_altman(reference: &[f64], test: &[f64]) -> Result<(f64, f64, f64, f64)> {
    if reference.len() != test.len() {
        return Err(FovxError::Validation("Bland-Altman needs equal-length samples".into()));
    }
    if reference.len() < 2 {
        return Err(FovxError::Validation("Bland-Altman needs >= 2 pairs".into()));
    }
    check_finite(reference, "Bland-Altman input")?;
    check_finite(test, "Bland-Altman input")?;
    let n = reference.len() as f64;
    let diffs: Vec<f64> = test.iter().zip(reference).map(|(t, r)| t - r).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok((mean, sd, mean - 1.96 * sd, mean + 1.96 * sd))
}

/// Spearman rank correlation with the t-approximation two-sided p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(FovxError::Validation("Spearman needs equal-length samples".into()));
    }
    if x.len() < 3 {
        return Err(FovxError::Validation("Spearman needs >= 3 pairs".into()));
    }
    check_finite(x, "Spearman input")?;
    check_finite(y, "Spearman input")?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        // constant ranks: correlation undefined, report no association
        return Ok((0.0, 1.0));
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    if rho.abs() >= 1.0 {
        return Ok((rho, 0.0));
    }
    let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 2.0).map_err(|e| FovxError::Validation(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((rho, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties() {
        let r = average_ranks(&[10.0, 20.0, 20.0, 30.0]);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn kruskal_wallis_textbook_case() {
        // non-overlapping groups of rank 1-3, 4-6, 7-9: H = 7.2 exactly
        let groups = vec![
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ];
        let (h, p) = kruskal_wallis(&groups).unwrap();
        assert!((h - 7.2).abs() < 1e-12, "H = {h}");
        // chi2(df=2) survival at 7.2 = exp(-3.6)
        assert!((p - (-3.6f64).exp()).abs() < 1e-10, "p = {p}");
    }

    #[test]
    fn kruskal_wallis_identical_groups() {
        let g = vec![vec![1.0, 2.0, 3.0, 4.0]; 3];
        let (h, p) = kruskal_wallis(&g).unwrap();
        assert!(h.abs() < 1e-12);
        assert!((p - 1.0).abs() < 1e-12);
        let constant = vec![vec![5.0; 4]; 3];
        let (h, p) = kruskal_wallis(&constant).unwrap();
        assert_eq!((h, p), (0.0, 1.0));
    }

    #[test]
    fn kruskal_wallis_tie_correction_matches_hand_calc() {
        // groups {1,1,2} and {2,3,3}: ranks 1.5 1.5 3.5 / 3.5 5.5 5.5
        // R1=6.5, R2=14.5, H_raw = 12/42*(6.5^2+14.5^2)/3 - 21 = 2.428571...
        // ties: three pairs, sum(t^3-t) = 18, C = 1 - 18/210 = 32/35
        let groups = vec![vec![1.0, 1.0, 2.0], vec![2.0, 3.0, 3.0]];
        let (h, _) = kruskal_wallis(&groups).unwrap();
        let h_raw = 12.0 / (6.0 * 7.0) * (6.5f64.powi(2) + 14.5f64.powi(2)) / 3.0 - 3.0 * 7.0;
        let expect = h_raw / (32.0 / 35.0);
        assert!((h - expect).abs() < 1e-12, "H = {h}, expected {expect}");
    }

    #[test]
    fn paired_t_known_value() {
        // diffs = [1,1,1,1,2]: mean 1.2, sd = sqrt(0.2)
        // t = 1.2 / (sqrt(0.2)/sqrt(5)) = 6.0
        let a = vec![2.0, 3.0, 4.0, 5.0, 7.0];
        let b = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let (t, p) = paired_t_test(&a, &b).unwrap();
        assert!((t - 6.0).abs() < 1e-12, "t = {t}");
        assert!(p > 0.0 && p < 0.01, "p = {p}");
    }

    #[test]
    fn paired_t_identical_samples() {
        let a = vec![1.0, 2.0, 3.0];
        let (t, p) = paired_t_test(&a, &a).unwrap();
        assert_eq!((t, p), (0.0, 1.0));
    }

    #[test]
    fn paired_t_constant_nonzero_shift() {
        let a = vec![2.0, 3.0, 4.0];
        let b = vec![1.0, 2.0, 3.0];
        let (t, p) = paired_t_test(&a, &b).unwrap();
        assert!(t.is_infinite() && t > 0.0);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn bland_altman_hand_case() {
        let r = vec![1.0, 2.0, 3.0, 4.0];
        let t = vec![1.1, 2.3, 3.1, 4.3];
        let (mean, sd, lo, hi) = bland_altman(&r, &t).unwrap();
        assert!((mean - 0.2).abs() < 1e-12);
        let expect_sd = (0.04f64 / 3.0).sqrt();
        assert!((sd - expect_sd).abs() < 1e-12);
        assert!((lo - (0.2 - 1.96 * expect_sd)).abs() < 1e-12);
        assert!((hi - (0.2 + 1.96 * expect_sd)).abs() < 1e-12);
    }

    #[test]
    fn spearman_monotone_is_one() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        let (rho, p) = spearman(&x, &y).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        assert_eq!(p, 0.0);
        let y_rev: Vec<f64> = y.iter().rev().copied().collect();
        let (rho, _) = spearman(&x, &y_rev).unwrap();
        assert!((rho + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_classic_example() {
        // ranks differ by d = [0,-1,1,0]: rho = 1 - 6*2/(4*15) = 0.8
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y = vec![1.0, 3.0, 2.0, 4.0];
        let (rho, _) = spearman(&x, &y).unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(paired_t_test(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
        assert!(kruskal_wallis(&[vec![1.0], vec![f64::INFINITY]]).is_err());
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, f64::NAN]).is_err());
    }
}
