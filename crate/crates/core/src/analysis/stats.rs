use crate::error::{Error, Result};
use serde::Serialize;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Input(format!("correlation inputs differ in length: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Input(format!("correlation needs at least 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("correlation inputs must be finite".into()));
    }
    Ok(())
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Run("correlation undefined: one variable has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrPoint {
    pub language: String,
    pub corpus_size: usize,
    pub log2_size: f64,
    pub accuracy_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrReport {
    pub pearson: f64,
    pub points: Vec<CorrPoint>,
}

/// Pearson correlation between per-language accuracy loss and log2 corpus size.
pub fn corr_accuracy_size(losses: &[(String, f64)], sizes: &[(String, usize)]) -> Result<CorrReport> {
    let points = losses
        .iter()
        .map(|(lang, loss)| {
            let &(_, n) = sizes
                .iter()
                .find(|(l, _)| l == lang)
                .ok_or_else(|| Error::Input(format!("no corpus size for language {lang}")))?;
            if n == 0 {
                return Err(Error::Input(format!("language {lang} has an empty corpus")));
            }
            Ok(CorrPoint { language: lang.clone(), corpus_size: n, log2_size: (n as f64).log2(), accuracy_loss: *loss })
        })
        .collect::<Result<Vec<_>>>()?;
    let x: Vec<f64> = points.iter().map(|p| p.log2_size).collect();
    let y: Vec<f64> = points.iter().map(|p| p.accuracy_loss).collect();
    Ok(CorrReport { pearson: pearson(&x, &y)?, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_input_is_one() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 2.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn permuted_pairing_changes_coefficient() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.1, 1.9, 3.2, 3.9, 5.1];
        let z = [3.2, 1.1, 5.1, 1.9, 3.9];
        assert!((pearson(&x, &y).unwrap() - pearson(&x, &z).unwrap()).abs() > 0.1);
    }

    #[test]
    fn zero_variance_and_short_inputs_fail() {
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Run(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Input(_))));
    }

    #[test]
    fn spearman_handles_ties_and_monotone_maps() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 8.0, 27.0, 64.0];
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn accuracy_size_report() {
        let losses = vec![("a".to_string(), 0.1), ("b".to_string(), 0.2), ("c".to_string(), 0.3)];
        let sizes = vec![("a".to_string(), 2), ("b".to_string(), 4), ("c".to_string(), 8)];
        let r = corr_accuracy_size(&losses, &sizes).unwrap();
        assert!((r.pearson - 1.0).abs() < 1e-12);
        assert_eq!(r.points[2].log2_size, 3.0);
        assert!(corr_accuracy_size(&losses, &sizes[..2]).is_err());
    }
}
