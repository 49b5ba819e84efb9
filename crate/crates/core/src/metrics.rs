//! Evaluation scores.

use crate::error::{Error, Result};

/// Foreground IoU of two binary masks given as flat slices of 0/1 values.
/// An empty union scores 1.
pub fn iou(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("iou", &[pred.len()], &[gt.len()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Arithmetic mean of per-sample foreground IoU.
pub fn mean_iou<P: AsRef<[f64]>, G: AsRef<[f64]>>(pred: &[P], gt: &[G]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::contract(
            "mean_iou",
            format!("{} predictions for {} ground-truth masks", pred.len(), gt.len()),
        ));
    }
    let total = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| iou(p.as_ref(), g.as_ref()))
        .sum::<Result<f64>>()?;
    Ok(total / pred.len() as f64)
}

/// 1-based ranks with ties sharing the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        order[i..=j].iter().for_each(|&k| ranks[k] = rank);
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Spearman correlation of two equally sized maps; 0 if either is constant.
pub fn rank_correlation(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("rank_correlation", &[pred.len()], &[gt.len()]));
    }
    if pred.len() < 2 {
        return Err(Error::contract("rank_correlation", "need at least 2 pixels"));
    }
    Ok(pearson(&average_ranks(pred), &average_ranks(gt)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(n²) ranking: 1 + (#strictly smaller) + (#equal others)/2.
    fn brute_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(i, x)| {
                let less = v.iter().filter(|y| *y < x).count() as f64;
                let ties = v.iter().enumerate().filter(|(j, y)| *j != i && *y == x).count() as f64;
                1.0 + less + ties / 2.0
            })
            .collect()
    }

    fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
        let (ra, rb) = (brute_ranks(a), brute_ranks(b));
        let n = a.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn iou_examples() {
        let m = [1.0, 0.0, 1.0, 1.0];
        assert_eq!(iou(&m, &m).unwrap(), 1.0);
        let pred = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let gt = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert!((iou(&pred, &gt).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(iou(&[0.0; 5], &[0.0; 5]).unwrap(), 1.0);
        assert!(iou(&[0.0; 5], &[0.0; 4]).is_err());
        let mi = mean_iou(&[pred.to_vec(), m.to_vec()], &[gt.to_vec(), m.to_vec()]).unwrap();
        assert!((mi - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 2.0, 3.0];
        let b = [1.0, 3.0, 2.0, 2.0];
        let got = rank_correlation(&a, &b).unwrap();
        assert!((got - brute_spearman(&a, &b)).abs() < 1e-12);
        assert!((got - 0.5).abs() < 1e-12);
        let x = [0.3, -1.0, 2.0, 5.0, 0.1];
        assert!((rank_correlation(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((rank_correlation(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(rank_correlation(&[2.0; 4], &x[..4]).unwrap(), 0.0);
        assert!(rank_correlation(&[1.0], &[1.0]).is_err());
    }

    fn mask(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), n)
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded_and_exact(a in mask(30), b in mask(30)) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
        }

        #[test]
        fn spearman_matches_brute_force(v in prop::collection::vec(0i32..6, 2..40), w in prop::collection::vec(0i32..6, 40)) {
            let a: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let b: Vec<f64> = w[..a.len()].iter().map(|&x| x as f64).collect();
            prop_assert_eq!(average_ranks(&a), brute_ranks(&a));
            let got = rank_correlation(&a, &b).unwrap();
            let constant = |s: &[f64]| s.iter().all(|x| *x == s[0]);
            let want = if constant(&a) || constant(&b) { 0.0 } else { brute_spearman(&a, &b) };
            prop_assert!((got - want).abs() < 1e-12);
        }

        #[test]
        fn spearman_invariant_under_monotone_maps(v in prop::collection::vec(-5.0f64..5.0, 2..30), w in prop::collection::vec(-5.0f64..5.0, 30)) {
            let b = &w[..v.len()];
            let mapped: Vec<f64> = v.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            let r1 = rank_correlation(&v, b).unwrap();
            let r2 = rank_correlation(&mapped, b).unwrap();
            prop_assert!((r1 - r2).abs() < 1e-12);
        }
    }
}
