use itertools::Itertools;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{Error, Result};

/// Largest n for which p is computed by enumerating every rank ordering.
pub const EXACT_MAX_N: usize = 9;

pub const ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    /// Two-sided, t = rho * sqrt((n - 2) / (1 - rho^2)) on n - 2 degrees of freedom.
    TApproximation,
    /// Two-sided fraction of all n! orderings of y with |rho| at least the observed.
    ExactPermutation,
    /// Undefined: one input is constant.
    None,
}

/// Spearman rank correlation. `rho` and `p_value` are `None` when the result
/// is degenerate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    pub n: usize,
    pub degenerate: bool,
    pub p_method: PMethod,
    /// Tie handling and p method in words.
    pub method: String,
}

impl CorrelationResult {
    pub fn significant(&self) -> bool {
        self.p_value.is_some_and(|p| p < ALPHA)
    }

    /// -1, 0 or 1; 0 for degenerate results.
    pub fn sign(&self) -> i8 {
        match self.rho {
            Some(r) if r > 0.0 => 1,
            Some(r) if r < 0.0 => -1,
            _ => 0,
        }
    }
}

impl std::fmt::Display for CorrelationResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.rho, self.p_value) {
            (Some(r), Some(p)) => write!(f, "rho = {r:+.3}, p = {p:.2e}, n = {}", self.n),
            _ => write!(f, "undefined (constant input), n = {}", self.n),
        }
    }
}

/// Ranks starting at 1; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn t_p_value(rho: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if 1.0 - rho.abs() < 1e-15 {
        return 0.0;
    }
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

fn exact_p_value(rx: &[f64], ry: &[f64], rho: f64) -> f64 {
    let n = ry.len();
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut perm = vec![0.0; n];
    for order in (0..n).permutations(n) {
        for (slot, &k) in perm.iter_mut().zip(&order) {
            *slot = ry[k];
        }
        let r = pearson(rx, &perm).unwrap_or(0.0);
        total += 1;
        if r.abs() >= rho.abs() - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

fn check_inputs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Invalid(format!("spearman inputs differ in length ({} vs {})", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InsufficientData(format!("spearman needs at least 3 observations, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("spearman inputs must be finite".into()));
    }
    Ok(())
}

/// rho alone, without a p-value; `None` when an input is constant.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_inputs(x, y)?;
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_inputs(x, y)?;
    let n = x.len();
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let Some(rho) = pearson(&rx, &ry) else {
        return Ok(CorrelationResult {
            rho: None,
            p_value: None,
            n,
            degenerate: true,
            p_method: PMethod::None,
            method: "degenerate: an input is constant, so rho is undefined".into(),
        });
    };
    let (p, p_method, how) = if n > EXACT_MAX_N {
        (t_p_value(rho, n), PMethod::TApproximation, format!("two-sided t approximation on {} df", n - 2))
    } else {
        (exact_p_value(&rx, &ry, rho), PMethod::ExactPermutation, format!("two-sided exact p over all {n}! orderings"))
    };
    Ok(CorrelationResult {
        rho: Some(rho),
        p_value: Some(p),
        n,
        degenerate: false,
        p_method,
        method: format!("Pearson correlation of average ranks (ties share the mean rank); {how}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_reversed() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman(&x, &x).unwrap().rho, Some(1.0));
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_eq!(spearman(&x, &rev).unwrap().rho, Some(-1.0));
    }

    #[test]
    fn textbook_three_points() {
        // 1 - 6 * 2 / (3 * 8)
        let r = spearman(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap();
        assert!((r.rho.unwrap() - 0.5).abs() < 1e-12);
        // orderings with |rho| >= 0.5: the identity, its reverse and the four adjacent swaps
        assert!((r.p_value.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_p_for_perfect_order_of_five() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = spearman(&x, &x).unwrap();
        assert!((r.p_value.unwrap() - 2.0 / 120.0).abs() < 1e-12);
    }

    #[test]
    fn ties_use_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn constant_input_is_degenerate() {
        let r = spearman(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap();
        assert!(r.degenerate && r.rho.is_none() && !r.significant());
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::InsufficientData(_))));
    }
}
