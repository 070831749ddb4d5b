//! Independent reference implementations used as test oracles.

/// LCS length by exhaustive memoized recursion over suffixes.
pub fn lcs_oracle(a: &[&str], b: &[&str]) -> usize {
    fn go(a: &[&str], b: &[&str], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

pub fn rouge_oracle(candidate: &[&str], reference: &[&str]) -> f64 {
    let l = lcs_oracle(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let (p, r) = (l as f64 / candidate.len() as f64, l as f64 / reference.len() as f64);
    2.0 * p * r / (p + r)
}

/// Best balanced accuracy over every cut between sorted distinct losses.
pub fn mia_oracle(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut cuts: Vec<f64> = members.iter().chain(nonmembers).cloned().collect();
    cuts.push(f64::NEG_INFINITY);
    let mut best: f64 = 0.5;
    for &c in &cuts {
        let tpr = members.iter().filter(|&&l| l <= c).count() as f64 / members.len() as f64;
        let tnr = nonmembers.iter().filter(|&&l| l > c).count() as f64 / nonmembers.len() as f64;
        best = best.max((tpr + tnr) / 2.0);
    }
    1.0 - best
}
