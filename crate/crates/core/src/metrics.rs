//! Clustering accuracy, NMI and ARI over hard label vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts `n_ij` of samples with class `i` and cluster `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub rows: Vec<u64>,
    pub cols: Vec<u64>,
    pub total: u64,
}

impl ContingencyTable {
    /// Domains are inferred as `max + 1`; labels that never occur leave
    /// zero rows or columns.
    pub fn new(y: &[usize], c: &[usize]) -> Result<Self> {
        if y.len() != c.len() {
            return Err(Error::invalid(format!("label vectors differ in length: {} vs {}", y.len(), c.len())));
        }
        if y.is_empty() {
            return Err(Error::invalid("label vectors are empty"));
        }
        let r = y.iter().max().expect("non-empty") + 1;
        let k = c.iter().max().expect("non-empty") + 1;
        let mut counts = vec![vec![0u64; k]; r];
        for (&a, &b) in y.iter().zip(c) {
            counts[a][b] += 1;
        }
        let rows = counts.iter().map(|row| row.iter().sum()).collect();
        let cols = (0..k).map(|j| counts.iter().map(|row| row[j]).sum()).collect();
        Ok(Self { counts, rows, cols, total: y.len() as u64 })
    }
}

/// Minimum-cost perfect matching on a square matrix.
///
/// Returns `assignment[row] = col` and the total cost summed in row order.
/// O(n³) shortest augmenting path with potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    if let Some((i, row)) = cost.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(Error::invalid(format!("cost matrix is not square: row {i} has {} entries, expected {n}", row.len())));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cost matrix contains non-finite entries".into()));
    }
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((assignment, total))
}

/// Best-mapping accuracy: clusters are matched to classes one-to-one so as
/// to maximize agreement.
pub fn acc(y: &[usize], c: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(y, c)?;
    let n = t.rows.len().max(t.cols.len());
    // rows are clusters, columns classes; padding costs 0
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            (0..n)
                .map(|i| if i < t.rows.len() && j < t.cols.len() { -(t.counts[i][j] as f64) } else { 0.0 })
                .collect()
        })
        .collect();
    let (assignment, _) = hungarian(&cost)?;
    let hits: u64 = assignment
        .iter()
        .enumerate()
        .filter(|&(j, &i)| i < t.rows.len() && j < t.cols.len())
        .map(|(j, &i)| t.counts[i][j])
        .sum();
    Ok(hits as f64 / t.total as f64)
}

fn entropy(counts: &[u64], total: f64) -> f64 {
    -counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / total).map(|p| p * p.ln()).sum::<f64>()
}

/// Mutual information over the arithmetic mean of the two entropies, in nats.
/// Two constant labelings give 0.
pub fn nmi(y: &[usize], c: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(y, c)?;
    let n = t.total as f64;
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (t.rows[i] as f64 * t.cols[j] as f64)).ln();
            }
        }
    }
    let h = 0.5 * (entropy(&t.rows, n) + entropy(&t.cols, n));
    if h == 0.0 {
        return Ok(0.0);
    }
    Ok((mi / h).clamp(0.0, 1.0))
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index. Degenerate inputs where the maximum equals the
/// expectation score 1 if the index also equals it, else 0.
pub fn ari(y: &[usize], c: &[usize]) -> Result<f64> {
    if y.len() < 2 {
        return Err(Error::invalid(format!("ari needs at least 2 samples, got {}", y.len())));
    }
    let t = ContingencyTable::new(y, c)?;
    let index: f64 = t.counts.iter().flatten().map(|&v| choose2(v)).sum();
    let sa: f64 = t.rows.iter().map(|&v| choose2(v)).sum();
    let sb: f64 = t.cols.iter().map(|&v| choose2(v)).sum();
    let expected = sa * sb / choose2(t.total);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

pub fn evaluate(y: &[usize], c: &[usize]) -> Result<Scores> {
    Ok(Scores { acc: acc(y, c)?, nmi: nmi(y, c)?, ari: ari(y, c)? })
}

/// Reads one non-negative integer label per line; blank lines are skipped.
pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|e| Error::invalid(format!("line {}: `{}` is not a label: {e}", i + 1, l.trim())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_sums() {
        let t = ContingencyTable::new(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
        assert_eq!(t.counts, vec![vec![2, 0], vec![1, 1]]);
        assert_eq!((t.rows.clone(), t.cols.clone(), t.total), (vec![2, 2], vec![3, 1], 4));
    }

    #[test]
    fn hungarian_small() {
        let (a, c) = hungarian(&[vec![0.0, 9.0], vec![9.0, 0.0]]).unwrap();
        assert_eq!((a, c), (vec![0, 1], 0.0));
        let (_, c) = hungarian(&vec![vec![3.0; 4]; 4]).unwrap();
        assert_eq!(c, 12.0);
        assert!(hungarian(&[vec![1.0, 2.0]]).is_err());
        assert_eq!(hungarian(&[]).unwrap().1, 0.0);
    }

    #[test]
    fn rectangular_acc() {
        // three clusters against two classes
        assert_eq!(acc(&[0, 0, 1, 1], &[0, 1, 2, 2]).unwrap(), 0.75);
        assert_eq!(acc(&[0, 1, 2, 2], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn errors() {
        assert!(acc(&[], &[]).is_err());
        assert!(nmi(&[0], &[0, 1]).is_err());
        assert!(ari(&[0], &[0]).is_err());
        assert_eq!(nmi(&[0, 0], &[0, 0]).unwrap(), 0.0);
        assert_eq!(ari(&[0, 0], &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn labels_csv() {
        assert_eq!(parse_labels("1\n0\n\n3\n").unwrap(), vec![1, 0, 3]);
        assert!(parse_labels("1\nx\n").is_err());
    }
}
