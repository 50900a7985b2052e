//! Comparison clusterers (k-means, Ward hierarchical) and the two feature
//! constructions they are run on.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    FisherZLowTri,
    LogProjected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// `n × m`, one row per subject.
    pub rows: DMatrix<f64>,
    pub construction: Construction,
}

const CLAMP: f64 = 1.0 - 1e-12;

/// Fisher-z transformed strictly-lower-triangular correlations, column by
/// column (`(1,0), (2,0), …, (2,1), …`).
pub fn fisher_z_lower_tri(s: &DMatrix<f64>) -> Result<DVector<f64>> {
    let p = s.nrows();
    let sd: Vec<f64> = (0..p)
        .map(|j| {
            if s[(j, j)] > 0.0 {
                Ok(s[(j, j)].sqrt())
            } else {
                Err(Error::ZeroDiagonal(j))
            }
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(p * p.saturating_sub(1) / 2);
    for j in 0..p {
        for i in (j + 1)..p {
            let r = (s[(i, j)] / (sd[i] * sd[j])).clamp(-CLAMP, CLAMP);
            out.push(r.atanh());
        }
    }
    Ok(DVector::from_vec(out))
}

/// `log(γᵀSγ)`.
pub fn log_projected_variance(s: &DMatrix<f64>, gamma: &DVector<f64>) -> Result<f64> {
    let v = linalg::quad_form(s, gamma);
    if v > 0.0 && v.is_finite() {
        Ok(v.ln())
    } else {
        Err(Error::NonPositiveQuadForm)
    }
}

pub fn fisher_z_features(d: &Dataset) -> Result<FeatureMatrix> {
    let rows: Vec<DVector<f64>> = d.subjects().iter().map(|s| fisher_z_lower_tri(&s.s)).collect::<Result<_>>()?;
    let m = rows.first().map_or(0, |r| r.len());
    Ok(FeatureMatrix {
        rows: DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]),
        construction: Construction::FisherZLowTri,
    })
}

pub fn log_projected_features(d: &Dataset, gamma: &DVector<f64>) -> Result<FeatureMatrix> {
    let v: Vec<f64> = d
        .subjects()
        .iter()
        .map(|s| log_projected_variance(&s.s, gamma))
        .collect::<Result<_>>()?;
    Ok(FeatureMatrix {
        rows: DMatrix::from_column_slice(v.len(), 1, &v),
        construction: Construction::LogProjected,
    })
}

fn sq_dist(f: &DMatrix<f64>, i: usize, c: &DVector<f64>) -> f64 {
    f.row(i).iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centers: Vec<DVector<f64>>,
    /// Within-cluster sum of squares.
    pub wcss: f64,
}

fn plus_plus(f: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let n = f.nrows();
    let row = |i: usize| f.row(i).transpose();
    let mut centers = vec![row(rng.random_range(0..n))];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(f, i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(f, i, &c));
        }
        centers.push(c);
    }
    centers
}

fn lloyd(f: &DMatrix<f64>, mut centers: Vec<DVector<f64>>, max_iter: usize) -> KMeansFit {
    let n = f.nrows();
    let k = centers.len();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for i in 0..n {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(f, i, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            if labels[i] != best.0 {
                labels[i] = best.0;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![DVector::zeros(f.ncols()); k];
        for i in 0..n {
            counts[labels[i]] += 1;
            sums[labels[i]] += f.row(i).transpose();
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = &sums[c] / counts[c] as f64;
            }
        }
        // Empty cluster: move its center to the point farthest from its own center.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(f, a, &centers[labels[a]]).total_cmp(&sq_dist(f, b, &centers[labels[b]]))
                    })
                    .unwrap_or(0);
                centers[c] = f.row(far).transpose();
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let wcss = (0..n).map(|i| sq_dist(f, i, &centers[labels[i]])).sum();
    KMeansFit { labels, centers, wcss }
}

/// k-means++ seeding followed by Lloyd iterations; the best of `n_init`
/// runs by WCSS (earlier run wins ties). Deterministic given `seed`.
pub fn kmeans_fit(f: &FeatureMatrix, k: usize, seed: u64, n_init: usize) -> Result<KMeansFit> {
    let n = f.rows.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("k-means needs 1 <= K <= n, got K = {k}, n = {n}")));
    }
    let mut best: Option<KMeansFit> = None;
    for run in 0..n_init.max(1) {
        let mut rng = rng::stream(seed, rng::tag::KMEANS, run as u64);
        let fit = lloyd(&f.rows, plus_plus(&f.rows, k, &mut rng), 300);
        if best.as_ref().is_none_or(|b| fit.wcss < b.wcss) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one run"))
}

pub fn kmeans(f: &FeatureMatrix, k: usize, seed: u64, n_init: usize) -> Result<Vec<usize>> {
    Ok(kmeans_fit(f, k, seed, n_init)?.labels)
}

/// One agglomeration step: clusters `a < b` (indices of their first
/// members' original slots) merged at Lance–Williams distance `height`.
#[derive(Clone, Debug, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Ward agglomeration on squared Euclidean distances with Lance–Williams
/// updates. The closest pair is merged first; ties go to the
/// lexicographically smallest pair. The merged cluster keeps slot `a`.
pub fn ward_dendrogram(f: &FeatureMatrix) -> Vec<Merge> {
    let x = &f.rows;
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = x.row(i).iter().zip(x.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    let mut size = vec![1.0; n];
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        let mut best = (0, 0, f64::INFINITY);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if active[j] && d[(i, j)] < best.2 {
                    best = (i, j, d[(i, j)]);
                }
            }
        }
        let (a, b, h) = best;
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let (na, nb, nk) = (size[a], size[b], size[k]);
            let v = ((na + nk) * d[(k, a)] + (nb + nk) * d[(k, b)] - nk * h) / (na + nb + nk);
            d[(k, a)] = v;
            d[(a, k)] = v;
        }
        size[a] += size[b];
        active[b] = false;
        merges.push(Merge { a, b, height: h });
    }
    merges
}

/// Cuts the dendrogram at `k` clusters; labels follow first appearance.
pub fn cut(merges: &[Merge], n: usize, k: usize) -> Vec<usize> {
    let mut owner: Vec<usize> = (0..n).collect();
    for m in merges.iter().take(n.saturating_sub(k)) {
        for o in owner.iter_mut() {
            if *o == m.b {
                *o = m.a;
            }
        }
    }
    let mut map = std::collections::HashMap::new();
    owner
        .iter()
        .map(|o| {
            let next = map.len();
            *map.entry(*o).or_insert(next)
        })
        .collect()
}

pub fn hierarchical(f: &FeatureMatrix, k: usize) -> Result<Vec<usize>> {
    let n = f.rows.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("hierarchical needs 1 <= K <= n, got K = {k}, n = {n}")));
    }
    Ok(cut(&ward_dendrogram(f), n, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::adjusted_rand_index;

    fn column(v: &[f64]) -> FeatureMatrix {
        FeatureMatrix {
            rows: DMatrix::from_column_slice(v.len(), 1, v),
            construction: Construction::LogProjected,
        }
    }

    #[test]
    fn fisher_z_examples() {
        assert_eq!(fisher_z_lower_tri(&DMatrix::identity(4, 4)).unwrap(), DVector::zeros(6));
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 1.0]);
        let z = fisher_z_lower_tri(&s).unwrap();
        assert!((z[0] - 0.549_306_144_334_054_8).abs() < 1e-15);
        let dup = DMatrix::from_element(2, 2, 2.0);
        assert!(fisher_z_lower_tri(&dup).unwrap()[0].is_finite());
        assert!(matches!(fisher_z_lower_tri(&DMatrix::zeros(2, 2)), Err(Error::ZeroDiagonal(0))));
    }

    #[test]
    fn fisher_z_order_is_column_major() {
        let mut s = DMatrix::identity(3, 3);
        s[(1, 0)] = 0.1;
        s[(0, 1)] = 0.1;
        s[(2, 0)] = 0.2;
        s[(0, 2)] = 0.2;
        s[(2, 1)] = 0.3;
        s[(1, 2)] = 0.3;
        let z = fisher_z_lower_tri(&s).unwrap();
        assert!((z[0] - 0.1f64.atanh()).abs() < 1e-15);
        assert!((z[1] - 0.2f64.atanh()).abs() < 1e-15);
        assert!((z[2] - 0.3f64.atanh()).abs() < 1e-15);
    }

    #[test]
    fn log_projected_examples() {
        let g = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        assert!(log_projected_variance(&DMatrix::identity(3, 3), &g).unwrap().abs() < 1e-15);
        let v = log_projected_variance(&(DMatrix::identity(3, 3) * 4.0), &g).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-15);
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
        let mut direct = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                direct += g[i] * s[(i, j)] * g[j];
            }
        }
        assert!((log_projected_variance(&s, &g).unwrap() - f64::ln(direct)).abs() < 1e-15);
        assert!(matches!(log_projected_variance(&DMatrix::zeros(3, 3), &g), Err(Error::NonPositiveQuadForm)));
    }

    #[test]
    fn kmeans_separated_blobs_and_boundaries() {
        let f = column(&[0.0, 0.1, -0.1, 0.05, 10.0, 10.2, 9.9, 10.1]);
        let labels = kmeans(&f, 2, 1, 10).unwrap();
        assert_eq!(adjusted_rand_index(&labels, &[0, 0, 0, 0, 1, 1, 1, 1]).unwrap(), 1.0);
        let all = kmeans_fit(&f, 8, 1, 3).unwrap();
        assert_eq!(all.wcss, 0.0);
        let one = kmeans_fit(&f, 3, 5, 1).unwrap();
        let ten = kmeans_fit(&f, 3, 5, 10).unwrap();
        assert!(ten.wcss <= one.wcss);
    }

    #[test]
    fn hierarchical_blobs_and_singletons() {
        let f = column(&[0.0, 0.1, -0.1, 10.0, 10.2, 9.9]);
        let labels = hierarchical(&f, 2).unwrap();
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(hierarchical(&f, 6).unwrap(), vec![0, 1, 2, 3, 4, 5]);
    }

    /// Merge order recomputed from Ward's criterion on explicit centroids.
    #[test]
    fn ward_matches_direct_criterion() {
        let pts = [[0.0, 0.0], [1.0, 0.2], [4.0, 4.0], [4.5, 3.0], [9.0, 0.0], [0.3, 2.5]];
        let f = FeatureMatrix {
            rows: DMatrix::from_fn(6, 2, |i, j| pts[i][j]),
            construction: Construction::FisherZLowTri,
        };
        let merges = ward_dendrogram(&f);
        let mut clusters: Vec<Option<Vec<usize>>> = (0..6).map(|i| Some(vec![i])).collect();
        for m in &merges {
            let centroid = |c: &Vec<usize>| {
                let n = c.len() as f64;
                [c.iter().map(|&i| pts[i][0]).sum::<f64>() / n, c.iter().map(|&i| pts[i][1]).sum::<f64>() / n]
            };
            let mut best = (0, 0, f64::INFINITY);
            for a in 0..6 {
                for b in (a + 1)..6 {
                    if let (Some(ca), Some(cb)) = (&clusters[a], &clusters[b]) {
                        let (ma, mb) = (centroid(ca), centroid(cb));
                        let (na, nb) = (ca.len() as f64, cb.len() as f64);
                        let gap = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2);
                        // Lance–Williams Ward height equals twice the ESS increase.
                        let cost = 2.0 * na * nb / (na + nb) * gap;
                        if cost < best.2 - 1e-12 {
                            best = (a, b, cost);
                        }
                    }
                }
            }
            assert_eq!((m.a, m.b), (best.0, best.1));
            assert!((m.height - best.2).abs() < 1e-9);
            let moved = clusters[best.1].take().unwrap();
            clusters[best.0].as_mut().unwrap().extend(moved);
        }
    }

    #[test]
    fn row_order_does_not_change_partitions() {
        let v = [0.0, 5.0, 0.2, 5.1, -0.1, 4.9, 0.1, 5.3];
        let perm = [3, 0, 6, 1, 7, 2, 5, 4];
        let permuted: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
        let a = hierarchical(&column(&v), 2).unwrap();
        let b = hierarchical(&column(&permuted), 2).unwrap();
        let a_perm: Vec<usize> = perm.iter().map(|&i| a[i]).collect();
        assert_eq!(adjusted_rand_index(&a_perm, &b).unwrap(), 1.0);
        let a = kmeans(&column(&v), 2, 3, 10).unwrap();
        let b = kmeans(&column(&permuted), 2, 3, 10).unwrap();
        let a_perm: Vec<usize> = perm.iter().map(|&i| a[i]).collect();
        assert_eq!(adjusted_rand_index(&a_perm, &b).unwrap(), 1.0);
    }
}
