//! Clustering and classification metrics, OOD scoring and scatter plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::{self, SeededRng};
use crate::sampling::LogDensity;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nmi: f64,
    /// Always `"arithmetic"`: MI over the mean of the two entropies.
    pub nmi_normalization: String,
    pub cluster_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub direct_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub linear_probe_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub ood_auroc: BTreeMap<String, f64>,
    /// `confusion[label][assignment]`
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    /// NMI, matched accuracy and confusion for a set of assignments.
    pub fn clustering(assignments: &[usize], labels: &[usize]) -> Result<Self> {
        Ok(Self {
            nmi: nmi(assignments, labels)?,
            nmi_normalization: "arithmetic".into(),
            cluster_accuracy: cluster_accuracy(assignments, labels)?,
            confusion: confusion_matrix(assignments, labels)?,
            ..Default::default()
        })
    }
}

fn check_pair(a: &[usize], b: &[usize]) -> Result<()> {
    ensure!(!a.is_empty(), "metrics need at least one sample");
    ensure!(
        a.len() == b.len(),
        "{} assignments but {} labels",
        a.len(),
        b.len()
    );
    Ok(())
}

/// `table[label][assignment]`, sized by the largest index seen on each side.
pub fn confusion_matrix(assignments: &[usize], labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    check_pair(assignments, labels)?;
    let na = assignments.iter().max().map_or(0, |m| m + 1);
    let nl = labels.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0usize; na]; nl];
    for (&a, &l) in assignments.iter().zip(labels) {
        t[l][a] += 1;
    }
    Ok(t)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, `MI / ((H(A) + H(L)) / 2)`. Two constant
/// labelings count as identical (1).
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    let table = confusion_matrix(assignments, labels)?;
    let n = assignments.len() as f64;
    let row: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<usize> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j]).sum())
        .collect();
    let h_l = entropy(row.iter().copied(), n);
    let h_a = entropy(col.iter().copied(), n);
    if h_l + h_a == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (row[i] as f64 * col[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (h_a + h_l))).clamp(0.0, 1.0))
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian
/// algorithm with potentials). Returns `assign[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

/// Accuracy under the best one-to-one renaming of clusters to labels.
pub fn cluster_accuracy(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    let table = confusion_matrix(assignments, labels)?;
    let k = table.len().max(table[0].len());
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|a| {
            (0..k)
                .map(|l| -(table.get(l).and_then(|r| r.get(a)).copied().unwrap_or(0) as f64))
                .collect()
        })
        .collect();
    let assign = hungarian(&cost);
    let hits: f64 = assign.iter().enumerate().map(|(a, &l)| -cost[a][l]).sum();
    Ok(hits / assignments.len() as f64)
}

/// Fraction of exact matches, no renaming.
pub fn direct_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(predictions, labels)?;
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

// ── linear probe ────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            momentum: 0.9,
            batch: 100,
        }
    }
}

/// Fits a softmax layer on frozen features with momentum SGD and returns
/// its accuracy on the held-out features.
pub fn linear_probe(
    train: (&Tensor, &[usize]),
    test: (&Tensor, &[usize]),
    cfg: &ProbeConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    let (x, y) = train;
    check_pair(&vec![0; x.rows()], y)?;
    check_pair(&vec![0; test.0.rows()], test.1)?;
    ensure!(
        x.cols() == test.0.cols(),
        "train and test features differ in width"
    );
    ensure!(cfg.batch >= 1, "probe batch must be positive");
    let classes = y.iter().chain(test.1).max().map_or(0, |m| m + 1);
    ensure!(
        y.iter().any(|&l| l != y[0]),
        "linear probe needs at least two classes in the training set"
    );
    let d = x.cols();
    let mut w = Tensor::zeros(&[d, classes]);
    let mut b = vec![0.0; classes];
    let mut vw = Tensor::zeros(&[d, classes]);
    let mut vb = vec![0.0; classes];
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..cfg.epochs {
        rng::shuffle(rng, &mut order);
        for chunk in order.chunks(cfg.batch) {
            let xb = x.select_rows(chunk);
            let mut p = xb.matmul(&w)?;
            for i in 0..chunk.len() {
                let row = p.row_mut(i);
                row.iter_mut().zip(&b).for_each(|(v, bi)| *v += bi);
                softmax_in_place(row);
                row[y[chunk[i]]] -= 1.0;
                row.iter_mut().for_each(|v| *v /= chunk.len() as f64);
            }
            let gw = xb.matmul_tn(&p)?;
            let gb: Vec<f64> = p
                .column_means()
                .iter()
                .map(|v| v * chunk.len() as f64)
                .collect();
            for (v, g) in vw.data_mut().iter_mut().zip(gw.data()) {
                *v = cfg.momentum * *v + g;
            }
            for (v, g) in vb.iter_mut().zip(&gb) {
                *v = cfg.momentum * *v + g;
            }
            w.axpy(-cfg.lr, &vw);
            b.iter_mut().zip(&vb).for_each(|(bi, v)| *bi -= cfg.lr * v);
        }
    }
    let logits = test.0.matmul(&w)?;
    let pred: Vec<usize> = (0..logits.rows())
        .map(|i| {
            let row: Vec<f64> = logits.row(i).iter().zip(&b).map(|(v, bi)| v + bi).collect();
            crate::model::argmax(&row)
        })
        .collect();
    direct_accuracy(&pred, test.1)
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

// ── OOD ─────────────────────────────────────────────────────────────

/// `−‖∇ₓ f(x)‖` per row; larger means more in-distribution.
pub fn ood_score(density: &dyn LogDensity, x: &Tensor) -> Result<Vec<f64>> {
    let (_, grad) = density.log_density_grad(x)?;
    Ok((0..grad.rows())
        .map(|i| -grad.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Mann-Whitney estimate of `P(in > out) + ½ P(in = out)`.
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    ensure!(
        !in_scores.is_empty() && !out_scores.is_empty(),
        "auroc needs nonempty score sets"
    );
    ensure!(
        in_scores.iter().chain(out_scores).all(|v| !v.is_nan()),
        "auroc scores must not be NaN"
    );
    // Rank-sum with midranks for ties.
    let mut all: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, true))
        .chain(out_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * mid;
        i = j + 1;
    }
    let (n_in, n_out) = (in_scores.len() as f64, out_scores.len() as f64);
    Ok((rank_sum - n_in * (n_in + 1.0) / 2.0) / (n_in * n_out))
}

// ── plots ───────────────────────────────────────────────────────────

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];
const CANVAS: f64 = 400.0;
const MARGIN: f64 = 20.0;

/// Standalone SVG scatter plot, one color per cluster.
pub fn scatter_svg(points: &Tensor, assignments: &[usize]) -> Result<String> {
    let n = if points.is_empty() { 0 } else { points.rows() };
    ensure!(
        n == 0 || (points.rank() == 2 && points.cols() == 2),
        "scatter plots need 2-D points, got shape {:?}",
        points.shape()
    );
    ensure!(
        n == assignments.len(),
        "{n} points but {} assignments",
        assignments.len()
    );
    let mut svg = String::new();
    let size = CANVAS + 2.0 * MARGIN;
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    )
    .expect("write to string");
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("write to string");
    if n > 0 {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for i in 0..n {
            for k in 0..2 {
                lo[k] = lo[k].min(points.get(i, k));
                hi[k] = hi[k].max(points.get(i, k));
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
        for (i, &a) in assignments.iter().enumerate() {
            let x = MARGIN + (points.get(i, 0) - lo[0]) / span * CANVAS;
            let y = MARGIN + CANVAS - (points.get(i, 1) - lo[1]) / span * CANVAS;
            writeln!(
                svg,
                r#"<circle cx="{x:.3}" cy="{y:.3}" r="2.5" fill="{}"/>"#,
                PALETTE[a % PALETTE.len()]
            )
            .expect("write to string");
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn scatter_plot(points: &Tensor, assignments: &[usize], path: &std::path::Path) -> Result<()> {
    std::fs::write(path, scatter_svg(points, assignments)?)?;
    Ok(())
}

/// Uniform random labels, for chance-level comparisons in tests and tools.
pub fn random_assignments(n: usize, k: usize, rng: &mut SeededRng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    /// NMI straight from the definition, with permutation-free loops.
    fn nmi_oracle(a: &[usize], l: &[usize]) -> f64 {
        let n = a.len() as f64;
        let ka = a.iter().max().unwrap() + 1;
        let kl = l.iter().max().unwrap() + 1;
        let p = |pred: &dyn Fn(usize) -> bool| (0..a.len()).filter(|&i| pred(i)).count() as f64 / n;
        let h = |k: usize, v: &[usize]| {
            (0..k)
                .map(|c| p(&|i| v[i] == c))
                .filter(|&q| q > 0.0)
                .map(|q| -q * q.ln())
                .sum::<f64>()
        };
        let mut mi = 0.0;
        for x in 0..ka {
            for y in 0..kl {
                let pxy = p(&|i| a[i] == x && l[i] == y);
                if pxy > 0.0 {
                    mi += pxy * (pxy / (p(&|i| a[i] == x) * p(&|i| l[i] == y))).ln();
                }
            }
        }
        let denom = 0.5 * (h(ka, a) + h(kl, l));
        if denom == 0.0 {
            1.0
        } else {
            mi / denom
        }
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    fn accuracy_oracle(a: &[usize], l: &[usize]) -> f64 {
        let k = a.iter().chain(l).max().unwrap() + 1;
        permutations(k)
            .iter()
            .map(|perm| a.iter().zip(l).filter(|(x, y)| perm[**x] == **y).count())
            .max()
            .unwrap() as f64
            / a.len() as f64
    }

    #[test]
    fn nmi_examples() {
        close(nmi(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0, 1e-12);
        close(nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.0, 1e-12);
        // Contingency [[2,0],[1,1]]: MI = ¾ln(4/3)·… from the oracle.
        let v = nmi(&[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap();
        close(v, nmi_oracle(&[0, 0, 0, 1], &[0, 0, 1, 1]), 1e-12);
        let h_a = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let h_l = 2f64.ln();
        let mi = 0.5 * (0.5f64 / (0.75 * 0.5)).ln()
            + 0.25 * (0.25f64 / (0.75 * 0.5)).ln()
            + 0.25 * (0.25f64 / (0.25 * 0.5)).ln();
        close(v, mi / (0.5 * (h_a + h_l)), 1e-12);
        assert!(nmi(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        close(
            cluster_accuracy(&[2, 2, 0, 0, 1, 1], &[0, 0, 1, 1, 2, 2]).unwrap(),
            1.0,
            0.0,
        );
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        close(cluster_accuracy(&[0; 100], &labels).unwrap(), 0.1, 1e-15);
        let a = [0, 1, 1, 2, 0, 2];
        let l = [0, 0, 1, 1, 2, 2];
        close(
            cluster_accuracy(&a, &l).unwrap(),
            accuracy_oracle(&a, &l),
            1e-15,
        );
        close(
            direct_accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(),
            0.75,
            0.0,
        );
        close(direct_accuracy(&[3, 1], &[3, 1]).unwrap(), 1.0, 0.0);
        close(direct_accuracy(&[0; 100], &labels).unwrap(), 0.1, 1e-15);
    }

    #[test]
    fn more_clusters_than_labels() {
        let a = [0, 1, 2, 3, 4, 5];
        let l = [0, 0, 0, 1, 1, 1];
        close(
            cluster_accuracy(&a, &l).unwrap(),
            accuracy_oracle(&a, &l),
            1e-15,
        );
    }

    #[test]
    fn confusion_rows_count_labels() {
        let t = confusion_matrix(&[1, 1, 0, 2], &[0, 1, 1, 1]).unwrap();
        assert_eq!(t, vec![vec![0, 1, 0], vec![1, 1, 1]]);
    }

    #[test]
    fn auroc_examples() {
        close(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0, 0.0);
        close(
            auroc(&[1.0, 2.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(),
            0.5,
            1e-15,
        );
        close(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.25, 1e-15);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    fn blobs(n: usize, gap: f64, rng: &mut SeededRng) -> (Tensor, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = labels
            .iter()
            .flat_map(|&l| {
                let c = if l == 0 { -gap } else { gap };
                [c + rng::normal(rng), c + rng::normal(rng)]
            })
            .collect();
        (Tensor::matrix(n, 2, data), labels)
    }

    #[test]
    fn probe_separates_blobs() {
        let mut r = rng::seeded(0);
        let (xtr, ytr) = blobs(400, 5.0, &mut r);
        let (xte, yte) = blobs(400, 5.0, &mut r);
        let before = xtr.clone();
        let acc =
            linear_probe((&xtr, &ytr), (&xte, &yte), &ProbeConfig::default(), &mut r).unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
        assert_eq!(before, xtr);
    }

    #[test]
    fn probe_on_noise_is_chance() {
        let mut r = rng::seeded(1);
        let (xtr, _) = blobs(1000, 0.0, &mut r);
        let (xte, _) = blobs(2000, 0.0, &mut r);
        let ytr = random_assignments(1000, 2, &mut r);
        let yte = random_assignments(2000, 2, &mut r);
        let acc =
            linear_probe((&xtr, &ytr), (&xte, &yte), &ProbeConfig::default(), &mut r).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
        assert!(linear_probe(
            (&xtr, &[0; 1000]),
            (&xte, &yte),
            &ProbeConfig::default(),
            &mut r
        )
        .is_err());
    }

    struct Slope(Vec<f64>, f64);

    impl LogDensity for Slope {
        fn log_density_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
            let f = (0..x.rows())
                .map(|i| {
                    x.row(i)
                        .iter()
                        .zip(&self.0)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + self.1
                })
                .collect();
            let mut g = Tensor::zeros(x.shape());
            for i in 0..x.rows() {
                g.row_mut(i).copy_from_slice(&self.0);
            }
            Ok((f, g))
        }
    }

    #[test]
    fn ood_score_of_linear_density() {
        let x = Tensor::matrix(3, 2, vec![0.0, 1.0, -4.0, 2.0, 9.0, 9.0]);
        let s = ood_score(&Slope(vec![3.0, 4.0], 0.0), &x).unwrap();
        assert_eq!(s, vec![-5.0; 3]);
        let shifted = ood_score(&Slope(vec![3.0, 4.0], 17.0), &x).unwrap();
        assert_eq!(s, shifted);
        assert_eq!(
            ood_score(&Slope(vec![0.0, 0.0], 0.0), &x).unwrap(),
            vec![-0.0; 3]
        );
    }

    #[test]
    fn scatter_examples() {
        let p = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 1.0, 0.5, 0.2, 0.1, 0.9]);
        let svg = scatter_svg(&p, &[0, 1, 1, 0]).unwrap();
        assert_eq!(svg.matches("<circle").count(), 4);
        let colors: std::collections::BTreeSet<&str> = svg
            .match_indices("fill=\"#")
            .map(|(i, _)| &svg[i + 6..i + 13])
            .collect();
        assert_eq!(colors.len(), 2);
        assert_eq!(svg, scatter_svg(&p, &[0, 1, 1, 0]).unwrap());
        let empty = scatter_svg(&Tensor::zeros(&[0, 2]), &[]).unwrap();
        assert!(empty.starts_with("<svg") && empty.ends_with("</svg>\n"));
        assert!(!empty.contains("<circle"));
        assert!(scatter_svg(&Tensor::zeros(&[2, 3]), &[0, 0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn nmi_and_accuracy_match_oracles(
            a in prop::collection::vec(0usize..6, 1..40),
            seed in any::<u64>(),
        ) {
            let mut r = rng::seeded(seed);
            let l = random_assignments(a.len(), 6, &mut r);
            prop_assert!((nmi(&a, &l).unwrap() - nmi_oracle(&a, &l)).abs() <= 1e-10);
            prop_assert!((cluster_accuracy(&a, &l).unwrap() - accuracy_oracle(&a, &l)).abs() <= 1e-10);
            prop_assert!((nmi(&a, &l).unwrap() - nmi(&l, &a).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn metrics_ignore_renaming(
            a in prop::collection::vec(0usize..5, 1..40),
            seed in any::<u64>(),
        ) {
            let mut r = rng::seeded(seed);
            let l = random_assignments(a.len(), 4, &mut r);
            let mut perm: Vec<usize> = (0..5).collect();
            rng::shuffle(&mut r, &mut perm);
            let renamed: Vec<usize> = a.iter().map(|&x| perm[x]).collect();
            prop_assert!((nmi(&a, &l).unwrap() - nmi(&renamed, &l).unwrap()).abs() <= 1e-12);
            prop_assert!((cluster_accuracy(&a, &l).unwrap() - cluster_accuracy(&renamed, &l).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn auroc_is_antisymmetric(
            a in prop::collection::vec(-5i32..5, 1..20),
            b in prop::collection::vec(-5i32..5, 1..20),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            prop_assert!((auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap() - 1.0).abs() <= 1e-12);
        }
    }
}
