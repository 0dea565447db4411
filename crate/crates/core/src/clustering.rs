//! Spectral segmentation: k-means in the horizontal diffusion embedding, so
//! that labels agree across fibres through the correspondences.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{HdmError, Result};
use crate::kernels::{build_w_from_blocks, CorrespondenceBlock, HorizontalDiffusionMatrix};
use crate::rng::{stream_rng, HdmRng};
use crate::laplacian::laplacians_from_w;
use crate::spectral::{eig_sym, hdm_coords, EigOptions, HdmCoordinates, SpectrumMode, Which};

pub const DEFAULT_RESTARTS: usize = 8;
const KMEANS_TOL: f64 = 1e-9;
const KMEANS_MAX_ITER: usize = 500;
const MAX_EXACT_MATCH: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segmentation {
    pub k: usize,
    /// One label per point, in global (fibre-major) order.
    pub labels: Vec<usize>,
    /// Fibre sizes, so labels can be addressed as `(fibre, point)`.
    pub sizes: Vec<usize>,
    /// Within-cluster sum of squares of the chosen run.
    pub wcss: f64,
}

impl Segmentation {
    /// Label counts per fibre, `histograms[j][c]`.
    pub fn histograms(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut p = 0;
        for &n in &self.sizes {
            let mut h = vec![0; self.k];
            for &l in &self.labels[p..p + n] {
                h[l] += 1;
            }
            out.push(h);
            p += n;
        }
        out
    }

    /// `(fibre, point, label)` rows.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.sizes
            .iter()
            .enumerate()
            .flat_map(|(j, &n)| (0..n).map(move |s| (j, s)))
            .zip(&self.labels)
            .map(|((j, s), &l)| (j, s, l))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut HdmRng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut best: Vec<f64> = points.iter().map(|p| d2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &b) in best.iter().enumerate() {
                if target < b {
                    pick = i;
                    break;
                }
                target -= b;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (b, p) in best.iter_mut().zip(points) {
            *b = b.min(d2(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeans {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    let mut prev = f64::INFINITY;
    let mut wcss = 0.0;
    for _ in 0..KMEANS_MAX_ITER {
        wcss = 0.0;
        for (l, p) in labels.iter_mut().zip(points) {
            let (c, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, m)| (c, d2(p, m)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .expect("k >= 1");
            *l = c;
            wcss += d;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = labels
                    .iter()
                    .zip(points)
                    .enumerate()
                    .max_by(|a, b| d2(a.1 .1, &centroids[*a.1 .0]).total_cmp(&d2(b.1 .1, &centroids[*b.1 .0])))
                    .map(|(i, _)| i)
                    .expect("nonempty");
                centroids[c] = points[far].clone();
            }
        }
        if prev.is_finite() && (prev - wcss).abs() <= KMEANS_TOL * prev.max(f64::MIN_POSITIVE) {
            break;
        }
        prev = wcss;
    }
    KMeans { labels, centroids, wcss }
}

/// k-means with k-means++ seeding; the best of `restarts` runs by WCSS, ties
/// going to the lowest restart index.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeans> {
    if points.is_empty() {
        return Err(HdmError::EmptyInput);
    }
    if k == 0 || k > points.len() {
        return Err(HdmError::invalid("k", format!("need 1 <= k <= {}", points.len())));
    }
    if restarts == 0 {
        return Err(HdmError::invalid("restarts", "must be positive"));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(HdmError::DimensionMismatch {
            expected: dim,
            got: p.len(),
        });
    }
    let runs: Vec<KMeans> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            lloyd(points, plus_plus_init(points, k, &mut rng))
        })
        .collect();
    Ok(runs
        .into_iter()
        .enumerate()
        .min_by(|a, b| a.1.wcss.total_cmp(&b.1.wcss).then(a.0.cmp(&b.0)))
        .map(|(_, r)| r)
        .expect("restarts >= 1"))
}

/// Clusters the points of an HDM embedding into `k` groups.
pub fn spectral_segmentation(coords: &HdmCoordinates, k: usize, seed: u64, restarts: usize) -> Result<Segmentation> {
    let km = kmeans(&coords.coords, k, seed, restarts)?;
    Ok(Segmentation {
        k,
        labels: km.labels,
        sizes: coords.layout.sizes().to_vec(),
        wcss: km.wcss,
    })
}

/// Parameters of the full segmentation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentConfig {
    pub clusters: usize,
    pub alpha: f64,
    /// Eigenpairs of `L_*` computed; coordinates use pairs `1..n_eigs`.
    pub n_eigs: usize,
    pub t: f64,
    pub mode: SpectrumMode,
    pub seed: u64,
    pub restarts: usize,
}

impl SegmentConfig {
    pub fn new(clusters: usize) -> Self {
        SegmentConfig {
            clusters,
            alpha: 0.0,
            n_eigs: clusters.max(2),
            t: 1.0,
            mode: SpectrumMode::Diffusion,
            seed: 0,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

/// `W` → `L_*` → smallest eigenpairs → HDM coordinates → k-means.
pub fn segment_bundle(w: &HorizontalDiffusionMatrix, cfg: &SegmentConfig) -> Result<(HdmCoordinates, Segmentation)> {
    let lap = laplacians_from_w(w, cfg.alpha)?;
    let mut opts = EigOptions::new(cfg.n_eigs, Which::Smallest);
    opts.seed = cfg.seed;
    let decomp = eig_sym(&lap.symmetric(), &opts)?;
    let coords = hdm_coords(&decomp, &w.layout, cfg.t, cfg.n_eigs, cfg.mode)?;
    let seg = spectral_segmentation(&coords, cfg.clusters, cfg.seed, cfg.restarts)?;
    Ok((coords, seg))
}

fn confusion(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if pred.len() != truth.len() {
        return Err(HdmError::SizeMismatch(pred.len(), truth.len()));
    }
    let mut m = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(HdmError::IndexOutOfRange { index: p.max(t), len: k });
        }
        m[p][t] += 1;
    }
    Ok(m)
}

/// The permutation `perm[predicted] = truth` maximizing agreement.
fn best_permutation(conf: &[Vec<usize>]) -> Vec<usize> {
    fn search(conf: &[Vec<usize>], row: usize, used: &mut [bool], cur: &mut Vec<usize>, score: usize, best: &mut (usize, Vec<usize>)) {
        let k = conf.len();
        if row == k {
            if score > best.0 || best.1.is_empty() {
                *best = (score, cur.clone());
            }
            return;
        }
        // optimistic bound: every remaining row takes its best free column
        let bound: usize = (row..k)
            .map(|r| (0..k).filter(|&c| !used[c]).map(|c| conf[r][c]).max().unwrap_or(0))
            .sum();
        if !best.1.is_empty() && score + bound <= best.0 {
            return;
        }
        for c in 0..k {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                search(conf, row + 1, used, cur, score + conf[row][c], best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best = (0, Vec::new());
    search(conf, 0, &mut vec![false; conf.len()], &mut Vec::new(), 0, &mut best);
    best.1
}

/// Fraction of points whose label agrees with the ground truth under the
/// best relabeling (exhaustive search, `k <= 10`).
pub fn label_consistency(seg: &Segmentation, truth: &[usize]) -> Result<f64> {
    Ok(consistency_details(seg, truth)?.overall)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Consistency {
    pub overall: f64,
    /// Agreement within each fibre under the same global relabeling.
    pub per_fibre: Vec<f64>,
    /// `permutation[predicted label] = ground-truth label`
    pub permutation: Vec<usize>,
}

pub fn consistency_details(seg: &Segmentation, truth: &[usize]) -> Result<Consistency> {
    if seg.k > MAX_EXACT_MATCH {
        return Err(HdmError::invalid("k", format!("label matching supports k <= {MAX_EXACT_MATCH}")));
    }
    let conf = confusion(&seg.labels, truth, seg.k)?;
    let perm = best_permutation(&conf);
    let hit = |p: usize| (perm[seg.labels[p]] == truth[p]) as usize;
    let n = truth.len();
    let overall = if n == 0 { 1.0 } else { (0..n).map(hit).sum::<usize>() as f64 / n as f64 };
    let mut per_fibre = Vec::with_capacity(seg.sizes.len());
    let mut start = 0;
    for &size in &seg.sizes {
        let hits: usize = (start..start + size).map(hit).sum();
        per_fibre.push(hits as f64 / size.max(1) as f64);
        start += size;
    }
    Ok(Consistency {
        overall,
        per_fibre,
        permutation: perm,
    })
}

/// Synthetic bundle of circles with ground-truth arcs.
///
/// Each fibre is a circle carrying `n_arcs` arcs of equal size separated by
/// gaps, seen in its own random rotation. Correspondences between
/// neighbouring fibres map a point to the points near its image under the
/// true relative rotation, perturbed by a small random rotation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CircleBundleConfig {
    pub n_fibres: usize,
    pub n_points: usize,
    pub n_arcs: usize,
    /// Fraction of each arc's angular share left empty as a gap.
    pub gap_fraction: f64,
    /// Standard deviation of the per-pair rotation error, radians.
    pub rotation_noise: f64,
    /// Correspondence bandwidth, radians.
    pub sigma: f64,
    /// Base neighbours on the ring of fibres.
    pub n_neighbors: usize,
    pub seed: u64,
}

impl Default for CircleBundleConfig {
    fn default() -> Self {
        CircleBundleConfig {
            n_fibres: 40,
            n_points: 60,
            n_arcs: 3,
            gap_fraction: 0.2,
            rotation_noise: 0.03,
            sigma: 0.08,
            n_neighbors: 6,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CircleBundle {
    pub sizes: Vec<usize>,
    pub blocks: Vec<CorrespondenceBlock>,
    /// Arc index per point, global order.
    pub truth: Vec<usize>,
    /// Local angles per fibre.
    pub angles: Vec<Vec<f64>>,
    pub w: HorizontalDiffusionMatrix,
}

fn wrap(a: f64) -> f64 {
    let t = a.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

pub fn circle_bundle(cfg: &CircleBundleConfig) -> Result<CircleBundle> {
    if cfg.n_arcs == 0 || cfg.n_points < cfg.n_arcs || cfg.n_points % cfg.n_arcs != 0 {
        return Err(HdmError::invalid("n_points", "must be a positive multiple of n_arcs"));
    }
    if !(0.0..1.0).contains(&cfg.gap_fraction) || !(cfg.sigma > 0.0) || cfg.rotation_noise < 0.0 {
        return Err(HdmError::invalid("circle bundle", "gap in [0,1), sigma > 0, noise >= 0"));
    }
    if cfg.n_fibres < 2 {
        return Err(HdmError::invalid("n_fibres", "need at least two fibres"));
    }
    let per_arc = cfg.n_points / cfg.n_arcs;
    let share = 2.0 * PI / cfg.n_arcs as f64;
    let span = share * (1.0 - cfg.gap_fraction);
    let step = span / per_arc as f64;
    // global angles and arc labels, identical for all fibres up to rotation
    let global: Vec<(f64, usize)> = (0..cfg.n_points)
        .map(|s| {
            let a = s / per_arc;
            (a as f64 * share + (s % per_arc) as f64 * step + 0.5 * step, a)
        })
        .collect();
    let mut rng = stream_rng(cfg.seed, u64::MAX);
    let offsets: Vec<f64> = (0..cfg.n_fibres).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let angles: Vec<Vec<f64>> = offsets
        .iter()
        .map(|o| global.iter().map(|(g, _)| wrap(g - o)).collect())
        .collect();
    let truth: Vec<usize> = (0..cfg.n_fibres).flat_map(|_| global.iter().map(|g| g.1)).collect();

    // fibres sit on a ring; neighbours are the nearest positions around it
    let pos: Vec<[f64; 2]> = (0..cfg.n_fibres)
        .map(|j| {
            let t = 2.0 * PI * j as f64 / cfg.n_fibres as f64;
            [t.cos(), t.sin()]
        })
        .collect();
    let noise = Normal::new(0.0, cfg.rotation_noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let cutoff = 4.0 * cfg.sigma + 2.0 * step;
    let reach = cfg.n_neighbors.div_ceil(2).max(1);
    let mut blocks = Vec::new();
    for i in 0..cfg.n_fibres {
        for hop in 1..=reach {
            let j = (i + hop) % cfg.n_fibres;
            if j == i || blocks.iter().any(|b: &CorrespondenceBlock| b.i == i.min(j) && b.j == i.max(j)) {
                continue;
            }
            let (a, b) = (i.min(j), i.max(j));
            let mut prng = stream_rng(cfg.seed, (a * cfg.n_fibres + b) as u64);
            let err = if cfg.rotation_noise > 0.0 { noise.sample(&mut prng) } else { 0.0 };
            // a point at local angle θ in fibre a sits at θ + o_a − o_b in fibre b
            let shift = offsets[a] - offsets[b] + err;
            let mut entries = Vec::new();
            for (r, &ta) in angles[a].iter().enumerate() {
                for (s, &tb) in angles[b].iter().enumerate() {
                    let d = wrap(ta + shift - tb);
                    if d.abs() <= cutoff {
                        entries.push((r, s, (-(d * d) / (2.0 * cfg.sigma * cfg.sigma)).exp()));
                    }
                }
            }
            let base_dist = d2(&pos[a], &pos[b]).sqrt();
            let block = CorrespondenceBlock {
                i: a,
                j: b,
                entries,
                base_dist: Some(base_dist),
            };
            blocks.push(block);
        }
    }
    let mut all = Vec::with_capacity(2 * blocks.len());
    for b in blocks {
        all.push(CorrespondenceBlock {
            i: b.j,
            j: b.i,
            entries: b.entries.iter().map(|&(r, s, w)| (s, r, w)).collect(),
            base_dist: b.base_dist,
        });
        all.push(b);
    }
    let sizes = vec![cfg.n_points; cfg.n_fibres];
    let hop_dist = d2(&pos[0], &pos[reach % cfg.n_fibres]).sqrt();
    let w = build_w_from_blocks(&sizes, &all, None, cfg.n_neighbors, hop_dist * hop_dist)?;
    Ok(CircleBundle {
        sizes,
        blocks: all,
        truth,
        angles,
        w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::sparse::BlockLayout;

    fn seg(labels: Vec<usize>, k: usize, sizes: Vec<usize>) -> Segmentation {
        Segmentation { k, labels, sizes, wcss: 0.0 }
    }

    #[test]
    fn consistency_examples() {
        let s = seg(vec![0, 0, 1, 1], 2, vec![4]);
        assert_eq!(label_consistency(&s, &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(label_consistency(&s, &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(label_consistency(&s, &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(matches!(label_consistency(&s, &[0, 1]), Err(HdmError::SizeMismatch(4, 2))));
        let p = seg(vec![2, 0, 1, 2, 0, 1], 3, vec![3, 3]);
        let d = consistency_details(&p, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert_eq!(d.overall, 1.0);
        assert_eq!(d.permutation, vec![1, 2, 0]);
    }

    #[test]
    fn k_one_labels_everything_zero() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let km = kmeans(&pts, 1, 3, 4).unwrap();
        assert!(km.labels.iter().all(|&l| l == 0));
        assert!(matches!(kmeans(&[], 1, 0, 1), Err(HdmError::EmptyInput)));
    }

    #[test]
    fn separated_blobs_match_brute_force() {
        let mut rng = rng_from_seed(4);
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let c = if i < 10 { 0.0 } else { 10.0 };
                vec![c + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]
            })
            .collect();
        let km = kmeans(&pts, 2, 1, DEFAULT_RESTARTS).unwrap();
        // brute force over all 2-partitions
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..(1 << 20) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<&Vec<f64>> = (0..20).filter(|&i| (mask >> i & 1 == 1) == side).map(|i| &pts[i]).collect();
                let m: Vec<f64> = (0..2).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
                cost += members.iter().map(|p| d2(p, &m)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, mask);
            }
        }
        let brute: Vec<usize> = (0..20).map(|i| (best.1 >> i & 1) as usize).collect();
        let s = seg(km.labels.clone(), 2, vec![20]);
        assert_eq!(label_consistency(&s, &brute).unwrap(), 1.0);
        assert!((km.wcss - best.0).abs() < 1e-9);
        assert!(km.labels[..10].iter().all(|&l| l == km.labels[0]));
        assert_ne!(km.labels[0], km.labels[10]);
    }

    #[test]
    fn deterministic_for_seed() {
        let mut rng = rng_from_seed(8);
        let pts: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen(), rng.gen(), rng.gen()]).collect();
        let a = kmeans(&pts, 4, 9, 5).unwrap();
        let b = kmeans(&pts, 4, 9, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn components_from_indicator_vectors() {
        // two components of sizes 3 and 2: the null space is spanned by
        // normalized indicators, any rotation of which separates them
        let (a, b) = (1.0 / 3f64.sqrt(), 1.0 / 2f64.sqrt());
        let (c, s) = (0.6, 0.8);
        let coords = HdmCoordinates {
            t: 1.0,
            k: 3,
            layout: BlockLayout::from_sizes(vec![5]),
            coords: (0..5)
                .map(|p| {
                    let (u, v) = if p < 3 { (a, 0.0) } else { (0.0, b) };
                    vec![c * u - s * v, s * u + c * v]
                })
                .collect(),
        };
        let seg = spectral_segmentation(&coords, 2, 0, 4).unwrap();
        assert!(seg.labels[..3].iter().all(|&l| l == seg.labels[0]));
        assert!(seg.labels[3..].iter().all(|&l| l == seg.labels[3]));
        assert_ne!(seg.labels[0], seg.labels[3]);
        let mut h = seg.histograms()[0].clone();
        h.sort_unstable();
        assert_eq!(h, vec![2, 3]);
    }

    #[test]
    fn circle_bundle_structure() {
        let b = circle_bundle(&CircleBundleConfig::default()).unwrap();
        assert_eq!(b.truth.len(), 40 * 60);
        assert!(b.w.invariants().holds());
        assert_eq!(b.w.components(), 1);
        assert!(circle_bundle(&CircleBundleConfig { n_points: 61, ..Default::default() }).is_err());
    }

    #[test]
    fn circle_bundle_segments_consistently() {
        let b = circle_bundle(&CircleBundleConfig::default()).unwrap();
        let cfg = SegmentConfig { n_eigs: 3, seed: 5, ..SegmentConfig::new(3) };
        let (_, seg) = segment_bundle(&b.w, &cfg).unwrap();
        let c = consistency_details(&seg, &b.truth).unwrap();
        let worst = c.per_fibre.iter().cloned().fold(1.0, f64::min);
        eprintln!("overall {} worst fibre {}", c.overall, worst);
        assert!(worst >= 0.95, "worst fibre {worst}");
    }
}
