//! Manifold structure of one module's population activity: PCA, a
//! Laplacian-eigenmap embedding of the k-nearest-neighbor graph, and the
//! projections of the states onto the three lattice phase axes.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::curves::StateSamples;
use super::EvalError;

/// Largest relative radial spread of a projection that still counts as a ring.
pub const MAX_RINGNESS: f64 = 0.15;
/// Largest mean resultant of projection angles that still covers the circle.
pub const MAX_ANGULAR_RESULTANT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TorusConfig {
    pub pca_dims: usize,
    pub neighbors: usize,
    pub embed_dims: usize,
    /// Fewer samples than this is an error.
    pub min_samples: usize,
    /// Samples used for the graph embedding (evenly strided subset).
    pub max_embed_samples: usize,
    /// Krylov subspace dimension of the eigensolver.
    pub krylov_dims: usize,
    pub seed: u64,
}

impl Default for TorusConfig {
    fn default() -> Self {
        TorusConfig { pca_dims: 6, neighbors: 15, embed_dims: 3, min_samples: 5000, max_embed_samples: 6000, krylov_dims: 300, seed: 0 }
    }
}

/// Population vector `Σᵢ gᵢ e^{iφᵢ}` on one phase axis.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RingProjection {
    pub mean_radius: f64,
    /// Radial standard deviation over mean radius.
    pub ringness: f64,
    /// Mean resultant length of the projection angles; near 0 when they cover the circle.
    pub angular_resultant: f64,
    pub is_ring: bool,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TorusReport {
    pub samples: usize,
    /// Constant activity: no embedding was computed.
    pub degenerate: bool,
    /// Fraction of variance captured by each retained principal component.
    pub explained_variance: Vec<f64>,
    /// Smallest nontrivial normalized-Laplacian eigenvalues.
    pub laplacian_eigenvalues: Vec<f64>,
    pub embedding: Vec<Vec<f64>>,
    pub projections: [RingProjection; 3],
}

impl TorusReport {
    pub fn rings(&self) -> usize {
        self.projections.iter().filter(|p| p.is_ring).count()
    }
}

/// Ring projections of `samples` given each unit's three phases.
pub fn ring_projections(samples: &StateSamples, phases: &[[f64; 3]]) -> [RingProjection; 3] {
    assert_eq!(phases.len(), samples.units, "one phase triple per unit");
    std::array::from_fn(|a| {
        let (c, s): (Vec<f64>, Vec<f64>) = phases.iter().map(|p| (p[a].cos(), p[a].sin())).unzip();
        let mut radii = Vec::with_capacity(samples.len());
        let (mut uc, mut us) = (0.0, 0.0);
        for i in 0..samples.len() {
            let g = samples.state(i);
            let x: f64 = g.iter().zip(&c).map(|(a, b)| a * b).sum();
            let y: f64 = g.iter().zip(&s).map(|(a, b)| a * b).sum();
            let r = x.hypot(y);
            radii.push(r);
            if r > 0.0 {
                uc += x / r;
                us += y / r;
            }
        }
        let n = radii.len().max(1) as f64;
        let mean = radii.iter().sum::<f64>() / n;
        let sd = (radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let ringness = if mean > 0.0 { sd / mean } else { f64::INFINITY };
        let angular_resultant = uc.hypot(us) / n;
        RingProjection {
            mean_radius: mean,
            ringness,
            angular_resultant,
            is_ring: ringness < MAX_RINGNESS && angular_resultant < MAX_ANGULAR_RESULTANT,
        }
    })
}

/// Top principal components: `(scores n×d, explained variance fractions)`.
fn pca(samples: &StateSamples, dims: usize) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
    let (n, u) = (samples.len(), samples.units);
    let mut mean = vec![0.0; u];
    for i in 0..n {
        for (m, &g) in mean.iter_mut().zip(samples.state(i)) {
            *m += g / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(u, u);
    let mut row = vec![0.0; u];
    for i in 0..n {
        for (r, (g, m)) in row.iter_mut().zip(samples.state(i).iter().zip(&mean)) {
            *r = g - m;
        }
        for a in 0..u {
            for b in a..u {
                cov[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..u {
        for b in a..u {
            cov[(a, b)] /= n as f64;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..u).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let keep = &order[..dims.min(u)];
    let explained = keep.iter().map(|&k| if total > 0.0 { eig.eigenvalues[k].max(0.0) / total } else { 0.0 }).collect();
    let scores = (0..n)
        .map(|i| {
            let g = samples.state(i);
            keep.iter().map(|&k| (0..u).map(|a| (g[a] - mean[a]) * eig.eigenvectors[(a, k)]).sum()).collect()
        })
        .collect();
    (scores, explained, total)
}

/// Symmetrized kNN connectivity `½(A + Aᵀ)` as adjacency lists.
fn knn_graph(points: &[Vec<f64>], k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = points.len();
    let k = k.min(n.saturating_sub(1));
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut d = vec![(0.0, 0usize); n];
    for i in 0..n {
        for (j, slot) in d.iter_mut().enumerate() {
            let dist: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            *slot = (if i == j { f64::INFINITY } else { dist }, j);
        }
        if k > 0 {
            d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        for &(_, j) in &d[..k] {
            adj[i].push((j, 0.5));
            adj[j].push((i, 0.5));
        }
    }
    for list in &mut adj {
        list.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(list.len());
        for &(j, w) in list.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == j => last.1 += w,
                _ => merged.push((j, w)),
            }
        }
        *list = merged;
    }
    adj
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Leading eigenpair of the symmetric operator `apply` on the complement of
/// `deflate` (orthonormal), by Lanczos with full reorthogonalization.
fn lanczos_top(
    apply: &dyn Fn(&[f64], &mut [f64]),
    n: usize,
    deflate: &[Vec<f64>],
    krylov: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(f64, Vec<f64>)> {
    let orth = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
        for q in basis.iter().chain(deflate) {
            let c = dot(v, q);
            v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
    };
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(krylov);
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    orth(&mut v, &basis);
    let mut w = vec![0.0; n];
    for _ in 0..krylov {
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-12 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v.clone());
        apply(&v, &mut w);
        alpha.push(dot(&w, &v));
        // two passes of Gram–Schmidt keep the basis orthogonal
        orth(&mut w, &basis);
        orth(&mut w, &basis);
        beta.push(dot(&w, &w).sqrt());
        std::mem::swap(&mut v, &mut w);
    }
    let k = basis.len();
    if k == 0 {
        return None;
    }
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let c = (0..k).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))?;
    let mut x = vec![0.0; n];
    for (r, q) in basis.iter().enumerate() {
        let y = eig.eigenvectors[(r, c)];
        x.iter_mut().zip(q).for_each(|(a, b)| *a += y * b);
    }
    let norm = dot(&x, &x).sqrt();
    x.iter_mut().for_each(|a| *a /= norm);
    Some((eig.eigenvalues[c], x))
}

/// Laplacian eigenmap: eigenvectors of the normalized Laplacian with the
/// smallest nontrivial eigenvalues, found one at a time as leading
/// eigenvectors of `D^{-1/2} W D^{-1/2}` with earlier ones deflated, so
/// repeated eigenvalues are resolved.
fn spectral_embedding(adj: &[Vec<(usize, f64)>], dims: usize, krylov: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = adj.len();
    let deg: Vec<f64> = adj.iter().map(|l| l.iter().map(|e| e.1).sum::<f64>().max(1e-300)).collect();
    let isd: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let apply = |x: &[f64], y: &mut [f64]| {
        for i in 0..n {
            y[i] = isd[i] * adj[i].iter().map(|&(j, w)| w * isd[j] * x[j]).sum::<f64>();
        }
    };
    let mut found: Vec<Vec<f64>> = {
        let v: Vec<f64> = deg.iter().map(|d| d.sqrt()).collect();
        let norm = dot(&v, &v).sqrt();
        vec![v.into_iter().map(|x| x / norm).collect()]
    };
    let mut values = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = krylov.min(n.saturating_sub(1)).max(1);
    for _ in 0..dims.min(n.saturating_sub(1)) {
        let Some((mu, x)) = lanczos_top(&apply, n, &found, m, &mut rng) else { break };
        values.push(1.0 - mu);
        found.push(x);
    }
    let coords = (0..n).map(|i| found[1..].iter().map(|v| isd[i] * v[i]).collect()).collect();
    (coords, values)
}

/// PCA, spectral embedding and phase-axis ring projections of one module.
pub fn torus_analysis(samples: &StateSamples, phases: &[[f64; 3]], config: &TorusConfig) -> Result<TorusReport, EvalError> {
    if samples.len() < config.min_samples {
        return Err(EvalError::Samples(format!("torus analysis needs at least {} samples, got {}", config.min_samples, samples.len())));
    }
    let projections = ring_projections(samples, phases);
    let stride = samples.len().div_ceil(config.max_embed_samples.max(1)).max(1);
    let mut sub = StateSamples::new(samples.units);
    for i in (0..samples.len()).step_by(stride) {
        sub.push(samples.state(i), samples.positions[i], samples.times[i]);
    }
    let (scores, explained_variance, total) = pca(&sub, config.pca_dims);
    if !(total > 1e-20) {
        return Ok(TorusReport {
            samples: samples.len(),
            degenerate: true,
            explained_variance,
            laplacian_eigenvalues: Vec::new(),
            embedding: Vec::new(),
            projections,
        });
    }
    let adj = knn_graph(&scores, config.neighbors);
    let (embedding, laplacian_eigenvalues) = spectral_embedding(&adj, config.embed_dims, config.krylov_dims, config.seed);
    Ok(TorusReport { samples: samples.len(), degenerate: false, explained_variance, laplacian_eigenvalues, embedding, projections })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::TAU;

    use super::*;
    use crate::gridcode::IdealCode;
    use crate::trajectory::{sample_eval_trajectory, Arena, EvalWalk};

    fn walk(steps: usize) -> Vec<crate::trajectory::Vec2> {
        sample_eval_trajectory(&Arena::square(2.0), &EvalWalk::default(), steps, &mut ChaCha8Rng::seed_from_u64(3)).positions
    }

    #[test]
    fn oracle_module_is_a_torus() {
        let code = IdealCode::default_oracle();
        let m = &code.modules()[0];
        let mut s = StateSamples::new(code.units());
        for (t, p) in walk(300_000).into_iter().enumerate().step_by(50) {
            s.push(&code.state(p), p, t);
        }
        let phases: Vec<[f64; 3]> = (0..m.cells()).map(|c| m.phase_triple(c)).collect();
        let report = torus_analysis(&s, &phases, &TorusConfig::default()).unwrap();
        assert!(!report.degenerate);
        assert_eq!(report.rings(), 3, "{:?}", report.projections);
        assert!(report.projections.iter().all(|p| p.ringness < 0.15));
        assert_eq!(report.embedding[0].len(), 3);
        assert!(report.laplacian_eigenvalues.iter().all(|&l| (0.0..0.5).contains(&l)), "{:?}", report.laplacian_eigenvalues);
        // a flat torus has most of its variance in the first four components
        assert!(report.explained_variance[..4].iter().sum::<f64>() > 0.6);
    }

    #[test]
    fn ring_code_has_one_ring() {
        let cells = 32;
        let k = TAU / 0.5;
        let mut s = StateSamples::new(cells);
        for (t, p) in walk(300_000).into_iter().enumerate().step_by(50) {
            let mut g: Vec<f64> = (0..cells).map(|i| (k * p[0] + TAU * i as f64 / cells as f64).cos().max(0.0)).collect();
            let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            g.iter_mut().for_each(|x| *x /= n);
            s.push(&g, p, t);
        }
        let phases: Vec<[f64; 3]> = (0..cells).map(|i| [TAU * i as f64 / cells as f64, 0.0, 0.0]).collect();
        let report = torus_analysis(&s, &phases, &TorusConfig::default()).unwrap();
        assert!(report.projections[0].is_ring);
        assert!(!report.projections[1].is_ring && !report.projections[2].is_ring);
        assert_eq!(report.rings(), 1);
    }

    #[test]
    fn constant_states_are_degenerate() {
        let mut s = StateSamples::new(4);
        for t in 0..5000 {
            s.push(&[0.5; 4], [0.0, 0.0], t);
        }
        let report = torus_analysis(&s, &[[0.0, 1.0, 2.0]; 4], &TorusConfig::default()).unwrap();
        assert!(report.degenerate && report.embedding.is_empty());
        assert_eq!(report.rings(), 0);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let s = StateSamples::new(4);
        assert!(matches!(torus_analysis(&s, &[[0.0; 3]; 4], &TorusConfig::default()), Err(EvalError::Samples(_))));
    }

    #[test]
    fn lanczos_finds_cycle_graph_spectrum() {
        // cycle graph: normalized Laplacian eigenvalues 1 − cos(2πj/n)
        let n = 200;
        let adj: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![((i + n - 1) % n, 1.0), ((i + 1) % n, 1.0)]).collect();
        let (_, vals) = spectral_embedding(&adj, 3, 199, 1);
        let want = [1.0 - (TAU / n as f64).cos(), 1.0 - (TAU / n as f64).cos(), 1.0 - (2.0 * TAU / n as f64).cos()];
        for (v, w) in vals.iter().zip(want) {
            assert!((v - w).abs() < 1e-8, "{vals:?}");
        }
    }
}
