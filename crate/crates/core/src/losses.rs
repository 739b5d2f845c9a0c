//! Separation, path-invariance, capacity and conformal-isometry losses and
//! their weighted sum.
//!
//! States are the time-major `(T·B)×N` matrix produced by
//! [`crate::model::unroll_batch`], indexed like [`PairMask`].

use std::sync::Arc;

use crate::autodiff::{AutodiffError, PairFilter, PairKernel, Tape, Tensor, Var};
use crate::trajectory::{PairClass, PairMask, TrajectoryBatch};
use crate::Scalar;

/// How the pairwise sums of the separation and invariance terms are reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairReduction {
    /// Sum over pairs divided by the number of pairs.
    Mean,
    /// Literal sum over ordered pairs (twice the unordered sum).
    RawSum,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Spatial length scale in meters.
    pub sigma_x: f64,
    /// Neural length scale.
    pub sigma_g: f64,
    pub lambda_sep: f64,
    pub lambda_inv: f64,
    pub lambda_cap: f64,
    pub lambda_coniso: f64,
    pub reduction: PairReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            sigma_x: 0.05,
            sigma_g: 0.4,
            lambda_sep: 1.0,
            lambda_inv: 0.1,
            lambda_cap: 0.5,
            lambda_coniso: 0.1,
            reduction: PairReduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma_x > 0.0) || !(self.sigma_g > 0.0) {
            return Err("sigma_x and sigma_g must be positive".into());
        }
        let weights = [self.lambda_sep, self.lambda_inv, self.lambda_cap, self.lambda_coniso];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err("loss weights must be finite and nonnegative".into());
        }
        Ok(())
    }
}

/// Values of every term for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub sep: f64,
    pub inv: f64,
    pub cap: f64,
    pub coniso: f64,
    pub total: f64,
    pub far_pairs: usize,
    pub near_pairs: usize,
    /// Steps with `0 < ‖v‖ < σ_x` entering the conformal-isometry term.
    pub qualifying_steps: usize,
}

impl LossBreakdown {
    /// Fewer than two qualifying steps: the conformal-isometry term is inactive.
    pub fn coniso_starved(&self) -> bool {
        self.qualifying_steps < 2
    }
}

/// Tape handles of every term.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub sep: Var,
    pub inv: Var,
    pub cap: Var,
    pub coniso: Var,
    pub total: Var,
    pub far_pairs: usize,
    pub near_pairs: usize,
    pub qualifying_steps: usize,
}

impl LossVars {
    pub fn breakdown<S: Scalar>(&self, tape: &Tape<S>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().to_f64_lossless();
        LossBreakdown {
            sep: v(self.sep),
            inv: v(self.inv),
            cap: v(self.cap),
            coniso: v(self.coniso),
            total: v(self.total),
            far_pairs: self.far_pairs,
            near_pairs: self.near_pairs,
            qualifying_steps: self.qualifying_steps,
        }
    }
}

fn reduce<S: Scalar>(tape: &mut Tape<S>, sum: Var, count: usize, reduction: PairReduction) -> Result<Var, AutodiffError> {
    match reduction {
        PairReduction::Mean => tape.scale(sum, S::one() / S::of(count.max(1) as f64)),
        PairReduction::RawSum => tape.scale(sum, S::of(2.0)),
    }
}

fn class_filter(mask: &PairMask, class: PairClass) -> PairFilter {
    match class {
        PairClass::Far => PairFilter::except(Arc::clone(mask.not_far_partners())),
        PairClass::Near => PairFilter::only(Arc::clone(mask.near_partners())),
    }
}

/// `Σ_far exp(−‖g − g′‖² / 2σ_g²)`, reduced per `reduction`.
pub fn separation_loss<S: Scalar>(
    tape: &mut Tape<S>,
    states: Var,
    mask: &Arc<PairMask>,
    sigma_g: f64,
    reduction: PairReduction,
) -> Result<Var, AutodiffError> {
    let kernel = PairKernel::Gaussian { sigma: S::of(sigma_g) };
    let sum = tape.pair_kernel_sum(states, class_filter(mask, PairClass::Far), kernel)?;
    reduce(tape, sum, mask.far_count(), reduction)
}

/// `Σ_near ‖g − g′‖²`, reduced per `reduction`.
pub fn invariance_loss<S: Scalar>(
    tape: &mut Tape<S>,
    states: Var,
    mask: &Arc<PairMask>,
    reduction: PairReduction,
) -> Result<Var, AutodiffError> {
    let sum = tape.pair_kernel_sum(states, class_filter(mask, PairClass::Near), PairKernel::SquaredDistance)?;
    reduce(tape, sum, mask.near_count(), reduction)
}

/// `−‖mean of all states‖²`.
pub fn capacity_loss<S: Scalar>(tape: &mut Tape<S>, states: Var) -> Result<Var, AutodiffError> {
    let mean = tape.mean_rows(states)?;
    let sq = tape.square(mean)?;
    let s = tape.sum(sq)?;
    tape.scale(s, -S::one())
}

/// Population variance of `‖g_t − g_{t−1}‖ / ‖v_t‖` over steps with
/// `0 < ‖v_t‖ < σ_x`. Returns the term and the number of qualifying steps;
/// with fewer than two the term is a constant zero.
pub fn conformal_isometry_loss<S: Scalar>(
    tape: &mut Tape<S>,
    states: Var,
    g0: Var,
    batch: &TrajectoryBatch,
    sigma_x: f64,
) -> Result<(Var, usize), AutodiffError> {
    let bs = batch.batch_size();
    let (mut cur, mut prev, mut inv_speed) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..batch.steps() {
        for b in 0..bs {
            let v = batch.velocity(b, t);
            let speed = v[0].hypot(v[1]);
            if speed > 0.0 && speed < sigma_x {
                cur.push(1 + t * bs + b);
                prev.push(if t == 0 { 0 } else { 1 + (t - 1) * bs + b });
                inv_speed.push(S::of(1.0 / speed));
            }
        }
    }
    let count = cur.len();
    if count < 2 {
        return Ok((tape.constant(Tensor::scalar(S::zero())), count));
    }
    let full = tape.concat(&[g0, states])?;
    let a = tape.gather_rows(full, cur)?;
    let b = tape.gather_rows(full, prev)?;
    let d = tape.sub(a, b)?;
    let dist = tape.row_l2norm(d)?;
    let ratio = tape.mul_const(dist, inv_speed)?;
    Ok((tape.variance(ratio)?, count))
}

/// Weighted sum of the four terms.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    states: Var,
    g0: Var,
    batch: &TrajectoryBatch,
    mask: &Arc<PairMask>,
    config: &LossConfig,
) -> Result<LossVars, AutodiffError> {
    let sep = separation_loss(tape, states, mask, config.sigma_g, config.reduction)?;
    let inv = invariance_loss(tape, states, mask, config.reduction)?;
    let cap = capacity_loss(tape, states)?;
    let (coniso, qualifying_steps) = conformal_isometry_loss(tape, states, g0, batch, config.sigma_x)?;
    let terms = [(sep, config.lambda_sep), (inv, config.lambda_inv), (cap, config.lambda_cap), (coniso, config.lambda_coniso)];
    let mut total = tape.scale(terms[0].0, S::of(terms[0].1))?;
    for &(v, w) in &terms[1..] {
        let s = tape.scale(v, S::of(w))?;
        total = tape.add(total, s)?;
    }
    Ok(LossVars { sep, inv, cap, coniso, total, far_pairs: mask.far_count(), near_pairs: mask.near_count(), qualifying_steps })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::trajectory::{batch_from_parts, Vec2};

    fn mat(rows: &[Vec<f64>]) -> Tensor<f64> {
        let n = rows[0].len();
        Tensor::new(vec![rows.len(), n], rows.concat()).unwrap()
    }

    fn mask(pos: &[Vec2], sigma_x: f64) -> Arc<PairMask> {
        Arc::new(PairMask::from_positions(pos.to_vec(), pos.len(), sigma_x))
    }

    fn value(t: &Tape<f64>, v: Var) -> f64 {
        t.value(v).item()
    }

    #[test]
    fn separation_examples() {
        let m = mask(&[[0.0, 0.0], [1.0, 0.0]], 0.05);
        let mut t = Tape::new();
        let same = t.constant(mat(&[vec![1.0, 0.0], vec![1.0, 0.0]]));
        let s = separation_loss(&mut t, same, &m, 0.4, PairReduction::Mean).unwrap();
        assert_eq!(value(&t, s), 1.0);

        // ‖Δg‖² = 2σ_g² with σ_g = 0.4 → 0.32
        let d = (0.32f64).sqrt();
        let apart = t.constant(mat(&[vec![0.0, 0.0], vec![d, 0.0]]));
        let s = separation_loss(&mut t, apart, &m, 0.4, PairReduction::Mean).unwrap();
        assert!((value(&t, s) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((value(&t, s) - 0.367879).abs() < 1e-6);

        let none = mask(&[[0.0, 0.0], [0.01, 0.0]], 0.05);
        let s = separation_loss(&mut t, same, &none, 0.4, PairReduction::Mean).unwrap();
        assert_eq!(value(&t, s), 0.0);
    }

    #[test]
    fn raw_sum_counts_ordered_pairs() {
        let m = mask(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 0.05);
        let mut t = Tape::new();
        let same = t.constant(mat(&[vec![1.0], vec![1.0], vec![1.0]]));
        let mean = separation_loss(&mut t, same, &m, 0.4, PairReduction::Mean).unwrap();
        let raw = separation_loss(&mut t, same, &m, 0.4, PairReduction::RawSum).unwrap();
        assert_eq!(value(&t, mean), 1.0);
        assert_eq!(value(&t, raw), 6.0);
    }

    #[test]
    fn invariance_examples() {
        let m = mask(&[[0.0, 0.0], [0.01, 0.0]], 0.05);
        let mut t = Tape::new();
        let same = t.constant(mat(&[vec![0.6, 0.8], vec![0.6, 0.8]]));
        let v = invariance_loss(&mut t, same, &m, PairReduction::Mean).unwrap();
        assert_eq!(value(&t, v), 0.0);
        let ortho = t.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let v = invariance_loss(&mut t, ortho, &m, PairReduction::Mean).unwrap();
        assert_eq!(value(&t, v), 2.0);
    }

    #[test]
    fn capacity_examples() {
        let mut t = Tape::new();
        let same = t.constant(mat(&vec![vec![0.6, 0.0, 0.8]; 5]));
        let c = capacity_loss(&mut t, same).unwrap();
        assert!((value(&t, c) + 1.0).abs() < 1e-12);
        for n in 1..6 {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
            let e = t.constant(mat(&rows));
            let c = capacity_loss(&mut t, e).unwrap();
            assert!((value(&t, c) + 1.0 / n as f64).abs() < 1e-12);
        }
    }

    fn line_batch(speeds: &[f64]) -> TrajectoryBatch {
        let vel: Vec<Vec2> = speeds.iter().map(|&s| [s, 0.0]).collect();
        batch_from_parts(vel, vec![(0..speeds.len()).collect()], true)
    }

    #[test]
    fn conformal_isometry_examples() {
        // states along a quarter circle; step t moves by angle a_t, chord 2 sin(a_t/2)
        let states_for = |angles: &[f64]| {
            let mut theta: f64 = 0.0;
            let rows: Vec<Vec<f64>> = angles
                .iter()
                .map(|a| {
                    theta += a;
                    vec![theta.cos(), theta.sin()]
                })
                .collect();
            mat(&rows)
        };
        let chord = |a: f64| 2.0 * (a / 2.0).sin();
        let mut t = Tape::new();
        let g0 = t.constant(mat(&[vec![1.0, 0.0]]));

        // equal ratios: chord/speed constant
        let speeds = [0.01, 0.02, 0.03];
        let target = 5.0;
        let angles: Vec<f64> = speeds.iter().map(|s| 2.0 * (target * s / 2.0f64).asin()).collect();
        let s = t.constant(states_for(&angles));
        let (c, n) = conformal_isometry_loss(&mut t, s, g0, &line_batch(&speeds), 0.05).unwrap();
        assert_eq!(n, 3);
        assert!(value(&t, c).abs() < 1e-12);

        // ratios {1, 3}
        let speeds = [0.02, 0.02];
        let angles = [2.0 * (0.01f64).asin(), 2.0 * (0.03f64).asin()];
        assert!((chord(angles[0]) / 0.02 - 1.0).abs() < 1e-12);
        let s = t.constant(states_for(&angles));
        let (c, _) = conformal_isometry_loss(&mut t, s, g0, &line_batch(&speeds), 0.05).unwrap();
        assert!((value(&t, c) - 1.0).abs() < 1e-10);

        // nothing qualifies
        let speeds = [0.0, 0.2, 0.05];
        let s = t.constant(states_for(&[0.1, 0.2, 0.3]));
        let (c, n) = conformal_isometry_loss(&mut t, s, g0, &line_batch(&speeds), 0.05).unwrap();
        assert_eq!((value(&t, c), n), (0.0, 0));
    }

    fn random_unit_rows(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<Vec<f64>> {
        use rand::Rng;
        (0..m)
            .map(|_| {
                let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = crate::trajectory::sample_batch(4, 3, &mut rng, &Default::default());
        let m = Arc::new(crate::trajectory::build_pair_masks(&batch, 0.05));
        let rows = random_unit_rows(&mut rng, 12, 5);
        let mut t = Tape::new();
        let s = t.constant(mat(&rows));
        let g0 = t.constant(mat(&random_unit_rows(&mut rng, 1, 5)));
        let cfg = LossConfig { lambda_sep: 0.0, lambda_inv: 0.0, lambda_cap: 0.0, lambda_coniso: 0.0, ..Default::default() };
        let lv = total_loss(&mut t, s, g0, &batch, &m, &cfg).unwrap();
        let bd = lv.breakdown(&t);
        assert_eq!(bd.total, 0.0);
        let cfg = LossConfig::default();
        let lv = total_loss(&mut t, s, g0, &batch, &m, &cfg).unwrap();
        let bd = lv.breakdown(&t);
        let want = bd.sep + 0.1 * bd.inv + 0.5 * bd.cap + 0.1 * bd.coniso;
        assert!((bd.total - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn capacity_is_bounded(seed in 0u64..1000, m in 1usize..20, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = random_unit_rows(&mut rng, m, n);
            let mut t = Tape::new();
            let s = t.constant(mat(&rows));
            let c = capacity_loss(&mut t, s).unwrap();
            let v = value(&t, c);
            prop_assert!((-1.0 - 1e-12..=1e-12).contains(&v));
        }

        #[test]
        fn separation_never_increases_with_distance(seed in 0u64..1000, push in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = random_unit_rows(&mut rng, 2, 4);
            let m = mask(&[[0.0, 0.0], [1.0, 0.0]], 0.05);
            let eval = |rows: &[Vec<f64>]| {
                let mut t = Tape::new();
                let s = t.constant(mat(rows));
                let v = separation_loss(&mut t, s, &m, 0.4, PairReduction::Mean).unwrap();
                value(&t, v)
            };
            let base = eval(&rows);
            // move row 1 further from row 0 along their difference
            let dir: Vec<f64> = rows[1].iter().zip(&rows[0]).map(|(a, b)| a - b).collect();
            let far: Vec<f64> = rows[1].iter().zip(&dir).map(|(a, d)| a + push * d).collect();
            prop_assert!(eval(&[rows[0].clone(), far]) <= base + 1e-15);
        }

        #[test]
        fn terms_are_symmetric_in_batch_index(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (bs, ts, n) = (3usize, 4usize, 5usize);
            let batch = crate::trajectory::sample_batch(ts, bs, &mut rng, &Default::default());
            let rows = random_unit_rows(&mut rng, bs * ts, n);
            let g0 = random_unit_rows(&mut rng, 1, n);
            let cfg = LossConfig { sigma_x: 0.2, ..Default::default() };
            let eval = |batch: &TrajectoryBatch, rows: &[Vec<f64>]| {
                let m = Arc::new(crate::trajectory::build_pair_masks(batch, cfg.sigma_x));
                let mut t = Tape::new();
                let s = t.constant(mat(rows));
                let g = t.constant(mat(&g0));
                total_loss(&mut t, s, g, batch, &m, &cfg).unwrap().breakdown(&t)
            };
            let a = eval(&batch, &rows);
            // reverse the order of trajectories
            let perm: Vec<usize> = (0..bs).rev().collect();
            let index: Vec<Vec<usize>> = perm.iter().map(|&b| batch.index()[b].clone()).collect();
            let swapped = batch_from_parts(batch.base_velocities().to_vec(), index, true);
            let rows2: Vec<Vec<f64>> = (0..ts).flat_map(|t| perm.iter().map(move |&b| (t, b)))
                .map(|(t, b)| rows[t * bs + b].clone()).collect();
            let b = eval(&swapped, &rows2);
            for (x, y) in [(a.sep, b.sep), (a.inv, b.inv), (a.cap, b.cap), (a.coniso, b.coniso)] {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn coniso_positive_when_ratios_differ(r1 in 0.5f64..3.0, r2 in 0.5f64..3.0) {
            prop_assume!((r1 - r2).abs() > 1e-3);
            let mut t = Tape::new();
            let g0 = t.constant(mat(&[vec![1.0, 0.0]]));
            let speeds = [0.01, 0.01];
            let (a1, a2) = (2.0 * (r1 * 0.005f64).asin(), 2.0 * (r2 * 0.005f64).asin());
            let s = t.constant(mat(&[vec![a1.cos(), a1.sin()], vec![(a1 + a2).cos(), (a1 + a2).sin()]]));
            let (c, _) = conformal_isometry_loss(&mut t, s, g0, &line_batch(&speeds), 0.05).unwrap();
            prop_assert!(value(&t, c) > 0.0);
        }
    }
}
