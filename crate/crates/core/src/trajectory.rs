//! Training and evaluation trajectories.
//!
//! A training batch is one i.i.d. velocity sequence replayed under `B`
//! random permutations, so every trajectory shares its start and end point
//! and the batch contains many spatial intersections. States of a batch are
//! flattened time-major: flat index `t * B + b`.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::io::{read_f64s, read_magic, read_u32, write_f64s, BinaryError};

pub type Vec2 = [f64; 2];

/// Distribution of per-step displacement components.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum VelocityDist {
    /// Each component i.i.d. uniform on `[low, high)`.
    Uniform { low: f64, high: f64 },
}

impl Default for VelocityDist {
    fn default() -> Self {
        VelocityDist::Uniform { low: -0.15, high: 0.15 }
    }
}

impl VelocityDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        match *self {
            VelocityDist::Uniform { low, high } => [rng.gen_range(low..high), rng.gen_range(low..high)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    /// Distinct velocities referenced by `index`. For a permuted batch these
    /// are the `T` base velocities.
    velocities: Vec<Vec2>,
    /// `index[b][t]`: which entry of `velocities` trajectory `b` takes at step `t`.
    index: Vec<Vec<usize>>,
    positions: Vec<Vec<Vec2>>,
    origin: Vec2,
    permuted: bool,
}

impl TrajectoryBatch {
    pub fn batch_size(&self) -> usize {
        self.index.len()
    }

    pub fn steps(&self) -> usize {
        self.index.first().map_or(0, Vec::len)
    }

    pub fn origin(&self) -> Vec2 {
        self.origin
    }

    pub fn is_permuted(&self) -> bool {
        self.permuted
    }

    /// Distinct velocity table (the base sequence for permuted batches).
    pub fn base_velocities(&self) -> &[Vec2] {
        &self.velocities
    }

    /// Per-trajectory index into [`Self::base_velocities`]; for permuted
    /// batches row `b` is the permutation `π_b`.
    pub fn index(&self) -> &[Vec<usize>] {
        &self.index
    }

    pub fn velocity(&self, b: usize, t: usize) -> Vec2 {
        self.velocities[self.index[b][t]]
    }

    pub fn position(&self, b: usize, t: usize) -> Vec2 {
        self.positions[b][t]
    }

    pub fn trajectory_positions(&self, b: usize) -> &[Vec2] {
        &self.positions[b]
    }

    /// Positions in flat time-major order (`t * B + b`).
    pub fn flat_positions(&self) -> Vec<Vec2> {
        let (bs, ts) = (self.batch_size(), self.steps());
        let mut out = Vec::with_capacity(bs * ts);
        for t in 0..ts {
            for b in 0..bs {
                out.push(self.positions[b][t]);
            }
        }
        out
    }

    /// Largest distance between any trajectory's endpoint and trajectory 0's.
    pub fn endpoint_spread(&self) -> f64 {
        let t = match self.steps() {
            0 => return 0.0,
            t => t - 1,
        };
        let e0 = self.positions[0][t];
        self.positions.iter().map(|p| dist(p[t], e0)).fold(0.0, f64::max)
    }

    /// Writes the batch as a `GSTJ` trajectory dump.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<(), BinaryError> {
        w.write_all(TRAJ_MAGIC)?;
        for v in [TRAJ_VERSION, self.batch_size() as u32, self.steps() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let (bs, ts) = (self.batch_size(), self.steps());
        let mut vel = Vec::with_capacity(bs * ts * 2);
        let mut pos = Vec::with_capacity(bs * ts * 2);
        for b in 0..bs {
            for t in 0..ts {
                vel.extend_from_slice(&self.velocity(b, t));
                pos.extend_from_slice(&self.positions[b][t]);
            }
        }
        write_f64s(&mut w, &vel)?;
        write_f64s(&mut w, &pos)?;
        Ok(())
    }
}

const TRAJ_MAGIC: &[u8; 4] = b"GSTJ";
const TRAJ_VERSION: u32 = 1;

/// Contents of a `GSTJ` dump: per-trajectory velocities and positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDump {
    pub velocities: Vec<Vec<Vec2>>,
    pub positions: Vec<Vec<Vec2>>,
}

pub fn read_trajectory_dump<R: Read>(mut r: R) -> Result<TrajectoryDump, BinaryError> {
    read_magic(&mut r, TRAJ_MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != TRAJ_VERSION {
        return Err(BinaryError::Version { found: version, expected: TRAJ_VERSION });
    }
    let bs = read_u32(&mut r)? as usize;
    let ts = read_u32(&mut r)? as usize;
    let vel = read_f64s(&mut r, bs * ts * 2)?;
    let pos = read_f64s(&mut r, bs * ts * 2)?;
    let split = |flat: Vec<f64>| -> Vec<Vec<Vec2>> {
        flat.chunks(2 * ts.max(1)).take(bs).map(|row| row.chunks(2).map(|c| [c[0], c[1]]).collect()).collect()
    };
    Ok(TrajectoryDump { velocities: split(vel), positions: split(pos) })
}

#[inline]
fn sq(a: Vec2, b: Vec2) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Cumulative sum of displacements with unit time step.
pub fn integrate_positions(velocities: &[Vec2], origin: Vec2) -> Vec<Vec2> {
    let mut p = origin;
    velocities
        .iter()
        .map(|v| {
            p = [p[0] + v[0], p[1] + v[1]];
            p
        })
        .collect()
}

/// One base sequence of `steps` velocities replayed under `batch` uniformly
/// random permutations, integrated from the origin.
pub fn sample_batch<R: Rng + ?Sized>(steps: usize, batch: usize, rng: &mut R, dist: &VelocityDist) -> TrajectoryBatch {
    assert!(steps >= 1 && batch >= 1, "sample_batch needs T >= 1 and B >= 1");
    let velocities: Vec<Vec2> = (0..steps).map(|_| dist.sample(rng)).collect();
    let index: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            let mut perm: Vec<usize> = (0..steps).collect();
            perm.shuffle(rng);
            perm
        })
        .collect();
    build(velocities, index, true)
}

/// `batch` independent velocity sequences, used when permutation
/// augmentation is ablated.
pub fn sample_independent_batch<R: Rng + ?Sized>(steps: usize, batch: usize, rng: &mut R, dist: &VelocityDist) -> TrajectoryBatch {
    assert!(steps >= 1 && batch >= 1, "sample_independent_batch needs T >= 1 and B >= 1");
    let velocities: Vec<Vec2> = (0..steps * batch).map(|_| dist.sample(rng)).collect();
    let index = (0..batch).map(|b| (b * steps..(b + 1) * steps).collect()).collect();
    build(velocities, index, false)
}

/// Assembles a batch from explicit velocities and per-trajectory indices.
pub fn batch_from_parts(velocities: Vec<Vec2>, index: Vec<Vec<usize>>, permuted: bool) -> TrajectoryBatch {
    build(velocities, index, permuted)
}

fn build(velocities: Vec<Vec2>, index: Vec<Vec<usize>>, permuted: bool) -> TrajectoryBatch {
    let origin = [0.0, 0.0];
    let positions = index
        .iter()
        .map(|row| {
            let seq: Vec<Vec2> = row.iter().map(|&i| velocities[i]).collect();
            integrate_positions(&seq, origin)
        })
        .collect();
    TrajectoryBatch { velocities, index, positions, origin, permuted }
}

/// Relation of two states' positions to the spatial length scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PairClass {
    /// Distance strictly greater than `σ_x`.
    Far,
    /// Distance strictly less than `σ_x`.
    Near,
}

/// Classification of every unordered pair of distinct batch states.
///
/// Only the sparse side is stored: for every state, the sorted partners
/// closer than `σ_x` (near) and those that are not far (near or exactly at
/// `σ_x`). Far pairs, tens of millions at full batch size, are everything
/// else. Pairs exactly at `σ_x` belong to neither class.
#[derive(Clone, Debug)]
pub struct PairMask {
    positions: Vec<Vec2>,
    batch: usize,
    sigma_x: f64,
    near: Arc<[Vec<u32>]>,
    not_far: Arc<[Vec<u32>]>,
    far_count: usize,
    near_count: usize,
}

impl PairMask {
    /// Builds a mask over explicit flat positions.
    pub fn from_positions(positions: Vec<Vec2>, batch: usize, sigma_x: f64) -> Self {
        assert!(sigma_x > 0.0, "sigma_x must be positive");
        let m = positions.len();
        assert!(m <= u32::MAX as usize, "too many states for a pair mask");
        let s2 = sigma_x * sigma_x;
        let mut near: Vec<Vec<u32>> = vec![Vec::new(); m];
        let mut ties: Vec<(u32, u32)> = Vec::new();
        for i in 0..m {
            let p = positions[i];
            for (j, q) in positions.iter().enumerate().skip(i + 1) {
                let d2 = sq(p, *q);
                if d2 < s2 {
                    near[i].push(j as u32);
                    near[j].push(i as u32);
                } else if d2 == s2 {
                    ties.push((i as u32, j as u32));
                }
            }
        }
        // partners were pushed in increasing order for j > i, and for j < i
        // before any j > i of the same row, so each list is already sorted
        let near_count = near.iter().map(Vec::len).sum::<usize>() / 2;
        let far_count = m * m.saturating_sub(1) / 2 - near_count - ties.len();
        let near: Arc<[Vec<u32>]> = near.into();
        let not_far = if ties.is_empty() {
            Arc::clone(&near)
        } else {
            let mut lists = near.to_vec();
            for &(i, j) in &ties {
                lists[i as usize].push(j);
                lists[j as usize].push(i);
            }
            lists.iter_mut().for_each(|l| l.sort_unstable());
            lists.into()
        };
        PairMask { positions, batch: batch.max(1), sigma_x, near, not_far, far_count, near_count }
    }

    /// Sorted near partners of every state, in both directions.
    pub fn near_partners(&self) -> &Arc<[Vec<u32>]> {
        &self.near
    }

    /// Sorted partners of every state that are not far.
    pub fn not_far_partners(&self) -> &Arc<[Vec<u32>]> {
        &self.not_far
    }

    pub fn len_states(&self) -> usize {
        self.positions.len()
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    pub fn far_count(&self) -> usize {
        self.far_count
    }

    pub fn near_count(&self) -> usize {
        self.near_count
    }

    pub fn count(&self, class: PairClass) -> usize {
        match class {
            PairClass::Far => self.far_count,
            PairClass::Near => self.near_count,
        }
    }

    pub fn total_pairs(&self) -> usize {
        let m = self.positions.len();
        m * m.saturating_sub(1) / 2
    }

    #[inline]
    pub fn classify(&self, i: usize, j: usize) -> Option<PairClass> {
        let d2 = sq(self.positions[i], self.positions[j]);
        let s2 = self.sigma_x * self.sigma_x;
        if d2 > s2 {
            Some(PairClass::Far)
        } else if d2 < s2 {
            Some(PairClass::Near)
        } else {
            None
        }
    }

    /// `(b, t)` of a flat state index.
    pub fn decode(&self, flat: usize) -> (usize, usize) {
        (flat % self.batch, flat / self.batch)
    }

    /// Flat index pairs `(i, j)`, `i < j`, of the given class.
    pub fn pairs(&self, class: PairClass) -> impl Iterator<Item = (usize, usize)> + '_ {
        let m = self.positions.len();
        (0..m).flat_map(move |i| (i + 1..m).map(move |j| (i, j))).filter(move |&(i, j)| self.classify(i, j) == Some(class))
    }

    /// Far pairs as `((b, t), (b', t'))`.
    pub fn far_pairs(&self) -> impl Iterator<Item = ((usize, usize), (usize, usize))> + '_ {
        self.pairs(PairClass::Far).map(|(i, j)| (self.decode(i), self.decode(j)))
    }

    /// Near pairs as `((b, t), (b', t'))`.
    pub fn near_pairs(&self) -> impl Iterator<Item = ((usize, usize), (usize, usize))> + '_ {
        self.pairs(PairClass::Near).map(|(i, j)| (self.decode(i), self.decode(j)))
    }
}

pub fn build_pair_masks(batch: &TrajectoryBatch, sigma_x: f64) -> PairMask {
    PairMask::from_positions(batch.flat_positions(), batch.batch_size(), sigma_x)
}

/// Axis-aligned square or rectangular arena, in meters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Arena {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Arena {
    /// Square box of side `side` centered on the origin.
    pub fn square(side: f64) -> Self {
        assert!(side > 0.0, "arena side must be positive");
        let h = side / 2.0;
        Arena { x0: -h, y0: -h, x1: h, y1: h }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    pub fn center(&self) -> Vec2 {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }
}

/// Evaluation trajectory: `positions[t] = start + Σ_{s≤t} velocities[s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTrajectory {
    pub start: Vec2,
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalWalk {
    /// Heading persistence in `[0, 1]`; 0 gives i.i.d. headings.
    pub smoothness: f64,
    /// Mean step length in meters; individual steps vary in `[0.5, 1.5]×`.
    pub speed: f64,
}

impl Default for EvalWalk {
    fn default() -> Self {
        EvalWalk { smoothness: 0.9, speed: 0.02 }
    }
}

/// Heading random walk confined to `arena` by specular reflection at the walls.
pub fn sample_eval_trajectory<R: Rng + ?Sized>(arena: &Arena, walk: &EvalWalk, steps: usize, rng: &mut R) -> EvalTrajectory {
    assert!(arena.width() > 0.0 && arena.height() > 0.0, "arena must have positive size");
    let s = walk.smoothness.clamp(0.0, 1.0);
    let start = arena.center();
    let mut pos = start;
    let mut heading: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut positions = Vec::with_capacity(steps);
    let mut velocities = Vec::with_capacity(steps);
    for _ in 0..steps {
        heading += (1.0 - s) * rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let speed = walk.speed * rng.gen_range(0.5..1.5);
        let mut next = [pos[0] + speed * heading.cos(), pos[1] + speed * heading.sin()];
        let (mut hx, mut hy) = (heading.cos(), heading.sin());
        for (k, (lo, hi)) in [(arena.x0, arena.x1), (arena.y0, arena.y1)].into_iter().enumerate() {
            if next[k] > hi {
                next[k] = 2.0 * hi - next[k];
            } else if next[k] < lo {
                next[k] = 2.0 * lo - next[k];
            } else {
                continue;
            }
            next[k] = next[k].clamp(lo, hi);
            if k == 0 {
                hx = -hx;
            } else {
                hy = -hy;
            }
        }
        heading = hy.atan2(hx);
        velocities.push([next[0] - pos[0], next[1] - pos[1]]);
        // Keep positions as the exact cumulative sum of the emitted displacements.
        pos = [pos[0] + velocities.last().unwrap()[0], pos[1] + velocities.last().unwrap()[1]];
        pos = [pos[0].clamp(arena.x0, arena.x1), pos[1].clamp(arena.y0, arena.y1)];
        positions.push(pos);
    }
    EvalTrajectory { start, positions, velocities }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn integrate_examples() {
        assert_eq!(integrate_positions(&[[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]), vec![[1.0, 0.0], [1.0, 1.0]]);
        let still = integrate_positions(&[[0.0, 0.0]; 4], [0.3, -0.2]);
        assert!(still.iter().all(|&p| p == [0.3, -0.2]));
    }

    #[test]
    fn single_step_batch_is_trivial() {
        let b = sample_batch(1, 5, &mut rng(1), &VelocityDist::default());
        let v = b.base_velocities()[0];
        for i in 0..5 {
            assert_eq!(b.index()[i], vec![0]);
            assert_eq!(b.position(i, 0), v);
        }
    }

    #[test]
    fn default_batch_shares_endpoint() {
        let b = sample_batch(60, 130, &mut rng(2), &VelocityDist::default());
        assert_eq!(b.batch_size(), 130);
        assert_eq!(b.steps(), 60);
        assert!(b.endpoint_spread() < 1e-9);
        for perm in b.index() {
            let mut s = perm.clone();
            s.sort_unstable();
            assert_eq!(s, (0..60).collect::<Vec<_>>());
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let d = VelocityDist::default();
        assert_eq!(sample_batch(20, 8, &mut rng(9), &d), sample_batch(20, 8, &mut rng(9), &d));
    }

    #[test]
    fn velocity_statistics_match_uniform() {
        let d = VelocityDist::default();
        let mut r = rng(4);
        let samples: Vec<Vec2> = (0..100_000).map(|_| d.sample(&mut r)).collect();
        for k in 0..2 {
            let mean = samples.iter().map(|v| v[k]).sum::<f64>() / samples.len() as f64;
            assert!(mean.abs() < 2e-3, "mean {mean}");
            assert!(samples.iter().all(|v| v[k] > -0.15 && v[k] < 0.15));
        }
    }

    #[test]
    fn pair_mask_examples() {
        let mask = PairMask::from_positions(vec![[0.0, 0.0], [0.2, 0.0], [0.0, 0.0]], 3, 0.05);
        assert_eq!(mask.classify(0, 1), Some(PairClass::Far));
        assert_eq!(mask.classify(0, 2), Some(PairClass::Near));
        assert_eq!(mask.far_count(), 2);
        assert_eq!(mask.near_count(), 1);
        // exactly at sigma_x
        let edge = PairMask::from_positions(vec![[0.0, 0.0], [0.5, 0.0]], 2, 0.5);
        assert_eq!(edge.classify(0, 1), None);
        assert_eq!(edge.far_count() + edge.near_count(), 0);
        assert_eq!(edge.total_pairs(), 1);
    }

    #[test]
    fn partner_lists_match_classification() {
        // grid positions produce many pairs exactly at sigma_x
        let pos: Vec<Vec2> = (0..30).map(|k| [(k % 6) as f64 * 0.5, (k / 6) as f64 * 0.5]).collect();
        for sigma in [0.5, 0.7, 1.0] {
            let mask = PairMask::from_positions(pos.clone(), 5, sigma);
            for i in 0..pos.len() {
                let near: Vec<u32> =
                    (0..pos.len()).filter(|&j| j != i && mask.classify(i, j) == Some(PairClass::Near)).map(|j| j as u32).collect();
                let not_far: Vec<u32> =
                    (0..pos.len()).filter(|&j| j != i && mask.classify(i, j) != Some(PairClass::Far)).map(|j| j as u32).collect();
                assert_eq!(mask.near_partners()[i], near);
                assert_eq!(mask.not_far_partners()[i], not_far);
            }
            assert_eq!(mask.near_count(), mask.pairs(PairClass::Near).count());
            assert_eq!(mask.far_count(), mask.pairs(PairClass::Far).count());
        }
    }

    #[test]
    fn pair_mask_covers_within_trajectory_pairs() {
        let b = sample_batch(6, 3, &mut rng(5), &VelocityDist::default());
        let mask = build_pair_masks(&b, 0.05);
        let n = mask.far_pairs().count() + mask.near_pairs().count();
        assert_eq!(n, mask.far_count() + mask.near_count());
        assert!(n <= mask.total_pairs());
        // the shared endpoint makes every final-step pair near, including b = b' pairs at other t
        assert!(mask.near_pairs().any(|((b1, t1), (b2, t2))| t1 == 5 && t2 == 5 && b1 != b2));
        assert!(mask.pairs(PairClass::Far).any(|(i, j)| mask.decode(i).0 == mask.decode(j).0));
    }

    #[test]
    fn eval_trajectory_stays_in_arena() {
        let arena = Arena::square(2.0);
        let tr = sample_eval_trajectory(&arena, &EvalWalk::default(), 50_000, &mut rng(6));
        assert!(tr.positions.iter().all(|&p| arena.contains(p)));
        let rebuilt = integrate_positions(&tr.velocities, tr.start);
        let worst = rebuilt.iter().zip(&tr.positions).map(|(a, b)| dist(*a, *b)).fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn zero_smoothness_gives_uncorrelated_headings() {
        let arena = Arena::square(1000.0);
        let walk = EvalWalk { smoothness: 0.0, speed: 0.02 };
        let tr = sample_eval_trajectory(&arena, &walk, 20_000, &mut rng(7));
        let angles: Vec<f64> = tr.velocities.iter().map(|v| v[1].atan2(v[0])).collect();
        let c: f64 = angles.windows(2).map(|w| (w[1] - w[0]).cos()).sum::<f64>() / (angles.len() - 1) as f64;
        assert!(c.abs() < 0.03, "successive heading correlation {c}");
        let smooth = sample_eval_trajectory(&arena, &EvalWalk::default(), 20_000, &mut rng(7));
        let a: Vec<f64> = smooth.velocities.iter().map(|v| v[1].atan2(v[0])).collect();
        let cs: f64 = a.windows(2).map(|w| (w[1] - w[0]).cos()).sum::<f64>() / (a.len() - 1) as f64;
        assert!(cs > 0.9);
    }

    #[test]
    fn dump_round_trip() {
        let b = sample_batch(7, 3, &mut rng(8), &VelocityDist::default());
        let mut buf = Vec::new();
        b.write_dump(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GSTJ");
        assert_eq!(buf.len(), 16 + 2 * 3 * 7 * 2 * 8);
        let d = read_trajectory_dump(&buf[..]).unwrap();
        assert_eq!(d.positions[2], b.trajectory_positions(2));
        assert_eq!(d.velocities[1][3], b.velocity(1, 3));
        buf[0] = b'X';
        assert!(read_trajectory_dump(&buf[..]).is_err());
    }
}
