//! How far the learned update is from commuting across velocities:
//! `c(vᵢ, vⱼ) = ‖f(f(g, vᵢ), vⱼ) − f(f(g, vⱼ), vᵢ)‖`.

use rand::Rng;

use super::EvalError;
use crate::model::ModelParams;
use crate::trajectory::{Vec2, VelocityDist};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CommutationReport {
    pub pairs: usize,
    pub mean: f64,
    pub max: f64,
    /// Mean `‖f(g, 0) − g‖` over the sampled states.
    pub stationarity: f64,
}

/// Commutation residual of one velocity pair from state `g`.
pub fn commutation_residual(params: &ModelParams<f64>, g: &[f64], vi: Vec2, vj: Vec2) -> Result<f64, EvalError> {
    let a = params.step(&params.step(g, vi)?, vj)?;
    let b = params.step(&params.step(g, vj)?, vi)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Residual statistics over every state in `states` paired with velocity
/// pairs drawn from `dist`.
pub fn commutation_report<R: Rng + ?Sized>(
    params: &ModelParams<f64>,
    states: &[Vec<f64>],
    pairs_per_state: usize,
    dist: &VelocityDist,
    rng: &mut R,
) -> Result<CommutationReport, EvalError> {
    let (mut sum, mut max, mut n, mut still) = (0.0, 0.0f64, 0usize, 0.0);
    for g in states {
        for _ in 0..pairs_per_state {
            let c = commutation_residual(params, g, dist.sample(rng), dist.sample(rng))?;
            sum += c;
            max = max.max(c);
            n += 1;
        }
        let s = params.step(g, [0.0, 0.0])?;
        still += s.iter().zip(g).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    }
    Ok(CommutationReport {
        pairs: n,
        mean: if n > 0 { sum / n as f64 } else { 0.0 },
        max,
        stationarity: if states.is_empty() { 0.0 } else { still / states.len() as f64 },
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn model() -> (ModelParams<f64>, Vec<f64>) {
        let p = ModelParams::init(8, 16, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let g = p.g0().to_vec();
        (p, g)
    }

    #[test]
    fn equal_velocities_commute_exactly() {
        let (p, g) = model();
        assert_eq!(commutation_residual(&p, &g, [0.1, -0.05], [0.1, -0.05]).unwrap(), 0.0);
    }

    #[test]
    fn residual_is_symmetric() {
        let (p, g) = model();
        let (a, b) = ([0.1, -0.05], [-0.12, 0.02]);
        assert_eq!(commutation_residual(&p, &g, a, b).unwrap(), commutation_residual(&p, &g, b, a).unwrap());
    }

    #[test]
    fn zero_velocity_reports_stationarity() {
        let (p, g) = model();
        let once = p.step(&g, [0.0, 0.0]).unwrap();
        let moved = once.iter().zip(&g).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let r = commutation_report(&p, &[g], 5, &VelocityDist::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(r.pairs, 5);
        assert_eq!(r.stationarity, moved);
        assert!(r.mean <= r.max && r.mean >= 0.0);
    }
}
