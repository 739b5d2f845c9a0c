//! Velocity-conditioned recurrent network.
//!
//! An MLP maps each 2-D velocity to an `N×N` interaction matrix (row-major
//! reshape of its `N²` outputs) and the state update is
//! `g_t = NormReLU(W(v_t) g_{t-1})`, which keeps every state on the
//! nonnegative part of the unit sphere.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::io::{read_f64s, read_magic, read_u32, write_f64s, BinaryError};
use crate::trajectory::{TrajectoryBatch, Vec2};
use crate::{MatRef, Scalar};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("degenerate state at step {step} (trajectory {trajectory}): ReLU output is all zero")]
    Degenerate { step: usize, trajectory: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// One dense layer with `out×in` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward(&self, x: &[S]) -> Vec<S> {
        let (o, i) = (self.outputs(), self.inputs());
        let w = self.weight.data();
        let b = self.bias.data();
        (0..o)
            .map(|r| {
                let row = &w[r * i..(r + 1) * i];
                row.iter().zip(x).fold(b[r], |acc, (&a, &c)| acc + a * c)
            })
            .collect()
    }
}

/// Parameters: an MLP `2 → H → … → N²` with ReLU between layers and a
/// linear output, plus the shared initial state `g₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    layers: Vec<Linear<S>>,
    g0: Vec<S>,
    units: usize,
    hidden: usize,
}

impl<S: Scalar> ModelParams<S> {
    /// Uniform `±1/√fan_in` initialization; `g₀` is the normalized all-ones vector.
    pub fn init<R: Rng + ?Sized>(units: usize, hidden: usize, layers: usize, rng: &mut R) -> Result<Self, ModelError> {
        let dims = layer_dims(units, hidden, layers)?;
        let layers = dims
            .iter()
            .map(|&(o, i)| {
                let bound = 1.0 / (i as f64).sqrt();
                let mut draw = |n: usize| -> Vec<S> { (0..n).map(|_| S::of(rng.gen_range(-bound..bound))).collect() };
                let weight = Tensor::new(vec![o, i], draw(o * i)).unwrap();
                let bias = Tensor::vector(draw(o));
                Linear { weight, bias }
            })
            .collect();
        Ok(ModelParams { layers, g0: uniform_state(units), units, hidden })
    }

    /// All weights and biases zero.
    pub fn zeros(units: usize, hidden: usize, layers: usize) -> Result<Self, ModelError> {
        let dims = layer_dims(units, hidden, layers)?;
        let layers = dims.iter().map(|&(o, i)| Linear { weight: Tensor::zeros(&[o, i]), bias: Tensor::zeros(&[o]) }).collect();
        Ok(ModelParams { layers, g0: uniform_state(units), units, hidden })
    }

    pub fn from_parts(layers: Vec<Linear<S>>, g0: Vec<S>) -> Result<Self, ModelError> {
        let units = g0.len();
        let hidden = if layers.len() > 1 { layers[0].outputs() } else { 0 };
        let dims = layer_dims(units, hidden, layers.len())?;
        for (l, &(o, i)) in layers.iter().zip(&dims) {
            if l.weight.shape() != [o, i] || l.bias.shape() != [o] {
                return Err(ModelError::Config(format!(
                    "layer shape {:?}/{:?}, expected [{o}, {i}]/[{o}]",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        check_state(&g0)?;
        Ok(ModelParams { layers, g0, units, hidden })
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> &[Linear<S>] {
        &self.layers
    }

    pub fn g0(&self) -> &[S] {
        &self.g0
    }

    pub fn set_g0(&mut self, g0: Vec<S>) -> Result<(), ModelError> {
        if g0.len() != self.units {
            return Err(ModelError::Config(format!("g0 has {} entries, expected {}", g0.len(), self.units)));
        }
        check_state(&g0)?;
        self.g0 = g0;
        Ok(())
    }

    /// Trainable tensors in a fixed order: `W₁, b₁, W₂, b₂, …`.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let c = |t: &Tensor<S>| Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| T::of(x.to_f64_lossless())).collect()).unwrap();
        ModelParams {
            layers: self.layers.iter().map(|l| Linear { weight: c(&l.weight), bias: c(&l.bias) }).collect(),
            g0: self.g0.iter().map(|x| T::of(x.to_f64_lossless())).collect(),
            units: self.units,
            hidden: self.hidden,
        }
    }

    /// `W(v)` as a row-major `N×N` matrix.
    pub fn interaction_matrix(&self, v: Vec2) -> Vec<S> {
        let mut h = vec![S::of(v[0]), S::of(v[1])];
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if k != last {
                h.iter_mut().for_each(|x| *x = x.max(S::zero()));
            }
        }
        h
    }

    /// `W(v)` for every velocity in `vs`, concatenated (`len × N²`), one GEMM per layer.
    pub fn interaction_matrices(&self, vs: &[Vec2]) -> Vec<S> {
        let rows = vs.len();
        let mut h: Vec<S> = vs.iter().flat_map(|v| [S::of(v[0]), S::of(v[1])]).collect();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let (o, i) = (layer.outputs(), layer.inputs());
            let mut out: Vec<S> = Vec::with_capacity(rows * o);
            for _ in 0..rows {
                out.extend_from_slice(layer.bias.data());
            }
            let (a, b) = (MatRef::row_major(&h, i), MatRef::transposed(layer.weight.data(), i));
            S::gemm(rows, i, o, S::one(), a, b, S::one(), &mut out, o);
            if k != last {
                out.iter_mut().for_each(|x| *x = x.max(S::zero()));
            }
            h = out;
        }
        h
    }

    /// One recurrent update from `g` under velocity `v`.
    pub fn step(&self, g: &[S], v: Vec2) -> Result<Vec<S>, ModelError> {
        let w = self.interaction_matrix(v);
        norm_relu(&matvec(&w, g)).map_err(|_| ModelError::Degenerate { step: 0, trajectory: 0 })
    }

    /// Runs the network over one velocity sequence starting from `g₀`.
    /// `g₀` itself is not emitted. Degenerate states are an error.
    pub fn unroll(&self, velocities: &[Vec2]) -> Result<StateSequence<S>, ModelError> {
        let mut cache = InteractionCache::new(self);
        self.unroll_from(&self.g0, velocities, &mut cache)
    }

    /// Like [`Self::unroll`] from an arbitrary start state, memoizing `W(v)` per distinct velocity.
    pub fn unroll_from(
        &self,
        start: &[S],
        velocities: &[Vec2],
        cache: &mut InteractionCache<'_, S>,
    ) -> Result<StateSequence<S>, ModelError> {
        let mut g = start.to_vec();
        let mut states = Vec::with_capacity(velocities.len());
        for (t, &v) in velocities.iter().enumerate() {
            let w = cache.get(v);
            g = norm_relu(&matvec(w, &g)).map_err(|_| ModelError::Degenerate { step: t, trajectory: 0 })?;
            states.push(g.clone());
        }
        Ok(StateSequence { states })
    }

    /// Records the parameters on a tape. `g₀` becomes a parameter leaf only
    /// when `train_g0` is set.
    pub fn register(&self, tape: &mut Tape<S>, train_g0: bool) -> ParamVars {
        let layers = self.layers.iter().map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone()))).collect();
        let g0_t = Tensor::new(vec![1, self.units], self.g0.clone()).unwrap();
        let g0 = if train_g0 { tape.param(g0_t) } else { tape.constant(g0_t) };
        ParamVars { layers, g0 }
    }

    /// Writes a `GSCK` checkpoint (values stored as little-endian `f64`).
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), BinaryError> {
        w.write_all(CKPT_MAGIC)?;
        for v in [CKPT_VERSION, self.units as u32, self.hidden as u32, self.layers.len() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for l in &self.layers {
            write_f64s(&mut w, &l.weight.to_f64())?;
            write_f64s(&mut w, &l.bias.to_f64())?;
        }
        let g0: Vec<f64> = self.g0.iter().map(|x| x.to_f64_lossless()).collect();
        write_f64s(&mut w, &g0)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, BinaryError> {
        read_magic(&mut r, CKPT_MAGIC)?;
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(BinaryError::Version { found: version, expected: CKPT_VERSION });
        }
        let units = read_u32(&mut r)? as usize;
        let hidden = read_u32(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        let dims = layer_dims(units, hidden, count).map_err(|e| BinaryError::Malformed(e.to_string()))?;
        let mut layers = Vec::with_capacity(count);
        for (o, i) in dims {
            let w = read_f64s(&mut r, o * i)?;
            let b = read_f64s(&mut r, o)?;
            layers.push(Linear { weight: Tensor::from_f64(&[o, i], &w).unwrap(), bias: Tensor::from_f64(&[o], &b).unwrap() });
        }
        let g0 = read_f64s(&mut r, units)?.into_iter().map(S::of).collect();
        ModelParams::from_parts(layers, g0).map_err(|e| BinaryError::Malformed(e.to_string()))
    }
}

const CKPT_MAGIC: &[u8; 4] = b"GSCK";
const CKPT_VERSION: u32 = 1;

/// `(out, in)` of each layer for an MLP `2 → H → … → N²`.
fn layer_dims(units: usize, hidden: usize, layers: usize) -> Result<Vec<(usize, usize)>, ModelError> {
    if units == 0 || layers == 0 {
        return Err(ModelError::Config("need at least one unit and one layer".into()));
    }
    if layers > 1 && hidden == 0 {
        return Err(ModelError::Config("hidden width must be positive".into()));
    }
    let mut dims = Vec::with_capacity(layers);
    let mut fan_in = 2;
    for k in 0..layers {
        let out = if k + 1 == layers { units * units } else { hidden };
        dims.push((out, fan_in));
        fan_in = out;
    }
    Ok(dims)
}

fn uniform_state<S: Scalar>(n: usize) -> Vec<S> {
    vec![S::one() / S::of(n as f64).sqrt(); n]
}

fn check_state<S: Scalar>(g: &[S]) -> Result<(), ModelError> {
    let norm = g.iter().map(|&x| x * x).sum::<S>().sqrt().to_f64_lossless();
    if g.iter().any(|&x| x < S::zero()) || (norm - 1.0).abs() > 1e-5 {
        return Err(ModelError::Config("initial state must be nonnegative with unit norm".into()));
    }
    Ok(())
}

pub(crate) fn matvec<S: Scalar>(w: &[S], g: &[S]) -> Vec<S> {
    let n = g.len();
    w.chunks(n).map(|row| row.iter().zip(g).fold(S::zero(), |a, (&x, &y)| a + x * y)).collect()
}

/// `ReLU(x) / ‖ReLU(x)‖`; an all-nonpositive input has no direction and is an error.
pub fn norm_relu<S: Scalar>(x: &[S]) -> Result<Vec<S>, ModelError> {
    let r: Vec<S> = x.iter().map(|&v| v.max(S::zero())).collect();
    let norm = r.iter().map(|&v| v * v).sum::<S>().sqrt();
    if norm == S::zero() {
        return Err(ModelError::Degenerate { step: 0, trajectory: 0 });
    }
    Ok(r.into_iter().map(|v| v / norm).collect())
}

/// Memo of `W(v)` keyed by the exact bit pattern of `v`.
pub struct InteractionCache<'a, S> {
    params: &'a ModelParams<S>,
    map: HashMap<[u64; 2], Vec<S>>,
    evaluations: usize,
}

impl<'a, S: Scalar> InteractionCache<'a, S> {
    pub fn new(params: &'a ModelParams<S>) -> Self {
        InteractionCache { params, map: HashMap::new(), evaluations: 0 }
    }

    pub fn get(&mut self, v: Vec2) -> &[S] {
        let key = [v[0].to_bits(), v[1].to_bits()];
        let params = self.params;
        let evaluations = &mut self.evaluations;
        self.map.entry(key).or_insert_with(|| {
            *evaluations += 1;
            params.interaction_matrix(v)
        })
    }

    /// Number of MLP evaluations performed so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateSequence<S> {
    pub states: Vec<Vec<S>>,
}

impl<S: Scalar> StateSequence<S> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> Option<&[S]> {
        self.states.last().map(Vec::as_slice)
    }
}

/// Parameter handles on a tape, in the order of [`ModelParams::tensors`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
    pub g0: Var,
}

impl ParamVars {
    pub fn tensors(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// How Norm-ReLU treats an all-zero ReLU output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormMode<S> {
    /// Division by zero is reported as a degenerate state.
    Strict,
    /// `ReLU(x) / (‖ReLU(x)‖ + ε)`, used during training.
    Epsilon(S),
}

/// Tape handles for a batch unroll.
#[derive(Clone, Debug)]
pub struct BatchStates {
    /// `B×N` states for each time step.
    pub per_step: Vec<Var>,
    /// All states, `(T·B)×N`, row `t * B + b`.
    pub all: Var,
    /// `W(v)` for every distinct velocity, `K×N²`.
    pub interactions: Var,
}

/// `K×N²` MLP outputs for the given velocities.
pub fn mlp_forward<S: Scalar>(tape: &mut Tape<S>, vars: &ParamVars, velocities: &[Vec2]) -> Result<Var, ModelError> {
    let flat: Vec<S> = velocities.iter().flat_map(|v| [S::of(v[0]), S::of(v[1])]).collect();
    let mut h = tape.constant(Tensor::new(vec![velocities.len(), 2], flat)?);
    let last = vars.layers.len() - 1;
    for (k, &(w, b)) in vars.layers.iter().enumerate() {
        let z = tape.matmul_nt(h, w)?;
        h = tape.add_row_broadcast(z, b)?;
        if k != last {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Differentiable unroll of every trajectory of a batch from the shared `g₀`.
/// `W(v)` is evaluated once per distinct velocity of the batch.
pub fn unroll_batch<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &ParamVars,
    batch: &TrajectoryBatch,
    mode: NormMode<S>,
) -> Result<BatchStates, ModelError> {
    let (bs, ts) = (batch.batch_size(), batch.steps());
    let interactions = mlp_forward(tape, vars, batch.base_velocities())?;
    let mut g = tape.gather_rows(vars.g0, vec![0; bs])?;
    let mut per_step = Vec::with_capacity(ts);
    for t in 0..ts {
        let idx: Vec<usize> = (0..bs).map(|b| batch.index()[b][t]).collect();
        let pre = tape.batched_matvec(interactions, idx, g)?;
        let r = tape.relu(pre)?;
        let norm = tape.row_l2norm(r)?;
        g = match mode {
            NormMode::Strict => tape.div_rows(r, norm).map_err(|e| match e {
                AutodiffError::DivisionByZero { index } => ModelError::Degenerate { step: t, trajectory: index },
                other => other.into(),
            })?,
            NormMode::Epsilon(eps) => {
                let d = tape.add_scalar(norm, eps)?;
                tape.div_rows(r, d)?
            }
        };
        per_step.push(g);
    }
    let all = if per_step.is_empty() { tape.constant(Tensor::zeros(&[0, tape.shape(vars.g0)[1]])) } else { tape.concat(&per_step)? };
    Ok(BatchStates { per_step, all, interactions })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::trajectory::{sample_batch, VelocityDist};

    fn small(seed: u64) -> ModelParams<f64> {
        ModelParams::init(6, 10, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn batched_interactions_match_single() {
        let p = small(21);
        let vs = [[0.1, -0.02], [0.0, 0.0], [-0.13, 0.07]];
        let all = p.interaction_matrices(&vs);
        for (k, &v) in vs.iter().enumerate() {
            let one = p.interaction_matrix(v);
            for (a, b) in one.iter().zip(&all[k * 36..(k + 1) * 36]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn norm_relu_examples() {
        let y = norm_relu::<f64>(&[3.0, 4.0, -5.0]).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15 && y[2] == 0.0);
        let u = [0.0, 0.6, 0.8];
        assert_eq!(norm_relu(&u).unwrap(), u.to_vec());
        assert!(matches!(norm_relu(&[-1.0, -2.0]), Err(ModelError::Degenerate { .. })));
    }

    #[test]
    fn interaction_matrix_shape_and_purity() {
        let p = ModelParams::<f64>::init(128, 16, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w = p.interaction_matrix([0.1, -0.05]);
        assert_eq!(w.len(), 128 * 128);
        assert_eq!(w, p.interaction_matrix([0.1, -0.05]));
        let z = ModelParams::<f64>::zeros(5, 8, 3).unwrap();
        assert!(z.interaction_matrix([0.3, 0.2]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn initial_state_is_unit_nonnegative() {
        let p = small(1);
        let n: f64 = p.g0().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-15);
        assert!(p.g0().iter().all(|&x| x > 0.0));
        assert_eq!(p.tensors().len(), 6);
        assert_eq!(p.layers()[2].weight.shape(), &[36, 10]);
    }

    #[test]
    fn empty_unroll_emits_nothing() {
        assert!(small(2).unroll(&[]).unwrap().is_empty());
    }

    #[test]
    fn repeated_velocity_reuses_matrix() {
        let p = small(3);
        let mut cache = InteractionCache::new(&p);
        let v = [0.05, 0.02];
        let seq = p.unroll_from(p.g0(), &[v, v], &mut cache).unwrap();
        assert_eq!(cache.evaluations(), 1);
        let w = p.interaction_matrix(v);
        let once = norm_relu(&matvec(&w, p.g0())).unwrap();
        let twice = norm_relu(&matvec(&w, &once)).unwrap();
        assert_eq!(seq.states[1], twice);
    }

    #[test]
    fn zero_weights_hit_degenerate_state() {
        let z = ModelParams::<f64>::zeros(4, 4, 3).unwrap();
        assert_eq!(z.unroll(&[[0.1, 0.1]]), Err(ModelError::Degenerate { step: 0, trajectory: 0 }));
    }

    #[test]
    fn tape_unroll_matches_plain_unroll() {
        let p = small(4);
        let batch = sample_batch(7, 3, &mut ChaCha8Rng::seed_from_u64(5), &VelocityDist::default());
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let out = unroll_batch(&mut tape, &vars, &batch, NormMode::Strict).unwrap();
        let all = tape.value(out.all);
        for b in 0..3 {
            let seq: Vec<Vec2> = (0..7).map(|t| batch.velocity(b, t)).collect();
            let plain = p.unroll(&seq).unwrap();
            for t in 0..7 {
                let row = all.row(t * 3 + b);
                for (x, y) in row.iter().zip(&plain.states[t]) {
                    assert!((x - y).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn every_weight_receives_gradient() {
        let p = small(6);
        let batch = sample_batch(5, 4, &mut ChaCha8Rng::seed_from_u64(7), &VelocityDist::default());
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let out = unroll_batch(&mut tape, &vars, &batch, NormMode::Epsilon(1e-8)).unwrap();
        let w = tape.constant(Tensor::new(vec![20, 6], (0..120).map(|i| (i as f64).sin()).collect()).unwrap());
        let prod = tape.mul(out.all, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        for v in vars.tensors() {
            let g = grads.get(v).unwrap();
            assert!(g.data().iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn strict_mode_reports_degenerate_trajectory() {
        let z = ModelParams::<f64>::zeros(3, 4, 3).unwrap();
        let batch = sample_batch(2, 2, &mut ChaCha8Rng::seed_from_u64(8), &VelocityDist::default());
        let mut tape = Tape::new();
        let vars = z.register(&mut tape, false);
        let err = unroll_batch(&mut tape, &vars, &batch, NormMode::Strict).unwrap_err();
        assert_eq!(err, ModelError::Degenerate { step: 0, trajectory: 0 });
        let mut tape = Tape::new();
        let vars = z.register(&mut tape, false);
        assert!(unroll_batch(&mut tape, &vars, &batch, NormMode::Epsilon(1e-8)).is_ok());
    }

    #[test]
    fn checkpoint_round_trip_and_layout() {
        let p = small(9);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GSCK");
        let header = 4 + 4 * 4;
        assert_eq!(buf.len(), header + 8 * (p.num_params() + p.units()));
        // first weight of the first layer follows the header
        let w0 = f64::from_le_bytes(buf[header..header + 8].try_into().unwrap());
        assert_eq!(w0, p.layers()[0].weight.data()[0]);
        let q = ModelParams::<f64>::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(p, q);
        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(matches!(ModelParams::<f64>::read_checkpoint(&bad[..]), Err(BinaryError::Magic { .. })));
        assert!(ModelParams::<f64>::read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
