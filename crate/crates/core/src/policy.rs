//! Stochastic softmax policy over a variable-size candidate set.
//!
//! Every candidate is scored by the same MLP applied to
//! `concat(context, candidate features)`; propensities are the softmax of the
//! scores over the candidates of one decision.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcore::{Matrix, Tape, Var};
use crate::math;

/// Largest supported candidate count per decision.
pub const N_MAX: usize = 16;

/// Context features plus one feature vector per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    context: Vec<f64>,
    candidates: Vec<Vec<f64>>,
}

impl CandidateSet {
    pub fn new(context: Vec<f64>, candidates: Vec<Vec<f64>>) -> Result<Self> {
        if candidates.is_empty() || candidates.len() > N_MAX {
            return Err(Error::sample(alloc::format!(
                "candidate count {} outside 1..={N_MAX}",
                candidates.len()
            )));
        }
        let dc = candidates[0].len();
        if candidates.iter().any(|c| c.len() != dc) {
            return Err(Error::sample("candidate feature vectors differ in length"));
        }
        let finite = context.iter().chain(candidates.iter().flatten()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::sample("non-finite feature"));
        }
        Ok(Self {
            context,
            candidates,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn context(&self) -> &[f64] {
        &self.context
    }

    pub fn candidates(&self) -> &[Vec<f64>] {
        &self.candidates
    }

    pub fn context_dim(&self) -> usize {
        self.context.len()
    }

    pub fn candidate_dim(&self) -> usize {
        self.candidates[0].len()
    }

    /// Input width of the shared scorer.
    pub fn input_dim(&self) -> usize {
        self.context_dim() + self.candidate_dim()
    }

    /// Reorders candidates so that candidate `i` of the result is candidate
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            context: self.context.clone(),
            candidates: perm.iter().map(|&i| self.candidates[i].clone()).collect(),
        }
    }
}

/// One fully-connected layer: `y = x * weights + bias`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub weights: Matrix,
    /// `1 x fan_out`.
    pub bias: Matrix,
}

/// MLP scorer weights. Hidden layers use tanh; the output layer is linear and
/// produces one score per candidate.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "PolicyRepr"))]
pub struct PolicyParams {
    dims: Vec<usize>,
    layers: Vec<Dense>,
}

#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
struct PolicyRepr {
    dims: Vec<usize>,
    layers: Vec<Dense>,
}

#[cfg(feature = "serde")]
impl TryFrom<PolicyRepr> for PolicyParams {
    type Error = Error;

    fn try_from(r: PolicyRepr) -> Result<Self> {
        PolicyParams::from_layers(r.dims, r.layers)
    }
}

/// Default scorer shape: 16 context + 8 candidate features, two hidden layers
/// of 32.
pub const DEFAULT_DIMS: [usize; 4] = [24, 32, 32, 1];

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::config("policy dims need an input and an output layer"));
    }
    if dims.contains(&0) {
        return Err(Error::config("policy layer sizes must be positive"));
    }
    if *dims.last().unwrap() != 1 {
        return Err(Error::config("policy output layer must be scalar"));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_policy(seed: u64, dims: &[usize]) -> Result<PolicyParams> {
    validate_dims(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            Dense {
                weights: Matrix::from_raw(fan_in, fan_out, data),
                bias: Matrix::zeros(1, fan_out),
            }
        })
        .collect();
    Ok(PolicyParams {
        dims: dims.to_vec(),
        layers,
    })
}

impl PolicyParams {
    /// Assembles parameters from explicit layers, checking that shapes chain.
    pub fn from_layers(dims: Vec<usize>, layers: Vec<Dense>) -> Result<Self> {
        validate_dims(&dims)?;
        if layers.len() + 1 != dims.len() {
            return Err(Error::config("layer count does not match dims"));
        }
        for (l, w) in layers.iter().zip(dims.windows(2)) {
            if l.weights.shape() != (w[0], w[1]) || l.bias.shape() != (1, w[1]) {
                return Err(Error::Shape {
                    op: "policy layer",
                    lhs: l.weights.shape(),
                    rhs: (w[0], w[1]),
                });
            }
            if !l.weights.is_finite() || !l.bias.is_finite() {
                return Err(Error::config("non-finite policy parameter"));
            }
        }
        Ok(Self { dims, layers })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Matrix::len).sum()
    }

    /// Parameter tensors in the fixed order `W0, b0, W1, b1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    /// Zero tensors shaped like [`PolicyParams::tensors`].
    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.tensors().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
    }

    /// `self += alpha * delta` tensor-wise.
    pub fn axpy(&mut self, alpha: f64, delta: &[Matrix]) {
        for (p, d) in self.tensors_mut().zip(delta) {
            p.axpy(alpha, d);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.as_slice().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().map(Matrix::max_abs).fold(0.0, f64::max)
    }

    /// Multiplies the output layer by `factor`, i.e. divides the softmax
    /// temperature by it.
    pub fn scale_output(&mut self, factor: f64) {
        let last = self.layers.last_mut().expect("at least one layer");
        for x in last.weights.as_mut_slice() {
            *x *= factor;
        }
        for x in last.bias.as_mut_slice() {
            *x *= factor;
        }
    }

    fn check_input(&self, cs: &CandidateSet) -> Result<()> {
        if cs.input_dim() != self.input_dim() {
            return Err(Error::Shape {
                op: "policy input",
                lhs: (1, cs.input_dim()),
                rhs: (1, self.input_dim()),
            });
        }
        Ok(())
    }

    /// Scores for the rows of `x` (`n x input_dim`) as an `n x 1` column.
    pub fn scores(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weights)?;
            let cols = z.cols();
            let b = layer.bias.as_slice();
            for (j, v) in z.as_mut_slice().iter_mut().enumerate() {
                *v += b[j % cols];
            }
            h = if i < last { z.map(math::tanh) } else { z };
        }
        Ok(h)
    }

    /// Action propensities for one decision; a simplex vector of length
    /// `cs.len()`.
    pub fn propensities(&self, cs: &CandidateSet) -> Result<Vec<f64>> {
        self.check_input(cs)?;
        let stacked = StackedCandidates::new(&[cs])?;
        let p = self.propensities_stacked(&stacked)?;
        Ok(p.row_slice(0).to_vec())
    }

    /// Padded `rows x width` propensity matrix for a stacked batch.
    pub fn propensities_stacked(&self, stacked: &StackedCandidates) -> Result<Matrix> {
        if stacked.x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "policy input",
                lhs: stacked.x.shape(),
                rhs: (1, self.input_dim()),
            });
        }
        let s = self.scores(&stacked.x)?;
        let mut tape = Tape::new();
        let sv = tape.constant(s);
        let packed = tape.scatter(sv, stacked.rows, stacked.width, stacked.index.clone())?;
        let p = tape.softmax_rows(packed, &stacked.mask)?;
        Ok(tape.value(p).clone())
    }

    /// Records the parameters on `tape` as trainable (or constant) leaves.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .tensors()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }

    /// Propensities of a stacked batch recorded on `tape`; returns the padded
    /// `rows x width` probability node.
    pub fn propensities_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        stacked: &StackedCandidates,
    ) -> Result<Var> {
        if stacked.x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "policy input",
                lhs: stacked.x.shape(),
                rhs: (1, self.input_dim()),
            });
        }
        let n = stacked.x.rows();
        let mut h = tape.constant(stacked.x.clone());
        let ones = tape.constant(Matrix::filled(n, 1, 1.0));
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            let (w, b) = (vars.vars[2 * i], vars.vars[2 * i + 1]);
            let xw = tape.matmul(h, w)?;
            let bias = tape.matmul(ones, b)?;
            let z = tape.add(xw, bias)?;
            h = if i < last { tape.tanh(z) } else { z };
        }
        let packed = tape.scatter(h, stacked.rows, stacked.width, stacked.index.clone())?;
        tape.softmax_rows(packed, &stacked.mask)
    }

    /// Draws a candidate index from the propensity distribution.
    pub fn sample_action<R: Rng + ?Sized>(&self, cs: &CandidateSet, rng: &mut R) -> Result<usize> {
        let p = self.propensities(cs)?;
        Ok(sample_index(&p, rng.gen::<f64>()))
    }
}

/// Tape handles for the tensors of a [`PolicyParams`], same order as
/// [`PolicyParams::tensors`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

/// Inverse-CDF draw from a probability vector with a uniform `u` in `[0, 1)`.
/// Zero-probability entries are never returned.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// A batch of candidate sets flattened into one feature matrix for the shared
/// scorer, plus the layout needed to fold scores back into padded rows.
#[derive(Debug, Clone)]
pub struct StackedCandidates {
    /// `total_candidates x input_dim`.
    pub x: Matrix,
    /// Flat position in the padded `rows x width` matrix of each stacked row.
    pub index: Vec<usize>,
    /// `true` on padding entries.
    pub mask: Vec<bool>,
    pub rows: usize,
    pub width: usize,
}

impl StackedCandidates {
    pub fn new(sets: &[&CandidateSet]) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::config("cannot stack an empty batch"));
        }
        let d = sets[0].input_dim();
        if sets.iter().any(|s| s.input_dim() != d) {
            return Err(Error::sample("feature dimensions differ within a batch"));
        }
        let rows = sets.len();
        let width = sets.iter().map(|s| s.len()).max().unwrap_or(1);
        let total: usize = sets.iter().map(|s| s.len()).sum();
        let mut x = Vec::with_capacity(total * d);
        let mut index = Vec::with_capacity(total);
        let mut mask = vec![true; rows * width];
        for (r, s) in sets.iter().enumerate() {
            for (c, feats) in s.candidates().iter().enumerate() {
                x.extend_from_slice(s.context());
                x.extend_from_slice(feats);
                index.push(r * width + c);
                mask[r * width + c] = false;
            }
        }
        Ok(Self {
            x: Matrix::from_raw(total, d, x),
            index,
            mask,
            rows,
            width,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cs(n: usize, seed: u64) -> CandidateSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cands = (0..n)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        CandidateSet::new(ctx, cands).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_policy(7, &[5, 4, 1]).unwrap();
        let b = init_policy(7, &[5, 4, 1]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_policy(8, &[5, 4, 1]).unwrap());
        for l in a.layers() {
            assert!(l.bias.as_slice().iter().all(|&x| x == 0.0));
        }
        let limit = math::sqrt(6.0 / 9.0);
        assert!(a.layers()[0].weights.as_slice().iter().all(|x| x.abs() <= limit));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_policy(0, &[]).is_err());
        assert!(init_policy(0, &[4]).is_err());
        assert!(init_policy(0, &[4, 3]).is_err());
        assert!(init_policy(0, &[4, 0, 1]).is_err());
    }

    #[test]
    fn zero_weights_give_uniform() {
        let mut p = init_policy(1, &[5, 4, 1]).unwrap();
        let n = p.num_params();
        p.set_flat(&vec![0.0; n]);
        let probs = p.propensities(&cs(4, 3)).unwrap();
        for x in probs {
            assert_eq!(x, 0.25);
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let p = init_policy(1, &[6, 4, 1]).unwrap();
        assert!(matches!(p.propensities(&cs(3, 1)), Err(Error::Shape { .. })));
    }

    #[test]
    fn candidate_set_bounds() {
        assert!(CandidateSet::new(vec![0.0], vec![]).is_err());
        assert!(CandidateSet::new(vec![0.0], vec![vec![0.0]; N_MAX + 1]).is_err());
        assert!(CandidateSet::new(vec![0.0], vec![vec![0.0], vec![0.0, 1.0]]).is_err());
        assert!(CandidateSet::new(vec![f64::INFINITY], vec![vec![0.0]]).is_err());
    }

    #[test]
    fn degenerate_distribution_sampling() {
        for k in 0..100 {
            assert_eq!(sample_index(&[1.0, 0.0, 0.0], k as f64 / 100.0), 0);
        }
        assert_eq!(sample_index(&[0.0, 1.0, 0.0], 0.999_999_999), 1);
        assert_eq!(sample_index(&[0.5, 0.5, 0.0], 0.999_999_999_999_999_9), 1);
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = init_policy(3, &[5, 8, 1]).unwrap();
        let c = cs(5, 9);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| p.sample_action(&c, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn tape_and_plain_propensities_agree() {
        let p = init_policy(3, &[5, 8, 1]).unwrap();
        let sets = [cs(2, 1), cs(5, 2), cs(3, 3)];
        let refs: Vec<&CandidateSet> = sets.iter().collect();
        let st = StackedCandidates::new(&refs).unwrap();
        let plain = p.propensities_stacked(&st).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, true);
        let pv = p.propensities_on_tape(&mut tape, &vars, &st).unwrap();
        assert_eq!(tape.value(pv), &plain);
        for (r, s) in sets.iter().enumerate() {
            let single = p.propensities(s).unwrap();
            for (c, &x) in single.iter().enumerate() {
                assert!((x - plain.get(r, c)).abs() < 1e-15);
            }
        }
    }
}
