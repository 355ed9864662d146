use crate::error::{Error, Result};
use crate::instrument::MultCounter;
use crate::nn::{
    hinge_loss, relu, relu_prime, BackwardPath, BackwardWeights, BatchNorm, BnGradients, DenseBackward, DenseLayer,
    ForwardMode,
};
use crate::quantize::{sample_matrix, SampleKind, ShiftBudget};
use crate::rng::{stream, Prng};
use crate::tensor::{Matrix, TernaryMatrix};

/// Dense layer, optional batch norm, optional ReLU.
#[derive(Debug, Clone)]
pub struct Block {
    pub dense: DenseLayer,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
    relu_input: Option<Matrix>,
}

impl Block {
    pub fn new(dense: DenseLayer, bn: Option<BatchNorm>, relu: bool) -> Self {
        Self {
            dense,
            bn,
            relu,
            relu_input: None,
        }
    }
}

/// Everything one training step needs besides the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub mode: ForwardMode,
    pub backward: BackwardPath,
    pub backward_weights: BackwardWeights,
    pub budget: ShiftBudget,
    /// Step size for the dense weights and biases.
    pub eta: f32,
    /// Step size for the batch-norm scale and shift.
    pub bn_eta: f32,
}

#[derive(Debug, Clone)]
pub struct BlockGradients {
    pub dense: DenseBackward,
    pub bn: Option<BnGradients>,
}

/// A stack of blocks; every hidden block ends in ReLU, the output block
/// emits raw class scores.
#[derive(Debug, Clone)]
pub struct Mlp {
    architecture: Vec<usize>,
    blocks: Vec<Block>,
    seed: u64,
    samplers: Vec<Prng>,
}

fn non_finite(layer: usize, what: &str) -> Error {
    Error::NonFinite {
        step: 0,
        layer,
        detail: format!("{what} is not finite"),
    }
}

impl Mlp {
    pub fn new(architecture: &[usize], batch_norm: bool, seed: u64) -> Result<Self> {
        if architecture.len() < 2 || architecture.contains(&0) {
            return Err(Error::Config(format!(
                "architecture {architecture:?} needs at least two nonzero widths"
            )));
        }
        let depth = architecture.len() - 1;
        let blocks = architecture
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let mut init = Prng::with_stream(seed, stream::INIT | i as u64);
                let dense = DenseLayer::init(w[0], w[1], &mut init);
                let bn = batch_norm.then(|| BatchNorm::new(w[1]));
                Block::new(dense, bn, i + 1 < depth)
            })
            .collect();
        Ok(Self {
            architecture: architecture.to_vec(),
            blocks,
            seed,
            samplers: (0..depth).map(|i| Prng::for_layer(seed, i)).collect(),
        })
    }

    /// Assembles a model from parts; used when loading checkpoints.
    pub fn from_blocks(blocks: Vec<Block>, seed: u64, samplers: Vec<Prng>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(Error::Checkpoint("no layers".into()));
        };
        let mut architecture = vec![first.dense.inputs()];
        for (i, b) in blocks.iter().enumerate() {
            if b.dense.inputs() != *architecture.last().expect("nonempty") {
                return Err(Error::Checkpoint(format!("layer {i} input width does not chain")));
            }
            if b.bn.as_ref().is_some_and(|bn| bn.units() != b.dense.outputs()) {
                return Err(Error::Checkpoint(format!("layer {i} batch norm width mismatch")));
            }
            architecture.push(b.dense.outputs());
        }
        if samplers.len() != blocks.len() {
            return Err(Error::Checkpoint("one sampler stream per layer expected".into()));
        }
        Ok(Self {
            architecture,
            blocks,
            seed,
            samplers,
        })
    }

    pub fn architecture(&self) -> &[usize] {
        &self.architecture
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samplers(&self) -> &[Prng] {
        &self.samplers
    }

    pub fn batch_norm(&self) -> bool {
        self.blocks.iter().all(|b| b.bn.is_some())
    }

    pub fn input_width(&self) -> usize {
        self.architecture[0]
    }

    pub fn classes(&self) -> usize {
        *self.architecture.last().expect("at least two widths")
    }

    /// Training-mode forward pass; sampled weights and activations are cached
    /// for the backward pass.
    pub fn forward_train(&mut self, x: &Matrix, mode: ForwardMode, counter: &mut MultCounter) -> Result<Matrix> {
        let mut a = x.clone();
        for (i, (block, prng)) in self.blocks.iter_mut().zip(&mut self.samplers).enumerate() {
            let z = block.dense.forward(&a, mode, prng, counter)?;
            if !z.is_finite() {
                return Err(non_finite(i, "pre-activation"));
            }
            let u = match &mut block.bn {
                Some(bn) => bn.forward_train(&z, counter)?,
                None => z,
            };
            if !u.is_finite() {
                return Err(non_finite(i, "batch-norm output"));
            }
            a = if block.relu {
                let out = relu(&u);
                block.relu_input = Some(u);
                out
            } else {
                block.relu_input = None;
                u
            };
        }
        Ok(a)
    }

    /// Backward pass from the gradient of the loss with respect to the
    /// output scores, top block first. Updates are applied as it goes.
    pub fn backward(
        &mut self,
        delta_out: &Matrix,
        cfg: &StepConfig,
        counter: &mut MultCounter,
    ) -> Result<Vec<BlockGradients>> {
        let mut delta = delta_out.clone();
        let mut grads = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter_mut().enumerate().rev() {
            let du = if block.relu {
                let u = block.relu_input.take().ok_or_else(|| Error::MissingCache {
                    layer: format!("block {i} activation"),
                })?;
                delta.hadamard(&relu_prime(&u))?
            } else {
                delta
            };
            let (g, bn_grads) = match &mut block.bn {
                Some(bn) => {
                    let bg = bn.backward(&du, cfg.bn_eta, counter)?;
                    (bg.delta_prev.clone(), Some(bg))
                }
                None => (du, None),
            };
            let dense = match cfg.backward {
                BackwardPath::Full => block.dense.backward_full(&g, cfg.eta, cfg.backward_weights, counter)?,
                BackwardPath::Qbp => {
                    block
                        .dense
                        .backward_qbp(&g, cfg.eta, cfg.budget, cfg.backward_weights, counter)?
                }
            };
            if !dense.delta_prev.is_finite() {
                return Err(non_finite(i, "error signal"));
            }
            delta = dense.delta_prev.clone();
            grads.push(BlockGradients { dense, bn: bn_grads });
        }
        grads.reverse();
        Ok(grads)
    }

    /// One SGD update on a mini-batch; returns the batch loss.
    pub fn train_step(
        &mut self,
        x: &Matrix,
        labels: &[usize],
        cfg: &StepConfig,
        step: usize,
        counter: &mut MultCounter,
    ) -> Result<f32> {
        let at_step = |e: Error| match e {
            Error::NonFinite { layer, detail, .. } => Error::NonFinite { step, layer, detail },
            other => other,
        };
        let scores = self.forward_train(x, cfg.mode, counter).map_err(at_step)?;
        let (loss, delta) = hinge_loss(&scores, labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                layer: self.blocks.len() - 1,
                detail: format!("loss is {loss}"),
            });
        }
        self.backward(&delta, cfg, counter).map_err(at_step)?;
        Ok(loss)
    }

    /// One sign matrix per layer, drawn from `prng` in layer order.
    pub fn sample_weights(&self, kind: SampleKind, prng: &mut Prng) -> Result<Vec<TernaryMatrix>> {
        self.blocks
            .iter()
            .map(|b| sample_matrix(b.dense.wbar(), kind, prng))
            .collect()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.input_width() {
            return Err(Error::Shape {
                op: "model input",
                left: (self.input_width(), x.cols()),
                right: x.shape(),
            });
        }
        Ok(())
    }

    /// Inference forward pass, returning the input to every dense layer
    /// followed by the output scores.
    fn infer_all(&self, x: &Matrix, sampled: Option<&[TernaryMatrix]>) -> Result<Vec<Matrix>> {
        self.check_input(x)?;
        let mut acts = vec![x.clone()];
        for (i, block) in self.blocks.iter().enumerate() {
            let a = acts.last().expect("nonempty");
            let z = block.dense.infer(a, sampled.map(|s| &s[i]))?;
            let u = match &block.bn {
                Some(bn) => bn.infer(&z)?,
                None => z,
            };
            acts.push(if block.relu { relu(&u) } else { u });
        }
        Ok(acts)
    }

    /// Inference scores with full-precision weights, or with `sampled`
    /// sign matrices when given. Batch norm uses running statistics.
    pub fn infer(&self, x: &Matrix, sampled: Option<&[TernaryMatrix]>) -> Result<Matrix> {
        Ok(self.infer_all(x, sampled)?.pop().expect("scores"))
    }

    pub fn layer_inputs(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let mut acts = self.infer_all(x, None)?;
        acts.pop();
        Ok(acts)
    }

    /// Arg-max class per column; ties resolve to the lowest index.
    pub fn predict(&self, x: &Matrix, sampled: Option<&[TernaryMatrix]>) -> Result<Vec<usize>> {
        Ok(argmax_columns(&self.infer(x, sampled)?))
    }
}

pub(crate) fn argmax_columns(scores: &Matrix) -> Vec<usize> {
    (0..scores.cols())
        .map(|b| {
            let mut best = 0;
            for j in 1..scores.rows() {
                if scores.get(j, b) > scores.get(best, b) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: ForwardMode, backward: BackwardPath) -> StepConfig {
        StepConfig {
            mode,
            backward,
            backward_weights: BackwardWeights::Sampled,
            budget: ShiftBudget::default(),
            eta: 0.05,
            bn_eta: 0.05,
        }
    }

    fn toy_batch(seed: u64, n: usize, b: usize) -> (Matrix, Vec<usize>) {
        let mut rng = Prng::new(seed);
        let x = Matrix::from_vec(n, b, (0..n * b).map(|_| rng.uniform() as f32).collect()).unwrap();
        let labels = (0..b).map(|_| rng.below(3)).collect();
        (x, labels)
    }

    #[test]
    fn init_respects_glorot_bound() {
        let m = Mlp::new(&[20, 30, 3], true, 1).unwrap();
        let s = (6.0f32 / 50.0).sqrt();
        assert!(m.blocks()[0].dense.wbar().data().iter().all(|w| w.abs() <= s));
        assert!(m.blocks()[0].relu && !m.blocks()[1].relu);
        assert!(Mlp::new(&[5], true, 0).is_err());
    }

    #[test]
    fn weights_stay_clipped_over_many_steps() {
        let mut m = Mlp::new(&[6, 5, 3], true, 2).unwrap();
        let mut c = MultCounter::default();
        let modes = [
            cfg(ForwardMode::FullPrecision, BackwardPath::Full),
            cfg(ForwardMode::BinaryConnect, BackwardPath::Full),
            cfg(ForwardMode::BinaryConnect, BackwardPath::Qbp),
            cfg(ForwardMode::TernaryConnect, BackwardPath::Qbp),
        ];
        for step in 0..100 {
            let (x, y) = toy_batch(step as u64, 6, 4);
            let mut sc = modes[step % 4];
            sc.eta = 0.5;
            sc.bn_eta = 0.5;
            m.train_step(&x, &y, &sc, step, &mut c).unwrap();
            for b in m.blocks() {
                assert!(b.dense.wbar().data().iter().all(|w| (-1.0..=1.0).contains(w)));
            }
        }
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut m = Mlp::new(&[4, 3, 3], false, 3).unwrap();
        let (x, y) = toy_batch(1, 4, 2);
        let mut c = MultCounter::default();
        let sc = cfg(ForwardMode::TernaryConnect, BackwardPath::Qbp);
        let scores = m.forward_train(&x, sc.mode, &mut c).unwrap();
        let (_, d) = hinge_loss(&scores, &y).unwrap();
        m.backward(&d, &sc, &mut c).unwrap();
        assert!(matches!(m.backward(&d, &sc, &mut c), Err(Error::MissingCache { .. })));
    }

    #[test]
    fn same_seed_same_steps() {
        let run = || {
            let mut m = Mlp::new(&[6, 8, 3], true, 11).unwrap();
            let mut c = MultCounter::default();
            let sc = cfg(ForwardMode::TernaryConnect, BackwardPath::Qbp);
            (0..5)
                .map(|s| {
                    let (x, y) = toy_batch(s, 6, 5);
                    m.train_step(&x, &y, &sc, s as usize, &mut c).unwrap().to_bits()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn input_width_is_checked() {
        let m = Mlp::new(&[4, 3], true, 0).unwrap();
        assert!(m.infer(&Matrix::zeros(5, 2), None).is_err());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let s = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 2.0]]);
        assert_eq!(argmax_columns(&s), vec![0, 1]);
    }
}
