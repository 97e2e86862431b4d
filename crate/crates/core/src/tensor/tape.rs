use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

type BackwardStep = Box<dyn FnOnce()>;

/// Records backward rules in forward order and replays them in reverse.
///
/// Ops push one closure per recorded operation; each closure reads the
/// output tensor's gradient and accumulates into its inputs. The invariant
/// that inputs are recorded before the operations consuming them holds by
/// construction: an op can only consume tensors that already exist.
pub struct Tape<S: Scalar> {
    steps: Vec<BackwardStep>,
    recording: bool,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Tape<S> {
    /// A tape that records backward rules (training / gradient checks).
    pub fn recording() -> Self {
        Tape {
            steps: Vec::new(),
            recording: true,
            _marker: std::marker::PhantomData,
        }
    }

    /// A tape that records nothing (pure inference).
    pub fn inference() -> Self {
        Tape {
            steps: Vec::new(),
            recording: false,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Whether an op consuming `inputs` should record a backward step.
    pub(crate) fn should_record(&self, inputs: &[&Tensor<S>]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    pub(crate) fn push(&mut self, step: BackwardStep) {
        self.steps.push(step);
    }

    /// Backpropagate from a scalar: seeds its gradient with 1 and replays
    /// every recorded step in reverse order. The tape is consumed; a new
    /// forward pass needs a fresh (or re-used, drained) tape.
    pub fn backward(&mut self, loss: &Tensor<S>) -> Result<()> {
        let (rows, cols) = loss.shape();
        if (rows, cols) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows, cols });
        }
        loss.seed_grad_ones();
        for step in self.steps.drain(..).rev() {
            step();
        }
        Ok(())
    }

    /// Drop all recorded steps without running them.
    pub fn reset(&mut self) {
        self.steps.clear();
    }
}

// Output tensors of recorded ops get `requires_grad` so that downstream ops
// keep recording; mark_output centralizes that.
pub(crate) fn mark_output<S: Scalar>(tape: &Tape<S>, inputs: &[&Tensor<S>], out: &Tensor<S>) -> bool {
    let record = tape.should_record(inputs);
    if record {
        out.set_requires_grad(true);
    }
    record
}
