//! Dense reverse-mode automatic differentiation with gradients of gradients.
//!
//! Models are written define-by-run against a [`Tape`]. Backward passes are
//! recorded as ordinary tape operations, so a loss built from input
//! gradients (the equation-of-motion losses of Hamiltonian networks) can be
//! differentiated again with respect to the parameters.
//!
//! All primitives are smooth on their domain; there are no kinks and hence
//! no subgradient conventions to pick.
//!
//! ```
//! use dhn_autodiff::{Recorded, Tensor};
//!
//! // f(x; a) = a * x^3, loss = (df/dx)^2
//! let rec = Recorded::record(&[Tensor::scalar(1.0)], &[Tensor::scalar(2.0)], |t, x, a| {
//!     let x3 = t.powf(x[0], 3.0);
//!     t.mul(a[0], x3)
//! });
//! let bundle = rec
//!     .grad_of_grad_loss(&[Tensor::scalar(1.0)], &[Tensor::scalar(2.0)], |t, g| t.square(g[0]))
//!     .unwrap();
//! assert!((bundle.param_grads.unwrap()[0].item() - 36.0).abs() < 1e-12);
//! ```

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("expected {expected} bound {kind} values, got {got}")]
    Unbound {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{kind} {index} has shape {got:?}, tape was recorded with {expected:?}")]
    ShapeMismatch {
        kind: &'static str,
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },
    #[error("output must be 1x1, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
}

/// Result of a gradient query at one point.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub value: f64,
    /// One gradient per bound input, with the input's shape.
    pub input_grads: Vec<Tensor>,
    /// Present only for second-order queries.
    pub param_grads: Option<Vec<Tensor>>,
}

/// A tape together with its scalar output.
///
/// The tape is immutable once recorded; every query below evaluates a private
/// copy, so a `Recorded` can be shared across threads.
#[derive(Debug, Clone)]
pub struct Recorded {
    tape: Tape,
    output: Var,
}

impl Recorded {
    /// Records `f` at the given leaf values.
    pub fn record<F>(inputs: &[Tensor], params: &[Tensor], f: F) -> Self
    where
        F: FnOnce(&mut Tape, &[Var], &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let ins: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let ps: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
        let output = f(&mut tape, &ins, &ps);
        Self { tape, output }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn output(&self) -> Var {
        self.output
    }

    fn scalar_output(&self) -> Result<(), AdError> {
        let (rows, cols) = self.tape.shape(self.output);
        if (rows, cols) != (1, 1) {
            return Err(AdError::NonScalarOutput { rows, cols });
        }
        Ok(())
    }

    /// Replays the recorded graph at new leaf values.
    pub fn forward(&self, inputs: &[Tensor], params: &[Tensor]) -> Result<f64, AdError> {
        self.scalar_output()?;
        Ok(self.tape.replay(self.output, inputs, params)?.item())
    }

    /// Value and gradient with respect to every input.
    pub fn input_gradient(&self, inputs: &[Tensor], params: &[Tensor]) -> Result<GradientBundle, AdError> {
        self.scalar_output()?;
        let mut tape = self.tape.clone();
        tape.rebind(inputs, params)?;
        let wrt = tape.inputs().to_vec();
        let grads = tape.grad(self.output, &wrt);
        tape.check_finite()?;
        Ok(GradientBundle {
            value: tape.value(self.output).item(),
            input_grads: grads.iter().map(|g| tape.value(*g).clone()).collect(),
            param_grads: None,
        })
    }

    /// Gradient with respect to the parameters of a loss built from the
    /// input gradients. `reduction` receives the input-gradient nodes and
    /// must return a `1 x 1` node; it may also use the tape's parameters.
    pub fn grad_of_grad_loss<F>(
        &self,
        inputs: &[Tensor],
        params: &[Tensor],
        reduction: F,
    ) -> Result<GradientBundle, AdError>
    where
        F: FnOnce(&mut Tape, &[Var]) -> Var,
    {
        self.scalar_output()?;
        let mut tape = self.tape.clone();
        tape.rebind(inputs, params)?;
        let wrt = tape.inputs().to_vec();
        let input_grads = tape.grad(self.output, &wrt);
        let loss = reduction(&mut tape, &input_grads);
        let (rows, cols) = tape.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(AdError::NonScalarOutput { rows, cols });
        }
        let pwrt = tape.params().to_vec();
        let param_grads = tape.grad(loss, &pwrt);
        tape.check_finite()?;
        Ok(GradientBundle {
            value: tape.value(loss).item(),
            input_grads: input_grads.iter().map(|g| tape.value(*g).clone()).collect(),
            param_grads: Some(param_grads.iter().map(|g| tape.value(*g).clone()).collect()),
        })
    }
}
