//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Three pieces:
//!
//! * [`tensor::Tensor`] — a shared handle to a dense, row-major `f64` buffer
//!   with an optional gradient buffer of the same shape.
//! * [`tape::Tape`] — a gradient tape (Wengert list). Every differentiable
//!   operation goes through a `Tape` method, which computes the forward
//!   value eagerly and records what it needs for the reverse sweep.
//! * [`gradcheck::gradient_check`] — central-finite-difference verification
//!   of tape gradients, used heavily by the test suite.
//! * [`optim::Optimizer`] — Adam / SGD update rules over parameter tensors.
//!
//! All computation is `f64`. The engine is deliberately small: it supports
//! exactly the operations the model needs, each with a hand-written
//! vector-Jacobian product.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Activation, Tape};
pub use tensor::Tensor;
