//! Dense arrays, a reverse-mode tape, finite-difference checking, seeded
//! randomness and the two optimizers used for training.

pub mod array;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;

pub use array::{dot, l2_norm, l2_normalized, log_sum_exp, sigmoid, softmax, DenseArray};
pub use gradcheck::{check_tape_fn, gradient_check, max_relative_error, numerical_gradient, tape_value_and_grad};
pub use optim::{Adam, Optimizer, SgdMomentum};
pub use params::{accumulate_grads, bind, collect_grads, scale_grads, ParamSet};
pub use rng::Rng;
pub use tape::{bce_value, Gradients, Tape, Var, BCE_CLAMP};
