//! Dense double-precision tensors and a tape-based reverse-mode
//! differentiation engine, sized for training small 1-D convolutional
//! detectors on a CPU.
//!
//! The usual loop looks like:
//!
//! ```
//! use numcore::{Adam, ParamStore, Tape, Tensor};
//!
//! let mut params = ParamStore::new();
//! params.insert("w", Tensor::from_vec(vec![1], vec![1.0]).unwrap()).unwrap();
//! let mut adam = Adam::new(&params, 0.1);
//!
//! let tape = Tape::new();
//! let vars = params.bind(&tape);
//! let x = tape.constant(Tensor::from_vec(vec![1], vec![2.0]).unwrap());
//! let y = tape.mul(vars[0], x).unwrap();
//! let loss = tape.mse(y, &Tensor::zeros(&[1])).unwrap();
//! tape.backward(loss).unwrap();
//! params.accumulate_grads(&tape, &vars);
//! adam.step(&mut params);
//! params.zero_grad();
//! ```

mod checkpoint;
mod error;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{NumError, Result};
pub use optim::{Adam, StepDecay};
pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::{softmax_rows, Tensor};
