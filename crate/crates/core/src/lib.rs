//! Discriminator-free generative modeling with a learned enclosing ball.
//!
//! Training happens in two phases. First a minimal enclosing ball is fit to
//! the training data in an explicit random-Fourier-feature space whose kernel
//! scale is learned jointly with the ball ([`rff`], [`ball`]). Then the ball
//! and kernel are frozen and an MLP generator ([`generator`]) is trained so
//! that its outputs map inside the ball, with an auxiliary feature-matching
//! term that keeps samples spread over it ([`trainer`]).
//!
//! [`data`] and [`metrics`] provide the synthetic benchmarks and the
//! histogram/transport measures used to evaluate samples; [`checkpoint`],
//! [`config`] and [`cli`] back the `gen` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod ball;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod rff;
pub mod trainer;

pub use adam::AdamState;
pub use ball::{fit_ball, Ball, BallGradients, BallOptimizer};
pub use checkpoint::Checkpoint;
pub use data::{Dataset, MixtureSpec};
pub use error::{Error, Result};
pub use generator::{Activation, Generator, LayerSpec, NoiseKind, NoiseSpec};
pub use rff::{BijectionReport, FeatureMap};
pub use trainer::{generate, generator_loss, train, TrainConfig};

use rayon::prelude::*;

/// Items per work unit in [`reduce_in_order`]. Fixed so that the reduction
/// tree, and therefore the floating-point result, does not depend on the
/// thread count.
const REDUCE_CHUNK: usize = 4;

/// Folds `items` in fixed-size chunks (possibly in parallel) and combines the
/// chunk results sequentially in input order.
pub(crate) fn reduce_in_order<T, A, I, F, C>(items: &[T], init: I, fold: F, combine: C) -> A
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, &T) + Sync,
    C: Fn(&mut A, A),
{
    let parts: Vec<A> = items
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut acc = init();
            for item in chunk {
                fold(&mut acc, item);
            }
            acc
        })
        .collect();
    let mut total = init();
    for part in parts {
        combine(&mut total, part);
    }
    total
}
