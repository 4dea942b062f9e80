//! Central finite-difference gradient verification.
//!
//! The forward graph is rebuilt in 64-bit for every perturbed evaluation,
//! so the check exercises the recorded backward rules against an
//! independent numerical derivative.

use crate::tensor::{NodeId, Tape, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;

/// Elements with both analytic and numeric gradient below this magnitude
/// are skipped; relative error is meaningless there.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare tape gradients of a scalar-valued graph against central
/// differences with step `h`, for every element of every input.
///
/// `build` must construct the same graph for each call; inputs are bound
/// as leaves and their node gradients are read back after `backward`.
pub fn check(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    h: f64,
) -> GradReport {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item()
    };

    let mut tape = Tape::<f64>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).expect("gradcheck loss must be scalar");

    let mut report = GradReport { max_rel_err: 0.0, checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(ids[i]).expect("input gradient missing").to_vec();
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[e] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[e];
            if a.abs() < GRAD_FLOOR && numeric.abs() < GRAD_FLOOR {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
        }
    }
    report
}
