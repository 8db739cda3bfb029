//! Thread-local computation tape.
//!
//! Every differentiable op pushes one entry recording its inputs and a
//! closure that maps the output gradient to input gradients. `backward`
//! walks the tape in reverse, which is a valid topological order because
//! entries are appended in execution order.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::tensor::{Tensor, TensorError};

pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Entry {
    output_id: u64,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Tape {
    enabled: bool,
    entries: Vec<Entry>,
}

thread_local! {
    static TAPE: RefCell<Tape> = const { RefCell::new(Tape { enabled: true, entries: Vec::new() }) };
}

/// Record an op on the tape. No-op when recording is disabled or when no
/// input participates in gradient flow.
pub(crate) fn record<F>(output: &Tensor, inputs: &[&Tensor], backward: F)
where
    F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
{
    TAPE.with(|t| {
        let mut tape = t.borrow_mut();
        if !tape.enabled {
            return;
        }
        if !inputs.iter().any(|i| i.needs_grad_flow()) {
            return;
        }
        output.set_tracked(true);
        tape.entries.push(Entry {
            output_id: output.id(),
            inputs: inputs.iter().map(|&i| i.clone()).collect(),
            backward: Box::new(backward),
        });
    });
}

/// Run `f` with tape recording disabled (teacher forwards, evaluation).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = TAPE.with(|t| {
        let mut tape = t.borrow_mut();
        let prev = tape.enabled;
        tape.enabled = false;
        prev
    });
    let out = f();
    TAPE.with(|t| t.borrow_mut().enabled = prev);
    out
}

pub fn is_grad_enabled() -> bool {
    TAPE.with(|t| t.borrow().enabled)
}

/// Number of recorded entries (mostly for tests).
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().entries.len())
}

/// Drop all recorded entries without running backward.
pub fn clear_tape() {
    TAPE.with(|t| t.borrow_mut().entries.clear());
}

/// Reverse-mode sweep from a scalar loss. Populates `grad` on every tensor
/// with `requires_grad` reachable from the loss, then clears the tape.
pub fn backward(loss: &Tensor) -> Result<(), TensorError> {
    if loss.numel() != 1 {
        return Err(TensorError::NotScalar(loss.shape().to_vec()));
    }
    let entries = TAPE.with(|t| std::mem::take(&mut t.borrow_mut().entries));

    let mut flowing: HashMap<u64, Vec<f64>> = HashMap::new();
    flowing.insert(loss.id(), vec![1.0]);
    if loss.requires_grad() {
        loss.accumulate_grad(&[1.0]);
    }

    for entry in entries.iter().rev() {
        let Some(grad_out) = flowing.get(&entry.output_id) else {
            continue;
        };
        let grads_in = (entry.backward)(grad_out);
        debug_assert_eq!(grads_in.len(), entry.inputs.len());
        for (input, grad) in entry.inputs.iter().zip(grads_in) {
            let Some(g) = grad else { continue };
            debug_assert_eq!(g.len(), input.numel());
            if input.requires_grad() {
                input.accumulate_grad(&g);
            }
            if input.is_tracked() {
                flowing
                    .entry(input.id())
                    .and_modify(|acc| {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    })
                    .or_insert(g);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::zeros(&[2], DType::F64);
        assert!(matches!(backward(&t), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2], DType::F64).unwrap();
        x.set_requires_grad(true);
        let before = tape_len();
        no_grad(|| {
            let _ = x.relu();
        });
        assert_eq!(tape_len(), before);
        let _ = x.relu();
        assert_eq!(tape_len(), before + 1);
        clear_tape();
    }
}
