//! Gradient correctness: every tape primitive against central finite
//! differences, plus a composed generate-then-classify graph of the kind the
//! trainer differentiates through.

mod common;

use anchorhead::numerics::{Context, SeedRng};
use common::{check_gradients, primitive_gradient_sweep, randn};

#[test]
fn every_primitive_matches_finite_differences() {
    if let Err(msg) = primitive_gradient_sweep() {
        panic!("FAIL gradient oracle: {msg}");
    }
}

// A miniature of the serving graph: a feature drives a weight generator, the
// generated flat vector is sliced into a weight matrix and bias, and those are
// applied back to the feature. Gradients must flow through the slice/reshape
// plumbing into the generator parameters.
#[test]
fn generated_classifier_head_is_differentiable_end_to_end() {
    let mut rng = SeedRng::new(0xbeef);
    let (d, classes) = (4usize, 3usize);
    let flat = classes * d + classes;

    let inputs = vec![
        randn(&mut rng, &[1, d]),      // feature row
        randn(&mut rng, &[flat, d]),   // generator weight
        randn(&mut rng, &[flat]),      // generator bias
    ];
    let result = check_gradients("generated head", &inputs, &move |tape, ids| {
        let theta = tape.linear(ids[0], ids[1], ids[2]).unwrap();
        let theta = tape.reshape(theta, &[flat]).unwrap();
        let w_flat = tape.slice_flat(theta, 0, classes * d).unwrap();
        let w = tape.reshape(w_flat, &[classes, d]).unwrap();
        let b = tape.slice_flat(theta, classes * d, classes).unwrap();
        let logits = tape.linear(ids[0], w, b).unwrap();
        tape.softmax_cross_entropy(logits, &[1]).unwrap()
    });
    if let Err(msg) = result {
        panic!("FAIL generated-head gradients: {msg}");
    }
}

// Random deep compositions: stress interactions between primitives that the
// per-op sweep exercises only in isolation.
#[test]
fn random_compositions_match_finite_differences() {
    for seed in [7u64, 8, 9] {
        let mut rng = SeedRng::new(seed);
        let (n, d) = (2usize, 6usize);
        let inputs = vec![
            randn(&mut rng, &[n, d]),
            randn(&mut rng, &[d, d]),
            randn(&mut rng, &[d]),
            randn(&mut rng, &[d]),
            randn(&mut rng, &[d]),
        ];
        let targets: Vec<usize> = (0..n).map(|i| i % d).collect();
        let result = check_gradients(&format!("composition seed {seed}"), &inputs, &move |tape, ids| {
            let h = tape.linear(ids[0], ids[1], ids[2]).unwrap();
            let h = tape.tanh(h);
            let h = tape.layernorm(h, ids[3], ids[4], 1e-5).unwrap();
            let h = tape.add_row_broadcast(h, ids[4]).unwrap();
            let h2 = tape.mul(h, h).unwrap();
            let h = tape.add(h, h2).unwrap();
            tape.softmax_cross_entropy(h, &targets).unwrap()
        });
        if let Err(msg) = result {
            panic!("FAIL composition gradients: {msg}");
        }
    }
}
