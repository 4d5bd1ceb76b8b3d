//! Shared test support: the finite-difference gradient oracle.
//!
//! The oracle never touches the backward machinery it checks: it evaluates
//! the forward pass at perturbed inputs and forms central differences, so a
//! sign error or a dropped term in any hand-written adjoint shows up as a
//! mismatch here.

use anchorhead::numerics::{Context, NodeId, SeedRng, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(a.abs().max(b.abs()), 1e-2)
}

fn loss_of(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t, true)).collect();
    let loss = build(&mut tape, &ids);
    tape.value(loss).item().expect("gradcheck losses are scalar")
}

fn bumped(t: &Tensor, j: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[j] += delta;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Compare tape gradients of a scalar-valued graph against central finite
/// differences for every element of every input. Returns the first failure
/// as a message, or Ok.
pub fn check_gradients(
    label: &str,
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
) -> Result<(), String> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t, true)).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).map_err(|e| format!("{label}: backward failed: {e}"))?;

    for (i, t) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(ids[i]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; t.numel()],
        };
        for j in 0..t.numel() {
            let up = loss_of(&replace(inputs, i, bumped(t, j, FD_STEP)), build);
            let down = loss_of(&replace(inputs, i, bumped(t, j, -FD_STEP)), build);
            let fd = (up - down) / (2.0 * FD_STEP);
            let err = rel_err(analytic[j], fd);
            if err >= FD_TOL {
                return Err(format!(
                    "{label}: input {i} element {j}: tape {:.9e} vs fd {:.9e} (rel err {:.3e})",
                    analytic[j], fd, err
                ));
            }
        }
    }
    Ok(())
}

fn replace(inputs: &[Tensor], i: usize, t: Tensor) -> Vec<Tensor> {
    let mut v = inputs.to_vec();
    v[i] = t;
    v
}

pub fn randn(rng: &mut SeedRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n)).unwrap()
}

/// Every differentiable primitive against the oracle, three shapes each.
/// Shared between the focused gradcheck suite and the acceptance checklist.
pub fn primitive_gradient_sweep() -> Result<(), String> {
    let mut rng = SeedRng::new(0xface);

    // linear: gradients w.r.t. input, weight, and bias
    for (n, k, m) in [(1usize, 3usize, 2usize), (4, 5, 3), (2, 7, 4)] {
        let inputs = vec![
            randn(&mut rng, &[n, k]),
            randn(&mut rng, &[m, k]),
            randn(&mut rng, &[m]),
        ];
        let target = randn(&mut rng, &[n, m]);
        check_gradients(&format!("linear {n}x{k}->{m}"), &inputs, &move |tape, ids| {
            let y = tape.linear(ids[0], ids[1], ids[2]).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // layernorm: gradients w.r.t. input and both affine terms
    for (n, d) in [(1usize, 4usize), (3, 5), (2, 8)] {
        let inputs = vec![
            randn(&mut rng, &[n, d]),
            randn(&mut rng, &[d]),
            randn(&mut rng, &[d]),
        ];
        let target = randn(&mut rng, &[n, d]);
        check_gradients(&format!("layernorm {n}x{d}"), &inputs, &move |tape, ids| {
            let y = tape.layernorm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // elementwise add / sub / mul
    for shape in [vec![3usize], vec![2, 3], vec![4, 2]] {
        for op in ["add", "sub", "mul"] {
            let inputs = vec![randn(&mut rng, &shape), randn(&mut rng, &shape)];
            let target = randn(&mut rng, &shape);
            let op_name = op;
            check_gradients(&format!("{op} {shape:?}"), &inputs, &move |tape, ids| {
                let y = match op_name {
                    "add" => tape.add(ids[0], ids[1]).unwrap(),
                    "sub" => tape.sub(ids[0], ids[1]).unwrap(),
                    _ => tape.mul(ids[0], ids[1]).unwrap(),
                };
                let t = tape.constant(target.clone());
                tape.mse(y, t).unwrap()
            })?;
        }
    }

    // scale and tanh
    for shape in [vec![4usize], vec![2, 3], vec![3, 3]] {
        let inputs = vec![randn(&mut rng, &shape)];
        let target = randn(&mut rng, &shape);
        check_gradients(&format!("scale/tanh {shape:?}"), &inputs, &move |tape, ids| {
            let s = tape.scale(ids[0], -1.7);
            let h = tape.tanh(s);
            let t = tape.constant(target.clone());
            tape.mse(h, t).unwrap()
        })?;
    }

    // clamp, with inputs kept away from the kink at the boundaries
    for shape in [vec![5usize], vec![2, 4], vec![3, 2]] {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| loop {
                let v = 2.0 * rng.normal();
                if (v - (-0.5)).abs() > 1e-3 && (v - 0.7).abs() > 1e-3 {
                    break v;
                }
            })
            .collect();
        let inputs = vec![Tensor::new(shape.clone(), data).unwrap()];
        let target = randn(&mut rng, &shape);
        check_gradients(&format!("clamp {shape:?}"), &inputs, &move |tape, ids| {
            let y = tape.clamp(ids[0], -0.5, 0.7);
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // add_row_broadcast and concat_rows_broadcast
    for (n, d, db) in [(2usize, 3usize, 2usize), (1, 4, 4), (3, 5, 3)] {
        let inputs = vec![randn(&mut rng, &[n, d]), randn(&mut rng, &[d])];
        let target = randn(&mut rng, &[n, d]);
        check_gradients(&format!("add_row_broadcast {n}x{d}"), &inputs, &move |tape, ids| {
            let y = tape.add_row_broadcast(ids[0], ids[1]).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;

        let inputs = vec![randn(&mut rng, &[n, d]), randn(&mut rng, &[db])];
        let target = randn(&mut rng, &[n, d + db]);
        check_gradients(&format!("concat_rows_broadcast {n}x{d}+{db}"), &inputs, &move |tape, ids| {
            let y = tape.concat_rows_broadcast(ids[0], ids[1]).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // concat_rows over multiple blocks
    for (n1, n2, d) in [(1usize, 2usize, 3usize), (2, 2, 4), (3, 1, 2)] {
        let inputs = vec![randn(&mut rng, &[n1, d]), randn(&mut rng, &[n2, d])];
        let target = randn(&mut rng, &[n1 + n2, d]);
        check_gradients(&format!("concat_rows {n1}+{n2}x{d}"), &inputs, &move |tape, ids| {
            let y = tape.concat_rows(&[ids[0], ids[1]]).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // slice_flat + reshape chain
    for (len, start, take) in [(8usize, 2usize, 4usize), (6, 0, 6), (10, 5, 2)] {
        let inputs = vec![randn(&mut rng, &[len])];
        let target = randn(&mut rng, &[take]);
        check_gradients(&format!("slice {start}+{take} of {len}"), &inputs, &move |tape, ids| {
            let s = tape.slice_flat(ids[0], start, take).unwrap();
            let r = tape.reshape(s, &[take]).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(r, t).unwrap()
        })?;
    }

    // embed_mean with duplicate ids (accumulation path)
    for (rows, d) in [(5usize, 4usize), (3, 2), (6, 3)] {
        let ids_list = vec![0usize, rows - 1, rows - 1];
        let inputs = vec![randn(&mut rng, &[rows, d])];
        let target = randn(&mut rng, &[d]);
        check_gradients(&format!("embed_mean {rows}x{d}"), &inputs, &move |tape, ids| {
            let y = tape.embed_mean(ids[0], &ids_list).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // mean over a row subset
    for (rows, d) in [(5usize, 3usize), (4, 4), (8, 2)] {
        let subset = vec![0usize, rows / 2, rows - 1];
        let inputs = vec![randn(&mut rng, &[rows, d])];
        let target = randn(&mut rng, &[d]);
        check_gradients(&format!("mean_rows_subset {rows}x{d}"), &inputs, &move |tape, ids| {
            let y = tape.mean_rows_subset(ids[0], &subset).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // whole-block and consecutive-row tiling
    for (r, d, reps) in [(1usize, 3usize, 2usize), (2, 4, 3), (3, 2, 1)] {
        let inputs = vec![randn(&mut rng, &[r, d])];
        let target = randn(&mut rng, &[reps * r, d]);
        check_gradients(&format!("tile_rows {r}x{d} x{reps}"), &inputs, &move |tape, ids| {
            let y = tape.tile_rows(ids[0], reps).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;

        let inputs = vec![randn(&mut rng, &[r, d])];
        let target = randn(&mut rng, &[r * reps, d]);
        check_gradients(&format!("repeat_rows {r}x{d} x{reps}"), &inputs, &move |tape, ids| {
            let y = tape.repeat_rows(ids[0], reps).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // horizontal concatenation w.r.t. both blocks
    for (n, da, db) in [(1usize, 2usize, 3usize), (3, 4, 1), (2, 3, 3)] {
        let inputs = vec![randn(&mut rng, &[n, da]), randn(&mut rng, &[n, db])];
        let target = randn(&mut rng, &[n, da + db]);
        check_gradients(&format!("concat_cols {n}x{da}+{db}"), &inputs, &move |tape, ids| {
            let y = tape.concat_cols(ids[0], ids[1]).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // row gathering with duplicate indices (scatter-add path)
    for (n, d) in [(4usize, 3usize), (5, 2), (3, 4)] {
        let picks = vec![n - 1, 0, n - 1];
        let inputs = vec![randn(&mut rng, &[n, d])];
        let target = randn(&mut rng, &[3, d]);
        check_gradients(&format!("gather_rows {n}x{d}"), &inputs, &move |tape, ids| {
            let y = tape.gather_rows(ids[0], &picks).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // mean over consecutive row groups
    for (m, group, d) in [(2usize, 2usize, 3usize), (1, 4, 2), (3, 3, 2)] {
        let inputs = vec![randn(&mut rng, &[m * group, d])];
        let target = randn(&mut rng, &[m, d]);
        check_gradients(&format!("mean_rows_groups {m}x{group}x{d}"), &inputs, &move |tape, ids| {
            let y = tape.mean_rows_groups(ids[0], group).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // one bag mean per id list, with shared and duplicate ids
    for (rows, d) in [(4usize, 3usize), (6, 2), (5, 4)] {
        let lists = vec![vec![0usize, rows - 1], vec![rows - 1, rows - 1, 1]];
        let inputs = vec![randn(&mut rng, &[rows, d])];
        let target = randn(&mut rng, &[2, d]);
        check_gradients(&format!("embed_mean_rows {rows}x{d}"), &inputs, &move |tape, ids| {
            let y = tape.embed_mean_rows(ids[0], &lists).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // row-wise adaptive renormalization w.r.t. style and content
    for (n, d) in [(1usize, 4usize), (2, 5), (3, 6)] {
        let inputs = vec![randn(&mut rng, &[n, d]), randn(&mut rng, &[n, d])];
        let target = randn(&mut rng, &[n, d]);
        check_gradients(&format!("adain_rows {n}x{d}"), &inputs, &move |tape, ids| {
            let y = tape.adain_rows(ids[0], ids[1]).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // softmax cross-entropy w.r.t. logits
    for (n, c) in [(1usize, 3usize), (4, 5), (2, 10)] {
        let targets: Vec<usize> = (0..n).map(|i| (i * 2 + 1) % c).collect();
        let inputs = vec![randn(&mut rng, &[n, c])];
        check_gradients(&format!("softmax_ce {n}x{c}"), &inputs, &move |tape, ids| {
            tape.softmax_cross_entropy(ids[0], &targets).unwrap()
        })?;
    }

    // mse w.r.t. both sides
    for shape in [vec![3usize], vec![2, 4], vec![5]] {
        let inputs = vec![randn(&mut rng, &shape), randn(&mut rng, &shape)];
        check_gradients(&format!("mse {shape:?}"), &inputs, &|tape, ids| {
            tape.mse(ids[0], ids[1]).unwrap()
        })?;
    }

    // adaptive renormalization w.r.t. style and content
    for d in [4usize, 6, 9] {
        let inputs = vec![randn(&mut rng, &[d]), randn(&mut rng, &[d])];
        let target = randn(&mut rng, &[d]);
        check_gradients(&format!("adain {d}"), &inputs, &move |tape, ids| {
            let y = tape.adain(ids[0], ids[1]).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(y, t).unwrap()
        })?;
    }

    // reparameterized gaussian draw w.r.t. mu and logvar (noise held fixed)
    for d in [3usize, 5, 8] {
        let eps = randn(&mut rng, &[d]);
        let inputs = vec![randn(&mut rng, &[d]), randn(&mut rng, &[d])];
        let target = randn(&mut rng, &[d]);
        check_gradients(&format!("gaussian_sample {d}"), &inputs, &move |tape, ids| {
            let z = tape.gaussian_sample(ids[0], ids[1], &eps).unwrap();
            let t = tape.constant(target.clone());
            tape.mse(z, t).unwrap()
        })?;
    }

    // KL to the standard normal w.r.t. mu and logvar
    for d in [2usize, 4, 6] {
        let inputs = vec![randn(&mut rng, &[d]), randn(&mut rng, &[d])];
        check_gradients(&format!("kl_std_normal {d}"), &inputs, &|tape, ids| {
            tape.kl_std_normal(ids[0], ids[1]).unwrap()
        })?;
    }

    Ok(())
}
