//! Reverse-mode gradients against central differences, for a small
//! expression and for the full encoder-decoder loss.
//!
//! cargo run --release --example gradient_check

use codesum::autodiff::{finite_difference_check, AutodiffError, Tape, Tensor, Var};
use codesum::model::{self, ModelDims, ModelParams};
use codesum::rng::SplitMix64;

fn main() {
    // loss = sum(tanh(x·Wᵀ + b))
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.2, -0.3]).unwrap());
    let w = tape.leaf(Tensor::matrix(2, 3, vec![0.3, 0.1, -0.2, -0.4, 0.6, 0.05]).unwrap());
    let b = tape.leaf(Tensor::vector(vec![0.1, -0.1]));
    let z = tape.matmul_bt(x, w).unwrap();
    let z = tape.add_bias(z, b).unwrap();
    let a = tape.tanh(z).unwrap();
    let loss = tape.sum(a).unwrap();
    let grads = tape.backward(loss).unwrap();
    println!("loss {:.6}", tape.value(loss).data()[0]);
    println!("dW {:?}", grads.wrt(w));
    println!("db {:?}", grads.wrt(b));

    let expr = |t: &mut Tape, v: &[Var]| -> Result<Var, AutodiffError> {
        let z = t.matmul_bt(v[0], v[1])?;
        let z = t.add_bias(z, v[2])?;
        let a = t.tanh(z)?;
        t.sum(a)
    };
    let inputs: Vec<Tensor> = [x, w, b].iter().map(|&v| tape.value(v).clone()).collect();
    let err = finite_difference_check(expr, &inputs, 1e-5).unwrap();
    println!("expression: max relative error {err:.2e}");

    let dims = ModelDims {
        src_vocab: 7,
        tgt_vocab: 7,
        embedding: 4,
        hidden: 5,
        attention: 3,
        layers: 2,
    };
    let params = ModelParams::random(dims, 1.0, &mut SplitMix64::new(17));
    let leaves: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let batch = vec![(vec![4, 5, 6], vec![2, 4, 6, 3])];
    let seq2seq = |t: &mut Tape, v: &[Var]| -> Result<Var, AutodiffError> {
        model::loss_from_leaves(t, &params, v, &batch).map_err(|e| match e {
            model::ModelError::Autodiff(a) => a,
            other => panic!("{other}"),
        })
    };
    let err = finite_difference_check(seq2seq, &leaves, 1e-5).unwrap();
    println!("seq2seq loss ({} parameters): max relative error {err:.2e}", params.num_parameters());
}
