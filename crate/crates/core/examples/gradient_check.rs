//! Checks every differentiable op against central finite differences, then
//! a small composite function built from several of them.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use dosediff::tensor::{finite_diff_check, gradient_check, Attrs, OpKind};
use dosediff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = &mut rng;
    let cases = [
        (OpKind::Add, vec![random(r, &[3, 4]), random(r, &[4])], Attrs::new()),
        (OpKind::Sub, vec![random(r, &[5]), random(r, &[5])], Attrs::new()),
        (OpKind::Mul, vec![random(r, &[2, 3]), random(r, &[2, 3])], Attrs::new()),
        (OpKind::ScalarMul, vec![random(r, &[4])], Attrs::new().float("c", -0.7)),
        (OpKind::MatMul, vec![random(r, &[4, 4]), random(r, &[4, 4])], Attrs::new()),
        (OpKind::Bmm, vec![random(r, &[2, 3, 4]), random(r, &[2, 4, 2])], Attrs::new()),
        (
            OpKind::Conv2d,
            vec![random(r, &[1, 4, 8, 8]), random(r, &[2, 4, 3, 3]), random(r, &[2])],
            Attrs::new().int("stride", 1).int("pad", 1),
        ),
        (OpKind::UpsampleNearest, vec![random(r, &[2, 2, 3])], Attrs::new().int("factor", 2)),
        (OpKind::Reshape, vec![random(r, &[2, 6])], Attrs::new().ints("shape", &[3, 4])),
        (OpKind::Permute, vec![random(r, &[2, 3, 4])], Attrs::new().ints("axes", &[2, 0, 1])),
        (OpKind::Concat, vec![random(r, &[2, 2]), random(r, &[2, 3])], Attrs::new().int("axis", 1)),
        (OpKind::Slice, vec![random(r, &[5, 4])], Attrs::new().int("axis", 0).int("start", 1).int("len", 3)),
        (OpKind::Roll2d, vec![random(r, &[1, 4, 4])], Attrs::new().int("dy", 1).int("dx", 2)),
        (OpKind::Softmax, vec![random(r, &[8])], Attrs::new().int("axis", 0)),
        // kept away from the kink at zero
        (OpKind::Relu, vec![Tensor::new([4], vec![-0.8, -0.3, 0.4, 0.9])], Attrs::new()),
        (OpKind::Gelu, vec![random(r, &[6])], Attrs::new()),
        (
            OpKind::LayerNorm,
            vec![random(r, &[3, 5]), Tensor::full([5], 1.1), random(r, &[5])],
            Attrs::new().float("eps", 1e-5),
        ),
        (OpKind::ChannelBias, vec![random(r, &[2, 3, 3]), random(r, &[2])], Attrs::new()),
        (OpKind::Mean, vec![random(r, &[6])], Attrs::new()),
        (OpKind::Sum, vec![random(r, &[6])], Attrs::new()),
        (OpKind::Mse, vec![random(r, &[6]), random(r, &[6])], Attrs::new()),
    ];

    println!("{:<18} {:>12}", "op", "rel. error");
    for (kind, point, attrs) in &cases {
        let err = finite_diff_check(*kind, point, attrs, 1e-5)?;
        println!("{:<18} {:>12.2e}", kind.name(), err);
    }

    // A one-layer attention score: softmax(x·W)·v, through gelu.
    let point = vec![random(r, &[4, 3]), random(r, &[3, 5]), random(r, &[5, 2])];
    let f = |xs: &[Tensor]| xs[0].matmul(&xs[1])?.softmax(1)?.matmul(&xs[2]).map(|t| t.gelu());
    let err = gradient_check(f, &point, 1e-5, None)?;
    println!("{:<18} {:>12.2e}", "composite", err);
    Ok(())
}
