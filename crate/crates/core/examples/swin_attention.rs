//! Windowed self-attention on a feature map: partitioning, attention maps,
//! and how the shifted variant lets information cross window borders.
//!
//! ```text
//! cargo run --release --example swin_attention
//! ```

use dosediff::nn::{
    cross_attention_tokens, map_to_tokens, swin_block, window_attention_with_weights, window_merge, window_partition,
    CrossAttentionParams, Init, SwinBlockParams,
};
use dosediff::optim::ParamStore;
use dosediff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (c, h, w, win) = (4, 8, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new([c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect());

    let windows = window_partition(&x, win)?;
    println!("{:?} map → {:?} windows", x.shape(), windows.shape());
    assert_eq!(window_merge(&windows, h, w)?.to_vec(), x.to_vec());

    let mut store = ParamStore::new();
    SwinBlockParams::init(&mut store, &mut rng, "blk", c, None, Init::TruncNormal(0.3))?;
    let bound = store.bind(false);
    let plain = SwinBlockParams::bind(&bound, "blk", 2, win, false, false)?;
    let shifted = SwinBlockParams::bind(&bound, "blk", 2, win, true, false)?;

    // attention maps of the first window, first head
    let tokens = windows.permute(&[0, 2, 3, 1])?.reshape([4, win * win, c])?;
    let (_, weights) = window_attention_with_weights(&tokens, &plain.attn)?;
    let n = win * win;
    let row0 = &weights.data()[..n];
    println!("window 0, query 0 attends with weights summing to {:.12}", row0.iter().sum::<f64>());

    // Poke one pixel in the top-left window and see which outputs move.
    let mut poked = x.to_vec();
    poked[0] += 1.0;
    let poked = Tensor::new([c, h, w], poked);
    for (name, p) in [("unshifted", &plain), ("shifted", &shifted)] {
        let a = swin_block(&x, p, None)?;
        let b = swin_block(&poked, p, None)?;
        let moved: Vec<String> = (0..h)
            .map(|y| {
                (0..w)
                    .map(|xx| if (a.data()[y * w + xx] - b.data()[y * w + xx]).abs() > 0.0 { '#' } else { '.' })
                    .collect()
            })
            .collect();
        println!("\n{name} block, pixels affected in channel 0:\n{}", moved.join("\n"));
    }

    // Cross-attention: queries from structure, keys/values from noise.
    let mut store = ParamStore::new();
    CrossAttentionParams::init(&mut store, &mut rng, "x", c, c, Init::TruncNormal(0.3))?;
    let xa = CrossAttentionParams::bind(&store.bind(false), "x")?;
    let structure = map_to_tokens(&Tensor::new([c, h, w], (0..c * h * w).map(|i| (i as f64 * 0.1).sin()).collect()))?;
    let (_, w_cross) = cross_attention_tokens(&structure, &map_to_tokens(&x)?, &xa)?;
    println!("\ncross-attention map {:?}", w_cross.shape());
    Ok(())
}
