//! Shuffled window partition as one gather versus shuffle-then-partition.

use shuffle_former::windowing::{
    aligned_window_reverse, apply_spatial_permutation_2d, shuffled_window_partition, window_partition, ShuffleMode,
    ShufflePlan,
};
use shuffle_former::{Rng, Tensor};

fn main() -> shuffle_former::Result<()> {
    let x = Tensor::<f32>::from_fn([1, 1, 4, 4], |i| i as f32)?;
    let plan = ShufflePlan::new(4, 4, 2, ShuffleMode::LongRange, None)?;
    let fused = shuffled_window_partition(&x, 2, &plan)?;
    let unfused = window_partition(&apply_spatial_permutation_2d(&x, &plan.rows, &plan.cols)?, 2)?;
    println!("image (row-major): {:?}", x.data());
    for (w, win) in fused.data().chunks(4).enumerate() {
        println!("window {w}: {win:?}");
    }
    println!("fused == unfused: {}", fused == unfused);
    println!(
        "aligned reverse restores the image: {}",
        aligned_window_reverse(&fused, 2, &plan)? == x
    );

    let y = Rng::new(1).normal_tensor::<f32>(&[2, 8, 16, 16], 1.0)?;
    let plan = ShufflePlan::new(16, 16, 4, ShuffleMode::Random, Some(&mut Rng::new(2)))?;
    let wins = shuffled_window_partition(&y, 4, &plan)?;
    println!("random plan on 16x16, M=4: windows tensor {:?}", wins.shape());
    Ok(())
}
