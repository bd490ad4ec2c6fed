//! One Shuffle-T forward pass at 224x224.

use shuffle_former::model::{build_variant, Model};
use shuffle_former::Rng;

fn main() -> shuffle_former::Result<()> {
    let cfg = build_variant("T")?;
    for (s, (h, w)) in cfg.stage_resolutions(224, 224)?.into_iter().enumerate() {
        println!(
            "stage {}: {} channels on {h}x{w}, {} blocks, {} heads",
            s + 1,
            cfg.stage_channels(s),
            cfg.depths[s],
            cfg.stage_heads(s)
        );
    }
    let model = Model::<f32>::new(&cfg, &mut Rng::new(0))?;
    let image = Rng::new(1).normal_tensor::<f32>(&[1, 3, 224, 224], 1.0)?;
    let start = std::time::Instant::now();
    let logits = model.predict(&image)?;
    let top = (0..logits.shape()[1])
        .max_by(|&a, &b| logits.data()[a].total_cmp(&logits.data()[b]))
        .unwrap_or(0);
    println!(
        "logits {:?} in {:.2?}, argmax class {top}",
        logits.shape(),
        start.elapsed()
    );
    Ok(())
}
