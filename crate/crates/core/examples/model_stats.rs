//! Parameter and FLOP ledgers of the three variants.

use shuffle_former::analysis::{count_flops, CONVENTION};
use shuffle_former::model::{build_variant, VARIANTS};

fn main() -> shuffle_former::Result<()> {
    println!("{CONVENTION}\n");
    for v in VARIANTS {
        let cfg = build_variant(v)?;
        let r224 = count_flops(&cfg, 224, 224)?;
        let r448 = count_flops(&cfg, 448, 448)?;
        println!(
            "Shuffle-{v}: {:.2}M params, {:.2} GFLOPs at 224, {:.2} at 448 (x{:.3})",
            r224.total_params() as f64 / 1e6,
            r224.total_flops() as f64 / 1e9,
            r448.total_flops() as f64 / 1e9,
            r448.total_flops() as f64 / r224.total_flops() as f64
        );
    }
    let t = count_flops(&build_variant("T")?, 224, 224)?;
    println!("\nper-stage share of Shuffle-T:");
    for s in 0..4 {
        let prefix = format!("stages.{s}.");
        println!(
            "  stage {}: {:>10} params, {:>12} flops",
            s + 1,
            t.params_of(&prefix),
            t.flops_of(&prefix)
        );
    }
    Ok(())
}
