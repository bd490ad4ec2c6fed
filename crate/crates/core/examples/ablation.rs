//! Structural cost of every shuffle mode and NWC position.

use shuffle_former::cli::{ablation_grid, ablation_table};
use shuffle_former::model::{build_variant, NwcPosition};
use shuffle_former::windowing::ShuffleMode;

fn main() -> shuffle_former::Result<()> {
    let cells = ablation_grid(&build_variant("T")?, (224, 224), &ShuffleMode::ALL, &NwcPosition::ALL)?;
    print!("{}", ablation_table(&cells));
    Ok(())
}
