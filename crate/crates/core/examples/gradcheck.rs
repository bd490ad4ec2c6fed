//! Analytic gradients of a reduced block against central finite differences.

use shuffle_former::gradcheck::{check_module_gradients, weighted_sum};
use shuffle_former::layers::{Mode, Module, NwcPadding};
use shuffle_former::model::{block_forward, Block, BlockConfig, NwcPosition};
use shuffle_former::windowing::ShuffleMode;
use shuffle_former::Rng;

fn main() -> shuffle_former::Result<()> {
    for nwc in NwcPosition::ALL {
        let cfg = BlockConfig {
            head_dim: 2,
            mlp_ratio: 2,
            shuffle: ShuffleMode::LongRange,
            nwc,
            nwc_padding: NwcPadding::Same,
            ..BlockConfig::new(4, 2)
        };
        let mut block = Block::<f64>::new("b", cfg, (4, 4), &mut Rng::new(0), &mut Rng::new(1))?;
        block.randomize(&mut Rng::new(2), 0.5);
        let x = Rng::new(3).normal_tensor::<f64>(&[2, 4, 4, 4], 1.0)?;
        let report = check_module_gradients(&block, &x, 1e-5, |g, xv, b| {
            let y = block_forward(g, xv, b, Mode::Train)?;
            let w = Rng::new(4).normal_tensor::<f64>(g.shape(y), 1.0)?;
            weighted_sum(g, y, &w)
        })?;
        println!(
            "NWC {nwc:<4}: {} entries, max relative error {:.2e}",
            report.checked, report.max_rel_error
        );
    }
    Ok(())
}
