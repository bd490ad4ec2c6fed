//! Spatial shuffle maps along one axis and their alignment inverses.

use shuffle_former::windowing::{ShuffleMode, SpatialPermutation};
use shuffle_former::Rng;

fn main() -> shuffle_former::Result<()> {
    let (n, m) = (8, 2);
    let mut rng = Rng::new(0);
    for mode in ShuffleMode::ALL {
        let p = SpatialPermutation::new(n, m, mode, Some(&mut rng))?;
        let aligned = p.then(&p.inverse())?;
        println!(
            "{:<7} map {:?}  inverse {:?}  shuffle+align identity: {}",
            mode.as_str(),
            p.map(),
            p.inverse().map(),
            aligned.is_identity()
        );
    }
    Ok(())
}
