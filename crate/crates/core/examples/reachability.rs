//! Which input tokens can influence one output token, by finite-difference
//! probing and by composing window/shuffle/NWC relations.

use shuffle_former::analysis::{reachability_probe, symbolic_for_stack, ProbeConfig, StackSpec};

fn main() -> shuffle_former::Result<()> {
    for (grid, blocks, probe) in [
        (8, "none,none", (3, 5)),
        (4, "none,long", (1, 2)),
        (16, "none,long", (5, 10)),
        (16, "none/B,long/B", (5, 10)),
    ] {
        let spec = StackSpec::new(grid, 2, StackSpec::parse_blocks(blocks)?);
        let fd = reachability_probe(&spec, probe, &ProbeConfig::default())?;
        let sym = symbolic_for_stack(&spec, probe)?;
        println!(
            "{blocks} on {grid}x{grid}, probe {probe:?}: {} of {} reachable, probe == symbolic: {}",
            fd.len(),
            grid * grid,
            fd.same_members(&sym)
        );
        print!("{}", fd.render());
        println!();
    }
    Ok(())
}
