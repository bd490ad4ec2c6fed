//! Overfit a reduced model on a 32-sample synthetic set.

use shuffle_former::model::ModelConfig;
use shuffle_former::train::{toy_setup, train, SyntheticSpec, TrainConfig};

fn main() -> shuffle_former::Result<()> {
    let cfg = ModelConfig::toy();
    let (mut model, data) = toy_setup::<f32>(&cfg, &SyntheticSpec::default(), 0)?;
    let start = std::time::Instant::now();
    let report = train(&mut model, &data, &TrainConfig::default(), |s| {
        if let Some(acc) = s.eval_accuracy {
            println!(
                "step {:>3}  loss {:.4}  acc {:.3}  ({:.1?})",
                s.step,
                s.loss,
                acc,
                start.elapsed()
            );
        }
    })?;
    println!(
        "final accuracy {:.3} after {} steps",
        report.final_accuracy, report.steps_run
    );
    Ok(())
}
