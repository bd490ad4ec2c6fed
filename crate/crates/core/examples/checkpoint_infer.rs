//! Save a model, reload it and run inference from a tensor file.

use shuffle_former::model::{
    load_checkpoint, read_tensor_file, save_checkpoint, write_tensor_file, Model, ModelConfig,
};
use shuffle_former::Rng;

fn main() -> shuffle_former::Result<()> {
    let dir = std::env::temp_dir().join("shuffle-former-example");
    std::fs::create_dir_all(&dir).map_err(|e| shuffle_former::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let cfg = ModelConfig::toy();
    let model = Model::<f32>::new(&cfg, &mut Rng::new(0))?;
    let ckpt = dir.join("toy.ckpt");
    save_checkpoint(&model, &ckpt)?;

    let images = Rng::new(1).normal_tensor::<f32>(&[2, 3, cfg.resolution, cfg.resolution], 1.0)?;
    let input = dir.join("images.sft");
    write_tensor_file(&input, "images", &images)?;

    let restored: Model<f32> = load_checkpoint(&ckpt)?;
    let (_, images) = read_tensor_file(&input)?;
    let logits = restored.predict(&images)?;
    println!("logits {:?}", logits.shape());
    println!("matches the in-memory model: {}", logits == model.predict(&images)?);
    println!("files in {}", dir.display());
    Ok(())
}
