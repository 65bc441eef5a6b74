// Train the toy decoder briefly, read head activations through the hook,
// and patch one head at the answer position.

use scalpel::datagen::{gen_trusted, training_set, TrainSetConfig, World, WorldConfig};
use scalpel::model::train::{train, TrainConfig};
use scalpel::model::{ModelConfig, NoEdits, ToyModel, YES};

fn main() -> scalpel::Result<()> {
    let world = World::new(WorldConfig::default(), 3)?;
    let examples = training_set(&world, &TrainSetConfig { clean: 800, biased_per_level: 100 }, 4)?;
    let mut model = ToyModel::new(ModelConfig::default(), 5)?;
    let summary = train(&mut model, &examples, &TrainConfig { epochs: 2, ..TrainConfig::default() })?;
    println!("trained: loss {:.3}, accuracy {:.3}", summary.final_loss, summary.train_accuracy);

    let episode = &gen_trusted(&world, 1, 6)?[0];
    let seq = episode.sequence();
    let out = model.forward(&seq, true, &mut NoEdits)?;
    println!("{} hook records at the final position", out.records.len());
    let r = &out.records[10];
    println!("layer {} head {}: z = {:.3?}", r.layer, r.head, r.z);
    println!("p(yes) = {:.4}", out.probabilities()[YES as usize]);

    // add a constant vector to layer 1, head 2
    let mut patch = |_: usize, l: usize, h: usize, z: &[f32]| -> scalpel::Result<Option<Vec<f32>>> {
        Ok((l == 1 && h == 2).then(|| vec![2.0; z.len()]))
    };
    let edited = model.forward(&seq, false, &mut patch)?;
    println!("patched p(yes) = {:.4}", edited.probabilities()[YES as usize]);

    let g = model.generate(&seq, 3, &mut NoEdits)?;
    println!("generated tokens {:?}", g.tokens);
    Ok(())
}
