// Slot-structured "images" with yes/no questions, and their image- and
// object-level perturbations.

use scalpel::datagen::{gen_trusted, perturb_all, write_episodes, World, WorldConfig};
use scalpel::store::Level;

fn main() -> scalpel::Result<()> {
    let world = World::new(WorldConfig::default(), 1)?;
    let clean = gen_trusted(&world, 6, 2)?;
    let image = perturb_all(&world, &clean, Level::Image, 3)?;
    let object = perturb_all(&world, &clean, Level::Object, 3)?;

    let texture = |s: &[f32]| {
        let t = &s[world.config.slot_dim..];
        t.iter().map(|v| v * v).sum::<f32>() / t.len() as f32
    };
    for ((c, i), o) in clean.iter().zip(&image).zip(&object) {
        println!(
            "episode {}: objects {:?} query {} answer {} | texture energy clean {:.3} image {:.3} object slot {:?} {:.3}",
            c.id,
            c.objects,
            c.query,
            if c.answer == scalpel::model::YES { "yes" } else { "no" },
            texture(&c.slots[0]),
            texture(&i.slots[0]),
            o.perturbation.as_ref().and_then(|p| p.target_slot),
            o.perturbation.as_ref().and_then(|p| p.target_slot).map_or(0.0, |s| texture(&o.slots[s])),
        );
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("episodes.jsonl");
    write_episodes(&image, &path)?;
    println!("wrote {} bytes of JSONL", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));
    Ok(())
}
