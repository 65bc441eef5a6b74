// Write labelled activation tensors with a hashed manifest and read one back.

use scalpel::rng;
use scalpel::store::{ActivationTensor, DatasetManifest, Dims, ManifoldLabel};

use rand::Rng;

fn main() -> scalpel::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let dims = Dims::new(100, 4, 8, 16);
    let mut r = rng::stream(0, "store-example");
    let mut manifest = DatasetManifest::new(0);
    for label in [ManifoldLabel::Trusted, ManifoldLabel::HallucImage] {
        let data = (0..dims.len()).map(|_| r.random::<f32>()).collect();
        let t = ActivationTensor::new(dims, data, Some(label))?;
        manifest.add(dir.path(), &format!("{}.sclp", label.as_str()), &t)?;
    }
    manifest.save(&dir.path().join("manifest.json"))?;

    let back = DatasetManifest::load(&dir.path().join("manifest.json"))?;
    back.validate(dir.path())?;
    let t = back.load_tensor(dir.path(), ManifoldLabel::HallucImage)?;
    let x = t.slice_head(2, 5)?;
    println!("{:?} -> head (2, 5) slice {}x{}", t.dims(), x.nrows(), x.ncols());
    println!("first row {:.3?}", &t.vector(0, 2, 5)[..4]);
    Ok(())
}
