//! Runs the sparse U-Net over a generated scene with no text fusion and
//! prints the active set at every level.
//!
//! ```bash
//! cargo run --release --example sparse_unet
//! ```

use std::time::Instant;

use refseg3d::params::{Init, ParamStore};
use refseg3d::scenes::{generate_scene, SceneSpec};
use refseg3d::sparse3d::{voxelize, Hierarchy, SparseUNet, UNetConfig};
use refseg3d::tensor::Tape;

fn main() -> refseg3d::Result<()> {
    let scene = generate_scene(&SceneSpec::default(), 11)?;
    let (voxels, _) = voxelize(&scene.cloud, 0.05)?;
    let config = UNetConfig::default();
    let hierarchy = Hierarchy::build(voxels.active().clone(), config.channels.len())?;
    for (i, level) in hierarchy.levels().iter().enumerate() {
        println!("level {i}: stride {:2}, {:5} voxels, {} channels", level.stride(), level.len(), config.channels[i]);
    }

    let mut store = ParamStore::new();
    let unet = SparseUNet::register(&mut store, &mut Init::new(0), &config, "unet")?;
    println!("{} parameters", store.element_count());

    let start = Instant::now();
    let mut tape = Tape::inference();
    let b = store.bind(&mut tape);
    let x = tape.constant(voxels.features().clone());
    let out = unet.forward(&mut tape, &b, &hierarchy, x, &mut |_, _, v| Ok(v))?;
    let f = tape.value(out.features);
    println!("output {:?} in {:.1?}, all finite: {}", f.shape(), start.elapsed(), f.all_finite());
    Ok(())
}
