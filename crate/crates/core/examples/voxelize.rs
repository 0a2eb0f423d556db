//! Voxelizes a generated scene at several grid sizes and shows that
//! devoxelizing the voxel means hands every point its voxel's feature.
//!
//! ```bash
//! cargo run --release --example voxelize
//! ```

use refseg3d::scenes::{generate_scene, SceneSpec};
use refseg3d::sparse3d::{devoxelize, voxelize};
use refseg3d::tensor::Tape;

fn main() -> refseg3d::Result<()> {
    let scene = generate_scene(&SceneSpec::default(), 3)?;
    println!("{} points, {} objects", scene.cloud.len(), scene.objects.len());
    for size in [0.025, 0.05, 0.1, 0.2] {
        let (voxels, map) = voxelize(&scene.cloud, size)?;
        let busiest = map.voxel_to_points().iter().map(Vec::len).max().unwrap_or(0);
        println!(
            "voxel {size:5}: {:5} active, {:.2} points per voxel, busiest {busiest}",
            voxels.active().len(),
            map.point_count() as f64 / map.voxel_count() as f64
        );
    }

    let (voxels, map) = voxelize(&scene.cloud, 0.05)?;
    let mut tape = Tape::inference();
    let v = tape.constant(voxels.features().clone());
    let per_point = devoxelize(&mut tape, v, &map)?;
    let back = tape.value(per_point);
    let mut worst: f64 = 0.0;
    for (p, point) in scene.cloud.points().iter().enumerate() {
        for a in 0..3 {
            worst = worst.max((back.at(p, a) - point[a]).abs());
        }
    }
    println!("largest point-to-voxel-mean offset: {worst:.4} (half a voxel diagonal is {:.4})", 0.025 * 3f64.sqrt());
    Ok(())
}
