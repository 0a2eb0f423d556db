//! Point clouds, voxelization, sparse convolution, and the sparse U-Net
//! feature extractor.
//!
//! Voxel coordinates live on an integer grid anchored at the world origin:
//! a point at `p` falls in voxel `floor(p / voxel_size)` per axis, so negative
//! coordinates are fine. Coarser levels of the U-Net store coordinates in
//! their own units (`floor(c / 2)` of the level below) together with their
//! stride relative to the base grid.

mod conv;
pub mod io;
mod unet;

use std::collections::HashMap;
use std::sync::Arc;

pub use conv::{sparse_conv, ConvMode, ConvPlan, KERNEL_VOLUME};
pub use unet::{Hierarchy, SparseUNet, UNetConfig, UNetOutput};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Per-point attribute count: x, y, z (meters) then r, g, b in [0, 1].
pub const POINT_DIM: usize = 6;

/// A scene as `N` rows of `(x, y, z, r, g, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; POINT_DIM]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; POINT_DIM]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("point cloud is empty".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("point cloud has non-finite values".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; POINT_DIM]] {
        &self.points
    }
}

/// Unique integer voxel coordinates at one resolution, with their inverse.
#[derive(Clone, Debug)]
pub struct ActiveSet {
    stride: u32,
    coords: Vec<[i32; 3]>,
    index: HashMap<[i32; 3], usize>,
}

impl ActiveSet {
    /// Builds a set from unique coordinates, keeping their order.
    pub fn new(stride: u32, coords: Vec<[i32; 3]>) -> Result<Self> {
        let mut index = HashMap::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            if index.insert(*c, i).is_some() {
                return Err(Error::Contract(format!("duplicate voxel coordinate {c:?}")));
            }
        }
        Ok(Self {
            stride,
            coords,
            index,
        })
    }

    /// Builds a set from possibly repeated coordinates, sorted ascending.
    pub fn from_unsorted(stride: u32, mut coords: Vec<[i32; 3]>) -> Self {
        coords.sort_unstable();
        coords.dedup();
        Self::new(stride, coords).expect("deduplicated")
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn get(&self, c: &[i32; 3]) -> Option<usize> {
        self.index.get(c).copied()
    }
}

/// Active voxels with one feature row each.
#[derive(Clone, Debug)]
pub struct SparseVoxelTensor {
    active: Arc<ActiveSet>,
    features: Tensor,
}

impl SparseVoxelTensor {
    pub fn new(active: Arc<ActiveSet>, features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != active.len() {
            return Err(Error::Dimension {
                op: "sparse_voxel_tensor",
                lhs: vec![active.len()],
                rhs: features.shape().to_vec(),
            });
        }
        Ok(Self { active, features })
    }

    pub fn active(&self) -> &Arc<ActiveSet> {
        &self.active
    }

    pub fn stride(&self) -> u32 {
        self.active.stride
    }

    pub fn coords(&self) -> &[[i32; 3]] {
        &self.active.coords
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }
}

/// Point ↔ voxel correspondence produced by [`voxelize`].
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelPointMap {
    point_to_voxel: Arc<[usize]>,
    voxel_to_points: Vec<Vec<usize>>,
}

impl VoxelPointMap {
    /// Builds the map from the forward direction, deriving the inverse.
    pub fn from_assignment(point_to_voxel: Vec<usize>, voxels: usize) -> Result<Self> {
        let mut voxel_to_points = vec![Vec::new(); voxels];
        for (p, &v) in point_to_voxel.iter().enumerate() {
            let slot = voxel_to_points.get_mut(v).ok_or(Error::Index {
                op: "voxel_point_map",
                index: v,
                len: voxels,
            })?;
            slot.push(p);
        }
        if let Some(v) = voxel_to_points.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("voxel {v} has no points")));
        }
        Ok(Self {
            point_to_voxel: point_to_voxel.into(),
            voxel_to_points,
        })
    }

    pub fn point_to_voxel(&self) -> &[usize] {
        &self.point_to_voxel
    }

    pub fn voxel_to_points(&self) -> &[Vec<usize>] {
        &self.voxel_to_points
    }

    pub fn point_count(&self) -> usize {
        self.point_to_voxel.len()
    }

    pub fn voxel_count(&self) -> usize {
        self.voxel_to_points.len()
    }
}

/// Voxel coordinate of a point for a given edge length.
pub fn voxel_of(point: &[f64], voxel_size: f64) -> [i32; 3] {
    [
        (point[0] / voxel_size).floor() as i32,
        (point[1] / voxel_size).floor() as i32,
        (point[2] / voxel_size).floor() as i32,
    ]
}

/// Bins points into a stride-1 voxel grid; each voxel's feature is the mean
/// of its points' six attributes.
///
/// Voxels come out in ascending coordinate order and members are summed in
/// sorted attribute order, so the result does not depend on point order.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<(SparseVoxelTensor, VoxelPointMap)> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Contract(format!("voxel size must be positive, got {voxel_size}")));
    }
    if cloud.is_empty() {
        return Err(Error::Contract("cannot voxelize an empty cloud".into()));
    }
    let per_point: Vec<[i32; 3]> = cloud.points.iter().map(|p| voxel_of(p, voxel_size)).collect();
    let active = ActiveSet::from_unsorted(1, per_point.clone());
    let assignment: Vec<usize> = per_point
        .iter()
        .map(|c| active.get(c).expect("every point's voxel is active"))
        .collect();
    let map = VoxelPointMap::from_assignment(assignment, active.len())?;

    let mut data = Vec::with_capacity(active.len() * POINT_DIM);
    let mut members: Vec<[f64; POINT_DIM]> = Vec::new();
    for pts in &map.voxel_to_points {
        members.clear();
        members.extend(pts.iter().map(|&p| cloud.points[p]));
        members.sort_unstable_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut sum = [0.0; POINT_DIM];
        for m in &members {
            for (s, v) in sum.iter_mut().zip(m) {
                *s += v;
            }
        }
        let inv = members.len() as f64;
        data.extend(sum.iter().map(|s| s / inv));
    }
    let features = Tensor::new(&[active.len(), POINT_DIM], data)?;
    Ok((SparseVoxelTensor::new(Arc::new(active), features)?, map))
}

/// Broadcasts voxel feature rows back to points. The backward pass
/// scatter-adds point gradients into their voxel.
pub fn devoxelize(tape: &mut Tape, voxel_features: Var, map: &VoxelPointMap) -> Result<Var> {
    let rows = tape.value(voxel_features).rows();
    if rows != map.voxel_count() {
        return Err(Error::Dimension {
            op: "devoxelize",
            lhs: tape.shape(voxel_features).to_vec(),
            rhs: vec![map.voxel_count()],
        });
    }
    tape.gather_rows(voxel_features, map.point_to_voxel.clone())
}
