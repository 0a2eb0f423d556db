use std::sync::Arc;

use super::{ActiveSet, SparseVoxelTensor};
use crate::error::{Error, Result};
use crate::tensor::{ConvMap, Tape};

/// Number of offsets in a 3×3×3 kernel.
pub const KERNEL_VOLUME: usize = 27;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Output active set equals the input active set.
    Submanifold,
    /// Output cells are the unique `floor(c / 2)` of the input; stride doubles.
    Strided,
}

/// Offset `d ∈ {-1,0,1}³` → kernel slice, matching a `[3,3,3,Cin,Cout]`
/// kernel indexed `[dx+1][dy+1][dz+1]`.
pub(crate) fn offset_index(d: [i32; 3]) -> usize {
    ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize
}

fn offsets() -> impl Iterator<Item = [i32; 3]> {
    (-1..=1).flat_map(|x| (-1..=1).flat_map(move |y| (-1..=1).map(move |z| [x, y, z])))
}

/// A kernel map together with the active set it produces.
#[derive(Clone, Debug)]
pub struct ConvPlan {
    pub output: Arc<ActiveSet>,
    pub map: Arc<ConvMap>,
}

impl ConvPlan {
    /// Output voxel `o` reads input `o + d` through slice `d` for every active
    /// neighbor.
    pub fn submanifold(input: &Arc<ActiveSet>) -> Self {
        let mut pairs = Vec::new();
        for (o, c) in input.coords().iter().enumerate() {
            for d in offsets() {
                if let Some(i) = input.get(&[c[0] + d[0], c[1] + d[1], c[2] + d[2]]) {
                    pairs.push((offset_index(d), i, o));
                }
            }
        }
        let map = ConvMap::from_pairs(input.len(), input.len(), KERNEL_VOLUME, &pairs)
            .expect("pairs are in range by construction");
        Self {
            output: input.clone(),
            map: Arc::new(map),
        }
    }

    /// Output cell `o` reads input `2·o + d` through slice `d`.
    pub fn strided(input: &ActiveSet) -> Self {
        let coarse: Vec<[i32; 3]> = input.coords().iter().map(|c| parent_of(c)).collect();
        let output = ActiveSet::from_unsorted(input.stride() * 2, coarse);
        let mut pairs = Vec::new();
        for (o, c) in output.coords().iter().enumerate() {
            for d in offsets() {
                let src = [2 * c[0] + d[0], 2 * c[1] + d[1], 2 * c[2] + d[2]];
                if let Some(i) = input.get(&src) {
                    pairs.push((offset_index(d), i, o));
                }
            }
        }
        let map = ConvMap::from_pairs(input.len(), output.len(), KERNEL_VOLUME, &pairs)
            .expect("pairs are in range by construction");
        Self {
            output: Arc::new(output),
            map: Arc::new(map),
        }
    }

    pub fn new(input: &Arc<ActiveSet>, mode: ConvMode) -> Self {
        match mode {
            ConvMode::Submanifold => Self::submanifold(input),
            ConvMode::Strided => Self::strided(input),
        }
    }
}

pub(crate) fn parent_of(c: &[i32; 3]) -> [i32; 3] {
    [c[0].div_euclid(2), c[1].div_euclid(2), c[2].div_euclid(2)]
}

/// Applies a `[3,3,3,Cin,Cout]` kernel to a sparse tensor outside of any
/// training graph.
pub fn sparse_conv(
    x: &SparseVoxelTensor,
    kernel: &crate::tensor::Tensor,
    mode: ConvMode,
) -> Result<SparseVoxelTensor> {
    if x.active().is_empty() {
        return Err(Error::Degenerate("sparse_conv on an empty voxel set".into()));
    }
    let ks = kernel.shape();
    if ks.len() != 5 || ks[..3] != [3, 3, 3] || ks[3] != x.channels() {
        return Err(Error::Dimension {
            op: "sparse_conv",
            lhs: x.features().shape().to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let plan = ConvPlan::new(x.active(), mode);
    let mut tape = Tape::inference();
    let f = tape.constant(x.features().clone());
    let w = tape.constant(kernel.clone());
    let y = tape.sparse_conv(f, w, plan.map.clone())?;
    SparseVoxelTensor::new(plan.output, tape.value(y).clone())
}
