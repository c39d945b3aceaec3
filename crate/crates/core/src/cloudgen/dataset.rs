use serde::{Deserialize, Serialize};

use super::{apply_xy, generate_cloud, xy_transforms, CloudSpec, Dihedral, XyTransform};
use crate::error::Result;
use crate::rng;
use crate::volume::DenseGrid3;

/// Recipe for one augmented volume; cheap to store, materialized on demand.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceDescriptor {
    pub cloud_id: u32,
    pub cloud_seed: u64,
    pub xy: XyTransform,
    pub dihedral: Dihedral,
}

impl InstanceDescriptor {
    pub fn spec(&self, extents: [usize; 3]) -> CloudSpec {
        CloudSpec::random(self.cloud_seed, extents)
    }

    pub fn materialize(&self, extents: [usize; 3]) -> Result<DenseGrid3> {
        let base = generate_cloud(&self.spec(extents))?;
        self.transform(&base)
    }

    /// Applies this descriptor's transforms to an already generated base cloud.
    pub fn transform(&self, base: &DenseGrid3) -> Result<DenseGrid3> {
        let moved = if self.xy == XyTransform::IDENTITY {
            base.clone()
        } else {
            apply_xy(base, self.xy)
        };
        self.dihedral.apply_grid(&moved)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<InstanceDescriptor>,
    pub held_out: Vec<InstanceDescriptor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.held_out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &InstanceDescriptor> {
        self.train.iter().chain(self.held_out.iter())
    }
}

pub fn cloud_seed(master_seed: u64, cloud_id: u32) -> u64 {
    rng::mix(&[master_seed, cloud_id as u64, 0x434C_4F55])
}

/// Enumerates `n_clouds × n_xy × (8 | 1)` descriptors. The last `n_held_out`
/// cloud ids, with all their augmented copies, form the held-out split.
pub fn build_dataset(
    master_seed: u64,
    n_clouds: usize,
    n_xy_transforms: usize,
    include_dihedral: bool,
    n_held_out: usize,
) -> Dataset {
    let xys = xy_transforms(n_xy_transforms);
    let dihedrals: Vec<Dihedral> = if include_dihedral {
        Dihedral::all().to_vec()
    } else {
        vec![Dihedral::IDENTITY]
    };
    let first_held = n_clouds.saturating_sub(n_held_out);
    let mut ds = Dataset::default();
    for id in 0..n_clouds as u32 {
        let seed = cloud_seed(master_seed, id);
        let bucket = if (id as usize) < first_held {
            &mut ds.train
        } else {
            &mut ds.held_out
        };
        for &xy in &xys {
            for &d in &dihedrals {
                bucket.push(InstanceDescriptor {
                    cloud_id: id,
                    cloud_seed: seed,
                    xy,
                    dihedral: d,
                });
            }
        }
    }
    ds
}
