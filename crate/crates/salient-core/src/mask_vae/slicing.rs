use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SalientError};
use crate::morph::{Mask, Mask3};
use crate::phantom::SalvVolume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Real,
    VaeSampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    pub mask: Mask3,
    pub provenance: Provenance,
}

impl MaskVolume {
    pub fn fraction(&self) -> f64 {
        self.mask.count() as f64 / self.mask.data.len() as f64
    }

    /// Mask-only SALV container.
    pub fn to_salv(&self) -> SalvVolume {
        SalvVolume { depth: self.mask.d, height: self.mask.h, width: self.mask.w, intensity: None, mask: Some(self.mask.clone()) }
    }

    pub fn from_salv(v: SalvVolume, provenance: Provenance) -> Result<Self> {
        match v.mask {
            Some(mask) => Ok(Self { mask, provenance }),
            None => Err(SalientError::format("flags", "volume has no mask payload")),
        }
    }
}

/// Stack the lesion's axial extent, resample it to `depth` slices by
/// nearest neighbour, max-pool in-plane down to `height x width` and centre
/// the in-plane bounding box. Position is restored at placement time.
pub fn resample_lesion(mask: &Mask3, depth: usize, height: usize, width: usize) -> Result<MaskVolume> {
    if height == 0 || width == 0 || mask.h % height != 0 || mask.w % width != 0 || mask.h / height != mask.w / width {
        return Err(SalientError::dim(format!(
            "{}x{} slices do not pool evenly to {}x{}",
            mask.h, mask.w, height, width
        )));
    }
    let f = mask.h / height;
    let nonempty: Vec<usize> = (0..mask.d).filter(|&z| !mask.slice(z).is_empty()).collect();
    let (Some(&lo), Some(&hi)) = (nonempty.first(), nonempty.last()) else {
        return Err(SalientError::invalid("lesion volume has no positive voxels"));
    };
    let extent = hi - lo + 1;
    let mut pooled = Mask3::zeros(depth, height, width);
    for z in 0..depth {
        let sz = lo + z * extent / depth;
        let src = mask.slice(sz).max_pool(f)?;
        let n = height * width;
        pooled.data[z * n..(z + 1) * n].copy_from_slice(&src.data);
    }
    let (y0, y1, x0, x1) = bbox(&pooled).expect("nonempty");
    let (dy, dx) = ((height - (y1 - y0)) / 2, (width - (x1 - x0)) / 2);
    let mut out = Mask3::zeros(depth, height, width);
    for z in 0..depth {
        for y in y0..y1 {
            for x in x0..x1 {
                if pooled.get(z, y, x) {
                    out.set(z, y - y0 + dy, x - x0 + dx, true);
                }
            }
        }
    }
    Ok(MaskVolume { mask: out, provenance: Provenance::Real })
}

/// In-plane bounding box `(y0, y1, x0, x1)` over every slice.
fn bbox(m: &Mask3) -> Option<(usize, usize, usize, usize)> {
    let (mut by0, mut by1, mut bx0, mut bx1) = (usize::MAX, 0, usize::MAX, 0);
    for z in 0..m.d {
        for y in 0..m.h {
            for x in 0..m.w {
                if m.get(z, y, x) {
                    by0 = by0.min(y);
                    by1 = by1.max(y + 1);
                    bx0 = bx0.min(x);
                    bx1 = bx1.max(x + 1);
                }
            }
        }
    }
    (by1 > 0).then_some((by0, by1, bx0, bx1))
}

/// Nonempty axial slices of `vol`, nearest-neighbour upsampled to
/// `target_hw` scale and translated as one rigid block to a seeded position
/// inside `placement = (y0, y1, x0, x1)`.
pub fn slice_conditioning_masks(
    vol: &MaskVolume,
    target_hw: (usize, usize),
    placement: (usize, usize, usize, usize),
    seed: u64,
) -> Result<Vec<(usize, Mask)>> {
    let (th, tw) = target_hw;
    let m = &vol.mask;
    if th % 2 != 0 || tw % 2 != 0 {
        return Err(SalientError::invalid(format!("target size {}x{} must be even", th, tw)));
    }
    if th % m.h != 0 || tw % m.w != 0 {
        return Err(SalientError::dim(format!("{}x{} masks do not scale to {}x{}", m.h, m.w, th, tw)));
    }
    let (fy, fx) = (th / m.h, tw / m.w);
    let (y0, y1, x0, x1) = placement;
    if y1 > th || x1 > tw || y0 >= y1 || x0 >= x1 {
        return Err(SalientError::Placement(format!("placement {:?} outside {}x{}", placement, th, tw)));
    }
    let Some((by0, by1, bx0, bx1)) = bbox(m) else {
        return Ok(Vec::new());
    };
    let (bh, bw) = ((by1 - by0) * fy, (bx1 - bx0) * fx);
    if bh > y1 - y0 || bw > x1 - x0 {
        return Err(SalientError::Placement(format!(
            "upsampled lesion {}x{} exceeds placement region {}x{}",
            bh,
            bw,
            y1 - y0,
            x1 - x0
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.random_range(y0..=y1 - bh);
    let ox = rng.random_range(x0..=x1 - bw);
    let mut out = Vec::new();
    for z in 0..m.d {
        let s = m.slice(z);
        if s.is_empty() {
            continue;
        }
        let mut t = Mask::zeros(th, tw);
        for y in by0..by1 {
            for x in bx0..bx1 {
                if !s.get(y, x) {
                    continue;
                }
                for dy in 0..fy {
                    for dx in 0..fx {
                        t.set(oy + (y - by0) * fy + dy, ox + (x - bx0) * fx + dx, true);
                    }
                }
            }
        }
        out.push((z, t));
    }
    Ok(out)
}
