use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SalientError};
use crate::morph::{Mask, Mask3};
use crate::wavelet::Slice;

/// Lesion placement region `(y0, y1, x0, x1)` on the 64x64 grid, scaled for
/// other sizes: the mediastinal band between the lungs.
pub const PLACEMENT: (f64, f64, f64, f64) = (12.0 / 64.0, 42.0 / 64.0, 22.0 / 64.0, 42.0 / 64.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TvrBand {
    Small,
    Middle,
    Large,
}

impl TvrBand {
    pub const ALL: [TvrBand; 3] = [TvrBand::Small, TvrBand::Middle, TvrBand::Large];

    /// Inclusive lesion-fraction range.
    pub fn range(self) -> (f64, f64) {
        match self {
            TvrBand::Small => (0.001, 0.003),
            TvrBand::Middle => (0.003, 0.01),
            TvrBand::Large => (0.01, 0.03),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TvrBand::Small => "small",
            TvrBand::Middle => "middle",
            TvrBand::Large => "large",
        }
    }

    pub fn of(tvr: f64) -> Option<TvrBand> {
        TvrBand::ALL.into_iter().find(|b| {
            let (lo, hi) = b.range();
            tvr >= lo && tvr <= hi
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Amplitude of the band-limited texture.
    pub noise: f64,
    /// Number of bright vessel cross-sections in the mediastinum.
    pub vessels: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { depth: 12, height: 64, width: 64, noise: 0.04, vessels: 2 }
    }
}

impl PhantomConfig {
    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.height < 16 || self.width < 16 || self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(SalientError::Config(format!(
                "phantom size {}x{}x{} must have depth >= 1 and even in-plane sizes >= 16",
                self.depth, self.height, self.width
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(SalientError::Config("phantom noise must be nonnegative".into()));
        }
        Ok(())
    }

    /// Placement region in pixel units `(y0, y1, x0, x1)`, half-open.
    pub fn placement(&self) -> (usize, usize, usize, usize) {
        let (h, w) = (self.height as f64, self.width as f64);
        (
            (PLACEMENT.0 * h).round() as usize,
            (PLACEMENT.1 * h).round() as usize,
            (PLACEMENT.2 * w).round() as usize,
            (PLACEMENT.3 * w).round() as usize,
        )
    }
}

/// Intensity volume (z-major, values in [-1, 1]) with its lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSubject {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub volume: Vec<f32>,
    pub mask: Mask3,
    pub label: u8,
    pub tvr: f64,
    pub contrast: f64,
    pub band: Option<TvrBand>,
}

impl PhantomSubject {
    pub fn slice(&self, z: usize) -> Slice<f32> {
        let n = self.height * self.width;
        Slice { h: self.height, w: self.width, data: self.volume[z * n..(z + 1) * n].to_vec() }
    }

    pub fn mask_slice(&self, z: usize) -> Mask {
        self.mask.slice(z)
    }

    pub fn lesion_slices(&self) -> Vec<usize> {
        (0..self.depth).filter(|&z| !self.mask.slice(z).is_empty()).collect()
    }
}

/// Soft inside-indicator of an ellipse/ellipsoid given its normalised radius `q`.
fn soft(q: f64, edge: f64) -> f64 {
    1.0 / (1.0 + ((q - 1.0) / edge).exp())
}

struct Anatomy {
    body: [f64; 4],
    lung_dx: f64,
    lung_r: [f64; 2],
    lung_y: f64,
    med: [f64; 3],
    spine: [f64; 3],
    drift: [f64; 3],
    phase: f64,
}

fn anatomy<R: Rng>(rng: &mut R) -> Anatomy {
    let mut j = |s: f64| 1.0 + s * (rng.random::<f64>() * 2.0 - 1.0);
    Anatomy {
        body: [0.0, 0.05 * j(0.5), 0.86 * j(0.04), 0.66 * j(0.05)],
        lung_dx: 0.43 * j(0.05),
        lung_r: [0.27 * j(0.08), 0.42 * j(0.08)],
        lung_y: -0.05 * j(0.5),
        med: [-0.12 * j(0.2), 0.2 * j(0.1), 0.42 * j(0.06)],
        spine: [0.42 * j(0.05), 0.12 * j(0.1), 0.7 * j(0.05)],
        drift: [0.06 * j(0.5), 0.05 * j(0.5), 0.04 * j(0.5)],
        phase: rng.random::<f64>() * std::f64::consts::TAU,
    }
}

/// Texture: white noise low-passed by two separable 3-tap box passes, then
/// rescaled to unit standard deviation.
fn texture<R: Rng>(rng: &mut R, h: usize, w: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    for _ in 0..2 {
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let a = v[y * w + x.saturating_sub(1)];
                let b = v[y * w + (x + 1).min(w - 1)];
                tmp[y * w + x] = (a + v[y * w + x] + b) / 3.0;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let a = tmp[y.saturating_sub(1) * w + x];
                let b = tmp[(y + 1).min(h - 1) * w + x];
                v[y * w + x] = (a + tmp[y * w + x] + b) / 3.0;
            }
        }
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    v.iter().map(|x| (x - m) / sd).collect()
}

struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

/// Lesion voxels inside the placement box for a radius scale `s`.
fn lesion_mask(parts: &[Ellipsoid], s: f64, cfg: &PhantomConfig) -> (Mask3, Vec<f64>) {
    let (y0, y1, x0, x1) = cfg.placement();
    let mut m = Mask3::zeros(cfg.depth, cfg.height, cfg.width);
    let mut field = vec![0.0; cfg.voxels()];
    for z in 0..cfg.depth {
        for y in y0..y1 {
            for x in x0..x1 {
                let mut best = f64::INFINITY;
                for e in parts {
                    let dz = (z as f64 - e.c[0]) / (e.r[0] * s);
                    let dy = (y as f64 + 0.5 - e.c[1]) / (e.r[1] * s);
                    let dx = (x as f64 + 0.5 - e.c[2]) / (e.r[2] * s);
                    best = best.min((dz * dz + dy * dy + dx * dx).sqrt());
                }
                let i = m.idx(z, y, x);
                field[i] = soft(best, 0.12);
                if best < 1.0 {
                    m.data[i] = 1;
                }
            }
        }
    }
    (m, field)
}

fn place_lesion<R: Rng>(rng: &mut R, cfg: &PhantomConfig, band: TvrBand) -> Result<(Mask3, Vec<f64>)> {
    let (y0, y1, x0, x1) = cfg.placement();
    let total = cfg.voxels() as f64;
    let (lo, hi) = band.range();
    let target = (lo + (hi - lo) * (0.15 + 0.7 * rng.random::<f64>())) * total;
    let k = rng.random_range(2..=4);
    let zc = cfg.depth as f64 / 2.0 - 0.5 + (rng.random::<f64>() - 0.5) * cfg.depth as f64 * 0.3;
    let yc = y0 as f64 + (y1 - y0) as f64 * (0.3 + 0.4 * rng.random::<f64>());
    let xc = x0 as f64 + (x1 - x0) as f64 * (0.3 + 0.4 * rng.random::<f64>());
    let parts: Vec<Ellipsoid> = (0..k)
        .map(|_| Ellipsoid {
            c: [
                zc + (rng.random::<f64>() - 0.5) * 2.0,
                yc + (rng.random::<f64>() - 0.5) * 6.0,
                xc + (rng.random::<f64>() - 0.5) * 6.0,
            ],
            r: [0.8 + 0.6 * rng.random::<f64>(), 1.0 + 0.6 * rng.random::<f64>(), 1.0 + 0.6 * rng.random::<f64>()],
        })
        .collect();
    // the union grows monotonically with the radius scale
    let count = |s: f64| lesion_mask(&parts, s, cfg).0.count() as f64;
    let (mut a, mut b) = (0.0, 1.0);
    while count(b) < target {
        b *= 2.0;
        if b > 64.0 {
            return Err(SalientError::Generation(format!(
                "lesion cannot reach {:.0} voxels inside the placement band",
                target
            )));
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (a + b);
        if count(mid) >= target {
            b = mid;
        } else {
            a = mid;
        }
    }
    let (mask, field) = lesion_mask(&parts, b, cfg);
    let tvr = mask.count() as f64 / total;
    if tvr < lo || tvr > hi {
        return Err(SalientError::Generation(format!(
            "lesion fraction {:.5} misses the {} band [{}, {}]",
            tvr,
            band.name(),
            lo,
            hi
        )));
    }
    Ok((mask, field))
}

/// One subject. Anatomy parameters drift smoothly along z; positive
/// subjects carry one lesion of additive intensity `contrast`.
pub fn gen_subject(seed: u64, positive: bool, band: TvrBand, contrast: f64, cfg: &PhantomConfig) -> Result<PhantomSubject> {
    cfg.validate()?;
    if !(0.1..=0.8).contains(&contrast) {
        return Err(SalientError::invalid(format!("lesion contrast {} outside [0.1, 0.8]", contrast)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = anatomy(&mut rng);
    let (d, h, w) = (cfg.depth, cfg.height, cfg.width);
    let n = h * w;
    let edge = 2.0 / h as f64;
    let (vy0, vy1, vx0, vx1) = cfg.placement();
    let vessels: Vec<[f64; 4]> = (0..cfg.vessels)
        .map(|_| {
            [
                vy0 as f64 + (vy1 - vy0) as f64 * rng.random::<f64>(),
                vx0 as f64 + (vx1 - vx0) as f64 * rng.random::<f64>(),
                1.5 + 1.5 * rng.random::<f64>(),
                0.15 + 0.15 * rng.random::<f64>(),
            ]
        })
        .collect();
    let mut volume = vec![0.0f64; d * n];
    for z in 0..d {
        let zt = if d > 1 { z as f64 / (d - 1) as f64 } else { 0.0 };
        let wave = (std::f64::consts::PI * zt + a.phase).sin();
        let lung_scale = 1.0 + a.drift[0] * wave;
        let med_scale = 1.0 + a.drift[1] * wave;
        let body_scale = 1.0 + a.drift[2] * (std::f64::consts::PI * zt).sin();
        let tex = texture(&mut rng, h, w);
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let v = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                let ell = |cx: f64, cy: f64, rx: f64, ry: f64| (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
                let body = soft(ell(a.body[0], a.body[1], a.body[2] * body_scale, a.body[3] * body_scale), edge);
                let mut val = -1.0 + 1.0 * body;
                let lungs = soft(ell(-a.lung_dx, a.lung_y, a.lung_r[0] * lung_scale, a.lung_r[1] * lung_scale), edge)
                    .max(soft(ell(a.lung_dx, a.lung_y, a.lung_r[0] * lung_scale, a.lung_r[1] * lung_scale), edge));
                val += -0.75 * lungs * body;
                let med = soft(ell(0.0, a.med[0], a.med[1] * med_scale, a.med[2] * med_scale), edge);
                val += 0.12 * med * (1.0 - lungs);
                let spine = soft(ell(0.0, a.spine[0], a.spine[1], a.spine[1]), edge);
                val += (a.spine[2] - val) * spine;
                for vs in &vessels {
                    let q = ((y as f64 + 0.5 - vs[0]).powi(2) + (x as f64 + 0.5 - vs[1]).powi(2)).sqrt() / vs[2];
                    val += vs[3] * soft(q, 0.2) * med;
                }
                val += cfg.noise * tex[y * w + x] * body;
                volume[z * n + y * w + x] = val;
            }
        }
    }
    let (mask, band_tag) = if positive {
        let (mask, field) = place_lesion(&mut rng, cfg, band)?;
        for (v, f) in volume.iter_mut().zip(&field) {
            *v += contrast * f;
        }
        (mask, Some(band))
    } else {
        (Mask3::zeros(d, h, w), None)
    };
    let count = mask.count();
    Ok(PhantomSubject {
        depth: d,
        height: h,
        width: w,
        volume: volume.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect(),
        label: u8::from(count > 0),
        tvr: count as f64 / (d * n) as f64,
        contrast,
        mask,
        band: band_tag,
    })
}

/// A generated slice with its conditioning mask adopted as ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub slice: Slice<f32>,
    pub mask: Mask,
    pub label: u8,
    pub provenance: &'static str,
}

pub fn pair_synthetic(slice: Slice<f32>, cond_mask: &Mask) -> Result<PairedSample> {
    if slice.h != cond_mask.h || slice.w != cond_mask.w {
        return Err(SalientError::invalid(format!(
            "slice {}x{} and mask {}x{} differ",
            slice.h, slice.w, cond_mask.h, cond_mask.w
        )));
    }
    Ok(PairedSample { slice, mask: cond_mask.clone(), label: u8::from(!cond_mask.is_empty()), provenance: "oracle" })
}
