//! Synthetic atrium-like phantoms with exact ground truth.
//!
//! Each case is an ellipsoidal blob with capsule-shaped tubes attached to
//! it, brighter than a noisy background. Post-ablation cases carry dark
//! speckle inside the foreground.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{largest_connected_component, StructuringElement};
use crate::train::derive_seed;
use crate::volume::{save_manifest, Ablation, CaseRecord, LabelVolume, Volume, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub n_cases: usize,
    pub dims: [usize; 3],
    /// Millimetres per voxel.
    pub spacing: [f32; 3],
    /// Blob semi-axis range in mm.
    pub blob_radius: [f64; 2],
    /// Inclusive range of tubes per case.
    pub n_tubes: [usize; 2],
    pub tube_radius: [f64; 2],
    pub tube_length: [f64; 2],
    /// Foreground minus background intensity before the contrast shift.
    pub contrast: [f64; 2],
    /// Exponent range of the global contrast shift `v^g`.
    pub gamma: [f64; 2],
    pub noise_std: f64,
    pub post_ablation_fraction: f64,
    /// Fraction of post-ablation foreground voxels darkened.
    pub scar_density: f64,
    /// Relative darkening of a scar voxel.
    pub scar_strength: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_cases: 20,
            dims: [64, 64, 16],
            spacing: [1.0, 1.0, 2.5],
            blob_radius: [9.0, 14.0],
            n_tubes: [2, 5],
            tube_radius: [2.0, 3.0],
            tube_length: [8.0, 16.0],
            contrast: [0.35, 0.6],
            gamma: [0.7, 1.4],
            noise_std: 0.08,
            post_ablation_fraction: 0.5,
            scar_density: 0.35,
            scar_strength: 0.65,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] >= lo && r[0] <= r[1]) {
        return Err(Error::Config(format!("{name} range {r:?} is invalid")));
    }
    Ok(())
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(Error::Config("n_cases must be >= 1".into()));
        }
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::Config(format!("every dim must be >= 2, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        check_range("blob_radius", self.blob_radius, 1e-6)?;
        check_range("tube_radius", self.tube_radius, 1e-6)?;
        check_range("tube_length", self.tube_length, 0.0)?;
        check_range("contrast", self.contrast, 0.0)?;
        check_range("gamma", self.gamma, 1e-6)?;
        if self.n_tubes[0] > self.n_tubes[1] {
            return Err(Error::Config(format!("n_tubes range {:?} is invalid", self.n_tubes)));
        }
        for (name, v) in [
            ("post_ablation_fraction", self.post_ablation_fraction),
            ("scar_density", self.scar_density),
            ("scar_strength", self.scar_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub case_id: String,
    pub volume: Volume3D,
    pub mask: LabelVolume,
    pub ablation: Ablation,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    /// Distance from the centre to the surface along unit vector `d`.
    fn extent(&self, d: [f64; 3]) -> f64 {
        1.0 / (0..3).map(|a| (d[a] / self.radii[a]).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

impl Capsule {
    fn contains(&self, p: [f64; 3]) -> bool {
        let ab: Vec<f64> = (0..3).map(|i| self.b[i] - self.a[i]).collect();
        let ap: Vec<f64> = (0..3).map(|i| p[i] - self.a[i]).collect();
        let len2: f64 = ab.iter().map(|v| v * v).sum();
        let t = if len2 > 0.0 {
            (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d2: f64 = (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum();
        d2 <= self.radius * self.radius
    }
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn render_case(spec: &PhantomSpec, index: usize, ablation: Ablation) -> Result<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, index as u64]));
    let [nx, ny, nz] = spec.dims;
    let sp = [spec.spacing[0] as f64, spec.spacing[1] as f64, spec.spacing[2] as f64];
    let extent = [nx as f64 * sp[0], ny as f64 * sp[1], nz as f64 * sp[2]];

    let r = uniform(&mut rng, spec.blob_radius);
    let radii = [
        r * rng.gen_range(0.85..1.15),
        r * rng.gen_range(0.85..1.15),
        r * rng.gen_range(0.7..1.0),
    ];
    let mut centre = [0.0; 3];
    for a in 0..3 {
        let mid = extent[a] / 2.0 - sp[a] / 2.0;
        let slack = (extent[a] / 2.0 - radii[a]).max(0.0) * 0.3;
        centre[a] = mid + rng.gen_range(-1.0..=1.0) * slack;
    }
    let blob = Ellipsoid { centre, radii };

    let n_tubes = rng.gen_range(spec.n_tubes[0]..=spec.n_tubes[1]);
    let mut tubes = Vec::with_capacity(n_tubes);
    for _ in 0..n_tubes {
        // mostly in-plane directions keep tubes continuous across thick slices
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let dz: f64 = rng.gen_range(-0.3..0.3);
        let h = (1.0 - dz * dz).sqrt();
        let d = [h * theta.cos(), h * theta.sin(), dz];
        let start_r = 0.6 * blob.extent(d);
        let len = start_r / 0.6 * 0.4 + uniform(&mut rng, spec.tube_length);
        let a = [0, 1, 2].map(|i| centre[i] + start_r * d[i]);
        let b = [0, 1, 2].map(|i| a[i] + len * d[i]);
        tubes.push(Capsule {
            a,
            b,
            radius: uniform(&mut rng, spec.tube_radius),
        });
    }

    let mut mask = LabelVolume::zeros(spec.dims, spec.spacing)?;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]];
                if blob.contains(p) || tubes.iter().any(|t| t.contains(p)) {
                    mask.set(x, y, z, 1);
                }
            }
        }
    }
    // discretization can split a grazing tube from the blob
    let mask = largest_connected_component(&mask, StructuringElement::Cross6);

    let background = rng.gen_range(0.15..0.3);
    let contrast = uniform(&mut rng, spec.contrast);
    let gamma = uniform(&mut rng, spec.gamma);
    let noise = Normal::new(0.0, spec.noise_std * rng.gen_range(0.7..1.3))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let gain = rng.gen_range(50.0..500.0);
    let mut voxels = Vec::with_capacity(mask.len());
    for &m in mask.voxels() {
        let mut v: f64 = if m == 1 { background + contrast } else { background };
        if m == 1 && ablation == Ablation::Post && rng.gen_bool(spec.scar_density) {
            v *= 1.0 - spec.scar_strength;
        }
        v = v.clamp(0.0, 1.0).powf(gamma) + noise.sample(&mut rng);
        voxels.push((v * gain) as f32);
    }
    Ok(Phantom {
        case_id: format!("case{index:03}"),
        volume: Volume::new(spec.dims, spec.spacing, voxels)?,
        mask,
        ablation,
    })
}

/// Ablation labels with exactly `round(fraction * n)` post cases, shuffled.
fn assign_labels(spec: &PhantomSpec) -> Vec<Ablation> {
    let n_post = (spec.post_ablation_fraction * spec.n_cases as f64).round() as usize;
    let mut labels: Vec<Ablation> = (0..spec.n_cases)
        .map(|i| if i < n_post { Ablation::Post } else { Ablation::Pre })
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, u64::MAX])));
    labels
}

pub fn generate(spec: &PhantomSpec) -> Result<Vec<Phantom>> {
    spec.validate()?;
    assign_labels(spec)
        .into_iter()
        .enumerate()
        .map(|(i, a)| render_case(spec, i, a))
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `volumes/<id>.avl`, `masks/<id>.avl` and `manifest.json` under
/// `dir`; returns the manifest path.
pub fn write_dataset(phantoms: &[Phantom], dir: &Path) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(phantoms.len());
    for sub in ["volumes", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for p in phantoms {
        let vpath = dir.join("volumes").join(format!("{}.avl", p.case_id));
        let mpath = dir.join("masks").join(format!("{}.avl", p.case_id));
        p.volume.save(&vpath)?;
        p.mask.save(&mpath)?;
        records.push(CaseRecord {
            case_id: p.case_id.clone(),
            volume: vpath,
            mask: Some(mpath),
            ablation: Some(p.ablation),
        });
    }
    let manifest = dir.join(MANIFEST_FILE);
    save_manifest(&manifest, &records)?;
    Ok(manifest)
}
