//! Synthetic head-and-neck-like CT/PET cohorts with known ground truth.
//!
//! Each phantom is a neck cross-section extruded along z: soft tissue
//! (40 HU with 15 HU noise) inside an elliptical body, air outside, a
//! vertebral body and two smaller bones well above the soft-tissue window,
//! and an air-filled airway well below it. One ellipsoidal tumour and up to
//! two nodes form the ground truth.
//!
//! The two modalities carry complementary evidence:
//! - CT shows every lesion with a sharp edge but only ~2 noise sigmas of
//!   contrast, and the same contrast also appears in 1-2 lesion-sized
//!   "mimic" structures that are not tumour.
//! - PET shows lesions as bright uptake, blurred (sigma 2 voxels in-plane)
//!   and with a random centre-weighted profile, so its iso-contours do not
//!   follow the lesion edge; it also shows a physiological hot spot with no
//!   CT correlate.
//!
//! Neither channel alone pins down the lesion boundary, and each has a
//! distractor the other rules out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::{Mask, PatientRecord, Volume};

/// Phantom in-plane sizes must be multiples of this (depth-4 U-Net).
pub const PHANTOM_SIZE_MULTIPLE: usize = 16;

pub const SOFT_TISSUE_HU: f64 = 40.0;
pub const CT_NOISE_HU: f64 = 15.0;
pub const AIR_HU: f64 = -1000.0;
pub const PET_BLUR_SIGMA: f64 = 2.0;

const ANATOMY_ATTEMPTS: usize = 32;

/// Summary of one generated phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionStats {
    pub patient_id: String,
    pub t_stage: u8,
    pub gtv_voxels: usize,
    pub node_count: usize,
    pub positive_voxels: usize,
    pub positive_fraction: f64,
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    /// Centre in voxel coordinates (z, y, x).
    center: [f64; 3],
    /// Semi-axes (z, in-plane major, in-plane minor) in voxels.
    radii: [f64; 3],
    angle: f64,
}

impl Ellipsoid {
    /// Squared normalized radius; `<= 1` inside.
    fn rho2(&self, z: f64, y: f64, x: f64) -> f64 {
        let dz = (z - self.center[0]) / self.radii[0];
        let dy = y - self.center[1];
        let dx = x - self.center[2];
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.radii[1];
        let v = (-s * dx + c * dy) / self.radii[2];
        dz * dz + u * u + v * v
    }

    fn in_plane_radius(&self) -> f64 {
        self.radii[1].max(self.radii[2])
    }
}

#[derive(Clone, Copy, Debug)]
struct Disk {
    /// Centre in normalized in-plane coordinates (v, u) in [-1, 1].
    center: (f64, f64),
    radius: f64,
    hu: f64,
}

struct Anatomy {
    body: (f64, f64),
    bones: Vec<Disk>,
    airway: Disk,
}

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Anatomy {
            body: (rng.random_range(0.70..0.80), rng.random_range(0.82..0.90)),
            bones: vec![
                Disk {
                    center: (0.42, 0.0),
                    radius: rng.random_range(0.14..0.18),
                    hu: rng.random_range(550.0..750.0),
                },
                Disk {
                    center: (-0.05, -0.62),
                    radius: 0.06,
                    hu: rng.random_range(800.0..1000.0),
                },
                Disk {
                    center: (-0.05, 0.62),
                    radius: 0.06,
                    hu: rng.random_range(800.0..1000.0),
                },
            ],
            airway: Disk {
                center: (-0.28, rng.random_range(-0.05..0.05)),
                radius: rng.random_range(0.08..0.12),
                hu: -900.0,
            },
        }
    }

    fn inside_body(&self, v: f64, u: f64) -> bool {
        (v / self.body.0).powi(2) + (u / self.body.1).powi(2) <= 1.0
    }
}

fn normalized(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

/// Simple rejection placement of lesion-like ellipsoids inside soft tissue,
/// away from bones, airway and previously placed structures.
struct Placer<'a> {
    anatomy: &'a Anatomy,
    dims: [usize; 3],
    placed: Vec<Ellipsoid>,
}

impl Placer<'_> {
    fn place(
        &mut self,
        rng: &mut ChaCha8Rng,
        plane_radius: (f64, f64),
        depth_radius: (f64, f64),
    ) -> Option<Ellipsoid> {
        let [d, h, w] = self.dims;
        let (hf, wf) = (h as f64, w as f64);
        for _ in 0..500 {
            let a = rng.random_range(plane_radius.0..plane_radius.1) * wf;
            let b = a * rng.random_range(0.65..1.0);
            let c = (rng.random_range(depth_radius.0..depth_radius.1) * d as f64).max(1.0);
            if 2.0 * c + 2.0 > d as f64 {
                continue;
            }
            let zc = rng.random_range(c + 0.5..d as f64 - c - 0.5);
            let yc = rng.random_range(0.0..hf);
            let xc = rng.random_range(0.0..wf);
            let e = Ellipsoid {
                center: [zc, yc, xc],
                radii: [c, a, b],
                angle: rng.random_range(0.0..std::f64::consts::PI),
            };
            let margin = 2.0 + a;
            // every point within `margin` voxels must be soft tissue
            let v = |y: f64| (y / hf) * 2.0 - 1.0;
            let u = |x: f64| (x / wf) * 2.0 - 1.0;
            let ring_ok = (0..16).all(|k| {
                let t = k as f64 / 16.0 * std::f64::consts::TAU;
                let (py, px) = (yc + margin * t.sin(), xc + margin * t.cos());
                py >= 1.0
                    && px >= 1.0
                    && py < hf - 1.0
                    && px < wf - 1.0
                    && self.anatomy.inside_body(v(py), u(px))
            });
            if !ring_ok {
                continue;
            }
            let clear_of = |disk: &Disk| {
                let (dv, du) = (v(yc) - disk.center.0, u(xc) - disk.center.1);
                let dist = ((dv * hf / 2.0).powi(2) + (du * wf / 2.0).powi(2)).sqrt();
                dist > disk.radius * wf / 2.0 + margin
            };
            if !self.anatomy.bones.iter().all(clear_of) || !clear_of(&self.anatomy.airway) {
                continue;
            }
            let overlaps = self.placed.iter().any(|o| {
                let dy = o.center[1] - yc;
                let dx = o.center[2] - xc;
                let dz = (o.center[0] - zc).abs();
                let planar = (dy * dy + dx * dx).sqrt();
                planar < o.in_plane_radius() + a + 3.0 * PET_BLUR_SIGMA
                    && dz < o.radii[0] + c + 2.0
            });
            if overlaps {
                continue;
            }
            self.placed.push(e);
            return Some(e);
        }
        None
    }
}

/// Separable Gaussian blur with edge replication.
fn blur(values: &mut [f64], dims: [usize; 3], sigmas: [f64; 3]) {
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let sigma = sigmas[axis];
        if sigma <= 0.0 {
            continue;
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let n = dims[axis] as isize;
        let stride = strides[axis];
        let src = values.to_vec();
        for (flat, out) in values.iter_mut().enumerate() {
            let pos = (flat / stride) as isize % n;
            let base = flat - pos as usize * stride;
            let mut acc = 0.0;
            for (k, &wgt) in kernel.iter().enumerate() {
                let p = (pos + k as isize - radius).clamp(0, n - 1) as usize;
                acc += wgt * src[base + p * stride];
            }
            *out = acc / norm;
        }
    }
}

struct RawPhantom {
    ct: Vec<f32>,
    pet: Vec<f32>,
    gtv: Vec<u8>,
    nodes: Vec<u8>,
}

fn generate_one(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Result<RawPhantom> {
    let [d, h, w] = dims;
    let n = d * h * w;
    // Some anatomies leave no room for a tumour at small sizes; draw another.
    let (anatomy, gtv) = (0..ANATOMY_ATTEMPTS)
        .find_map(|_| {
            let anatomy = Anatomy::sample(rng);
            let mut placer = Placer {
                anatomy: &anatomy,
                dims,
                placed: Vec::new(),
            };
            let gtv = placer.place(rng, (0.06, 0.12), (0.12, 0.25))?;
            Some((anatomy, gtv))
        })
        .ok_or_else(|| Error::Data(format!("phantom dims {dims:?} leave no room for lesions")))?;
    let mut placer = Placer {
        anatomy: &anatomy,
        dims,
        placed: vec![gtv],
    };
    let node_count = rng.random_range(0..=2usize);
    let nodes: Vec<Ellipsoid> = (0..node_count)
        .filter_map(|_| placer.place(rng, (0.03, 0.05), (0.08, 0.12)))
        .collect();
    let mimic_count = rng.random_range(1..=2usize);
    let mimics: Vec<Ellipsoid> = (0..mimic_count)
        .filter_map(|_| placer.place(rng, (0.04, 0.10), (0.10, 0.22)))
        .collect();
    let hotspot = placer.place(rng, (0.04, 0.08), (0.10, 0.22));

    let contrast = rng.random_range(26.0..34.0);
    let lesion_uptake: Vec<(Ellipsoid, f64, f64)> = std::iter::once(gtv)
        .chain(nodes.iter().copied())
        .map(|e| (e, rng.random_range(4.0..7.0), rng.random_range(0.0..0.7)))
        .collect();
    let hotspot_uptake = hotspot.map(|e| (e, rng.random_range(3.0..6.0)));

    let ct_noise = Normal::new(0.0, CT_NOISE_HU).expect("positive sigma");
    let pet_noise = Normal::new(0.0, 0.12).expect("positive sigma");

    let mut ct = vec![0f32; n];
    let mut gtv_mask = vec![0u8; n];
    let mut node_mask = vec![0u8; n];
    let mut uptake = vec![0f64; n];
    let mut body = vec![false; n];
    for z in 0..d {
        for y in 0..h {
            let v = normalized(y, h);
            for x in 0..w {
                let u = normalized(x, w);
                let i = (z * h + y) * w + x;
                let (zf, yf, xf) = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                let mut hu = AIR_HU;
                if anatomy.inside_body(v, u) {
                    body[i] = true;
                    hu = SOFT_TISSUE_HU;
                    let in_disk = |disk: &Disk| {
                        (v - disk.center.0).powi(2) + (u - disk.center.1).powi(2)
                            <= disk.radius.powi(2)
                    };
                    if let Some(bone) = anatomy.bones.iter().find(|b| in_disk(b)) {
                        hu = bone.hu;
                    } else if in_disk(&anatomy.airway) {
                        hu = anatomy.airway.hu;
                    }
                }
                if gtv.rho2(zf, yf, xf) <= 1.0 {
                    gtv_mask[i] = 1;
                    hu = SOFT_TISSUE_HU + contrast;
                }
                if nodes.iter().any(|e| e.rho2(zf, yf, xf) <= 1.0) {
                    node_mask[i] = 1;
                    hu = SOFT_TISSUE_HU + contrast;
                }
                if mimics.iter().any(|e| e.rho2(zf, yf, xf) <= 1.0) {
                    hu = SOFT_TISSUE_HU + contrast;
                }
                for (e, amp, falloff) in &lesion_uptake {
                    let r2 = e.rho2(zf, yf, xf);
                    if r2 <= 1.0 {
                        uptake[i] += amp * (1.0 - falloff * r2);
                    }
                }
                if let Some((e, amp)) = &hotspot_uptake {
                    if e.rho2(zf, yf, xf) <= 1.0 {
                        uptake[i] += amp;
                    }
                }
                ct[i] = (hu + ct_noise.sample(rng)) as f32;
            }
        }
    }

    blur(&mut uptake, dims, [1.0, PET_BLUR_SIGMA, PET_BLUR_SIGMA]);
    let pet = uptake
        .iter()
        .zip(&body)
        .map(|(&up, &inside)| {
            let background = if inside { 1.0 } else { 0.1 };
            (background + up + pet_noise.sample(rng)).max(0.0) as f32
        })
        .collect();

    Ok(RawPhantom {
        ct,
        pet,
        gtv: gtv_mask,
        nodes: node_mask,
    })
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    let [d, h, w] = dims;
    if d < 4 || h < 32 || w < 32 || h % PHANTOM_SIZE_MULTIPLE != 0 || w % PHANTOM_SIZE_MULTIPLE != 0 {
        return Err(Error::InvalidArgument(format!(
            "phantom dims {dims:?}: need depth >= 4 and height/width >= 32, multiples of {PHANTOM_SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

/// T-stage 1..=4 from the quartiles of tumour volume across the cohort.
fn stages_from_volumes(volumes: &[usize]) -> Vec<u8> {
    let mut sorted = volumes.to_vec();
    sorted.sort_unstable();
    let q = |p: f64| sorted[((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
    let cuts = [q(0.25), q(0.5), q(0.75)];
    volumes
        .iter()
        .map(|&v| 1 + cuts.iter().filter(|&&c| v > c).count() as u8)
        .collect()
}

/// Deterministic cohort of `n_patients` phantoms named `P000`, `P001`, ...
pub fn generate_phantom_cohort(n_patients: usize, dims: [usize; 3], seed: u64) -> Result<Vec<PatientRecord>> {
    if n_patients < 3 {
        return Err(Error::InvalidArgument(format!(
            "a phantom cohort needs at least 3 patients, got {n_patients}"
        )));
    }
    check_dims(dims)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let raws = (0..n_patients)
        .map(|_| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.random());
            generate_one(dims, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let volumes: Vec<usize> = raws
        .iter()
        .map(|r| r.gtv.iter().filter(|&&v| v != 0).count())
        .collect();
    let stages = stages_from_volumes(&volumes);
    raws.into_iter()
        .zip(stages)
        .enumerate()
        .map(|(i, (raw, stage))| {
            PatientRecord::new(
                format!("P{i:03}"),
                stage,
                Volume::new(dims, raw.ct)?,
                Volume::new(dims, raw.pet)?,
                Mask::new(dims, raw.gtv)?,
                Mask::new(dims, raw.nodes)?,
            )
        })
        .collect()
}

/// Per-patient lesion statistics of a record.
pub fn lesion_stats(rec: &PatientRecord) -> Result<LesionStats> {
    let truth = rec.ground_truth()?;
    let positive = truth.count_positive();
    Ok(LesionStats {
        patient_id: rec.patient_id.clone(),
        t_stage: rec.t_stage,
        gtv_voxels: rec.gtv.count_positive(),
        node_count: count_components(&rec.nodes),
        positive_voxels: positive,
        positive_fraction: positive as f64 / truth.data().len() as f64,
    })
}

/// 6-connected components of a mask.
pub fn count_components(mask: &Mask) -> usize {
    let [d, h, w] = mask.dims();
    let mut seen = vec![false; mask.data().len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..seen.len() {
        if mask.data()[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut visit = |zz: usize, yy: usize, xx: usize| {
                let j = (zz * h + yy) * w + xx;
                if mask.data()[j] != 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if z > 0 {
                visit(z - 1, y, x);
            }
            if z + 1 < d {
                visit(z + 1, y, x);
            }
            if y > 0 {
                visit(z, y - 1, x);
            }
            if y + 1 < h {
                visit(z, y + 1, x);
            }
            if x > 0 {
                visit(z, y, x - 1);
            }
            if x + 1 < w {
                visit(z, y, x + 1);
            }
        }
    }
    count
}
