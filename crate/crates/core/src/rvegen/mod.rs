//! Procedural generation of paired (descriptor, microstructure, properties)
//! samples.
//!
//! Fibers are placed by random sequential addition in the unit square,
//! rendered as anti-aliased ellipses whose eccentricity encodes the
//! misalignment angle, and target properties come from a closed-form
//! surrogate anchored to the dataset's min/max statistics. Everything is
//! deterministic per seed; sample generation parallelizes across ids.

mod pgm;

pub use pgm::{read_pgm, write_pgm};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::util::derive_seed;
use crate::{Error, Result};

pub const VF_MIN: f64 = 0.31;
pub const VF_MAX: f64 = 0.65;
pub const MMA_MIN: f64 = 0.0;
pub const MMA_MAX: f64 = 4.97;
pub const YIELD_MIN: f64 = 13.0;
pub const YIELD_MAX: f64 = 2149.8;
pub const ELONGATION_MIN: f64 = 1.6e-4;
pub const ELONGATION_MAX: f64 = 0.02;
/// Reference fiber radius; reproduces the fiber-count extremes 13 and 26
/// over the volume-fraction range under rounding.
pub const R_F_REF: f64 = 0.0885;
pub const FIBER_INTENSITY: f64 = 1.0;
pub const BACKGROUND_INTENSITY: f64 = 0.1;
/// Fraction of the fiber radius two fibers may interpenetrate.
pub const DEFAULT_OVERLAP_TOL: f64 = 0.15;
pub const MAX_IMAGE_SIDE: usize = 224;

// Seed streams, so placement / angles / noise / descriptor draws never share
// a generator.
const STREAM_SAMPLE: u64 = 0x5a;
const STREAM_PLACE: u64 = 0x9c;
const STREAM_ANGLES: u64 = 0x3d;
const STREAM_NOISE: u64 = 0x71;
const STREAM_AZIMUTH: u64 = 0xe2;

/// Tabular descriptor of one composite sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Descriptor {
    pub vf: f64,
    pub mma: f64,
    pub fiber_count: usize,
}

impl Descriptor {
    /// Validates ranges and the fiber-count consistency invariant.
    pub fn new(vf: f64, mma: f64, r_f: f64) -> Result<Self> {
        if !(VF_MIN..=VF_MAX).contains(&vf) {
            return Err(Error::Domain(format!(
                "vf {vf} outside [{VF_MIN}, {VF_MAX}]"
            )));
        }
        if !(MMA_MIN..=MMA_MAX).contains(&mma) {
            return Err(Error::Domain(format!(
                "mma {mma} outside [{MMA_MIN}, {MMA_MAX}]"
            )));
        }
        let fiber_count = fiber_count(vf, r_f)?;
        Ok(Self {
            vf,
            mma,
            fiber_count,
        })
    }

    pub fn features(&self) -> [f64; 3] {
        [self.vf, self.mma, self.fiber_count as f64]
    }
}

/// Grayscale microstructure image, intensities in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Microstructure {
    pixels: Vec<f64>,
    height: usize,
    width: usize,
}

impl Microstructure {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width);
        assert!(
            pixels.iter().all(|p| (0.0..=1.0).contains(p)),
            "intensity out of [0,1]"
        );
        Self {
            pixels,
            height,
            width,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Fraction of pixels brighter than 0.5 (fiber coverage estimate).
    pub fn fiber_fraction(&self) -> f64 {
        let n = self.pixels.iter().filter(|&&p| p > 0.5).count();
        n as f64 / self.pixels.len() as f64
    }

    /// Snap intensities to the 8-bit grid used by the on-disk format, so
    /// in-memory samples and reloaded samples are identical.
    pub fn quantized(&self) -> Microstructure {
        let pixels = self
            .pixels
            .iter()
            .map(|&p| (p * 255.0).round() / 255.0)
            .collect();
        Microstructure {
            pixels,
            height: self.height,
            width: self.width,
        }
    }

    pub fn flip_horizontal(&mut self) {
        for row in self.pixels.chunks_mut(self.width) {
            row.reverse();
        }
    }

    pub fn flip_vertical(&mut self) {
        let (h, w) = (self.height, self.width);
        for i in 0..h / 2 {
            for j in 0..w {
                self.pixels.swap(i * w + j, (h - 1 - i) * w + j);
            }
        }
    }

    /// Rotate by `quarter_turns` * 90 degrees counter-clockwise (square only).
    pub fn rotated_quarter(&self, quarter_turns: usize) -> Microstructure {
        assert_eq!(self.height, self.width, "quarter rotation needs a square");
        let n = self.height;
        let mut out = self.pixels.clone();
        for _ in 0..quarter_turns % 4 {
            let src = out.clone();
            for i in 0..n {
                for j in 0..n {
                    out[(n - 1 - j) * n + i] = src[i * n + j];
                }
            }
        }
        Microstructure {
            pixels: out,
            height: n,
            width: n,
        }
    }

    /// Area-averaged downsample by an integer factor.
    pub fn downsample(&self, factor: usize) -> Microstructure {
        assert!(factor >= 1 && self.height % factor == 0 && self.width % factor == 0);
        let (h, w) = (self.height / factor, self.width / factor);
        let mut pixels = vec![0.0; h * w];
        let inv = 1.0 / (factor * factor) as f64;
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for di in 0..factor {
                    for dj in 0..factor {
                        s += self.at(i * factor + di, j * factor + dj);
                    }
                }
                pixels[i * w + j] = s * inv;
            }
        }
        Microstructure {
            pixels,
            height: h,
            width: w,
        }
    }
}

/// Target properties of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropertyVector {
    pub yield_strength: f64,
    pub elongation: f64,
}

impl PropertyVector {
    pub fn as_array(&self) -> [f64; 2] {
        [self.yield_strength, self.elongation]
    }
}

/// One paired sample.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: u64,
    pub descriptor: Descriptor,
    pub image: Microstructure,
    pub targets: PropertyVector,
    pub seed: u64,
}

/// Number of fibers implied by a volume fraction and fiber radius in the
/// unit-square window: round(vf / (pi r_f^2)).
pub fn fiber_count(vf: f64, r_f: f64) -> Result<usize> {
    if !(0.0..0.8).contains(&vf) {
        return Err(Error::Domain(format!("vf {vf} outside [0, 0.8)")));
    }
    if !(r_f > 0.0 && r_f < 0.5) {
        return Err(Error::Domain(format!("r_f {r_f} outside (0, 0.5)")));
    }
    Ok((vf / (std::f64::consts::PI * r_f * r_f)).round() as usize)
}

/// Random sequential addition of `n` fiber centers in the unit square with
/// pairwise center distance >= 2 r_f (1 - overlap_tol).
pub fn place_fibers(n: usize, r_f: f64, seed: u64) -> Result<Vec<(f64, f64)>> {
    place_fibers_with(n, r_f, DEFAULT_OVERLAP_TOL, 10_000 * n.max(1), seed)
}

pub fn place_fibers_with(
    n: usize,
    r_f: f64,
    overlap_tol: f64,
    max_attempts: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if r_f <= 0.0 {
        return Err(Error::Domain(format!("r_f {r_f} must be positive")));
    }
    let min_dist = 2.0 * r_f * (1.0 - overlap_tol);
    let min_dist2 = min_dist * min_dist;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while centers.len() < n {
        if attempts >= max_attempts {
            return Err(Error::PlacementFailure {
                n,
                r_f,
                attempts,
            });
        }
        attempts += 1;
        let c = (rng.gen::<f64>(), rng.gen::<f64>());
        let ok = centers
            .iter()
            .all(|&(x, y)| (x - c.0).powi(2) + (y - c.1).powi(2) >= min_dist2);
        if ok {
            centers.push(c);
        }
    }
    relax_overlaps(&mut centers, r_f);

    // Relaxation can only widen separations, but verify the contract.
    for i in 0..centers.len() {
        for j in 0..i {
            let d2 = (centers[i].0 - centers[j].0).powi(2)
                + (centers[i].1 - centers[j].1).powi(2);
            if d2 < min_dist2 * (1.0 - 1e-9) {
                return Err(Error::PlacementFailure {
                    n,
                    r_f,
                    attempts,
                });
            }
        }
    }
    Ok(centers)
}

/// Deterministic relaxation sweeps: hard pair repulsion toward full 2 r_f
/// separation plus a soft inward nudge away from the window edges. Both
/// reduce painted-area loss (fiber overlap and edge overhang) that the
/// seeding tolerance alone would leave at high volume fractions.
fn relax_overlaps(centers: &mut [(f64, f64)], r_f: f64) {
    let target = 2.0 * r_f;
    let target2 = target * target;
    for _sweep in 0..600 {
        let mut moved = false;
        for i in 0..centers.len() {
            for j in 0..i {
                let dx = centers[i].0 - centers[j].0;
                let dy = centers[i].1 - centers[j].1;
                let d2 = dx * dx + dy * dy;
                if d2 >= target2 {
                    continue;
                }
                let d = d2.sqrt();
                let (ux, uy) = if d > 1e-12 {
                    (dx / d, dy / d)
                } else {
                    // Coincident centers: split along a hashed direction.
                    let h = derive_seed(0x5E94, i as u64, j as u64);
                    let a = (h as f64 / u64::MAX as f64) * std::f64::consts::TAU;
                    (a.cos(), a.sin())
                };
                let push = 0.5 * (target - d) + 1e-9;
                centers[i].0 = (centers[i].0 + push * ux).clamp(0.0, 1.0);
                centers[i].1 = (centers[i].1 + push * uy).clamp(0.0, 1.0);
                centers[j].0 = (centers[j].0 - push * ux).clamp(0.0, 1.0);
                centers[j].1 = (centers[j].1 - push * uy).clamp(0.0, 1.0);
                moved = true;
            }
        }
        // Soft wall term: fibers overhanging the window drift inward when
        // pair pressure allows, recovering overhung area.
        for c in centers.iter_mut() {
            for coord in [&mut c.0, &mut c.1] {
                if *coord < r_f {
                    *coord += 0.3 * (r_f - *coord);
                    moved = true;
                } else if *coord > 1.0 - r_f {
                    *coord -= 0.3 * (*coord - (1.0 - r_f));
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
    // Final hard pass restores exact pair separation after the last nudge.
    for _sweep in 0..200 {
        let mut moved = false;
        for i in 0..centers.len() {
            for j in 0..i {
                let dx = centers[i].0 - centers[j].0;
                let dy = centers[i].1 - centers[j].1;
                let d2 = dx * dx + dy * dy;
                if d2 >= target2 {
                    continue;
                }
                let d = d2.sqrt();
                let (ux, uy) = if d > 1e-12 {
                    (dx / d, dy / d)
                } else {
                    (1.0, 0.0)
                };
                let push = 0.5 * (target - d) + 1e-9;
                centers[i].0 = (centers[i].0 + push * ux).clamp(0.0, 1.0);
                centers[i].1 = (centers[i].1 + push * uy).clamp(0.0, 1.0);
                centers[j].0 = (centers[j].0 - push * ux).clamp(0.0, 1.0);
                centers[j].1 = (centers[j].1 - push * uy).clamp(0.0, 1.0);
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

/// Signed misalignment angles (degrees) drawn from a normal law and rescaled
/// post hoc so the sample mean of |angle| equals `mma` exactly.
pub fn sample_angles(n: usize, mma: f64, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Domain("sample_angles needs n >= 1".into()));
    }
    if mma < 0.0 {
        return Err(Error::Domain(format!("mma {mma} must be >= 0")));
    }
    if mma == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut z: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let mut mean_abs = z.iter().map(|a| a.abs()).sum::<f64>() / n as f64;
    if mean_abs == 0.0 {
        // All-zero draw has probability zero; fall back to a constant.
        z = vec![1.0; n];
        mean_abs = 1.0;
    }
    let scale = mma / mean_abs;
    Ok(z.iter().map(|a| a * scale).collect())
}

/// Deterministic per-fiber major-axis direction (radians), uniform over the
/// half-turn. Rasterize takes no RNG, so the azimuth is hashed from the
/// fiber's index and center.
fn fiber_azimuth(index: usize, center: (f64, f64)) -> f64 {
    let h = derive_seed(
        STREAM_AZIMUTH,
        index as u64,
        center.0.to_bits() ^ center.1.to_bits().rotate_left(17),
    );
    (h as f64 / u64::MAX as f64) * std::f64::consts::PI
}

/// Render fibers as anti-aliased ellipses: minor radius r_f, major radius
/// r_f / cos(angle), fiber intensity 1.0 on background 0.1. Coverage is
/// estimated with a 4x4 subsample per pixel; overlapping fibers keep the
/// maximum coverage.
pub fn rasterize(
    centers: &[(f64, f64)],
    angles_deg: &[f64],
    r_f: f64,
    size: (usize, usize),
) -> Result<Microstructure> {
    let (h, w) = size;
    if h == 0 || w == 0 || h > MAX_IMAGE_SIDE || w > MAX_IMAGE_SIDE {
        return Err(Error::Domain(format!(
            "image size {size:?} outside (0, {MAX_IMAGE_SIDE}]"
        )));
    }
    if centers.len() != angles_deg.len() {
        return Err(Error::LengthMismatch(centers.len(), angles_deg.len()));
    }
    for &(x, y) in centers {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Domain(format!("center ({x}, {y}) outside unit square")));
        }
    }
    let mut coverage = vec![0.0f64; h * w];
    for (idx, (&(cx, cy), &angle)) in centers.iter().zip(angles_deg).enumerate() {
        let cos_a = angle.to_radians().cos().abs().max(1e-3);
        let minor = r_f * w as f64; // pixel units
        let major = minor / cos_a;
        let az = fiber_azimuth(idx, (cx, cy));
        let (dir_x, dir_y) = (az.cos(), az.sin());
        let px = cx * w as f64;
        let py = cy * h as f64;
        let reach = major + 1.0;
        let j0 = ((px - reach).floor().max(0.0)) as usize;
        let j1 = ((px + reach).ceil().min(w as f64)) as usize;
        let i0 = ((py - reach).floor().max(0.0)) as usize;
        let i1 = ((py + reach).ceil().min(h as f64)) as usize;
        for i in i0..i1 {
            for j in j0..j1 {
                let mut hit = 0u32;
                for si in 0..4 {
                    for sj in 0..4 {
                        let y = i as f64 + (si as f64 + 0.5) / 4.0 - py;
                        let x = j as f64 + (sj as f64 + 0.5) / 4.0 - px;
                        let u = (x * dir_x + y * dir_y) / major;
                        let v = (-x * dir_y + y * dir_x) / minor;
                        if u * u + v * v <= 1.0 {
                            hit += 1;
                        }
                    }
                }
                let c = hit as f64 / 16.0;
                let cell = &mut coverage[i * w + j];
                if c > *cell {
                    *cell = c;
                }
            }
        }
    }
    let pixels = coverage
        .iter()
        .map(|&c| BACKGROUND_INTENSITY + c * (FIBER_INTENSITY - BACKGROUND_INTENSITY))
        .collect();
    Ok(Microstructure::new(h, w, pixels))
}

/// Closed-form property surrogate anchored to the dataset extremes. The
/// realized mean absolute angle drives the misalignment term; for generated
/// samples it equals the descriptor's mma by construction.
pub fn surrogate_properties(
    descriptor: &Descriptor,
    angles_deg: &[f64],
    noise_seed: Option<u64>,
) -> PropertyVector {
    let mma = if angles_deg.is_empty() {
        descriptor.mma
    } else {
        angles_deg.iter().map(|a| a.abs()).sum::<f64>() / angles_deg.len() as f64
    };
    let vf_norm = (descriptor.vf - VF_MIN) / (VF_MAX - VF_MIN);
    let mut yield_strength =
        YIELD_MIN + (YIELD_MAX - YIELD_MIN) * vf_norm.powf(1.5) * (-0.3 * mma).exp();
    let mut elongation = ELONGATION_MIN
        + (ELONGATION_MAX - ELONGATION_MIN) * (1.0 - vf_norm).powf(1.2) * (-0.1 * mma).exp();
    if let Some(seed) = noise_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        yield_strength *= rng.gen_range(0.98..1.02);
        elongation *= rng.gen_range(0.98..1.02);
    }
    PropertyVector {
        yield_strength: yield_strength.clamp(YIELD_MIN, YIELD_MAX),
        elongation: elongation.clamp(ELONGATION_MIN, ELONGATION_MAX),
    }
}

/// Descriptor sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Uniform,
    Grid,
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub count: usize,
    pub seed: u64,
    pub image_size: (usize, usize),
    pub noise: bool,
    pub r_f: f64,
    pub sampling: Sampling,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 436,
            seed: 0,
            image_size: (64, 64),
            noise: true,
            r_f: R_F_REF,
            sampling: Sampling::Uniform,
        }
    }
}

fn descriptor_values(cfg: &GenConfig, id: u64) -> (f64, f64) {
    match cfg.sampling {
        Sampling::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SAMPLE, id));
            (
                rng.gen_range(VF_MIN..=VF_MAX),
                rng.gen_range(MMA_MIN..=MMA_MAX),
            )
        }
        Sampling::Grid => {
            // vf varies fastest so every mma row spans the full vf range.
            let cols = (cfg.count as f64).sqrt().ceil() as u64;
            let rows = (cfg.count as u64).div_ceil(cols);
            let col = id % cols;
            let row = id / cols;
            let vf = if cols == 1 {
                VF_MIN
            } else {
                VF_MIN + (VF_MAX - VF_MIN) * col as f64 / (cols - 1) as f64
            };
            let mma = if rows == 1 {
                MMA_MIN
            } else {
                MMA_MIN + (MMA_MAX - MMA_MIN) * row as f64 / (rows - 1) as f64
            };
            (vf, mma)
        }
    }
}

fn generate_one(cfg: &GenConfig, id: u64) -> Result<SamplePair> {
    let sample_seed = derive_seed(cfg.seed, STREAM_SAMPLE, id.wrapping_add(1));
    let (vf, mma) = descriptor_values(cfg, id);
    let descriptor = Descriptor::new(vf, mma, cfg.r_f)?;
    let n = descriptor.fiber_count;

    let mut centers = None;
    for attempt in 0..10u64 {
        match place_fibers(n, cfg.r_f, derive_seed(sample_seed, STREAM_PLACE, attempt)) {
            Ok(c) => {
                centers = Some(c);
                break;
            }
            Err(Error::PlacementFailure { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let centers = centers.ok_or(Error::PlacementFailure {
        n,
        r_f: cfg.r_f,
        attempts: 10 * 10_000 * n.max(1),
    })?;

    let angles = sample_angles(n.max(1), mma, derive_seed(sample_seed, STREAM_ANGLES, 0))?;
    let angles = &angles[..n];
    let image = rasterize(&centers, angles, cfg.r_f, cfg.image_size)?.quantized();
    let noise_seed = cfg
        .noise
        .then(|| derive_seed(sample_seed, STREAM_NOISE, 0));
    let targets = surrogate_properties(&descriptor, angles, noise_seed);
    Ok(SamplePair {
        id,
        descriptor,
        image,
        targets,
        seed: sample_seed,
    })
}

/// Generate `cfg.count` samples in memory. Parallel across ids and
/// deterministic per seed (each sample derives its own generator state).
pub fn generate_samples(cfg: &GenConfig) -> Result<Vec<SamplePair>> {
    if cfg.count == 0 {
        return Err(Error::Domain("count must be >= 1".into()));
    }
    (0..cfg.count as u64)
        .into_par_iter()
        .map(|id| generate_one(cfg, id))
        .collect()
}

/// Generate samples and write manifest + one PGM per sample under `dir`.
pub fn generate_dataset(cfg: &GenConfig, dir: &Path) -> Result<Vec<SamplePair>> {
    let samples = generate_samples(cfg)?;
    write_dataset(&samples, dir)?;
    Ok(samples)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.csv")
}

pub fn write_dataset(samples: &[SamplePair], dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let mut manifest = Vec::new();
    writeln!(
        manifest,
        "id,vf,mma,fiber_count,yield_strength,elongation,image_path,seed"
    )?;
    for s in samples {
        let rel = format!("images/{:05}.pgm", s.id);
        write_pgm(&dir.join(&rel), &s.image)?;
        writeln!(
            manifest,
            "{},{},{},{},{},{},{},{}",
            s.id,
            s.descriptor.vf,
            s.descriptor.mma,
            s.descriptor.fiber_count,
            s.targets.yield_strength,
            s.targets.elongation,
            rel,
            s.seed
        )?;
    }
    fs::write(manifest_path(dir), manifest)?;
    Ok(())
}

/// Load a dataset previously written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<SamplePair>> {
    let manifest = fs::read_to_string(manifest_path(dir))
        .map_err(|_| Error::MissingArtifact(manifest_path(dir).display().to_string()))?;
    let mut lines = manifest.lines();
    let header = lines.next().ok_or_else(|| {
        Error::Domain("manifest is empty".into())
    })?;
    if header != "id,vf,mma,fiber_count,yield_strength,elongation,image_path,seed" {
        return Err(Error::Domain(format!("unexpected manifest header: {header}")));
    }
    let mut samples = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(Error::Domain(format!("bad manifest row: {line}")));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Domain(format!("bad float {s} in manifest")))
        };
        let id: u64 = cols[0]
            .parse()
            .map_err(|_| Error::Domain(format!("bad id {}", cols[0])))?;
        let vf = parse_f(cols[1])?;
        let mma = parse_f(cols[2])?;
        let fiber_count: usize = cols[3]
            .parse()
            .map_err(|_| Error::Domain(format!("bad fiber_count {}", cols[3])))?;
        let image = read_pgm(&dir.join(cols[6]))?;
        samples.push(SamplePair {
            id,
            descriptor: Descriptor {
                vf,
                mma,
                fiber_count,
            },
            image,
            targets: PropertyVector {
                yield_strength: parse_f(cols[4])?,
                elongation: parse_f(cols[5])?,
            },
            seed: cols[7]
                .parse()
                .map_err(|_| Error::Domain(format!("bad seed {}", cols[7])))?,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests;
