//! Hyperspectral cubes, centered patch extraction, train/test splits and a
//! seeded synthetic scene generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::GradTensor;

/// A labeled scene. Reflectance is band-interleaved by pixel (`[H, W, D]`),
/// labels are `[H, W]` with 0 meaning unlabeled and `1..=n_classes` the classes.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub reflectance: Vec<f64>,
    pub labels: Vec<u32>,
    pub class_names: Vec<String>,
}

impl HsiCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        reflectance: Vec<f64>,
        labels: Vec<u32>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let cube = Self { height, width, bands, reflectance, labels, class_names };
        cube.validate()?;
        Ok(cube)
    }

    pub fn validate(&self) -> Result<()> {
        let pixels = self.height * self.width;
        if self.reflectance.len() != pixels * self.bands {
            return Err(Error::ShapeMismatch {
                axis: "reflectance",
                expected: pixels * self.bands,
                found: self.reflectance.len(),
            });
        }
        if self.labels.len() != pixels {
            return Err(Error::ShapeMismatch { axis: "labels", expected: pixels, found: self.labels.len() });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize > self.class_names.len()) {
            return Err(Error::LabelOutOfRange { label: bad as usize, classes: self.class_names.len() });
        }
        if !self.reflectance.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("reflectance contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    #[inline]
    pub fn spectrum(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.bands;
        &self.reflectance[start..start + self.bands]
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn labeled_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    /// Rescales all reflectance values to `[0, 1]` using the cube-wide min and max.
    pub fn normalize_min_max(&mut self) {
        let (lo, hi) =
            self.reflectance.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for v in &mut self.reflectance {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }

    /// Removes the listed band indices.
    pub fn drop_bands(&mut self, drop: &[usize]) -> Result<()> {
        if let Some(&b) = drop.iter().find(|&&b| b >= self.bands) {
            return Err(Error::InvalidConfig(format!("band {b} out of range for {} bands", self.bands)));
        }
        let keep: Vec<usize> = (0..self.bands).filter(|b| !drop.contains(b)).collect();
        let mut out = Vec::with_capacity(self.height * self.width * keep.len());
        for px in self.reflectance.chunks_exact(self.bands) {
            out.extend(keep.iter().map(|&b| px[b]));
        }
        self.bands = keep.len();
        self.reflectance = out;
        Ok(())
    }
}

/// Border handling for patches that overhang the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    /// Reflect about the edge pixel without repeating it.
    #[default]
    Mirror,
    Zero,
    /// Repeat the edge pixel.
    Edge,
}

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Patches laid out `[M, 1, D, n, n]`, one per labeled pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub bands: usize,
    pub n_classes: usize,
    pub patches: Vec<f64>,
    /// Zero-based class indices.
    pub labels: Vec<usize>,
    pub pixel_coords: Vec<(usize, usize)>,
    pub scene_ids: Vec<u32>,
}

impl PatchSet {
    pub fn empty(patch_size: usize, bands: usize, n_classes: usize) -> Self {
        Self {
            patch_size,
            bands,
            n_classes,
            patches: Vec::new(),
            labels: Vec::new(),
            pixel_coords: Vec::new(),
            scene_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn patch_len(&self) -> usize {
        self.bands * self.patch_size * self.patch_size
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let l = self.patch_len();
        &self.patches[i * l..(i + 1) * l]
    }

    /// Stacks the selected patches into an `[len, 1, D, n, n]` tensor.
    pub fn batch(&self, indices: &[usize]) -> GradTensor {
        let mut v = Vec::with_capacity(indices.len() * self.patch_len());
        for &i in indices {
            v.extend_from_slice(self.patch(i));
        }
        let n = self.patch_size;
        GradTensor::from_vec(&[indices.len(), 1, self.bands, n, n], v).expect("patch length is consistent")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.patch_size, self.bands, self.n_classes);
        for &i in indices {
            out.push(self.patch(i), self.labels[i], self.pixel_coords[i], self.scene_ids[i]);
        }
        out
    }

    fn push(&mut self, patch: &[f64], label: usize, coord: (usize, usize), scene: u32) {
        self.patches.extend_from_slice(patch);
        self.labels.push(label);
        self.pixel_coords.push(coord);
        self.scene_ids.push(scene);
    }

    /// Appends `other`, which must share patch size and band count.
    pub fn extend(&mut self, other: &PatchSet) -> Result<()> {
        if other.patch_size != self.patch_size || other.bands != self.bands {
            return Err(Error::ShapeMismatch { axis: "patch", expected: self.patch_len(), found: other.patch_len() });
        }
        self.n_classes = self.n_classes.max(other.n_classes);
        for i in 0..other.len() {
            self.push(other.patch(i), other.labels[i], other.pixel_coords[i], other.scene_ids[i]);
        }
        Ok(())
    }

    pub fn with_scene_id(mut self, id: u32) -> Self {
        self.scene_ids.fill(id);
        self
    }
}

/// One `n × n` patch per labeled pixel, centered on that pixel.
pub fn extract_patches(cube: &HsiCube, n: usize, pad: PadMode) -> Result<PatchSet> {
    if n == 0 || n.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("patch size must be odd, got {n}")));
    }
    cube.validate()?;
    let half = (n / 2) as isize;
    let mut set = PatchSet::empty(n, cube.bands, cube.n_classes());
    let mut buf = vec![0.0; set.patch_len()];
    for row in 0..cube.height {
        for col in 0..cube.width {
            let label = cube.label(row, col);
            if label == 0 {
                continue;
            }
            buf.fill(0.0);
            for dy in 0..n {
                for dx in 0..n {
                    let r = row as isize + dy as isize - half;
                    let c = col as isize + dx as isize - half;
                    let inside = (0..cube.height as isize).contains(&r) && (0..cube.width as isize).contains(&c);
                    let src = match (inside, pad) {
                        (true, _) => Some((r as usize, c as usize)),
                        (false, PadMode::Zero) => None,
                        (false, PadMode::Mirror) => Some((reflect(r, cube.height), reflect(c, cube.width))),
                        (false, PadMode::Edge) => Some((
                            r.clamp(0, cube.height as isize - 1) as usize,
                            c.clamp(0, cube.width as isize - 1) as usize,
                        )),
                    };
                    if let Some((sr, sc)) = src {
                        for (b, &v) in cube.spectrum(sr, sc).iter().enumerate() {
                            buf[(b * n + dy) * n + dx] = v;
                        }
                    }
                }
            }
            set.push(&buf, label as usize - 1, (row, col), 0);
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitPolicy {
    /// Class-stratified random split; each class sends `ceil(fraction · count)` to train.
    RandomFraction { fraction: f64, seed: u64 },
    /// Patches whose scene id is listed go to train, the rest to test.
    ByScene { train_scenes: Vec<u32> },
}

/// Disjoint, exhaustive train/test split. Both halves keep the original order.
pub fn split(set: &PatchSet, policy: &SplitPolicy) -> Result<(PatchSet, PatchSet)> {
    let mut train_mask = vec![false; set.len()];
    match policy {
        SplitPolicy::RandomFraction { fraction, seed } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(Error::InvalidConfig(format!("split fraction {fraction} not in [0, 1]")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for class in 0..set.n_classes {
                let mut idx: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == class).collect();
                idx.shuffle(&mut rng);
                let n_train = libm::ceil(fraction * idx.len() as f64) as usize;
                for &i in &idx[..n_train.min(idx.len())] {
                    train_mask[i] = true;
                }
            }
        }
        SplitPolicy::ByScene { train_scenes } => {
            for (m, s) in train_mask.iter_mut().zip(&set.scene_ids) {
                *m = train_scenes.contains(s);
            }
        }
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&i| train_mask[i]);
    Ok((set.subset(&train), set.subset(&test)))
}

/// Parameters of [`synth_scene`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub n_classes: usize,
    pub bands: usize,
    /// Scene is `size × size` pixels.
    pub size: usize,
    /// Scale of the class-specific spectral deviations.
    pub separation: f64,
    pub seed: u64,
    /// Standard deviation of the spatially smoothed additive noise.
    pub noise: f64,
}

impl SynthParams {
    pub fn new(n_classes: usize, bands: usize, size: usize, separation: f64, seed: u64) -> Self {
        Self { n_classes, bands, size, separation, seed, noise: 0.05 }
    }
}

fn gaussian_bump(b: f64, center: f64, width: f64) -> f64 {
    let z = (b - center) / width;
    libm::exp(-0.5 * z * z)
}

/// Smooth random spectrum: a sum of `count` Gaussians over the band axis.
fn random_bumps(
    rng: &mut ChaCha8Rng,
    bands: usize,
    count: usize,
    amp: (f64, f64),
    width: (f64, f64),
    signed: bool,
) -> Vec<f64> {
    let mut s = vec![0.0; bands];
    for _ in 0..count {
        let center = rng.random_range(0.0..bands as f64);
        let w = bands as f64 * rng.random_range(width.0..width.1);
        let mut a = rng.random_range(amp.0..amp.1);
        if signed && rng.random_bool(0.5) {
            a = -a;
        }
        for (b, v) in s.iter_mut().enumerate() {
            *v += a * gaussian_bump(b as f64, center, w);
        }
    }
    s
}

/// Seeded synthetic scene: Voronoi class regions, one smooth spectral signature
/// per class, spatially correlated noise, all pixels labeled, min-max scaled.
pub fn synth_scene(p: &SynthParams) -> Result<HsiCube> {
    if p.n_classes == 0 || p.bands == 0 || p.size == 0 {
        return Err(Error::InvalidConfig(format!("degenerate synthetic scene {p:?}")));
    }
    if !(p.separation >= 0.0 && p.noise >= 0.0) {
        return Err(Error::InvalidConfig("separation and noise must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (h, w, d) = (p.size, p.size, p.bands);

    let base: Vec<f64> =
        random_bumps(&mut rng, d, 3, (0.3, 1.0), (0.05, 0.25), false).into_iter().map(|v| v + 0.2).collect();
    let signatures: Vec<Vec<f64>> = (0..p.n_classes)
        .map(|_| {
            let delta = random_bumps(&mut rng, d, 2, (0.15, 0.3), (0.03, 0.1), true);
            base.iter().zip(&delta).map(|(b, e)| b + p.separation * e).collect()
        })
        .collect();

    let n_sites = (3 * p.n_classes).max(4);
    let sites: Vec<(f64, f64)> =
        (0..n_sites).map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64))).collect();
    let mut labels = vec![0u32; h * w];
    for r in 0..h {
        for c in 0..w {
            let nearest = sites
                .iter()
                .enumerate()
                .map(|(i, &(sr, sc))| {
                    let (dr, dc) = (sr - r as f64, sc - c as f64);
                    (i, dr * dr + dc * dc)
                })
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0;
            labels[r * w + c] = (nearest % p.n_classes) as u32 + 1;
        }
    }

    // White noise per band, then a 3×3 spatial box filter.
    let white: Vec<f64> = (0..h * w * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let illumination: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.95..1.05)).collect();
    let mut reflectance = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let sig = &signatures[labels[r * w + c] as usize - 1];
            for b in 0..d {
                let mut acc = 0.0;
                let mut count = 0.0;
                for rr in r.saturating_sub(1)..(r + 2).min(h) {
                    for cc in c.saturating_sub(1)..(c + 2).min(w) {
                        acc += white[(rr * w + cc) * d + b];
                        count += 1.0;
                    }
                }
                let noise = p.noise * 3.0 * acc / count;
                reflectance[(r * w + c) * d + b] = illumination[r * w + c] * sig[b] + noise;
            }
        }
    }
    let class_names = (1..=p.n_classes).map(|i| format!("class-{i}")).collect();
    let mut cube = HsiCube::new(h, w, d, reflectance, labels, class_names)?;
    cube.normalize_min_max();
    Ok(cube)
}
