//! Synthetic paired-contrast phantoms and the on-disk dataset format.
//!
//! A phantom is a tissue-label map built from random ellipses. Both
//! contrasts read the same label map through different intensity tables,
//! so their anatomy is shared exactly; each is then multiplied by its own
//! smooth bias field and normalized to `[0, 1]`.
//!
//! A "subject" is a set of ellipsoids; its slices are cross-sections at
//! neighbouring heights, so slices of one subject are strongly correlated
//! and splits must be made per subject.
//!
//! # Dataset layout
//!
//! A dataset directory holds `manifest.json` plus one raw file per slice and
//! contrast named `<contrast>_<index>.f32` (`T2_0003.f32`), each containing
//! `H*W` little-endian IEEE-754 single-precision values in row-major order.
//! Pixels are rounded to single precision at generation time, so saving and
//! loading is bit-exact.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Contrast, ImageSlice};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DTYPE_TAG: &str = "f32le";
pub const NORMALIZATION: &str = "per-slice maximum scaled to 1";

/// Intensity per tissue label. Label 0 is background, 1 the outer tissue.
const T2_LUT: [f64; 7] = [0.0, 0.35, 0.95, 0.6, 0.15, 0.8, 0.45];
const PD_LUT: [f64; 7] = [0.0, 0.8, 0.55, 0.95, 0.4, 0.25, 0.7];
const N_LABELS: u8 = T2_LUT.len() as u8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub n_ellipses: usize,
    pub seed: u64,
    pub bias_field_strength: f64,
}

impl PhantomSpec {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        PhantomSpec {
            height,
            width,
            n_ellipses: 8,
            seed,
            bias_field_strength: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Param(format!(
                "phantoms need at least 32x32 pixels, got {}x{}",
                self.height, self.width
            )));
        }
        if self.n_ellipses < 1 {
            return Err(Error::Param("n_ellipses must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.bias_field_strength) {
            return Err(Error::Param(format!(
                "bias_field_strength must be in [0, 1), got {}",
                self.bias_field_strength
            )));
        }
        Ok(())
    }
}

/// Ellipsoid in normalized coordinates `[-1, 1]^3`.
#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    cy: f64,
    cx: f64,
    cz: f64,
    ay: f64,
    ax: f64,
    az: f64,
    angle: f64,
    label: u8,
}

impl Ellipsoid {
    fn contains(&self, y: f64, x: f64, z: f64) -> bool {
        let dz = (z - self.cz) / self.az;
        let scale = 1.0 - dz * dz;
        if scale <= 0.0 {
            return false;
        }
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (c * dx + s * dy) / self.ax;
        let v = (-s * dx + c * dy) / self.ay;
        u * u + v * v <= scale
    }
}

fn subject_ellipsoids(spec: &PhantomSpec) -> Vec<Ellipsoid> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = vec![Ellipsoid {
        cy: 0.0,
        cx: 0.0,
        cz: 0.0,
        ay: rng.random_range(0.8..0.92),
        ax: rng.random_range(0.65..0.8),
        az: 4.0,
        angle: rng.random_range(-0.1..0.1),
        label: 1,
    }];
    for k in 0..spec.n_ellipses {
        out.push(Ellipsoid {
            cy: rng.random_range(-0.5..0.5),
            cx: rng.random_range(-0.4..0.4),
            cz: rng.random_range(-0.3..0.3),
            ay: rng.random_range(0.08..0.35),
            ax: rng.random_range(0.06..0.3),
            az: rng.random_range(0.8..1.6),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            label: 2 + (k % (N_LABELS as usize - 2)) as u8,
        });
    }
    out
}

/// Label map of the cross-section at normalized height `z`; later
/// ellipses paint over earlier ones.
fn label_map(spec: &PhantomSpec, ellipsoids: &[Ellipsoid], z: f64) -> Array2<u8> {
    let (h, w) = (spec.height, spec.width);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let y = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
        let x = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
        ellipsoids
            .iter()
            .rev()
            .find(|e| e.contains(y, x, z))
            .map_or(0, |e| e.label)
    })
}

/// Smooth multiplicative field `1 + s * p(y, x)` with a random quadratic `p`
/// bounded by one in magnitude on the image.
fn bias_field(rng: &mut ChaCha8Rng, h: usize, w: usize, strength: f64) -> Array2<f64> {
    let c: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let norm = c.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let y = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
        let x = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
        let p = c[0] * y + c[1] * x + c[2] * x * y + c[3] * (y * y - 0.5) + c[4] * (x * x - 0.5);
        1.0 + strength * p / norm
    })
}

fn render(labels: &Array2<u8>, lut: &[f64], bias: &Array2<f64>, contrast: Contrast) -> ImageSlice {
    let mut img = ImageSlice::new(
        ndarray::Zip::from(labels).and(bias).map_collect(|&l, &b| lut[l as usize] * b),
        contrast,
    );
    img.normalize_max();
    img.pixels.mapv_inplace(|v| v as f32 as f64);
    img
}

/// A generated pair together with the label map both contrasts were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub t2: ImageSlice,
    pub pd: ImageSlice,
    pub labels: Array2<u8>,
}

impl PhantomPair {
    pub fn contrast(&self, c: Contrast) -> &ImageSlice {
        match c {
            Contrast::T2 => &self.t2,
            Contrast::PD => &self.pd,
        }
    }
}

fn phantom_slice(spec: &PhantomSpec, ellipsoids: &[Ellipsoid], z: f64, slice: u64) -> PhantomPair {
    let labels = label_map(spec, ellipsoids, z);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(slice + 1);
    let b_t2 = bias_field(&mut rng, spec.height, spec.width, spec.bias_field_strength);
    let b_pd = bias_field(&mut rng, spec.height, spec.width, spec.bias_field_strength);
    PhantomPair {
        t2: render(&labels, &T2_LUT, &b_t2, Contrast::T2),
        pd: render(&labels, &PD_LUT, &b_pd, Contrast::PD),
        labels,
    }
}

/// Label map of the central slice for `spec`.
pub fn phantom_labels(spec: &PhantomSpec) -> Result<Array2<u8>> {
    spec.validate()?;
    Ok(label_map(spec, &subject_ellipsoids(spec), 0.0))
}

/// The central slice of the subject seeded by `spec.seed`.
pub fn generate_phantom_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    Ok(phantom_slice(spec, &subject_ellipsoids(spec), 0.0, 0))
}

/// `n_slices` neighbouring cross-sections of one subject, centred on `z = 0`.
pub fn generate_subject(spec: &PhantomSpec, n_slices: usize) -> Result<Vec<PhantomPair>> {
    spec.validate()?;
    let ellipsoids = subject_ellipsoids(spec);
    Ok((0..n_slices)
        .map(|s| {
            let z = 0.08 * (s as f64 - (n_slices as f64 - 1.0) / 2.0);
            let slice = if n_slices == 1 { 0 } else { s as u64 };
            phantom_slice(spec, &ellipsoids, z, slice)
        })
        .collect())
}

/// One paired slice of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSlice {
    pub subject: usize,
    pub t2: ImageSlice,
    pub pd: ImageSlice,
}

impl DatasetSlice {
    pub fn contrast(&self, c: Contrast) -> &ImageSlice {
        match c {
            Contrast::T2 => &self.t2,
            Contrast::PD => &self.pd,
        }
    }
}

/// `n_subjects` phantom subjects of `slices_per_subject` slices each.
/// Subject `s` is seeded with a value derived from `(seed, s)`.
pub fn simulate_dataset(
    n_subjects: usize,
    slices_per_subject: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<DatasetSlice>> {
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_subjects * slices_per_subject);
    for subject in 0..n_subjects {
        let spec = PhantomSpec::new(height, width, seeder.random());
        for pair in generate_subject(&spec, slices_per_subject)? {
            out.push(DatasetSlice {
                subject,
                t2: pair.t2,
                pd: pair.pd,
            });
        }
    }
    Ok(out)
}

/// Subject-wise split into train / validation / test slice indices. Subjects
/// are shuffled with `seed`; the validation and test sets each get
/// `round(fraction * n_subjects)` subjects (at least one when the fraction is
/// positive), the rest go to training.
pub fn subject_split(
    slices: &[DatasetSlice],
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) || !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Param("split fractions must be in [0, 1)".into()));
    }
    let mut subjects: Vec<usize> = slices.iter().map(|s| s.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let count = |f: f64| if f > 0.0 { ((f * subjects.len() as f64).round() as usize).max(1) } else { 0 };
    let (n_val, n_test) = (count(val_fraction), count(test_fraction));
    if n_val + n_test >= subjects.len() {
        return Err(Error::Param(format!(
            "{} subjects cannot fill {n_val} validation and {n_test} test subjects plus training",
            subjects.len()
        )));
    }
    let val = &subjects[..n_val];
    let test = &subjects[n_val..n_val + n_test];
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (i, s) in slices.iter().enumerate() {
        if val.contains(&s.subject) {
            va.push(i);
        } else if test.contains(&s.subject) {
            te.push(i);
        } else {
            tr.push(i);
        }
    }
    Ok((tr, va, te))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub subject: usize,
    /// File name per contrast, in the order of [`DatasetManifest::contrasts`].
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub contrasts: Vec<Contrast>,
    pub dtype: String,
    pub normalization: String,
    pub slices: Vec<ManifestEntry>,
}

fn file_name(c: Contrast, index: usize) -> String {
    format!("{}_{index:04}.f32", c.name())
}

fn write_f32(path: &Path, img: &ImageSlice) -> Result<()> {
    let bytes: Vec<u8> = img.pixels.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, h: usize, w: usize, contrast: Contrast) -> Result<ImageSlice> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != h * w * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {h}x{w} f32, found {}", h * w * 4, bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let pixels = Array2::from_shape_vec((h, w), values).expect("length checked");
    Ok(ImageSlice::new(pixels, contrast))
}

/// Write every slice and the manifest into `dir` (created if missing).
pub fn save_dataset(slices: &[DatasetSlice], dir: &Path) -> Result<DatasetManifest> {
    let (height, width) = slices.first().map_or((0, 0), |s| s.t2.dim());
    for s in slices {
        if s.t2.dim() != (height, width) || s.pd.dim() != (height, width) {
            return Err(Error::Shape(format!(
                "dataset slices must all be {height}x{width}, got {:?} / {:?}",
                s.t2.dim(),
                s.pd.dim()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let contrasts = vec![Contrast::T2, Contrast::PD];
    let mut entries = Vec::with_capacity(slices.len());
    for (index, s) in slices.iter().enumerate() {
        let files: Vec<String> = contrasts.iter().map(|&c| file_name(c, index)).collect();
        for (&c, name) in contrasts.iter().zip(&files) {
            write_f32(&dir.join(name), s.contrast(c))?;
        }
        entries.push(ManifestEntry {
            index,
            subject: s.subject,
            files,
        });
    }
    let manifest = DatasetManifest {
        count: slices.len(),
        height,
        width,
        contrasts,
        dtype: DTYPE_TAG.into(),
        normalization: NORMALIZATION.into(),
        slices: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Vec<DatasetSlice>, DatasetManifest)> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        let empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if empty {
            return Err(Error::EmptyManifest(dir.to_path_buf()));
        }
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.count == 0 || manifest.slices.is_empty() {
        return Err(Error::EmptyManifest(dir.to_path_buf()));
    }
    if manifest.count != manifest.slices.len() {
        return Err(Error::format(
            &path,
            format!("count {} but {} slice entries", manifest.count, manifest.slices.len()),
        ));
    }
    if manifest.dtype != DTYPE_TAG {
        return Err(Error::format(&path, format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let t2_pos = manifest.contrasts.iter().position(|&c| c == Contrast::T2);
    let pd_pos = manifest.contrasts.iter().position(|&c| c == Contrast::PD);
    let (Some(t2_pos), Some(pd_pos)) = (t2_pos, pd_pos) else {
        return Err(Error::format(&path, "manifest must list both T2 and PD"));
    };
    let (h, w) = (manifest.height, manifest.width);
    let mut slices = Vec::with_capacity(manifest.count);
    for entry in &manifest.slices {
        if entry.files.len() != manifest.contrasts.len() {
            return Err(Error::format(&path, format!("slice {} lists {} files", entry.index, entry.files.len())));
        }
        slices.push(DatasetSlice {
            subject: entry.subject,
            t2: read_f32(&dir.join(&entry.files[t2_pos]), h, w, Contrast::T2)?,
            pd: read_f32(&dir.join(&entry.files[pd_pos]), h, w, Contrast::PD)?,
        });
    }
    Ok((slices, manifest))
}
