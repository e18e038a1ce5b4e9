//! Deterministic procedural toy scenes: a labeled bright "day" source domain
//! and a dark "night" target domain that differ only in style for equal seeds.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::stylize;

pub const NUM_CLASSES: usize = 5;
pub const SCENE_SIZE: usize = 64;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["sky", "ground", "disk", "box", "wedge"];

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer; bijective on u64.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named substream of a master seed.
pub fn substream(master_seed: u64, name: &str) -> u64 {
    let mut h = master_seed;
    for &b in name.as_bytes() {
        h = splitmix64(h ^ b as u64);
    }
    h
}

/// Per-sample seed: splitmix-style hash of (master_seed, index).
pub fn sample_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed.wrapping_add((index + 1).wrapping_mul(GOLDEN)))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Image,
    pub labels: LabelMap,
    pub domain: Domain,
    pub seed: u64,
}

// bright per-class palette for the source domain
const PALETTE: [[f64; 3]; NUM_CLASSES] = [
    [0.55, 0.75, 0.95], // sky
    [0.45, 0.55, 0.35], // ground
    [0.90, 0.25, 0.20], // disk
    [0.95, 0.85, 0.25], // box
    [0.80, 0.30, 0.85], // wedge
];

fn paint_disk(labels: &mut LabelMap, cx: i64, cy: i64, r: i64, class: u8) {
    for y in (cy - r).max(0)..(cy + r + 1).min(SCENE_SIZE as i64) {
        for x in (cx - r).max(0)..(cx + r + 1).min(SCENE_SIZE as i64) {
            if (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r {
                labels.set(y as usize, x as usize, class);
            }
        }
    }
}

fn paint_box(labels: &mut LabelMap, cx: i64, cy: i64, rx: i64, ry: i64, class: u8) {
    for y in (cy - ry).max(0)..(cy + ry + 1).min(SCENE_SIZE as i64) {
        for x in (cx - rx).max(0)..(cx + rx + 1).min(SCENE_SIZE as i64) {
            labels.set(y as usize, x as usize, class);
        }
    }
}

fn paint_wedge(labels: &mut LabelMap, cx: i64, top: i64, height: i64, class: u8) {
    // isoceles triangle, apex at (cx, top), widening downward
    for dy in 0..height {
        let y = top + dy;
        if !(0..SCENE_SIZE as i64).contains(&y) {
            continue;
        }
        let half = dy;
        for x in (cx - half).max(0)..(cx + half + 1).min(SCENE_SIZE as i64) {
            labels.set(y as usize, x as usize, class);
        }
    }
}

fn gen_labels(seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ substream(0, "geom")));
    let mut labels = LabelMap::filled(SCENE_SIZE, SCENE_SIZE, 0);
    let horizon = rng.gen_range(24..40);
    for y in horizon..SCENE_SIZE {
        for x in 0..SCENE_SIZE {
            labels.set(y, x, 1);
        }
    }
    let n_shapes = rng.gen_range(3..=6);
    for _ in 0..n_shapes {
        let kind = rng.gen_range(0..3u8);
        let cx = rng.gen_range(6..SCENE_SIZE as i64 - 6);
        let cy = rng.gen_range(10..SCENE_SIZE as i64 - 6);
        let size = rng.gen_range(4..11i64);
        match kind {
            0 => paint_disk(&mut labels, cx, cy, size, 2),
            1 => {
                let ry = rng.gen_range(3..9i64);
                paint_box(&mut labels, cx, cy, size, ry, 3)
            }
            _ => paint_wedge(&mut labels, cx, cy - size, 2 * size, 4),
        }
    }
    labels
}

/// Generate one scene. Geometry (labels) depends only on the seed; the
/// domain drives style only, so labels are identical across domains.
pub fn gen_scene(seed: u64, domain: Domain) -> Scene {
    let labels = gen_labels(seed);
    let mut style_rng = ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ substream(domain as u64 + 1, "style"),
    ));
    let hw = SCENE_SIZE * SCENE_SIZE;
    let mut img = Image::zeros(SCENE_SIZE, SCENE_SIZE);
    match domain {
        Domain::Source => {
            let gain = style_rng.gen_range(0.9..1.1);
            let sigma = 0.02;
            for p in 0..hw {
                let class = labels.data()[p] as usize;
                for c in 0..3 {
                    let v = PALETTE[class][c] * gain + gauss(&mut style_rng) * sigma;
                    img.data_mut()[c * hw + p] = v;
                }
            }
        }
        Domain::Target => {
            // Night style: a per-scene affine transform of the day palette in
            // the decorrelated lαβ color space — a luminance drop plus strong
            // random casts on both opponent-color channels. Exposure and cast
            // differ scene to scene, so raw color is not a stable class cue
            // in this domain, while the shift stays inside the transform
            // family that global color-transfer stylization can express.
            let d_l = style_rng.gen_range(-0.70..-0.45);
            let s_l = style_rng.gen_range(0.95..1.05);
            let s_a = style_rng.gen_range(0.85..1.10);
            let d_a = style_rng.gen_range(-0.05..0.05);
            let s_b = style_rng.gen_range(0.85..1.10);
            let d_b = style_rng.gen_range(-0.06..0.02);
            let night: Vec<[f64; 3]> = PALETTE
                .iter()
                .map(|&rgb| {
                    let lab = stylize::lab_from_rgb_px(rgb);
                    stylize::rgb_from_lab_px([
                        s_l * lab[0] + d_l,
                        s_a * lab[1] + d_a,
                        s_b * lab[2] + d_b,
                    ])
                })
                .collect();
            let gain = style_rng.gen_range(0.9..1.1);
            let sigma = 0.03;
            for p in 0..hw {
                let class = labels.data()[p] as usize;
                for c in 0..3 {
                    let v = night[class][c] * gain + gauss(&mut style_rng) * sigma;
                    img.data_mut()[c * hw + p] = v;
                }
            }
        }
    }
    img.clamp_unit();
    Scene {
        image: img,
        labels,
        domain,
        seed,
    }
}

/// Box-Muller standard normal draw.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetVal,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::TargetVal => "target_val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source_train" => Ok(Split::SourceTrain),
            "target_train" => Ok(Split::TargetTrain),
            "target_val" => Ok(Split::TargetVal),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }

    pub fn domain(&self) -> Domain {
        match self {
            Split::SourceTrain => Domain::Source,
            _ => Domain::Target,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub split: Split,
    pub seed: u64,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.split.name(),
                e.seed,
                e.image_path.display(),
                e.label_path.display()
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Data(format!("manifest line {}: expected 4 fields", i + 1)));
            }
            entries.push(ManifestEntry {
                split: Split::parse(parts[0])?,
                seed: parts[1]
                    .parse()
                    .map_err(|_| Error::Data(format!("manifest line {}: bad seed", i + 1)))?,
                image_path: PathBuf::from(parts[2]),
                label_path: PathBuf::from(parts[3]),
            });
        }
        Ok(Manifest { entries })
    }
}

/// Generate the dataset on disk: disjoint seed ranges per split, images as
/// PPM, labels as PGM. Target-train labels land in a `heldout/` directory and
/// are refused by the loader.
pub fn build_splits(
    master_seed: u64,
    n_src_train: usize,
    n_tgt_train: usize,
    n_val: usize,
    dir: &Path,
) -> Result<Manifest> {
    if n_src_train < 1 || n_tgt_train < 1 || n_val < 1 {
        return Err(Error::Config("split sizes must be >= 1".into()));
    }
    for sub in ["images", "labels", "heldout"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::new();
    let mut index = 0u64;
    let mut push = |split: Split, count: usize, index: &mut u64| -> Result<()> {
        for i in 0..count {
            let seed = sample_seed(master_seed, *index);
            *index += 1;
            let stem = format!("{}_{:04}", split.name(), i);
            let image_path = PathBuf::from("images").join(format!("{stem}.ppm"));
            let label_dir = if split == Split::TargetTrain {
                "heldout"
            } else {
                "labels"
            };
            let label_path = PathBuf::from(label_dir).join(format!("{stem}.pgm"));
            let scene = gen_scene(seed, split.domain());
            scene.image.write_ppm(&dir.join(&image_path))?;
            scene.labels.write_pgm(&dir.join(&label_path))?;
            entries.push(ManifestEntry {
                split,
                seed,
                image_path,
                label_path,
            });
        }
        Ok(())
    };
    push(Split::SourceTrain, n_src_train, &mut index)?;
    push(Split::TargetTrain, n_tgt_train, &mut index)?;
    push(Split::TargetVal, n_val, &mut index)?;
    let manifest = Manifest { entries };
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest.to_text()).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// In-memory dataset. Target-train labels are never loaded; requesting them
/// is a data error (the label-access firewall).
pub struct Dataset {
    root: PathBuf,
    entries: Vec<(ManifestEntry, Image, Option<LabelMap>)>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest = Manifest::parse(&text)?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            let image = Image::read_ppm(&dir.join(&e.image_path))?;
            let labels = if e.split == Split::TargetTrain {
                None
            } else {
                Some(LabelMap::read_pgm(&dir.join(&e.label_path))?)
            };
            entries.push((e, image, labels));
        }
        Ok(Dataset {
            root: dir.to_path_buf(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, (e, _, _))| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn image(&self, idx: usize) -> &Image {
        &self.entries[idx].1
    }

    pub fn entry(&self, idx: usize) -> &ManifestEntry {
        &self.entries[idx].0
    }

    /// Labels of an entry; refused for target-train scenes.
    pub fn labels(&self, idx: usize) -> Result<&LabelMap> {
        let (entry, _, labels) = &self.entries[idx];
        if entry.split == Split::TargetTrain {
            return Err(Error::Data(format!(
                "labels of target-train scene (seed {}) are held out from training",
                entry.seed
            )));
        }
        labels.as_ref().ok_or_else(|| {
            Error::Data(format!("labels missing for seed {}", entry.seed))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_identical_across_domains() {
        let s = gen_scene(7, Domain::Source);
        let t = gen_scene(7, Domain::Target);
        assert_eq!(s.labels, t.labels);
        assert_ne!(s.image, t.image);
    }

    #[test]
    fn scene_is_deterministic() {
        let a = gen_scene(123, Domain::Target);
        let b = gen_scene(123, Domain::Target);
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn scene_invariants() {
        for seed in 0..20 {
            let s = gen_scene(seed, Domain::Source);
            let mut present = [false; NUM_CLASSES];
            for &l in s.labels.data() {
                assert!((l as usize) < NUM_CLASSES);
                present[l as usize] = true;
            }
            assert!(
                present.iter().filter(|&&p| p).count() >= 3,
                "seed {seed} has < 3 classes"
            );
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn class_histogram_over_100_seeds() {
        let mut counts = [0usize; NUM_CLASSES];
        for seed in 0..100 {
            let s = gen_scene(seed, Domain::Source);
            let mut present = [false; NUM_CLASSES];
            for &l in s.labels.data() {
                present[l as usize] = true;
            }
            for (c, p) in counts.iter_mut().zip(present) {
                if p {
                    *c += 1;
                }
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!(c >= 60, "class {} ({}) present in only {c}/100 scenes", i, CLASS_NAMES[i]);
        }
    }

    #[test]
    fn domain_gap_in_mean_intensity() {
        let mut src_mean = 0.0;
        let mut tgt_mean = 0.0;
        for seed in 0..100 {
            src_mean += gen_scene(seed, Domain::Source).image.mean();
            tgt_mean += gen_scene(seed, Domain::Target).image.mean();
        }
        assert!(tgt_mean < 0.55 * src_mean);
    }

    #[test]
    fn build_splits_deterministic_and_disjoint() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let m1 = build_splits(99, 4, 3, 2, dir1.path()).unwrap();
        let _m2 = build_splits(99, 4, 3, 2, dir2.path()).unwrap();
        assert_eq!(m1.entries.len(), 9);
        let mut seeds: Vec<u64> = m1.entries.iter().map(|e| e.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 9, "seeds must be distinct");
        let t1 = fs::read(dir1.path().join("manifest.txt")).unwrap();
        let t2 = fs::read(dir2.path().join("manifest.txt")).unwrap();
        assert_eq!(t1, t2, "manifest must be byte-identical across runs");
    }

    #[test]
    fn target_train_labels_are_firewalled() {
        let dir = tempfile::tempdir().unwrap();
        build_splits(7, 2, 2, 1, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let tgt = ds.indices(Split::TargetTrain);
        assert!(!tgt.is_empty());
        for idx in tgt {
            assert!(ds.labels(idx).is_err());
        }
        for idx in ds.indices(Split::SourceTrain) {
            assert!(ds.labels(idx).is_ok());
        }
        for idx in ds.indices(Split::TargetVal) {
            assert!(ds.labels(idx).is_ok());
        }
    }
}
