//! Labeled image sets stored as a directory of VTF1 files plus `labels.csv`
//! (`filename,label`), and the procedural shapes generator.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{read_tensor, write_tensor, Tensor, TensorError};

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("unsupported generator setting: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// First `n` samples (or all of them).
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir)?;
        let mut csv = String::from("filename,label\n");
        for s in &self.samples {
            let name = format!("{}.vtf", s.id);
            let mut w = BufWriter::new(File::create(dir.join(&name))?);
            write_tensor(&mut w, &s.image)?;
            w.flush()?;
            csv.push_str(&format!("{name},{}\n", s.label));
        }
        fs::write(dir.join(LABELS_FILE), csv)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, DatasetError> {
        let labels_path = dir.join(LABELS_FILE);
        let text = fs::read_to_string(&labels_path)?;
        let malformed = |reason: String| DatasetError::Malformed {
            path: labels_path.display().to_string(),
            reason,
        };
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("filename")) {
                continue;
            }
            let (file, label) = line
                .split_once(',')
                .ok_or_else(|| malformed(format!("line {}: expected filename,label", lineno + 1)))?;
            let label: usize = label
                .trim()
                .parse()
                .map_err(|_| malformed(format!("line {}: bad label {label:?}", lineno + 1)))?;
            let file = file.trim();
            let image = read_tensor(&mut BufReader::new(File::open(dir.join(file))?))?;
            let id = file.strip_suffix(".vtf").unwrap_or(file).to_string();
            samples.push(Sample { id, image, label });
        }
        Ok(Dataset { samples })
    }
}

/// Settings for [`generate_shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct ShapesSpec {
    pub side: usize,
    pub channels: usize,
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Prefix of the generated sample ids.
    pub prefix: String,
}

/// Names of the procedural classes, in label order.
pub const SHAPE_CLASSES: [&str; 10] = [
    "disk", "square", "triangle", "h-stripes", "v-stripes", "d-stripes", "checker", "plus",
    "ring", "cross",
];

/// Generates `classes × per_class` images in `[0,1]`, labels cycling
/// `0, 1, …, classes-1`. Each image is a bright shape or texture on a dark
/// background with random colors, placement, scale and pixel noise.
pub fn generate_shapes(spec: &ShapesSpec) -> Result<Dataset, DatasetError> {
    if spec.classes == 0 || spec.classes > SHAPE_CLASSES.len() {
        return Err(DatasetError::Unsupported(format!(
            "{} classes (1..={} available)",
            spec.classes,
            SHAPE_CLASSES.len()
        )));
    }
    if spec.side < 8 || spec.channels == 0 {
        return Err(DatasetError::Unsupported(format!(
            "{}×{} images with {} channels",
            spec.side, spec.side, spec.channels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 0.04).unwrap();
    let s = spec.side;
    let sf = s as f64;
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for i in 0..spec.classes * spec.per_class {
        let label = i % spec.classes;
        let bg: Vec<f64> = (0..spec.channels).map(|_| rng.gen_range(0.0..0.35)).collect();
        let fg: Vec<f64> = (0..spec.channels).map(|_| rng.gen_range(0.6..1.0)).collect();
        let cx = rng.gen_range(0.35..0.65) * sf;
        let cy = rng.gen_range(0.35..0.65) * sf;
        let r = rng.gen_range(0.18..0.3) * sf;
        let period = rng.gen_range(4..=8) as f64;
        let phase = rng.gen_range(0.0..period);
        let inside = |x: f64, y: f64| -> bool {
            let (dx, dy) = (x - cx, y - cy);
            let band = |t: f64| ((t + phase) / (period / 2.0)).floor().rem_euclid(2.0) == 0.0;
            match label {
                0 => dx.hypot(dy) <= r,
                1 => dx.abs() <= r && dy.abs() <= r,
                2 => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
                3 => band(y),
                4 => band(x),
                5 => band((x + y) / std::f64::consts::SQRT_2),
                6 => band(x) == band(y),
                7 => {
                    let w = r / 3.0;
                    (dx.abs() <= w && dy.abs() <= r) || (dy.abs() <= w && dx.abs() <= r)
                }
                8 => {
                    let d = dx.hypot(dy);
                    d <= r && d >= r * 0.6
                }
                _ => {
                    let w = r / 4.0;
                    dx.abs() <= r && dy.abs() <= r && ((dx - dy).abs() <= w || (dx + dy).abs() <= w)
                }
            }
        };
        let mut data = vec![0.0; spec.channels * s * s];
        for y in 0..s {
            for x in 0..s {
                let on = inside(x as f64 + 0.5, y as f64 + 0.5);
                for c in 0..spec.channels {
                    let base = if on { fg[c] } else { bg[c] };
                    let v: f64 = base + noise.sample(&mut rng);
                    data[c * s * s + y * s + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        samples.push(Sample {
            id: format!("{}{:05}", spec.prefix, i),
            image: Tensor::new(vec![spec.channels, s, s], data)?,
            label,
        });
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> ShapesSpec {
        ShapesSpec {
            side: 32,
            channels: 3,
            classes: 10,
            per_class: 3,
            seed,
            prefix: "s".into(),
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate_shapes(&spec(7)).unwrap(), generate_shapes(&spec(7)).unwrap());
        assert_ne!(generate_shapes(&spec(7)).unwrap(), generate_shapes(&spec(8)).unwrap());
    }

    #[test]
    fn labels_and_counts() {
        let d = generate_shapes(&spec(1)).unwrap();
        assert_eq!(d.len(), 30);
        for k in 0..10 {
            assert_eq!(d.labels().iter().filter(|&&l| l == k).count(), 3);
        }
        for s in &d.samples {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_shapes(&spec(2)).unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
        let csv = fs::read_to_string(dir.path().join(LABELS_FILE)).unwrap();
        assert!(csv.starts_with("filename,label\ns00000.vtf,0\n"));
    }

    #[test]
    fn too_many_classes_is_unsupported() {
        let mut s = spec(0);
        s.classes = 11;
        assert!(generate_shapes(&s).is_err());
    }
}
