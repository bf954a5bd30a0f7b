//! Synthetic biased sequence data.
//!
//! Each sample is a `C x T` array. The first `dynamic_channels` rows carry a
//! class-specific sinusoid with an integer number of cycles over the sequence,
//! so class identity lives only in temporal order. The remaining rows carry a
//! constant scene offset, a static cue that agrees with the class with
//! probability `bias_strength` in the train and biased test splits.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub known_classes: usize,
    pub unknown_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub timesteps: usize,
    pub dynamic_channels: usize,
    pub background_channels: usize,
    pub bias_strength: f64,
    pub noise_sigma: f64,
    /// Cycles per sequence of the lowest class frequency.
    pub min_frequency: usize,
    pub frequency_step: usize,
    pub dynamic_amplitude: f64,
    pub scene_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            known_classes: 5,
            unknown_classes: 5,
            train_per_class: 60,
            test_per_class: 30,
            timesteps: 32,
            dynamic_channels: 2,
            background_channels: 2,
            bias_strength: 0.95,
            noise_sigma: 0.1,
            min_frequency: 1,
            frequency_step: 1,
            dynamic_amplitude: 1.0,
            scene_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn channels(&self) -> usize {
        self.dynamic_channels + self.background_channels
    }

    pub fn total_classes(&self) -> usize {
        self.known_classes + self.unknown_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::InvalidSpec { field: field.to_string(), message });
        if self.known_classes < 2 {
            return bad("known_classes", format!("must be >= 2, got {}", self.known_classes));
        }
        if self.unknown_classes < 1 {
            return bad("unknown_classes", "must be >= 1".into());
        }
        if self.train_per_class == 0 {
            return bad("train_per_class", "must be positive".into());
        }
        if self.test_per_class == 0 {
            return bad("test_per_class", "must be positive".into());
        }
        if self.timesteps < 2 {
            return bad("timesteps", "must be >= 2".into());
        }
        if self.dynamic_channels == 0 {
            return bad("dynamic_channels", "must be positive".into());
        }
        if self.background_channels == 0 {
            return bad("background_channels", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return bad("bias_strength", format!("must lie in [0, 1], got {}", self.bias_strength));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", format!("must be finite and >= 0, got {}", self.noise_sigma));
        }
        if self.min_frequency == 0 {
            return bad("min_frequency", "must be >= 1".into());
        }
        if self.frequency_step == 0 {
            return bad("frequency_step", "must be >= 1".into());
        }
        let top = self.min_frequency + (self.total_classes() - 1) * self.frequency_step;
        if 2 * top >= self.timesteps {
            return bad(
                "timesteps",
                format!("highest class frequency {top} needs timesteps > {}", 2 * top),
            );
        }
        if !(self.dynamic_amplitude > 0.0 && self.dynamic_amplitude.is_finite()) {
            return bad("dynamic_amplitude", "must be positive".into());
        }
        if !(self.scene_scale > 0.0 && self.scene_scale.is_finite()) {
            return bad("scene_scale", "must be positive".into());
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KvFile) -> Result<Self> {
        let d = SyntheticSpec::default();
        let spec = SyntheticSpec {
            known_classes: kv.take_or("known_classes", d.known_classes)?,
            unknown_classes: kv.take_or("unknown_classes", d.unknown_classes)?,
            train_per_class: kv.take_or("train_per_class", d.train_per_class)?,
            test_per_class: kv.take_or("test_per_class", d.test_per_class)?,
            timesteps: kv.take_or("timesteps", d.timesteps)?,
            dynamic_channels: kv.take_or("dynamic_channels", d.dynamic_channels)?,
            background_channels: kv.take_or("background_channels", d.background_channels)?,
            bias_strength: kv.take_or("bias_strength", d.bias_strength)?,
            noise_sigma: kv.take_or("noise_sigma", d.noise_sigma)?,
            min_frequency: kv.take_or("min_frequency", d.min_frequency)?,
            frequency_step: kv.take_or("frequency_step", d.frequency_step)?,
            dynamic_amplitude: kv.take_or("dynamic_amplitude", d.dynamic_amplitude)?,
            scene_scale: kv.take_or("scene_scale", d.scene_scale)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KvFile::read(path)?)
    }

    /// Cycles per sequence for every global class id (known first).
    /// Known and unknown classes alternate along the frequency axis.
    pub fn class_frequencies(&self) -> Vec<usize> {
        let (k, u) = (self.known_classes, self.unknown_classes);
        let mut freq = vec![0; k + u];
        let mut pos = 0;
        for i in 0..k.max(u) {
            if i < k {
                freq[i] = self.min_frequency + pos * self.frequency_step;
                pos += 1;
            }
            if i < u {
                freq[k + i] = self.min_frequency + pos * self.frequency_step;
                pos += 1;
            }
        }
        freq
    }

    /// Per-scene background offsets, one row per scene.
    pub fn scene_offsets(&self) -> Vec<Vec<f64>> {
        let k = self.known_classes;
        (0..k)
            .map(|s| {
                let theta = 2.0 * PI * s as f64 / k as f64;
                (0..self.background_channels)
                    .map(|b| {
                        let v = if self.background_channels == 1 {
                            2.0 * s as f64 / (k - 1) as f64 - 1.0
                        } else {
                            let harmonic = (b / 2 + 1) as f64;
                            let shift = if b % 2 == 1 { PI / 2.0 } else { 0.0 };
                            (harmonic * theta - shift).cos()
                        };
                        self.scene_scale * v
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    TestBiased,
    TestUnbiased,
    TestUnknown,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [
        SplitKind::Train,
        SplitKind::TestBiased,
        SplitKind::TestUnbiased,
        SplitKind::TestUnknown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::TestBiased => "test_biased",
            SplitKind::TestUnbiased => "test_unbiased",
            SplitKind::TestUnknown => "test_unknown",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.csv", self.name())
    }

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// Global class id: known classes first, then unknown.
    pub class: usize,
    pub scene: usize,
    /// Channel-major `C x T` values.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub kind: SplitKind,
    pub channels: usize,
    pub timesteps: usize,
    pub samples: Vec<Sample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class).collect()
    }

    /// Stacks the selected samples into a `B x C x T` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let width = self.channels * self.timesteps;
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].values);
        }
        Tensor::from_vec(&[indices.len(), self.channels, self.timesteps], data)
            .expect("sample widths are validated on construction")
    }

    pub fn all(&self) -> Tensor {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,class,scene");
        for c in 0..self.channels {
            for t in 0..self.timesteps {
                let _ = write!(s, ",c{c}_t{t}");
            }
        }
        s.push('\n');
        for sample in &self.samples {
            let _ = write!(s, "{},{},{}", sample.id, sample.class, sample.scene);
            for v in &sample.values {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, kind: SplitKind, path: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_string(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[..3] != ["id", "class", "scene"] {
            return Err(err(1, "header must start with id,class,scene".into()));
        }
        let mut channels = 0;
        let mut timesteps = 0;
        for (i, col) in cols[3..].iter().enumerate() {
            let parsed = col
                .strip_prefix('c')
                .and_then(|r| r.split_once("_t"))
                .and_then(|(c, t)| Some((c.parse::<usize>().ok()?, t.parse::<usize>().ok()?)));
            let (c, t) = parsed.ok_or_else(|| err(1, format!("bad value column `{col}`")))?;
            if c == 0 {
                timesteps = t + 1;
            }
            channels = c + 1;
            if timesteps == 0 || i != c * timesteps + t {
                return Err(err(1, format!("value column `{col}` out of channel-major order")));
            }
        }
        if channels * timesteps != cols.len() - 3 {
            return Err(err(1, "value columns do not form a C x T grid".into()));
        }
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(err(
                    line_no,
                    format!("expected {} fields, found {}", cols.len(), fields.len()),
                ));
            }
            let int = |j: usize| {
                fields[j]
                    .parse::<usize>()
                    .map_err(|_| err(line_no, format!("bad {} `{}`", cols[j], fields[j])))
            };
            let values = fields[3..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(line_no, format!("bad value `{f}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                id: int(0)?,
                class: int(1)?,
                scene: int(2)?,
                values,
            });
        }
        Ok(DatasetSplit {
            kind,
            channels,
            timesteps,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, kind: SplitKind) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, kind, &path.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub class: usize,
    pub frequency: usize,
    pub known: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub kind: SplitKind,
    pub file: String,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub channels: usize,
    pub classes: Vec<ClassInfo>,
    pub scene_offsets: Vec<Vec<f64>>,
    pub splits: Vec<SplitEntry>,
}

/// All four splits plus their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: DatasetSplit,
    pub test_biased: DatasetSplit,
    pub test_unbiased: DatasetSplit,
    pub test_unknown: DatasetSplit,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    pub fn known_classes(&self) -> usize {
        self.manifest.spec.known_classes
    }

    pub fn split(&self, kind: SplitKind) -> &DatasetSplit {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::TestBiased => &self.test_biased,
            SplitKind::TestUnbiased => &self.test_unbiased,
            SplitKind::TestUnknown => &self.test_unknown,
        }
    }

    /// Writes the four CSVs and the manifest, creating `dir` if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for kind in SplitKind::ALL {
            self.split(kind).save(&dir.join(kind.file_name()))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Accepts either the dataset directory or its manifest file.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path: PathBuf = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.spec.validate()?;
        let load = |kind: SplitKind| -> Result<DatasetSplit> {
            let entry = manifest
                .splits
                .iter()
                .find(|s| s.kind == kind)
                .ok_or_else(|| Error::invalid("manifest", format!("missing split {}", kind.name())))?;
            let split = DatasetSplit::load(&dir.join(&entry.file), kind)?;
            if split.len() != entry.samples
                || (!split.is_empty()
                    && (split.channels != manifest.channels
                        || split.timesteps != manifest.spec.timesteps))
            {
                return Err(Error::invalid(
                    "manifest",
                    format!("split {} does not match the manifest", kind.name()),
                ));
            }
            Ok(split)
        };
        Ok(Dataset {
            train: load(SplitKind::Train)?,
            test_biased: load(SplitKind::TestBiased)?,
            test_unbiased: load(SplitKind::TestUnbiased)?,
            test_unknown: load(SplitKind::TestUnknown)?,
            manifest,
        })
    }
}

fn sample_values(
    spec: &SyntheticSpec,
    frequency: usize,
    offsets: &[f64],
    rng: &mut impl Rng,
) -> Vec<f64> {
    let t_len = spec.timesteps;
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let mut values = Vec::with_capacity(spec.channels() * t_len);
    for _ in 0..spec.dynamic_channels {
        let phase = rng.random_range(0.0..2.0 * PI);
        for t in 0..t_len {
            let angle = 2.0 * PI * frequency as f64 * t as f64 / t_len as f64 + phase;
            values.push(spec.dynamic_amplitude * angle.sin() + noise.sample(rng));
        }
    }
    for &mu in offsets {
        for _ in 0..t_len {
            values.push(mu + noise.sample(rng));
        }
    }
    values
}

fn generate_split(spec: &SyntheticSpec, kind: SplitKind) -> DatasetSplit {
    let mut rng = seeded(derive_seed(spec.seed, kind.index()));
    let freqs = spec.class_frequencies();
    let offsets = spec.scene_offsets();
    let k = spec.known_classes;
    let (classes, per_class) = match kind {
        SplitKind::Train => (0..k, spec.train_per_class),
        SplitKind::TestBiased | SplitKind::TestUnbiased => (0..k, spec.test_per_class),
        SplitKind::TestUnknown => (k..spec.total_classes(), spec.test_per_class),
    };
    let mut samples = Vec::with_capacity(classes.len() * per_class);
    for class in classes {
        for _ in 0..per_class {
            let scene = match kind {
                SplitKind::Train | SplitKind::TestBiased => {
                    if rng.random_bool(spec.bias_strength) {
                        class
                    } else {
                        rng.random_range(0..k)
                    }
                }
                SplitKind::TestUnbiased | SplitKind::TestUnknown => rng.random_range(0..k),
            };
            let values = sample_values(spec, freqs[class], &offsets[scene], &mut rng);
            samples.push(Sample {
                id: samples.len(),
                class,
                scene,
                values,
            });
        }
    }
    DatasetSplit {
        kind,
        channels: spec.channels(),
        timesteps: spec.timesteps,
        samples,
    }
}

/// Builds all four splits. Each split draws from its own seed derived from
/// `spec.seed`, so splits are independent of one another.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let [train, test_biased, test_unbiased, test_unknown] =
        SplitKind::ALL.map(|kind| generate_split(spec, kind));
    let freqs = spec.class_frequencies();
    let manifest = Manifest {
        spec: spec.clone(),
        channels: spec.channels(),
        classes: freqs
            .iter()
            .enumerate()
            .map(|(class, &frequency)| ClassInfo {
                class,
                frequency,
                known: class < spec.known_classes,
            })
            .collect(),
        scene_offsets: spec.scene_offsets(),
        splits: [&train, &test_biased, &test_unbiased, &test_unknown]
            .iter()
            .map(|s| SplitEntry {
                kind: s.kind,
                file: s.kind.file_name(),
                samples: s.len(),
            })
            .collect(),
    };
    Ok(Dataset {
        manifest,
        train,
        test_biased,
        test_unbiased,
        test_unknown,
    })
}
