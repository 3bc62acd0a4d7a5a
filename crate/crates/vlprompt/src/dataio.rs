//! Dataset manifests, bundled synthetic datasets, folder import and image
//! decoding.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vlprompt_core::eval::{EvalPool, EvalSample};
use vlprompt_core::image::Image;

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
/// Directory that relative data sources are resolved against.
pub const DATA_ROOT_ENV: &str = "VLPROMPT_DATA_ROOT";
const BUILTIN_PREFIX: &str = "builtin:";
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub path: String,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
}

/// Classes may be listed by name (ids follow list order) or as `{id, name}`.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum ClassSpec {
    Name(String),
    Entry(ClassEntry),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    version: u32,
    name: String,
    classes: Vec<ClassSpec>,
    samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub name: String,
    /// Ordered class names; the position is the class id.
    pub classes: Vec<String>,
    pub samples: Vec<SampleRecord>,
    /// Directory relative sample paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// Split of sample `i`: the recorded one, else every fifth sample of a
    /// class (by position within the class) is held out for testing.
    pub fn split_of(&self, i: usize) -> Split {
        if let Some(s) = self.samples[i].split {
            return s;
        }
        let class = self.samples[i].class;
        let rank = self.samples[..i].iter().filter(|s| s.class == class).count();
        if rank % 5 == 4 {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn splits(&self) -> Vec<Split> {
        let mut rank: BTreeMap<usize, usize> = BTreeMap::new();
        self.samples
            .iter()
            .map(|s| {
                let r = rank.entry(s.class).or_default();
                let k = *r;
                *r += 1;
                s.split.unwrap_or(if k % 5 == 4 { Split::Test } else { Split::Train })
            })
            .collect()
    }

    pub fn validate(&self, origin: &Path) -> Result<()> {
        let err = |msg: String| Error::Manifest {
            path: origin.to_path_buf(),
            msg,
        };
        if self.version != MANIFEST_VERSION {
            return Err(err(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.classes.is_empty() {
            return Err(err("classes: list is empty".into()));
        }
        let mut names = BTreeSet::new();
        for (i, c) in self.classes.iter().enumerate() {
            if c.trim().is_empty() {
                return Err(err(format!("classes[{i}]: empty class name")));
            }
            if !names.insert(vlprompt_core::protocol::normalize_name(c)) {
                return Err(err(format!("classes[{i}]: duplicate class name {c:?}")));
            }
        }
        let k = self.classes.len();
        for (i, s) in self.samples.iter().enumerate() {
            if s.class >= k {
                return Err(err(format!("samples[{i}].class: {} outside [0, {k})", s.class)));
            }
            if s.path.is_empty() {
                return Err(err(format!("samples[{i}].path: empty")));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let v = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&v))
    }

    /// Prepares the manifest to be written into `dir`. Relative sample paths
    /// stay relative when `dir` is the manifest root and become absolute
    /// otherwise.
    pub fn rebase(&mut self, dir: &Path) -> Result<()> {
        let root = std::fs::canonicalize(&self.root).map_err(Error::io(&self.root))?;
        let target = std::fs::canonicalize(dir).map_err(Error::io(dir))?;
        if root != target {
            for s in &mut self.samples {
                if Path::new(&s.path).is_relative() {
                    s.path = root.join(&s.path).to_string_lossy().into_owned();
                }
            }
        }
        self.root = target;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        // class lists are written in the `{id, name}` form
        v["classes"] = self
            .classes
            .iter()
            .enumerate()
            .map(|(id, name)| serde_json::json!({"id": id, "name": name}))
            .collect();
        serde_json::to_string_pretty(&v).expect("manifest serializes")
    }
}

/// Parses manifest JSON, naming the offending path on schema errors.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<DatasetManifest> {
    let mut de = serde_json::Deserializer::from_str(text);
    let raw: RawManifest = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Manifest {
        path: origin.to_path_buf(),
        msg: format!("{}: {}", e.path(), e.inner()),
    })?;
    let err = |msg: String| Error::Manifest {
        path: origin.to_path_buf(),
        msg,
    };
    let explicit = raw.classes.iter().any(|c| matches!(c, ClassSpec::Entry(_)));
    let classes = if explicit {
        let mut by_id: BTreeMap<usize, String> = BTreeMap::new();
        for (i, c) in raw.classes.into_iter().enumerate() {
            let ClassSpec::Entry(e) = c else {
                return Err(err(format!("classes[{i}]: mixes bare names with {{id, name}} entries")));
            };
            if by_id.insert(e.id, e.name).is_some() {
                return Err(err(format!("classes[{i}].id: duplicate class id {}", e.id)));
            }
        }
        if let Some((pos, (&id, _))) = by_id.iter().enumerate().find(|(p, (id, _))| *p != **id) {
            return Err(err(format!("classes: ids must be dense from 0; id {id} found where {pos} expected")));
        }
        by_id.into_values().collect()
    } else {
        raw.classes
            .into_iter()
            .map(|c| match c {
                ClassSpec::Name(n) => n,
                ClassSpec::Entry(e) => e.name,
            })
            .collect()
    };
    let m = DatasetManifest {
        version: raw.version,
        name: raw.name,
        classes,
        samples: raw.samples,
        root: origin.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    m.validate(origin)?;
    Ok(m)
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

/// Resolves a data source: builtin name, manifest file or class-folder tree.
/// Relative paths that do not exist are retried under the data root.
pub fn load_manifest(source: &str) -> Result<DatasetManifest> {
    if let Some(m) = builtin_manifest(source) {
        return Ok(m);
    }
    let mut path = PathBuf::from(source);
    if !path.exists() && path.is_relative() {
        if let Some(root) = data_root() {
            path = root.join(source);
        }
    }
    if path.is_dir() {
        let m = path.join("manifest.json");
        if m.is_file() {
            path = m;
        } else {
            return import_folder(&path, None);
        }
    }
    if !path.exists() {
        return Err(Error::Config(format!(
            "data source {source:?} is neither a builtin ({}) nor an existing path",
            BUILTINS.join(", ")
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
    parse_manifest(&text, &path)
}

fn folder_class_name(dir: &str) -> String {
    dir.replace(['_', '-'], " ")
}

/// Builds a manifest from a `root/<class>/<image>` layout. Classes and files
/// are taken in sorted order.
pub fn import_folder(root: &Path, name: Option<&str>) -> Result<DatasetManifest> {
    let mut dirs: Vec<(String, PathBuf)> = std::fs::read_dir(root)
        .map_err(Error::io(root))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    dirs.sort();
    let mut classes = Vec::new();
    let mut samples = Vec::new();
    for (dir, path) in &dirs {
        let mut files: Vec<PathBuf> = walkdir::WalkDir::new(path)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
            })
            .collect();
        if files.is_empty() {
            log::warn!("skipping class folder {dir:?}: no images");
            continue;
        }
        files.sort();
        let class = classes.len();
        classes.push(folder_class_name(dir));
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            samples.push(SampleRecord {
                path: rel.to_string_lossy().replace('\\', "/"),
                class,
                domain: None,
                split: None,
            });
        }
    }
    let m = DatasetManifest {
        version: MANIFEST_VERSION,
        name: name
            .map(str::to_string)
            .or_else(|| root.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "dataset".into()),
        classes,
        samples,
        root: root.to_path_buf(),
    };
    m.validate(root)?;
    Ok(m)
}

// ---- bundled synthetic data ----

pub const BUILTINS: [&str; 3] = ["toy2", "toy4", "toy4-shift"];
const TOY_PER_CLASS: usize = 64;
const TOY_TRAIN: usize = 48;
const TOY_SIZE: usize = 32;

fn builtin_classes(name: &str) -> Option<(&'static [&'static str], &'static str)> {
    match name {
        "toy2" => Some((&["disc", "stripes"], "plain")),
        "toy4" => Some((&["disc", "stripes", "checker", "ring"], "plain")),
        "toy4-shift" => Some((&["disc", "stripes", "checker", "ring"], "shift")),
        _ => None,
    }
}

pub fn builtin_manifest(name: &str) -> Option<DatasetManifest> {
    let (classes, domain) = builtin_classes(name)?;
    let mut samples = Vec::new();
    for (c, cname) in classes.iter().enumerate() {
        for i in 0..TOY_PER_CLASS {
            samples.push(SampleRecord {
                path: format!("{BUILTIN_PREFIX}{name}/{cname}/{i:03}"),
                class: c,
                domain: Some(domain.into()),
                split: Some(if i < TOY_TRAIN { Split::Train } else { Split::Test }),
            });
        }
    }
    Some(DatasetManifest {
        version: MANIFEST_VERSION,
        name: name.into(),
        classes: classes.iter().map(|s| s.to_string()).collect(),
        samples,
        root: PathBuf::new(),
    })
}

fn toy_seed(dataset: &str, class: &str, index: usize) -> u64 {
    let d = Sha256::digest(format!("{dataset}/{class}/{index}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Renders one synthetic image. Shapes are drawn with random placement,
/// size and colours; the shifted domain swaps to a dark, noisier palette.
pub fn render_toy(dataset: &str, class: &str, index: usize) -> Result<Image> {
    let shift = dataset.ends_with("-shift");
    let mut r = ChaCha8Rng::seed_from_u64(toy_seed(dataset, class, index));
    let n = TOY_SIZE;
    let mut fg = [0f32; 3];
    let mut bg = [0f32; 3];
    for k in 0..3 {
        if shift {
            fg[k] = r.random_range(0.0..0.45);
            bg[k] = r.random_range(0.55..1.0);
        } else {
            fg[k] = r.random_range(0.55..1.0);
            bg[k] = r.random_range(0.0..0.45);
        }
    }
    let noise = if shift { 0.12 } else { 0.05 };
    let cx = r.random_range(0.35..0.65) * n as f32;
    let cy = r.random_range(0.35..0.65) * n as f32;
    let rad = r.random_range(0.18..0.32) * n as f32;
    let angle: f32 = r.random_range(0.0..std::f32::consts::PI);
    let period = r.random_range(4.0..8.0f32);
    let cell = r.random_range(3..7usize);
    let phase = r.random_range(0.0..period);
    let mut data = vec![0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            let on = match class {
                "disc" => d <= rad,
                "ring" => d <= rad * 1.25 && d >= rad * 0.7,
                "stripes" => {
                    let t = fx * angle.cos() + fy * angle.sin() + phase;
                    t.rem_euclid(period) < period / 2.0
                }
                "checker" => {
                    let ox = (x + (phase as usize)) / cell;
                    let oy = (y + (phase as usize)) / cell;
                    (ox + oy) % 2 == 0
                }
                other => return Err(Error::Unsupported(format!("no renderer for toy class {other:?}"))),
            };
            for k in 0..3 {
                let base = if on { fg[k] } else { bg[k] };
                let v = base + r.random_range(-noise..noise);
                data[(k * n + y) * n + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image::new(3, n, n, data)?)
}

fn decode_file(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, p) in rgb.enumerate_pixels() {
        for k in 0..3 {
            data[(k * h + y as usize) * w + x as usize] = p.0[k] as f32 / 255.0;
        }
    }
    Ok(Image::new(3, h, w, data)?)
}

/// Decodes sample `i` and resizes it (shorter side, then centre crop) to `size`.
pub fn load_sample(m: &DatasetManifest, i: usize, size: usize) -> Result<Image> {
    let s = &m.samples[i];
    let img = if let Some(rest) = s.path.strip_prefix(BUILTIN_PREFIX) {
        let mut parts = rest.splitn(3, '/');
        let (Some(ds), Some(class), Some(idx)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Manifest {
                path: PathBuf::from(&s.path),
                msg: "malformed builtin sample path".into(),
            });
        };
        let idx: usize = idx.parse().map_err(|_| Error::Manifest {
            path: PathBuf::from(&s.path),
            msg: "malformed builtin sample index".into(),
        })?;
        render_toy(ds, class, idx)?
    } else {
        let p = Path::new(&s.path);
        let full = if p.is_absolute() { p.to_path_buf() } else { m.root.join(p) };
        decode_file(&full)?
    };
    if img.dims() == (3, size, size) {
        Ok(img)
    } else {
        Ok(img.resize_center_crop(size))
    }
}

/// A manifest with every image decoded at the encoder resolution.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    pub splits: Vec<Split>,
}

impl LoadedDataset {
    pub fn load(manifest: DatasetManifest, size: usize) -> Result<Self> {
        let images = (0..manifest.samples.len())
            .map(|i| load_sample(&manifest, i, size))
            .collect::<Result<Vec<_>>>()?;
        let splits = manifest.splits();
        Ok(Self {
            manifest,
            images,
            splits,
        })
    }

    /// `(sample id, class)` of every training sample.
    pub fn train_items(&self) -> Vec<(usize, usize)> {
        self.indices(Split::Train)
            .map(|i| (i, self.manifest.samples[i].class))
            .collect()
    }

    fn indices(&self, split: Split) -> impl Iterator<Item = usize> + '_ {
        (0..self.images.len()).filter(move |&i| self.splits[i] == split)
    }

    /// The test split as an evaluation pool.
    pub fn test_pool(&self) -> EvalPool {
        self.pool(Split::Test)
    }

    pub fn pool(&self, split: Split) -> EvalPool {
        EvalPool {
            name: self.manifest.name.clone(),
            class_names: self.manifest.classes.clone(),
            samples: self
                .indices(split)
                .map(|i| EvalSample {
                    id: i,
                    class: self.manifest.samples[i].class,
                    image: self.images[i].clone(),
                })
                .collect(),
        }
    }
}

/// Renames target class names through a `{target name: source name}` map.
pub fn apply_class_map(classes: &mut [String], map: &BTreeMap<String, String>) {
    let norm: BTreeMap<String, &String> = map
        .iter()
        .map(|(k, v)| (vlprompt_core::protocol::normalize_name(k), v))
        .collect();
    for c in classes.iter_mut() {
        if let Some(v) = norm.get(&vlprompt_core::protocol::normalize_name(c)) {
            *c = (*v).clone();
        }
    }
}

pub fn load_class_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("class map {}: {e}", path.display())))
}
