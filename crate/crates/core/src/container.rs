//! On-disk container for tensors: a TOML manifest next to flat
//! little-endian f32 payload files. Round-trips are bit-exact; the only
//! non-deterministic manifest field is the creation timestamp, which lives
//! alone in `created_unix`.

use crate::error::{Error, Result};
use crate::ops::{ForwardOperator, Observation, ObservationSet};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub const CONTAINER_FORMAT: &str = "emdiff-container";
pub const CONTAINER_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    created_unix: u64,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    #[serde(default)]
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

/// Named tensors plus free-form string metadata.
#[derive(Default, Clone, Debug)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    arrays: Vec<(String, Tensor)>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Container(format!("missing meta key '{key}'")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Container(format!("meta key '{key}' has unexpected format")))
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if !valid_name(name) {
            return Err(Error::Container(format!(
                "array name '{name}' must be lowercase [a-z0-9_]"
            )));
        }
        if self.arrays.iter().any(|(n, _)| n == name) {
            return Err(Error::Container(format!("duplicate array name '{name}'")));
        }
        self.arrays.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Container(format!("missing array '{name}'")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.arrays.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: CONTAINER_FORMAT.into(),
            version: CONTAINER_VERSION,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.clone(),
                    file: format!("{n}.f32"),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| Error::Container(format!("manifest encode: {e}")))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        for (n, t) in &self.arrays {
            let mut bytes = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(dir.join(format!("{n}.f32")), bytes)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Container(format!("manifest parse: {e}")))?;
        if manifest.format != CONTAINER_FORMAT {
            return Err(Error::Container(format!("unknown format '{}'", manifest.format)));
        }
        if manifest.version != CONTAINER_VERSION {
            return Err(Error::Container(format!(
                "container version {} not supported (expected {CONTAINER_VERSION})",
                manifest.version
            )));
        }
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for entry in &manifest.arrays {
            let bytes = fs::read(dir.join(&entry.file))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Container(format!("array file '{}' truncated", entry.file)));
            }
            let data: Vec<f32> =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let numel: usize = entry.shape.iter().product();
            if numel != data.len() {
                return Err(Error::Container(format!(
                    "array '{}': shape {:?} vs {} stored values",
                    entry.name,
                    entry.shape,
                    data.len()
                )));
            }
            arrays.push((entry.name.clone(), Tensor::from_parts(entry.shape.clone(), data)));
        }
        Ok(Self { meta: manifest.meta, arrays })
    }
}

impl crate::data::Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut c = Container::new();
        c.set_meta("content", "dataset");
        c.set_meta("kind", &self.kind);
        c.set_meta("seed", self.seed);
        c.set_meta(
            "item_shape",
            self.item_shape.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x"),
        );
        c.push("samples", self.samples.clone())?;
        c.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = Container::load(dir)?;
        let item_shape: Vec<usize> = c
            .meta_str("item_shape")?
            .split('x')
            .map(|s| s.parse().map_err(|_| Error::Container("bad item_shape".into())))
            .collect::<Result<_>>()?;
        Ok(Self {
            samples: c.get("samples")?.clone(),
            item_shape,
            kind: c.meta_str("kind")?.to_string(),
            seed: c.meta_parse("seed")?,
        })
    }
}

impl ObservationSet {
    /// Persist as manifest + flat payloads. Mask tasks store one bitmap per
    /// item plus the concatenated compacted observations; shared-operator
    /// tasks store a dense y matrix and the operator parameters.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("cannot persist an empty observation set".into()));
        }
        let sigma = self.items[0].sigma;
        if self.items.iter().any(|o| o.sigma != sigma) {
            return Err(Error::Container("observation set has mixed noise levels".into()));
        }
        let kind = self.items[0].op.kind_name();
        if self.items.iter().any(|o| o.op.kind_name() != kind) {
            return Err(Error::Container("observation set has mixed operator kinds".into()));
        }
        let mut c = Container::new();
        c.set_meta("content", "observations");
        c.set_meta("kind", kind);
        c.set_meta("sigma", sigma);
        c.set_meta("seed", self.seed);
        c.set_meta("task", &self.kind);
        c.set_meta("count", self.items.len());
        c.set_meta("mask_resamples", self.mask_resamples);
        let shape = self.items[0].op.input_shape().to_vec();
        c.set_meta(
            "input_shape",
            shape.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x"),
        );

        match kind {
            "mask" => {
                let d: usize = shape.iter().product();
                let n = self.items.len();
                let mut masks = Vec::with_capacity(n * d);
                let mut ys = Vec::new();
                for o in &self.items {
                    masks.extend(o.op.mask_bitmap().expect("mask operator"));
                    ys.extend_from_slice(&o.y);
                }
                c.push("masks", Tensor::from_parts(vec![n, d], masks))?;
                c.push("y_concat", Tensor::from_parts(vec![ys.len()], ys))?;
            }
            "blur" => {
                let (_, k) = self.items[0].op.kernel().expect("blur operator");
                c.set_meta("kernel_size", k);
                c.set_meta("sigma_blur", self.meta_sigma_blur()?);
                self.push_dense_y(&mut c)?;
            }
            _ => {
                self.push_dense_y(&mut c)?;
            }
        }
        if let Some(truth) = &self.ground_truth {
            c.push("x_true", truth.clone())?;
        }
        c.save(dir)
    }

    fn push_dense_y(&self, c: &mut Container) -> Result<()> {
        let m = self.items[0].op.output_dim();
        let n = self.items.len();
        let mut ys = Vec::with_capacity(n * m);
        for o in &self.items {
            if o.y.len() != m {
                return Err(Error::Container("inconsistent observation lengths".into()));
            }
            ys.extend_from_slice(&o.y);
        }
        c.push("y", Tensor::from_parts(vec![n, m], ys))?;
        Ok(())
    }

    // blur operators regenerate their kernel from (k, sigma_blur); the
    // sigma is not recoverable from the kernel, so the set records it
    fn meta_sigma_blur(&self) -> Result<f64> {
        self.blur_sigma.ok_or_else(|| {
            Error::Container("blur observation set needs its sigma_blur recorded".into())
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = Container::load(dir)?;
        let kind = c.meta_str("kind")?.to_string();
        let sigma: f32 = c.meta_parse("sigma")?;
        let seed: u64 = c.meta_parse("seed")?;
        let task = c.meta_str("task")?.to_string();
        let count: usize = c.meta_parse("count")?;
        let shape: Vec<usize> = c
            .meta_str("input_shape")?
            .split('x')
            .map(|s| s.parse().map_err(|_| Error::Container("bad input_shape".into())))
            .collect::<Result<_>>()?;
        let d: usize = shape.iter().product();

        let mut items = Vec::with_capacity(count);
        let mut blur_sigma = None;
        match kind.as_str() {
            "mask" => {
                let masks = c.get("masks")?;
                let ys = c.get("y_concat")?;
                if masks.rows() != count {
                    return Err(Error::Container("mask count mismatch".into()));
                }
                let mut offset = 0usize;
                for i in 0..count {
                    let op = ForwardOperator::mask_from_bitmap(&shape, masks.row(i))?;
                    let m = op.output_dim();
                    if offset + m > ys.numel() {
                        return Err(Error::Container("y_concat shorter than masks imply".into()));
                    }
                    let y = ys.data()[offset..offset + m].to_vec();
                    offset += m;
                    items.push(Observation { y, op, sigma });
                }
                if offset != ys.numel() {
                    return Err(Error::Container("y_concat longer than masks imply".into()));
                }
            }
            "blur" => {
                let k: usize = c.meta_parse("kernel_size")?;
                let sb: f64 = c.meta_parse("sigma_blur")?;
                blur_sigma = Some(sb);
                let op = ForwardOperator::blur(&shape, k, sb)?;
                let ys = c.get("y")?;
                for i in 0..count {
                    items.push(Observation { y: ys.row(i).to_vec(), op: op.clone(), sigma });
                }
            }
            "identity" => {
                let op = ForwardOperator::identity(&shape);
                let ys = c.get("y")?;
                for i in 0..count {
                    items.push(Observation { y: ys.row(i).to_vec(), op: op.clone(), sigma });
                }
            }
            other => return Err(Error::Container(format!("unknown operator kind '{other}'"))),
        }
        let ground_truth = if c.names().contains(&"x_true") {
            let t = c.get("x_true")?.clone();
            if t.rows() != count || t.cols() != d {
                return Err(Error::Container("x_true shape mismatch".into()));
            }
            Some(t)
        } else {
            None
        };
        let mask_resamples = c.meta_parse("mask_resamples").unwrap_or(0);
        Ok(Self { items, ground_truth, seed, kind: task, blur_sigma, mask_resamples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("emdiff-container-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let mut rng = stream(1, "container-test", 0);
        let t1 = Tensor::randn(&[7, 3], &mut rng);
        let t2 = Tensor::randn(&[11], &mut rng);
        let mut c = Container::new();
        c.set_meta("kind", "demo");
        c.set_meta("sigma", 0.25f32);
        c.push("alpha", t1.clone()).unwrap();
        c.push("beta", t2.clone()).unwrap();
        let dir = tmpdir("roundtrip");
        c.save(&dir).unwrap();
        let back = Container::load(&dir).unwrap();
        assert_eq!(back.get("alpha").unwrap().data(), t1.data());
        assert_eq!(back.get("alpha").unwrap().shape(), t1.shape());
        assert_eq!(back.get("beta").unwrap().data(), t2.data());
        assert_eq!(back.meta_str("kind").unwrap(), "demo");
        let s: f32 = back.meta_parse("sigma").unwrap();
        assert_eq!(s, 0.25);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn duplicate_and_invalid_names_rejected() {
        let mut c = Container::new();
        c.push("ok_name", Tensor::zeros(&[1])).unwrap();
        assert!(c.push("ok_name", Tensor::zeros(&[1])).is_err());
        assert!(c.push("Bad Name", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn mask_observation_set_roundtrip() {
        let mut rng = stream(3, "obs-test", 0);
        let d = 16;
        let n = 5;
        let truth = Tensor::randn(&[n, d], &mut rng);
        let mut items = Vec::new();
        for i in 0..n {
            let (op, _) = ForwardOperator::mask(&[d], 0.5, 100 + i as u64).unwrap();
            let y = crate::ops::corrupt(truth.row(i), &op, 0.05, &mut rng).unwrap();
            items.push(Observation { y, op, sigma: 0.05 });
        }
        let set = ObservationSet {
            items,
            ground_truth: Some(truth.clone()),
            seed: 42,
            kind: "inpaint".into(),
            blur_sigma: None,
            mask_resamples: 0,
        };
        let dir = tmpdir("mask-obs");
        set.save(&dir).unwrap();
        let back = ObservationSet::load(&dir).unwrap();
        assert_eq!(back.len(), n);
        assert_eq!(back.kind, "inpaint");
        for (a, b) in back.items.iter().zip(&set.items) {
            assert_eq!(a.y, b.y);
            assert_eq!(a.op.mask_bitmap(), b.op.mask_bitmap());
            assert_eq!(a.sigma, b.sigma);
        }
        assert_eq!(back.ground_truth.unwrap().data(), truth.data());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn blur_observation_set_roundtrip() {
        let mut rng = stream(4, "obs-test", 1);
        let truth = Tensor::randn(&[3, 64], &mut rng);
        let op = ForwardOperator::blur(&[8, 8], 5, 1.5).unwrap();
        let items: Vec<Observation> = (0..3)
            .map(|i| {
                let y = crate::ops::corrupt(truth.row(i), &op, 0.01, &mut rng).unwrap();
                Observation { y, op: op.clone(), sigma: 0.01 }
            })
            .collect();
        let set = ObservationSet {
            items,
            ground_truth: None,
            seed: 7,
            kind: "deblur".into(),
            blur_sigma: Some(1.5),
            mask_resamples: 0,
        };
        let dir = tmpdir("blur-obs");
        set.save(&dir).unwrap();
        let back = ObservationSet::load(&dir).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.items.iter().zip(&set.items) {
            assert_eq!(a.y, b.y);
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
