//! The "CADV1" binary container: tagged sections holding text (TOML) or
//! named little-endian f64 tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::causal_align::CovarianceEstimate;
use crate::data::{Dataset, SynthDataset, SyntheticCausalConfig};
use crate::error::{Error, Result};
use crate::models::{Classifier, NetworkSpec};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CADV1";

const TEXT: u8 = 0;
const TENSORS: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    Text(String),
    Tensors(Vec<(String, Tensor<f64>)>),
}

/// Ordered list of tagged sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    sections: Vec<(String, Payload)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("container ends at byte {}", self.bytes.len())))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("section text is not UTF-8".into()))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_text(&mut self, tag: &str, text: impl Into<String>) {
        self.sections.push((tag.to_string(), Payload::Text(text.into())));
    }

    pub fn push_tensors(&mut self, tag: &str, tensors: Vec<(String, Tensor<f64>)>) {
        self.sections.push((tag.to_string(), Payload::Tensors(tensors)));
    }

    pub fn tags(&self) -> Vec<&str> {
        self.sections.iter().map(|(t, _)| t.as_str()).collect()
    }

    fn find(&self, tag: &str) -> Result<&Payload> {
        self.sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Format(format!("missing section {tag}")))
    }

    pub fn text(&self, tag: &str) -> Result<&str> {
        match self.find(tag)? {
            Payload::Text(s) => Ok(s),
            Payload::Tensors(_) => Err(Error::Format(format!("section {tag} holds tensors, not text"))),
        }
    }

    pub fn tensors(&self, tag: &str) -> Result<&[(String, Tensor<f64>)]> {
        match self.find(tag)? {
            Payload::Tensors(t) => Ok(t),
            Payload::Text(_) => Err(Error::Format(format!("section {tag} holds text, not tensors"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (tag, payload) in &self.sections {
            put_str(&mut out, tag);
            match payload {
                Payload::Text(s) => {
                    out.push(TEXT);
                    put_str(&mut out, s);
                }
                Payload::Tensors(ts) => {
                    out.push(TENSORS);
                    out.extend_from_slice(&(ts.len() as u32).to_le_bytes());
                    for (name, t) in ts {
                        put_str(&mut out, name);
                        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
                        for &d in t.shape() {
                            out.extend_from_slice(&(d as u64).to_le_bytes());
                        }
                        for v in t.data() {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a CADV1 container (bad magic)".into()));
        }
        let mut r = Reader {
            bytes,
            at: MAGIC.len(),
        };
        let count = r.u32()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag = r.string()?;
            let payload = match r.u8()? {
                TEXT => Payload::Text(r.string()?),
                TENSORS => {
                    let n = r.u32()?;
                    let mut ts = Vec::with_capacity(n as usize);
                    for _ in 0..n {
                        let name = r.string()?;
                        let ndim = r.u32()?;
                        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                        let numel: usize = shape.iter().product();
                        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
                        let data = raw
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect();
                        ts.push((name, Tensor::new(shape, data)?));
                    }
                    Payload::Tensors(ts)
                }
                other => return Err(Error::Format(format!("unknown payload kind {other}"))),
            };
            sections.push((tag, payload));
        }
        if !r.done() {
            return Err(Error::Format("trailing bytes after the last section".into()));
        }
        Ok(Container { sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Free-form facts stored with a classifier.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `best`, `last`, or `init`.
    pub kind: String,
    pub epoch: usize,
    pub robust_val_acc: Option<f64>,
    pub natural_val_acc: Option<f64>,
    pub precision: String,
}

#[derive(Serialize, Deserialize)]
struct CovarianceMeta {
    ema_decay: f64,
    shrinkage: f64,
}

fn to_toml<S: Serialize>(v: &S) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

fn from_toml<D: for<'de> Deserialize<'de>>(s: &str) -> Result<D> {
    toml::from_str(s).map_err(|e| Error::Format(e.to_string()))
}

pub fn classifier_container<T: Real>(model: &Classifier<T>, meta: &CheckpointMeta) -> Result<Container> {
    let mut c = Container::new();
    c.push_text("SPEC", to_toml(model.spec())?);
    c.push_text("META", to_toml(meta)?);
    let params = model
        .param_names()
        .into_iter()
        .zip(model.params())
        .map(|(n, t)| (n, t.cast()))
        .collect();
    c.push_tensors("PARAMS", params);
    let cov = model.covariance();
    c.push_text(
        "COVMETA",
        to_toml(&CovarianceMeta {
            ema_decay: cov.ema_decay,
            shrinkage: cov.shrinkage,
        })?,
    );
    c.push_tensors(
        "STYLE",
        vec![
            ("style_map".into(), model.style_map().clone()),
            ("cov".into(), cov.cov.clone()),
            ("mean".into(), Tensor::from_vec(cov.mean.clone())),
        ],
    );
    Ok(c)
}

pub fn save_classifier<T: Real>(path: &Path, model: &Classifier<T>, meta: &CheckpointMeta) -> Result<()> {
    classifier_container(model, meta)?.write(path)
}

pub fn classifier_from_container<T: Real>(c: &Container) -> Result<(Classifier<T>, CheckpointMeta)> {
    let spec: NetworkSpec = from_toml(c.text("SPEC")?)?;
    let meta: CheckpointMeta = from_toml(c.text("META")?)?;
    let covmeta: CovarianceMeta = from_toml(c.text("COVMETA")?)?;
    let params = c.tensors("PARAMS")?.iter().map(|(_, t)| t.cast()).collect();
    let style = c.tensors("STYLE")?;
    let get = |name: &str| {
        style
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Format(format!("STYLE section lacks {name}")))
    };
    let covariance = CovarianceEstimate {
        mean: get("mean")?.into_data(),
        cov: get("cov")?,
        ema_decay: covmeta.ema_decay,
        shrinkage: covmeta.shrinkage,
    };
    let model = Classifier::from_parts(spec, params, get("style_map")?, covariance)?;
    Ok((model, meta))
}

pub fn load_classifier<T: Real>(path: &Path) -> Result<(Classifier<T>, CheckpointMeta)> {
    classifier_from_container(&Container::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct SynthHeader {
    config: SyntheticCausalConfig,
    seed: u64,
    samples: usize,
}

fn usize_tensor(v: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(v.iter().map(|&x| x as f64).collect())
}

fn usize_vec(t: &Tensor<f64>) -> Vec<usize> {
    t.data().iter().map(|&v| v as usize).collect()
}

/// Synthetic dataset in a container with a `SYNTH1` section.
pub fn save_synth(path: &Path, ds: &SynthDataset) -> Result<()> {
    let mut c = Container::new();
    let header = SynthHeader {
        config: ds.cfg.clone(),
        seed: ds.seed,
        samples: ds.data.len(),
    };
    c.push_text("SYNTH1", to_toml(&header)?);
    c.push_tensors(
        "SYNTH1.DATA",
        vec![
            ("x".into(), ds.data.x.clone()),
            ("y".into(), usize_tensor(&ds.data.y)),
            ("styles".into(), usize_tensor(ds.data.styles.as_deref().unwrap_or(&[]))),
            ("content".into(), ds.content.clone()),
            ("style_raw".into(), ds.style_raw.clone()),
            ("style".into(), ds.style.clone()),
        ],
    );
    c.write(path)
}

pub fn load_synth(path: &Path) -> Result<SynthDataset> {
    let c = Container::read(path)?;
    let header: SynthHeader = from_toml(c.text("SYNTH1")?)?;
    let ts = c.tensors("SYNTH1.DATA")?;
    let get = |name: &str| {
        ts.iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Format(format!("SYNTH1.DATA lacks {name}")))
    };
    let data = Dataset::new(
        get("x")?,
        usize_vec(&get("y")?),
        Some(usize_vec(&get("styles")?)),
        header.config.classes,
    )?;
    if data.len() != header.samples {
        return Err(Error::Format(format!("header declares {} samples, found {}", header.samples, data.len())));
    }
    Ok(SynthDataset {
        data,
        content: get("content")?,
        style_raw: get("style_raw")?,
        style: get("style")?,
        cfg: header.config,
        seed: header.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::models::build_classifier;

    #[test]
    fn classifier_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cadv");
        let m = build_classifier::<f64>(NetworkSpec::mlp(4, vec![7], 3).with_style_dim(3), 5).unwrap();
        let meta = CheckpointMeta {
            kind: "best".into(),
            epoch: 3,
            robust_val_acc: Some(0.5),
            natural_val_acc: None,
            precision: "f64".into(),
        };
        save_classifier(&path, &m, &meta).unwrap();
        let (back, meta2) = load_classifier::<f64>(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Container::from_bytes(b"CADV0....").is_err());
        let mut c = Container::new();
        c.push_text("A", "x = 1");
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn synth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.cadv");
        let ds = synth_generate(&SyntheticCausalConfig::default(), 50, 1).unwrap();
        save_synth(&path, &ds).unwrap();
        assert_eq!(load_synth(&path).unwrap(), ds);
        assert!(Container::read(&path).unwrap().tags().contains(&"SYNTH1"));
    }
}
