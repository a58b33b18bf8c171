//! Synthetic cross-domain few-shot episodes.
//!
//! A domain maps latent class samples `z = mean + σ·ε` into input space by
//! an orthogonal mixing, a per-coordinate scale and an offset, optionally
//! followed by a soft `tanh` saturation. Out-of-distribution domains draw a
//! much wider spread of scales, which is what bias adaptation has to absorb.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Base,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn key(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Knobs of the domain generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainParams {
    pub mean_radius: f64,
    pub sigma_class: f64,
    /// Std of log-scale per coordinate.
    pub base_log_scale: f64,
    pub ood_log_scale: f64,
    pub base_offset: f64,
    pub ood_offset: f64,
    /// `x ↦ g·tanh(x/g)` applied to OOD inputs when set.
    pub ood_tanh_gain: Option<f64>,
}

impl Default for DomainParams {
    fn default() -> Self {
        DomainParams {
            mean_radius: 1.0,
            sigma_class: 0.8,
            base_log_scale: 0.4,
            ood_log_scale: 0.5,
            base_offset: 0.5,
            ood_offset: 1.0,
            ood_tanh_gain: Some(3.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: u32,
    pub d: usize,
    pub severity: Severity,
    /// Row-major `d × d` orthogonal matrix.
    pub mixing: Vec<f64>,
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub mean_radius: f64,
    pub sigma_class: f64,
    pub tanh_gain: Option<f64>,
}

impl DomainSpec {
    /// Maps one latent sample into the domain's input space.
    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        let d = self.d;
        (0..d)
            .map(|i| {
                let mixed: f64 = (0..d).map(|j| self.mixing[i * d + j] * z[j]).sum();
                let v = self.scale[i] * mixed + self.offset[i];
                match self.tanh_gain {
                    Some(g) => g * (v / g).tanh(),
                    None => v,
                }
            })
            .collect()
    }

    /// Frobenius norm of `QᵀQ − I`.
    pub fn orthogonality_defect(&self) -> f64 {
        let d = self.d;
        let mut acc = 0.0;
        for a in 0..d {
            for b in 0..d {
                let dot: f64 = (0..d).map(|i| self.mixing[i * d + a] * self.mixing[i * d + b]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                acc += (dot - target).powi(2);
            }
        }
        acc.sqrt()
    }
}

/// Random orthogonal matrix: Gram–Schmidt with one re-orthogonalization
/// pass over Gaussian columns.
fn random_orthogonal(rng: &mut Rng, d: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v = rng::gaussian_vec(rng, d, 1.0);
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    let mut q = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            q[i * d + j] = c[i];
        }
    }
    q
}

/// `n_base` base domains followed by `n_ood` shifted ones; ids are
/// consecutive from 0.
pub fn make_domains(seed: u64, n_base: usize, n_ood: usize, d: usize, params: &DomainParams) -> Result<Vec<DomainSpec>> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("input dimension must be >= 2, got {d}")));
    }
    if n_base < 1 {
        return Err(Error::InvalidArgument("need at least one base domain".into()));
    }
    if !(params.sigma_class > 0.0) {
        return Err(Error::InvalidArgument("sigma_class must be > 0".into()));
    }
    let mut out = Vec::with_capacity(n_base + n_ood);
    for id in 0..n_base + n_ood {
        let severity = if id < n_base { Severity::Base } else { Severity::Ood };
        let mut rng = rng::stream(&[seed, rng::tag("domain"), id as u64]);
        let mixing = random_orthogonal(&mut rng, d);
        let (log_scale, off, tanh_gain) = match severity {
            Severity::Base => (params.base_log_scale, params.base_offset, None),
            Severity::Ood => (params.ood_log_scale, params.ood_offset, params.ood_tanh_gain),
        };
        let scale = (0..d).map(|_| (log_scale * rng::gaussian(&mut rng)).exp()).collect();
        let offset = rng::gaussian_vec(&mut rng, d, off);
        out.push(DomainSpec {
            id: id as u32,
            d,
            severity,
            mixing,
            scale,
            offset,
            mean_radius: params.mean_radius,
            sigma_class: params.sigma_class,
            tanh_gain,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Protocol {
    /// Way uniform in `[min_way, max_way]`, shots per class uniform in
    /// `[1, max_shot]`.
    Various {
        min_way: usize,
        max_way: usize,
        max_shot: usize,
        queries: usize,
    },
    Fixed {
        way: usize,
        shot: usize,
        queries: usize,
    },
}

impl Protocol {
    pub fn various() -> Self {
        Protocol::Various {
            min_way: 2,
            max_way: 5,
            max_shot: 10,
            queries: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub domain: u32,
    pub split: Split,
    pub way: usize,
    pub shots: Vec<usize>,
    /// Identity of each class's sampled mean; distinct across splits.
    pub class_ids: Vec<u64>,
    pub support: Vec<Example>,
    pub query: Vec<Example>,
}

impl Episode {
    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, |e| e.x.len())
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|e| e.y).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|e| e.y).collect()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        for ex in self.support.iter().chain(&self.query) {
            if ex.x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: ex.x.len(),
                });
            }
            if ex.y >= self.way {
                return Err(Error::InvalidArgument(format!(
                    "episode {}: label {} outside 0..{}",
                    self.id, ex.y, self.way
                )));
            }
        }
        let mut counts = vec![0usize; self.way];
        for ex in &self.support {
            counts[ex.y] += 1;
        }
        if counts != self.shots {
            return Err(Error::InvalidArgument(format!("episode {}: shots do not match support", self.id)));
        }
        if let Some(q) = self.query.iter().find(|q| counts[q.y] == 0) {
            return Err(Error::InvalidArgument(format!(
                "episode {}: query class {} has no support",
                self.id, q.y
            )));
        }
        Ok(())
    }
}

pub fn episode_id(seed: u64, domain: u32, split: Split, index: u64) -> u64 {
    rng::derive_seed(&[seed, u64::from(domain), split.key(), index])
}

/// Pure function of its arguments: one RNG stream per
/// `(seed, domain, split, index)`.
pub fn sample_episode(domain: &DomainSpec, protocol: Protocol, split: Split, index: u64, seed: u64) -> Episode {
    let id = episode_id(seed, domain.id, split, index);
    let mut rng = rng::stream(&[id]);
    let (way, shots, queries) = match protocol {
        Protocol::Various {
            min_way,
            max_way,
            max_shot,
            queries,
        } => {
            let way = rng.random_range(min_way..=max_way);
            let shots = (0..way).map(|_| rng.random_range(1..=max_shot)).collect();
            (way, shots, queries)
        }
        Protocol::Fixed { way, shot, queries } => (way, vec![shot; way], queries),
    };
    let d = domain.d;
    let means: Vec<Vec<f64>> = (0..way).map(|_| rng::gaussian_vec(&mut rng, d, domain.mean_radius)).collect();
    let class_ids = (0..way as u64).map(|c| rng::derive_seed(&[id, c])).collect();
    let draw = |c: usize, rng: &mut Rng| {
        let z: Vec<f64> = means[c]
            .iter()
            .map(|m| m + domain.sigma_class * rng::gaussian(rng))
            .collect();
        Example {
            x: domain.transform(&z),
            y: c,
        }
    };
    let mut support = Vec::new();
    for (c, &k) in shots.iter().enumerate() {
        for _ in 0..k {
            support.push(draw(c, &mut rng));
        }
    }
    let mut query = Vec::new();
    for c in 0..way {
        for _ in 0..queries {
            query.push(draw(c, &mut rng));
        }
    }
    Episode {
        id,
        domain: domain.id,
        split,
        way,
        shots,
        class_ids,
        support,
        query,
    }
}

pub const EPISODES_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    d: usize,
}

/// Serializes the JSON Lines interchange format; returns the bytes and the
/// byte offset of each episode line.
pub fn encode_episodes(episodes: &[Episode], d: usize) -> Result<(Vec<u8>, Vec<u64>)> {
    let mut buf = Vec::new();
    let header = Header {
        format: "hyperflow-episodes".into(),
        version: EPISODES_VERSION,
        d,
    };
    serde_json::to_writer(&mut buf, &header).expect("header serializes");
    buf.push(b'\n');
    let mut offsets = Vec::with_capacity(episodes.len());
    for ep in episodes {
        ep.validate(d)?;
        offsets.push(buf.len() as u64);
        serde_json::to_writer(&mut buf, ep).expect("episode serializes");
        buf.push(b'\n');
    }
    Ok((buf, offsets))
}

pub fn save_episodes(episodes: &[Episode], d: usize, path: &Path) -> Result<Vec<u64>> {
    let (buf, offsets) = encode_episodes(episodes, d)?;
    crate::binio::write_file(path, &buf)?;
    Ok(offsets)
}

pub fn load_episodes(path: &Path) -> Result<(usize, Vec<Episode>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_episodes(BufReader::new(file))
}

pub fn read_episodes(mut reader: impl BufRead) -> Result<(usize, Vec<Episode>)> {
    let mut offset = 0u64;
    let mut line = String::new();
    let mut next_line = |line: &mut String, offset: &mut u64| -> Result<Option<u64>> {
        line.clear();
        let at = *offset;
        let n = reader.read_line(line).map_err(|e| Error::Malformed {
            offset: at,
            detail: e.to_string(),
        })?;
        *offset += n as u64;
        Ok((n > 0).then_some(at))
    };
    let malformed = |at: u64, e: serde_json::Error| Error::Malformed {
        offset: at,
        detail: e.to_string(),
    };

    let at = next_line(&mut line, &mut offset)?.ok_or(Error::Truncated { offset: 0, needed: 1 })?;
    let header: Header = serde_json::from_str(&line).map_err(|e| malformed(at, e))?;
    if header.version != EPISODES_VERSION {
        return Err(Error::Version {
            expected: EPISODES_VERSION,
            found: header.version,
        });
    }
    let mut episodes = Vec::new();
    while let Some(at) = next_line(&mut line, &mut offset)? {
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| malformed(at, e))?;
        ep.validate(header.d)?;
        episodes.push(ep);
    }
    Ok((header.d, episodes))
}

/// Appends episodes as JSON lines, without header or validation.
pub fn write_lines(mut w: impl Write, episodes: &[Episode]) -> std::io::Result<()> {
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
