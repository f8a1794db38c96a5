//! Low-rank adapters on the query/value projections, classification heads,
//! and the `LRCY` binary container shared by adapters and model weights.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ArtifactError, Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::vit::{ViT, ViTConfig};

pub const INIT_STD: f64 = 0.02;
pub const MAGIC: [u8; 4] = *b"LRCY";
pub const FORMAT_VERSION: u32 = 1;

/// One `(A, B)` pair: `A` is `[D, r]`, `B` is `[r, D]`.
pub type LowRank<F> = (Tensor<F>, Tensor<F>);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub task_id: String,
    pub class_names: Vec<String>,
    pub seed: u64,
}

/// Adapter attached to the query and value projections of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoRAAdapter<F: Scalar = f32> {
    pub rank: usize,
    pub embed_dim: usize,
    pub query: Vec<LowRank<F>>,
    pub value: Vec<LowRank<F>>,
    pub meta: AdapterMeta,
}

/// Graph handles of a bound adapter, indexed by layer.
#[derive(Clone, Debug)]
pub struct LoraVars {
    pub query: Vec<Option<(Var, Var)>>,
    pub value: Vec<Option<(Var, Var)>>,
}

impl LoraVars {
    pub fn all(&self) -> Vec<Var> {
        self.query.iter().chain(&self.value).flatten().flat_map(|(a, b)| [*a, *b]).collect()
    }
}

fn check_rank(cfg: &ViTConfig, rank: usize) -> Result<()> {
    cfg.validate()?;
    if rank == 0 || rank > cfg.embed_dim {
        return Err(Error::Config(format!("rank {} outside 1..={}", rank, cfg.embed_dim)));
    }
    if rank * 4 > cfg.embed_dim {
        log::warn!("rank {} is not small relative to embed dim {}", rank, cfg.embed_dim);
    }
    Ok(())
}

impl<F: Scalar> LoRAAdapter<F> {
    fn sample(cfg: &ViTConfig, rank: usize, seed: u64, b_std: Option<f64>) -> Result<Self> {
        check_rank(cfg, rank)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let pair = |rng: &mut ChaCha8Rng| {
            let a = Tensor::randn(&[d, rank], 0.0, INIT_STD, rng);
            let b = match b_std {
                Some(s) => Tensor::randn(&[rank, d], 0.0, s, rng),
                None => Tensor::zeros(&[rank, d]),
            };
            (a, b)
        };
        let query = (0..cfg.depth).map(|_| pair(&mut rng)).collect();
        let value = (0..cfg.depth).map(|_| pair(&mut rng)).collect();
        Ok(LoRAAdapter { rank, embed_dim: d, query, value, meta: AdapterMeta { seed, ..Default::default() } })
    }

    /// Gaussian `A`, zero `B`: attaching it changes nothing.
    pub fn new(cfg: &ViTConfig, rank: usize, seed: u64) -> Result<Self> {
        Self::sample(cfg, rank, seed, None)
    }

    /// Both `A` and `B` Gaussian with the init std; a non-trivial untrained adapter.
    pub fn random(cfg: &ViTConfig, rank: usize, seed: u64) -> Result<Self> {
        Self::sample(cfg, rank, seed, Some(INIT_STD))
    }

    pub fn depth(&self) -> usize {
        self.query.len()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        self.query.iter().chain(&self.value).flat_map(|(a, b)| [a, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.query.iter_mut().chain(self.value.iter_mut()).flat_map(|(a, b)| [a, b]).collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (site, pairs) in [("q", &self.query), ("v", &self.value)] {
            for (l, (a, b)) in pairs.iter().enumerate() {
                out.push((format!("lora.{}.{}.A", l, site), a));
                out.push((format!("lora.{}.{}.B", l, site), b));
            }
        }
        out
    }

    /// Errors unless the adapter fits `cfg`.
    pub fn check_compatible(&self, cfg: &ViTConfig) -> Result<()> {
        if self.depth() != cfg.depth || self.value.len() != cfg.depth || self.embed_dim != cfg.embed_dim {
            return Err(Error::Incompatible(format!(
                "adapter (depth {}, dim {}) does not fit model (depth {}, dim {})",
                self.depth(),
                self.embed_dim,
                cfg.depth,
                cfg.embed_dim
            )));
        }
        Ok(())
    }

    /// Low-rank update `A·B` of one site.
    pub fn delta(&self, layer: usize, value_site: bool) -> Tensor<F> {
        let (a, b) = if value_site { &self.value[layer] } else { &self.query[layer] };
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let p = g.matmul(av, bv).expect("adapter shapes");
        g.value(p).clone()
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> LoraVars {
        let mut leaf = |t: &Tensor<F>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let query = self.query.iter().map(|(a, b)| Some((leaf(a), leaf(b)))).collect();
        let value = self.value.iter().map(|(a, b)| Some((leaf(a), leaf(b)))).collect();
        LoraVars { query, value }
    }

    pub fn cast<G: Scalar>(&self) -> LoRAAdapter<G> {
        let conv = |p: &Vec<LowRank<F>>| p.iter().map(|(a, b)| (a.cast(), b.cast())).collect();
        LoRAAdapter {
            rank: self.rank,
            embed_dim: self.embed_dim,
            query: conv(&self.query),
            value: conv(&self.value),
            meta: self.meta.clone(),
        }
    }
}

/// Elementwise mean of the `A` and `B` matrices of equally shaped adapters.
pub fn average_adapters<F: Scalar>(adapters: &[&LoRAAdapter<F>]) -> Result<LoRAAdapter<F>> {
    let first = *adapters.first().ok_or_else(|| Error::Count("cannot average zero adapters".into()))?;
    for a in adapters {
        if a.rank != first.rank || a.depth() != first.depth() || a.embed_dim != first.embed_dim {
            return Err(Error::Incompatible(format!(
                "rank {} depth {} vs rank {} depth {}",
                a.rank,
                a.depth(),
                first.rank,
                first.depth()
            )));
        }
    }
    let mut out = first.clone();
    out.meta = AdapterMeta { task_id: "average".into(), class_names: Vec::new(), seed: 0 };
    let n = adapters.len() as f64;
    let sources: Vec<Vec<&Tensor<F>>> = adapters.iter().map(|a| a.tensors()).collect();
    for (i, dst) in out.params_mut().into_iter().enumerate() {
        // summing in sorted order keeps the mean bit-identical under input permutation
        let mut vals: Vec<f64> = Vec::with_capacity(adapters.len());
        for (k, slot) in dst.data_mut().iter_mut().enumerate() {
            vals.clear();
            vals.extend(sources.iter().map(|s| s[i].data()[k].to_f64().unwrap_or(f64::NAN)));
            vals.sort_by(f64::total_cmp);
            *slot = F::c(vals.iter().sum::<f64>() / n);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationHead<F: Scalar = f32> {
    /// `[D, C]`.
    pub weight: Tensor<F>,
    /// `[C]`.
    pub bias: Tensor<F>,
    pub class_names: Vec<String>,
}

impl<F: Scalar> ClassificationHead<F> {
    pub fn new(embed_dim: usize, class_names: Vec<String>, seed: u64) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::Config(format!("head needs at least 2 classes, got {}", class_names.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = class_names.len();
        Ok(ClassificationHead {
            weight: Tensor::randn(&[embed_dim, c], 0.0, INIT_STD, &mut rng),
            bias: Tensor::zeros(&[c]),
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if c < 2 || self.weight.ndim() != 2 || self.weight.shape()[1] != c || self.bias.shape() != [c] {
            return Err(Error::Validation(format!(
                "head weight {:?} bias {:?} with {} labels",
                self.weight.shape(),
                self.bias.shape(),
                c
            )));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> (Var, Var) {
        if trainable {
            (g.param(self.weight.clone()), g.param(self.bias.clone()))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        }
    }

    pub fn cast<G: Scalar>(&self) -> ClassificationHead<G> {
        ClassificationHead { weight: self.weight.cast(), bias: self.bias.cast(), class_names: self.class_names.clone() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    count: u64,
}

/// Serializes named f32 tensors with a JSON metadata block.
///
/// Layout: magic, version (u32 LE), metadata length (u32 LE) + UTF-8 JSON,
/// tensor count (u32 LE), per tensor `name len (u32) | name | ndim (u32) |
/// dims (u64 each) | byte offset (u64) | element count (u64)`, payload length
/// (u64), payload of f32 LE values, CRC32 of the payload (u32 LE).
pub fn encode_container(meta: &serde_json::Value, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let meta_bytes = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    let mut payload = Vec::with_capacity(offset as usize);
    for (_, t) in tensors {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ArtifactError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| ArtifactError::Truncated(format!("{} at byte {}", what, self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ArtifactError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ArtifactError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Inverse of [`encode_container`].
pub fn decode_container(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor<f32>)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ArtifactError::BadMagic(magic).into());
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(ArtifactError::UnsupportedVersion(version).into());
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| ArtifactError::Malformed(format!("metadata: {}", e)))?;
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(nlen, "name")?.to_vec())
            .map_err(|_| ArtifactError::Malformed("tensor name is not UTF-8".into()))?;
        let ndim = r.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(ArtifactError::Malformed(format!("{}: ndim {}", name, ndim)).into());
        }
        let shape = (0..ndim).map(|_| r.u64("dim").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let offset = r.u64("offset")?;
        let count = r.u64("count")?;
        entries.push(TensorEntry { name, shape, offset, count });
    }
    let payload_len = r.u64("payload length")? as usize;
    let payload = r.take(payload_len, "payload")?;
    let stored = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(ArtifactError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(ArtifactError::Checksum { stored, computed }.into());
    }
    let mut sorted: Vec<&TensorEntry> = entries.iter().collect();
    sorted.sort_by_key(|e| e.offset);
    let mut cursor = 0u64;
    for e in &sorted {
        if e.offset < cursor {
            return Err(ArtifactError::Malformed(format!("{} overlaps a previous tensor", e.name)).into());
        }
        cursor = e.offset + 4 * e.count;
    }
    if cursor > payload_len as u64 {
        return Err(ArtifactError::Truncated(format!("payload holds {} bytes, directory needs {}", payload_len, cursor)).into());
    }
    let tensors = entries
        .into_iter()
        .map(|e| {
            if e.shape.iter().product::<usize>() as u64 != e.count {
                return Err(ArtifactError::Malformed(format!("{}: shape {:?} vs count {}", e.name, e.shape, e.count)).into());
            }
            let start = e.offset as usize;
            let data = payload[start..start + 4 * e.count as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok((e.name, Tensor::new(e.shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((meta, tensors))
}

/// Writes via a sibling temp file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_container(path: &Path, meta: &serde_json::Value, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    write_atomic(path, &encode_container(meta, tensors)?)
}

pub fn load_container(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor<f32>)>)> {
    decode_container(&fs::read(path)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArtifactMeta {
    kind: String,
    rank: usize,
    depth: usize,
    embed_dim: usize,
    adapter: AdapterMeta,
    head_classes: Option<Vec<String>>,
    #[serde(default)]
    extra: serde_json::Value,
}

fn take(map: &mut BTreeMap<String, Tensor<f32>>, name: &str) -> Result<Tensor<f32>> {
    map.remove(name).ok_or_else(|| ArtifactError::Malformed(format!("missing tensor {}", name)).into())
}

/// Encodes an adapter and optional head, with free-form extra metadata.
pub fn encode_artifact(
    adapter: &LoRAAdapter,
    head: Option<&ClassificationHead>,
    extra: serde_json::Value,
) -> Result<Vec<u8>> {
    let meta = ArtifactMeta {
        kind: "lora".into(),
        rank: adapter.rank,
        depth: adapter.depth(),
        embed_dim: adapter.embed_dim,
        adapter: adapter.meta.clone(),
        head_classes: head.map(|h| h.class_names.clone()),
        extra,
    };
    let mut tensors = adapter.named_tensors();
    if let Some(h) = head {
        h.validate()?;
        tensors.push(("head.weight".into(), &h.weight));
        tensors.push(("head.bias".into(), &h.bias));
    }
    encode_container(&serde_json::to_value(meta)?, &tensors)
}

pub type Artifact = (LoRAAdapter, Option<ClassificationHead>, serde_json::Value);

pub fn decode_artifact(bytes: &[u8]) -> Result<Artifact> {
    let (meta, tensors) = decode_container(bytes)?;
    let meta: ArtifactMeta =
        serde_json::from_value(meta).map_err(|e| ArtifactError::Malformed(format!("artifact metadata: {}", e)))?;
    if meta.kind != "lora" {
        return Err(ArtifactError::Malformed(format!("expected a lora artifact, found '{}'", meta.kind)).into());
    }
    let mut map: BTreeMap<String, Tensor<f32>> = tensors.into_iter().collect();
    let mut pairs = |site: &str| -> Result<Vec<LowRank<f32>>> {
        (0..meta.depth)
            .map(|l| {
                let a = take(&mut map, &format!("lora.{}.{}.A", l, site))?;
                let b = take(&mut map, &format!("lora.{}.{}.B", l, site))?;
                if a.shape() != [meta.embed_dim, meta.rank] || b.shape() != [meta.rank, meta.embed_dim] {
                    return Err(ArtifactError::Malformed(format!("layer {} {} shapes {:?} {:?}", l, site, a.shape(), b.shape())).into());
                }
                Ok((a, b))
            })
            .collect()
    };
    let query = pairs("q")?;
    let value = pairs("v")?;
    let adapter = LoRAAdapter { rank: meta.rank, embed_dim: meta.embed_dim, query, value, meta: meta.adapter };
    let head = match meta.head_classes {
        Some(class_names) => {
            let h = ClassificationHead { weight: take(&mut map, "head.weight")?, bias: take(&mut map, "head.bias")?, class_names };
            h.validate().map_err(|e| ArtifactError::Malformed(e.to_string()))?;
            Some(h)
        }
        None => None,
    };
    Ok((adapter, head, meta.extra))
}

pub fn save_artifact(path: &Path, adapter: &LoRAAdapter, head: Option<&ClassificationHead>, extra: serde_json::Value) -> Result<()> {
    write_atomic(path, &encode_artifact(adapter, head, extra)?)
}

pub fn load_artifact(path: &Path) -> Result<Artifact> {
    decode_artifact(&fs::read(path)?)
}

/// Stable content hash of a model's weights and configuration.
pub fn fingerprint(vit: &ViT) -> String {
    let mut h = crc32fast::Hasher::new();
    h.update(serde_json::to_string(&vit.cfg).expect("config serializes").as_bytes());
    for (name, t) in vit.named_params() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(&v.to_le_bytes());
        }
    }
    format!("{:08x}", h.finalize())
}

pub fn save_model(path: &Path, vit: &ViT) -> Result<()> {
    let meta = serde_json::json!({ "kind": "vit", "config": vit.cfg, "fingerprint": fingerprint(vit) });
    save_container(path, &meta, &vit.named_params())
}

pub fn load_model(path: &Path) -> Result<ViT> {
    let (meta, tensors) = load_container(path)?;
    if meta.get("kind").and_then(|k| k.as_str()) != Some("vit") {
        return Err(ArtifactError::Malformed("container does not hold model weights".into()).into());
    }
    let cfg: ViTConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| ArtifactError::Malformed(format!("model config: {}", e)))?;
    ViT::from_named(cfg, tensors.into_iter().collect())
}
