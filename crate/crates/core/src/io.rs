//! On-disk formats: dataset directories, network archives and JSON files.
//!
//! A dataset directory holds `meta.json` and `data.bin`; each record of
//! `data.bin` is one label byte followed by `C·H·W` pixel bytes (channel,
//! row, column order). A network archive is the magic `TLN1`, a `u32`
//! format version, a `u64` header length, a JSON header describing units,
//! layers and tensor shapes, then every tensor as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, LayerSpec, Network, Parameters, Unit, UnitRole};
use crate::tensor::Tensor;
use crate::tln::{PretrainedNetwork, SourceMeta, Tln};
use crate::train::{ChannelStats, Dataset};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"TLN1";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub class_names: Vec<String>,
    /// `[C, H, W]`
    pub dims: [usize; 3],
    pub count: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        name: ds.name.clone(),
        class_names: ds.class_names.clone(),
        dims: ds.dims,
        count: ds.len(),
        mean: ds.stats.mean.clone(),
        std: ds.stats.std.clone(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    let mut bytes = Vec::with_capacity(ds.len() * (ds.sample_len() + 1));
    for i in 0..ds.len() {
        bytes.push(ds.labels()[i]);
        bytes.extend_from_slice(ds.raw(i));
    }
    fs::write(dir.join("data.bin"), bytes)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    let data_path = dir.join("data.bin");
    let bytes = fs::read(&data_path)?;
    let sample: usize = meta.dims.iter().product();
    let expected = meta.count as u64 * (sample as u64 + 1);
    if bytes.len() as u64 != expected || sample == 0 {
        return Err(Error::CorruptDataset {
            path: data_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut pixels = Vec::with_capacity(meta.count * sample);
    let mut labels = Vec::with_capacity(meta.count);
    for record in bytes.chunks_exact(sample + 1) {
        labels.push(record[0]);
        pixels.extend_from_slice(&record[1..]);
    }
    Dataset::with_stats(
        meta.name,
        meta.class_names,
        meta.dims,
        pixels,
        labels,
        ChannelStats {
            mean: meta.mean,
            std: meta.std,
        },
    )
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    field: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerHeader {
    spec: LayerSpec,
    tensors: Vec<TensorHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct UnitHeader {
    name: String,
    role: UnitRole,
    layers: Vec<LayerHeader>,
}

/// What the archive holds besides the network itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchiveKind {
    Pretrained { meta: SourceMeta },
    Tln { n: usize, kappa: usize, tau: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    content: ArchiveKind,
    input_shape: Vec<usize>,
    units: Vec<UnitHeader>,
}

pub fn encode_network(net: &Network, content: ArchiveKind) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let units = net
        .units
        .iter()
        .map(|u| UnitHeader {
            name: u.name.clone(),
            role: u.role,
            layers: u
                .layers
                .iter()
                .map(|l| LayerHeader {
                    spec: l.spec.clone(),
                    tensors: l
                        .params
                        .named()
                        .into_iter()
                        .filter_map(|(field, t)| t.map(|t| (field, t)))
                        .map(|(field, t)| {
                            payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
                            TensorHeader {
                                field: field.to_string(),
                                shape: t.shape().to_vec(),
                            }
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        content,
        input_shape: net.input_shape.clone(),
        units,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Archive(format!(
            "truncated while reading {what}: need {n} bytes, {} left",
            bytes.len()
        )));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode_network(mut bytes: &[u8]) -> Result<(Network, ArchiveKind)> {
    let rest = &mut bytes;
    if take(rest, 4, "magic")? != ARCHIVE_MAGIC {
        return Err(Error::Archive("missing TLN1 magic".into()));
    }
    let version = u32::from_le_bytes(take(rest, 4, "version")?.try_into().expect("4 bytes"));
    if version != ARCHIVE_VERSION {
        return Err(Error::Archive(format!(
            "unsupported archive version {version}"
        )));
    }
    let len = u64::from_le_bytes(take(rest, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Archive("header length overflow".into()))?;
    let header: Header = serde_json::from_slice(take(rest, len, "header")?)
        .map_err(|e| Error::Archive(format!("bad header: {e}")))?;
    let mut units = Vec::with_capacity(header.units.len());
    for u in header.units {
        let mut layers = Vec::with_capacity(u.layers.len());
        for l in u.layers {
            let mut params = Parameters::default();
            for t in l.tensors {
                let count: usize = t.shape.iter().product();
                let raw = take(
                    rest,
                    count * 8,
                    &format!("tensor {}.{}", l.spec.name, t.field),
                )?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                params.set_named(&t.field, Tensor::new(t.shape, data)?)?;
            }
            layers.push(Layer {
                spec: l.spec,
                params,
            });
        }
        units.push(Unit {
            name: u.name,
            role: u.role,
            layers,
        });
    }
    if !rest.is_empty() {
        return Err(Error::Archive(format!("{} trailing bytes", rest.len())));
    }
    Ok((Network::new(header.input_shape, units)?, header.content))
}

pub fn save_pretrained(chi: &PretrainedNetwork, path: &Path) -> Result<()> {
    let bytes = encode_network(
        &chi.network,
        ArchiveKind::Pretrained {
            meta: chi.meta.clone(),
        },
    )?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_pretrained(path: &Path) -> Result<PretrainedNetwork> {
    match decode_network(&fs::read(path)?)? {
        (network, ArchiveKind::Pretrained { meta }) => PretrainedNetwork::new(network, meta),
        _ => Err(Error::Archive(format!(
            "{} holds a TLN, not a pretrained network",
            path.display()
        ))),
    }
}

pub fn save_tln(tln: &Tln, path: &Path) -> Result<()> {
    let bytes = encode_network(
        &tln.network,
        ArchiveKind::Tln {
            n: tln.n,
            kappa: tln.kappa,
            tau: tln.tau,
        },
    )?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_tln(path: &Path) -> Result<Tln> {
    match decode_network(&fs::read(path)?)? {
        (network, ArchiveKind::Tln { n, kappa, tau }) => Ok(Tln {
            network,
            n,
            kappa,
            tau,
        }),
        _ => Err(Error::Archive(format!(
            "{} holds a pretrained network, not a TLN",
            path.display()
        ))),
    }
}
