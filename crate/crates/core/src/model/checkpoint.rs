//! Checkpoint files.
//!
//! A checkpoint at `PATH` is two files:
//!
//! * `PATH` – binary blob: the 8-byte magic `RNELUCKP`, one version byte,
//!   a little-endian `u64` value count, then that many little-endian `f32`
//!   values: every parameter in registry order followed by every BN running
//!   mean/variance pair (stem first, then blocks in order).
//! * `PATH.manifest` – UTF-8 text, one `key=value` per line, sorted by key.
//!   It carries the network configuration plus whatever run metadata the
//!   caller adds (seed, epoch, ...).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::network::{build_network, Network, NetworkConfig};
use super::variant::BlockVariant;

pub const MAGIC: &[u8; 8] = b"RNELUCKP";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = MAGIC.len() + 1 + 8;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        assert!(
            !key.contains(['=', '\n']) && !value.contains('\n'),
            "manifest keys/values must be single-line"
        );
        self.entries.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn parse_value<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::invalid("manifest", format!("missing key '{key}'")))?;
        raw.parse()
            .map_err(|_| Error::invalid("manifest", format!("bad value for '{key}': {raw}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("manifest", format!("line {}: expected key=value", lineno + 1)))?;
            m.entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(m)
    }

    fn put_config(&mut self, cfg: &NetworkConfig) {
        self.set("format_version", FORMAT_VERSION)
            .set("variant", cfg.variant)
            .set("depth_n", cfg.n)
            .set("classes", cfg.classes)
            .set("alpha", cfg.alpha)
            .set("head_elu", cfg.head_elu)
            .set(
                "widths",
                cfg.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
            );
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let variant: BlockVariant = self
            .get("variant")
            .ok_or_else(|| Error::invalid("manifest", "missing key 'variant'"))?
            .parse()?;
        let widths: Vec<usize> = self
            .get("widths")
            .unwrap_or("16,32,64")
            .split(',')
            .map(|w| w.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::invalid("manifest", "bad widths"))?;
        let widths: [usize; 3] = widths
            .try_into()
            .map_err(|_| Error::invalid("manifest", "widths must have three entries"))?;
        let cfg = NetworkConfig {
            n: self.parse_value("depth_n")?,
            classes: self.parse_value("classes")?,
            variant,
            alpha: self.parse_value("alpha")?,
            head_elu: self.parse_value("head_elu")?,
            widths,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest");
    PathBuf::from(os)
}

pub fn encode_blob(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_blob(path: &Path, bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() < HEADER_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "not a checkpoint blob (bad magic)"));
    }
    let version = bytes[MAGIC.len()];
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count_bytes: [u8; 8] = bytes[MAGIC.len() + 1..HEADER_LEN].try_into().expect("8 bytes");
    let count = u64::from_le_bytes(count_bytes) as usize;
    let body = &bytes[HEADER_LEN..];
    if count.checked_mul(4) != Some(body.len()) {
        return Err(Error::format(
            path,
            format!("header declares {count} values but body holds {} bytes", body.len()),
        ));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn write_blob(path: &Path, values: &[f32]) -> Result<()> {
    fs::write(path, encode_blob(values)).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_blob(path, &bytes)
}

/// Parameters then BN running statistics, flattened.
pub fn network_state(net: &Network<f32>) -> Vec<f32> {
    net.params()
        .into_iter()
        .chain(net.buffers())
        .flat_map(|s| s.iter().copied())
        .collect()
}

pub fn load_network_state(net: &mut Network<f32>, values: &[f32]) -> Result<()> {
    let expected: usize =
        net.params().iter().map(|p| p.len()).sum::<usize>() + net.buffers().iter().map(|b| b.len()).sum::<usize>();
    if values.len() != expected {
        return Err(Error::invalid(
            "checkpoint",
            format!("expected {expected} values for this network, found {}", values.len()),
        ));
    }
    let mut rest = values;
    for dst in net.params_mut() {
        let (head, tail) = rest.split_at(dst.len());
        dst.copy_from_slice(head);
        rest = tail;
    }
    for dst in net.buffers_mut() {
        let (head, tail) = rest.split_at(dst.len());
        dst.copy_from_slice(head);
        rest = tail;
    }
    Ok(())
}

/// Writes the blob and the manifest. Configuration keys in the manifest are
/// always taken from `net`, overriding any the caller set.
pub fn save_checkpoint(path: &Path, net: &Network<f32>, extra: &Manifest) -> Result<()> {
    let mut manifest = extra.clone();
    manifest.put_config(net.config());
    write_blob(path, &network_state(net))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, Manifest)> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = Manifest::from_text(&text)?;
    let cfg = manifest.network_config()?;
    let mut net = build_network(&cfg, &mut Rng::new(0))?;
    load_network_state(&mut net, &read_blob(path)?)?;
    Ok((net, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_header_layout() {
        let bytes = encode_blob(&[1.0, -2.5]);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes[8], FORMAT_VERSION);
        assert_eq!(u64::from_le_bytes(bytes[9..17].try_into().unwrap()), 2);
        assert_eq!(&bytes[17..21], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 17 + 8);
    }

    #[test]
    fn blob_rejects_corruption() {
        let p = Path::new("x");
        let mut bytes = encode_blob(&[1.0, 2.0]);
        assert!(decode_blob(p, &bytes[..bytes.len() - 1]).is_err());
        bytes[8] = 9;
        assert!(decode_blob(p, &bytes).is_err());
        assert!(decode_blob(p, b"garbage-bytes-here").is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let mut m = Manifest::new();
        m.set("seed", 42).set("alpha", 1.0f64).set("lr", 0.1f64);
        let back = Manifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.parse_value::<f64>("lr").unwrap(), 0.1);
        assert!(Manifest::from_text("novalue\n").is_err());
    }
}
