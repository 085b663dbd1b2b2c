//! Binary weight files.
//!
//! Layout (all integers little-endian): the 4-byte magic `MGTW`, a u32 format
//! version, then records until end of file. A record is a u32 path length, the
//! UTF-8 path, a u32 rank, `rank` u64 extents and the f64 payload.
//!
//! The first record, `meta/config`, stores the architecture as eight f64s:
//! base width, classes, input channels, groups, skip flag, layout, H, W.

use super::{DecoderLayout, MgtError, NetConfig, Network};

pub const WEIGHT_MAGIC: &[u8; 4] = b"MGTW";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;

const CONFIG_PATH: &str = "meta/config";

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub path: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    pub records: Vec<WeightRecord>,
}

impl WeightStore {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.path.len() as u32).to_le_bytes());
            out.extend_from_slice(r.path.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MgtError> {
        if bytes.len() < 8 || &bytes[..4] != WEIGHT_MAGIC {
            return Err(MgtError::VersionMismatch("missing MGTW magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != WEIGHT_FORMAT_VERSION {
            return Err(MgtError::VersionMismatch(format!(
                "format version {version}, this build reads {WEIGHT_FORMAT_VERSION}"
            )));
        }
        let mut r = Reader { bytes, pos: 8 };
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let path_len = r.u32()? as usize;
            let path = String::from_utf8(r.take(path_len)?.to_vec())
                .map_err(|_| MgtError::Parse(format!("record {} path is not UTF-8", records.len())))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| MgtError::Parse("extent overflows usize".into()))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| MgtError::Parse(format!("{path}: element count overflows")))?;
            let payload = r.take(count.checked_mul(8).ok_or_else(|| MgtError::Parse(format!("{path}: too large")))?)?;
            let values = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(WeightRecord { path, shape, values });
        }
        Ok(Self { records })
    }

    pub fn from_network(net: &Network) -> Self {
        let c = net.config();
        let layout = match c.layout {
            DecoderLayout::Stacked => 0.0,
            DecoderLayout::Interleaved => 1.0,
        };
        let meta = vec![
            c.base_width as f64,
            c.num_classes as f64,
            c.input_channels as f64,
            c.group_count as f64,
            if c.skip_connections { 1.0 } else { 0.0 },
            layout,
            c.input_extent.0 as f64,
            c.input_extent.1 as f64,
        ];
        let mut records = vec![WeightRecord {
            path: CONFIG_PATH.into(),
            shape: vec![meta.len()],
            values: meta,
        }];
        records.extend(net.params().into_iter().map(|(path, shape, values)| WeightRecord {
            path,
            shape,
            values: values.to_vec(),
        }));
        Self { records }
    }

    /// The architecture recorded in the `meta/config` record.
    pub fn config(&self) -> Result<NetConfig, MgtError> {
        let meta = self
            .records
            .first()
            .filter(|r| r.path == CONFIG_PATH)
            .ok_or_else(|| MgtError::PathMismatch {
                expected: CONFIG_PATH.into(),
                found: self.records.first().map(|r| r.path.clone()).unwrap_or_default(),
            })?;
        let v = &meta.values;
        if v.len() != 8 || v.iter().any(|x| !(x.is_finite() && *x >= 0.0 && x.fract() == 0.0)) {
            return Err(MgtError::Parse("meta/config must hold eight non-negative integers".into()));
        }
        let layout = match v[5] as u64 {
            0 => DecoderLayout::Stacked,
            1 => DecoderLayout::Interleaved,
            other => return Err(MgtError::Parse(format!("unknown decoder layout code {other}"))),
        };
        Ok(NetConfig {
            base_width: v[0] as usize,
            num_classes: v[1] as usize,
            input_channels: v[2] as usize,
            group_count: v[3] as usize,
            skip_connections: v[4] != 0.0,
            layout,
            input_extent: (v[6] as usize, v[7] as usize),
            seed: 0,
        })
    }

    /// Rebuilds the network; paths and shapes must match the recorded architecture exactly.
    pub fn to_network(&self) -> Result<Network, MgtError> {
        let mut net = Network::build(self.config()?)?;
        let expected = net.params();
        let stored = &self.records[1..];
        if stored.len() != expected.len() {
            let found = stored.get(expected.len()).map(|r| r.path.clone()).unwrap_or_else(|| "<end of file>".into());
            let exp = expected.get(stored.len()).map(|e| e.0.clone()).unwrap_or_else(|| "<end of file>".into());
            return Err(MgtError::PathMismatch { expected: exp, found });
        }
        for ((path, shape, _), rec) in expected.iter().zip(stored) {
            if *path != rec.path || *shape != rec.shape {
                return Err(MgtError::PathMismatch {
                    expected: format!("{path} {shape:?}"),
                    found: format!("{} {:?}", rec.path, rec.shape),
                });
            }
        }
        let values: Vec<Vec<f64>> = stored.iter().map(|r| r.values.clone()).collect();
        net.set_params(&values)?;
        Ok(net)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MgtError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| MgtError::Parse(format!("unexpected end of file at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, MgtError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, MgtError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_weights(net: &Network) -> Vec<u8> {
    WeightStore::from_network(net).to_bytes()
}

pub fn load_weights(bytes: &[u8]) -> Result<Network, MgtError> {
    WeightStore::from_bytes(bytes)?.to_network()
}
