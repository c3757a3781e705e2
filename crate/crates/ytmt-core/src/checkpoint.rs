//! Self-describing checkpoint container: magic, format version, config
//! echo, named little-endian f32 parameter blobs, optional optimizer
//! moments, and the iteration counter. Writing is byte-deterministic:
//! parameters serialize in registration order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"YTMTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Optimizer moments aligned index-for-index with `params`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Serialized run configuration, echoed verbatim for compatibility
    /// checks; the container does not interpret it.
    pub config_echo: String,
    pub iteration: u64,
    pub params: Vec<SavedParam>,
    pub adam: Option<AdamSnapshot>,
}

impl Checkpoint {
    /// Snapshot every parameter of a store.
    pub fn from_store(
        store: &ParamStore,
        config_echo: impl Into<String>,
        iteration: u64,
        adam: Option<AdamSnapshot>,
    ) -> Result<Checkpoint> {
        let params: Vec<SavedParam> = store
            .iter()
            .map(|(_, e)| SavedParam {
                name: e.name.clone(),
                trainable: e.trainable,
                shape: e.shape.dims().to_vec(),
                data: e.data.clone(),
            })
            .collect();
        if let Some(a) = &adam {
            if a.m.len() != params.len() || a.v.len() != params.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer snapshot covers {} parameters, store has {}",
                    a.m.len(),
                    params.len()
                )));
            }
        }
        Ok(Checkpoint { version: VERSION, config_echo: config_echo.into(), iteration, params, adam })
    }

    /// Copy saved values into a store whose registered parameters must
    /// match one-for-one (same names, same shapes, same order).
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        if ids.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, store has {}",
                self.params.len(),
                ids.len()
            )));
        }
        for (id, saved) in ids.iter().zip(&self.params) {
            let entry = store.entry(*id);
            if entry.name != saved.name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch: store has {:?}, checkpoint has {:?}",
                    entry.name, saved.name
                )));
            }
            if entry.shape.dims() != saved.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {:?}: store {:?}, checkpoint {:?}",
                    saved.name,
                    entry.shape.dims(),
                    saved.shape
                )));
            }
            store.set_data(*id, saved.data.clone())?;
        }
        Ok(())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

/// Serialize to bytes (exposed for determinism tests).
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(ckpt.version);
    w.u64(ckpt.iteration);
    w.bytes(ckpt.config_echo.as_bytes());
    w.u64(ckpt.params.len() as u64);
    for p in &ckpt.params {
        w.bytes(p.name.as_bytes());
        w.u8(p.trainable as u8);
        w.u64(p.shape.len() as u64);
        for d in &p.shape {
            w.u64(*d as u64);
        }
        w.f32s(&p.data);
    }
    match &ckpt.adam {
        None => w.u8(0),
        Some(a) => {
            w.u8(1);
            w.u64(a.step);
            for (m, v) in a.m.iter().zip(&a.v) {
                w.f32s(m);
                w.f32s(v);
            }
        }
    }
    w.buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} overflows")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Deserialize from bytes, validating magic and version.
pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, not a checkpoint file",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, this build reads version {VERSION}"
        )));
    }
    let iteration = r.u64()?;
    let config_echo = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
    let count = r.len()?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let trainable = r.u8()? != 0;
        let rank = r.len()?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank} for {name:?}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel)?;
        params.push(SavedParam { name, trainable, shape, data });
    }
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for p in &params {
                let numel: usize = p.shape.iter().product();
                m.push(r.f32s(numel)?);
                v.push(r.f32s(numel)?);
            }
            Some(AdamSnapshot { step, m, v })
        }
        other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint { version, config_echo, iteration, params, adam })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, to_bytes(ckpt))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf =
        fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Conv2d;
    use crate::params::ParamStore;

    fn store_fixture() -> ParamStore {
        let mut store = ParamStore::new(2024);
        Conv2d::register(&mut store, "a.conv", 3, 4, 3, 1).unwrap();
        Conv2d::register(&mut store, "b.conv", 4, 2, 1, 1).unwrap();
        store.set_trainable_by_prefix("b", false);
        store
    }

    fn adam_fixture(store: &ParamStore) -> AdamSnapshot {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (k, (_, e)) in store.iter().enumerate() {
            m.push(vec![0.25 * k as f32; e.shape.numel()]);
            v.push(vec![0.5 + k as f32; e.shape.numel()]);
        }
        AdamSnapshot { step: 17, m, v }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let store = store_fixture();
        let adam = adam_fixture(&store);
        let ckpt =
            Checkpoint::from_store(&store, "config-echo { x = 1 }", 123, Some(adam)).unwrap();
        let bytes = to_bytes(&ckpt);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(back.params[0].name, "a.conv.weight");
        assert!(back.params[0].trainable);
        assert!(!back.params[2].trainable, "frozen flag must survive");
        // serialization is byte-deterministic
        assert_eq!(bytes, to_bytes(&back));
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("ytmt-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");
        let store = store_fixture();
        let ckpt = Checkpoint::from_store(&store, "echo", 7, None).unwrap();
        write_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ckpt);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let store = store_fixture();
        let ckpt = Checkpoint::from_store(&store, "echo", 0, None).unwrap();
        let bytes = to_bytes(&ckpt);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let err = from_bytes(&bad_magic).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bad_version = bytes.clone();
        bad_version[8] = 99;
        let err = from_bytes(&bad_version).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        let truncated = &bytes[..bytes.len() - 3];
        assert!(from_bytes(truncated).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        let err = from_bytes(&trailing).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn restore_into_matching_store() {
        let mut src = store_fixture();
        // perturb so restored values are distinguishable from fresh init
        let ids: Vec<_> = src.iter().map(|(id, e)| (id, e.shape.numel())).collect();
        for (id, n) in &ids {
            src.set_data(*id, vec![0.125; *n]).unwrap();
        }
        let ckpt = Checkpoint::from_store(&src, "echo", 5, None).unwrap();

        let mut dst = store_fixture();
        ckpt.restore_into(&mut dst).unwrap();
        for (id, _) in dst.iter().map(|(id, _)| (id, ())).collect::<Vec<_>>() {
            assert!(dst.entry(id).data.iter().all(|&v| v == 0.125));
        }
    }

    #[test]
    fn restore_rejects_mismatched_store() {
        let store = store_fixture();
        let ckpt = Checkpoint::from_store(&store, "echo", 0, None).unwrap();

        let mut fewer = ParamStore::new(2024);
        Conv2d::register(&mut fewer, "a.conv", 3, 4, 3, 1).unwrap();
        assert!(ckpt.restore_into(&mut fewer).is_err());

        let mut renamed = ParamStore::new(2024);
        Conv2d::register(&mut renamed, "z.conv", 3, 4, 3, 1).unwrap();
        Conv2d::register(&mut renamed, "b.conv", 4, 2, 1, 1).unwrap();
        let err = ckpt.restore_into(&mut renamed).unwrap_err();
        assert!(err.to_string().contains("a.conv"), "{err}");

        let mut reshaped = ParamStore::new(2024);
        Conv2d::register(&mut reshaped, "a.conv", 3, 4, 5, 1).unwrap();
        Conv2d::register(&mut reshaped, "b.conv", 4, 2, 1, 1).unwrap();
        let err = ckpt.restore_into(&mut reshaped).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }
}
