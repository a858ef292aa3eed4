//! Versioned binary checkpoints. Every f64 is stored as its IEEE-754 bit
//! pattern (little-endian), so a save/load roundtrip is bit-exact and a
//! resumed run continues identically to an uninterrupted one.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"DYNF";
const VERSION: u32 = 1;

/// A complete training snapshot: parameters, optimizer state, and the
/// distillation teacher bank, plus the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Last completed epoch (1-based; 0 = untrained).
    pub epoch: u64,
    /// Parameter tensors with their store names, in store order.
    pub params: Vec<(String, Tensor<f64>)>,
    /// Adam step count.
    pub adam_t: u64,
    /// First and second moments, aligned with `params` (same shapes).
    pub adam_m: Vec<Tensor<f64>>,
    pub adam_v: Vec<Tensor<f64>>,
    /// Epoch stamp of the teacher bank (the epoch whose routing it holds).
    pub bank_epoch: u64,
    /// Teacher routing logits per query id, sorted by query id.
    pub bank: Vec<(u64, Vec<f64>)>,
}

impl Checkpoint {
    fn validate(&self) -> Result<()> {
        if self.adam_m.len() != self.params.len() || self.adam_v.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer moments cover {}/{} tensors but there are {} parameters",
                self.adam_m.len(),
                self.adam_v.len(),
                self.params.len()
            )));
        }
        for (i, (name, p)) in self.params.iter().enumerate() {
            if self.adam_m[i].shape() != p.shape() || self.adam_v[i].shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "moment shape mismatch for parameter `{name}`"
                )));
            }
        }
        let sorted = self.bank.windows(2).all(|w| w[0].0 < w[1].0);
        if !sorted {
            return Err(Error::Checkpoint(
                "teacher bank entries must be sorted by unique query id".into(),
            ));
        }
        Ok(())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
    fn tensor_data(&mut self, t: &Tensor<f64>) {
        for v in t.data() {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "unexpected end of file at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        // A length can never exceed the remaining bytes; this bound turns
        // corrupt lengths into clean errors instead of huge allocations.
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Checkpoint(format!("implausible {what} length {n}")));
        }
        Ok(n as usize)
    }
    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.len(what)?;
        self.take(n)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the checkpoint payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Serialize and write atomically (via a sibling temp file + rename).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let config_json = serde_json::to_string(&ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("serialize config: {e}")))?;
    w.bytes(config_json.as_bytes());
    w.u64(ckpt.epoch);
    w.u64(ckpt.params.len() as u64);
    for (name, t) in &ckpt.params {
        w.bytes(name.as_bytes());
        w.u64(t.shape().len() as u64);
        for d in t.shape() {
            w.u64(*d as u64);
        }
        w.tensor_data(t);
    }
    w.u64(ckpt.adam_t);
    for m in &ckpt.adam_m {
        w.tensor_data(m);
    }
    for v in &ckpt.adam_v {
        w.tensor_data(v);
    }
    w.u64(ckpt.bank_epoch);
    w.u64(ckpt.bank.len() as u64);
    for (qid, logits) in &ckpt.bank {
        w.u64(*qid);
        w.u64(logits.len() as u64);
        for l in logits {
            w.f64(*l);
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &w.buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let config_bytes = r.bytes("config")?;
    let config: TrainConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("embedded config invalid: {e}")))?;
    let epoch = r.u64()?;
    let n_params = r.len("parameter table")?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes("parameter name")?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?;
        let rank = r.len("shape")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel * 8 > buf.len() {
            return Err(Error::Checkpoint(format!(
                "implausible tensor size for `{name}`"
            )));
        }
        let data = r.f64s(numel)?;
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        params.push((name, t));
    }
    let adam_t = r.u64()?;
    let read_moments = |r: &mut Reader| -> Result<Vec<Tensor<f64>>> {
        params
            .iter()
            .map(|(name, p)| {
                let data = r.f64s(p.numel())?;
                Tensor::new(p.shape().to_vec(), data)
                    .map_err(|e| Error::Checkpoint(format!("moment for `{name}`: {e}")))
            })
            .collect()
    };
    let adam_m = read_moments(&mut r)?;
    let adam_v = read_moments(&mut r)?;
    let bank_epoch = r.u64()?;
    let n_bank = r.len("teacher bank")?;
    let mut bank = Vec::with_capacity(n_bank);
    for _ in 0..n_bank {
        let qid = r.u64()?;
        let n = r.len("bank entry")?;
        bank.push((qid, r.f64s(n)?));
    }
    r.done()?;
    let ckpt = Checkpoint {
        config,
        epoch,
        params,
        adam_t,
        adam_m,
        adam_v,
        bank_epoch,
        bank,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let t1 = Tensor::new(vec![2, 3], vec![1.5, -0.0, 3.25e-300, -7.0, 0.1, 2e300]).unwrap();
        let t2 = Tensor::new(vec![4], vec![0.25, 0.5, -0.125, 1.0]).unwrap();
        Checkpoint {
            config: TrainConfig::toy(),
            epoch: 7,
            params: vec![("enc.w".into(), t1.clone()), ("net.b".into(), t2.clone())],
            adam_t: 91,
            adam_m: vec![t1.clone(), t2.clone()],
            adam_v: vec![t1, t2],
            bank_epoch: 7,
            bank: vec![(0, vec![0.5, -1.25]), (3, vec![2.0, 0.0]), (9, vec![-0.0, 1e-12])],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("epoch_7");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert_eq!((back.epoch, back.adam_t, back.bank_epoch), (7, 91, 7));
        for ((an, at), (bn, bt)) in ckpt.params.iter().zip(&back.params) {
            assert_eq!(an, bn);
            assert_eq!(at.shape(), bt.shape());
            for (x, y) in at.data().iter().zip(bt.data()) {
                assert_eq!(x.to_bits(), y.to_bits()); // -0.0 vs 0.0 stays distinct
            }
        }
        for (a, b) in ckpt.adam_m.iter().zip(&back.adam_m) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for ((aq, al), (bq, bl)) in ckpt.bank.iter().zip(&back.bank) {
            assert_eq!(aq, bq);
            for (x, y) in al.iter().zip(bl) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Byte-identical re-save.
        let path2 = dir.path().join("again");
        save_checkpoint(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn missing_file_is_io_not_found() {
        let err = load_checkpoint(Path::new("/nonexistent/epoch_1")).unwrap_err();
        match err {
            Error::Io(e) => assert_eq!(e.kind(), std::io::ErrorKind::NotFound),
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_wrong_version_and_truncation_are_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        save_checkpoint(&path, &sample()).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let mut bad = good.clone();
        bad[4] = 99;
        std::fs::write(&path, &bad).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::Checkpoint(msg) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("{other:?}"),
        }

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let mut padded = good.clone();
        padded.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, &padded).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::Checkpoint(msg) => assert!(msg.contains("trailing"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_snapshots_refuse_to_save() {
        let mut ckpt = sample();
        ckpt.adam_m.pop();
        let dir = tempfile::tempdir().unwrap();
        let err = save_checkpoint(&dir.path().join("ck"), &ckpt).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));

        let mut ckpt = sample();
        ckpt.bank.swap(0, 2); // unsorted ids
        let err = save_checkpoint(&dir.path().join("ck2"), &ckpt).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
