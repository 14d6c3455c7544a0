//! Binary checkpoints: magic, version, JSON config, then named f32 records
//! in build order (parameters, then running batch-norm statistics).

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, NormStats, Plan};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"STLM";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, data.len() as u32);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn running_names(b: usize) -> [String; 2] {
    [format!("blocks.{b}.bn.running_mean"), format!("blocks.{b}.bn.running_var")]
}

pub fn encode_checkpoint(m: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = serde_json::to_vec(&m.config).expect("config serializes");
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put_u32(&mut out, (m.plan.specs.len() + 2 * m.running.len()) as u32);
    for s in &m.plan.specs {
        put_record(&mut out, &s.name, &m.params[s.range()]);
    }
    for (b, st) in m.running.iter().enumerate() {
        let [mn, vn] = running_names(b);
        put_record(&mut out, &mn, &st.mean);
        put_record(&mut out, &vn, &st.var);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self, want_name: &str, want_len: usize) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        let name = String::from_utf8_lossy(self.take(n)?).into_owned();
        if name != want_name {
            return Err(Error::format(
                self.path,
                format!("expected record '{want_name}', found '{name}'"),
            ));
        }
        let count = self.u32()? as usize;
        if count != want_len {
            return Err(Error::format(
                self.path,
                format!("record '{name}' has {count} values, config implies {want_len}"),
            ));
        }
        Ok(self
            .take(4 * count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a model checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?).map_err(|e| Error::format(path, format!("bad config: {e}")))?;
    config.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let plan = Plan::new(&config);
    let records = r.u32()? as usize;
    if records != plan.specs.len() + 2 * plan.blocks.len() {
        return Err(Error::format(path, format!("unexpected record count {records}")));
    }
    let mut params = Vec::with_capacity(plan.total);
    for s in &plan.specs {
        params.extend(r.record(&s.name, s.len())?);
    }
    let mut running = Vec::with_capacity(plan.blocks.len());
    for (b, blk) in plan.blocks.iter().enumerate() {
        let [mn, vn] = running_names(b);
        running.push(NormStats {
            mean: r.record(&mn, blk.c)?,
            var: r.record(&vn, blk.c)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint"));
    }
    Model::from_parts(config, params, running)
}

pub fn save_checkpoint(path: impl AsRef<Path>, m: &Model) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(m)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint in eval mode.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
