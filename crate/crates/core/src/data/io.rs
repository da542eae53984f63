//! Dataset container: magic, version, spec echo, then per split a record
//! count followed by length-prefixed `(input, target)` records.

use std::path::Path;

use super::{Dataset, DatasetSpec, SamplePair, Variable};
use crate::container::{kv_text, parse_kv_text, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"DSLDATA\0";
pub const DATASET_VERSION: u32 = 1;

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.str(&kv_text(&ds.spec.to_kv()));
    for split in [&ds.train, &ds.val, &ds.test] {
        w.u64(split.len() as u64);
        for pair in split {
            let mut rec = Writer::default();
            rec.tensor(&pair.input);
            rec.tensor(&pair.target);
            w.u64(rec.buf.len() as u64);
            w.bytes(&rec.buf);
        }
    }
    w.buf
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes, "dataset");
    r.magic(DATASET_MAGIC, DATASET_VERSION)?;
    let mut spec = DatasetSpec::desk(Variable::PrecipitationLike, 0);
    for (k, v) in parse_kv_text(&r.str()?)? {
        spec.set(&k, &v).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    }
    let mut splits = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = r.len()?;
        let mut pairs = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.len()?;
            let mut rec = Reader::new(r.take(len)?, "dataset record");
            let pair = SamplePair { input: rec.tensor()?, target: rec.tensor()? };
            rec.finish()?;
            pairs.push(pair);
        }
        splits.push(pairs);
    }
    r.finish()?;
    let mut it = splits.into_iter();
    Ok(Dataset { spec, train: it.next().unwrap(), val: it.next().unwrap(), test: it.next().unwrap() })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_file(path, &dataset_to_bytes(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&read_file(path)?)
}
