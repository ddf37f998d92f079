//! Pretty-printed JSON files with path-aware errors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{EtmError, Result};

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| EtmError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| EtmError::json(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| EtmError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| EtmError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| EtmError::json(path, e))
}
