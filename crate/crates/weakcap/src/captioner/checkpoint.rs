//! Captioning-model checkpoint: magic "WCLM", a version word, the training
//! iteration, the caption dictionary, and named f64 tensor sections.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{
    expect_magic, read_f64_vec, read_str, read_u32, write_f64_slice, write_str, write_u32,
};
use crate::{Error, Result, Tensor};

const MAGIC: &[u8; 4] = b"WCLM";
const VERSION: u32 = 1;

/// Everything a checkpoint stores. Section order is preserved verbatim so
/// rewrites are byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    /// Refinement iteration the snapshot was taken at.
    pub iteration: u32,
    /// Dictionary entries in id order.
    pub dictionary: Vec<String>,
    /// Named tensors, e.g. `("decoder.w1", ...)`.
    pub sections: Vec<(String, Tensor)>,
}

/// Writes `checkpoint` to `path`.
pub fn write_model_checkpoint(path: &Path, checkpoint: &ModelCheckpoint) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, checkpoint.iteration)?;
    write_u32(&mut w, checkpoint.dictionary.len() as u32)?;
    for token in &checkpoint.dictionary {
        write_str(&mut w, token)?;
    }
    write_u32(&mut w, checkpoint.sections.len() as u32)?;
    for (name, tensor) in &checkpoint.sections {
        write_str(&mut w, name)?;
        write_u32(&mut w, tensor.rows() as u32)?;
        write_u32(&mut w, tensor.cols() as u32)?;
        write_f64_slice(&mut w, &tensor.data)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`write_model_checkpoint`].
pub fn read_model_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let file = File::open(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    expect_magic(&mut r, MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let iteration = read_u32(&mut r)?;
    let token_count = read_u32(&mut r)? as usize;
    let dictionary: Vec<String> =
        (0..token_count).map(|_| read_str(&mut r)).collect::<Result<_>>()?;
    let section_count = read_u32(&mut r)? as usize;
    let mut sections = Vec::with_capacity(section_count);
    for _ in 0..section_count {
        let name = read_str(&mut r)?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let data = read_f64_vec(&mut r, rows * cols)?;
        sections.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(ModelCheckpoint { iteration, dictionary, sections })
}
