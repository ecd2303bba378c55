//! Feature-file formats and weak-annotation parsing.
//!
//! Feature maps (magic `WCFM`): u32 version, a stream tag byte (`o` object,
//! `a` action, `s` shared by both streams), u32 region count `q`, u32 feature
//! width `d`, then `q * d` little-endian f32 values row-major. Global features
//! (magic `WCGF`): u32 dimension, then that many little-endian f32 values.
//! Weak annotations: UTF-8 text, one `video_id<TAB>lemma<TAB>o|a` line per
//! video.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{expect_magic, read_f32, read_u32, read_u8, write_f32, write_u32, write_u8};
use crate::corpusio::Phrase;
use crate::{Error, Result, Tensor};

const FMAP_MAGIC: &[u8; 4] = b"WCFM";
const FMAP_VERSION: u32 = 1;
const GLOBAL_MAGIC: &[u8; 4] = b"WCGF";

/// Which stream a feature-map file feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    Object,
    Action,
    /// One physical map serving both streams.
    Shared,
}

impl StreamTag {
    fn byte(self) -> u8 {
        match self {
            StreamTag::Object => b'o',
            StreamTag::Action => b'a',
            StreamTag::Shared => b's',
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            b'o' => Ok(StreamTag::Object),
            b'a' => Ok(StreamTag::Action),
            b's' => Ok(StreamTag::Shared),
            other => Err(Error::Format(format!("unknown stream tag byte {other:#x}"))),
        }
    }
}

/// Writes a `q x d` feature map. Values are stored as f32.
pub fn write_feature_map(path: &Path, tag: StreamTag, fmap: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FMAP_MAGIC)?;
    write_u32(&mut w, FMAP_VERSION)?;
    write_u8(&mut w, tag.byte())?;
    write_u32(&mut w, fmap.rows() as u32)?;
    write_u32(&mut w, fmap.cols() as u32)?;
    for &v in &fmap.data {
        write_f32(&mut w, v as f32)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature map and its stream tag.
pub fn read_feature_map(path: &Path) -> Result<(StreamTag, Tensor)> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, FMAP_MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != FMAP_VERSION {
        return Err(Error::Format(format!("unsupported feature-map version {version}")));
    }
    let tag = StreamTag::from_byte(read_u8(&mut r)?)?;
    let q = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    if q == 0 || d == 0 {
        return Err(Error::Format(format!("degenerate feature map {q}x{d}")));
    }
    let mut data = Vec::with_capacity(q * d);
    for _ in 0..q * d {
        data.push(read_f32(&mut r)? as f64);
    }
    ensure_consumed(&mut r, path)?;
    Ok((tag, Tensor::from_vec(q, d, data)?))
}

/// Writes a global feature vector. Values are stored as f32.
pub fn write_global_feature(path: &Path, x: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GLOBAL_MAGIC)?;
    write_u32(&mut w, x.len() as u32)?;
    for &v in x {
        write_f32(&mut w, v as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_global_feature(path: &Path) -> Result<Vec<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, GLOBAL_MAGIC)?;
    let dim = read_u32(&mut r)? as usize;
    if dim == 0 {
        return Err(Error::Format("empty global feature".into()));
    }
    let mut x = Vec::with_capacity(dim);
    for _ in 0..dim {
        x.push(read_f32(&mut r)? as f64);
    }
    ensure_consumed(&mut r, path)?;
    Ok(x)
}

fn ensure_consumed(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format(format!("trailing bytes in {}", path.display())));
    }
    Ok(())
}

/// Loads one video's feature maps and global feature from `dir`.
///
/// With `shared` the object and action streams read the same
/// `<video_id>.wcfm` file (tag `s`); otherwise `<video_id>.obj.wcfm` (tag `o`)
/// and `<video_id>.act.wcfm` (tag `a`). The global feature always comes from
/// `<video_id>.wcgf`. Returns `(fmap_obj, fmap_act, global)`.
pub fn load_video_features(
    dir: &Path,
    video_id: &str,
    shared: bool,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let expect_tag = |path: &Path, want: StreamTag| -> Result<Tensor> {
        let (tag, fmap) = read_feature_map(path)?;
        if tag != want {
            return Err(Error::Format(format!(
                "{} carries the wrong stream tag for this configuration",
                path.display()
            )));
        }
        Ok(fmap)
    };
    let (fmap_obj, fmap_act) = if shared {
        let fmap = expect_tag(&dir.join(format!("{video_id}.wcfm")), StreamTag::Shared)?;
        (fmap.clone(), fmap)
    } else {
        (
            expect_tag(&dir.join(format!("{video_id}.obj.wcfm")), StreamTag::Object)?,
            expect_tag(&dir.join(format!("{video_id}.act.wcfm")), StreamTag::Action)?,
        )
    };
    if fmap_obj.rows() != fmap_act.rows() {
        return Err(Error::Shape(format!(
            "video {video_id}: streams disagree on region count ({} vs {})",
            fmap_obj.rows(),
            fmap_act.rows()
        )));
    }
    let global = read_global_feature(&dir.join(format!("{video_id}.wcgf")))?;
    Ok((fmap_obj, fmap_act, global))
}

/// Parses a weak-annotation file: one `video_id<TAB>lemma<TAB>o|a` line per
/// video (blank lines allowed). Returns `(video_id, phrase)` pairs in file
/// order; duplicate video ids are an error.
pub fn parse_annotations(path: &Path) -> Result<Vec<(String, Phrase)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<(String, Phrase)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| {
            Error::Ingest(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Ingest(format!(
                "{}:{}: expected 3 tab-separated fields, found {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let (video_id, lemma, kind) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
        if video_id.is_empty() || lemma.is_empty() {
            return Err(Error::Ingest(format!(
                "{}:{}: empty video id or lemma",
                path.display(),
                lineno + 1
            )));
        }
        let phrase = match kind {
            "o" => Phrase::Noun(lemma.to_lowercase()),
            "a" => Phrase::Verb(lemma.to_lowercase()),
            other => {
                return Err(Error::Ingest(format!(
                    "{}:{}: annotation kind must be 'o' or 'a', found '{other}'",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        if out.iter().any(|(id, _)| id == video_id) {
            return Err(Error::Ingest(format!(
                "{}:{}: duplicate annotation for video '{video_id}'",
                path.display(),
                lineno + 1
            )));
        }
        out.push((video_id.to_string(), phrase));
    }
    if out.is_empty() {
        return Err(Error::Ingest(format!("{}: no annotations", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_map_round_trips_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v0.wcfm");
        let fmap = Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.25 - 1.0);
        write_feature_map(&path, StreamTag::Shared, &fmap).unwrap();
        let (tag, loaded) = read_feature_map(&path).unwrap();
        assert_eq!(tag, StreamTag::Shared);
        // Quarter steps are exactly representable in f32.
        assert_eq!(loaded.data, fmap.data);
        assert_eq!((loaded.rows(), loaded.cols()), (3, 4));
    }

    #[test]
    fn global_feature_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v0.wcgf");
        write_global_feature(&path, &[0.5, -1.5, 3.0]).unwrap();
        assert_eq!(read_global_feature(&path).unwrap(), vec![0.5, -1.5, 3.0]);
    }

    #[test]
    fn shared_and_split_layouts_load() {
        let dir = tempfile::tempdir().unwrap();
        let fmap = Tensor::from_fn(2, 3, |r, c| (r + c) as f64);
        write_feature_map(&dir.path().join("v0.wcfm"), StreamTag::Shared, &fmap).unwrap();
        write_global_feature(&dir.path().join("v0.wcgf"), &[1.0]).unwrap();
        let (o, a, x) = load_video_features(dir.path(), "v0", true).unwrap();
        assert_eq!(o, a);
        assert_eq!(x, vec![1.0]);

        write_feature_map(&dir.path().join("v1.obj.wcfm"), StreamTag::Object, &fmap).unwrap();
        write_feature_map(&dir.path().join("v1.act.wcfm"), StreamTag::Action, &fmap).unwrap();
        write_global_feature(&dir.path().join("v1.wcgf"), &[2.0]).unwrap();
        assert!(load_video_features(dir.path(), "v1", false).is_ok());

        // A shared-tagged file must not satisfy a split-layout request.
        write_feature_map(&dir.path().join("v2.obj.wcfm"), StreamTag::Shared, &fmap).unwrap();
        write_feature_map(&dir.path().join("v2.act.wcfm"), StreamTag::Action, &fmap).unwrap();
        write_global_feature(&dir.path().join("v2.wcgf"), &[2.0]).unwrap();
        assert!(matches!(load_video_features(dir.path(), "v2", false), Err(Error::Format(_))));
    }

    #[test]
    fn corrupt_feature_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wcfm");
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(read_feature_map(&path).is_err());

        let fmap = Tensor::from_fn(2, 2, |_, _| 1.0);
        let good = dir.path().join("good.wcfm");
        write_feature_map(&good, StreamTag::Object, &fmap).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.push(0);
        std::fs::write(&good, &bytes).unwrap();
        assert!(matches!(read_feature_map(&good), Err(Error::Format(_))));
    }

    #[test]
    fn annotations_parse_and_reject_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.tsv");
        std::fs::write(&path, "v1\tMan\to\n\nv2\tride\ta\n").unwrap();
        let anns = parse_annotations(&path).unwrap();
        assert_eq!(
            anns,
            vec![
                ("v1".to_string(), Phrase::Noun("man".into())),
                ("v2".to_string(), Phrase::Verb("ride".into())),
            ]
        );

        std::fs::write(&path, "v1\tman\tx\n").unwrap();
        assert!(parse_annotations(&path).is_err());
        std::fs::write(&path, "v1\tman\n").unwrap();
        assert!(parse_annotations(&path).is_err());
        std::fs::write(&path, "v1\tman\to\nv1\tdog\to\n").unwrap();
        assert!(parse_annotations(&path).is_err());
    }
}
