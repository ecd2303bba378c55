//! Binary checkpoint for trained knowledge graphs (magic `WCKG`).
//!
//! Layout, all integers and floats little-endian:
//! magic, u32 version, u32 dimension; entity table (u32 count, then per
//! entity a kind byte — 0 object, 1 action — and a length-prefixed UTF-8
//! lemma); relation table (u32 count, length-prefixed labels); f64 sections
//! margin, entity reals, entity imaginaries, phases, gate matrix, gate bias;
//! finally the triplet store (u32 count; per triplet a head tag byte —
//! 0 single + u32, 1 pair + u32 obj + u32 act — then u32 relation, u32 tail).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{
    expect_magic, read_f64, read_f64_vec, read_str, read_u32, read_u8, write_f64,
    write_f64_slice, write_str, write_u32, write_u8,
};
use crate::{Error, Result};

use super::{EntityKind, KgModel, NodeRef, StoredTriplet};

const MAGIC: &[u8; 4] = b"WCKG";
const VERSION: u32 = 1;

/// Writes a model checkpoint; identical models produce identical bytes.
pub fn write_kg_checkpoint(path: &Path, model: &KgModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, model.dim as u32)?;

    write_u32(&mut w, model.entities.len() as u32)?;
    for (kind, lemma) in &model.entities {
        write_u8(&mut w, match kind {
            EntityKind::Object => 0,
            EntityKind::Action => 1,
        })?;
        write_str(&mut w, lemma)?;
    }
    write_u32(&mut w, model.relations.len() as u32)?;
    for label in &model.relations {
        write_str(&mut w, label)?;
    }

    write_f64(&mut w, model.margin)?;
    write_f64_slice(&mut w, &model.params.ent_re.data)?;
    write_f64_slice(&mut w, &model.params.ent_im.data)?;
    write_f64_slice(&mut w, &model.params.phases.data)?;
    write_f64_slice(&mut w, &model.params.gate_w.data)?;
    write_f64_slice(&mut w, &model.params.gate_b.data)?;

    write_u32(&mut w, model.triplets.len() as u32)?;
    for t in &model.triplets {
        match t.head {
            NodeRef::Single(i) => {
                write_u8(&mut w, 0)?;
                write_u32(&mut w, i as u32)?;
            }
            NodeRef::Pair { obj, act } => {
                write_u8(&mut w, 1)?;
                write_u32(&mut w, obj as u32)?;
                write_u32(&mut w, act as u32)?;
            }
        }
        write_u32(&mut w, t.relation as u32)?;
        write_u32(&mut w, t.tail as u32)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`write_kg_checkpoint`].
pub fn read_kg_checkpoint(path: &Path) -> Result<KgModel> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported knowledge-graph checkpoint version {version}"
        )));
    }
    let dim = read_u32(&mut r)? as usize;

    let n_entities = read_u32(&mut r)? as usize;
    let mut entities = Vec::with_capacity(n_entities);
    for _ in 0..n_entities {
        let kind = match read_u8(&mut r)? {
            0 => EntityKind::Object,
            1 => EntityKind::Action,
            k => return Err(Error::Format(format!("unknown entity kind tag {k}"))),
        };
        entities.push((kind, read_str(&mut r)?));
    }
    let n_relations = read_u32(&mut r)? as usize;
    let mut relations = Vec::with_capacity(n_relations);
    for _ in 0..n_relations {
        relations.push(read_str(&mut r)?);
    }

    let margin = read_f64(&mut r)?;
    let mut model = KgModel::new(dim, margin, entities, relations);
    model.params.ent_re.data = read_f64_vec(&mut r, n_entities * dim)?;
    model.params.ent_im.data = read_f64_vec(&mut r, n_entities * dim)?;
    model.params.phases.data = read_f64_vec(&mut r, n_relations * dim)?;
    model.params.gate_w.data = read_f64_vec(&mut r, 6 * dim * dim)?;
    model.params.gate_b.data = read_f64_vec(&mut r, dim)?;

    let n_triplets = read_u32(&mut r)? as usize;
    let read_index = |r: &mut BufReader<File>, bound: usize, what: &str| -> Result<usize> {
        let v = read_u32(r)? as usize;
        if v >= bound {
            return Err(Error::Format(format!("{what} index {v} out of range {bound}")));
        }
        Ok(v)
    };
    for _ in 0..n_triplets {
        let head = match read_u8(&mut r)? {
            0 => NodeRef::Single(read_index(&mut r, n_entities, "entity")?),
            1 => NodeRef::Pair {
                obj: read_index(&mut r, n_entities, "entity")?,
                act: read_index(&mut r, n_entities, "entity")?,
            },
            k => return Err(Error::Format(format!("unknown head tag {k}"))),
        };
        let relation = read_index(&mut r, n_relations, "relation")?;
        let tail = read_index(&mut r, n_entities, "entity")?;
        model.triplets.push(StoredTriplet { head, relation, tail });
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{stream_rng, ParamSet};
    use rand::Rng;

    fn sample_model() -> KgModel {
        let entities = vec![
            (EntityKind::Object, "ball".to_string()),
            (EntityKind::Object, "man".to_string()),
            (EntityKind::Action, "kick".to_string()),
        ];
        let mut model = KgModel::new(3, 6.0, entities, vec!["obj".into(), "on".into()]);
        let mut rng = stream_rng(17, 0);
        for t in model.params.tensors_mut() {
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        model.triplets = vec![
            StoredTriplet { head: NodeRef::Pair { obj: 1, act: 2 }, relation: 0, tail: 0 },
            StoredTriplet { head: NodeRef::Single(2), relation: 1, tail: 1 },
        ];
        model
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.wckg");
        let model = sample_model();
        write_kg_checkpoint(&path, &model).unwrap();
        let loaded = read_kg_checkpoint(&path).unwrap();

        assert_eq!(loaded.dim, model.dim);
        assert_eq!(loaded.margin, model.margin);
        assert_eq!(loaded.entities, model.entities);
        assert_eq!(loaded.relations, model.relations);
        assert_eq!(loaded.params, model.params);
        assert_eq!(loaded.triplets, model.triplets);

        // Writing the loaded model again reproduces the bytes exactly.
        let path2 = dir.path().join("again.wckg");
        write_kg_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // Lookup tables are rebuilt on load.
        assert_eq!(loaded.entity_index(EntityKind::Object, "man"), Some(1));
        assert_eq!(loaded.relation_id("on"), Some(1));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.wckg");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(read_kg_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.wckg");
        write_kg_checkpoint(&path, &sample_model()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_kg_checkpoint(&path).is_err());
    }
}
