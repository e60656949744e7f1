//! Relation matrices as TOML with one 0/1 row per attribute:
//!
//! ```toml
//! attribute_names = ["Bald", "Eyeglasses"]
//! part_names = ["background", "skin", "hair", "glasses"]
//! ar_plus = [[0, 0, 1, 0], [0, 1, 0, 0]]
//! ar_minus = [[1, 1, 0, 0], [0, 0, 0, 1]]
//! ```

use std::path::Path;

use magkit_core::mask::RelationMatrices;
use serde::{Deserialize, Serialize};

use crate::error::{io, parse, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    attribute_names: Vec<String>,
    part_names: Vec<String>,
    ar_plus: Vec<Vec<i64>>,
    ar_minus: Vec<Vec<i64>>,
}

fn flatten(grid: &[Vec<i64>], name: &str, rows: usize, cols: usize, origin: &Path) -> Result<Vec<u8>> {
    if grid.len() != rows {
        return Err(parse(origin, None, format!("{name} has {} rows, expected {rows}", grid.len())));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for (i, row) in grid.iter().enumerate() {
        if row.len() != cols {
            return Err(parse(origin, None, format!("{name} row {} has {} entries, expected {cols}", i + 1, row.len())));
        }
        for v in row {
            match v {
                0 | 1 => out.push(*v as u8),
                _ => return Err(parse(origin, None, format!("{name} row {} holds {v}; entries must be 0 or 1", i + 1))),
            }
        }
    }
    Ok(out)
}

pub fn parse_relations(text: &str, origin: &Path) -> Result<RelationMatrices> {
    let doc: Doc = toml::from_str(text).map_err(|e| parse(origin, None, e.to_string()))?;
    let (c, p) = (doc.attribute_names.len(), doc.part_names.len());
    let plus = flatten(&doc.ar_plus, "ar_plus", c, p, origin)?;
    let minus = flatten(&doc.ar_minus, "ar_minus", c, p, origin)?;
    Ok(RelationMatrices::new(doc.attribute_names, doc.part_names, plus, minus)?)
}

pub fn read_relations(path: &Path) -> Result<RelationMatrices> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    parse_relations(&text, path)
}

pub fn relations_to_toml(rel: &RelationMatrices) -> String {
    let p = rel.parts();
    let grid = |f: &dyn Fn(usize, usize) -> u8| (0..rel.attributes()).map(|i| (0..p).map(|j| f(i, j) as i64).collect()).collect();
    let doc = Doc {
        attribute_names: rel.attribute_names().to_vec(),
        part_names: rel.part_names().to_vec(),
        ar_plus: grid(&|i, j| rel.plus(i, j)),
        ar_minus: grid(&|i, j| rel.minus(i, j)),
    };
    toml::to_string(&doc).expect("relation document serializes")
}

pub fn write_relations(path: &Path, rel: &RelationMatrices) -> Result<()> {
    std::fs::write(path, relations_to_toml(rel)).map_err(io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_the_default_table() {
        let rel = RelationMatrices::synthetic_default();
        let text = relations_to_toml(&rel);
        assert_eq!(parse_relations(&text, Path::new("x")).unwrap(), rel);
    }

    #[test]
    fn rejects_non_binary_and_ragged_grids() {
        let head = "attribute_names = [\"Bald\"]\npart_names = [\"skin\", \"hair\"]\n";
        let ok = format!("{head}ar_plus = [[0, 1]]\nar_minus = [[1, 0]]\n");
        assert!(parse_relations(&ok, Path::new("x")).is_ok());
        for bad in ["ar_plus = [[0, 2]]\nar_minus = [[1, 0]]\n", "ar_plus = [[0]]\nar_minus = [[1, 0]]\n", "ar_plus = [[0, 1]]\n"] {
            assert!(parse_relations(&format!("{head}{bad}"), Path::new("x")).is_err(), "{bad}");
        }
        let extra = format!("{head}ar_plus = [[0, 1]]\nar_minus = [[1, 0]]\nnotes = 1\n");
        assert!(parse_relations(&extra, Path::new("x")).is_err());
    }
}
