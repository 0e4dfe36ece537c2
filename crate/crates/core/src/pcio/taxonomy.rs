//! Taxonomy files: one `class_id name kind` line per class, kind `thing|stuff`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{SemanticClass, SemanticTaxonomy};

pub fn parse_taxonomy(text: &str) -> Result<SemanticTaxonomy> {
    let mut classes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(err("expected `class_id name kind`".into()));
        }
        classes.push(SemanticClass {
            id: f[0].parse().map_err(|_| err(format!("bad class id `{}`", f[0])))?,
            name: f[1].to_string(),
            kind: f[2].parse().map_err(|e: Error| err(e.to_string()))?,
        });
    }
    SemanticTaxonomy::new(classes)
}

pub fn format_taxonomy(taxonomy: &SemanticTaxonomy) -> String {
    taxonomy
        .classes()
        .iter()
        .map(|c| format!("{} {} {}\n", c.id, c.name, c.kind))
        .collect()
}

pub fn read_taxonomy(path: impl AsRef<Path>) -> Result<SemanticTaxonomy> {
    parse_taxonomy(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClassKind;

    #[test]
    fn parse_and_format() {
        let t = parse_taxonomy("0 ground stuff\n# note\n1 tree thing\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.kind(1), Some(ClassKind::Thing));
        assert_eq!(parse_taxonomy(&format_taxonomy(&t)).unwrap(), t);
        assert!(parse_taxonomy("0 ground blob\n").is_err());
        assert!(parse_taxonomy("1 tree thing\n").is_err());
    }
}
