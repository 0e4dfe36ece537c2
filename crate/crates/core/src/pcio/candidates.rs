//! Text dumps of per-block candidate lists.
//!
//! ```text
//! block <center_x> <center_y>
//! <class> <score> <origin> <id_count> <ids...>
//! ```

use std::fs;
use std::path::Path;

use super::number::format_sig9;
use crate::error::{Error, Result};
use crate::model::{IndexSet, InstanceCandidate};

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBlock {
    pub center: [f64; 2],
    pub candidates: Vec<InstanceCandidate>,
}

pub fn format_candidate(c: &InstanceCandidate) -> String {
    let mut s = format!("{} {} {} {}", c.class_id(), format_sig9(c.score()), c.origin(), c.len());
    for id in c.points().iter() {
        s.push(' ');
        s.push_str(&id.to_string());
    }
    s
}

pub fn format_candidate_blocks(blocks: &[CandidateBlock]) -> String {
    let mut out = String::new();
    for b in blocks {
        out.push_str(&format!(
            "block {} {}\n",
            format_sig9(b.center[0]),
            format_sig9(b.center[1])
        ));
        for c in &b.candidates {
            out.push_str(&format_candidate(c));
            out.push('\n');
        }
    }
    out
}

pub fn parse_candidate_blocks(text: &str) -> Result<Vec<CandidateBlock>> {
    let mut blocks: Vec<CandidateBlock> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: lineno, msg };
        if f[0] == "block" {
            if f.len() != 3 {
                return Err(err("expected `block <x> <y>`".into()));
            }
            let x: f64 = f[1].parse().map_err(|_| err(format!("bad center `{}`", f[1])))?;
            let y: f64 = f[2].parse().map_err(|_| err(format!("bad center `{}`", f[2])))?;
            blocks.push(CandidateBlock {
                center: [x, y],
                candidates: Vec::new(),
            });
            continue;
        }
        let Some(block) = blocks.last_mut() else {
            return Err(err("candidate line before the first `block` line".into()));
        };
        if f.len() < 4 {
            return Err(err("expected `class score origin id_count ids...`".into()));
        }
        let class_id = f[0].parse().map_err(|_| err(format!("bad class `{}`", f[0])))?;
        let score: f64 = f[1].parse().map_err(|_| err(format!("bad score `{}`", f[1])))?;
        let origin = f[2].parse().map_err(|e: Error| err(e.to_string()))?;
        let count: usize = f[3].parse().map_err(|_| err(format!("bad id count `{}`", f[3])))?;
        if f.len() != 4 + count {
            return Err(err(format!("id count {count} but {} ids", f.len() - 4)));
        }
        let ids = f[4..]
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| err(format!("bad point id `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let points = IndexSet::from_sorted(ids).map_err(|e| err(e.to_string()))?;
        let cand = InstanceCandidate::new(points, class_id, origin)
            .and_then(|c| c.with_score(score))
            .map_err(|e| err(e.to_string()))?;
        block.candidates.push(cand);
    }
    Ok(blocks)
}

pub fn read_candidate_blocks(path: impl AsRef<Path>) -> Result<Vec<CandidateBlock>> {
    parse_candidate_blocks(&fs::read_to_string(path)?)
}

pub fn write_candidate_blocks(path: impl AsRef<Path>, blocks: &[CandidateBlock]) -> Result<()> {
    fs::write(path, format_candidate_blocks(blocks))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Origin;

    #[test]
    fn round_trip() {
        let c = InstanceCandidate::new(IndexSet::new(vec![4, 1, 9]), 2, Origin::Embedding)
            .unwrap()
            .with_score(0.75)
            .unwrap();
        let blocks = vec![
            CandidateBlock {
                center: [1.5, -2.0],
                candidates: vec![c],
            },
            CandidateBlock {
                center: [0.0, 0.0],
                candidates: vec![],
            },
        ];
        let text = format_candidate_blocks(&blocks);
        assert!(text.starts_with("block 1.5 -2\n2 0.75 embedding 3 1 4 9\n"));
        assert_eq!(parse_candidate_blocks(&text).unwrap(), blocks);
    }

    #[test]
    fn malformed_lines() {
        assert!(parse_candidate_blocks("1 0.5 raw 1 3\n").is_err());
        assert!(parse_candidate_blocks("block 0 0\n1 0.5 raw 2 3\n").is_err());
        assert!(parse_candidate_blocks("block 0 0\n1 0.5 blob 1 3\n").is_err());
        assert!(parse_candidate_blocks("block 0 0\n1 1.5 raw 1 3\n").is_err());
        assert!(parse_candidate_blocks("block 0 0\n1 0.5 raw 2 3 3\n").is_err());
    }
}
