//! CloudFile: a whitespace-separated text table with a header line.
//!
//! Required columns are `x y z`. Optional `sem ins` carry a labeling;
//! `off_x off_y off_z`, `emb_0..emb_4` and `p_0..p_{C-1}` carry per-point
//! network outputs. Any other column is kept as a scalar attribute.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::number::format_sig9;
use crate::error::{Error, Result};
use crate::model::{ClassId, InstanceId, Labeling, PointCloud};

/// Raw feature columns (`off_*`, `emb_*`, `p_*`) keyed by column name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureColumns {
    columns: BTreeMap<String, Vec<f64>>,
}

pub fn is_feature_column(name: &str) -> bool {
    name.starts_with("off_") || name.starts_with("emb_") || name.starts_with("p_")
}

impl FeatureColumns {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.columns.insert(name.into(), values);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(Vec::as_slice)
    }

    pub fn columns(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.columns
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Rows of every column, restricted to `ids` in that order.
    pub fn select(&self, ids: &[usize]) -> FeatureColumns {
        FeatureColumns {
            columns: self
                .columns
                .iter()
                .map(|(k, v)| (k.clone(), ids.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }
}

/// Contents of one CloudFile.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CloudData {
    pub cloud: PointCloud,
    pub labels: Option<Labeling>,
    pub features: Option<FeatureColumns>,
}

fn feature_sort_key(name: &str) -> (u8, usize, String) {
    let group = if name.starts_with("off_") {
        0
    } else if name.starts_with("emb_") {
        1
    } else {
        2
    };
    let idx = name
        .rsplit('_')
        .next()
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(usize::MAX);
    (group, idx, name.to_string())
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<CloudData> {
    let file = fs::File::open(path.as_ref())?;
    parse_cloud(BufReader::new(file))
}

pub fn parse_cloud(reader: impl BufRead) -> Result<CloudData> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, line)) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
            None => return Err(Error::Format("missing header line".into())),
        }
    };
    let names: Vec<String> = header.split_whitespace().map(str::to_string).collect();
    let mut seen = HashSet::new();
    for n in &names {
        if !seen.insert(n.as_str()) {
            return Err(Error::Format(format!("duplicate column `{n}`")));
        }
    }
    let col = |name: &str| names.iter().position(|n| n == name);
    let (Some(cx), Some(cy), Some(cz)) = (col("x"), col("y"), col("z")) else {
        return Err(Error::Format("header must name columns x, y and z".into()));
    };
    let csem = col("sem");
    let cins = col("ins");
    if cins.is_some() && csem.is_none() {
        return Err(Error::Format("column `ins` requires column `sem`".into()));
    }

    let mut positions = Vec::new();
    let mut semantic: Vec<ClassId> = Vec::new();
    let mut instance: Vec<InstanceId> = Vec::new();
    let mut other: Vec<Vec<f64>> = vec![Vec::new(); names.len()];

    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != names.len() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, found {}", names.len(), fields.len()),
            });
        }
        let real = |c: usize| -> Result<f64> {
            let v: f64 = fields[c].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("column `{}`: `{}` is not a number", names[c], fields[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("column `{}` is not finite", names[c]),
                });
            }
            Ok(v)
        };
        positions.push([real(cx)?, real(cy)?, real(cz)?]);
        if let Some(c) = csem {
            let v: ClassId = fields[c].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("column `sem`: `{}` is not a class id", fields[c]),
            })?;
            semantic.push(v);
        }
        if let Some(c) = cins {
            let v: InstanceId = fields[c].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("column `ins`: `{}` is not an integer", fields[c]),
            })?;
            if v < -1 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("instance id {v} below -1"),
                });
            }
            instance.push(v);
        }
        for (c, vals) in other.iter_mut().enumerate() {
            if [Some(cx), Some(cy), Some(cz), csem, cins].contains(&Some(c)) {
                continue;
            }
            vals.push(real(c)?);
        }
    }

    let n = positions.len();
    let mut cloud = PointCloud::new(positions)?;
    let mut features = FeatureColumns::new();
    for (c, vals) in other.into_iter().enumerate() {
        if [Some(cx), Some(cy), Some(cz), csem, cins].contains(&Some(c)) {
            continue;
        }
        let name = &names[c];
        if is_feature_column(name) {
            features.insert(name.clone(), vals);
        } else {
            cloud = cloud.with_attribute(name.clone(), vals)?;
        }
    }
    let labels = match csem {
        Some(_) => {
            if cins.is_none() {
                instance = vec![-1; n];
            }
            Some(Labeling::new(semantic, instance)?)
        }
        None => None,
    };
    Ok(CloudData {
        cloud,
        labels,
        features: (!features.is_empty()).then_some(features),
    })
}

pub fn write_cloud(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    labels: Option<&Labeling>,
    features: Option<&FeatureColumns>,
) -> Result<()> {
    let text = format_cloud(cloud, labels, features)?;
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Renders a CloudFile. Column order: `x y z`, attributes by name,
/// `sem ins`, then `off_*`, `emb_*`, `p_*` in index order.
pub fn format_cloud(
    cloud: &PointCloud,
    labels: Option<&Labeling>,
    features: Option<&FeatureColumns>,
) -> Result<String> {
    let n = cloud.len();
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::contract(format!("{} labels for {n} points", l.len())));
        }
    }
    let mut feat: Vec<(&String, &Vec<f64>)> = Vec::new();
    if let Some(f) = features {
        feat = f.columns().iter().collect();
        feat.sort_by_key(|(k, _)| feature_sort_key(k));
        for (k, v) in &feat {
            if v.len() != n {
                return Err(Error::contract(format!(
                    "feature `{k}` has {} rows for {n} points",
                    v.len()
                )));
            }
        }
    }
    let mut header = vec!["x".to_string(), "y".into(), "z".into()];
    header.extend(cloud.attributes().keys().cloned());
    if labels.is_some() {
        header.push("sem".into());
        header.push("ins".into());
    }
    header.extend(feat.iter().map(|(k, _)| (*k).clone()));

    let mut out = String::with_capacity(n * 48 + 64);
    out.push_str(&header.join(" "));
    out.push('\n');
    for i in 0..n {
        let p = cloud.positions()[i];
        let mut fields: Vec<String> = p.iter().map(|&v| format_sig9(v)).collect();
        fields.extend(cloud.attributes().values().map(|v| format_sig9(v[i])));
        if let Some(l) = labels {
            fields.push(l.semantic()[i].to_string());
            fields.push(l.instance()[i].to_string());
        }
        fields.extend(feat.iter().map(|(_, v)| format_sig9(v[i])));
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    Ok(out)
}
