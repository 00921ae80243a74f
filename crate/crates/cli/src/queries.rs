//! Query embedding sidecar stored next to an index as `<index>.queries`:
//! one `id TAB v1 v2 ... vd` line per query, floats in shortest
//! round-trip form.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use jpq_core::data::Vocab;
use jpq_core::Matrix;

pub fn sidecar_path(index: &Path) -> PathBuf {
    let mut s = index.as_os_str().to_owned();
    s.push(".queries");
    PathBuf::from(s)
}

pub struct QueryTable {
    pub vocab: Vocab,
    pub embeddings: Matrix,
}

impl QueryTable {
    pub fn to_text(ids: &[String], embeddings: &Matrix) -> String {
        let mut out = String::new();
        for (id, row) in ids.iter().zip(embeddings.iter_rows()) {
            out.push_str(id);
            for (j, v) in row.iter().enumerate() {
                out.push(if j == 0 { '\t' } else { ' ' });
                write!(out, "{v}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, dim: usize) -> Result<Self> {
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let Some((id, rest)) = line.split_once('\t') else {
                bail!("query table line {}: missing tab", n + 1);
            };
            let before = values.len();
            for v in rest.split(' ') {
                values.push(v.parse::<f32>().with_context(|| format!("query table line {}", n + 1))?);
            }
            if values.len() - before != dim {
                bail!("query table line {}: expected {dim} values, got {}", n + 1, values.len() - before);
            }
            ids.push(id.to_owned());
        }
        let embeddings = Matrix::from_vec(ids.len(), dim, values)?;
        Ok(Self {
            vocab: Vocab::from_ids(ids)?,
            embeddings,
        })
    }

    pub fn save(path: &Path, ids: &[String], embeddings: &Matrix) -> Result<()> {
        fs::write(path, Self::to_text(ids, embeddings)).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, dim).with_context(|| format!("in {}", path.display()))
    }
}
