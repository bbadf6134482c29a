use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{CsrMatrix, DenseMatrix};

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub name: String,
}

/// Node-id lists as stored in `splits.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Train/validation/test membership masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Splits {
    pub fn from_ids(n: usize, ids: &SplitIds) -> Result<Self> {
        let mut s = Splits {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        };
        for (mask, list, name) in [
            (&mut s.train, &ids.train, "train"),
            (&mut s.val, &ids.val, "val"),
            (&mut s.test, &ids.test, "test"),
        ] {
            for &i in list {
                if i >= n {
                    return Err(Error::Validation(format!(
                        "{name} split id {i} >= num_nodes {n}"
                    )));
                }
                mask[i] = true;
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_ids(&self) -> SplitIds {
        let ids = |m: &[bool]| {
            m.iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| i)
                .collect()
        };
        SplitIds {
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.train.len();
        if self.val.len() != n || self.test.len() != n {
            return Err(Error::Validation(
                "split masks have different lengths".into(),
            ));
        }
        for i in 0..n {
            let k = self.train[i] as u8 + self.val[i] as u8 + self.test[i] as u8;
            if k > 1 {
                return Err(Error::Validation(format!(
                    "node {i} belongs to more than one split"
                )));
            }
        }
        Ok(())
    }

    /// Split name of node `i`: `train`, `val`, `test` or `none`.
    pub fn name_of(&self, i: usize) -> &'static str {
        if self.train[i] {
            "train"
        } else if self.val[i] {
            "val"
        } else if self.test[i] {
            "test"
        } else {
            "none"
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |m: &[bool]| m.iter().filter(|&&b| b).count();
        (c(&self.train), c(&self.val), c(&self.test))
    }
}

/// An attributed, labeled, undirected graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBundle {
    pub name: String,
    pub num_classes: usize,
    /// Symmetric 0/1 adjacency without self-loops.
    pub adjacency: CsrMatrix,
    /// `num_nodes × d`.
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub splits: Option<Splits>,
}

impl GraphBundle {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.n()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn meta(&self) -> BundleMeta {
        BundleMeta {
            num_nodes: self.num_nodes(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim(),
            name: self.name.clone(),
        }
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn splits(&self) -> Result<&Splits> {
        self.splits
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("bundle '{}' has no splits", self.name)))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.features.rows() != n {
            return Err(Error::Validation(format!(
                "{} feature rows for {n} nodes",
                self.features.rows()
            )));
        }
        if self.labels.len() != n {
            return Err(Error::Validation(format!(
                "{} labels for {n} nodes",
                self.labels.len()
            )));
        }
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.num_classes)
        {
            return Err(Error::Validation(format!(
                "node {i} has label {l} outside [0, {})",
                self.num_classes
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite("node features".into()));
        }
        if !self.adjacency.is_symmetric(0.0) {
            return Err(Error::Validation("adjacency is not symmetric".into()));
        }
        if (0..n).any(|i| self.adjacency.get(i, i) != 0.0) {
            return Err(Error::Validation("adjacency has self-loops".into()));
        }
        if let Some(s) = &self.splits {
            if s.train.len() != n {
                return Err(Error::Validation(
                    "split masks do not match node count".into(),
                ));
            }
            s.validate()?;
        }
        Ok(())
    }

    /// Stable content hash over structure, features and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_nodes() as u64).to_le_bytes());
        h.update((self.num_classes as u64).to_le_bytes());
        for &p in self.adjacency.row_ptr() {
            h.update((p as u64).to_le_bytes());
        }
        for &c in self.adjacency.col_idx() {
            h.update((c as u64).to_le_bytes());
        }
        h.update((self.features.cols() as u64).to_le_bytes());
        for v in self.features.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Builds a symmetric, deduplicated 0/1 adjacency from undirected pairs.
/// Self-loops are dropped.
pub fn adjacency_from_edges(
    n: usize,
    edges: impl IntoIterator<Item = (usize, usize)>,
) -> Result<CsrMatrix> {
    let mut pairs = BTreeSet::new();
    for (u, v) in edges {
        if u >= n || v >= n {
            return Err(Error::Validation(format!(
                "edge ({u}, {v}) out of range for {n} nodes"
            )));
        }
        if u != v {
            pairs.insert((u.min(v), u.max(v)));
        }
    }
    CsrMatrix::from_triplets(
        n,
        pairs.iter().flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)]),
    )
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a graph bundle directory.
///
/// Expects `meta.json`, `edges.tsv` (`u<TAB>v`, 0-indexed), `features.tsv`
/// (one whitespace-separated row per node) and `labels.tsv` (one class id per
/// line); `splits.json` is optional.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GraphBundle> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "bundle directory not found"),
        ));
    }
    let meta: BundleMeta = read_json(&dir.join("meta.json"))?;
    let n = meta.num_nodes;

    let edges_path = dir.join("edges.tsv");
    let mut edges = Vec::new();
    for (ln, line) in read_to_string(&edges_path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(&edges_path, ln + 1, "expected two node ids"));
        };
        let u: usize = a
            .parse()
            .map_err(|_| parse_err(&edges_path, ln + 1, format!("bad node id '{a}'")))?;
        let v: usize = b
            .parse()
            .map_err(|_| parse_err(&edges_path, ln + 1, format!("bad node id '{b}'")))?;
        if u >= n || v >= n {
            return Err(parse_err(
                &edges_path,
                ln + 1,
                format!("node id out of range for {n} nodes"),
            ));
        }
        if u == v {
            log::warn!("{}: dropping self-loop on node {u}", edges_path.display());
        }
        edges.push((u, v));
    }
    let adjacency = adjacency_from_edges(n, edges)?;

    let feat_path = dir.join("features.tsv");
    let mut data = Vec::with_capacity(n * meta.feature_dim);
    let mut rows = 0usize;
    for (ln, line) in read_to_string(&feat_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(&feat_path, ln + 1, format!("bad feature value '{tok}'")))?;
            data.push(v);
        }
        if data.len() - before != meta.feature_dim {
            return Err(parse_err(
                &feat_path,
                ln + 1,
                format!(
                    "{} values, meta says feature_dim {}",
                    data.len() - before,
                    meta.feature_dim
                ),
            ));
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Validation(format!(
            "{}: {rows} feature rows, meta says {n} nodes",
            feat_path.display()
        )));
    }
    let features = DenseMatrix::new(n, meta.feature_dim, data)?;

    let labels_path = dir.join("labels.tsv");
    let mut labels = Vec::with_capacity(n);
    for (ln, line) in read_to_string(&labels_path)?.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let l: usize = t
            .parse()
            .map_err(|_| parse_err(&labels_path, ln + 1, format!("bad label '{t}'")))?;
        if l >= meta.num_classes {
            return Err(parse_err(
                &labels_path,
                ln + 1,
                format!("label {l} outside [0, {})", meta.num_classes),
            ));
        }
        labels.push(l);
    }
    if labels.len() != n {
        return Err(Error::Validation(format!(
            "{}: {} labels, meta says {n} nodes",
            labels_path.display(),
            labels.len()
        )));
    }

    let splits_path = dir.join("splits.json");
    let splits = if splits_path.exists() {
        let ids: SplitIds = read_json(&splits_path)?;
        Some(Splits::from_ids(n, &ids)?)
    } else {
        None
    };

    let g = GraphBundle {
        name: meta.name,
        num_classes: meta.num_classes,
        adjacency,
        features,
        labels,
        splits,
    };
    g.validate()?;
    Ok(g)
}

/// Writes `g` in the bundle directory format, creating `dir` if needed.
///
/// Floats are written in shortest round-trip form, so a saved bundle loads
/// back bit-identically.
pub fn save_bundle(g: &GraphBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("meta.json"), &g.meta())?;

    let write_lines =
        |name: &str, f: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| -> Result<()> {
            let path = dir.join(name);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            f(&mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))
        };

    write_lines("edges.tsv", &|w| {
        for u in 0..g.num_nodes() {
            for &v in g.adjacency.row(u).0 {
                if u < v {
                    writeln!(w, "{u}\t{v}")?;
                }
            }
        }
        Ok(())
    })?;
    write_lines("features.tsv", &|w| {
        for i in 0..g.num_nodes() {
            let row: Vec<String> = g.features.row(i).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join("\t"))?;
        }
        Ok(())
    })?;
    write_lines("labels.tsv", &|w| {
        for l in &g.labels {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })?;
    let splits_path = dir.join("splits.json");
    match &g.splits {
        Some(s) => write_json(&splits_path, &s.to_ids())?,
        None if splits_path.exists() => {
            fs::remove_file(&splits_path).map_err(|e| Error::io(&splits_path, e))?
        }
        None => {}
    }
    Ok(())
}

pub fn load_split_ids(path: impl AsRef<Path>) -> Result<SplitIds> {
    read_json(path.as_ref())
}

pub fn save_split_ids(path: impl AsRef<Path>, splits: &Splits) -> Result<()> {
    write_json(path.as_ref(), &splits.to_ids())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn triangle(dir: &Path) {
        write(
            dir,
            "meta.json",
            r#"{"num_nodes":3,"num_classes":2,"feature_dim":2,"name":"tri"}"#,
        );
        write(dir, "edges.tsv", "0\t1\n1\t2\n2\t0\n");
        write(dir, "features.tsv", "1 0\n0 1\n0.5 0.5\n");
        write(dir, "labels.tsv", "0\n1\n1\n");
    }

    #[test]
    fn triangle_symmetrized() {
        let tmp = tempfile::tempdir().unwrap();
        triangle(tmp.path());
        let g = load_bundle(tmp.path()).unwrap();
        assert_eq!(g.adjacency.nnz(), 6);
        assert_eq!(g.num_edges(), 3);
        assert!(g.splits.is_none());
    }

    #[test]
    fn duplicate_and_reverse_edges_collapse() {
        let tmp = tempfile::tempdir().unwrap();
        triangle(tmp.path());
        write(
            tmp.path(),
            "edges.tsv",
            "0\t1\n1\t0\n0\t1\n1\t2\n2\t0\n2\t2\n",
        );
        let g = load_bundle(tmp.path()).unwrap();
        assert_eq!(g.adjacency.nnz(), 6);
    }

    #[test]
    fn missing_file() {
        let tmp = tempfile::tempdir().unwrap();
        triangle(tmp.path());
        fs::remove_file(tmp.path().join("labels.tsv")).unwrap();
        assert!(matches!(load_bundle(tmp.path()), Err(Error::Io { .. })));
        assert!(matches!(
            load_bundle(tmp.path().join("nope")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn count_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        triangle(tmp.path());
        write(tmp.path(), "labels.tsv", "0\n1\n");
        assert!(matches!(load_bundle(tmp.path()), Err(Error::Validation(_))));
        triangle(tmp.path());
        write(tmp.path(), "features.tsv", "1 0\n0 1\n");
        assert!(load_bundle(tmp.path()).is_err());
    }

    #[test]
    fn label_out_of_range() {
        let tmp = tempfile::tempdir().unwrap();
        triangle(tmp.path());
        write(tmp.path(), "labels.tsv", "0\n2\n1\n");
        assert!(matches!(load_bundle(tmp.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn splits_round_trip_and_overlap_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        triangle(tmp.path());
        write(
            tmp.path(),
            "splits.json",
            r#"{"train":[0],"val":[1],"test":[2]}"#,
        );
        let g = load_bundle(tmp.path()).unwrap();
        assert_eq!(g.splits.as_ref().unwrap().counts(), (1, 1, 1));

        let out = tmp.path().join("copy");
        save_bundle(&g, &out).unwrap();
        assert_eq!(load_bundle(&out).unwrap(), g);

        write(
            tmp.path(),
            "splits.json",
            r#"{"train":[0],"val":[0],"test":[2]}"#,
        );
        assert!(load_bundle(tmp.path()).is_err());
    }
}
