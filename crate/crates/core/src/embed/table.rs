use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kg_text::PromptKind;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

const BINARY_MAGIC: &[u8; 4] = b"CLKG";

/// Frozen semantic vectors for items and users.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbeddingTable {
    dim: usize,
    items: BTreeMap<u32, Vec<f32>>,
    users: BTreeMap<u32, Vec<f32>>,
    pub provider_tag: String,
}

impl SemanticEmbeddingTable {
    pub fn new(dim: usize, provider_tag: impl Into<String>) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            items: BTreeMap::new(),
            users: BTreeMap::new(),
            provider_tag: provider_tag.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, kind: PromptKind, id: u32, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "{} {id}: vector has length {}, table dimension is {}",
                kind.as_str(),
                vector.len(),
                self.dim
            )));
        }
        if let Some(x) = vector.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{} {id} contains {x}", kind.as_str())));
        }
        self.map_mut(kind).insert(id, vector);
        Ok(())
    }

    fn map(&self, kind: PromptKind) -> &BTreeMap<u32, Vec<f32>> {
        match kind {
            PromptKind::Item => &self.items,
            PromptKind::User => &self.users,
        }
    }

    fn map_mut(&mut self, kind: PromptKind) -> &mut BTreeMap<u32, Vec<f32>> {
        match kind {
            PromptKind::Item => &mut self.items,
            PromptKind::User => &mut self.users,
        }
    }

    pub fn get(&self, kind: PromptKind, id: u32) -> Option<&[f32]> {
        self.map(kind).get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, kind: PromptKind, id: u32) -> bool {
        self.map(kind).contains_key(&id)
    }

    pub fn item(&self, id: u32) -> Option<&[f32]> {
        self.get(PromptKind::Item, id)
    }

    pub fn user(&self, id: u32) -> Option<&[f32]> {
        self.get(PromptKind::User, id)
    }

    pub fn len(&self) -> usize {
        self.items.len() + self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    /// Ids among `0..n_items` / `0..n_users` without a vector, as `kind:id`.
    pub fn missing(&self, n_items: usize, n_users: usize) -> Vec<String> {
        let mut out = Vec::new();
        for (kind, n) in [(PromptKind::Item, n_items), (PromptKind::User, n_users)] {
            for id in 0..n as u32 {
                if !self.contains(kind, id) {
                    out.push(format!("{}:{id}", kind.as_str()));
                }
            }
        }
        out
    }

    pub fn ensure_complete(&self, n_items: usize, n_users: usize) -> Result<()> {
        let missing = self.missing(n_items, n_users);
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Incomplete {
                what: "embedding table".into(),
                missing,
            })
        }
    }

    fn dense<T: Scalar>(&self, kind: PromptKind, n: usize) -> Result<Matrix<T>> {
        let mut m = Matrix::zeros(n, self.dim);
        for id in 0..n as u32 {
            let v = self.get(kind, id).ok_or_else(|| Error::Incomplete {
                what: "embedding table".into(),
                missing: vec![format!("{}:{id}", kind.as_str())],
            })?;
            for (dst, &x) in m.row_mut(id as usize).iter_mut().zip(v) {
                *dst = T::of(x as f64);
            }
        }
        Ok(m)
    }

    /// `n_items x dim` matrix of item vectors.
    pub fn item_matrix<T: Scalar>(&self, n_items: usize) -> Result<Matrix<T>> {
        self.dense(PromptKind::Item, n_items)
    }

    pub fn user_matrix<T: Scalar>(&self, n_users: usize) -> Result<Matrix<T>> {
        self.dense(PromptKind::User, n_users)
    }

    pub fn records(&self) -> impl Iterator<Item = (PromptKind, u32, &[f32])> {
        self.items
            .iter()
            .map(|(&id, v)| (PromptKind::Item, id, v.as_slice()))
            .chain(self.users.iter().map(|(&id, v)| (PromptKind::User, id, v.as_slice())))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("dim={}\n", self.dim);
        for (kind, id, v) in self.records() {
            s.push_str(&format_record(kind, id, v));
        }
        s
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len() * (9 + 4 * self.dim));
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (kind, id, v) in self.records() {
            out.push(match kind {
                PromptKind::Item => 0,
                PromptKind::User => 1,
            });
            out.extend_from_slice(&(id as u64).to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses the text format. With `lenient`, a final line lacking its
    /// newline (an interrupted append) is ignored instead of rejected.
    pub fn from_text(text: &str, origin: &Path, lenient: bool) -> Result<Self> {
        let mut lines = text.split_inclusive('\n').enumerate();
        let dim = match lines.next() {
            Some((_, header)) => header
                .trim_end()
                .strip_prefix("dim=")
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|&d| d > 0)
                .ok_or_else(|| Error::parse(origin, 1, "expected header `dim=<d>`"))?,
            None => return Err(Error::parse(origin, 1, "empty embedding file")),
        };
        let mut table = Self::new(dim, "file");
        for (i, raw) in lines {
            if lenient && !raw.ends_with('\n') {
                break;
            }
            let line = raw.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::parse(origin, i + 1, msg.to_owned());
            let mut cols = line.splitn(3, '\t');
            let kind = match cols.next() {
                Some("item") => PromptKind::Item,
                Some("user") => PromptKind::User,
                _ => return Err(bad("kind must be `item` or `user`")),
            };
            let id: u32 = cols
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad id"))?;
            let values: std::result::Result<Vec<f32>, _> =
                cols.next().unwrap_or("").split(' ').map(str::parse::<f32>).collect();
            let values = values.map_err(|_| bad("bad float"))?;
            table
                .insert(kind, id, values)
                .map_err(|e| bad(&e.to_string()))?;
        }
        Ok(table)
    }

    pub fn from_binary(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::parse(origin, 0, msg.to_owned());
        if bytes.len() < 8 || &bytes[..4] != BINARY_MAGIC {
            return Err(bad("missing CLKG magic"));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(bad("zero dimension"));
        }
        let rec = 1 + 8 + 4 * dim;
        let body = &bytes[8..];
        if !body.len().is_multiple_of(rec) {
            return Err(bad("truncated record"));
        }
        let mut table = Self::new(dim, "file");
        for chunk in body.chunks_exact(rec) {
            let kind = match chunk[0] {
                0 => PromptKind::Item,
                1 => PromptKind::User,
                _ => return Err(bad("bad kind byte")),
            };
            let id = u64::from_le_bytes(chunk[1..9].try_into().unwrap());
            let id = u32::try_from(id).map_err(|_| bad("id out of range"))?;
            let v = chunk[9..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            table.insert(kind, id, v).map_err(|e| bad(&e.to_string()))?;
        }
        Ok(table)
    }

    /// Writes text or binary depending on the extension (`.bin` is binary).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if is_binary_path(path) {
            self.to_binary()
        } else {
            self.to_text().into_bytes()
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads either format, detected by the binary magic.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(BINARY_MAGIC) {
            Self::from_binary(&bytes, path)
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::parse(path, 0, "not UTF-8"))?;
            Self::from_text(&text, path, false)
        }
    }
}

pub(crate) fn is_binary_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

pub(crate) fn format_record(kind: PromptKind, id: u32, v: &[f32]) -> String {
    let mut s = format!("{}\t{id}\t", kind.as_str());
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x}");
    }
    s.push('\n');
    s
}

/// Appends single records to a text table as they are produced.
pub(crate) struct TextAppender {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl TextAppender {
    /// Opens `path` for appending, writing the header first if the file is
    /// new and cutting any partial trailing line.
    pub(crate) fn open(path: &Path, dim: usize, existing: Option<&str>) -> Result<Self> {
        let content = match existing {
            Some(text) => {
                let keep = text.rfind('\n').map_or(0, |i| i + 1);
                text[..keep].to_owned()
            }
            None => String::new(),
        };
        let content = if content.is_empty() {
            format!("dim={dim}\n")
        } else {
            content
        };
        std::fs::write(path, &content).map_err(|e| Error::io(path, e))?;
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_owned(),
        })
    }

    pub(crate) fn append(&mut self, kind: PromptKind, id: u32, v: &[f32]) -> Result<()> {
        self.file
            .write_all(format_record(kind, id, v).as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn sample() -> SemanticEmbeddingTable {
        let mut t = SemanticEmbeddingTable::new(3, "mock");
        t.insert(PromptKind::Item, 0, vec![0.1, -2.5e-8, 3.0]).unwrap();
        t.insert(PromptKind::Item, 1, vec![1.0 / 3.0, 0.0, -0.0]).unwrap();
        t.insert(PromptKind::User, 0, vec![f32::MIN_POSITIVE, f32::MAX, 7.0]).unwrap();
        t
    }

    #[test]
    fn rejects_wrong_length_and_nan() {
        let mut t = SemanticEmbeddingTable::new(2, "x");
        assert!(matches!(t.insert(PromptKind::Item, 0, vec![1.0]), Err(Error::Shape(_))));
        assert!(matches!(t.insert(PromptKind::Item, 0, vec![1.0, f32::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn text_layout() {
        let text = sample().to_text();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("dim=3"));
        assert_eq!(lines.next(), Some("item\t0\t0.1 -0.000000025 3"));
    }

    #[test]
    fn binary_layout() {
        let bytes = sample().to_binary();
        assert_eq!(&bytes[..4], b"CLKG");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 8 + 3 * (1 + 8 + 12));
        assert_eq!(bytes[8 + 2 * 21], 1);
    }

    #[test]
    fn missing_ids_are_listed() {
        let t = sample();
        assert_eq!(t.missing(3, 2), vec!["item:2".to_owned(), "user:1".to_owned()]);
        assert_eq!(t.ensure_complete(3, 2).unwrap_err().exit_code(), 4);
        assert!(t.ensure_complete(2, 1).is_ok());
    }

    #[test]
    fn lenient_parse_drops_partial_tail() {
        let mut text = sample().to_text();
        text.push_str("user\t1\t0.5 0.");
        let origin = PathBuf::from("t");
        assert!(SemanticEmbeddingTable::from_text(&text, &origin, false).is_err());
        let t = SemanticEmbeddingTable::from_text(&text, &origin, true).unwrap();
        assert_eq!(t.len(), 3);
    }

    proptest! {
        #[test]
        fn persist_reload_is_bitwise(
            rows in proptest::collection::vec(proptest::collection::vec(-1e30f32..1e30, 4), 1..8),
            binary in any::<bool>(),
        ) {
            let mut t = SemanticEmbeddingTable::new(4, "file");
            for (i, r) in rows.iter().enumerate() {
                t.insert(if i % 2 == 0 { PromptKind::Item } else { PromptKind::User }, i as u32, r.clone()).unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join(if binary { "t.bin" } else { "t.tsv" });
            t.save(&path).unwrap();
            let back = SemanticEmbeddingTable::load(&path).unwrap();
            for ((k1, i1, v1), (k2, i2, v2)) in t.records().zip(back.records()) {
                prop_assert_eq!((k1, i1), (k2, i2));
                let a: Vec<u32> = v1.iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = v2.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
            prop_assert_eq!(back.len(), t.len());
        }
    }
}
