//! Word-vector table in word2vec text format and cosine similarity.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine similarity is undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("vector contains a non-finite component")]
    NonFinite,
}

/// Owned embedding vector with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(components: Vec<f32>) -> Result<Self, EmbeddingError> {
        if components.iter().any(|c| !c.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Self(components))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl AsRef<[f32]> for Vector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum()
}

pub fn norm(u: &[f32]) -> f64 {
    dot(u, u).sqrt()
}

/// `(u·v)/(‖u‖‖v‖)` accumulated in f64, clamped to [-1, 1].
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let denom = norm(u) * norm(v);
    if denom == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    if !denom.is_finite() {
        return Err(EmbeddingError::NonFinite);
    }
    Ok((dot(u, v) / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadWarning {
    pub line: usize,
    pub message: String,
}

/// Immutable token → vector table. Vectors are kept exactly as loaded.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    dimension: usize,
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            ..Default::default()
        }
    }

    /// Inserts or replaces. Returns true when an existing entry was replaced.
    pub fn insert(&mut self, token: impl Into<String>, vector: Vector) -> Result<bool, EmbeddingError> {
        if vector.dim() != self.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                left: self.dimension,
                right: vector.dim(),
            });
        }
        let token = token.into();
        if let Some(&slot) = self.index.get(&token) {
            let start = slot * self.dimension;
            self.data[start..start + self.dimension].copy_from_slice(vector.as_slice());
            return Ok(true);
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.data.extend_from_slice(vector.as_slice());
        Ok(false)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Exact-match lookup; no case folding.
    pub fn lookup(&self, token: &str) -> Option<&[f32]> {
        self.index.get(token).map(|&slot| self.row(slot))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    fn row(&self, slot: usize) -> &[f32] {
        let start = slot * self.dimension;
        &self.data[start..start + self.dimension]
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(slot, t)| (t.as_str(), self.row(slot)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<LoadWarning>), EmbeddingError> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read(BufReader::new(file)).map_err(|e| match e {
            EmbeddingError::Io { source, .. } => EmbeddingError::Io {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    /// Parses word2vec text format: a `<count> <dimension>` header followed by
    /// `count` rows of `<token> <c1> ... <cdim>`. Duplicate tokens keep the last row.
    pub fn read<R: BufRead>(reader: R) -> Result<(Self, Vec<LoadWarning>), EmbeddingError> {
        let mut lines = reader.lines().enumerate();
        let format = |line: usize, message: String| EmbeddingError::Format { line, message };
        let (count, dimension) = match lines.next() {
            None => return Err(format(1, "missing header".into())),
            Some((_, header)) => {
                let header = header.map_err(io_error)?;
                let mut parts = header.split_whitespace();
                let parse = |s: Option<&str>, what: &str| -> Result<usize, EmbeddingError> {
                    s.ok_or_else(|| format(1, format!("header missing {what}")))?
                        .parse::<usize>()
                        .map_err(|e| format(1, format!("bad {what} in header: {e}")))
                };
                let count = parse(parts.next(), "count")?;
                let dim = parse(parts.next(), "dimension")?;
                if parts.next().is_some() {
                    return Err(format(1, "header has trailing fields".into()));
                }
                if dim == 0 {
                    return Err(format(1, "dimension must be positive".into()));
                }
                (count, dim)
            }
        };

        let mut store = Self::new(dimension);
        let mut warnings = Vec::new();
        let mut rows = 0usize;
        let mut components = Vec::with_capacity(dimension);
        for (idx, line) in lines {
            let line = line.map_err(io_error)?;
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            rows += 1;
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-blank line has a first field");
            components.clear();
            for part in parts {
                let value: f32 = part
                    .parse()
                    .map_err(|_| format(line_no, format!("non-numeric component {part:?}")))?;
                if !value.is_finite() {
                    return Err(format(line_no, format!("non-finite component {part:?}")));
                }
                components.push(value);
            }
            if components.len() != dimension {
                return Err(format(
                    line_no,
                    format!(
                        "token {token:?} has {} components, header declares {dimension}",
                        components.len()
                    ),
                ));
            }
            let replaced = store
                .insert(token, Vector(components.clone()))
                .expect("dimension checked above");
            if replaced {
                tracing::warn!(line = line_no, token, "duplicate embedding row, keeping last");
                warnings.push(LoadWarning {
                    line: line_no,
                    message: format!("duplicate token {token:?}; later row wins"),
                });
            }
        }
        if rows != count {
            return Err(format(
                1,
                format!("header declares {count} rows, file has {rows}"),
            ));
        }
        Ok((store, warnings))
    }

    /// Writes the word2vec text format. Components use the shortest
    /// representation that parses back to the same f32.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.len(), self.dimension)?;
        for (token, row) in self.iter() {
            out.write_all(token.as_bytes())?;
            for c in row {
                write!(out, " {c}")?;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn io_error(source: std::io::Error) -> EmbeddingError {
    EmbeddingError::Io {
        path: String::new(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn read(s: &str) -> Result<(EmbeddingStore, Vec<LoadWarning>), EmbeddingError> {
        EmbeddingStore::read(s.as_bytes())
    }

    #[test]
    fn loads_header_and_rows() {
        let (store, warnings) = read("2 3\nlamp 0.1 0.2 0.3\nbed -1 0 2.5\n").unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.dimension(), 3);
        assert!(warnings.is_empty());
        assert_eq!(store.lookup("lamp").unwrap(), &[0.1f32, 0.2, 0.3]);
        assert_eq!(store.lookup("bed").unwrap()[2].to_bits(), 2.5f32.to_bits());
    }

    #[test]
    fn short_row_is_an_error_at_its_line() {
        match read("2 3\nlamp 0.1 0.2 0.3\nbed 1 2\n") {
            Err(EmbeddingError::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_component_is_an_error() {
        assert!(matches!(
            read("1 2\nlamp 0.1 abc\n"),
            Err(EmbeddingError::Format { line: 2, .. })
        ));
        assert!(matches!(read("1 2\nlamp 0.1 NaN\n"), Err(EmbeddingError::Format { .. })));
    }

    #[test]
    fn bad_header_and_row_count() {
        assert!(read("").is_err());
        assert!(read("x 3\n").is_err());
        assert!(read("2 0\n").is_err());
        assert!(read("3 1\na 1\nb 2\n").is_err());
    }

    #[test]
    fn duplicate_rows_last_wins_with_warning() {
        let (store, warnings) = read("2 2\nlamp 1 0\nlamp 0 1\n").unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].line, 3);
        assert_eq!(store.lookup("lamp").unwrap(), &[0.0f32, 1.0]);
    }

    #[test]
    fn lookup_is_exact() {
        let (store, _) = read("1 2\nLamp 1 0\n").unwrap();
        assert!(store.lookup("lamp").is_none());
        assert!(store.lookup("Lamp").is_some());
        assert!(store.lookup("missing").is_none());
    }

    #[test]
    fn tolerates_trailing_spaces() {
        let (store, _) = read("1 2\nlamp 1 0 \n").unwrap();
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(EmbeddingError::ZeroNorm)));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f32::NAN]).is_err());
        assert!(Vector::new(vec![1.0, f32::INFINITY]).is_err());
    }

    fn arb_vec(dim: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-100.0f32..100.0, dim)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_scale_invariant_bounded(
            (u, v) in (1usize..16).prop_flat_map(|d| (arb_vec(d), arb_vec(d))),
            alpha in 0.01f32..50.0,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let c = cosine(&u, &v).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert_eq!(c, cosine(&v, &u).unwrap());
            let scaled: Vec<f32> = u.iter().map(|x| x * alpha).collect();
            prop_assert!((cosine(&scaled, &v).unwrap() - c).abs() < 1e-5);
        }

        #[test]
        fn write_then_read_round_trips(
            rows in prop::collection::btree_map("[a-z\u{4e00}-\u{4e10}]{1,6}", arb_vec(4), 0..12)
        ) {
            let mut store = EmbeddingStore::new(4);
            for (t, v) in &rows {
                store.insert(t.clone(), Vector::new(v.clone()).unwrap()).unwrap();
            }
            let mut buf = Vec::new();
            store.write(&mut buf).unwrap();
            let (back, warnings) = EmbeddingStore::read(&buf[..]).unwrap();
            prop_assert!(warnings.is_empty());
            prop_assert_eq!(back.len(), store.len());
            for (t, v) in store.iter() {
                let got = back.lookup(t).unwrap();
                prop_assert!(got.iter().zip(v).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }
}
