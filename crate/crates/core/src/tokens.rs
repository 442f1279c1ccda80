//! Token-embedding sequences and class entries.
//!
//! Every tuning method perturbs the rows of a [`TokenSequence`]: prompts and
//! contexts are prepended, class-name offsets are added elementwise.

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// An `l × d_token` matrix of token embeddings.
///
/// Zero-length sequences are legal and stand in for an empty prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    rows: Array2<f64>,
    source_text: Option<String>,
}

impl TokenSequence {
    pub fn new(rows: Array2<f64>, source_text: Option<String>) -> Self {
        Self { rows, source_text }
    }

    pub fn from_rows(rows: Array2<f64>) -> Self {
        Self::new(rows, None)
    }

    pub fn empty(d_token: usize) -> Self {
        Self::new(Array2::zeros((0, d_token)), None)
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn into_rows(self) -> Array2<f64> {
        self.rows
    }

    pub fn source_text(&self) -> Option<&str> {
        self.source_text.as_deref()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_token(&self) -> usize {
        self.rows.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.rows.dim()
    }

    /// Row-wise concatenation `[a, b]`; rows of `self` come first.
    pub fn concat(&self, other: &TokenSequence) -> Result<TokenSequence> {
        if self.d_token() != other.d_token() {
            return Err(Error::dim(format!(
                "cannot concatenate token widths {} and {}",
                self.d_token(),
                other.d_token()
            )));
        }
        let rows = concatenate(Axis(0), &[self.rows.view(), other.rows.view()])
            .expect("widths checked above");
        let source_text = match (self.source_text(), other.source_text()) {
            (Some(a), Some(b)) if !a.is_empty() => Some(format!("{a} {b}")),
            (_, Some(b)) => Some(b.to_string()),
            (Some(a), None) => Some(a.to_string()),
            (None, None) => None,
        };
        Ok(TokenSequence::new(rows, source_text))
    }

    /// Elementwise `n + ε`. The source text of `self` is kept.
    pub fn add_offset(&self, offset: &Array2<f64>) -> Result<TokenSequence> {
        if self.rows.dim() != offset.dim() {
            return Err(Error::dim(format!(
                "offset shape {:?} does not match token shape {:?}",
                offset.dim(),
                self.rows.dim()
            )));
        }
        Ok(TokenSequence::new(
            &self.rows + offset,
            self.source_text.clone(),
        ))
    }
}

/// One visual category. `name_tokens` is the tokenized class name.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    pub class_id: usize,
    pub name_text: String,
    pub name_tokens: TokenSequence,
}

/// Classes with contiguous ids `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSet {
    entries: Vec<ClassEntry>,
}

impl ClassSet {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.class_id != i {
                return Err(Error::Integrity(format!(
                    "class ids must be contiguous from 0; position {i} holds id {}",
                    e.class_id
                )));
            }
            if e.name_tokens.is_empty() {
                return Err(Error::Integrity(format!(
                    "class {i} ({:?}) has an empty name",
                    e.name_text
                )));
            }
        }
        if let Some(first) = entries.first() {
            let d = first.name_tokens.d_token();
            if entries.iter().any(|e| e.name_tokens.d_token() != d) {
                return Err(Error::dim("class names use different token widths"));
            }
        }
        Ok(Self { entries })
    }

    /// Renumbers a subset of classes to `0..subset.len()` in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<ClassSet> {
        let entries = ids
            .iter()
            .enumerate()
            .map(|(new_id, &old)| {
                let e = self
                    .entries
                    .get(old)
                    .ok_or_else(|| Error::Integrity(format!("unknown class id {old}")))?;
                Ok(ClassEntry {
                    class_id: new_id,
                    ..e.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ClassSet::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ClassEntry> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ClassEntry> {
        self.entries.iter()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }
}
