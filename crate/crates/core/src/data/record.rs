use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Task label attached to every instruction record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Commonsense,
    Summarization,
    ReadingComprehension,
    Simplification,
    Correction,
    Translation,
    Qa,
    Other,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Commonsense,
        Category::Summarization,
        Category::ReadingComprehension,
        Category::Simplification,
        Category::Correction,
        Category::Translation,
        Category::Qa,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Commonsense => "commonsense",
            Category::Summarization => "summarization",
            Category::ReadingComprehension => "reading-comprehension",
            Category::Simplification => "simplification",
            Category::Correction => "correction",
            Category::Translation => "translation",
            Category::Qa => "qa",
            Category::Other => "other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown category {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    #[serde(default)]
    pub input: Option<String>,
    pub output: String,
    pub category: Category,
    pub source: String,
}

impl InstructionRecord {
    /// Builds a validated record. An empty `input` is stored as absent.
    pub fn new(
        instruction: impl Into<String>,
        input: Option<String>,
        output: impl Into<String>,
        category: Category,
        source: impl Into<String>,
    ) -> Result<Self> {
        let record = Self {
            instruction: instruction.into(),
            input: input.filter(|s| !s.is_empty()),
            output: output.into(),
            category,
            source: source.into(),
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruction.is_empty() {
            return Err(Error::Validation("instruction must be non-empty".into()));
        }
        if self.output.is_empty() {
            return Err(Error::Validation("output must be non-empty".into()));
        }
        Ok(())
    }
}

/// Record counts per category and per source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub total: usize,
    pub by_category: BTreeMap<Category, usize>,
    pub by_source: BTreeMap<String, usize>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            total: 0,
            by_category: Category::ALL.into_iter().map(|c| (c, 0)).collect(),
            by_source: BTreeMap::new(),
        }
    }
}

impl DatasetManifest {
    pub fn count(&self, category: Category) -> usize {
        self.by_category.get(&category).copied().unwrap_or(0)
    }
}

pub fn dataset_stats(records: &[InstructionRecord]) -> DatasetManifest {
    let mut m = DatasetManifest::default();
    for r in records {
        m.total += 1;
        *m.by_category.entry(r.category).or_default() += 1;
        *m.by_source.entry(r.source.clone()).or_default() += 1;
    }
    m
}

/// Order-preserving removal of every record whose category is excluded.
pub fn filter_by_category(
    records: Vec<InstructionRecord>,
    excluded: &[Category],
) -> Vec<InstructionRecord> {
    records
        .into_iter()
        .filter(|r| !excluded.contains(&r.category))
        .collect()
}

/// Parses one JSON Lines document; blank lines are skipped.
pub fn parse_records(text: &str, path: &Path) -> Result<Vec<InstructionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw: InstructionRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let rec = InstructionRecord::new(
            raw.instruction,
            raw.input,
            raw.output,
            raw.category,
            raw.source,
        )
        .map_err(|e| err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<(Vec<InstructionRecord>, DatasetManifest)> {
    let text = fs::read_to_string(path)?;
    let records = parse_records(&text, path)?;
    let manifest = dataset_stats(&records);
    Ok((records, manifest))
}

/// Writes records as JSON Lines.
pub fn write_records(path: &Path, records: &[InstructionRecord]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    fs::write(path, buf)?;
    Ok(())
}
