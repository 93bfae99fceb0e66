//! Published reference cells the audit compares against.

use std::path::Path;

use serde::Deserialize;

use crate::attention::Variant;
use crate::audit::Backbone;
use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../data/reference.csv");

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceCell {
    pub backbone: String,
    pub variant: String,
    pub params_millions: f64,
    pub flops_g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable {
    cells: Vec<ReferenceCell>,
}

impl ReferenceTable {
    /// The table shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN).expect("bundled reference table is well formed")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let cells = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ReferenceCell>, _>>()
            .map_err(|e| Error::Format(format!("reference table: {e}")))?;
        Ok(Self { cells })
    }

    pub fn cells(&self) -> &[ReferenceCell] {
        &self.cells
    }

    pub fn lookup(&self, backbone: Backbone, variant: Option<Variant>) -> Option<&ReferenceCell> {
        let v = variant.map_or_else(|| "none".to_string(), |v| v.to_string());
        self.cells
            .iter()
            .find(|c| c.backbone.eq_ignore_ascii_case(backbone.name()) && c.variant.eq_ignore_ascii_case(&v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_has_eight_cells() {
        let t = ReferenceTable::builtin();
        assert_eq!(t.cells().len(), 8);
        let c = t.lookup(Backbone::Resnet50, Some(Variant::Bav2)).unwrap();
        assert_eq!(c.params_millions, 28.70);
        assert!(t.lookup(Backbone::Resnet18, None).is_none());
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(ReferenceTable::parse("backbone,variant,params_millions,flops_g\nresnet50,none,x,4.1\n").is_err());
    }
}
