//! The prompt catalog shipped with the binary, plus directory overrides and
//! the golden comparison behind `templates check`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use m3cot_core::prompt::{Catalog, GoldenMismatch, PromptError, TemplateKey};

mod embedded {
    include!(concat!(env!("OUT_DIR"), "/embedded.rs"));
}

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, thiserror::Error)]
pub enum CatalogLoadError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Files of a template tree, keyed by manifest-relative path.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateFiles(pub BTreeMap<String, String>);

impl TemplateFiles {
    pub fn embedded() -> Self {
        Self(embedded::TEMPLATES.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
    }

    pub fn embedded_golden() -> Self {
        Self(embedded::GOLDEN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
    }

    /// Read the manifest in `dir` and every file it names.
    pub fn from_dir(dir: &Path) -> Result<Self, CatalogLoadError> {
        let read = |rel: &str| {
            let path = dir.join(rel);
            fs::read_to_string(&path).map_err(|source| CatalogLoadError::Io { path, source })
        };
        let manifest = read(MANIFEST)?;
        let mut files = BTreeMap::new();
        for entry in m3cot_core::prompt::parse_manifest(&manifest)? {
            match read(&entry.path) {
                Ok(text) => {
                    files.insert(entry.path, text);
                }
                // Missing bodies surface later as MissingFile/golden-missing.
                Err(CatalogLoadError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        files.insert(MANIFEST.to_string(), manifest);
        Ok(Self(files))
    }

    pub fn catalog(&self) -> Result<Catalog, PromptError> {
        let manifest = self.0.get(MANIFEST).ok_or_else(|| PromptError::BadManifest("no manifest.txt".into()))?;
        Catalog::from_manifest(manifest, |p| self.0.get(p).cloned())
    }
}

/// The embedded catalog, or the one under `dir` when given.
pub fn load_catalog(dir: Option<&Path>) -> Result<Catalog, CatalogLoadError> {
    let files = match dir {
        Some(d) => TemplateFiles::from_dir(d)?,
        None => TemplateFiles::embedded(),
    };
    Ok(files.catalog()?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckReport {
    pub checked: usize,
    pub mismatches: Vec<GoldenMismatch>,
    pub missing: Vec<TemplateKey>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.missing.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in &self.mismatches {
            out.push_str(&format!("MISMATCH {} ({}) first difference at byte {}\n", m.key, m.path, m.offset));
        }
        for k in &self.missing {
            out.push_str(&format!("MISSING golden for {k}\n"));
        }
        out.push_str(&format!(
            "{} templates checked, {} mismatched, {} without golden\n",
            self.checked,
            self.mismatches.len(),
            self.missing.len()
        ));
        out
    }
}

pub fn check(catalog: &Catalog, golden: &TemplateFiles) -> CheckReport {
    let lookup = |_: &TemplateKey, path: &str| golden.0.get(path).cloned();
    match catalog.golden_check(lookup) {
        Ok(mismatches) => CheckReport { checked: catalog.len(), mismatches, missing: Vec::new() },
        Err(missing) => {
            // Still report mismatches among the keys that do have a golden file.
            let mismatches = catalog
                .golden_check(|k, p| if missing.keys.contains(k) { Some(String::new()) } else { lookup(k, p) })
                .unwrap_or_default()
                .into_iter()
                .filter(|m| !missing.keys.contains(&m.key))
                .collect();
            CheckReport { checked: catalog.len(), mismatches, missing: missing.keys }
        }
    }
}
