//! JSON-lines datasets and pipeline artifacts.
//!
//! Image paths inside a file are relative to an image root declared in a
//! sidecar manifest (`<stem>.manifest.json`, next to the file). Without a
//! sidecar the file's own directory is the root. Loaders resolve paths
//! against the root; writers make them relative again.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use m3cot_core::bench::BenchmarkItem;
use m3cot_core::chat::{media_type_for, ImageRef, ImageSource};
use m3cot_core::forge::{CandidateQA, FramePair};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::util::write_atomic;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarManifest {
    pub schema_version: u32,
    pub image_root: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingImage {
    pub line: usize,
    pub id: String,
    pub field: &'static str,
    pub path: String,
}

impl fmt::Display for MissingImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {} ({}): {} not found at {}", self.line, self.id, self.field, self.path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Schema { line: usize, field: String, message: String },
    #[error("line {line}: duplicate id `{id}` (first seen on line {first_line})")]
    DuplicateId { id: String, line: usize, first_line: usize },
    #[error("{} missing image(s):\n{}", .0.len(), .0.iter().map(|m| format!("  {m}")).collect::<Vec<_>>().join("\n"))]
    MissingImages(Vec<MissingImage>),
}

/// Records that carry an ego/exo image pair.
pub trait HasImages {
    fn id(&self) -> &str;
    fn images_mut(&mut self) -> [(&'static str, &mut ImageRef); 2];
}

macro_rules! has_images {
    ($t:ty, $id:ident) => {
        impl HasImages for $t {
            fn id(&self) -> &str {
                &self.$id
            }

            fn images_mut(&mut self) -> [(&'static str, &mut ImageRef); 2] {
                [("ego_image", &mut self.ego_image), ("exo_image", &mut self.exo_image)]
            }
        }
    };
}

has_images!(BenchmarkItem, id);
has_images!(FramePair, pair_id);
has_images!(CandidateQA, qa_id);

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub items: Vec<T>,
    pub image_root: PathBuf,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.manifest.json"))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// The image root declared for `path`, or its directory.
pub fn image_root_for(path: &Path) -> Result<PathBuf, DatasetError> {
    let sidecar = sidecar_path(path);
    let dir = parent_dir(path);
    if !sidecar.exists() {
        return Ok(dir);
    }
    let bad = |message: String| DatasetError::Manifest { path: sidecar.clone(), message };
    let text = fs::read_to_string(&sidecar).map_err(|e| bad(e.to_string()))?;
    let m: SidecarManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", m.schema_version)));
    }
    Ok(dir.join(m.image_root))
}

fn resolve(root: &Path, image: &mut ImageRef) {
    if image.source == ImageSource::LocalPath && Path::new(&image.value).is_relative() {
        image.value = root.join(&image.value).to_string_lossy().into_owned();
    }
}

/// The path of a local image relative to `root`, when it lies under it.
pub fn relative_to(root: &Path, value: &str) -> Option<String> {
    let rel = Path::new(value).strip_prefix(root).ok()?;
    Some(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"))
}

fn relativize(root: &Path, image: &mut ImageRef) {
    if image.source == ImageSource::LocalPath {
        if let Some(rel) = relative_to(root, &image.value) {
            image.value = rel;
        }
    }
}

/// Accept a bare string for an image field as a local path.
fn expand_image_shorthand(obj: &mut serde_json::Map<String, Value>) {
    for key in ["ego_image", "exo_image"] {
        if let Some(Value::String(s)) = obj.get(key) {
            let s = s.clone();
            obj.insert(
                key.to_string(),
                serde_json::json!({"source": "local_path", "media_type": media_type_for(&s), "value": s}),
            );
        }
    }
}

fn field_from_serde(msg: &str) -> String {
    for marker in ["missing field `", "unknown field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "(record)".to_string()
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.to_string()))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect())
}

fn parse_object(line: usize, text: &str) -> Result<serde_json::Map<String, Value>, DatasetError> {
    let schema = |message: String| DatasetError::Schema { line, field: "(record)".into(), message };
    match serde_json::from_str::<Value>(text).map_err(|e| schema(e.to_string()))? {
        Value::Object(mut obj) => {
            expand_image_shorthand(&mut obj);
            Ok(obj)
        }
        _ => Err(schema("expected a JSON object".into())),
    }
}

const ITEM_FIELDS: [&str; 10] = [
    "id",
    "category",
    "question_perspective",
    "ego_image",
    "exo_image",
    "question",
    "options",
    "answer_index",
    "required_views",
    "source_take",
];

fn check_field<T: DeserializeOwned>(obj: &serde_json::Map<String, Value>, key: &str) -> Result<(), String> {
    match obj.get(key) {
        None => Err("missing".into()),
        Some(v) => serde_json::from_value::<T>(v.clone()).map(|_| ()).map_err(|e| e.to_string()),
    }
}

/// Parse one benchmark line, naming the offending field on failure.
fn parse_item(line: usize, text: &str) -> Result<BenchmarkItem, DatasetError> {
    use m3cot_core::bench::{Category, Perspective, RequiredView};
    let obj = parse_object(line, text)?;
    let schema = |field: &str, message: String| DatasetError::Schema { line, field: field.to_string(), message };
    if let Some(k) = obj.keys().find(|k| !ITEM_FIELDS.contains(&k.as_str())) {
        return Err(schema(k, "unknown field".into()));
    }
    let checks: [(&str, fn(&serde_json::Map<String, Value>, &str) -> Result<(), String>); 8] = [
        ("id", check_field::<String>),
        ("category", check_field::<Category>),
        ("question_perspective", check_field::<Perspective>),
        ("ego_image", check_field::<ImageRef>),
        ("exo_image", check_field::<ImageRef>),
        ("question", check_field::<String>),
        ("options", check_field::<Vec<String>>),
        ("answer_index", check_field::<usize>),
    ];
    for (field, check) in checks {
        check(&obj, field).map_err(|m| schema(field, m))?;
    }
    if let Some(v) = obj.get("required_views").filter(|v| !v.is_null()) {
        serde_json::from_value::<RequiredView>(v.clone()).map_err(|e| schema("required_views", e.to_string()))?;
    }
    let item: BenchmarkItem = serde_json::from_value(Value::Object(obj)).map_err(|e| {
        let m = e.to_string();
        schema(&field_from_serde(&m), m)
    })?;
    item.validate().map_err(|e| schema(e.field, e.message))?;
    Ok(item)
}

/// Load and validate a benchmark file, checking that every local image
/// exists. Missing images are reported together.
pub fn load_dataset(path: &Path) -> Result<Vec<BenchmarkItem>, DatasetError> {
    load_dataset_with(path, true).map(|l| l.items)
}

pub fn load_dataset_with(path: &Path, check_images: bool) -> Result<Loaded<BenchmarkItem>, DatasetError> {
    let image_root = image_root_for(path)?;
    let mut items = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut missing = Vec::new();
    for (line, text) in read_lines(path)? {
        let mut item = parse_item(line, &text)?;
        if let Some(&first_line) = seen.get(&item.id) {
            return Err(DatasetError::DuplicateId { id: item.id, line, first_line });
        }
        seen.insert(item.id.clone(), line);
        let id = item.id.clone();
        for (field, image) in item.images_mut() {
            resolve(&image_root, image);
            if check_images && image.source == ImageSource::LocalPath && !Path::new(&image.value).is_file() {
                missing.push(MissingImage { line, id: id.clone(), field, path: image.value.clone() });
            }
        }
        items.push(item);
    }
    if !missing.is_empty() {
        return Err(DatasetError::MissingImages(missing));
    }
    Ok(Loaded { items, image_root })
}

/// Load any image-carrying JSONL artifact (frame pairs, candidates).
pub fn load_artifact<T: DeserializeOwned + HasImages>(path: &Path) -> Result<Loaded<T>, DatasetError> {
    let image_root = image_root_for(path)?;
    let mut items = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (line, text) in read_lines(path)? {
        let obj = parse_object(line, &text)?;
        let mut item: T = serde_json::from_value(Value::Object(obj)).map_err(|e| {
            let m = e.to_string();
            DatasetError::Schema { line, field: field_from_serde(&m), message: m }
        })?;
        if let Some(&first_line) = seen.get(item.id()) {
            return Err(DatasetError::DuplicateId { id: item.id().to_string(), line, first_line });
        }
        seen.insert(item.id().to_string(), line);
        for (_, image) in item.images_mut() {
            resolve(&image_root, image);
        }
        items.push(item);
    }
    Ok(Loaded { items, image_root })
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| {
                let m = e.to_string();
                DatasetError::Schema { line, field: field_from_serde(&m), message: m }
            })
        })
        .collect()
}

/// Write records with image paths made relative to `image_root`, plus the
/// sidecar declaring that root.
pub fn write_artifact<T: Serialize + HasImages + Clone>(
    path: &Path,
    items: &[T],
    image_root: &Path,
) -> std::io::Result<()> {
    let rel: Vec<T> = items
        .iter()
        .cloned()
        .map(|mut item| {
            for (_, image) in item.images_mut() {
                relativize(image_root, image);
            }
            item
        })
        .collect();
    write_atomic(path, to_jsonl(&rel).as_bytes())?;
    let dir = parent_dir(path);
    let root = match image_root.strip_prefix(&dir) {
        Ok(r) if r.as_os_str().is_empty() => ".".to_string(),
        Ok(r) => r.to_string_lossy().into_owned(),
        Err(_) => std::path::absolute(image_root).unwrap_or_else(|_| image_root.to_path_buf()).to_string_lossy().into_owned(),
    };
    let manifest = SidecarManifest { schema_version: SCHEMA_VERSION, image_root: root };
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    write_atomic(&sidecar_path(path), &bytes)
}

pub fn write_dataset(path: &Path, items: &[BenchmarkItem], image_root: &Path) -> std::io::Result<()> {
    write_artifact(path, items, image_root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use m3cot_core::bench::{Category, Perspective};

    fn item(id: &str) -> BenchmarkItem {
        BenchmarkItem {
            id: id.into(),
            category: Category::Numerical,
            question_perspective: Perspective::Ego,
            ego_image: ImageRef::local("img/ego.jpg"),
            exo_image: ImageRef::local("img/exo.jpg"),
            question: "How many cups?".into(),
            options: vec!["1".into(), "2".into(), "3".into(), "4".into()],
            answer_index: 2,
            required_views: None,
            source_take: None,
        }
    }

    fn fixture() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("img")).unwrap();
        fs::write(dir.path().join("img/ego.jpg"), b"e").unwrap();
        fs::write(dir.path().join("img/exo.jpg"), b"x").unwrap();
        let p = dir.path().join("d.jsonl");
        (dir, p)
    }

    #[test]
    fn round_trip_with_sidecar() {
        let (dir, p) = fixture();
        let items: Vec<_> = (0..8).map(|i| item(&format!("q{i}"))).collect();
        fs::write(&p, to_jsonl(&items)).unwrap();
        let loaded = load_dataset(&p).unwrap();
        assert_eq!(loaded.len(), 8);
        assert_eq!(loaded[0].ego_image.value, dir.path().join("img/ego.jpg").to_string_lossy());

        let out = dir.path().join("export/e.jsonl");
        write_dataset(&out, &loaded, dir.path()).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.contains("\"img/ego.jpg\""), "{text}");
        assert_eq!(load_dataset(&out).unwrap(), loaded);
    }

    #[test]
    fn schema_errors_name_fields() {
        let (_dir, p) = fixture();
        let mut bad = item("q1");
        bad.options.pop();
        fs::write(&p, to_jsonl(&[item("q0"), bad])).unwrap();
        match load_dataset(&p).unwrap_err() {
            DatasetError::Schema { line, field, .. } => assert_eq!((line, field.as_str()), (2, "options")),
            e => panic!("{e}"),
        }
        fs::write(&p, "{\"id\":\"q\",\"category\":\"weird\"}\n").unwrap();
        match load_dataset(&p).unwrap_err() {
            DatasetError::Schema { field, .. } => assert_eq!(field, "category"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn duplicates_and_missing_images() {
        let (dir, p) = fixture();
        fs::write(&p, to_jsonl(&[item("q1"), item("q1")])).unwrap();
        assert!(matches!(load_dataset(&p), Err(DatasetError::DuplicateId { line: 2, first_line: 1, .. })));
        let mut a = item("a");
        a.ego_image = ImageRef::local("img/none.jpg");
        let mut b = item("b");
        b.exo_image = ImageRef::local("img/gone.jpg");
        fs::write(&p, to_jsonl(&[a, b])).unwrap();
        match load_dataset(&p).unwrap_err() {
            DatasetError::MissingImages(m) => assert_eq!(m.len(), 2),
            e => panic!("{e}"),
        }
        assert_eq!(load_dataset_with(&p, false).unwrap().items.len(), 2);
        drop(dir);
    }

    #[test]
    fn string_image_shorthand_and_declared_root() {
        let (dir, p) = fixture();
        let line = r#"{"id":"s","category":"spatial","question_perspective":"exo","ego_image":"ego.jpg","exo_image":"exo.jpg","question":"Where?","options":["a","b","c","d"],"answer_index":0}"#;
        fs::write(&p, format!("{line}\n")).unwrap();
        fs::write(sidecar_path(&p), r#"{"schema_version":1,"image_root":"img"}"#).unwrap();
        let items = load_dataset(&p).unwrap();
        assert_eq!(items[0].exo_image.value, dir.path().join("img").join("exo.jpg").to_string_lossy());
        fs::write(sidecar_path(&p), r#"{"schema_version":9,"image_root":"img"}"#).unwrap();
        assert!(matches!(load_dataset(&p), Err(DatasetError::Manifest { .. })));
    }
}
