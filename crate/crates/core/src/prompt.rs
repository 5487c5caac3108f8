//! Prompt template catalog and renderer.
//!
//! Templates are plain UTF-8 bodies with `{Name}` placeholders drawn from a
//! fixed vocabulary ([`Placeholder`]). A catalog is assembled from a manifest
//! that maps [`TemplateKey`] tuples to file paths; the bodies themselves are
//! supplied by a resolver so this crate never touches the filesystem.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::Category;
use crate::chat::{ContentPart, ImageRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateMethod {
    Default,
    DDCoT,
    CoCoT,
    CCoT,
    M3CoT,
    ForgeStep1,
    ForgeStep2,
    ForgeStep3,
    OptionGen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    Ego,
    Exo,
    Both,
    TextOnly,
}

/// The three scene-graph perspectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PerspectiveAgent {
    EgoExo,
    Ego2Exo,
    Exo2Ego,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TemplateKey {
    pub method: TemplateMethod,
    pub phase: String,
    pub view: Option<View>,
    pub category: Option<Category>,
    pub agent: Option<PerspectiveAgent>,
}

impl TemplateKey {
    pub fn new(method: TemplateMethod, phase: &str) -> Self {
        Self { method, phase: phase.to_string(), view: None, category: None, agent: None }
    }

    pub fn view(mut self, view: View) -> Self {
        self.view = Some(view);
        self
    }

    pub fn category(mut self, category: Category) -> Self {
        self.category = Some(category);
        self
    }

    pub fn agent(mut self, agent: PerspectiveAgent) -> Self {
        self.agent = Some(agent);
        self
    }
}

impl fmt::Display for TemplateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}/{}",
            self.method,
            self.phase,
            na(self.view.as_ref()),
            na(self.category.as_ref()),
            na(self.agent.as_ref())
        )
    }
}

fn na<T: fmt::Display>(v: Option<&T>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

macro_rules! named_enum {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $(Self::$variant => $name),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = PromptError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok(Self::$variant),)+
                    other => Err(PromptError::BadManifest(format!("unknown {} `{}`", stringify!($ty), other))),
                }
            }
        }
    };
}

named_enum!(TemplateMethod {
    Default => "Default",
    DDCoT => "DDCoT",
    CoCoT => "CoCoT",
    CCoT => "CCoT",
    M3CoT => "M3CoT",
    ForgeStep1 => "ForgeStep1",
    ForgeStep2 => "ForgeStep2",
    ForgeStep3 => "ForgeStep3",
    OptionGen => "OptionGen",
});
named_enum!(View { Ego => "Ego", Exo => "Exo", Both => "Both", TextOnly => "TextOnly" });
named_enum!(PerspectiveAgent { EgoExo => "EgoExo", Ego2Exo => "Ego2Exo", Exo2Ego => "Exo2Ego" });
named_enum!(Category {
    PoseAction => "PoseAction",
    ObjectAttribute => "ObjectAttribute",
    Numerical => "Numerical",
    Spatial => "Spatial",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Placeholder {
    EgoImage,
    ExoImage,
    Question,
    QuestionPrompt,
    CategoryPrompt,
    AssistantResponse,
    AnswerInit,
    AnswerBoth,
    AnswerText,
    AnswerEgo,
    AnswerExo,
    SceneGraphA,
    SceneGraphB,
}

impl Placeholder {
    pub const ALL: [Placeholder; 13] = [
        Placeholder::EgoImage,
        Placeholder::ExoImage,
        Placeholder::Question,
        Placeholder::QuestionPrompt,
        Placeholder::CategoryPrompt,
        Placeholder::AssistantResponse,
        Placeholder::AnswerInit,
        Placeholder::AnswerBoth,
        Placeholder::AnswerText,
        Placeholder::AnswerEgo,
        Placeholder::AnswerExo,
        Placeholder::SceneGraphA,
        Placeholder::SceneGraphB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::EgoImage => "EgoImage",
            Placeholder::ExoImage => "ExoImage",
            Placeholder::Question => "Question",
            Placeholder::QuestionPrompt => "QuestionPrompt",
            Placeholder::CategoryPrompt => "CategoryPrompt",
            Placeholder::AssistantResponse => "AssistantResponse",
            Placeholder::AnswerInit => "AnswerInit",
            Placeholder::AnswerBoth => "AnswerBoth",
            Placeholder::AnswerText => "AnswerText",
            Placeholder::AnswerEgo => "AnswerEgo",
            Placeholder::AnswerExo => "AnswerExo",
            Placeholder::SceneGraphA => "SceneGraphA",
            Placeholder::SceneGraphB => "SceneGraphB",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn is_image(self) -> bool {
        matches!(self, Placeholder::EgoImage | Placeholder::ExoImage)
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("no template registered for {0}")]
    UnknownKey(String),
    #[error("template {key} needs a binding for {{{placeholder}}}")]
    MissingBinding { key: String, placeholder: Placeholder },
    #[error("template {key} has no {{{placeholder}}} placeholder")]
    ExtraBinding { key: String, placeholder: Placeholder },
    #[error("{{{placeholder}}} in {key} bound to the wrong kind of value")]
    TypeMismatch { key: String, placeholder: Placeholder },
    #[error("template {key} uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { key: String, name: String },
    #[error("template {0} contains image placeholders and cannot render to plain text")]
    NotTextOnly(String),
    #[error("manifest error: {0}")]
    BadManifest(String),
    #[error("template file `{path}` for {key} could not be read")]
    MissingFile { key: String, path: String },
}

/// One lexical piece of a template body.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment<'a> {
    Literal(&'a str),
    Slot(Placeholder),
}

fn segments<'a>(key: &TemplateKey, body: &'a str) -> Result<Vec<Segment<'a>>, PromptError> {
    let mut out = Vec::new();
    let mut literal_start = 0;
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let rest = &body[i + 1..];
            let name_len = rest.bytes().take_while(u8::is_ascii_alphanumeric).count();
            if name_len > 0 && rest.as_bytes().get(name_len) == Some(&b'}') {
                let name = &rest[..name_len];
                if let Some(p) = Placeholder::from_name(name) {
                    if literal_start < i {
                        out.push(Segment::Literal(&body[literal_start..i]));
                    }
                    out.push(Segment::Slot(p));
                    i += name_len + 2;
                    literal_start = i;
                    continue;
                }
                if name.as_bytes()[0].is_ascii_uppercase() {
                    return Err(PromptError::UnknownPlaceholder { key: key.to_string(), name: name.to_string() });
                }
            }
        }
        i += 1;
    }
    if literal_start < body.len() {
        out.push(Segment::Literal(&body[literal_start..]));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub key: TemplateKey,
    pub body: String,
    pub placeholders: BTreeSet<Placeholder>,
}

impl Template {
    pub fn parse(key: TemplateKey, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        let placeholders = segments(&key, &body)?
            .into_iter()
            .filter_map(|s| match s {
                Segment::Slot(p) => Some(p),
                Segment::Literal(_) => None,
            })
            .collect();
        Ok(Self { key, body, placeholders })
    }

    /// Image placeholders in document order.
    pub fn image_order(&self) -> Vec<Placeholder> {
        segments(&self.key, &self.body)
            .unwrap_or_default()
            .into_iter()
            .filter_map(|s| match s {
                Segment::Slot(p) if p.is_image() => Some(p),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    Text(String),
    Image(ImageRef),
}

impl From<&str> for Binding {
    fn from(s: &str) -> Self {
        Binding::Text(s.to_string())
    }
}

impl From<String> for Binding {
    fn from(s: String) -> Self {
        Binding::Text(s)
    }
}

impl From<ImageRef> for Binding {
    fn from(i: ImageRef) -> Self {
        Binding::Image(i)
    }
}

impl From<&ImageRef> for Binding {
    fn from(i: &ImageRef) -> Self {
        Binding::Image(i.clone())
    }
}

pub type Bindings = BTreeMap<Placeholder, Binding>;

/// Build a [`Bindings`] map inline.
#[macro_export]
macro_rules! bindings {
    ($($p:ident => $v:expr),* $(,)?) => {{
        let mut b = $crate::prompt::Bindings::new();
        $(b.insert($crate::prompt::Placeholder::$p, $crate::prompt::Binding::from($v));)*
        b
    }};
}

/// One line of a catalog manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub key: TemplateKey,
    pub path: String,
}

/// Parse a manifest: one entry per line,
/// `method phase view category agent relative/path.txt`, `NA` for unset
/// fields, `#` comments.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, PromptError> {
    fn opt<T: FromStr<Err = PromptError>>(s: &str) -> Result<Option<T>, PromptError> {
        if s == "NA" {
            Ok(None)
        } else {
            s.parse().map(Some)
        }
    }
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [method, phase, view, category, agent, path] = fields[..] else {
            return Err(PromptError::BadManifest(format!("line {}: expected 6 fields", n + 1)));
        };
        let key = TemplateKey {
            method: method.parse()?,
            phase: phase.to_string(),
            view: opt(view)?,
            category: opt(category)?,
            agent: opt(agent)?,
        };
        if !seen.insert(key.clone()) {
            return Err(PromptError::BadManifest(format!("line {}: duplicate key {key}", n + 1)));
        }
        entries.push(ManifestEntry { key, path: path.to_string() });
    }
    Ok(entries)
}

/// Strip the single trailing newline that text editors append to files.
pub fn body_from_file(content: &str) -> &str {
    content.strip_suffix('\n').map(|s| s.strip_suffix('\r').unwrap_or(s)).unwrap_or(content)
}

/// Immutable set of templates keyed by [`TemplateKey`].
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    templates: BTreeMap<TemplateKey, Template>,
    paths: BTreeMap<TemplateKey, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldenMismatch {
    pub key: TemplateKey,
    pub path: String,
    /// Byte offset of the first difference.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("golden file missing for {}", keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", "))]
pub struct GoldenMissing {
    pub keys: Vec<TemplateKey>,
}

impl Catalog {
    /// Assemble a catalog from a manifest, resolving each path to file content.
    pub fn from_manifest(
        manifest: &str,
        mut resolve: impl FnMut(&str) -> Option<String>,
    ) -> Result<Self, PromptError> {
        let mut catalog = Catalog::default();
        for entry in parse_manifest(manifest)? {
            let content = resolve(&entry.path)
                .ok_or_else(|| PromptError::MissingFile { key: entry.key.to_string(), path: entry.path.clone() })?;
            catalog.insert_with_path(Template::parse(entry.key, body_from_file(&content))?, entry.path);
        }
        Ok(catalog)
    }

    pub fn insert(&mut self, template: Template) {
        let path = template.key.to_string();
        self.insert_with_path(template, path);
    }

    fn insert_with_path(&mut self, template: Template, path: String) {
        self.paths.insert(template.key.clone(), path);
        self.templates.insert(template.key.clone(), template);
    }

    pub fn get(&self, key: &TemplateKey) -> Result<&Template, PromptError> {
        self.templates.get(key).ok_or_else(|| PromptError::UnknownKey(key.to_string()))
    }

    pub fn path_of(&self, key: &TemplateKey) -> Option<&str> {
        self.paths.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> impl Iterator<Item = &Template> {
        self.templates.values()
    }

    /// Render `key` into ordered content parts: text runs split around image
    /// placeholders, each image placeholder becoming one image part.
    /// Whitespace-only runs between images are dropped.
    pub fn render(&self, key: &TemplateKey, bindings: &Bindings) -> Result<Vec<ContentPart>, PromptError> {
        let template = self.get(key)?;
        check_bindings(template, bindings)?;
        let mut parts = Vec::new();
        let mut text = String::new();
        let flush = |text: &mut String, parts: &mut Vec<ContentPart>| {
            if !text.trim().is_empty() {
                parts.push(ContentPart::text(core::mem::take(text)));
            }
            text.clear();
        };
        for seg in segments(key, &template.body)? {
            match seg {
                Segment::Literal(s) => text.push_str(s),
                Segment::Slot(p) => match &bindings[&p] {
                    Binding::Text(t) => text.push_str(t),
                    Binding::Image(img) => {
                        flush(&mut text, &mut parts);
                        parts.push(ContentPart::image(img.clone()));
                    }
                },
            }
        }
        flush(&mut text, &mut parts);
        Ok(parts)
    }

    /// Render a template without image placeholders to a single string.
    pub fn render_text(&self, key: &TemplateKey, bindings: &Bindings) -> Result<String, PromptError> {
        let template = self.get(key)?;
        if template.placeholders.iter().any(|p| p.is_image()) {
            return Err(PromptError::NotTextOnly(key.to_string()));
        }
        check_bindings(template, bindings)?;
        let mut out = String::new();
        for seg in segments(key, &template.body)? {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(p) => {
                    if let Binding::Text(t) = &bindings[&p] {
                        out.push_str(t)
                    }
                }
            }
        }
        Ok(out)
    }

    /// Byte-compare every template body against its golden counterpart.
    /// `golden` receives the template's manifest path.
    pub fn golden_check(
        &self,
        mut golden: impl FnMut(&TemplateKey, &str) -> Option<String>,
    ) -> Result<Vec<GoldenMismatch>, GoldenMissing> {
        let mut missing = Vec::new();
        let mut mismatches = Vec::new();
        for (key, template) in &self.templates {
            let path = self.paths.get(key).cloned().unwrap_or_default();
            let Some(expected) = golden(key, &path) else {
                missing.push(key.clone());
                continue;
            };
            let expected = body_from_file(&expected);
            if expected.as_bytes() != template.body.as_bytes() {
                let offset = expected
                    .bytes()
                    .zip(template.body.bytes())
                    .position(|(a, b)| a != b)
                    .unwrap_or_else(|| expected.len().min(template.body.len()));
                mismatches.push(GoldenMismatch { key: key.clone(), path, offset });
            }
        }
        if missing.is_empty() {
            Ok(mismatches)
        } else {
            Err(GoldenMissing { keys: missing })
        }
    }
}

fn check_bindings(template: &Template, bindings: &Bindings) -> Result<(), PromptError> {
    let key = || template.key.to_string();
    for p in &template.placeholders {
        match bindings.get(p) {
            None => return Err(PromptError::MissingBinding { key: key(), placeholder: *p }),
            Some(Binding::Image(_)) if !p.is_image() => {
                return Err(PromptError::TypeMismatch { key: key(), placeholder: *p })
            }
            Some(Binding::Text(_)) if p.is_image() => {
                return Err(PromptError::TypeMismatch { key: key(), placeholder: *p })
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = bindings.keys().find(|p| !template.placeholders.contains(p)) {
        return Err(PromptError::ExtraBinding { key: key(), placeholder: *extra });
    }
    Ok(())
}

/// Question text with its lettered options, one per line.
pub fn question_with_options<S: AsRef<str>>(question: &str, options: &[S]) -> String {
    let mut out = String::from(question.trim_end());
    for (i, option) in options.iter().enumerate() {
        let letter = (b'A' + i as u8) as char;
        out.push('\n');
        out.push(letter);
        out.push_str(") ");
        out.push_str(option.as_ref());
    }
    out
}

pub mod keys {
    //! Catalog keys used by the pipelines.
    use super::*;

    pub fn system() -> TemplateKey {
        TemplateKey::new(TemplateMethod::Default, "system")
    }

    pub fn default_question() -> TemplateKey {
        TemplateKey::new(TemplateMethod::Default, "question").view(View::Both)
    }

    pub fn question_prompt() -> TemplateKey {
        TemplateKey::new(TemplateMethod::Default, "question_prompt").view(View::TextOnly)
    }

    pub fn ddcot_decompose() -> TemplateKey {
        TemplateKey::new(TemplateMethod::DDCoT, "decompose").view(View::Both)
    }

    pub fn ddcot_answer() -> TemplateKey {
        TemplateKey::new(TemplateMethod::DDCoT, "answer").view(View::Both)
    }

    pub fn cocot_question() -> TemplateKey {
        TemplateKey::new(TemplateMethod::CoCoT, "question").view(View::Both)
    }

    pub fn ccot_generate() -> TemplateKey {
        TemplateKey::new(TemplateMethod::CCoT, "sg_generate").view(View::Both)
    }

    pub fn ccot_answer() -> TemplateKey {
        TemplateKey::new(TemplateMethod::CCoT, "answer").view(View::Both)
    }

    pub fn m3cot_generate(agent: PerspectiveAgent) -> TemplateKey {
        let view = match agent {
            PerspectiveAgent::EgoExo => View::Both,
            PerspectiveAgent::Ego2Exo => View::Ego,
            PerspectiveAgent::Exo2Ego => View::Exo,
        };
        TemplateKey::new(TemplateMethod::M3CoT, "sg_generate").view(view).agent(agent)
    }

    pub fn m3cot_refine_view(agent: PerspectiveAgent) -> TemplateKey {
        let view = match agent {
            PerspectiveAgent::Exo2Ego => View::Ego,
            _ => View::Exo,
        };
        TemplateKey::new(TemplateMethod::M3CoT, "sg_refine_view").view(view).agent(agent)
    }

    pub fn m3cot_initial_answer(agent: PerspectiveAgent) -> TemplateKey {
        TemplateKey::new(TemplateMethod::M3CoT, "answer").view(View::Both).agent(agent)
    }

    pub fn m3cot_cross_refine() -> TemplateKey {
        TemplateKey::new(TemplateMethod::M3CoT, "sg_cross_refine").view(View::Both)
    }

    pub fn m3cot_refined_answer() -> TemplateKey {
        TemplateKey::new(TemplateMethod::M3CoT, "answer").view(View::Both)
    }

    pub fn step1(view: View) -> TemplateKey {
        TemplateKey::new(TemplateMethod::ForgeStep1, "generate").view(view)
    }

    pub fn step1_category(view: View, category: Category) -> TemplateKey {
        TemplateKey::new(TemplateMethod::ForgeStep1, "category").view(view).category(category)
    }

    pub fn step2(view: View) -> TemplateKey {
        TemplateKey::new(TemplateMethod::ForgeStep2, "expand").view(view)
    }

    pub fn step2_category(category: Category) -> TemplateKey {
        TemplateKey::new(TemplateMethod::ForgeStep2, "category").category(category)
    }

    /// Equivalence judge; `Both` compares A_both, `TextOnly` compares A_text.
    pub fn step3_judge(view: View) -> TemplateKey {
        TemplateKey::new(TemplateMethod::ForgeStep3, "judge").view(view)
    }

    pub fn option_gen(view: View) -> TemplateKey {
        TemplateKey::new(TemplateMethod::OptionGen, "options").view(view)
    }
}
