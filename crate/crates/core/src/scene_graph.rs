//! Tolerant extraction and canonical re-serialization of model-emitted JSON
//! scene graphs.
//!
//! Model output is messy: code fences, chatter around the JSON, trailing
//! commas, `//` comments, singular key names, objects given as a map instead
//! of a list. [`extract`] never fails; it reports `Parsed`, `Salvaged` or
//! `Failed` and always keeps the raw text.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GraphOrigin {
    EgoOnly,
    ExoOnly,
    Joint,
    RefinedView,
    CrossRefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentTag {
    F1,
    F2,
    F3,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Text(String),
    List(Vec<String>),
}

impl AttrValue {
    fn values(&self) -> Vec<String> {
        match self {
            AttrValue::Text(t) => alloc::vec![t.clone()],
            AttrValue::List(l) => l.clone(),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            AttrValue::Text(t) => Value::String(t.clone()),
            AttrValue::List(l) => Value::Array(l.iter().cloned().map(Value::String).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Display name, original casing of the first occurrence.
    pub name: String,
    pub attributes: BTreeMap<String, AttrValue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relationship {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    /// Subject or object does not name a known object.
    #[serde(default)]
    pub dangling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub raw_text: String,
    pub objects: Vec<SceneObject>,
    pub relationships: Vec<Relationship>,
    /// Everything the model emitted outside the recognized schema.
    pub extras: BTreeMap<String, Value>,
    pub origin: GraphOrigin,
    pub agent: AgentTag,
    pub iteration: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractionStatus {
    Parsed,
    Salvaged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionOutcome {
    pub status: ExtractionStatus,
    pub graph: Option<SceneGraph>,
    pub raw_text: String,
    pub diagnostics: Vec<String>,
}

impl ExtractionOutcome {
    /// Text to inject into the next prompt: the canonical form when a graph
    /// was recovered, otherwise the raw model output.
    pub fn prompt_text(&self) -> String {
        self.graph
            .as_ref()
            .and_then(|g| serialize_for_prompt(g).ok())
            .unwrap_or_else(|| self.raw_text.clone())
    }
}

/// Dedup key for object names: case-folded, whitespace collapsed.
pub fn normalize_name(name: &str) -> String {
    let mut out = String::new();
    for w in name.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(w.chars().flat_map(char::to_lowercase));
    }
    out
}

fn strip_fence(text: &str) -> &str {
    let Some(start) = text.find("```") else { return text };
    let after = &text[start + 3..];
    // skip an info string such as `json`
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    match body.find("```") {
        Some(end) => &body[..end],
        None => body,
    }
}

/// First balanced top-level `{...}` span, string-literal aware.
fn brace_span(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Drop `//` line comments and trailing commas outside string literals.
fn salvage(json: &str) -> String {
    let mut no_comments = String::with_capacity(json.len());
    let mut in_str = false;
    let mut escaped = false;
    let mut chars = json.chars().peekable();
    while let Some(c) = chars.next() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            no_comments.push(c);
            continue;
        }
        if c == '/' && chars.peek() == Some(&'/') {
            for n in chars.by_ref() {
                if n == '\n' {
                    no_comments.push('\n');
                    break;
                }
            }
            continue;
        }
        if c == '"' {
            in_str = true;
        }
        no_comments.push(c);
    }

    let chars: Vec<char> = no_comments.chars().collect();
    let mut out = String::with_capacity(chars.len());
    let (mut in_str, mut escaped) = (false, false);
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            out.push(c);
            continue;
        }
        if c == '"' {
            in_str = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|n| !n.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn is_objects_key(k: &str) -> bool {
    matches!(k.to_ascii_lowercase().as_str(), "objects" | "object")
}

fn is_relationships_key(k: &str) -> bool {
    matches!(k.to_ascii_lowercase().as_str(), "relationships" | "relationship" | "relations" | "relation")
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn attr_value(v: &Value) -> AttrValue {
    match v {
        Value::Array(items) => AttrValue::List(
            items.iter().map(|i| scalar_text(i).unwrap_or_else(|| i.to_string())).collect(),
        ),
        other => AttrValue::Text(scalar_text(other).unwrap_or_else(|| other.to_string())),
    }
}

const NAME_KEYS: [&str; 4] = ["name", "id", "object", "label"];

fn object_from_entry(name_hint: Option<&str>, entry: &Value) -> Option<SceneObject> {
    let mut attributes = BTreeMap::new();
    let name = match entry {
        Value::String(s) => s.clone(),
        Value::Object(map) => {
            let name_key = NAME_KEYS.iter().find(|k| map.get(**k).is_some_and(Value::is_string));
            let name = match (name_hint, name_key) {
                (Some(h), _) => h.to_string(),
                (None, Some(k)) => map[*k].as_str().unwrap_or_default().to_string(),
                (None, None) => return None,
            };
            for (k, v) in map {
                if name_hint.is_none() && name_key == Some(&k.as_str()) {
                    continue;
                }
                match (k.as_str(), v) {
                    ("attributes" | "attribute", Value::Object(inner)) => {
                        for (ak, av) in inner {
                            attributes.insert(ak.clone(), attr_value(av));
                        }
                    }
                    _ => {
                        attributes.insert(k.clone(), attr_value(v));
                    }
                }
            }
            name
        }
        Value::Null => name_hint?.to_string(),
        other => {
            let hint = name_hint?;
            attributes.insert("value".to_string(), attr_value(other));
            hint.to_string()
        }
    };
    if name.trim().is_empty() {
        return None;
    }
    Some(SceneObject { name, attributes })
}

fn merge_attrs(into: &mut BTreeMap<String, AttrValue>, from: BTreeMap<String, AttrValue>) {
    for (k, v) in from {
        match into.get_mut(&k) {
            None => {
                into.insert(k, v);
            }
            Some(existing) if *existing == v => {}
            Some(existing) => {
                let mut values = existing.values();
                for x in v.values() {
                    if !values.contains(&x) {
                        values.push(x);
                    }
                }
                *existing = if values.len() == 1 { AttrValue::Text(values.remove(0)) } else { AttrValue::List(values) };
            }
        }
    }
}

fn relationship_from_entry(entry: &Value) -> Option<Relationship> {
    let pick = |map: &Map<String, Value>, keys: &[&str]| {
        keys.iter().find_map(|k| map.get(*k).and_then(scalar_text))
    };
    match entry {
        Value::Object(map) => Some(Relationship {
            subject: pick(map, &["subject", "source", "from", "head"])?,
            predicate: pick(map, &["predicate", "relation", "relationship", "type", "label"])?,
            object: pick(map, &["object", "target", "to", "tail"])?,
            dangling: false,
        }),
        Value::Array(triple) if triple.len() == 3 => Some(Relationship {
            subject: scalar_text(&triple[0])?,
            predicate: scalar_text(&triple[1])?,
            object: scalar_text(&triple[2])?,
            dangling: false,
        }),
        _ => None,
    }
}

/// Extract a scene graph from raw model text.
pub fn extract(model_text: &str, origin: GraphOrigin, agent: AgentTag, iteration: u32) -> ExtractionOutcome {
    let failed = |diag: String| ExtractionOutcome {
        status: ExtractionStatus::Failed,
        graph: None,
        raw_text: model_text.to_string(),
        diagnostics: alloc::vec![diag],
    };
    let candidate = strip_fence(model_text);
    let Some(span) = brace_span(candidate).or_else(|| brace_span(model_text)) else {
        return failed("no balanced JSON object found".into());
    };
    let mut diagnostics = Vec::new();
    let (value, status) = match serde_json::from_str::<Value>(span) {
        Ok(v) => (v, ExtractionStatus::Parsed),
        Err(e) => {
            diagnostics.push(format!("strict parse failed: {e}"));
            match serde_json::from_str::<Value>(&salvage(span)) {
                Ok(v) => (v, ExtractionStatus::Salvaged),
                Err(e2) => return failed(format!("strict parse failed: {e}; salvage failed: {e2}")),
            }
        }
    };
    let Value::Object(root) = value else {
        return failed("top-level JSON value is not an object".into());
    };
    let mut graph = SceneGraph {
        raw_text: model_text.to_string(),
        objects: Vec::new(),
        relationships: Vec::new(),
        extras: BTreeMap::new(),
        origin,
        agent,
        iteration,
    };
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut unparsed_objects = Vec::new();
    let mut unparsed_rels = Vec::new();
    let mut add_object = |graph: &mut SceneGraph, obj: SceneObject| {
        let key = normalize_name(&obj.name);
        match index.get(&key) {
            Some(&i) => merge_attrs(&mut graph.objects[i].attributes, obj.attributes),
            None => {
                index.insert(key, graph.objects.len());
                graph.objects.push(obj);
            }
        }
    };

    for (key, value) in root {
        if is_objects_key(&key) {
            match &value {
                Value::Array(entries) => {
                    for e in entries {
                        match object_from_entry(None, e) {
                            Some(o) => add_object(&mut graph, o),
                            None => unparsed_objects.push(e.clone()),
                        }
                    }
                }
                Value::Object(map) => {
                    for (name, e) in map {
                        match object_from_entry(Some(name), e) {
                            Some(o) => add_object(&mut graph, o),
                            None => unparsed_objects.push(e.clone()),
                        }
                    }
                }
                _ => {
                    graph.extras.insert(key, value);
                }
            }
        } else if is_relationships_key(&key) {
            match &value {
                Value::Array(entries) => {
                    for e in entries {
                        match relationship_from_entry(e) {
                            Some(r) => graph.relationships.push(r),
                            None => unparsed_rels.push(e.clone()),
                        }
                    }
                }
                _ => {
                    graph.extras.insert(key, value);
                }
            }
        } else {
            graph.extras.insert(key, value);
        }
    }
    if !unparsed_objects.is_empty() {
        diagnostics.push(format!("{} object entries kept in extras", unparsed_objects.len()));
        graph.extras.insert("unparsed_objects".into(), Value::Array(unparsed_objects));
    }
    if !unparsed_rels.is_empty() {
        diagnostics.push(format!("{} relationship entries kept in extras", unparsed_rels.len()));
        graph.extras.insert("unparsed_relationships".into(), Value::Array(unparsed_rels));
    }
    let names: BTreeSet<String> = graph.objects.iter().map(|o| normalize_name(&o.name)).collect();
    for r in &mut graph.relationships {
        r.dangling = !names.contains(&normalize_name(&r.subject)) || !names.contains(&normalize_name(&r.object));
    }
    ExtractionOutcome { status, graph: Some(graph), raw_text: model_text.to_string(), diagnostics }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("extras value under `{0}` cannot be serialized")]
pub struct UnserializableExtras(pub String);

fn push_json(out: &mut String, v: &Value) {
    out.push_str(&serde_json::to_string(v).unwrap_or_default());
}

/// Canonical compact JSON: `objects`, `relationships`, then extras keys in
/// alphabetical order; objects keep first-seen order.
pub fn serialize_for_prompt(graph: &SceneGraph) -> Result<String, UnserializableExtras> {
    let mut out = String::from("{\"objects\":[");
    for (i, o) in graph.objects.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("{\"name\":");
        push_json(&mut out, &Value::String(o.name.clone()));
        if !o.attributes.is_empty() {
            out.push_str(",\"attributes\":{");
            for (j, (k, v)) in o.attributes.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                push_json(&mut out, &Value::String(k.clone()));
                out.push(':');
                push_json(&mut out, &v.to_json());
            }
            out.push('}');
        }
        out.push('}');
    }
    out.push_str("],\"relationships\":[");
    for (i, r) in graph.relationships.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("{\"subject\":");
        push_json(&mut out, &Value::String(r.subject.clone()));
        out.push_str(",\"predicate\":");
        push_json(&mut out, &Value::String(r.predicate.clone()));
        out.push_str(",\"object\":");
        push_json(&mut out, &Value::String(r.object.clone()));
        out.push('}');
    }
    out.push(']');
    for (k, v) in &graph.extras {
        let encoded = serde_json::to_string(v).map_err(|_| UnserializableExtras(k.clone()))?;
        out.push(',');
        push_json(&mut out, &Value::String(k.clone()));
        out.push(':');
        out.push_str(&encoded);
    }
    out.push('}');
    Ok(out)
}

/// Structural equality ignoring raw text and provenance tags.
pub fn same_structure(a: &SceneGraph, b: &SceneGraph) -> bool {
    a.objects == b.objects && a.relationships == b.relationships && a.extras == b.extras
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeChange {
    pub object: String,
    pub key: String,
    pub before: Option<AttrValue>,
    pub after: Option<AttrValue>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDelta {
    pub added_objects: Vec<String>,
    pub removed_objects: Vec<String>,
    pub changed_attributes: Vec<AttributeChange>,
    pub added_relationships: Vec<(String, String, String)>,
    pub removed_relationships: Vec<(String, String, String)>,
}

impl GraphDelta {
    pub fn is_empty(&self) -> bool {
        *self == GraphDelta::default()
    }
}

pub fn graph_delta(before: &SceneGraph, after: &SceneGraph) -> GraphDelta {
    let index = |g: &SceneGraph| -> BTreeMap<String, SceneObject> {
        g.objects.iter().map(|o| (normalize_name(&o.name), o.clone())).collect()
    };
    let (b, a) = (index(before), index(after));
    let mut delta = GraphDelta::default();
    for o in &after.objects {
        if !b.contains_key(&normalize_name(&o.name)) {
            delta.added_objects.push(o.name.clone());
        }
    }
    for o in &before.objects {
        let key = normalize_name(&o.name);
        let Some(new) = a.get(&key) else {
            delta.removed_objects.push(o.name.clone());
            continue;
        };
        let keys: BTreeSet<&String> = o.attributes.keys().chain(new.attributes.keys()).collect();
        for k in keys {
            let (old_v, new_v) = (o.attributes.get(k), new.attributes.get(k));
            if old_v != new_v {
                delta.changed_attributes.push(AttributeChange {
                    object: o.name.clone(),
                    key: k.clone(),
                    before: old_v.cloned(),
                    after: new_v.cloned(),
                });
            }
        }
    }
    let triples = |g: &SceneGraph| -> BTreeSet<(String, String, String)> {
        g.relationships
            .iter()
            .map(|r| (normalize_name(&r.subject), r.predicate.trim().to_lowercase(), normalize_name(&r.object)))
            .collect()
    };
    let (tb, ta) = (triples(before), triples(after));
    delta.added_relationships = ta.difference(&tb).cloned().collect();
    delta.removed_relationships = tb.difference(&ta).cloned().collect();
    delta
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(s: &str) -> ExtractionOutcome {
        extract(s, GraphOrigin::Joint, AgentTag::F1, 0)
    }

    #[test]
    fn fenced_minimal_graph() {
        let o = ex("```json\n{\"objects\":[{\"name\":\"cutting board\"}],\"relationships\":[]}\n```");
        assert_eq!(o.status, ExtractionStatus::Parsed);
        let g = o.graph.unwrap();
        assert_eq!(g.objects.len(), 1);
        assert_eq!(g.relationships.len(), 0);
    }

    #[test]
    fn duplicate_objects_merge() {
        let o = ex("Here is the graph: {\"objects\":[{\"name\":\"knife\"},{\"name\":\"knife\"}]}");
        assert_eq!(o.status, ExtractionStatus::Parsed);
        let g = o.graph.unwrap();
        assert_eq!(g.objects.len(), 1);
        assert_eq!(g.objects[0].name, "knife");
    }

    #[test]
    fn no_json_fails_with_diagnostics() {
        let o = ex("no json here at all");
        assert_eq!(o.status, ExtractionStatus::Failed);
        assert!(o.graph.is_none());
        assert!(!o.diagnostics.is_empty());
        assert_eq!(o.raw_text, "no json here at all");
    }

    #[test]
    fn salvage_trailing_commas_and_comments() {
        let o = ex("{\n  \"objects\": [\n    {\"name\": \"pan\", \"color\": \"black\",}, // the pan\n  ],\n}");
        assert_eq!(o.status, ExtractionStatus::Salvaged);
        let g = o.graph.unwrap();
        assert_eq!(g.objects[0].attributes["color"], AttrValue::Text("black".into()));
    }

    #[test]
    fn conflicting_attributes_become_lists_and_casing_kept() {
        let o = ex(r#"{"Objects":[{"name":"Mug","attributes":{"color":"red"}},{"name":"  mug ","attributes":{"color":"blue"}}]}"#);
        let g = o.graph.unwrap();
        assert_eq!(g.objects.len(), 1);
        assert_eq!(g.objects[0].name, "Mug");
        assert_eq!(g.objects[0].attributes["color"], AttrValue::List(alloc::vec!["red".into(), "blue".into()]));
    }

    #[test]
    fn dangling_relationships_are_flagged_not_dropped() {
        let o = ex(r#"{"objects":[{"name":"hand"}],"relationship":[{"subject":"hand","predicate":"holds","object":"cup"}]}"#);
        let g = o.graph.unwrap();
        assert_eq!(g.relationships.len(), 1);
        assert!(g.relationships[0].dangling);
    }

    #[test]
    fn extras_preserved_and_ordered() {
        let o = ex(r#"{"zeta":1,"objects":[{"name":"B"},{"name":"A"}],"alpha":{"x":[1,2]}}"#);
        let s = serialize_for_prompt(o.graph.as_ref().unwrap()).unwrap();
        assert_eq!(s, r#"{"objects":[{"name":"B"},{"name":"A"}],"relationships":[],"alpha":{"x":[1,2]},"zeta":1}"#);
    }

    #[test]
    fn map_form_objects_and_triple_relationships() {
        let o = ex(r#"{"objects":{"stove":{"state":"on"},"pot":null},"relations":[["pot","on","stove"]]}"#);
        let g = o.graph.unwrap();
        let names: Vec<_> = g.objects.iter().map(|o| o.name.as_str()).collect();
        assert_eq!(names, ["pot", "stove"]);
        assert!(!g.relationships[0].dangling);
    }

    #[test]
    fn delta_identity_and_additions() {
        let g = ex(r#"{"objects":[{"name":"table"}]}"#).graph.unwrap();
        assert!(graph_delta(&g, &g).is_empty());
        let h = ex(r#"{"objects":[{"name":"table"},{"name":"bench"}]}"#).graph.unwrap();
        let d = graph_delta(&g, &h);
        assert_eq!(d.added_objects, ["bench"]);
        assert!(d.removed_objects.is_empty() && d.changed_attributes.is_empty());
    }
}
