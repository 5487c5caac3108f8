//! Benchmark items, scoring, aggregation and report rendering.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::answer::ChoiceLetter;
use crate::chat::ImageRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    PoseAction,
    ObjectAttribute,
    Numerical,
    Spatial,
}

impl Category {
    /// Table order.
    pub const ALL: [Category; 4] =
        [Category::PoseAction, Category::ObjectAttribute, Category::Numerical, Category::Spatial];

    pub fn label(self) -> &'static str {
        match self {
            Category::PoseAction => "Pose & Action",
            Category::ObjectAttribute => "Object & Attribute",
            Category::Numerical => "Numerical",
            Category::Spatial => "Spatial",
        }
    }

    pub fn snake(self) -> &'static str {
        match self {
            Category::PoseAction => "pose_action",
            Category::ObjectAttribute => "object_attribute",
            Category::Numerical => "numerical",
            Category::Spatial => "spatial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perspective {
    Ego,
    Exo,
}

impl Perspective {
    pub const ALL: [Perspective; 2] = [Perspective::Ego, Perspective::Exo];

    pub fn label(self) -> &'static str {
        match self {
            Perspective::Ego => "Ego",
            Perspective::Exo => "Exo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequiredView {
    Any,
    Ego,
    Exo,
    Both,
}

impl RequiredView {
    pub const ALL: [RequiredView; 4] = [RequiredView::Any, RequiredView::Ego, RequiredView::Exo, RequiredView::Both];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodId {
    Default,
    DDCoT,
    CoCoT,
    CCoT,
    M3CoT,
}

impl MethodId {
    pub const ALL: [MethodId; 5] = [MethodId::Default, MethodId::DDCoT, MethodId::CoCoT, MethodId::CCoT, MethodId::M3CoT];

    pub fn cli_name(self) -> &'static str {
        match self {
            MethodId::Default => "default",
            MethodId::DDCoT => "ddcot",
            MethodId::CoCoT => "cocot",
            MethodId::CCoT => "ccot",
            MethodId::M3CoT => "m3cot",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown method `{given}`; valid methods: default, ddcot, cocot, ccot, m3cot")]
pub struct UnknownMethod {
    pub given: String,
}

impl FromStr for MethodId {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        MethodId::ALL
            .into_iter()
            .find(|m| m.cli_name() == lower)
            .ok_or(UnknownMethod { given: s.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub category: Category,
    pub question_perspective: Perspective,
    pub ego_image: ImageRef,
    pub exo_image: ImageRef,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_views: Option<RequiredView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_take: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("field `{field}`: {message}")]
pub struct FieldError {
    pub field: &'static str,
    pub message: String,
}

impl BenchmarkItem {
    pub fn validate(&self) -> Result<(), FieldError> {
        let err = |field, message: &str| Err(FieldError { field, message: message.to_string() });
        if self.id.trim().is_empty() {
            return err("id", "must be non-empty");
        }
        if self.question.trim().is_empty() {
            return err("question", "must be non-empty");
        }
        if self.options.len() != 4 {
            return Err(FieldError { field: "options", message: format!("expected 4 options, found {}", self.options.len()) });
        }
        let mut seen = BTreeSet::new();
        for o in &self.options {
            let t = o.trim();
            if t.is_empty() {
                return err("options", "options must be non-empty");
            }
            if !seen.insert(t) {
                return Err(FieldError { field: "options", message: format!("duplicate option `{t}`") });
            }
        }
        if self.answer_index > 3 {
            return err("answer_index", "must be in 0..=3");
        }
        Ok(())
    }

    pub fn answer_letter(&self) -> ChoiceLetter {
        ChoiceLetter::from_index(self.answer_index).unwrap_or(ChoiceLetter::A)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item_id: String,
    pub method: MethodId,
    pub run_index: u32,
    pub predicted: Option<ChoiceLetter>,
    pub correct: bool,
    pub call_count: u32,
    #[serde(default)]
    pub flags: BTreeSet<String>,
}

impl EvalRecord {
    pub fn score(item: &BenchmarkItem, method: MethodId, run_index: u32, predicted: Option<ChoiceLetter>, call_count: u32) -> Self {
        Self {
            item_id: item.id.clone(),
            method,
            run_index,
            predicted,
            correct: predicted == Some(item.answer_letter()),
            call_count,
            flags: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub category: Category,
    pub perspective: Perspective,
    pub mean_accuracy_pct: f64,
    pub std_pct: f64,
    pub n_items: usize,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewBreakdown {
    pub mean_accuracy_pct: f64,
    pub std_pct: f64,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Option<MethodId>,
    pub n_runs: usize,
    /// Eight cells in table order: categories, Ego before Exo.
    pub cells: Vec<ReportCell>,
    /// Unweighted mean of the non-empty cell means.
    pub avg: f64,
    /// Mean over items (equals `avg` only for balanced datasets).
    pub item_mean: f64,
    pub required_view_breakdown: BTreeMap<RequiredView, ViewBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AggregateError {
    #[error("ragged grid: item `{item_id}` run {run_index} has {count} records (expected 1)")]
    RaggedGrid { item_id: String, run_index: u32, count: usize },
    #[error("record for unknown item `{0}`")]
    UnknownItem(String),
    #[error("records mix methods {0} and {1}")]
    MixedMethods(MethodId, MethodId),
    #[error("no records")]
    Empty,
}

/// Mean and sample (n-1) standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

pub fn aggregate(records: &[EvalRecord], items: &[BenchmarkItem]) -> Result<Aggregate, AggregateError> {
    let first = records.first().ok_or(AggregateError::Empty)?;
    if let Some(other) = records.iter().find(|r| r.method != first.method) {
        return Err(AggregateError::MixedMethods(first.method, other.method));
    }
    let by_id: BTreeMap<&str, &BenchmarkItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let runs: BTreeSet<u32> = records.iter().map(|r| r.run_index).collect();
    let n_runs = runs.iter().max().map_or(0, |m| *m as usize + 1);

    let mut grid: BTreeMap<(&str, u32), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        if !by_id.contains_key(r.item_id.as_str()) {
            return Err(AggregateError::UnknownItem(r.item_id.clone()));
        }
        grid.entry((r.item_id.as_str(), r.run_index)).or_default().push(r);
    }
    for item in items {
        for run in 0..n_runs as u32 {
            let count = grid.get(&(item.id.as_str(), run)).map_or(0, Vec::len);
            if count != 1 {
                return Err(AggregateError::RaggedGrid { item_id: item.id.clone(), run_index: run, count });
            }
        }
    }
    let correct = |item: &BenchmarkItem, run: u32| grid[&(item.id.as_str(), run)][0].correct;
    let accuracy_per_run = |subset: &[&BenchmarkItem]| -> Vec<f64> {
        (0..n_runs as u32)
            .map(|run| {
                let hits = subset.iter().filter(|i| correct(i, run)).count();
                100.0 * hits as f64 / subset.len() as f64
            })
            .collect()
    };

    let mut cells = Vec::with_capacity(8);
    for category in Category::ALL {
        for perspective in Perspective::ALL {
            let subset: Vec<&BenchmarkItem> = items
                .iter()
                .filter(|i| i.category == category && i.question_perspective == perspective)
                .collect();
            let (mean, std) = if subset.is_empty() { (0.0, 0.0) } else { mean_std(&accuracy_per_run(&subset)) };
            cells.push(ReportCell {
                category,
                perspective,
                mean_accuracy_pct: mean,
                std_pct: std,
                n_items: subset.len(),
                n_runs,
            });
        }
    }
    let filled: Vec<f64> = cells.iter().filter(|c| c.n_items > 0).map(|c| c.mean_accuracy_pct).collect();
    let avg = if filled.is_empty() { 0.0 } else { filled.iter().sum::<f64>() / filled.len() as f64 };
    let all: Vec<&BenchmarkItem> = items.iter().collect();
    let item_mean = if all.is_empty() { 0.0 } else { mean_std(&accuracy_per_run(&all)).0 };

    let mut required_view_breakdown = BTreeMap::new();
    for view in RequiredView::ALL {
        let subset: Vec<&BenchmarkItem> = items.iter().filter(|i| i.required_views == Some(view)).collect();
        if subset.is_empty() {
            continue;
        }
        let (mean, std) = mean_std(&accuracy_per_run(&subset));
        required_view_breakdown.insert(view, ViewBreakdown { mean_accuracy_pct: mean, std_pct: std, n_items: subset.len() });
    }

    Ok(Aggregate { method: Some(first.method), n_runs, cells, avg, item_mean, required_view_breakdown })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    MarkdownTable,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(ReportFormat::MarkdownTable),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format `{other}`; expected md, csv or json")),
        }
    }
}

pub fn render_report(agg: &Aggregate, format: ReportFormat) -> String {
    let mut out = String::new();
    let method = agg.method.map_or_else(|| "-".to_string(), |m| m.to_string());
    match format {
        ReportFormat::MarkdownTable => {
            out.push_str("| Method |");
            for c in &agg.cells {
                let _ = write!(out, " {} ({}) |", c.category.label(), c.perspective.label());
            }
            out.push_str(" Avg |\n|---|");
            for _ in &agg.cells {
                out.push_str("---|");
            }
            out.push_str("---|\n");
            let _ = write!(out, "| {method} |");
            for c in &agg.cells {
                let _ = write!(out, " {:.2} ± {:.2} |", c.mean_accuracy_pct, c.std_pct);
            }
            let _ = writeln!(out, " {:.2} |", agg.avg);
            if !agg.required_view_breakdown.is_empty() {
                out.push_str("\n| Required view | Accuracy | Items |\n|---|---|---|\n");
                for (view, b) in &agg.required_view_breakdown {
                    let _ = writeln!(out, "| {view:?} | {:.2} ± {:.2} | {} |", b.mean_accuracy_pct, b.std_pct, b.n_items);
                }
            }
        }
        ReportFormat::Csv => {
            out.push_str("method,category,perspective,mean_accuracy_pct,std_pct,n_items,n_runs\n");
            for c in &agg.cells {
                let _ = writeln!(
                    out,
                    "{method},{},{},{:.2},{:.2},{},{}",
                    c.category.snake(),
                    c.perspective.label().to_ascii_lowercase(),
                    c.mean_accuracy_pct,
                    c.std_pct,
                    c.n_items,
                    c.n_runs
                );
            }
            let n: usize = agg.cells.iter().map(|c| c.n_items).sum();
            let _ = writeln!(out, "{method},avg,,{:.2},,{},{}", agg.avg, n, agg.n_runs);
        }
        ReportFormat::Json => {
            out = serde_json::to_string_pretty(agg).unwrap_or_default();
            out.push('\n');
        }
    }
    out
}

/// Per-category composition and answer-letter distribution of a dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub per_category: BTreeMap<Category, usize>,
    pub per_cell: BTreeMap<String, usize>,
    pub answer_distribution: BTreeMap<Category, [usize; 4]>,
    pub required_views: BTreeMap<RequiredView, usize>,
}

pub fn dataset_stats(items: &[BenchmarkItem]) -> DatasetStats {
    let mut s = DatasetStats { total: items.len(), ..Default::default() };
    for i in items {
        *s.per_category.entry(i.category).or_default() += 1;
        *s.per_cell.entry(format!("{}/{}", i.category.snake(), i.question_perspective.label())).or_default() += 1;
        if i.answer_index < 4 {
            s.answer_distribution.entry(i.category).or_default()[i.answer_index] += 1;
        }
        if let Some(v) = i.required_views {
            *s.required_views.entry(v).or_default() += 1;
        }
    }
    s
}

/// Data lints: unequal Ego/Exo counts within a category and skewed answer
/// positions. Warnings only.
pub fn lint_dataset(items: &[BenchmarkItem]) -> Vec<String> {
    let mut warnings = Vec::new();
    for category in Category::ALL {
        let count = |p| items.iter().filter(|i| i.category == category && i.question_perspective == p).count();
        let (ego, exo) = (count(Perspective::Ego), count(Perspective::Exo));
        if ego != exo {
            warnings.push(format!("{}: {ego} ego vs {exo} exo questions", category.label()));
        }
    }
    let mut letters = [0usize; 4];
    for i in items.iter().filter(|i| i.answer_index < 4) {
        letters[i.answer_index] += 1;
    }
    let n: usize = letters.iter().sum();
    if n > 0 {
        let limit = n.div_ceil(4) + core::cmp::max(1, n / 10);
        if let Some((idx, count)) = letters.iter().enumerate().find(|(_, c)| **c > limit) {
            warnings.push(format!(
                "answer position bias: {count} of {n} answers are {} (distribution {letters:?})",
                (b'A' + idx as u8) as char
            ));
        }
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn item(id: &str, category: Category, p: Perspective, answer: usize) -> BenchmarkItem {
        BenchmarkItem {
            id: id.into(),
            category,
            question_perspective: p,
            ego_image: ImageRef::local("ego.jpg"),
            exo_image: ImageRef::local("exo.jpg"),
            question: "What?".into(),
            options: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            answer_index: answer,
            required_views: None,
            source_take: None,
        }
    }

    fn rec(id: &str, run: u32, correct: bool) -> EvalRecord {
        EvalRecord {
            item_id: id.into(),
            method: MethodId::Default,
            run_index: run,
            predicted: None,
            correct,
            call_count: 1,
            flags: BTreeSet::new(),
        }
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[60.0, 61.0, 62.0]);
        assert!((m - 61.0).abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[42.0]), (42.0, 0.0));
    }

    #[test]
    fn validation_names_fields() {
        let mut i = item("q1", Category::Spatial, Perspective::Ego, 0);
        assert!(i.validate().is_ok());
        i.options.pop();
        assert_eq!(i.validate().unwrap_err().field, "options");
        let mut i = item("q1", Category::Spatial, Perspective::Ego, 4);
        assert_eq!(i.validate().unwrap_err().field, "answer_index");
        i.answer_index = 0;
        i.options[1] = " a ".into();
        assert_eq!(i.validate().unwrap_err().field, "options");
    }

    #[test]
    fn single_run_has_zero_std_and_avg_of_cells() {
        let mut items = Vec::new();
        let mut records = Vec::new();
        for (ci, c) in Category::ALL.iter().enumerate() {
            for (pi, p) in Perspective::ALL.iter().enumerate() {
                for k in 0..2 {
                    let id = format!("{ci}-{pi}-{k}");
                    items.push(item(&id, *c, *p, 0));
                    records.push(rec(&id, 0, k == 0));
                }
            }
        }
        let agg = aggregate(&records, &items).unwrap();
        assert_eq!(agg.cells.len(), 8);
        for c in &agg.cells {
            assert_eq!(c.mean_accuracy_pct, 50.0);
            assert_eq!(c.std_pct, 0.0);
        }
        assert_eq!(agg.avg, 50.0);
    }

    #[test]
    fn ragged_grid_detected() {
        let items = vec![item("a", Category::Spatial, Perspective::Ego, 0), item("b", Category::Spatial, Perspective::Ego, 0)];
        let records = vec![rec("a", 0, true), rec("a", 1, true), rec("b", 0, true)];
        assert!(matches!(
            aggregate(&records, &items),
            Err(AggregateError::RaggedGrid { run_index: 1, count: 0, .. })
        ));
    }

    #[test]
    fn method_parsing_lists_valid_names() {
        assert_eq!("M3CoT".parse::<MethodId>().unwrap(), MethodId::M3CoT);
        let err = "tot".parse::<MethodId>().unwrap_err().to_string();
        assert!(err.contains("default, ddcot, cocot, ccot, m3cot"));
    }

    #[test]
    fn answer_bias_lint() {
        let items: Vec<_> = (0..5).map(|k| item(&format!("{k}"), Category::Numerical, Perspective::Ego, 0)).collect();
        assert!(lint_dataset(&items).iter().any(|w| w.contains("answer position bias")));
        let items: Vec<_> = (0..8)
            .map(|k| item(&format!("{k}"), Category::Numerical, if k % 2 == 0 { Perspective::Ego } else { Perspective::Exo }, k % 4))
            .collect();
        assert!(lint_dataset(&items).is_empty());
    }
}
