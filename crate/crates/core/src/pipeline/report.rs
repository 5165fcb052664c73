use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::ArchConfig;

use super::{ModelSummary, PipelineReport, StageId};

/// How much more the teacher emits than the student, in percent of the
/// student. `None` when the student value is zero.
pub fn extra_vs_student_pct(teacher: f64, student: f64) -> Option<f64> {
    (student != 0.0).then(|| (teacher - student) / student * 100.0)
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub teacher: f64,
    pub student: f64,
    /// Quality metrics: student / teacher × 100.
    pub retention_pct: Option<f64>,
    /// Cost metrics: teacher / student.
    pub reduction: Option<f64>,
    pub extra_vs_student_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    /// Metrics whose ratio was undefined because a denominator was zero.
    pub flags: Vec<String>,
}

impl ComparisonTable {
    pub fn row(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn render(&self) -> String {
        let opt = |v: Option<f64>, suffix: &str| v.map_or("n/a".to_string(), |x| format!("{x:.2}{suffix}"));
        let value = |x: f64| if x != 0.0 && x.abs() < 1e-3 { format!("{x:.4e}") } else { format!("{x:.6}") };
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.metric.clone(),
                    value(r.teacher),
                    value(r.student),
                    opt(r.retention_pct, "%"),
                    opt(r.reduction, "x"),
                    opt(r.extra_vs_student_pct, "%"),
                ]
            })
            .collect();
        let mut out = render_table(&["metric", "teacher", "student", "retention", "reduction", "extra vs student"], &rows);
        for f in &self.flags {
            out.push_str(&format!("note: {f}\n"));
        }
        out
    }
}

pub fn compare_summaries(teacher: &ModelSummary, student: &ModelSummary) -> ComparisonTable {
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    let mut quality = |name: &str, t: f64, s: f64, rows: &mut Vec<ComparisonRow>| {
        let retention_pct = ratio(s, t).map(|r| r * 100.0);
        if retention_pct.is_none() {
            flags.push(format!("{name}: teacher value is zero, retention undefined"));
        }
        rows.push(ComparisonRow {
            metric: name.into(),
            teacher: t,
            student: s,
            retention_pct,
            reduction: None,
            extra_vs_student_pct: None,
        });
    };
    if let (Some(t), Some(s)) = (&teacher.val.classifier, &student.val.classifier) {
        quality("accuracy", t.accuracy, s.accuracy, &mut rows);
        quality("precision", t.precision, s.precision, &mut rows);
        quality("recall", t.recall, s.recall, &mut rows);
    }
    if let (Some(t), Some(s)) = (&teacher.val.lm, &student.val.lm) {
        quality("token_accuracy", t.token_accuracy, s.token_accuracy, &mut rows);
    }
    let costs = [
        ("parameters", teacher.parameters as f64, student.parameters as f64),
        ("memory_bytes", teacher.memory_bytes as f64, student.memory_bytes as f64),
        ("p50_ms", teacher.green.p50_ms, student.green.p50_ms),
        ("p95_ms", teacher.green.p95_ms, student.green.p95_ms),
        ("gco2_per_sample", teacher.green.co2_g_per_sample, student.green.co2_g_per_sample),
    ];
    for (name, t, s) in costs {
        let reduction = ratio(t, s);
        if reduction.is_none() {
            flags.push(format!("{name}: student value is zero, reduction undefined"));
        }
        rows.push(ComparisonRow {
            metric: name.into(),
            teacher: t,
            student: s,
            retention_pct: None,
            reduction,
            extra_vs_student_pct: if name == "gco2_per_sample" { extra_vs_student_pct(t, s) } else { None },
        });
    }
    ComparisonTable { rows, flags }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingRow {
    pub ordering: String,
    pub stages: Vec<StageId>,
    pub ok: bool,
    pub error: Option<String>,
    pub p50_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    /// Wall time of the full timed inference run.
    pub total_time_s: Option<f64>,
    pub peak_memory_bytes: Option<u64>,
    pub gco2_per_sample: Option<f64>,
    pub accuracy: Option<f64>,
    pub final_config: Option<ArchConfig>,
    pub parameters: Option<usize>,
    pub pipeline_wall_s: Option<f64>,
}

impl OrderingRow {
    pub fn from_report(label: String, r: &PipelineReport) -> Self {
        let s = &r.student;
        Self {
            ordering: label,
            stages: r.ordering.clone(),
            ok: true,
            error: None,
            p50_ms: Some(s.green.p50_ms),
            p95_ms: Some(s.green.p95_ms),
            total_time_s: Some(s.green.total_wall_s),
            peak_memory_bytes: Some(s.green.peak_memory_bytes),
            gco2_per_sample: Some(s.green.co2_g_per_sample),
            accuracy: Some(s.val.primary()),
            final_config: Some(s.config.clone()),
            parameters: Some(s.parameters),
            pipeline_wall_s: Some(r.wall_s),
        }
    }

    pub fn failed(label: String, stages: Vec<StageId>, e: &Error) -> Self {
        Self {
            ordering: label,
            stages,
            ok: false,
            error: Some(e.to_string()),
            p50_ms: None,
            p95_ms: None,
            total_time_s: None,
            peak_memory_bytes: None,
            gco2_per_sample: None,
            accuracy: None,
            final_config: None,
            parameters: None,
            pipeline_wall_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingTable {
    pub rows: Vec<OrderingRow>,
}

fn body(c: &ArchConfig) -> String {
    format!("L{}-H{}x{}-F{}", c.num_layers, c.num_heads, c.head_dim, c.ffd_size)
}

impl OrderingTable {
    pub fn render(&self) -> String {
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.ordering.clone(),
                    format!("{}/{}", f(r.p50_ms, 3), f(r.p95_ms, 3)),
                    f(r.total_time_s, 3),
                    r.peak_memory_bytes.map_or("-".into(), |b| format!("{:.3}", b as f64 / (1024.0 * 1024.0))),
                    r.gco2_per_sample.map_or("-".into(), |g| format!("{g:.3e}")),
                    f(r.accuracy, 4),
                    r.final_config.as_ref().map_or_else(|| r.error.clone().unwrap_or_default(), body),
                ]
            })
            .collect();
        render_table(&["ordering", "P50/P95 (ms)", "total (s)", "peak mem (MB)", "gCO2/smp", "accuracy", "config"], &rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub label: String,
    pub config: ArchConfig,
    pub parameters: usize,
    pub memory_bytes: u64,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub p50_ms: f64,
    pub gco2_per_sample: f64,
}

impl ComponentRow {
    pub fn new(label: &str, s: &ModelSummary) -> Self {
        Self {
            label: label.into(),
            config: s.config.clone(),
            parameters: s.parameters,
            memory_bytes: s.memory_bytes,
            accuracy: s.val.primary(),
            precision: s.val.classifier.as_ref().map(|c| c.precision),
            recall: s.val.classifier.as_ref().map(|c| c.recall),
            p50_ms: s.green.p50_ms,
            gco2_per_sample: s.green.co2_g_per_sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub rows: Vec<ComponentRow>,
}

impl ComponentReport {
    pub fn render(&self) -> String {
        let o = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.4}"));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    body(&r.config),
                    r.parameters.to_string(),
                    format!("{:.3}", r.memory_bytes as f64 / (1024.0 * 1024.0)),
                    format!("{:.4}", r.accuracy),
                    o(r.precision),
                    o(r.recall),
                    format!("{:.3}", r.p50_ms),
                    format!("{:.3e}", r.gco2_per_sample),
                ]
            })
            .collect();
        render_table(&["model", "config", "params", "mem (MB)", "accuracy", "precision", "recall", "P50 (ms)", "gCO2/smp"], &rows)
    }
}

/// Left-aligned columns padded to the widest cell.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out.push_str(&line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}
