//! Versioned JSON output formats and their validators.
//!
//! Metrics files (`schema = "cxrlab-metrics"`) carry per-example scores,
//! their means and bootstrap intervals, corpus-level scores and the CE
//! tables. Comparison files (`schema = "cxrlab-comparison"`) carry the
//! Levene, Welch ANOVA and Games-Howell results over several metrics files.
//! Both name the producing configuration fingerprint and seed. Wall-clock
//! data lives only under `generated_at`.

use serde_json::{Map, Value};

pub const METRICS_SCHEMA: &str = "cxrlab-metrics";
pub const COMPARISON_SCHEMA: &str = "cxrlab-comparison";
pub const SCHEMA_VERSION: u64 = 1;

struct Checker<'a> {
    errors: Vec<String>,
    root: &'a Value,
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

impl<'a> Checker<'a> {
    fn new(root: &'a Value) -> Self {
        Self { errors: Vec::new(), root }
    }

    fn fail(&mut self, path: &str, msg: impl std::fmt::Display) {
        self.errors.push(format!("{path}: {msg}"));
    }

    fn object<'v>(&mut self, v: &'v Value, path: &str) -> Option<&'v Map<String, Value>> {
        match v {
            Value::Object(m) => Some(m),
            other => {
                self.fail(path, format!("expected object, found {}", kind(other)));
                None
            }
        }
    }

    fn field<'v>(&mut self, m: &'v Map<String, Value>, key: &str, path: &str) -> Option<&'v Value> {
        let v = m.get(key);
        if v.is_none() {
            self.fail(&format!("{path}.{key}"), "missing");
        }
        v
    }

    fn string(&mut self, m: &Map<String, Value>, key: &str, path: &str) -> Option<String> {
        match self.field(m, key, path)? {
            Value::String(s) => Some(s.clone()),
            other => {
                self.fail(&format!("{path}.{key}"), format!("expected string, found {}", kind(other)));
                None
            }
        }
    }

    fn number(&mut self, m: &Map<String, Value>, key: &str, path: &str) -> Option<f64> {
        match self.field(m, key, path)? {
            Value::Number(n) => n.as_f64(),
            other => {
                self.fail(&format!("{path}.{key}"), format!("expected number, found {}", kind(other)));
                None
            }
        }
    }

    fn unit(&mut self, m: &Map<String, Value>, key: &str, path: &str) {
        if let Some(x) = self.number(m, key, path) {
            if !(0.0..=1.0 + 1e-12).contains(&x) {
                self.fail(&format!("{path}.{key}"), format!("{x} outside [0, 1]"));
            }
        }
    }

    fn nullable_number(&mut self, m: &Map<String, Value>, key: &str, path: &str) {
        match self.field(m, key, path) {
            Some(Value::Null | Value::Number(_)) | None => {}
            Some(other) => self.fail(&format!("{path}.{key}"), format!("expected number or null, found {}", kind(other))),
        }
    }

    fn seed(&mut self, m: &Map<String, Value>, path: &str) {
        match self.field(m, "seed", path) {
            Some(Value::Null) | None => {}
            Some(Value::Number(n)) if n.is_u64() => {}
            Some(other) => self.fail(&format!("{path}.seed"), format!("expected unsigned integer or null, found {other}")),
        }
    }

    fn header(&mut self, schema: &str) -> Option<&'a Map<String, Value>> {
        let root = self.object(self.root, "$")?;
        if let Some(s) = self.string(root, "schema", "$") {
            if s != schema {
                self.fail("$.schema", format!("expected {schema:?}, found {s:?}"));
            }
        }
        match root.get("schema_version").and_then(Value::as_u64) {
            Some(SCHEMA_VERSION) => {}
            Some(v) => self.fail("$.schema_version", format!("unsupported version {v}")),
            None => self.fail("$.schema_version", "missing or not an integer"),
        }
        self.string(root, "config_fingerprint", "$");
        self.seed(root, "$");
        if let Some(g) = self.field(root, "generated_at", "$") {
            if let Some(g) = self.object(g, "$.generated_at") {
                self.number(g, "unix_seconds", "$.generated_at");
            }
        }
        Some(root)
    }

    fn finish(self) -> Result<(), Vec<String>> {
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(self.errors)
        }
    }
}

/// Checks a metrics document against schema version 1.
pub fn validate_metrics(doc: &Value) -> Result<(), Vec<String>> {
    let mut c = Checker::new(doc);
    let Some(root) = c.header(METRICS_SCHEMA) else {
        return c.finish();
    };
    c.string(root, "label", "$");
    let names: Vec<String> = match c.field(root, "score_names", "$") {
        Some(Value::Array(a)) if a.iter().all(Value::is_string) && !a.is_empty() => {
            a.iter().map(|s| s.as_str().unwrap_or_default().to_string()).collect()
        }
        Some(_) => {
            c.fail("$.score_names", "expected a non-empty array of strings");
            Vec::new()
        }
        None => Vec::new(),
    };
    match c.field(root, "per_example", "$") {
        Some(Value::Array(rows)) => {
            if rows.is_empty() {
                c.fail("$.per_example", "empty");
            }
            for (i, row) in rows.iter().enumerate() {
                let path = format!("$.per_example[{i}]");
                let Some(row) = c.object(row, &path) else { continue };
                c.string(row, "id", &path);
                match row.get("scores") {
                    Some(Value::Array(s)) if s.len() == names.len() && s.iter().all(Value::is_number) => {}
                    _ => c.fail(&format!("{path}.scores"), format!("expected {} numbers", names.len())),
                }
            }
        }
        Some(other) => c.fail("$.per_example", format!("expected array, found {}", kind(other))),
        None => {}
    }
    if let Some(means) = c.field(root, "means", "$").and_then(|v| v.as_object()) {
        for n in &names {
            c.number(means, n, "$.means");
        }
    }
    if let Some(boot) = c.field(root, "bootstrap", "$").and_then(|v| v.as_object()) {
        for n in &names {
            let path = format!("$.bootstrap.{n}");
            let Some(ci) = c.field(boot, n, "$.bootstrap") else { continue };
            let Some(ci) = c.object(ci, &path) else { continue };
            let (lo, mean, hi) = (c.number(ci, "lo", &path), c.number(ci, "mean", &path), c.number(ci, "hi", &path));
            if let (Some(lo), Some(mean), Some(hi)) = (lo, mean, hi) {
                if !(lo <= mean + 1e-12 && mean <= hi + 1e-12) {
                    c.fail(&path, format!("interval [{lo}, {hi}] does not bracket {mean}"));
                }
            }
            c.unit(ci, "level", &path);
            c.number(ci, "resamples", &path);
        }
    }
    if let Some(corpus) = c.field(root, "corpus", "$") {
        if let Some(corpus) = c.object(corpus, "$.corpus") {
            match corpus.get("bleu") {
                Some(Value::Array(b)) if b.len() == 4 && b.iter().all(Value::is_number) => {}
                _ => c.fail("$.corpus.bleu", "expected 4 numbers"),
            }
            for k in ["meteor", "rouge_l", "cider"] {
                c.number(corpus, k, "$.corpus");
            }
        }
    }
    if let Some(ce) = c.field(root, "ce", "$") {
        if let Some(ce) = c.object(ce, "$.ce") {
            if let Some(eb) = c.field(ce, "example_based", "$.ce").and_then(|v| v.as_object()) {
                for k in ["precision", "recall", "f1"] {
                    c.unit(eb, k, "$.ce.example_based");
                }
            }
            if let Some(lb) = c.field(ce, "label_based", "$.ce").and_then(|v| v.as_object()) {
                match lb.get("per_label") {
                    Some(Value::Array(rows)) if !rows.is_empty() => {
                        for (i, row) in rows.iter().enumerate() {
                            let path = format!("$.ce.label_based.per_label[{i}]");
                            let Some(row) = c.object(row, &path) else { continue };
                            c.string(row, "observation", &path);
                            for k in ["precision", "recall", "f1"] {
                                c.nullable_number(row, k, &path);
                            }
                        }
                    }
                    _ => c.fail("$.ce.label_based.per_label", "expected a non-empty array"),
                }
                for k in ["micro_precision", "micro_recall", "micro_f1"] {
                    c.nullable_number(lb, k, "$.ce.label_based");
                }
            }
        }
    }
    c.finish()
}

/// Checks a comparison document against schema version 1.
pub fn validate_comparison(doc: &Value) -> Result<(), Vec<String>> {
    let mut c = Checker::new(doc);
    let Some(root) = c.header(COMPARISON_SCHEMA) else {
        return c.finish();
    };
    c.string(root, "metric", "$");
    c.string(root, "pooling", "$");
    match c.field(root, "inputs", "$") {
        Some(Value::Array(a)) if a.len() >= 2 => {
            for (i, input) in a.iter().enumerate() {
                let path = format!("$.inputs[{i}]");
                let Some(input) = c.object(input, &path) else { continue };
                c.string(input, "path", &path);
                c.string(input, "label", &path);
                c.string(input, "config_fingerprint", &path);
            }
        }
        Some(_) => c.fail("$.inputs", "expected at least two inputs"),
        None => {}
    }
    let Some(report) = c.field(root, "report", "$") else {
        return c.finish();
    };
    let Some(report) = c.object(report, "$.report") else {
        return c.finish();
    };
    let k = match report.get("labels") {
        Some(Value::Array(l)) if l.len() >= 2 => l.len(),
        _ => {
            c.fail("$.report.labels", "expected at least two groups");
            0
        }
    };
    for key in ["sizes", "means", "std_devs"] {
        match report.get(key) {
            Some(Value::Array(a)) if a.len() == k => {}
            _ => c.fail(&format!("$.report.{key}"), format!("expected {k} entries")),
        }
    }
    for (key, stat) in [("levene", "w"), ("welch", "f")] {
        let path = format!("$.report.{key}");
        if let Some(r) = c.field(report, key, "$.report").and_then(|v| v.as_object()) {
            c.number(r, stat, &path);
            c.number(r, "df1", &path);
            c.number(r, "df2", &path);
            c.unit(r, "p", &path);
        } else {
            c.fail(&path, "expected object");
        }
    }
    match report.get("games_howell") {
        Some(Value::Array(pairs)) if pairs.len() == k * k.saturating_sub(1) / 2 => {
            for (i, p) in pairs.iter().enumerate() {
                let path = format!("$.report.games_howell[{i}]");
                let Some(p) = c.object(p, &path) else { continue };
                c.string(p, "a", &path);
                c.string(p, "b", &path);
                c.number(p, "mean_diff", &path);
                c.nullable_number(p, "q", &path);
                c.unit(p, "p", &path);
                if !matches!(p.get("significant"), Some(Value::Bool(_))) {
                    c.fail(&format!("{path}.significant"), "expected boolean");
                }
            }
        }
        _ => c.fail("$.report.games_howell", format!("expected {} pairs", k * k.saturating_sub(1) / 2)),
    }
    c.finish()
}
