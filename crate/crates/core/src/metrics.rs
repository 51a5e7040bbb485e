//! Per-step metrics records, their line-oriented files, CSV export and
//! SVG line charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};

pub const METRICS_SCHEMA: &str = "symoe.metrics/1";

/// A value per modality; absent when the modality did not occur.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerModality {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vae: Option<f64>,
}

impl PerModality {
    pub fn from_array(v: [Option<f64>; 3]) -> Self {
        Self {
            text: v[0],
            vit: v[1],
            vae: v[2],
        }
    }

    pub fn values(&self) -> [Option<f64>; 3] {
        [self.text, self.vit, self.vae]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenCounts {
    pub text: u64,
    pub vit: u64,
    pub vae: u64,
}

impl TokenCounts {
    pub fn from_array(v: [u64; 3]) -> Self {
        Self {
            text: v[0],
            vit: v[1],
            vae: v[2],
        }
    }

    pub fn as_array(&self) -> [u64; 3] {
        [self.text, self.vit, self.vae]
    }
}

/// Loss of the step's task, keyed by task.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskLosses {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2i: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2i_long: Option<f64>,
}

impl TaskLosses {
    pub fn single(task: Task, v: f64) -> Self {
        let mut out = Self::default();
        match task {
            Task::Lm => out.lm = Some(v),
            Task::Mmu => out.mmu = Some(v),
            Task::T2i => out.t2i = Some(v),
            Task::T2iLong => out.t2i_long = Some(v),
        }
        out
    }
}

/// Held-out evaluation at a step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean discrete loss on held-out LM and MMU batches.
    pub und: f64,
    /// Mean flow loss on held-out T2I and T2I-Long batches.
    pub t2i: f64,
    pub capacity_rate: f64,
    pub capacity_by_modality: PerModality,
    /// Per layer, sampled at the imbalance cadence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imbalance_ratio: Option<Vec<PerModality>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub task: Task,
    pub losses: TaskLosses,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_loss: Option<f64>,
    pub total_loss: f64,
    /// Mean over layers of each router group's balance loss.
    pub aux_by_group: BTreeMap<String, f64>,
    pub capacity_rate: f64,
    pub capacity_by_modality: PerModality,
    pub shield_active: bool,
    pub tokens: TokenCounts,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalMetrics>,
    pub batch_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub schema: String,
    pub run: String,
    pub mode: String,
    pub seed: u64,
}

/// Append-only metrics file: a header line, then one record per line,
/// flushed as written.
pub struct MetricsSink {
    out: BufWriter<File>,
    last_step: Option<u64>,
    path: PathBuf,
}

impl MetricsSink {
    pub fn create(path: &Path, header: &MetricsHeader) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", serde_json::to_string(header)?)?;
        out.flush()?;
        Ok(Self {
            out,
            last_step: None,
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn emit(&mut self, record: &MetricsRecord) -> Result<()> {
        if self.last_step.is_some_and(|s| record.step <= s) {
            return Err(Error::Contract(format!(
                "metrics step {} does not follow {}",
                record.step,
                self.last_step.unwrap_or(0)
            )));
        }
        for r in [record.capacity_rate]
            .into_iter()
            .chain(record.capacity_by_modality.values().into_iter().flatten())
        {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Contract(format!("capacity rate {r} outside [0, 1]")));
            }
        }
        writeln!(self.out, "{}", serde_json::to_string(record)?)?;
        self.out.flush()?;
        self.last_step = Some(record.step);
        Ok(())
    }
}

/// Parses a metrics stream, checking the header and step order.
pub fn parse_metrics<R: BufRead>(r: R) -> Result<(MetricsHeader, Vec<MetricsRecord>)> {
    let mut lines = r.lines().enumerate();
    let header: MetricsHeader = match lines.next() {
        Some((_, l)) => serde_json::from_str(&l?)?,
        None => return Err(Error::Parse("empty metrics file".into())),
    };
    if header.schema != METRICS_SCHEMA {
        return Err(Error::Parse(format!("unsupported metrics schema {:?}", header.schema)));
    }
    let mut records: Vec<MetricsRecord> = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        if records.last().is_some_and(|p| rec.step <= p.step) {
            return Err(Error::Parse(format!("line {}: step {} is not increasing", i + 1, rec.step)));
        }
        records.push(rec);
    }
    Ok((header, records))
}

pub fn read_metrics(path: &Path) -> Result<(MetricsHeader, Vec<MetricsRecord>)> {
    parse_metrics(BufReader::new(File::open(path)?))
}

/// Running token totals per modality after each record.
pub fn cumulative_tokens(records: &[MetricsRecord]) -> Vec<TokenCounts> {
    let mut acc = [0u64; 3];
    records
        .iter()
        .map(|r| {
            for (a, b) in acc.iter_mut().zip(r.tokens.as_array()) {
                *a += b;
            }
            TokenCounts::from_array(acc)
        })
        .collect()
}

#[derive(Serialize)]
struct CsvRow<'a> {
    step: u64,
    task: &'a str,
    task_loss: Option<f64>,
    disc_loss: Option<f64>,
    img_loss: Option<f64>,
    aux_loss: Option<f64>,
    total_loss: f64,
    capacity_rate: f64,
    capacity_text: Option<f64>,
    capacity_vit: Option<f64>,
    capacity_vae: Option<f64>,
    shield_active: bool,
    tokens_text: u64,
    tokens_vit: u64,
    tokens_vae: u64,
    grad_norm: f64,
    eval_und: Option<f64>,
    eval_t2i: Option<f64>,
    eval_capacity_rate: Option<f64>,
}

pub fn write_csv<W: Write>(w: W, records: &[MetricsRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        let l = &r.losses;
        out.serialize(CsvRow {
            step: r.step,
            task: r.task.name(),
            task_loss: l.lm.or(l.mmu).or(l.t2i).or(l.t2i_long),
            disc_loss: r.disc_loss,
            img_loss: r.img_loss,
            aux_loss: r.aux_loss,
            total_loss: r.total_loss,
            capacity_rate: r.capacity_rate,
            capacity_text: r.capacity_by_modality.text,
            capacity_vit: r.capacity_by_modality.vit,
            capacity_vae: r.capacity_by_modality.vae,
            shield_active: r.shield_active,
            tokens_text: r.tokens.text,
            tokens_vit: r.tokens.vit,
            tokens_vae: r.tokens.vae,
            grad_norm: r.grad_norm,
            eval_und: r.eval.as_ref().map(|e| e.und),
            eval_t2i: r.eval.as_ref().map(|e| e.t2i),
            eval_capacity_rate: r.eval.as_ref().map(|e| e.capacity_rate),
        })
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, f64>) {
    match v {
        serde_json::Value::Number(n) => {
            if let Some(x) = n.as_f64() {
                out.insert(prefix.to_string(), x);
            }
        }
        serde_json::Value::Bool(b) => {
            out.insert(prefix.to_string(), f64::from(u8::from(*b)));
        }
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        serde_json::Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), v, out);
            }
        }
        _ => {}
    }
}

/// Numeric fields of a record under dotted keys, e.g. `eval.und` or
/// `capacity_by_modality.vae`.
pub fn numeric_fields(record: &MetricsRecord) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    flatten("", &serde_json::to_value(record)?, &mut out);
    Ok(out)
}

/// `(step, value)` points of `key` over a run. Errors list the keys that
/// do exist when `key` never occurs.
pub fn series(records: &[MetricsRecord], key: &str) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    let mut available = std::collections::BTreeSet::new();
    for r in records {
        let fields = numeric_fields(r)?;
        if let Some(&v) = fields.get(key) {
            points.push((r.step as f64, v));
        }
        available.extend(fields.into_keys());
    }
    if points.is_empty() {
        let keys: Vec<String> = available.into_iter().collect();
        return Err(Error::Usage(format!(
            "series key {key:?} not found; available keys: {}",
            keys.join(", ")
        )));
    }
    Ok(points)
}

/// Trailing moving average over `window` points.
pub fn smooth(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    if window <= 1 {
        return points.to_vec();
    }
    let mut out = Vec::with_capacity(points.len());
    let mut sum = 0.0;
    for i in 0..points.len() {
        sum += points[i].1;
        if i >= window {
            sum -= points[i - window].1;
        }
        let n = (i + 1).min(window) as f64;
        out.push((points[i].0, sum / n));
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Deterministic SVG line chart, one polyline per named run.
pub fn render_svg(title: &str, y_label: &str, runs: &[(String, Vec<(f64, f64)>)]) -> Result<String> {
    const W: f64 = 800.0;
    const H: f64 = 480.0;
    const L: f64 = 70.0;
    const R: f64 = 170.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let all: Vec<(f64, f64)> = runs.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Usage("nothing to plot".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = W - L - R;
    let ph = H - T - B;
    let sx = |x: f64| L + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| T + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, L + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for v in nice_ticks(x0, x1, 5) {
        let x = sx(v);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#ccc"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            T,
            T + ph,
            T + ph + 18.0,
            fmt_tick(v)
        );
    }
    for v in nice_ticks(y0, y1, 5) {
        let y = sy(v);
        let _ = writeln!(
            s,
            r##"<line x1="{L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ccc"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            L + pw,
            L - 6.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, L + pw / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        T + ph / 2.0,
        T + ph / 2.0,
        escape(y_label)
    );
    for (i, (name, pts)) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = T + 14.0 + 20.0 * i as f64;
        let lx = L + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 22.0,
            lx + 28.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Files and settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub run: String,
    pub mode: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub start_time: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(step: u64, task: Task) -> MetricsRecord {
        MetricsRecord {
            step,
            task,
            losses: TaskLosses::single(task, 1.5),
            disc_loss: Some(1.5),
            img_loss: None,
            aux_loss: Some(1.01),
            total_loss: 1.5101,
            aux_by_group: BTreeMap::from([("und".to_string(), 1.01)]),
            capacity_rate: 0.93,
            capacity_by_modality: PerModality {
                text: Some(0.93),
                ..Default::default()
            },
            shield_active: step < 50,
            tokens: TokenCounts {
                text: 192,
                vit: 0,
                vae: 0,
            },
            grad_norm: 0.7,
            eval: None,
            batch_digest: format!("{:016x}", step * 7919),
            wall_ms: None,
        }
    }

    #[test]
    fn sink_round_trip_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let header = MetricsHeader {
            schema: METRICS_SCHEMA.into(),
            run: "r".into(),
            mode: "symbiotic".into(),
            seed: 1,
        };
        let mut sink = MetricsSink::create(&path, &header).unwrap();
        let recs: Vec<_> = (0..5).map(|s| record(s, Task::Lm)).collect();
        for r in &recs {
            sink.emit(r).unwrap();
        }
        assert!(sink.emit(&record(2, Task::Lm)).is_err());
        drop(sink);
        let (h, back) = read_metrics(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, recs);
    }

    #[test]
    fn missing_series_lists_keys() {
        let recs = vec![record(0, Task::Lm)];
        let err = series(&recs, "nope").unwrap_err().to_string();
        assert!(err.contains("total_loss") && err.contains("capacity_by_modality.text"));
        assert_eq!(series(&recs, "grad_norm").unwrap(), vec![(0.0, 0.7)]);
    }

    #[test]
    fn svg_is_deterministic() {
        let runs = vec![("a".to_string(), vec![(0.0, 1.0), (1.0, 2.0)]), ("b".to_string(), vec![(0.0, 0.5)])];
        let a = render_svg("t", "y", &runs).unwrap();
        assert_eq!(a, render_svg("t", "y", &runs).unwrap());
        assert_eq!(a.matches("<polyline").count(), 2);
    }

    #[test]
    fn cumulative_prefix_sums() {
        assert!(cumulative_tokens(&[]).is_empty());
        let recs: Vec<_> = (0..3).map(|s| record(s, Task::Lm)).collect();
        let c = cumulative_tokens(&recs);
        assert_eq!(c[2].text, 3 * 192);
    }
}
