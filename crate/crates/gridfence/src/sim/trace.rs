//! Run recording: a fixed-schema table with one row per step, plus the
//! derived end-of-run summary.
//!
//! The column set is decided before the run starts and covers every link
//! that ever exists (initial lines plus lines added by plug-in events), so
//! rows stay aligned even when the topology changes mid-run. Values for a
//! link while it does not exist are zero.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

/// Per-DER quantities recorded each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerColumn {
    /// PCC voltage (true state).
    Voltage,
    /// Converter current (true state).
    Current,
    /// Converter command applied this step.
    Input,
    /// Secondary reference shift.
    Alpha,
    /// Current-sharing safety indicator.
    SharingError,
}

const DER_COLUMNS: [(DerColumn, &str); 5] = [
    (DerColumn::Voltage, "v"),
    (DerColumn::Current, "i_t"),
    (DerColumn::Input, "u"),
    (DerColumn::Alpha, "alpha"),
    (DerColumn::SharingError, "share_err"),
];

/// Per-link quantities recorded each step; a link `(r, s)` carries the
/// sender `s`'s measurement to the receiver `r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkColumn {
    /// Received (possibly attacked) voltage.
    ReceivedV,
    /// Received (possibly attacked) current.
    ReceivedI,
    ResidualV,
    ResidualI,
    BoundV,
    BoundI,
    /// 1 while the alarm is latched.
    Alarm,
    /// True injected voltage bias (offline analysis only).
    BiasTrueV,
    /// True injected current bias (offline analysis only).
    BiasTrueI,
    /// Voltage bias observed through the line equation.
    BiasObservedV,
    /// Reconstructed current bias.
    BiasReconI,
    /// Corrected voltage handed to the secondary layer.
    CorrectedV,
    /// Corrected current handed to the secondary layer.
    CorrectedI,
}

const LINK_COLUMNS: [(LinkColumn, &str); 13] = [
    (LinkColumn::ReceivedV, "ys_v"),
    (LinkColumn::ReceivedI, "ys_i"),
    (LinkColumn::ResidualV, "r_v"),
    (LinkColumn::ResidualI, "r_i"),
    (LinkColumn::BoundV, "rb_v"),
    (LinkColumn::BoundI, "rb_i"),
    (LinkColumn::Alarm, "alarm"),
    (LinkColumn::BiasTrueV, "phi_true_v"),
    (LinkColumn::BiasTrueI, "phi_true_i"),
    (LinkColumn::BiasObservedV, "phi_ob_v"),
    (LinkColumn::BiasReconI, "phi_re_i"),
    (LinkColumn::CorrectedV, "yco_v"),
    (LinkColumn::CorrectedI, "yco_i"),
];

fn der_offset(col: DerColumn) -> usize {
    DER_COLUMNS.iter().position(|(c, _)| *c == col).unwrap()
}

fn link_offset(col: LinkColumn) -> usize {
    LINK_COLUMNS.iter().position(|(c, _)| *c == col).unwrap()
}

/// Column layout for one run: time, then a block per DER, then a block per
/// link, both in ascending order.
#[derive(Clone, Debug)]
pub struct TraceSchema {
    ders: Vec<u32>,
    links: Vec<(u32, u32)>,
    der_index: BTreeMap<u32, usize>,
    link_index: BTreeMap<(u32, u32), usize>,
}

impl TraceSchema {
    /// `links` are (receiver, sender) pairs; both lists are sorted and
    /// deduplicated here.
    pub fn new(ders: impl IntoIterator<Item = u32>, links: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut ders: Vec<u32> = ders.into_iter().collect();
        ders.sort_unstable();
        ders.dedup();
        let mut links: Vec<(u32, u32)> = links.into_iter().collect();
        links.sort_unstable();
        links.dedup();
        let der_index = ders.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let link_index = links.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        Self { ders, links, der_index, link_index }
    }

    pub fn ders(&self) -> &[u32] {
        &self.ders
    }

    pub fn links(&self) -> &[(u32, u32)] {
        &self.links
    }

    pub fn width(&self) -> usize {
        1 + DER_COLUMNS.len() * self.ders.len() + LINK_COLUMNS.len() * self.links.len()
    }

    pub fn der_col(&self, node: u32, col: DerColumn) -> Option<usize> {
        let base = 1 + DER_COLUMNS.len() * self.der_index.get(&node)?;
        Some(base + der_offset(col))
    }

    pub fn link_col(&self, link: (u32, u32), col: LinkColumn) -> Option<usize> {
        let base =
            1 + DER_COLUMNS.len() * self.ders.len() + LINK_COLUMNS.len() * self.link_index.get(&link)?;
        Some(base + link_offset(col))
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width());
        names.push("time".to_string());
        for &node in &self.ders {
            for (_, tag) in DER_COLUMNS {
                names.push(format!("{tag}_{node}"));
            }
        }
        for &(recv, send) in &self.links {
            for (_, tag) in LINK_COLUMNS {
                names.push(format!("{tag}_{recv}_{send}"));
            }
        }
        names
    }
}

/// The full run recording. Alarm flags are stored as 0.0/1.0.
#[derive(Clone, Debug)]
pub struct Trace {
    pub schema: TraceSchema,
    pub rows: Vec<Vec<f64>>,
}

impl Trace {
    pub fn new(schema: TraceSchema) -> Self {
        Self { schema, rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn time(&self, step: usize) -> f64 {
        self.rows[step][0]
    }

    pub fn der(&self, step: usize, node: u32, col: DerColumn) -> f64 {
        self.rows[step][self.schema.der_col(node, col).expect("unknown DER column")]
    }

    pub fn link(&self, step: usize, link: (u32, u32), col: LinkColumn) -> f64 {
        self.rows[step][self.schema.link_col(link, col).expect("unknown link column")]
    }

    /// One column as a vector, for offline analysis.
    pub fn link_series(&self, link: (u32, u32), col: LinkColumn) -> Vec<f64> {
        let idx = self.schema.link_col(link, col).expect("unknown link column");
        self.rows.iter().map(|row| row[idx]).collect()
    }

    pub fn der_series(&self, node: u32, col: DerColumn) -> Vec<f64> {
        let idx = self.schema.der_col(node, col).expect("unknown DER column");
        self.rows.iter().map(|row| row[idx]).collect()
    }

    /// Writes the run as CSV. Floats use the shortest representation that
    /// parses back to the same value, so the file carries full precision.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut line = self.schema.column_names().join(",");
        line.push('\n');
        out.write_all(line.as_bytes())?;
        let mut buf = String::new();
        for row in &self.rows {
            buf.clear();
            for (i, value) in row.iter().enumerate() {
                if i > 0 {
                    buf.push(',');
                }
                buf.push_str(&format!("{value}"));
            }
            buf.push('\n');
            out.write_all(buf.as_bytes())?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut bytes = Vec::new();
        self.write_csv(&mut bytes).expect("writing to a Vec cannot fail");
        String::from_utf8(bytes).expect("CSV output is always UTF-8")
    }
}

/// End-of-run digest, serialized as JSON next to the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub t_samp: f64,
    /// Links whose alarm latched at least once.
    pub links_alarmed: u64,
    pub ders: Vec<DerSummary>,
    pub links: Vec<LinkSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerSummary {
    pub node: u32,
    pub final_voltage: f64,
    pub final_current: f64,
    pub final_alpha: f64,
    pub final_sharing_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSummary {
    pub receiver: u32,
    pub sender: u32,
    pub max_abs_residual_v: f64,
    pub max_abs_residual_i: f64,
    /// Step at which the alarm first latched, if it ever did.
    pub first_alarm_step: Option<u64>,
    pub alarm_steps: u64,
    /// Bias estimates and true injections at the last step, for quick
    /// reconstruction-quality checks without reopening the trace.
    pub final_bias_observed_v: f64,
    pub final_bias_recon_i: f64,
    pub final_bias_true_v: f64,
    pub final_bias_true_i: f64,
}

impl RunSummary {
    pub fn from_trace(trace: &Trace, t_samp: f64) -> Self {
        let steps = trace.len() as u64;
        let last = trace.len().checked_sub(1);
        let ders = trace
            .schema
            .ders()
            .iter()
            .map(|&node| DerSummary {
                node,
                final_voltage: last.map_or(0.0, |k| trace.der(k, node, DerColumn::Voltage)),
                final_current: last.map_or(0.0, |k| trace.der(k, node, DerColumn::Current)),
                final_alpha: last.map_or(0.0, |k| trace.der(k, node, DerColumn::Alpha)),
                final_sharing_error: last.map_or(0.0, |k| trace.der(k, node, DerColumn::SharingError)),
            })
            .collect();
        let mut links_alarmed = 0;
        let links = trace
            .schema
            .links()
            .iter()
            .map(|&link| {
                let mut max_v = 0.0f64;
                let mut max_i = 0.0f64;
                let mut first_alarm = None;
                let mut alarm_steps = 0;
                for k in 0..trace.len() {
                    max_v = max_v.max(trace.link(k, link, LinkColumn::ResidualV).abs());
                    max_i = max_i.max(trace.link(k, link, LinkColumn::ResidualI).abs());
                    if trace.link(k, link, LinkColumn::Alarm) != 0.0 {
                        alarm_steps += 1;
                        first_alarm.get_or_insert(k as u64);
                    }
                }
                if first_alarm.is_some() {
                    links_alarmed += 1;
                }
                LinkSummary {
                    receiver: link.0,
                    sender: link.1,
                    max_abs_residual_v: max_v,
                    max_abs_residual_i: max_i,
                    first_alarm_step: first_alarm,
                    alarm_steps,
                    final_bias_observed_v: last.map_or(0.0, |k| trace.link(k, link, LinkColumn::BiasObservedV)),
                    final_bias_recon_i: last.map_or(0.0, |k| trace.link(k, link, LinkColumn::BiasReconI)),
                    final_bias_true_v: last.map_or(0.0, |k| trace.link(k, link, LinkColumn::BiasTrueV)),
                    final_bias_true_i: last.map_or(0.0, |k| trace.link(k, link, LinkColumn::BiasTrueI)),
                }
            })
            .collect();
        RunSummary { steps, t_samp, links_alarmed, ders, links }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serialization cannot fail")
    }
}
