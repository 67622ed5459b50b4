//! Prompt rendering and completion parsing for the `<think>`/`<answer>` text
//! format, plus the `date value` row codec shared by prompts and answers.

use std::sync::OnceLock;

use chrono::{NaiveDate, NaiveDateTime};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::{SeriesError, TimeSeries};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Decimal places used for values inside prompts and assembled answers.
pub const VALUE_PRECISION: usize = 3;

pub type Row = (NaiveDateTime, f64);

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error("target must start one step after the history ({expected}), got {got}")]
    Discontiguous {
        expected: NaiveDateTime,
        got: NaiveDateTime,
    },
    #[error("target spacing differs from history spacing")]
    SpacingMismatch,
}

/// One single-channel forecasting problem: a history window and the ground
/// truth for the following `horizon` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastTask {
    pub id: String,
    pub dataset_name: String,
    pub dataset_description: String,
    /// Column label, e.g. `HUFL`.
    pub channel_name: String,
    /// Human-readable channel description, e.g. `High UseFul Load`.
    pub channel_info: String,
    pub history: TimeSeries,
    pub target: TimeSeries,
}

impl ForecastTask {
    pub fn new(
        id: impl Into<String>,
        dataset_name: impl Into<String>,
        dataset_description: impl Into<String>,
        channel_name: impl Into<String>,
        channel_info: impl Into<String>,
        history: TimeSeries,
        target: TimeSeries,
    ) -> Result<Self, TaskError> {
        let task = Self {
            id: id.into(),
            dataset_name: dataset_name.into(),
            dataset_description: dataset_description.into(),
            channel_name: channel_name.into(),
            channel_info: channel_info.into(),
            history,
            target,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.target.step() != self.history.step() {
            return Err(TaskError::SpacingMismatch);
        }
        let expected = self.history.next_timestamp();
        if self.target.start() != expected {
            return Err(TaskError::Discontiguous {
                expected,
                got: self.target.start(),
            });
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.target.len()
    }

    pub fn ground_truth(&self) -> &[f64] {
        self.target.values()
    }

    pub fn future_timestamps(&self) -> Vec<NaiveDateTime> {
        self.target.timestamps().collect()
    }
}

/// Renders the five-part training template: task definition, dataset
/// description, channel information, historical rows and format instruction.
pub fn render_prompt(task: &ForecastTask) -> String {
    let t = task.history.len();
    let h = task.horizon();
    let mut out = String::new();
    out.push_str(&format!(
        "Here is the {} data of the {}.",
        task.channel_info, task.dataset_name
    ));
    if !task.dataset_description.trim().is_empty() {
        out.push_str(&format!(
            " The {} is {}.",
            task.dataset_name,
            task.dataset_description.trim().trim_end_matches('.')
        ));
    }
    out.push_str(&format!(
        " I will now give you data for the past {t} recorded dates, and please help me \
         forecast the data for next {h} recorded dates. The data is as follows:\n"
    ));
    out.push_str("```\n");
    out.push_str(&format!("date {}\n", task.channel_name));
    out.push_str(&serialize_series(&task.history, VALUE_PRECISION));
    out.push_str("```\n");
    out.push_str(&format!(
        "Please give me the complete data for the next {h} recorded dates, remember to give \
         me the complete data. You must first conduct reasoning inside {THINK_OPEN}...{THINK_CLOSE}. \
         When you have the final answer, you can output the answer inside {ANSWER_OPEN}...{ANSWER_CLOSE}."
    ));
    out
}

pub fn format_row(ts: NaiveDateTime, value: f64, precision: usize) -> String {
    format!("{} {:.*}", ts.format(TIMESTAMP_FORMAT), precision, value)
}

/// One `timestamp value` line per row, newline-terminated.
pub fn serialize_rows(rows: &[Row], precision: usize) -> String {
    let mut out = String::new();
    for &(ts, v) in rows {
        out.push_str(&format_row(ts, v, precision));
        out.push('\n');
    }
    out
}

pub fn serialize_series(series: &TimeSeries, precision: usize) -> String {
    serialize_rows(&series.rows(), precision)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedRows {
    pub rows: Vec<Row>,
    /// Lines that started with a timestamp but carried no usable number.
    pub skipped: usize,
}

fn row_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(\d{4}-\d{2}-\d{2})(?:[ T](\d{2}:\d{2}(?::\d{2})?))?(?:\s+(.*?))?\s*$").expect("row regex")
    })
}

fn parse_timestamp(date: &str, time: Option<&str>) -> Option<NaiveDateTime> {
    let d = NaiveDate::parse_from_str(date, "%Y-%m-%d").ok()?;
    match time {
        None => d.and_hms_opt(0, 0, 0),
        Some(t) if t.len() == 5 => NaiveDateTime::parse_from_str(&format!("{date} {t}"), "%Y-%m-%d %H:%M").ok(),
        Some(t) => NaiveDateTime::parse_from_str(&format!("{date} {t}"), TIMESTAMP_FORMAT).ok(),
    }
}

/// Parses a single `YYYY-MM-DD[ HH:MM[:SS]]` timestamp.
pub fn parse_timestamp_str(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    let (date, time) = match s.split_once([' ', 'T']) {
        Some((d, t)) => (d, Some(t.trim())),
        None => (s, None),
    };
    parse_timestamp(date, time)
}

/// Extracts `timestamp number` rows in order. Lines that do not begin with a
/// timestamp (headers, fences, ellipses) are ignored; timestamped lines with
/// an unusable value are skipped and counted.
pub fn parse_series(text: &str) -> ParsedRows {
    let mut out = ParsedRows::default();
    for line in text.lines() {
        let Some(caps) = row_regex().captures(line) else {
            continue;
        };
        let ts = parse_timestamp(&caps[1], caps.get(2).map(|m| m.as_str()));
        let value = caps
            .get(3)
            .map(|m| m.as_str())
            .filter(|s| !s.is_empty() && !s.contains(char::is_whitespace))
            .and_then(|s| s.parse::<f64>().ok())
            .filter(|v| v.is_finite());
        match (ts, value) {
            (Some(ts), Some(v)) => out.rows.push((ts, v)),
            _ => out.skipped += 1,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StructureFlags {
    /// Exactly one `<think>` followed by exactly one `</think>`.
    pub think_tags: bool,
    /// Exactly one `<answer>…</answer>` pair, after the think block.
    pub answer_tags: bool,
    /// The answer block yielded at least one row.
    pub answer_parseable: bool,
}

impl StructureFlags {
    pub fn all(&self) -> bool {
        self.think_tags && self.answer_tags && self.answer_parseable
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedCompletion {
    pub think_text: String,
    pub answer_rows: Vec<Row>,
    pub skipped_rows: usize,
    pub flags: StructureFlags,
}

impl ParsedCompletion {
    pub fn is_valid(&self) -> bool {
        self.flags.all()
    }

    pub fn values(&self) -> Vec<f64> {
        self.answer_rows.iter().map(|r| r.1).collect()
    }
}

/// Locates the single pair `open…close`, returning the byte span of the body
/// when each tag occurs exactly once and in order.
fn unique_span(text: &str, open: &str, close: &str) -> Option<(usize, usize)> {
    if text.matches(open).count() != 1 || text.matches(close).count() != 1 {
        return None;
    }
    let start = text.find(open)? + open.len();
    let end = text.find(close)?;
    (start <= end).then_some((start, end))
}

/// Parses a completion. Invalid structure is reported through the flags; the
/// answer rows are still recovered on a best-effort basis (from the first
/// `<answer>` to the next `</answer>` or the end of the text).
pub fn parse_completion(text: &str) -> ParsedCompletion {
    let think = unique_span(text, THINK_OPEN, THINK_CLOSE);
    let answer = unique_span(text, ANSWER_OPEN, ANSWER_CLOSE);
    let answer_after_think = match (think, answer) {
        (Some((_, think_end)), Some((answer_start, _))) => {
            answer_start - ANSWER_OPEN.len() >= think_end + THINK_CLOSE.len()
        }
        _ => false,
    };
    let think_text = think.map(|(s, e)| text[s..e].to_string()).unwrap_or_default();

    let answer_body = match answer {
        Some((s, e)) => &text[s..e],
        None => match text.find(ANSWER_OPEN) {
            Some(p) => {
                let rest = &text[p + ANSWER_OPEN.len()..];
                match rest.find(ANSWER_CLOSE) {
                    Some(e) => &rest[..e],
                    None => rest,
                }
            }
            None => "",
        },
    };
    let parsed = parse_series(answer_body);
    let flags = StructureFlags {
        think_tags: think.is_some(),
        answer_tags: answer.is_some() && answer_after_think,
        answer_parseable: !parsed.rows.is_empty(),
    };
    ParsedCompletion {
        think_text,
        answer_rows: parsed.rows,
        skipped_rows: parsed.skipped,
        flags,
    }
}

/// Renders `<think>cot</think>\n<answer>\n```\ndate attr\nrows```\n</answer>`.
pub fn render_completion(cot: &str, rows: &[Row], precision: usize) -> String {
    format!(
        "{THINK_OPEN}{cot}{THINK_CLOSE}\n\n{ANSWER_OPEN}\n```\ndate attr\n{}```\n{ANSWER_CLOSE}",
        serialize_rows(rows, precision)
    )
}

/// Removes every whitespace character; used to compare prompts that differ
/// only in line wrapping and spacing.
pub fn strip_whitespace(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;
    use proptest::prelude::*;

    fn ts(s: &str) -> NaiveDateTime {
        NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT).unwrap()
    }

    fn task(n_hist: usize, h: usize) -> ForecastTask {
        let start = ts("2016-07-01 00:00:00");
        let history = TimeSeries::new(
            start,
            Duration::hours(1),
            (0..n_hist).map(|i| i as f64 * 0.5).collect(),
            "hourly",
        )
        .unwrap();
        let target = history.continuation((0..h).map(|i| i as f64).collect()).unwrap();
        ForecastTask::new("t0", "transformer", "", "HUFL", "High UseFul Load", history, target).unwrap()
    }

    #[test]
    fn prompt_contains_instruction_and_channel() {
        let p = render_prompt(&task(96, 96));
        assert!(p.contains("You must first conduct reasoning inside"));
        assert!(p.contains("HUFL"));
        assert!(p.contains("High UseFul Load"));
    }

    #[test]
    fn prompt_row_count_preserved() {
        let p = render_prompt(&task(96, 96));
        let fenced: Vec<&str> = p.split("```").collect();
        assert_eq!(fenced.len(), 3);
        assert_eq!(parse_series(fenced[1]).rows.len(), 96);
    }

    #[test]
    fn prompt_is_deterministic() {
        assert_eq!(render_prompt(&task(10, 4)), render_prompt(&task(10, 4)));
    }

    #[test]
    fn prompt_includes_description_when_present() {
        let mut t = task(4, 2);
        t.dataset_description = "an electricity transformer load record".into();
        assert!(render_prompt(&t).contains("The transformer is an electricity transformer load record."));
    }

    #[test]
    fn task_rejects_gap() {
        let start = ts("2016-07-01 00:00:00");
        let history = TimeSeries::new(start, Duration::hours(1), vec![1.0, 2.0], "hourly").unwrap();
        let target = TimeSeries::new(ts("2016-07-01 05:00:00"), Duration::hours(1), vec![1.0], "hourly").unwrap();
        assert!(matches!(
            ForecastTask::new("x", "d", "", "c", "c", history, target),
            Err(TaskError::Discontiguous { .. })
        ));
    }

    #[test]
    fn serialize_single_row() {
        let s = serialize_rows(&[(ts("2016-07-01 00:00:00"), 5.827)], 3);
        assert_eq!(s.trim_end(), "2016-07-01 00:00:00 5.827");
        assert_eq!(serialize_rows(&[], 3), "");
    }

    #[test]
    fn parse_series_skips_and_counts() {
        let text = "```\ndate HUFL\n2016-07-05 00:00:00 11.989\n2016-07-05 01:00:00 abc\n\n...\n2016-07-05 02:00:00\n2016-07-05 03:00 4.5\n```";
        let p = parse_series(text);
        assert_eq!(p.rows.len(), 2);
        assert_eq!(p.rows[0], (ts("2016-07-05 00:00:00"), 11.989));
        assert_eq!(p.rows[1], (ts("2016-07-05 03:00:00"), 4.5));
        assert_eq!(p.skipped, 2);
        assert_eq!(parse_series("no rows here"), ParsedRows::default());
    }

    #[test]
    fn completion_valid_minimal() {
        let p = parse_completion("<think>x</think><answer>2016-07-05 00:00:00 1.0</answer>");
        assert!(p.is_valid());
        assert_eq!(p.answer_rows.len(), 1);
        assert_eq!(p.think_text, "x");
    }

    #[test]
    fn completion_missing_answer_close() {
        let p = parse_completion("<think>x</think><answer>2016-07-05 00:00:00 1.0");
        assert!(!p.is_valid());
        assert!(!p.flags.answer_tags);
        // best effort recovery still sees the row
        assert_eq!(p.answer_rows.len(), 1);
    }

    #[test]
    fn completion_out_of_order() {
        let p = parse_completion("<answer>2016-07-05 00:00:00 1.0</answer><think>x</think>");
        assert!(!p.is_valid());
        assert!(p.flags.think_tags);
        assert!(!p.flags.answer_tags);
    }

    #[test]
    fn completion_duplicate_tags_invalid() {
        let p = parse_completion("<think>a</think><think>b</think><answer>2016-07-05 00:00:00 1.0</answer>");
        assert!(!p.flags.think_tags);
        assert!(!p.is_valid());
    }

    #[test]
    fn completion_empty_answer_not_parseable() {
        let p = parse_completion("<think>a</think><answer>nothing</answer>");
        assert!(p.flags.think_tags && p.flags.answer_tags);
        assert!(!p.flags.answer_parseable);
        assert!(!p.is_valid());
    }

    #[test]
    fn render_completion_round_trips() {
        let rows: Vec<Row> = (0..5)
            .map(|i| (ts("2016-07-05 00:00:00") + Duration::hours(i), i as f64 * 1.25))
            .collect();
        let p = parse_completion(&render_completion("reasoning", &rows, 3));
        assert!(p.is_valid());
        assert_eq!(p.answer_rows, rows);
        assert_eq!(p.think_text, "reasoning");
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(
            vals in prop::collection::vec(-1e5f64..1e5, 1..50),
            prec in 0usize..6,
        ) {
            let s = TimeSeries::new(ts("2020-01-01 00:00:00"), Duration::minutes(15), vals, "15min").unwrap();
            let text = serialize_series(&s, prec);
            let parsed = parse_series(&text);
            prop_assert_eq!(parsed.skipped, 0);
            prop_assert_eq!(parsed.rows.len(), s.len());
            for ((t0, v0), (t1, v1)) in s.rows().into_iter().zip(parsed.rows) {
                prop_assert_eq!(t0, t1);
                let expected: f64 = format!("{:.*}", prec, v0).parse().unwrap();
                prop_assert_eq!(expected, v1);
            }
        }

        #[test]
        fn parse_series_never_panics(text in ".{0,200}") {
            let p = parse_series(&text);
            prop_assert!(p.rows.iter().all(|r| r.1.is_finite()));
        }
    }
}
