//! Machine-actionable reproducibility records embedded in commit messages.
//!
//! A record sits between two fixed sentinel lines as a JSON object with
//! sorted keys and one-space indentation:
//!
//! ```text
//! [DATALAD SLURM RUN] Slurm job 11452054: Completed
//!
//! === Do not change lines below ===
//! {
//!  "chain": [],
//!  ...
//! }
//! ^^^ Do not change lines above ^^^
//! ```

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::paths::RelPath;

pub const BEGIN_SENTINEL: &str = "=== Do not change lines below ===";
pub const END_SENTINEL: &str = "^^^ Do not change lines above ^^^";
pub const SLURM_HEADLINE_TAG: &str = "[DATALAD SLURM RUN]";

const KNOWN_KEYS: [&str; 10] = [
    "chain",
    "cmd",
    "dsid",
    "exit",
    "extra_inputs",
    "inputs",
    "outputs",
    "pwd",
    "slurm_job_id",
    "slurm_outputs",
];

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("malformed record: {0}")]
    MalformedRecord(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReproRecord {
    pub chain: Vec<String>,
    pub cmd: String,
    pub dsid: String,
    pub exit: Option<i64>,
    pub extra_inputs: Vec<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub pwd: String,
    pub slurm_job_id: Option<u64>,
    pub slurm_outputs: Option<Vec<String>>,
    /// Keys this version does not know about, kept for lossless round-trips.
    pub extra: BTreeMap<String, Value>,
}

impl ReproRecord {
    pub fn validate(&self) -> Result<(), RecordError> {
        match RelPath::new(&self.pwd) {
            Ok(_) if !self.pwd.is_empty() => {}
            _ => {
                return Err(RecordError::InvalidRecord(format!(
                    "pwd `{}` is not a relative path",
                    self.pwd
                )))
            }
        }
        match (&self.slurm_job_id, &self.slurm_outputs) {
            (Some(_), None) => {
                return Err(RecordError::InvalidRecord(
                    "slurm_job_id present without slurm_outputs".into(),
                ))
            }
            (_, Some(slurm)) => {
                if let Some(missing) = slurm.iter().find(|s| !self.outputs.contains(s)) {
                    return Err(RecordError::InvalidRecord(format!(
                        "slurm output `{missing}` is not listed in outputs"
                    )));
                }
            }
            _ => {}
        }
        if let Some(k) = self.extra.keys().find(|k| KNOWN_KEYS.contains(&k.as_str())) {
            return Err(RecordError::InvalidRecord(format!(
                "extra key `{k}` shadows a record field"
            )));
        }
        Ok(())
    }

    pub fn is_slurm(&self) -> bool {
        self.slurm_job_id.is_some()
    }

    fn to_value(&self) -> Value {
        let mut map: Map<String, Value> = Map::new();
        let strings = |v: &[String]| Value::from(v.to_vec());
        map.insert("chain".into(), strings(&self.chain));
        map.insert("cmd".into(), self.cmd.clone().into());
        map.insert("dsid".into(), self.dsid.clone().into());
        if let Some(code) = self.exit {
            map.insert("exit".into(), code.into());
        }
        map.insert("extra_inputs".into(), strings(&self.extra_inputs));
        map.insert("inputs".into(), strings(&self.inputs));
        map.insert("outputs".into(), strings(&self.outputs));
        map.insert("pwd".into(), self.pwd.clone().into());
        if let Some(id) = self.slurm_job_id {
            map.insert("slurm_job_id".into(), id.into());
        }
        if let Some(s) = &self.slurm_outputs {
            map.insert("slurm_outputs".into(), strings(s));
        }
        for (k, v) in &self.extra {
            map.insert(k.clone(), v.clone());
        }
        Value::Object(map)
    }

    fn from_value(value: Value) -> Result<Self, RecordError> {
        let Value::Object(mut map) = value else {
            return Err(RecordError::MalformedRecord("record is not a JSON object".into()));
        };
        fn take_string(map: &mut Map<String, Value>, key: &str) -> Result<String, RecordError> {
            match map.remove(key) {
                Some(Value::String(s)) => Ok(s),
                Some(other) => Err(RecordError::MalformedRecord(format!(
                    "`{key}` must be a string, got {other}"
                ))),
                None => Err(RecordError::MalformedRecord(format!("missing `{key}`"))),
            }
        }
        fn take_list(
            map: &mut Map<String, Value>,
            key: &str,
        ) -> Result<Option<Vec<String>>, RecordError> {
            match map.remove(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::Array(items)) => items
                    .into_iter()
                    .map(|v| match v {
                        Value::String(s) => Ok(s),
                        other => Err(RecordError::MalformedRecord(format!(
                            "`{key}` entries must be strings, got {other}"
                        ))),
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map(Some),
                Some(other) => Err(RecordError::MalformedRecord(format!(
                    "`{key}` must be a list, got {other}"
                ))),
            }
        }
        let cmd = take_string(&mut map, "cmd")?;
        let dsid = take_string(&mut map, "dsid")?;
        let pwd = take_string(&mut map, "pwd")?;
        let chain = take_list(&mut map, "chain")?.unwrap_or_default();
        let extra_inputs = take_list(&mut map, "extra_inputs")?.unwrap_or_default();
        let inputs = take_list(&mut map, "inputs")?.unwrap_or_default();
        let outputs = take_list(&mut map, "outputs")?.unwrap_or_default();
        let slurm_outputs = take_list(&mut map, "slurm_outputs")?;
        let exit = match map.remove("exit") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_i64().ok_or_else(|| {
                RecordError::MalformedRecord(format!("`exit` must be an integer, got {v}"))
            })?),
        };
        let slurm_job_id = match map.remove("slurm_job_id") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_u64().ok_or_else(|| {
                RecordError::MalformedRecord(format!(
                    "`slurm_job_id` must be a non-negative integer, got {v}"
                ))
            })?),
        };
        Ok(ReproRecord {
            chain,
            cmd,
            dsid,
            exit,
            extra_inputs,
            inputs,
            outputs,
            pwd,
            slurm_job_id,
            slurm_outputs,
            extra: map.into_iter().collect(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, RecordError> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| RecordError::MalformedRecord(format!("invalid JSON: {e}")))?;
        Self::from_value(value)
    }

    /// JSON body with sorted keys and one-space indentation, no trailing newline.
    pub fn to_json(&self) -> String {
        to_pretty_json(&self.to_value())
    }
}

/// Serializes with sorted keys and one-space indentation.
pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let fmt = serde_json::ser::PrettyFormatter::with_indent(b" ");
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    value.serialize(&mut ser).expect("JSON values always serialize");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Headline used for scheduler job commits, e.g.
/// `[DATALAD SLURM RUN] Slurm job 11452054: Completed`.
pub fn slurm_headline(job_id: u64, status: &str) -> String {
    format!("{SLURM_HEADLINE_TAG} Slurm job {job_id}: {status}")
}

pub fn render_record(headline: &str, record: &ReproRecord) -> Result<String, RecordError> {
    render_message(headline, None, record)
}

/// Renders a commit message; a free-text `body` paragraph, when given, sits
/// between the headline and the record.
pub fn render_message(
    headline: &str,
    body: Option<&str>,
    record: &ReproRecord,
) -> Result<String, RecordError> {
    if headline.trim().is_empty() || headline.contains('\n') {
        return Err(RecordError::InvalidRecord(
            "headline must be a single non-empty line".into(),
        ));
    }
    let is_sentinel = |l: &str| l == BEGIN_SENTINEL || l == END_SENTINEL;
    if is_sentinel(headline) || body.is_some_and(|b| b.lines().any(is_sentinel)) {
        return Err(RecordError::InvalidRecord(
            "message text must not contain sentinel lines".into(),
        ));
    }
    record.validate()?;
    let mut msg = String::with_capacity(512);
    msg.push_str(headline);
    msg.push_str("\n\n");
    if let Some(body) = body.map(str::trim_end).filter(|b| !b.is_empty()) {
        msg.push_str(body);
        msg.push_str("\n\n");
    }
    msg.push_str(BEGIN_SENTINEL);
    msg.push('\n');
    msg.push_str(&record.to_json());
    msg.push('\n');
    msg.push_str(END_SENTINEL);
    msg.push('\n');
    Ok(msg)
}

/// Extracts the record from a commit message. `Ok(None)` when the message has
/// no sentinel block.
pub fn parse_record(message: &str) -> Result<Option<ReproRecord>, RecordError> {
    let lines: Vec<&str> = message.lines().collect();
    let Some(begin) = lines.iter().position(|l| l.trim_end() == BEGIN_SENTINEL) else {
        return Ok(None);
    };
    let Some(end) = lines[begin + 1..]
        .iter()
        .position(|l| l.trim_end() == END_SENTINEL)
        .map(|i| i + begin + 1)
    else {
        return Err(RecordError::MalformedRecord(
            "begin sentinel without matching end sentinel".into(),
        ));
    };
    let json = lines[begin + 1..end].join("\n");
    let value: Value = serde_json::from_str(&json)
        .map_err(|e| RecordError::MalformedRecord(format!("invalid JSON: {e}")))?;
    ReproRecord::from_value(value).map(Some)
}

/// The headline line of a message (its first line).
pub fn headline_of(message: &str) -> &str {
    message.lines().next().unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn slurm_example() -> ReproRecord {
        ReproRecord {
            chain: vec![],
            cmd: "sbatch slurm.sh".into(),
            dsid: "4928ddbc-d6fe-4fa4-bff7-25ec6a2dca88".into(),
            exit: None,
            extra_inputs: vec![],
            inputs: vec![],
            outputs: vec![
                "test_01_output_dir_18".into(),
                "log.slurm-11452054.out".into(),
                "slurm-job-11452054.env.json".into(),
            ],
            pwd: "test_01_output_dir_18".into(),
            slurm_job_id: Some(11452054),
            slurm_outputs: Some(vec![
                "log.slurm-11452054.out".into(),
                "slurm-job-11452054.env.json".into(),
            ]),
            extra: BTreeMap::new(),
        }
    }

    const SLURM_EXAMPLE_TEXT: &str = r#"[DATALAD SLURM RUN] Slurm job 11452054: Completed

=== Do not change lines below ===
{
 "chain": [],
 "cmd": "sbatch slurm.sh",
 "dsid": "4928ddbc-d6fe-4fa4-bff7-25ec6a2dca88",
 "extra_inputs": [],
 "inputs": [],
 "outputs": [
  "test_01_output_dir_18",
  "log.slurm-11452054.out",
  "slurm-job-11452054.env.json"
 ],
 "pwd": "test_01_output_dir_18",
 "slurm_job_id": 11452054,
 "slurm_outputs": [
  "log.slurm-11452054.out",
  "slurm-job-11452054.env.json"
 ]
}
^^^ Do not change lines above ^^^
"#;

    #[test]
    fn renders_scheduler_record_byte_exact() {
        let msg = render_record(&slurm_headline(11452054, "Completed"), &slurm_example()).unwrap();
        assert_eq!(msg, SLURM_EXAMPLE_TEXT);
        assert_eq!(msg.matches(BEGIN_SENTINEL).count(), 1);
        assert_eq!(msg.matches(END_SENTINEL).count(), 1);
    }

    #[test]
    fn parses_plain_run_record() {
        let text = r#"[DATALAD RUNCMD] Solve N=14 with ...
=== Do not change lines below ===
{
 "chain": [],
 "cmd": "./scripts/run.sh 14 more-arguments-here",
 "dsid": "d5f31a22-4f48-4f83-a9ff-093b1ff3bbda",
 "exit": 0,
 "extra_inputs": [],
 "inputs": [
  "data/halos/14/generate_14.data.csv.xz"
 ],
 "outputs": [
  "data/results/14/worker/report.json",
  "data/results/14/worker/result.csv.xz"
 ],
 "pwd": "."
}
^^^ Do not change lines above ^^^
"#;
        let rec = parse_record(text).unwrap().unwrap();
        assert_eq!(rec.exit, Some(0));
        assert!(!rec.is_slurm());
        assert_eq!(rec.inputs, ["data/halos/14/generate_14.data.csv.xz"]);
        let again = render_record("[DATALAD RUNCMD] Solve N=14 with ...", &rec).unwrap();
        assert_eq!(parse_record(&again).unwrap().unwrap(), rec);
    }

    #[test]
    fn minimal_record() {
        let rec = ReproRecord {
            pwd: ".".into(),
            ..Default::default()
        };
        let msg = render_record("x", &rec).unwrap();
        assert!(msg.contains("\"chain\": []"));
        assert_eq!(parse_record(&msg).unwrap().unwrap(), rec);
    }

    #[test]
    fn each_output_on_its_own_line() {
        let mut rec = slurm_example();
        rec.slurm_job_id = None;
        rec.slurm_outputs = None;
        rec.outputs = vec!["a".into(), "b".into(), "c".into()];
        let msg = render_record("h", &rec).unwrap();
        for o in ["a", "b", "c"] {
            assert!(msg.lines().any(|l| l == format!("  \"{o}\",") || l == format!("  \"{o}\"")));
        }
        assert_eq!(parse_record(&msg).unwrap().unwrap().outputs, rec.outputs);
    }

    #[test]
    fn not_a_record_and_malformed() {
        assert_eq!(parse_record("just a commit\n\nbody\n"), Ok(None));
        let bad = format!("h\n\n{BEGIN_SENTINEL}\n{{ nope\n{END_SENTINEL}\n");
        assert!(matches!(parse_record(&bad), Err(RecordError::MalformedRecord(_))));
        let unterminated = format!("h\n\n{BEGIN_SENTINEL}\n{{}}\n");
        assert!(matches!(
            parse_record(&unterminated),
            Err(RecordError::MalformedRecord(_))
        ));
    }

    #[test]
    fn unknown_keys_survive() {
        let msg = SLURM_EXAMPLE_TEXT.replace(
            " \"chain\": [],",
            " \"chain\": [],\n \"future_key\": {\"b\": 1, \"a\": [true]},",
        );
        let rec = parse_record(&msg).unwrap().unwrap();
        assert!(rec.extra.contains_key("future_key"));
        let rendered = render_record(headline_of(&msg), &rec).unwrap();
        assert!(rendered.contains("\"future_key\""));
        assert_eq!(parse_record(&rendered).unwrap().unwrap(), rec);
    }

    #[test]
    fn invariants_enforced() {
        let mut rec = slurm_example();
        rec.slurm_outputs = None;
        assert!(matches!(render_record("h", &rec), Err(RecordError::InvalidRecord(_))));
        let mut rec = slurm_example();
        rec.outputs.pop();
        assert!(matches!(render_record("h", &rec), Err(RecordError::InvalidRecord(_))));
        let mut rec = slurm_example();
        rec.pwd = "/abs".into();
        assert!(render_record("h", &rec).is_err());
        assert!(render_record("two\nlines", &slurm_example()).is_err());
        assert!(render_record(BEGIN_SENTINEL, &slurm_example()).is_err());
    }

    #[test]
    fn body_paragraph() {
        let msg = render_message("h", Some("user note"), &slurm_example()).unwrap();
        assert!(msg.starts_with("h\n\nuser note\n\n=== Do not change"));
        assert_eq!(parse_record(&msg).unwrap().unwrap(), slurm_example());
    }
}
