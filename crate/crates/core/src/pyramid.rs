//! Pyramid Principle prompting: build the 5W1H prompt, call the LLM, and
//! parse its JSON reply into ordered deductive sub-points.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::llm_client::{ChatRequest, LlmClient, LlmError, SamplingSettings};

/// Prompt template; `%s` marks where the question goes.
pub const PYRAMID_PROMPT_TEMPLATE: &str = include_str!("../assets/pyramid_prompt.txt");

pub const SEP_TOKEN: &str = "[SEP]";

/// Appended to the prompt when the first reply could not be parsed.
pub const CORRECTIVE_INSTRUCTION: &str =
    "Your previous reply could not be parsed. Please respond with only the JSON object.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PyramidError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("no JSON object found in response")]
    NoJson,
    #[error("missing key {0:?}")]
    MissingKey(&'static str),
    #[error("key {key:?}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("sub-points list is empty")]
    EmptySubPoints,
    #[error("5W1H list is empty")]
    EmptyElements,
    #[error("unrecognized 5W1H kind {0:?}")]
    UnknownKind(String),
    #[error("sub-point {0:?} has no non-empty segment")]
    EmptySubPoint(String),
}

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("invalid question: {0}")]
    Question(#[source] PyramidError),
    #[error("LLM call failed: {0}")]
    Llm(#[from] LlmError),
    #[error("could not parse pyramid response after {} attempts: {last_error}", .responses.len())]
    Parse {
        responses: Vec<String>,
        last_error: PyramidError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    What,
    Who,
    When,
    Where,
    Why,
    How,
}

impl Kind {
    pub const ALL: [Kind; 6] = [
        Kind::What,
        Kind::Who,
        Kind::When,
        Kind::Where,
        Kind::Why,
        Kind::How,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::What => "What",
            Kind::Who => "Who",
            Kind::When => "When",
            Kind::Where => "Where",
            Kind::Why => "Why",
            Kind::How => "How",
        }
    }

    /// Case-insensitive match on the kind name.
    pub fn parse(key: &str) -> Option<Kind> {
        Kind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(key.trim()))
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiveW1HElement {
    pub kind: Kind,
    pub question_text: String,
    pub statement: String,
}

/// One deductive sub-point and its `[SEP]`-delimited segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubPoint {
    pub raw_text: String,
    pub segments: Vec<String>,
}

impl SubPoint {
    pub fn parse(raw: impl Into<String>) -> Result<Self, PyramidError> {
        let raw_text = raw.into();
        let segments = split_segments(&raw_text)?;
        Ok(Self { raw_text, segments })
    }

    /// Segments rejoined with ` [SEP] `.
    pub fn canonical(&self) -> String {
        self.segments.join(&format!(" {SEP_TOKEN} "))
    }
}

impl fmt::Display for SubPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw_text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidAnalysis {
    pub elements: Vec<FiveW1HElement>,
    pub main_point: String,
    pub sub_points: Vec<SubPoint>,
    pub thinking: String,
}

impl PyramidAnalysis {
    /// The analysis in the key layout the prompt asks for.
    pub fn to_json(&self) -> Value {
        let elements: Vec<Value> = self
            .elements
            .iter()
            .map(|e| {
                let mut m = Map::new();
                m.insert(
                    e.kind.as_str().into(),
                    Value::String(e.question_text.clone()),
                );
                m.insert("statement".into(), Value::String(e.statement.clone()));
                Value::Object(m)
            })
            .collect();
        serde_json::json!({
            "5W1H": elements,
            "main-point": self.main_point,
            "sub-points": self.sub_points.iter().map(|s| s.raw_text.clone()).collect::<Vec<_>>(),
            "thinking": self.thinking,
        })
    }
}

/// Fills the question into the prompt template.
pub fn build_pyramid_prompt(question: &str) -> Result<String, PyramidError> {
    build_prompt_from(PYRAMID_PROMPT_TEMPLATE, question)
}

pub fn build_prompt_from(template: &str, question: &str) -> Result<String, PyramidError> {
    let question = question.trim();
    if question.is_empty() {
        return Err(PyramidError::EmptyQuestion);
    }
    // The question is dropped in at the first placeholder only, so a `%s`
    // inside the question itself is left alone.
    let (before, after) = template
        .split_once("%s")
        .expect("prompt template carries a %s placeholder");
    Ok(format!("{before}{question}{after}"))
}

/// Splits on the literal `[SEP]`, trimming each fragment and dropping empty
/// ones.
pub fn split_segments(text: &str) -> Result<Vec<String>, PyramidError> {
    let segments: Vec<String> = text
        .split(SEP_TOKEN)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if segments.is_empty() {
        Err(PyramidError::EmptySubPoint(text.to_string()))
    } else {
        Ok(segments)
    }
}

/// Returns the first complete JSON object embedded in `raw`.
pub fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

fn string_field(map: &Map<String, Value>, key: &'static str) -> Result<String, PyramidError> {
    match map.get(key) {
        None => Err(PyramidError::MissingKey(key)),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(PyramidError::BadValue {
            key: key.into(),
            reason: format!("expected a string, found {other}"),
        }),
    }
}

fn parse_element(value: &Value) -> Result<FiveW1HElement, PyramidError> {
    let obj = value.as_object().ok_or_else(|| PyramidError::BadValue {
        key: "5W1H".into(),
        reason: format!("entry is not an object: {value}"),
    })?;
    let statement = match obj.get("statement") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        Some(Value::String(_)) => {
            return Err(PyramidError::BadValue {
                key: "statement".into(),
                reason: "statement is empty".into(),
            })
        }
        Some(other) => {
            return Err(PyramidError::BadValue {
                key: "statement".into(),
                reason: format!("expected a string, found {other}"),
            })
        }
        None => return Err(PyramidError::MissingKey("statement")),
    };
    let mut others = obj.iter().filter(|(k, _)| k.as_str() != "statement");
    let (key, question) = others.next().ok_or_else(|| PyramidError::BadValue {
        key: "5W1H".into(),
        reason: "entry has no 5W1H kind key".into(),
    })?;
    if let Some((extra, _)) = others.next() {
        return Err(PyramidError::UnknownKind(extra.clone()));
    }
    let kind = Kind::parse(key).ok_or_else(|| PyramidError::UnknownKind(key.clone()))?;
    let question_text = match question {
        Value::String(s) => s.clone(),
        other => {
            return Err(PyramidError::BadValue {
                key: key.clone(),
                reason: format!("expected a string, found {other}"),
            })
        }
    };
    Ok(FiveW1HElement {
        kind,
        question_text,
        statement,
    })
}

/// Parses an LLM reply. Tolerates prose and code fences around the JSON.
pub fn parse_pyramid_response(raw: &str) -> Result<PyramidAnalysis, PyramidError> {
    let map = extract_json_object(raw).ok_or(PyramidError::NoJson)?;

    let sub_points = match map.get("sub-points") {
        None => return Err(PyramidError::MissingKey("sub-points")),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => SubPoint::parse(s.as_str()),
                other => Err(PyramidError::BadValue {
                    key: "sub-points".into(),
                    reason: format!("entry is not a string: {other}"),
                }),
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(other) => {
            return Err(PyramidError::BadValue {
                key: "sub-points".into(),
                reason: format!("expected an array, found {other}"),
            })
        }
    };
    if sub_points.is_empty() {
        return Err(PyramidError::EmptySubPoints);
    }

    let elements = match map.get("5W1H") {
        None => return Err(PyramidError::MissingKey("5W1H")),
        Some(Value::Array(items)) => items
            .iter()
            .map(parse_element)
            .collect::<Result<Vec<_>, _>>()?,
        Some(other) => {
            return Err(PyramidError::BadValue {
                key: "5W1H".into(),
                reason: format!("expected an array, found {other}"),
            })
        }
    };
    if elements.is_empty() {
        return Err(PyramidError::EmptyElements);
    }

    let main_point = string_field(&map, "main-point")?;
    let thinking = match map.get("thinking") {
        None | Some(Value::Null) => String::new(),
        Some(_) => string_field(&map, "thinking")?,
    };

    Ok(PyramidAnalysis {
        elements,
        main_point,
        sub_points,
        thinking,
    })
}

/// One prompt/response exchange made during alignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub analysis: PyramidAnalysis,
    pub exchanges: Vec<Exchange>,
}

impl Alignment {
    pub fn retried(&self) -> bool {
        self.exchanges.len() > 1
    }
}

/// Prompts the LLM and parses its reply, retrying once with a corrective
/// instruction when the first reply does not parse.
pub fn align<C: LlmClient + ?Sized>(
    question: &str,
    llm: &C,
    settings: &SamplingSettings,
) -> Result<Alignment, AlignError> {
    let prompt = build_pyramid_prompt(question).map_err(AlignError::Question)?;
    let mut exchanges = Vec::with_capacity(2);
    let mut last_error = PyramidError::NoJson;

    for attempt in 0..2 {
        let user_text = if attempt == 0 {
            prompt.clone()
        } else {
            format!("{prompt}\n\n{CORRECTIVE_INSTRUCTION}")
        };
        let request = ChatRequest::new(user_text.clone()).with_settings(settings);
        let response = llm.complete(&request)?;
        exchanges.push(Exchange {
            prompt: user_text,
            response: response.text.clone(),
        });
        match parse_pyramid_response(&response.text) {
            Ok(analysis) => {
                return Ok(Alignment {
                    analysis,
                    exchanges,
                })
            }
            Err(e) => {
                log::warn!(
                    "pyramid response unparseable (attempt {}): {e}",
                    attempt + 1
                );
                last_error = e;
            }
        }
    }
    Err(AlignError::Parse {
        responses: exchanges.into_iter().map(|x| x.response).collect(),
        last_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_client::{ScriptRule, ScriptedLlm};
    use proptest::prelude::*;

    const CASE1_JSON: &str = r#"```json
{"5W1H": [
  {"What": "Identify the country that shares a border only with Spain.",
   "statement": "The country that shares a border only with Spain is Andorra."},
  {"Where": "Determine the capital city of Andorra.",
   "statement": "The capital city of Andorra is Andorra la Vella."}
],
"main-point": "The capital city of the country that only shares a border with Spain is Andorra la Vella.",
"sub-points": ["The country that shares a border only with Spain is Andorra",
               "The capital city of Andorra is Andorra la Vella"],
"thinking": "By identifying the country that shares a border only with Spain and confirming its capital, we establish that the capital city is Andorra la Vella."}
```"#;

    const CASE2_JSON: &str = r#"{"5W1H": [
  {"What": "Identify the original artist of the song \"It Ain't Me Babe\".",
   "statement": "Bob Dylan is the original artist of the song \"It Ain't Me Babe\"."},
  {"When": "Determine the release date of *It Ain't Me Babe* by Bob Dylan.",
   "statement": "Bob Dylan released \"It Ain't Me Babe\" in 1964."},
  {"Who": "Identify who covered \"It Ain't Me Babe\" after Bob Dylan.",
   "statement": "Johnny Cash covered \"It Ain't Me Babe\" in 1965."}
],
"main-point": "Bob Dylan sang \"It Ain't Me Babe\" first, before Johnny Cash covered it.",
"sub-points": ["Bob Dylan is the original artist of the song \"It Ain't Me Babe\".",
               "Bob Dylan released \"It Ain't Me Babe\" in 1964, while Johnny Cash covered it in 1965."],
"thinking": "By identifying the original artist and the timeline of releases, we confirm that Bob Dylan was the first to sing *It Ain't Me Babe* before Johnny Cash."}"#;

    #[test]
    fn prompt_contains_required_parts() {
        let p = build_pyramid_prompt("Q?").unwrap();
        assert!(p.contains(
            r#"Format your response in JSON as follows: {"5W1H": [], "main-point": "", "sub-points": [], "thinking": ""}"#
        ));
        assert_eq!(p.matches("Q?").count(), 1);
        assert!(p.contains("the question: Q?."));
        assert!(p.contains("Example for knowing the entity:"));
        assert!(p.contains("Example for not knowing the entities:"));
        assert!(p.contains("you can use the entity type from the Stanford Named Entity Recognizer"));
        assert!(p.contains("separate them with a [SEP] token"));
        assert!(!p.contains("%s"));
    }

    #[test]
    fn prompt_rejects_empty_question() {
        assert_eq!(build_pyramid_prompt("  "), Err(PyramidError::EmptyQuestion));
    }

    #[test]
    fn question_with_placeholder_is_kept() {
        let p = build_pyramid_prompt("what is %s?").unwrap();
        assert!(p.contains("what is %s?"));
    }

    #[test]
    fn segments() {
        assert_eq!(
            split_segments("A is X [SEP] B is Y").unwrap(),
            vec!["A is X", "B is Y"]
        );
        assert_eq!(split_segments("Single fact").unwrap(), vec!["Single fact"]);
        assert_eq!(split_segments(" [SEP] B ").unwrap(), vec!["B"]);
        assert!(split_segments(" [SEP]  [SEP] ").is_err());
    }

    #[test]
    fn parses_case1_in_order() {
        let a = parse_pyramid_response(CASE1_JSON).unwrap();
        assert_eq!(a.elements.len(), 2);
        assert_eq!(a.elements[0].kind, Kind::What);
        assert_eq!(a.elements[1].kind, Kind::Where);
        let subs: Vec<&str> = a.sub_points.iter().map(|s| s.raw_text.as_str()).collect();
        assert_eq!(
            subs,
            vec![
                "The country that shares a border only with Spain is Andorra",
                "The capital city of Andorra is Andorra la Vella"
            ]
        );
    }

    #[test]
    fn parses_prose_wrapped() {
        let raw = format!("Sure! Here it is:\n{CASE2_JSON}\nHope this helps.");
        let a = parse_pyramid_response(&raw).unwrap();
        assert_eq!(a.elements.len(), 3);
        assert_eq!(a.sub_points.len(), 2);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(
            parse_pyramid_response("not json at all"),
            Err(PyramidError::NoJson)
        );
        assert_eq!(
            parse_pyramid_response(r#"{"5W1H": [], "main-point": ""}"#),
            Err(PyramidError::MissingKey("sub-points"))
        );
        assert_eq!(
            parse_pyramid_response(
                r#"{"5W1H": [{"What": "x", "statement": "y"}], "main-point": "", "sub-points": []}"#
            ),
            Err(PyramidError::EmptySubPoints)
        );
        assert_eq!(
            parse_pyramid_response(
                r#"{"5W1H": [{"Whom": "x", "statement": "y"}], "main-point": "m", "sub-points": ["a"]}"#
            ),
            Err(PyramidError::UnknownKind("Whom".into()))
        );
        assert!(parse_pyramid_response(
            r#"{"5W1H": [{"What": "x"}], "main-point": "m", "sub-points": ["a"]}"#
        )
        .is_err());
        assert!(parse_pyramid_response(
            r#"{"5W1H": [{"What": "x", "statement": "y"}], "sub-points": ["a"]}"#
        )
        .is_err());
        assert!(parse_pyramid_response(r#"{"5W1H": [{"What": "x", "statement": "y"}], "main-point": "m", "sub-points": [" [SEP] "]}"#).is_err());
    }

    #[test]
    fn duplicate_kinds_preserved() {
        let raw = r#"{"5W1H": [{"What": "a", "statement": "s1"}, {"What": "b", "statement": "s2"}],
                      "main-point": "m", "sub-points": ["x"]}"#;
        let a = parse_pyramid_response(raw).unwrap();
        assert_eq!(a.elements.len(), 2);
        assert_eq!(a.elements[1].question_text, "b");
    }

    #[test]
    fn align_case2() {
        let llm =
            ScriptedLlm::from_rules(vec![ScriptRule::new(&["Pyramid Principle"], CASE2_JSON)]);
        let a = align(
            "Who sang It Ain't Me Babe first, Johnny Cash or Bob Dylan?",
            &llm,
            &SamplingSettings::default(),
        )
        .unwrap();
        assert_eq!(
            a.analysis.main_point,
            "Bob Dylan sang \"It Ain't Me Babe\" first, before Johnny Cash covered it."
        );
        assert!(!a.retried());
        assert!(a.exchanges[0].prompt.contains("It Ain't Me Babe"));
    }

    #[test]
    fn align_retries_once() {
        let llm = ScriptedLlm::sequence(["garbage", CASE1_JSON]);
        let a = align("q?", &llm, &SamplingSettings::default()).unwrap();
        assert!(a.retried());
        assert!(a.exchanges[1]
            .prompt
            .contains("respond with only the JSON object"));
        assert_eq!(a.analysis.sub_points.len(), 2);
    }

    #[test]
    fn align_fails_after_two_bad_replies() {
        let llm = ScriptedLlm::sequence(["garbage one", "garbage two", CASE1_JSON]);
        match align("q?", &llm, &SamplingSettings::default()) {
            Err(AlignError::Parse { responses, .. }) => {
                assert_eq!(responses, vec!["garbage one", "garbage two"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn text() -> impl Strategy<Value = String> {
        "[A-Za-z0-9 ,.'\"]{1,40}".prop_filter("non-blank", |s| !s.trim().is_empty())
    }

    fn sub_point() -> impl Strategy<Value = SubPoint> {
        prop::collection::vec(text(), 1..4).prop_map(|parts| {
            let raw = parts.join(" [SEP] ");
            SubPoint::parse(raw).unwrap()
        })
    }

    fn analysis() -> impl Strategy<Value = PyramidAnalysis> {
        (
            prop::collection::vec(
                (prop::sample::select(Kind::ALL.to_vec()), text(), text()),
                1..6,
            ),
            text(),
            prop::collection::vec(sub_point(), 1..6),
            text(),
        )
            .prop_map(|(els, main_point, sub_points, thinking)| PyramidAnalysis {
                elements: els
                    .into_iter()
                    .map(|(kind, q, s)| FiveW1HElement {
                        kind,
                        question_text: q,
                        statement: s.trim().to_string(),
                    })
                    .collect(),
                main_point,
                sub_points,
                thinking,
            })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(a in analysis()) {
            let raw = serde_json::to_string_pretty(&a.to_json()).unwrap();
            prop_assert_eq!(parse_pyramid_response(&raw).unwrap(), a);
        }

        #[test]
        fn segments_non_empty(parts in prop::collection::vec("[ a-z]{0,8}", 1..5)) {
            let joined = parts.join("[SEP]");
            let has_content = parts.iter().any(|p| !p.trim().is_empty());
            prop_assert_eq!(split_segments(&joined).is_ok(), has_content);
        }
    }
}
