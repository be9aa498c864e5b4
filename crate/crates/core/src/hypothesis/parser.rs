//! Tolerant scanner for the Python-literal dictionaries LLMs return.
//!
//! Accepts single, double and triple quoted strings, bare identifiers and
//! numbers as keys, trailing commas, `#` comments, code fences and any prose
//! around the two dictionaries. Nesting deeper than dict -> list -> scalar is
//! rejected.

use super::{Hypothesis, HypothesisError, HypothesisSet};

const MAX_DEPTH: usize = 3;

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Str(String),
    Atom(String),
    List(Vec<Value>),
    Dict(Vec<(Value, Value)>),
}

impl Value {
    fn as_text(&self) -> Option<&str> {
        match self {
            Value::Str(s) | Value::Atom(s) => Some(s),
            _ => None,
        }
    }
}

struct Scanner<'a> {
    src: &'a str,
    pos: usize,
}

type ScanResult<T> = Result<T, String>;

impl<'a> Scanner<'a> {
    fn new(src: &'a str, pos: usize) -> Self {
        Self { src, pos }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_trivia(&mut self) {
        loop {
            let rest = self.rest();
            let trimmed = rest.trim_start();
            self.pos += rest.len() - trimmed.len();
            if trimmed.starts_with('#') {
                let line_end = trimmed.find('\n').unwrap_or(trimmed.len());
                self.pos += line_end;
            } else if trimmed.starts_with("```") {
                // stray fence inside the block
                let line_end = trimmed.find('\n').unwrap_or(trimmed.len());
                self.pos += line_end;
            } else {
                break;
            }
        }
    }

    fn value(&mut self, depth: usize) -> ScanResult<Value> {
        if depth > MAX_DEPTH {
            return Err(format!("nesting deeper than {MAX_DEPTH} at byte {}", self.pos));
        }
        self.skip_trivia();
        match self.peek() {
            Some('{') => self.dict(depth),
            Some('[') | Some('(') => self.list(depth),
            Some('\'') | Some('"') => {
                let mut s = self.string()?;
                // implicit concatenation of adjacent literals
                loop {
                    let save = self.pos;
                    self.skip_trivia();
                    if matches!(self.peek(), Some('\'') | Some('"')) {
                        s.push_str(&self.string()?);
                    } else {
                        self.pos = save;
                        break;
                    }
                }
                Ok(Value::Str(s))
            }
            Some(_) => self.atom(),
            None => Err("unexpected end of input".into()),
        }
    }

    fn dict(&mut self, depth: usize) -> ScanResult<Value> {
        self.bump();
        let mut entries = Vec::new();
        loop {
            self.skip_trivia();
            match self.peek() {
                Some('}') => {
                    self.bump();
                    return Ok(Value::Dict(entries));
                }
                None => return Err("unterminated dict".into()),
                _ => {}
            }
            let key = self.value(depth + 1)?;
            self.skip_trivia();
            if self.bump() != Some(':') {
                return Err(format!("expected ':' after dict key at byte {}", self.pos));
            }
            let value = self.value(depth + 1)?;
            entries.push((key, value));
            self.skip_trivia();
            match self.peek() {
                Some(',') => {
                    self.bump();
                }
                Some('}') => {}
                Some(c) => return Err(format!("expected ',' or '}}' but found {c:?} at byte {}", self.pos)),
                None => return Err("unterminated dict".into()),
            }
        }
    }

    fn list(&mut self, depth: usize) -> ScanResult<Value> {
        let close = if self.bump() == Some('(') { ')' } else { ']' };
        let mut items = Vec::new();
        loop {
            self.skip_trivia();
            match self.peek() {
                Some(c) if c == close => {
                    self.bump();
                    return Ok(Value::List(items));
                }
                None => return Err("unterminated list".into()),
                _ => {}
            }
            items.push(self.value(depth + 1)?);
            self.skip_trivia();
            match self.peek() {
                Some(',') => {
                    self.bump();
                }
                Some(c) if c == close => {}
                Some(c) => return Err(format!("expected ',' or {close:?} but found {c:?} at byte {}", self.pos)),
                None => return Err("unterminated list".into()),
            }
        }
    }

    fn string(&mut self) -> ScanResult<String> {
        let quote = self.bump().expect("caller checked quote");
        let triple: String = std::iter::repeat_n(quote, 3).collect();
        let is_triple = self.rest().starts_with(&triple[..2]);
        if is_triple {
            self.pos += 2;
        }
        let mut out = String::new();
        loop {
            if is_triple && self.rest().starts_with(&triple) {
                self.pos += 3;
                return Ok(out);
            }
            match self.bump() {
                None => return Err("unterminated string".into()),
                Some(c) if c == quote && !is_triple => return Ok(out),
                Some('\n') if !is_triple => return Err("newline inside string literal".into()),
                Some('\\') => match self.bump() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some('r') => out.push('\r'),
                    Some('\\') => out.push('\\'),
                    Some('\'') => out.push('\''),
                    Some('"') => out.push('"'),
                    Some('\n') => {}
                    Some(other) => {
                        out.push('\\');
                        out.push(other);
                    }
                    None => return Err("unterminated string".into()),
                },
                Some(c) => out.push(c),
            }
        }
    }

    fn atom(&mut self) -> ScanResult<Value> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_alphanumeric() || matches!(c, '_' | '-' | '+' | '.') {
                self.bump();
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(format!("unexpected character {:?} at byte {}", self.peek().unwrap_or(' '), start));
        }
        Ok(Value::Atom(self.src[start..self.pos].to_string()))
    }
}

/// Finds `name = {...}`, `name: {...}` or `"name": {...}` and parses the dict.
/// Mentions of the name not followed by a dict (e.g. in prose) are skipped.
fn find_dict(text: &str, name: &str) -> Option<ScanResult<Vec<(Value, Value)>>> {
    let mut from = 0;
    let mut last_err = None;
    while let Some(off) = text[from..].find(name) {
        let at = from + off;
        from = at + name.len();
        let preceded_by_ident = text[..at]
            .chars()
            .next_back()
            .is_some_and(|c| c.is_alphanumeric() || c == '_');
        if preceded_by_ident {
            continue;
        }
        let mut sc = Scanner::new(text, from);
        if matches!(sc.peek(), Some('\'') | Some('"')) {
            sc.bump();
        }
        sc.skip_trivia();
        if !matches!(sc.bump(), Some('=') | Some(':')) {
            continue;
        }
        sc.skip_trivia();
        if sc.peek() != Some('{') {
            continue;
        }
        match sc.value(1) {
            Ok(Value::Dict(entries)) => return Some(Ok(entries)),
            Ok(_) => unreachable!("'{{' always yields a dict"),
            Err(e) => last_err = Some(e),
        }
    }
    last_err.map(Err)
}

fn parse_error(message: impl Into<String>, raw: &str) -> HypothesisError {
    HypothesisError::Parse {
        message: message.into(),
        raw: raw.to_string(),
    }
}

fn statements(text: &str) -> Result<Vec<(String, String)>, HypothesisError> {
    let entries = match find_dict(text, "hypothesis_dict") {
        None => return Err(parse_error("no hypothesis_dict found", text)),
        Some(Err(e)) => return Err(parse_error(format!("malformed hypothesis_dict: {e}"), text)),
        Some(Ok(entries)) => entries,
    };
    let mut out: Vec<(String, String)> = Vec::with_capacity(entries.len());
    for (k, v) in entries {
        let id = k
            .as_text()
            .ok_or_else(|| parse_error("hypothesis_dict key is not a string", text))?
            .trim()
            .to_string();
        let statement = v
            .as_text()
            .ok_or_else(|| parse_error(format!("statement for {id} is not a string"), text))?
            .trim()
            .to_string();
        if out.iter().any(|(seen, _)| *seen == id) {
            return Err(parse_error(format!("duplicate hypothesis id {id}"), text));
        }
        out.push((id, statement));
    }
    if out.is_empty() {
        return Err(parse_error("hypothesis_dict is empty", text));
    }
    Ok(out)
}

/// Extracts only `hypothesis_dict` (the metadata prompt asks for nothing else).
pub fn parse_hypothesis_statements(text: &str) -> Result<Vec<(String, String)>, HypothesisError> {
    statements(text)
}

fn attribute_from_statement(statement: &str) -> Option<String> {
    let lower = statement.to_lowercase();
    let at = lower.rfind("biased toward")?;
    let tail = statement[at + "biased toward".len()..].trim_start_matches('s').trim();
    let tail = tail.trim_end_matches(['.', '!']).trim();
    (!tail.is_empty()).then(|| tail.to_string())
}

pub fn parse_llm_response(text: &str) -> Result<HypothesisSet, HypothesisError> {
    let stmts = statements(text)?;
    let prompts = match find_dict(text, "prompt_dict") {
        None => return Err(HypothesisError::Pairing("no prompt_dict found".into())),
        Some(Err(e)) => return Err(parse_error(format!("malformed prompt_dict: {e}"), text)),
        Some(Ok(entries)) => entries,
    };
    let mut keyed: Vec<(String, String, Vec<String>)> = Vec::with_capacity(prompts.len());
    for (k, v) in prompts {
        let key = k
            .as_text()
            .ok_or_else(|| parse_error("prompt_dict key is not a string", text))?
            .trim()
            .to_string();
        let (id, attribute) = match key.split_once('_') {
            Some((id, attr)) => (id.to_string(), attr.to_string()),
            None => (key.clone(), String::new()),
        };
        let sentences = match v {
            Value::List(items) => items
                .iter()
                .map(|i| i.as_text().map(|s| s.trim().to_string()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| parse_error(format!("prompts for {key} must be strings"), text))?,
            other => vec![other
                .as_text()
                .ok_or_else(|| parse_error(format!("prompts for {key} must be a list"), text))?
                .trim()
                .to_string()],
        };
        if keyed.iter().any(|(seen, _, _)| *seen == id) {
            return Err(HypothesisError::Pairing(format!("{id} has more than one prompt list")));
        }
        keyed.push((id, attribute, sentences));
    }

    let mut hypotheses = Vec::with_capacity(stmts.len());
    for (id, statement) in stmts {
        let pos = keyed
            .iter()
            .position(|(k, _, _)| *k == id)
            .ok_or_else(|| HypothesisError::Pairing(format!("{id} has no prompts in prompt_dict")))?;
        let (_, attribute, test_sentences) = keyed.remove(pos);
        if test_sentences.iter().all(|s| s.is_empty()) {
            return Err(HypothesisError::Pairing(format!("{id} has an empty prompt list")));
        }
        let attribute = if attribute.is_empty() {
            attribute_from_statement(&statement).unwrap_or_else(|| id.clone())
        } else {
            attribute
        };
        hypotheses.push(Hypothesis {
            id,
            attribute,
            statement,
            test_sentences: test_sentences.into_iter().filter(|s| !s.is_empty()).collect(),
        });
    }
    if let Some((id, _, _)) = keyed.first() {
        return Err(HypothesisError::Pairing(format!(
            "prompt_dict entry {id} has no matching hypothesis"
        )));
    }
    Ok(HypothesisSet {
        class_label: 0,
        raw_response: text.to_string(),
        hypotheses,
    })
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

/// Canonical response text for a set, in the same layout the prompt requests.
pub fn render_response(set: &HypothesisSet) -> String {
    let mut out = String::from("hypothesis_dict = {\n");
    for h in &set.hypotheses {
        out.push_str(&format!("    {}: {},\n", quote(&h.id), quote(&h.statement)));
    }
    out.push_str("}\n\nprompt_dict = {\n");
    for h in &set.hypotheses {
        let list = h.test_sentences.iter().map(|s| quote(s)).collect::<Vec<_>>().join(", ");
        out.push_str(&format!("    {}: [{list}],\n", quote(&format!("{}_{}", h.id, h.attribute))));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CLEAN: &str = r#"hypothesis_dict = {
    'H1': 'The classifier is making mistake as it is biased toward water backgrounds',
    'H2': 'The classifier is making mistake as it is biased toward boats'
}
prompt_dict = {
    'H1_water': ['a bird over water', 'a bird near a lake'],
    'H2_boat': ['a bird beside a boat']
}"#;

    #[test]
    fn parses_clean_template() {
        let set = parse_llm_response(CLEAN).unwrap();
        assert_eq!(set.hypotheses.len(), 2);
        assert_eq!(set.hypotheses[0].id, "H1");
        assert_eq!(set.hypotheses[0].attribute, "water");
        assert_eq!(set.hypotheses[0].test_sentences, vec!["a bird over water", "a bird near a lake"]);
        assert_eq!(set.hypotheses[1].attribute, "boat");
        assert_eq!(set.raw_response, CLEAN);
    }

    #[test]
    fn code_fences_do_not_change_the_result() {
        let fenced = format!("Here you go:\n```python\n{CLEAN}\n```\nThanks.");
        let a = parse_llm_response(CLEAN).unwrap();
        let b = parse_llm_response(&fenced).unwrap();
        assert_eq!(a.hypotheses, b.hypotheses);
    }

    #[test]
    fn pairing_mismatch() {
        let text = "hypothesis_dict = {'H1': 'a', 'H2': 'b'}\nprompt_dict = {'H1_x': ['p']}";
        assert!(matches!(parse_llm_response(text), Err(HypothesisError::Pairing(_))));
        let text = "hypothesis_dict = {'H1': 'a'}\nprompt_dict = {'H1_x': ['p'], 'H3_y': ['q']}";
        assert!(matches!(parse_llm_response(text), Err(HypothesisError::Pairing(_))));
    }

    #[test]
    fn missing_hypothesis_dict_is_a_parse_error() {
        match parse_llm_response("I cannot help with that.") {
            Err(HypothesisError::Parse { raw, .. }) => assert_eq!(raw, "I cannot help with that."),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn prose_mentions_are_skipped() {
        let text = format!("I will give hypothesis_dict and prompt_dict below.\n{CLEAN}\nhypothesis_dict\nprompt_dict");
        assert_eq!(parse_llm_response(&text).unwrap().hypotheses.len(), 2);
    }

    #[test]
    fn json_style_and_nested_object() {
        let text = r#"{"hypothesis_dict": {"H1": "biased toward snow",}, "prompt_dict": {"H1_snow": ["a snowy field",],},}"#;
        let set = parse_llm_response(text).unwrap();
        assert_eq!(set.hypotheses[0].attribute, "snow");
        assert_eq!(set.hypotheses[0].test_sentences, vec!["a snowy field"]);
    }

    #[test]
    fn escapes_and_attribute_fallback() {
        let text = "hypothesis_dict = {'H1': 'The classifier is making mistake as it is biased toward the bird\\'s perch.'}\nprompt_dict = {'H1': ['it\\'s a perch']}";
        let set = parse_llm_response(text).unwrap();
        assert_eq!(set.hypotheses[0].attribute, "the bird's perch");
        assert_eq!(set.hypotheses[0].test_sentences[0], "it's a perch");
    }

    #[test]
    fn depth_limit() {
        let text = "hypothesis_dict = {'H1': 'a'}\nprompt_dict = {'H1_x': [['p', ['q']]]}";
        assert!(matches!(parse_llm_response(text), Err(HypothesisError::Parse { .. })));
    }

    #[test]
    fn statements_only() {
        let text = "hypothesis_dict = {\n 'H1': 'biased toward implants',\n}";
        assert_eq!(
            parse_hypothesis_statements(text).unwrap(),
            vec![("H1".to_string(), "biased toward implants".to_string())]
        );
        assert!(matches!(parse_llm_response(text), Err(HypothesisError::Pairing(_))));
    }

    fn arb_set() -> impl Strategy<Value = HypothesisSet> {
        let text = "[ -~\\n\\t'\"\\\\é]{1,40}";
        let hyp = (text, "[a-zA-Z0-9 _'\"]{1,12}", prop::collection::vec(text, 1..6));
        prop::collection::vec(hyp, 1..5).prop_map(|hs| HypothesisSet {
            class_label: 0,
            raw_response: String::new(),
            hypotheses: hs
                .into_iter()
                .enumerate()
                .map(|(i, (statement, attribute, test_sentences))| Hypothesis {
                    id: format!("H{}", i + 1),
                    attribute: attribute.trim().to_string(),
                    statement: statement.trim().to_string(),
                    test_sentences: test_sentences.into_iter().map(|s| s.trim().to_string()).collect(),
                })
                .filter(|h| {
                    !h.attribute.is_empty() && !h.statement.is_empty() && h.test_sentences.iter().all(|s| !s.is_empty())
                })
                .collect(),
        })
        .prop_filter("at least one hypothesis", |s| !s.hypotheses.is_empty())
    }

    proptest! {
        #[test]
        fn render_then_parse_round_trips(set in arb_set()) {
            let text = render_response(&set);
            let parsed = parse_llm_response(&text).unwrap();
            prop_assert_eq!(parsed.hypotheses, set.hypotheses);
        }
    }
}
