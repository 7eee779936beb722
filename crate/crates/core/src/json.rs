//! Pulling structured values out of chatty model output.

use serde::de::DeserializeOwned;
use serde_json::Value;

fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        // Skip an info string such as `json`.
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        match body.find("```") {
            Some(end) => {
                out.push(&body[..end]);
                rest = &body[end + 3..];
            }
            None => break,
        }
    }
    out
}

fn values_in(text: &str) -> impl Iterator<Item = Value> + '_ {
    text.char_indices()
        .filter(|(_, c)| *c == '[' || *c == '{')
        .filter_map(move |(i, _)| {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
            stream.next().and_then(Result::ok)
        })
}

/// Returns the first JSON value in `text` that deserializes as `T`.
///
/// Markdown code fences are searched first, then the raw text from every
/// `[` or `{` onwards.
pub fn find_json<T: DeserializeOwned>(text: &str) -> Option<T> {
    find_matching(text, |_| true)
}

/// Like [`find_json`], but only JSON objects qualify. Serde would otherwise
/// read a bare array positionally into a struct.
pub fn find_object<T: DeserializeOwned>(text: &str) -> Option<T> {
    find_matching(text, Value::is_object)
}

/// First JSON array whose elements are all objects and deserialize as `T`.
pub fn find_object_list<T: DeserializeOwned>(text: &str) -> Option<Vec<T>> {
    find_matching(text, |v| {
        v.as_array()
            .is_some_and(|items| items.iter().all(Value::is_object))
    })
}

fn find_matching<T: DeserializeOwned>(text: &str, accept: impl Fn(&Value) -> bool) -> Option<T> {
    let fences = fenced_blocks(text);
    fences
        .into_iter()
        .flat_map(values_in)
        .chain(values_in(text))
        .filter(|v| accept(v))
        .find_map(|v| serde_json::from_value(v).ok())
}

/// First unsigned integer appearing in `text`.
pub fn first_integer(text: &str) -> Option<u64> {
    let start = text.find(|c: char| c.is_ascii_digit())?;
    let digits: String = text[start..]
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}
