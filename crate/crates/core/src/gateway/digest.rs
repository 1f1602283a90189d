//! Content digests for transcript keys.
//!
//! A request is reduced to a JSON value, serialized with sorted object keys
//! and no insignificant whitespace, and hashed with SHA-256. Any two
//! serializations of the same request (field order, spacing) therefore share
//! a digest.

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::ChatRequest;

/// Digest of a chat request.
pub fn chat_digest(req: &ChatRequest) -> String {
    digest_value(&chat_value(req))
}

/// Digest of an embedding request for `text`.
pub fn embed_digest(text: &str) -> String {
    digest_value(&json!({ "kind": "embed", "text": text }))
}

/// Digest of an already-serialized request document. The document must be
/// the JSON form of a chat request (`messages`, `temperature`, `model_tag`)
/// or of an embed request (`kind: "embed"`, `text`).
pub fn digest_json(document: &str) -> Result<String, serde_json::Error> {
    let value: Value = serde_json::from_str(document)?;
    if value.get("kind").and_then(Value::as_str) == Some("embed") {
        return Ok(digest_value(&value));
    }
    let req: ChatRequest = serde_json::from_value(value)?;
    Ok(chat_digest(&req))
}

fn chat_value(req: &ChatRequest) -> Value {
    json!({
        "kind": "chat",
        "messages": req.messages,
        "model_tag": req.model_tag,
        "temperature": req.temperature,
    })
}

fn digest_value(value: &Value) -> String {
    let mut canonical = String::new();
    write_canonical(value, &mut canonical);
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}
