//! Response grammar: fenced blocks whose info string names the block
//! (`action <kind>`, `undo <kind>`, `testbed <kind>`, `call`) and whose
//! body is a JSON object. Everything outside blocks is ignored; anything
//! malformed inside one is an error.

use serde_json::Value;

use super::{FunctionCall, TestBed};
use crate::action::{ActionBody, ActionSpec, Kind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub tag: String,
    pub arg: Option<String>,
    pub body: String,
}

pub fn blocks(text: &str) -> Result<Vec<Block>, String> {
    let mut out = Vec::new();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        let Some(info) = line.trim_start().strip_prefix("```") else { continue };
        let mut words = info.split_whitespace();
        let Some(tag) = words.next().map(str::to_owned) else {
            // Untagged fence: skip to its end.
            for l in lines.by_ref() {
                if l.trim_start().starts_with("```") {
                    break;
                }
            }
            continue;
        };
        let arg = words.next().map(str::to_owned);
        let mut body = String::new();
        let mut closed = false;
        for l in lines.by_ref() {
            if l.trim_start().starts_with("```") {
                closed = true;
                break;
            }
            body.push_str(l);
            body.push('\n');
        }
        if !closed {
            return Err(format!("unterminated `{tag}` block"));
        }
        out.push(Block { tag, arg, body });
    }
    Ok(out)
}

fn object(block: &Block) -> Result<serde_json::Map<String, Value>, String> {
    match serde_json::from_str::<Value>(&block.body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(format!("`{}` block body is not a JSON object", block.tag)),
        Err(e) => Err(format!("`{}` block body is not valid JSON: {e}", block.tag)),
    }
}

fn action_from(block: &Block, kind: Kind) -> Result<ActionSpec, String> {
    let declared = block.arg.as_deref().ok_or_else(|| format!("`{}` block lacks a kind", block.tag))?;
    if Kind::parse(declared) != Some(kind) {
        return Err(format!("`{} {declared}` block in a {} request", block.tag, kind.as_str()));
    }
    let mut obj = object(block)?;
    obj.insert("kind".into(), Value::String(kind.as_str().into()));
    let mut spec: ActionSpec = serde_json::from_value(Value::Object(obj)).map_err(|e| format!("`{}` block: {e}", block.tag))?;
    if spec.name.trim().is_empty() {
        return Err(format!("`{}` block has an empty name", block.tag));
    }
    if spec.service.is_empty() {
        match &spec.body {
            ActionBody::Fs(_) => spec.service = "fs".into(),
            ActionBody::Db(db) => spec.service = db.connection_ref.clone(),
            ActionBody::Rest(_) => {}
        }
    }
    Ok(spec)
}

/// Actions in order, each paired with the undo block that follows it.
pub fn parse_pairs(text: &str, kind: Kind) -> Result<Vec<(ActionSpec, Option<ActionSpec>)>, String> {
    let mut out: Vec<(ActionSpec, Option<ActionSpec>)> = Vec::new();
    for b in blocks(text)? {
        match b.tag.as_str() {
            "action" => out.push((action_from(&b, kind)?, None)),
            "undo" => {
                let undo = action_from(&b, kind)?;
                match out.last_mut() {
                    Some((_, slot @ None)) => *slot = Some(undo),
                    _ => return Err("`undo` block without a preceding action".into()),
                }
            }
            _ => {}
        }
    }
    if out.is_empty() {
        return Err("no `action` block found".into());
    }
    Ok(out)
}

pub fn parse_undo(text: &str, kind: Kind) -> Result<ActionSpec, String> {
    let undos: Vec<Block> = blocks(text)?.into_iter().filter(|b| b.tag == "undo").collect();
    match undos.as_slice() {
        [one] => action_from(one, kind),
        [] => Err("no `undo` block found".into()),
        _ => Err(format!("expected one `undo` block, found {}", undos.len())),
    }
}

pub fn parse_testbed(text: &str, kind: Kind) -> Result<TestBed, String> {
    let b = blocks(text)?
        .into_iter()
        .find(|b| b.tag == "testbed")
        .ok_or_else(|| "no `testbed` block found".to_owned())?;
    if b.arg.as_deref().and_then(Kind::parse) != Some(kind) {
        return Err(format!("`testbed` block must be tagged `testbed {}`", kind.as_str()));
    }
    serde_json::from_value(Value::Object(object(&b)?)).map_err(|e| format!("`testbed` block: {e}"))
}

pub fn parse_call(text: &str) -> Result<FunctionCall, String> {
    let b = blocks(text)?.into_iter().find(|b| b.tag == "call").ok_or_else(|| "no `call` block found".to_owned())?;
    serde_json::from_value(Value::Object(object(&b)?)).map_err(|e| format!("`call` block: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAIR: &str = "Sure.\n```action rest\n{\"name\":\"send_message\",\"service\":\"slack\",\"method\":\"POST\",\"url\":\"/messages\"}\n```\n```undo rest\n{\"name\":\"delete_message\",\"service\":\"slack\",\"method\":\"DELETE\",\"url\":\"/messages/1\"}\n```\n";

    #[test]
    fn pairs_parse_in_order() {
        let pairs = parse_pairs(PAIR, Kind::Rest).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].0.name, "send_message");
        assert_eq!(pairs[0].1.as_ref().unwrap().name, "delete_message");
    }

    #[test]
    fn prose_is_unparseable() {
        assert!(parse_pairs("I would send the message with the Slack API.", Kind::Rest).is_err());
    }

    #[test]
    fn kind_mismatch_rejected() {
        assert!(parse_pairs(PAIR, Kind::Fs).is_err());
    }

    #[test]
    fn unterminated_block_rejected() {
        assert!(blocks("```action fs\n{}\n").is_err());
    }

    #[test]
    fn fs_service_defaults() {
        let t = "```action fs\n{\"name\":\"create_file\",\"script\":\"touch a\"}\n```";
        assert_eq!(parse_pairs(t, Kind::Fs).unwrap()[0].0.service, "fs");
    }

    #[test]
    fn testbed_parses() {
        let t = "```testbed db\n{\"setup_script\":\"CREATE TABLE t(x);\",\"action_form\":\"INSERT INTO t VALUES (1)\",\"undo_form\":\"DELETE FROM t WHERE x = 1\",\"comparator\":\"row_multiset\"}\n```";
        let tb = parse_testbed(t, Kind::Db).unwrap();
        assert_eq!(tb.comparator, crate::revtest::Comparator::RowMultiset);
    }
}
