//! Import of tab-separated single-turn files: one `token<TAB>slot` pair per
//! line, blocks separated by blank lines, each block closed by `#intent=<label>`.

use std::fs;
use std::path::Path;

use crate::data::corpus::{RawDialogue, RawTurn};
use crate::error::{Error, Result};

pub fn parse_conll(path: &Path, text: &str) -> Result<Vec<RawDialogue>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut slots = Vec::new();
    let mut intent: Option<String> = None;
    let mut start = 1;

    let mut flush = |tokens: &mut Vec<String>,
                     slots: &mut Vec<String>,
                     intent: &mut Option<String>,
                     line: usize|
     -> Result<()> {
        if tokens.is_empty() && intent.is_none() {
            return Ok(());
        }
        let perr = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        };
        let intent = intent.take().ok_or_else(|| perr("block has no #intent= line"))?;
        if tokens.is_empty() {
            return Err(perr("block has no tokens"));
        }
        out.push(RawDialogue {
            id: out.len().to_string(),
            turns: vec![RawTurn {
                tokens: std::mem::take(tokens),
                slots: std::mem::take(slots),
                intent,
            }],
        });
        Ok(())
    };

    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        let lineno = i + 1;
        if line.trim().is_empty() {
            flush(&mut tokens, &mut slots, &mut intent, start)?;
            start = lineno + 1;
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        if let Some(label) = line.strip_prefix("#intent=") {
            if intent.is_some() {
                return Err(perr("duplicate #intent= line".into()));
            }
            intent = Some(label.trim().to_string());
            continue;
        }
        if intent.is_some() {
            return Err(perr("token line after #intent= line".into()));
        }
        match line.split_once('\t') {
            Some((tok, slot)) if !tok.is_empty() && !slot.trim().is_empty() => {
                tokens.push(tok.to_lowercase());
                slots.push(slot.trim().to_string());
            }
            _ => return Err(perr(format!("expected `token<TAB>slot`, got `{line}`"))),
        }
    }
    flush(&mut tokens, &mut slots, &mut intent, start)?;
    Ok(out)
}

pub fn read_conll(path: &Path) -> Result<Vec<RawDialogue>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll(path, &text)
}
