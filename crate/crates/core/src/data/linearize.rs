use crate::data::{Payload, SlotValue, Triple};
use crate::error::{Error, Result};

/// Structural delimiters, always atomic tokens.
pub const DELIMITERS: [&str; 4] = ["<S>", "<P>", "<O>", "<V>"];

fn join(parts: Vec<&str>) -> String {
    parts.into_iter().filter(|p| !p.is_empty()).collect::<Vec<_>>().join(" ")
}

/// `<S> subj <P> pred <O> obj` per triple, single-space separated, input order kept.
pub fn linearize_triples(triples: &[Triple]) -> Result<String> {
    if triples.is_empty() {
        return Err(Error::contract("cannot linearize an empty triple list"));
    }
    let mut parts = Vec::with_capacity(triples.len() * 6);
    for t in triples {
        parts.extend(["<S>", t.subject.as_str(), "<P>", t.predicate.as_str(), "<O>", t.object.as_str()]);
    }
    Ok(join(parts))
}

/// `<S> slot <V> value` per pair.
pub fn linearize_mr(pairs: &[SlotValue]) -> Result<String> {
    if pairs.is_empty() {
        return Err(Error::contract("cannot linearize an empty MR"));
    }
    let mut parts = Vec::with_capacity(pairs.len() * 4);
    for p in pairs {
        parts.extend(["<S>", p.slot.as_str(), "<V>", p.value.as_str()]);
    }
    Ok(join(parts))
}

pub fn linearize(payload: &Payload) -> Result<String> {
    match payload {
        Payload::Triples(t) => linearize_triples(t),
        Payload::Pairs(p) => linearize_mr(p),
    }
}
