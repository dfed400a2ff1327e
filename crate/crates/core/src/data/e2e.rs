//! Native importer for the flat E2E CSV layout (`mr,ref`).

use std::io::Read;
use std::path::Path;

use indexmap::IndexMap;

use crate::data::{Dataset, Instance, Payload, SlotValue, Split};
use crate::error::{Error, Result};

/// Parses `slot[value], slot[value], ...`.
pub fn parse_mr(mr: &str) -> std::result::Result<Vec<SlotValue>, String> {
    let mut out = Vec::new();
    let mut rest = mr.trim();
    while !rest.is_empty() {
        let open = rest.find('[').ok_or_else(|| format!("missing '[' in {rest:?}"))?;
        let close = rest[open..].find(']').ok_or_else(|| format!("missing ']' in {rest:?}"))? + open;
        let slot = rest[..open].trim();
        if slot.is_empty() {
            return Err(format!("empty slot name in {mr:?}"));
        }
        out.push(SlotValue::new(slot, rest[open + 1..close].trim()));
        rest = rest[close + 1..].trim_start();
        if let Some(r) = rest.strip_prefix(',') {
            rest = r.trim_start();
        } else if !rest.is_empty() {
            return Err(format!("expected ',' before {rest:?}"));
        }
    }
    if out.is_empty() {
        return Err("empty MR".into());
    }
    Ok(out)
}

/// Groups rows with identical MRs into one instance; strata are slot counts.
pub fn read_e2e_csv<R: Read>(reader: R, split: Split, id_prefix: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse { position: "header".into(), detail: e.to_string() })?;
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (mr_col, ref_col) = match (col("mr"), col("ref")) {
        (Some(m), Some(r)) => (m, r),
        _ => return Err(Error::Parse { position: "header".into(), detail: "expected columns mr,ref".into() }),
    };
    let mut groups: IndexMap<String, (Vec<SlotValue>, Vec<String>)> = IndexMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let position = || format!("record {} (line {})", i + 1, i + 2);
        let rec = rec.map_err(|e| Error::Parse { position: position(), detail: e.to_string() })?;
        let (Some(mr), Some(refr)) = (rec.get(mr_col), rec.get(ref_col)) else {
            return Err(Error::Parse { position: position(), detail: "missing field".into() });
        };
        let pairs = parse_mr(mr).map_err(|detail| Error::Parse { position: position(), detail })?;
        let entry = groups.entry(mr.trim().to_string()).or_insert_with(|| (pairs, Vec::new()));
        if !refr.trim().is_empty() {
            entry.1.push(refr.trim().to_string());
        }
    }
    let instances = groups
        .into_values()
        .enumerate()
        .map(|(i, (pairs, references))| Instance {
            id: format!("{id_prefix}{i:05}"),
            stratum: pairs.len().to_string(),
            payload: Payload::Pairs(pairs),
            references,
            split,
        })
        .collect();
    Dataset::new(instances)
}

pub fn import_e2e_csv(path: &Path, split: Split) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let prefix = match split {
        Split::Train => "e2e-train-",
        Split::Dev => "e2e-dev-",
        Split::Test => "e2e-test-",
    };
    read_e2e_csv(f, split, prefix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_groups() {
        let csv = "mr,ref\n\"name[Aromi], area[city centre]\",\"Aromi is in the city centre.\"\n\
                   \"name[Aromi], area[city centre]\",\"In the city centre is Aromi.\"\n\
                   \"name[Blue], food[French], area[riverside]\",\"Blue serves French food.\"\n";
        let d = read_e2e_csv(csv.as_bytes(), Split::Train, "t").unwrap();
        assert_eq!(d.len(), 2);
        let first = &d.instances[0];
        assert_eq!(first.payload, Payload::Pairs(vec![SlotValue::new("name", "Aromi"), SlotValue::new("area", "city centre")]));
        assert_eq!(first.references.len(), 2);
        assert_eq!(first.stratum, "2");
    }

    #[test]
    fn malformed_record_reports_position() {
        let csv = "mr,ref\n\"name[Aromi]\",\"ok\"\n\"name Aromi\",\"bad\"\n";
        match read_e2e_csv(csv.as_bytes(), Split::Train, "t") {
            Err(Error::Parse { position, .. }) => assert!(position.contains("record 2"), "{position}"),
            other => panic!("{other:?}"),
        }
        assert!(read_e2e_csv("a,b\nx,y\n".as_bytes(), Split::Train, "t").is_err());
    }
}
