//! Template corpora with closed value sets, for tests and desk-scale runs.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Instance, Payload, SlotValue, Split, Triple};

const NAMES: &[&str] = &[
    "Aromi", "Bibimbap", "Cotto", "Fitzbillies", "Giraffe", "Loch Fyne", "The Eagle", "The Mill", "Wildwood", "Zizzi",
    "Alimentum", "Strada", "Clowns", "Midsummer House", "Blue Spice", "The Punter",
];
const EAT_TYPES: &[&str] = &["restaurant", "coffee shop", "pub"];
const FOODS: &[&str] = &["French", "Italian", "Chinese", "English", "Indian", "Japanese"];
const PRICES: &[&str] = &["cheap", "moderate", "high"];
const RATINGS: &[&str] = &["low", "average", "high"];
const AREAS: &[&str] = &["riverside", "city centre"];
const FAMILY: &[&str] = &["yes", "no"];
const NEAR: &[&str] = &["Burger King", "Cafe Rouge", "Crowne Plaza Hotel", "The Bakers", "Ranch", "Avalon"];

/// Optional slots in canonical order; `name` is always present.
const OPTIONAL: &[(&str, &[&str])] = &[
    ("eatType", EAT_TYPES),
    ("food", FOODS),
    ("priceRange", PRICES),
    ("customer rating", RATINGS),
    ("area", AREAS),
    ("familyFriendly", FAMILY),
    ("near", NEAR),
];

/// Text styles of the restaurant corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Style {
    /// Full sentences, the style of the task corpus.
    Prose,
    /// Fronted location phrase.
    Inverted,
    /// Terse attribute listing.
    Listing,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Prose, Style::Inverted, Style::Listing];

    pub fn tag(self) -> &'static str {
        match self {
            Style::Prose => "prose",
            Style::Inverted => "inverted",
            Style::Listing => "listing",
        }
    }
}

fn random_mr(rng: &mut ChaCha8Rng) -> Vec<SlotValue> {
    // 3..=8 pairs: name plus 2..=7 optional slots.
    let extra = rng.random_range(2..=OPTIONAL.len());
    let mut chosen = rand::seq::index::sample(rng, OPTIONAL.len(), extra).into_vec();
    chosen.sort_unstable();
    let mut pairs = vec![SlotValue::new("name", NAMES.choose(rng).expect("non-empty"))];
    for i in chosen {
        let (slot, values) = OPTIONAL[i];
        pairs.push(SlotValue::new(slot, values.choose(rng).expect("non-empty")));
    }
    pairs
}

fn get<'a>(pairs: &'a [SlotValue], slot: &str) -> Option<&'a str> {
    pairs.iter().find(|p| p.slot == slot).map(|p| p.value.as_str())
}

/// Deterministic realization of an MR in `style`; punctuation is space-separated.
pub fn realize(pairs: &[SlotValue], style: Style) -> String {
    let name = get(pairs, "name").unwrap_or("It");
    let eat = get(pairs, "eatType");
    let food = get(pairs, "food");
    let price = get(pairs, "priceRange");
    let rating = get(pairs, "customer rating");
    let area = get(pairs, "area");
    let family = get(pairs, "familyFriendly");
    let near = get(pairs, "near");
    let mut out: Vec<String> = Vec::new();
    match style {
        Style::Prose => {
            out.push(format!("{name} is a {}", eat.unwrap_or("place")));
            if let Some(f) = food {
                out.push(format!("serving {f} food"));
            }
            if let Some(a) = area {
                out.push(format!("in the {a}"));
            }
            if let Some(n) = near {
                out.push(format!("near {n}"));
            }
            out.push(".".into());
            match (price, rating) {
                (Some(p), Some(r)) => out.push(format!("It has {p} prices and a {r} customer rating .")),
                (Some(p), None) => out.push(format!("It has {p} prices .")),
                (None, Some(r)) => out.push(format!("It has a {r} customer rating .")),
                (None, None) => {}
            }
            match family {
                Some("yes") => out.push("It is family friendly .".into()),
                Some(_) => out.push("It is not family friendly .".into()),
                None => {}
            }
        }
        Style::Inverted => {
            if let Some(a) = area {
                out.push(format!("Located in the {a} ,"));
            }
            if let Some(n) = near {
                out.push(format!("close to {n} ,"));
            }
            out.push(name.to_string());
            match (eat, food) {
                (Some(e), Some(f)) => out.push(format!("offers {f} dishes as a {e}")),
                (Some(e), None) => out.push(format!("operates as a {e}")),
                (None, Some(f)) => out.push(format!("offers {f} dishes")),
                (None, None) => out.push("welcomes guests".into()),
            }
            if let Some(p) = price {
                out.push(format!("for {p} money"));
            }
            out.push(".".into());
            if let Some(r) = rating {
                out.push(format!("Customers rate it {r} ."));
            }
            match family {
                Some("yes") => out.push("Kids are welcome .".into()),
                Some(_) => out.push("Kids are not welcome .".into()),
                None => {}
            }
        }
        Style::Listing => {
            out.push(format!("{name} :"));
            let mut items = Vec::new();
            for (slot, v) in [("type", eat), ("cuisine", food), ("price", price), ("rating", rating), ("area", area), ("family", family), ("near", near)] {
                if let Some(v) = v {
                    items.push(format!("{slot} {v}"));
                }
            }
            out.push(items.join(" ; "));
            out.push(".".into());
        }
    }
    out.join(" ")
}

fn fresh_mr(rng: &mut ChaCha8Rng, seen: &mut HashSet<Vec<SlotValue>>) -> Vec<SlotValue> {
    loop {
        let mr = random_mr(rng);
        if seen.insert(mr.clone()) {
            return mr;
        }
    }
}

/// Restaurant MRs realized in prose; strata are slot counts (3..=8).
/// MRs are distinct across all splits.
pub fn restaurant_corpus(train: usize, dev: usize, test: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut instances = Vec::new();
    for (split, n, tag) in [(Split::Train, train, "train"), (Split::Dev, dev, "dev"), (Split::Test, test, "test")] {
        for i in 0..n {
            let mr = fresh_mr(&mut rng, &mut seen);
            instances.push(Instance {
                id: format!("mr-{tag}-{i:05}"),
                stratum: mr.len().to_string(),
                references: vec![realize(&mr, Style::Prose)],
                payload: Payload::Pairs(mr),
                split,
            });
        }
    }
    Dataset::new(instances).expect("synthetic instances are valid")
}

/// Mixed-style pretraining corpus. Tagged instances carry a leading `style`
/// slot naming their realization; untagged ones default to the inverted style.
/// Draws from a different stream than [`restaurant_corpus`] for the same seed.
pub fn restaurant_style_corpus(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_57e1);
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let mr = random_mr(&mut rng);
        let (payload, style) = match i % 4 {
            3 => (mr.clone(), Style::Inverted),
            k => {
                let style = Style::ALL[k];
                let mut tagged = vec![SlotValue::new("style", style.tag())];
                tagged.extend(mr.iter().cloned());
                (tagged, style)
            }
        };
        instances.push(Instance {
            id: format!("style-{i:06}"),
            stratum: style.tag().into(),
            references: vec![realize(&mr, style)],
            payload: Payload::Pairs(payload),
            split: Split::Train,
        });
    }
    Dataset::new(instances).expect("synthetic instances are valid")
}

struct Category {
    name: &'static str,
    subjects: &'static [&'static str],
    relations: &'static [(&'static str, &'static str, &'static [&'static str])],
}

const CATEGORIES: &[Category] = &[
    Category {
        name: "Airport",
        subjects: &["Aarhus Airport", "Abilene Regional Airport", "Adolfo Suarez Airport", "Agra Airport"],
        relations: &[
            ("cityServed", "serves the city of", &["Aarhus", "Abilene", "Madrid", "Agra"]),
            ("elevation", "lies at an elevation of", &["25 metres", "546 metres", "610 metres"]),
            ("runwayLength", "has a runway length of", &["2776 metres", "1121 metres", "4349 metres"]),
        ],
    },
    Category {
        name: "Astronaut",
        subjects: &["Alan Bean", "Buzz Aldrin", "Elliot See", "William Anders"],
        relations: &[
            ("birthPlace", "was born in", &["Wheeler Texas", "Glen Ridge", "Dallas", "Hong Kong"]),
            ("occupation", "worked as", &["test pilot", "fighter pilot", "engineer"]),
            ("mission", "flew on", &["Apollo 12", "Apollo 11", "Apollo 8"]),
        ],
    },
    Category {
        name: "City",
        subjects: &["Albany", "Amarillo", "Anaheim", "Atlanta"],
        relations: &[
            ("country", "is located in", &["United States", "Georgia", "Texas"]),
            ("leaderTitle", "is led by a", &["mayor", "council", "governor"]),
            ("areaTotal", "covers an area of", &["140 square kilometres", "260 square kilometres"]),
        ],
    },
    Category {
        name: "Food",
        subjects: &["Bakewell pudding", "Arrabbiata sauce", "Ajoblanco", "Bacon Explosion"],
        relations: &[
            ("country", "comes from", &["England", "Italy", "Spain", "United States"]),
            ("mainIngredient", "is made with", &["almond", "tomato", "bacon", "ground almond"]),
            ("course", "is served as a", &["dessert", "main course", "starter"]),
        ],
    },
];

/// Knowledge-graph instances: one to three triples about a shared subject,
/// stratified by category.
pub fn knowledge_graph_corpus(train: usize, dev: usize, test: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b67_6b67);
    let mut seen: HashSet<Vec<Triple>> = HashSet::new();
    let mut instances = Vec::new();
    for (split, n, tag) in [(Split::Train, train, "train"), (Split::Dev, dev, "dev"), (Split::Test, test, "test")] {
        for i in 0..n {
            let cat = &CATEGORIES[i % CATEGORIES.len()];
            let (triples, text) = loop {
                let subject = *cat.subjects.choose(&mut rng).expect("non-empty");
                let k = rng.random_range(1..=cat.relations.len());
                let mut idx = rand::seq::index::sample(&mut rng, cat.relations.len(), k).into_vec();
                idx.sort_unstable();
                let mut triples = Vec::new();
                let mut text = Vec::new();
                for j in idx {
                    let (pred, phrase, objects) = cat.relations[j];
                    let obj = *objects.choose(&mut rng).expect("non-empty");
                    triples.push(Triple::new(subject, pred, obj));
                    let lead = if text.is_empty() { subject } else { "It" };
                    text.push(format!("{lead} {phrase} {obj} ."));
                }
                if seen.insert(triples.clone()) {
                    break (triples, text.join(" "));
                }
            };
            instances.push(Instance {
                id: format!("kg-{tag}-{i:05}"),
                payload: Payload::Triples(triples),
                stratum: cat.name.into(),
                references: vec![text],
                split,
            });
        }
    }
    Dataset::new(instances).expect("synthetic instances are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{derive_stratum, Scheme};

    #[test]
    fn corpus_shapes() {
        let d = restaurant_corpus(200, 30, 30, 7);
        assert_eq!(d.split(Split::Train).len(), 200);
        let strata: HashSet<_> = d.instances.iter().map(|i| derive_stratum(i, Scheme::SlotCount).unwrap()).collect();
        assert_eq!(strata.len(), 6);
        assert_eq!(restaurant_corpus(200, 30, 30, 7), d);
        let kg = knowledge_graph_corpus(40, 8, 8, 1);
        assert_eq!(kg.split(Split::Test).len(), 8);
    }

    #[test]
    fn styles_differ() {
        let mr = vec![SlotValue::new("name", "Aromi"), SlotValue::new("area", "riverside"), SlotValue::new("food", "French")];
        let texts: HashSet<_> = Style::ALL.iter().map(|s| realize(&mr, *s)).collect();
        assert_eq!(texts.len(), 3);
        assert_eq!(realize(&mr, Style::Prose), "Aromi is a place serving French food in the riverside .");
    }
}
