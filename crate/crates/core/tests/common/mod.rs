//! Fixtures and brute-force oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use convrec::agent::{Agent, Toolkit};
use convrec::catalog::{
    load_catalog, AttrKind, AttrValue, AttributeSchema, Catalog, InteractionRecord, InteractionStore, Item,
};
use convrec::doke::{KnowledgeGraph, Triple};
use convrec::llm::{MockBackend, MockScript};
use convrec::ranker::CoocModel;
use convrec::retrieval::{Embedder, ItemIndex, TrigramEmbedder};
use rand::seq::SliceRandom;
use rand::Rng;

pub const GAMES: &str = r#"{"schema":[{"name":"genre","kind":"text"},{"name":"price","kind":"number"},{"name":"tags","kind":"text-list"}]}
{"id":"g1","title":"Eldervale","description":"A hand-painted fantasy RPG","attributes":{"genre":"RPG","price":15,"tags":["fantasy"]}}
{"id":"g2","title":"Witcher-like Quest","description":"Open-world monster hunting RPG","attributes":{"genre":"RPG","price":30,"tags":["open-world"]}}
{"id":"g3","title":"Stardew Valley","description":"Cozy farming life sim","attributes":{"genre":"farming","price":14.99,"tags":["coop","cozy"]}}
{"id":"g4","title":"Boom Arena","description":"Arena shooter","attributes":{"genre":"shooter","price":20,"tags":["pvp"]}}
{"id":"g5","title":"Boom Arena 2","description":"Co-op arena sequel","attributes":{"genre":"co-op","price":25,"tags":["coop"]}}
"#;

pub struct Games {
    pub catalog: Arc<Catalog>,
    pub interactions: Arc<InteractionStore>,
    pub model: Arc<CoocModel>,
    pub toolkit: Toolkit,
}

pub fn rec(user: &str, item: &str, ts: u64) -> InteractionRecord {
    InteractionRecord { user_id: user.into(), item_id: item.into(), timestamp: ts }
}

pub fn games() -> Games {
    let base = load_catalog(GAMES.as_bytes()).unwrap();
    let interactions = InteractionStore::from_records(
        [
            rec("u1", "g1", 1),
            rec("u1", "g3", 2),
            rec("u2", "g1", 1),
            rec("u2", "g2", 2),
            rec("u2", "g3", 3),
            rec("u3", "g4", 1),
            rec("u3", "g5", 2),
            rec("u4", "g2", 1),
            rec("u4", "g5", 2),
        ],
        &base,
    );
    let catalog = Arc::new(base.with_popularity(&interactions));
    let model = Arc::new(CoocModel::fit(&interactions));
    let embedder: Arc<dyn Embedder> = Arc::new(TrigramEmbedder::default());
    let index = Arc::new(ItemIndex::build(&catalog, embedder.as_ref()).unwrap());
    let toolkit = Toolkit { catalog: catalog.clone(), index, embedder, ranker: model.clone() };
    Games { catalog, interactions: Arc::new(interactions), model, toolkit }
}

pub const RPG_PLAN: &str = r#"{"plan":[{"tool":"retrieve","input":{"hard":"genre = 'RPG' AND price < 20","k":3}},{"tool":"rank","input":{"candidates":"$bus"}}]}"#;

/// Planner emits a retrieve→rank plan for RPG requests; the responder quotes the observation.
pub fn rpg_script() -> MockScript {
    MockScript::new()
        .contains("Request: ", RPG_PLAN)
        .contains("RPG under 20", "Here is what fits: {{observation}}")
        .with_default("Tell me more about what you like.")
}

pub fn games_agent(g: &Games, script: MockScript) -> Agent {
    Agent::new(
        g.catalog.clone(),
        g.interactions.clone(),
        g.toolkit.registry().unwrap(),
        Arc::new(MockBackend::new(script)),
        g.toolkit.embedder.clone(),
    )
}

pub fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub fn set(v: &[&str]) -> BTreeSet<String> {
    v.iter().map(|s| s.to_string()).collect()
}

// ---------------------------------------------------------------------------
// random catalogs and a naive query oracle

pub const GENRES: [&str; 5] = ["RPG", "farming", "shooter", "co-op", "puzzle"];
pub const TAGS: [&str; 6] = ["coop", "cozy", "pvp", "fantasy", "retro", "Story"];
const WORDS: [&str; 8] = ["quest", "valley", "arena", "dungeon", "farm", "star", "night", "blade"];

pub fn random_catalog<R: Rng>(rng: &mut R, n: usize) -> Catalog {
    let schema = vec![
        AttributeSchema { name: "genre".into(), kind: AttrKind::Text },
        AttributeSchema { name: "price".into(), kind: AttrKind::Number },
        AttributeSchema { name: "year".into(), kind: AttrKind::Number },
        AttributeSchema { name: "tags".into(), kind: AttrKind::TextList },
    ];
    let items = (0..n)
        .map(|i| {
            let mut attributes = BTreeMap::new();
            if rng.gen_bool(0.9) {
                attributes.insert("genre".into(), AttrValue::Text(GENRES.choose(rng).unwrap().to_string()));
            }
            if rng.gen_bool(0.9) {
                // whole and half prices collide often, which exercises ties
                attributes.insert("price".into(), AttrValue::Number(f64::from(rng.gen_range(0..80)) / 2.0));
            }
            if rng.gen_bool(0.7) {
                attributes.insert("year".into(), AttrValue::Number(f64::from(rng.gen_range(2000..2025))));
            }
            if rng.gen_bool(0.8) {
                let k = rng.gen_range(0..4);
                let tags: Vec<String> = TAGS.choose_multiple(rng, k).map(|t| t.to_string()).collect();
                attributes.insert("tags".into(), AttrValue::List(tags));
            }
            let title = (0..rng.gen_range(1..4)).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ");
            Item {
                id: format!("i{i:04}"),
                title,
                description: String::new(),
                attributes,
                popularity: rng.gen_range(0..20),
            }
        })
        .collect();
    Catalog::new(schema, items).unwrap()
}

/// Query AST used only by the oracle; rendered to text and fed to the real parser.
#[derive(Debug, Clone)]
pub enum Q {
    NumCmp(&'static str, &'static str, f64),
    TextEq(&'static str, bool, String),
    InText(&'static str, Vec<String>),
    InNum(&'static str, Vec<f64>),
    InList(Vec<String>),
    ContainsText(String),
    ContainsList(String),
    And(Box<Q>, Box<Q>),
    Or(Box<Q>, Box<Q>),
    Not(Box<Q>),
}

fn quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

fn num(x: f64) -> String {
    format!("{x}")
}

impl Q {
    pub fn render(&self) -> String {
        match self {
            Q::NumCmp(a, op, x) => format!("{a} {op} {}", num(*x)),
            Q::TextEq(a, eq, v) => format!("{a} {} {}", if *eq { "=" } else { "!=" }, quote(v)),
            Q::InText(a, vs) => format!("{a} IN ({})", vs.iter().map(|v| quote(v)).collect::<Vec<_>>().join(", ")),
            Q::InNum(a, vs) => format!("{a} in ({})", vs.iter().map(|v| num(*v)).collect::<Vec<_>>().join(", ")),
            Q::InList(vs) => format!("tags IN ({})", vs.iter().map(|v| quote(v)).collect::<Vec<_>>().join(", ")),
            Q::ContainsText(v) => format!("genre CONTAINS {}", quote(v)),
            Q::ContainsList(v) => format!("tags contains {}", quote(v)),
            Q::And(a, b) => format!("({}) AND ({})", a.render(), b.render()),
            Q::Or(a, b) => format!("({}) OR ({})", a.render(), b.render()),
            Q::Not(a) => format!("NOT ({})", a.render()),
        }
    }

    pub fn eval(&self, item: &Item) -> bool {
        let number = |a: &str| match item.attributes.get(a) {
            Some(AttrValue::Number(x)) => Some(*x),
            _ => None,
        };
        let text = |a: &str| match item.attributes.get(a) {
            Some(AttrValue::Text(x)) => Some(x.clone()),
            _ => None,
        };
        let tags = || match item.attributes.get("tags") {
            Some(AttrValue::List(x)) => Some(x.clone()),
            _ => None,
        };
        match self {
            Q::NumCmp(a, op, y) => number(a).is_some_and(|x| match *op {
                "=" => x == *y,
                "!=" => x != *y,
                "<" => x < *y,
                "<=" => x <= *y,
                ">" => x > *y,
                ">=" => x >= *y,
                _ => unreachable!(),
            }),
            Q::TextEq(a, eq, v) => text(a).is_some_and(|x| (x == *v) == *eq),
            Q::InText(a, vs) => text(a).is_some_and(|x| vs.contains(&x)),
            Q::InNum(a, vs) => number(a).is_some_and(|x| vs.contains(&x)),
            Q::InList(vs) => tags().is_some_and(|ts| ts.iter().any(|t| vs.contains(t))),
            Q::ContainsText(v) => text("genre").is_some_and(|x| x.to_lowercase().contains(&v.to_lowercase())),
            Q::ContainsList(v) => tags().is_some_and(|ts| ts.iter().any(|t| t.to_lowercase() == v.to_lowercase())),
            Q::And(a, b) => a.eval(item) && b.eval(item),
            Q::Or(a, b) => a.eval(item) || b.eval(item),
            Q::Not(a) => !a.eval(item),
        }
    }
}

pub fn random_q<R: Rng>(rng: &mut R, depth: u32) -> Q {
    let leaf = depth == 0 || rng.gen_bool(0.4);
    if !leaf {
        return match rng.gen_range(0..3) {
            0 => Q::And(Box::new(random_q(rng, depth - 1)), Box::new(random_q(rng, depth - 1))),
            1 => Q::Or(Box::new(random_q(rng, depth - 1)), Box::new(random_q(rng, depth - 1))),
            _ => Q::Not(Box::new(random_q(rng, depth - 1))),
        };
    }
    match rng.gen_range(0..7) {
        0 => {
            let a = if rng.gen_bool(0.5) { "price" } else { "year" };
            let op = *["=", "!=", "<", "<=", ">", ">="].choose(rng).unwrap();
            let x =
                if a == "price" { f64::from(rng.gen_range(0..80)) / 2.0 } else { f64::from(rng.gen_range(2000..2025)) };
            Q::NumCmp(a, op, x)
        }
        1 => Q::TextEq("genre", rng.gen_bool(0.5), GENRES.choose(rng).unwrap().to_string()),
        2 => {
            let n = rng.gen_range(1..3);
            Q::InText("genre", GENRES.choose_multiple(rng, n).map(|s| s.to_string()).collect())
        }
        3 => Q::InNum("price", (0..rng.gen_range(1..4)).map(|_| f64::from(rng.gen_range(0..80)) / 2.0).collect()),
        4 => {
            let n = rng.gen_range(1..3);
            Q::InList(TAGS.choose_multiple(rng, n).map(|s| s.to_string()).collect())
        }
        5 => {
            let g = GENRES.choose(rng).unwrap();
            let start = rng.gen_range(0..g.len());
            let end = rng.gen_range(start + 1..=g.len());
            let mut needle = g[start..end].to_string();
            if rng.gen_bool(0.5) {
                needle = needle.to_uppercase();
            }
            Q::ContainsText(needle)
        }
        _ => Q::ContainsList(TAGS.choose(rng).unwrap().to_lowercase()),
    }
}

/// Query text plus its order/limit tail, and the oracle's answer by full scan.
pub fn random_query<R: Rng>(rng: &mut R, catalog: &Catalog) -> (String, Vec<String>) {
    let q = random_q(rng, 3);
    let mut text = q.render();
    let mut hits: Vec<&Item> = catalog.items().iter().filter(|it| q.eval(it)).collect();
    let order = rng.gen_range(0..4);
    let num_key = |it: &Item, a: &str| match it.attributes.get(a) {
        Some(AttrValue::Number(x)) => Some(*x),
        _ => None,
    };
    match order {
        0 => hits.sort_by(|a, b| b.popularity.cmp(&a.popularity).then(a.id.cmp(&b.id))),
        1 | 2 => {
            let asc = order == 1;
            let attr = if rng.gen_bool(0.5) { "price" } else { "year" };
            text.push_str(&format!(" ORDER BY {attr} {}", if asc { "ASC" } else { "desc" }));
            hits.sort_by(|a, b| {
                let (x, y) = (num_key(a, attr), num_key(b, attr));
                let o = match (x, y) {
                    (None, None) => std::cmp::Ordering::Equal,
                    (None, Some(_)) => std::cmp::Ordering::Greater,
                    (Some(_), None) => std::cmp::Ordering::Less,
                    (Some(x), Some(y)) if asc => x.partial_cmp(&y).unwrap(),
                    (Some(x), Some(y)) => y.partial_cmp(&x).unwrap(),
                };
                o.then(a.id.cmp(&b.id))
            });
        }
        _ => {
            let asc = rng.gen_bool(0.5);
            text.push_str(if asc { " ORDER BY genre asc" } else { " ORDER BY genre DESC" });
            hits.sort_by(|a, b| {
                let key = |it: &Item| match it.attributes.get("genre") {
                    Some(AttrValue::Text(x)) => Some(x.clone()),
                    _ => None,
                };
                let o = match (key(a), key(b)) {
                    (None, None) => std::cmp::Ordering::Equal,
                    (None, Some(_)) => std::cmp::Ordering::Greater,
                    (Some(_), None) => std::cmp::Ordering::Less,
                    (Some(x), Some(y)) if asc => x.cmp(&y),
                    (Some(x), Some(y)) => y.cmp(&x),
                };
                o.then(a.id.cmp(&b.id))
            });
        }
    }
    if rng.gen_bool(0.4) {
        let limit = rng.gen_range(1..30);
        text.push_str(&format!(" LIMIT {limit}"));
        hits.truncate(limit);
    }
    (text, hits.into_iter().map(|it| it.id.clone()).collect())
}

// ---------------------------------------------------------------------------
// retrieval oracle

/// Exhaustive cosine scan over freshly embedded item texts, ties by id.
pub fn cosine_oracle(catalog: &Catalog, embedder: &dyn Embedder, query: &str, k: usize) -> Vec<String> {
    let q = embedder.embed(query).unwrap();
    let mut scored: Vec<(String, f64)> = catalog
        .items()
        .iter()
        .map(|it| {
            let v = embedder.embed(&catalog.item_text(it)).unwrap();
            let dot: f64 = q.values().iter().zip(v.values()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            (it.id.clone(), dot)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(id, _)| id).collect()
}

// ---------------------------------------------------------------------------
// ranker oracle

/// Score straight from the raw interaction lists.
pub fn brute_force_score(users: &BTreeMap<String, Vec<String>>, history: &[String], item: &str) -> f64 {
    let sets: Vec<BTreeSet<&str>> = users.values().map(|v| v.iter().map(String::as_str).collect()).collect();
    let pop = |x: &str| sets.iter().filter(|s| s.contains(x)).count() as f64;
    let cooc = |a: &str, b: &str| sets.iter().filter(|s| s.contains(a) && s.contains(b)).count() as f64;
    let distinct: BTreeSet<&str> = history.iter().map(String::as_str).collect();
    distinct
        .into_iter()
        .filter(|h| *h != item)
        .map(|h| {
            let d = (pop(h) * pop(item)).sqrt();
            if d == 0.0 {
                0.0
            } else {
                cooc(h, item) / d
            }
        })
        .sum()
}

// ---------------------------------------------------------------------------
// KG path oracle

/// Every path of one or two triples from `source` to `target`, rendered like the extractor.
pub fn enumerate_paths(triples: &[Triple], source: &str, target: &str) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    if source == target {
        return out;
    }
    // (from, to, arrow text) for both walking directions of every triple
    let steps: Vec<(&str, &str, String)> = triples
        .iter()
        .flat_map(|t| {
            [
                (t.head.as_str(), t.tail.as_str(), format!(" —{}→ ", t.relation)),
                (t.tail.as_str(), t.head.as_str(), format!(" ←{}— ", t.relation)),
            ]
        })
        .filter(|(a, b, _)| a != b)
        .collect();
    for (a, b, arrow) in &steps {
        if *a == source && *b == target {
            out.push((format!("{a}{arrow}{b}"), 1));
        }
    }
    for (a, m, arrow1) in &steps {
        if *a != source || *m == target {
            continue;
        }
        for (m2, b, arrow2) in &steps {
            if m2 == m && *b == target {
                out.push((format!("{a}{arrow1}{m}{arrow2}{b}"), 2));
            }
        }
    }
    out.sort();
    out
}

pub fn random_graph<R: Rng>(rng: &mut R, max_triples: usize, entities: usize) -> (KnowledgeGraph, Vec<Triple>) {
    let mut kg = KnowledgeGraph::new();
    let n = rng.gen_range(1..=max_triples);
    for _ in 0..n {
        let h = format!("e{}", rng.gen_range(0..entities));
        let t = format!("e{}", rng.gen_range(0..entities));
        let r = format!("r{}", rng.gen_range(0..3));
        kg.insert(&h, &r, &t);
    }
    let triples = kg.triples().cloned().collect();
    (kg, triples)
}
