//! Item catalog, interaction logs, and the information-query tool's filter language.

mod query;

pub use query::{parse_query, CmpOp, Literal, Order, Predicate, QueryExpr};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::eval::normalize_name;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CatalogError {
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate item id {0}")]
    DuplicateId(String),
    #[error("parse error at position {position}: expected {expected}")]
    ParseError { position: usize, expected: String },
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),
    #[error("type mismatch on attribute {0}")]
    TypeMismatch(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T, E = CatalogError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttrKind {
    Text,
    Number,
    TextList,
}

impl fmt::Display for AttrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttrKind::Text => "text",
            AttrKind::Number => "number",
            AttrKind::TextList => "text-list",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub kind: AttrKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Number(f64),
    Text(String),
    List(Vec<String>),
}

impl AttrValue {
    pub fn kind(&self) -> AttrKind {
        match self {
            AttrValue::Number(_) => AttrKind::Number,
            AttrValue::Text(_) => AttrKind::Text,
            AttrValue::List(_) => AttrKind::TextList,
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Number(n) => write!(f, "{n}"),
            AttrValue::Text(s) => f.write_str(s),
            AttrValue::List(l) => f.write_str(&l.join(", ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Item {
    pub id: String,
    pub title: String,
    pub description: String,
    pub attributes: BTreeMap<String, AttrValue>,
    pub popularity: u64,
}

impl Item {
    pub fn attr(&self, name: &str) -> Option<&AttrValue> {
        self.attributes.get(name)
    }
}

fn valid_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Immutable item inventory. Items keep their file order; lookups go through an id map.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    schema: Vec<AttributeSchema>,
    items: Vec<Item>,
    by_id: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct SchemaLine {
    schema: Vec<AttributeSchema>,
}

#[derive(Deserialize)]
struct ItemLine {
    id: String,
    title: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    attributes: BTreeMap<String, Value>,
}

impl Catalog {
    /// Builds a catalog from already-typed parts, enforcing the same invariants as the loader.
    pub fn new(schema: Vec<AttributeSchema>, items: Vec<Item>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (i, attr) in schema.iter().enumerate() {
            if !valid_identifier(&attr.name) || !seen.insert(attr.name.clone()) {
                return Err(CatalogError::MalformedRecord {
                    line: 1,
                    reason: format!("bad or duplicate attribute name at schema index {i}: {}", attr.name),
                });
            }
        }
        let mut catalog = Catalog { schema, items: Vec::with_capacity(items.len()), by_id: HashMap::new() };
        for (n, item) in items.into_iter().enumerate() {
            catalog.check_item(&item, n + 2)?;
            catalog.push(item)?;
        }
        Ok(catalog)
    }

    fn check_item(&self, item: &Item, line: usize) -> Result<()> {
        if item.title.trim().is_empty() {
            return Err(CatalogError::MalformedRecord { line, reason: "empty title".into() });
        }
        for (name, value) in &item.attributes {
            let kind = self.kind_of(name).ok_or_else(|| CatalogError::MalformedRecord {
                line,
                reason: format!("attribute {name} not in schema"),
            })?;
            if value.kind() != kind {
                return Err(CatalogError::MalformedRecord { line, reason: format!("attribute {name} expects {kind}") });
            }
            if let AttrValue::Number(n) = value {
                if !n.is_finite() {
                    return Err(CatalogError::MalformedRecord { line, reason: format!("attribute {name} not finite") });
                }
            }
        }
        Ok(())
    }

    fn push(&mut self, item: Item) -> Result<()> {
        if self.by_id.contains_key(&item.id) {
            return Err(CatalogError::DuplicateId(item.id));
        }
        self.by_id.insert(item.id.clone(), self.items.len());
        self.items.push(item);
        Ok(())
    }

    pub fn schema(&self) -> &[AttributeSchema] {
        &self.schema
    }

    pub fn kind_of(&self, attr: &str) -> Option<AttrKind> {
        self.schema.iter().find(|a| a.name == attr).map(|a| a.kind)
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Returns a copy with popularity set to the per-item interaction counts of `store`.
    pub fn with_popularity(&self, store: &InteractionStore) -> Catalog {
        let mut out = self.clone();
        for item in &mut out.items {
            item.popularity = store.interaction_count(&item.id);
        }
        out
    }

    pub fn run_query(&self, q: &QueryExpr) -> Result<Vec<String>> {
        query::run(self, q)
    }

    /// Exact-title lookup after name normalization; ties go to the smallest id.
    pub fn find_by_title(&self, title: &str) -> Option<&str> {
        let wanted = normalize_name(title);
        self.items.iter().filter(|it| normalize_name(&it.title) == wanted).map(|it| it.id.as_str()).min()
    }

    /// Text used for embedding an item: title, description, then attributes in schema order.
    pub fn item_text(&self, item: &Item) -> String {
        let attrs: Vec<String> =
            self.schema.iter().filter_map(|a| item.attr(&a.name).map(|v| format!("{}: {}", a.name, v))).collect();
        format!("{}. {}. {}", item.title, item.description, attrs.join("; "))
    }
}

fn convert_value(name: &str, kind: AttrKind, raw: &Value, line: usize) -> Result<AttrValue> {
    let bad = || CatalogError::MalformedRecord { line, reason: format!("attribute {name} expects {kind}") };
    match kind {
        AttrKind::Number => raw.as_f64().filter(|n| n.is_finite()).map(AttrValue::Number).ok_or_else(bad),
        AttrKind::Text => raw.as_str().map(|s| AttrValue::Text(s.to_string())).ok_or_else(bad),
        AttrKind::TextList => {
            let arr = raw.as_array().ok_or_else(bad)?;
            arr.iter()
                .map(|v| v.as_str().map(str::to_string).ok_or_else(bad))
                .collect::<Result<Vec<_>>>()
                .map(AttrValue::List)
        }
    }
}

/// Reads a catalog in JSON-lines form: a schema object, then one item object per line.
pub fn load_catalog<R: BufRead>(source: R) -> Result<Catalog> {
    let mut lines = source.lines().enumerate();
    let schema = loop {
        match lines.next() {
            None => return Err(CatalogError::MalformedRecord { line: 1, reason: "missing schema line".into() }),
            Some((i, line)) => {
                let line = line.map_err(|e| CatalogError::Io(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: SchemaLine = serde_json::from_str(&line)
                    .map_err(|e| CatalogError::MalformedRecord { line: i + 1, reason: e.to_string() })?;
                break parsed.schema;
            }
        }
    };
    let mut catalog = Catalog::new(schema, Vec::new())?;
    for (i, line) in lines {
        let line = line.map_err(|e| CatalogError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let raw: ItemLine = serde_json::from_str(&line)
            .map_err(|e| CatalogError::MalformedRecord { line: lineno, reason: e.to_string() })?;
        let mut attributes = BTreeMap::new();
        for (name, value) in raw.attributes {
            let kind = catalog.kind_of(&name).ok_or_else(|| CatalogError::MalformedRecord {
                line: lineno,
                reason: format!("attribute {name} not in schema"),
            })?;
            if value.is_null() {
                continue;
            }
            let v = convert_value(&name, kind, &value, lineno)?;
            attributes.insert(name, v);
        }
        let item = Item { id: raw.id, title: raw.title, description: raw.description, attributes, popularity: 0 };
        catalog.check_item(&item, lineno)?;
        catalog.push(item)?;
    }
    Ok(catalog)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
}

/// Interaction log grouped by user, each user's records in ascending timestamp order.
#[derive(Debug, Clone, Default)]
pub struct InteractionStore {
    by_user: BTreeMap<String, Vec<InteractionRecord>>,
    counts: BTreeMap<String, u64>,
    dropped: usize,
}

impl InteractionStore {
    /// Builds a store from records already resolved against `catalog`; unresolvable ones are dropped.
    pub fn from_records(records: impl IntoIterator<Item = InteractionRecord>, catalog: &Catalog) -> Self {
        let mut store = InteractionStore::default();
        for item in catalog.items() {
            store.counts.insert(item.id.clone(), 0);
        }
        for rec in records {
            if !catalog.contains(&rec.item_id) {
                store.dropped += 1;
                continue;
            }
            *store.counts.get_mut(&rec.item_id).expect("catalog item") += 1;
            store.by_user.entry(rec.user_id.clone()).or_default().push(rec);
        }
        for recs in store.by_user.values_mut() {
            recs.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.item_id.cmp(&b.item_id)));
        }
        store
    }

    pub fn users(&self) -> impl Iterator<Item = (&str, &[InteractionRecord])> {
        self.by_user.iter().map(|(u, r)| (u.as_str(), r.as_slice()))
    }

    pub fn history(&self, user_id: &str) -> &[InteractionRecord] {
        self.by_user.get(user_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Distinct item ids of a user's history, in first-interaction order.
    pub fn history_ids(&self, user_id: &str) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.history(user_id).iter().filter(|r| seen.insert(r.item_id.as_str())).map(|r| r.item_id.clone()).collect()
    }

    pub fn interaction_count(&self, item_id: &str) -> u64 {
        self.counts.get(item_id).copied().unwrap_or(0)
    }

    /// Every catalog item id known when the store was built.
    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn len(&self) -> usize {
        self.by_user.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_user.is_empty()
    }
}

/// Reads `user_id<TAB>item_id<TAB>timestamp` lines.
pub fn load_interactions<R: BufRead>(source: R, catalog: &Catalog) -> Result<InteractionStore> {
    let mut records = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.map_err(|e| CatalogError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CatalogError::MalformedRecord {
                line: i + 1,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let timestamp = fields[2].trim().parse::<u64>().map_err(|_| CatalogError::MalformedRecord {
            line: i + 1,
            reason: format!("timestamp {:?} is not a non-negative integer", fields[2]),
        })?;
        records.push(InteractionRecord { user_id: fields[0].to_string(), item_id: fields[1].to_string(), timestamp });
    }
    Ok(InteractionStore::from_records(records, catalog))
}
