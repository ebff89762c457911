//! Candidate universe, interaction records, objective registry and the text
//! serialization templates used on the serving path.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Default cap on serialized behavior sequences.
pub const DEFAULT_MAX_HISTORY: usize = 300;

/// Dense item index in `[0, n_items)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl ItemId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for ItemId {
    fn from(i: usize) -> Self {
        ItemId(i as u32)
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Optional descriptive fields of an item. Statistical fields are carried as
/// opaque strings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemMetadata {
    pub title: Option<String>,
    pub category: Option<String>,
    pub price: Option<String>,
    pub shop: Option<String>,
    pub sales: Option<String>,
    pub ctr: Option<String>,
}

/// One line of the catalog JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogLine<Id = usize> {
    pub id: Id,
    pub freq: u64,
    pub text_vec: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shop: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sales: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctr: Option<String>,
}

/// The candidate set: frequencies, fixed text-feature vectors and metadata.
///
/// Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateCatalog {
    frequencies: Vec<u64>,
    text_features: Matrix<f32>,
    seen: Vec<bool>,
    metadata: Vec<ItemMetadata>,
}

impl CandidateCatalog {
    /// Build a catalog; items with non-zero frequency are marked as seen.
    pub fn new(frequencies: Vec<u64>, text_features: Matrix<f32>, metadata: Vec<ItemMetadata>) -> Result<Self> {
        let n = frequencies.len();
        if n == 0 {
            return Err(Error::Empty("catalog has no items".into()));
        }
        if text_features.rows() != n || metadata.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} frequencies, {} text rows, {} metadata entries",
                text_features.rows(),
                metadata.len()
            )));
        }
        if frequencies.iter().all(|&f| f == 0) {
            return Err(Error::InvalidArgument(
                "at least one item frequency must be positive".into(),
            ));
        }
        if !text_features.is_finite() {
            return Err(Error::Numeric("non-finite text feature".into()));
        }
        let seen = frequencies.iter().map(|&f| f > 0).collect();
        Ok(CandidateCatalog {
            frequencies,
            text_features,
            seen,
            metadata,
        })
    }

    pub fn n_items(&self) -> usize {
        self.frequencies.len()
    }

    /// Text-feature width `G`.
    pub fn text_dim(&self) -> usize {
        self.text_features.cols()
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    pub fn text_features(&self) -> &Matrix<f32> {
        &self.text_features
    }

    pub fn is_seen(&self, id: ItemId) -> bool {
        self.seen[id.index()]
    }

    pub fn seen_flags(&self) -> &[bool] {
        &self.seen
    }

    pub fn metadata(&self, id: ItemId) -> Result<&ItemMetadata> {
        self.check(id)?;
        Ok(&self.metadata[id.index()])
    }

    pub fn check(&self, id: ItemId) -> Result<()> {
        if id.index() < self.n_items() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                id: id.index(),
                n_items: self.n_items(),
            })
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ItemId> {
        (0..self.n_items()).map(ItemId::from)
    }

    /// Item ids with frequency zero.
    pub fn unseen_ids(&self) -> Vec<ItemId> {
        self.ids().filter(|&i| !self.is_seen(i)).collect()
    }

    fn line(&self, i: usize) -> CatalogLine {
        let m = &self.metadata[i];
        CatalogLine {
            id: i,
            freq: self.frequencies[i],
            text_vec: self.text_features.row(i).to_vec(),
            title: m.title.clone(),
            category: m.category.clone(),
            price: m.price.clone(),
            shop: m.shop.clone(),
            sales: m.sales.clone(),
            ctr: m.ctr.clone(),
        }
    }

    /// Write the catalog as JSONL, one item per line in id order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for i in 0..self.n_items() {
            let line = serde_json::to_string(&self.line(i)).expect("catalog line serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn read_jsonl<T, P>(path: P) -> Result<Vec<(usize, T)>>
where
    T: for<'de> Deserialize<'de>,
    P: AsRef<Path>,
{
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((idx + 1, value));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load a catalog JSONL file. Ids must be exactly `0..n` (any order).
pub fn load_catalog(path: impl AsRef<Path>) -> Result<CandidateCatalog> {
    let mut lines: Vec<(usize, CatalogLine)> = read_jsonl(path)?;
    if lines.is_empty() {
        return Err(Error::Empty("catalog file has no items".into()));
    }
    let text_dim = lines[0].1.text_vec.len();
    for (lineno, l) in &lines {
        if l.text_vec.len() != text_dim {
            return Err(Error::DimensionMismatch(format!(
                "line {lineno}: text_vec has length {}, expected {text_dim}",
                l.text_vec.len()
            )));
        }
    }
    lines.sort_by_key(|(_, l)| l.id);
    for (expected, (_, l)) in lines.iter().enumerate() {
        if l.id != expected {
            return Err(Error::NonDenseIds { expected, found: l.id });
        }
    }
    let n = lines.len();
    let mut freqs = Vec::with_capacity(n);
    let mut text = Vec::with_capacity(n * text_dim);
    let mut meta = Vec::with_capacity(n);
    for (_, l) in lines {
        freqs.push(l.freq);
        text.extend_from_slice(&l.text_vec);
        meta.push(ItemMetadata {
            title: l.title,
            category: l.category,
            price: l.price,
            shop: l.shop,
            sales: l.sales,
            ctr: l.ctr,
        });
    }
    CandidateCatalog::new(freqs, Matrix::from_vec(n, text_dim, text)?, meta)
}

/// Optional user attributes rendered in the user description.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAttributes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub province: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub city: Option<String>,
}

impl UserAttributes {
    fn is_empty(&self) -> bool {
        self.age.is_none() && self.gender.is_none() && self.province.is_none() && self.city.is_none()
    }
}

/// One user under one retrieval objective. `history` holds clicks, most
/// recent last; `favorited` and `purchased` are optional extra behavior
/// sequences with the same ordering.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: String,
    pub objective: String,
    pub history: Vec<ItemId>,
    pub positives: Vec<ItemId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "UserAttributes::is_empty")]
    pub attributes: UserAttributes,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub favorited: Vec<ItemId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub purchased: Vec<ItemId>,
}

impl InteractionRecord {
    fn item_ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.history
            .iter()
            .chain(&self.positives)
            .chain(&self.favorited)
            .chain(&self.purchased)
            .copied()
    }
}

/// Load interaction records, validating every id against `n_items`.
pub fn load_interactions(path: impl AsRef<Path>, n_items: usize) -> Result<Vec<InteractionRecord>> {
    let lines: Vec<(usize, InteractionRecord)> = read_jsonl(path)?;
    lines
        .into_iter()
        .map(|(lineno, rec)| {
            if let Some(bad) = rec.item_ids().find(|id| id.index() >= n_items) {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("item id {bad} out of range for {n_items} items"),
                });
            }
            Ok(rec)
        })
        .collect()
}

pub fn save_interactions(path: impl AsRef<Path>, records: &[InteractionRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), records)
}

/// A named retrieval objective and its instruction text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectiveSpec {
    pub tag: String,
    pub template: String,
}

impl ObjectiveSpec {
    /// Instruction text with `{QUERY}` substituted. Returns whether the query
    /// was consumed by the template.
    fn render(&self, query: Option<&str>) -> (String, bool) {
        if self.template.contains("{QUERY}") {
            (self.template.replace("{QUERY}", query.unwrap_or("")), true)
        } else {
            (self.template.clone(), false)
        }
    }
}

/// Ordered set of objectives. Row order is the objective-embedding order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectiveRegistry {
    templates: IndexMap<String, String>,
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        let mut templates = IndexMap::new();
        for (tag, text) in [
            ("CPR", "Please retrieve items that the user will click on."),
            ("RSA", "Please retrieve items for scenario A."),
            ("PPR", "Please retrieve items that the user will purchase."),
            ("RQ", "Please retrieve items that match the given query: {QUERY}."),
        ] {
            templates.insert(tag.to_string(), text.to_string());
        }
        ObjectiveRegistry { templates }
    }
}

impl ObjectiveRegistry {
    pub fn from_pairs<I, K, V>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut templates = IndexMap::new();
        for (k, v) in pairs {
            let k = k.into();
            if templates.insert(k.clone(), v.into()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate objective tag {k}")));
            }
        }
        Ok(ObjectiveRegistry { templates })
    }

    /// Parse a flat `tag = "template text"` file.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        let mut templates = IndexMap::new();
        for (tag, value) in table {
            let toml::Value::String(t) = value else {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("objective {tag} must map to a string template"),
                });
            };
            templates.insert(tag, t);
        }
        Ok(ObjectiveRegistry { templates })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.templates.get_index_of(tag)
    }

    pub fn get(&self, tag: &str) -> Option<ObjectiveSpec> {
        self.templates.get(tag).map(|t| ObjectiveSpec {
            tag: tag.to_string(),
            template: t.clone(),
        })
    }
}

/// One element of a serialized user sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Text(String),
    Item(ItemId),
    /// Reserved query-token sentinel `j` in `0..M`.
    Query(u16),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SerializeConfig {
    pub max_history: usize,
    pub n_query_tokens: usize,
}

impl Default for SerializeConfig {
    fn default() -> Self {
        SerializeConfig {
            max_history: DEFAULT_MAX_HISTORY,
            n_query_tokens: 8,
        }
    }
}

struct TokenWriter(Vec<Token>);

impl TokenWriter {
    fn text(&mut self, s: &str) {
        if s.is_empty() {
            return;
        }
        if let Some(Token::Text(last)) = self.0.last_mut() {
            last.push_str(s);
        } else {
            self.0.push(Token::Text(s.to_string()));
        }
    }

    fn items(&mut self, ids: &[ItemId]) {
        for (k, &id) in ids.iter().enumerate() {
            if k > 0 {
                self.text(" ");
            }
            self.0.push(Token::Item(id));
        }
    }
}

fn recent(ids: &[ItemId], max: usize) -> &[ItemId] {
    &ids[ids.len().saturating_sub(max)..]
}

/// Serialize a user description followed by the objective instruction and
/// `M` query-token sentinels. Empty features drop their text entirely;
/// behavior sequences keep their most recent `max_history` ids.
pub fn serialize_user(record: &InteractionRecord, objective: &ObjectiveSpec, config: &SerializeConfig) -> Vec<Token> {
    let mut w = TokenWriter(Vec::new());

    let a = &record.attributes;
    let mut attrs = Vec::new();
    if let Some(age) = &a.age {
        attrs.push(format!("age {age}"));
    }
    if let Some(g) = &a.gender {
        attrs.push(format!("gender {g}"));
    }
    match (&a.province, &a.city) {
        (Some(p), Some(c)) => attrs.push(format!("located in {p}, {c}")),
        (Some(p), None) => attrs.push(format!("located in {p}")),
        (None, Some(c)) => attrs.push(format!("located in {c}")),
        (None, None) => {}
    }
    if !attrs.is_empty() {
        w.text(&format!("The user attributes are as follows: {}. ", attrs.join(", ")));
    }

    let behaviors: Vec<(&str, &[ItemId])> = [
        ("favorited", record.favorited.as_slice()),
        ("purchased", record.purchased.as_slice()),
        ("clicked", record.history.as_slice()),
    ]
    .into_iter()
    .map(|(verb, ids)| (verb, recent(ids, config.max_history)))
    .filter(|(_, ids)| !ids.is_empty())
    .collect();
    if !behaviors.is_empty() {
        w.text("The user has ");
        for (k, (verb, ids)) in behaviors.iter().enumerate() {
            if k > 0 {
                w.text(", ");
            }
            w.text(verb);
            w.text(" ");
            w.items(ids);
        }
        w.text(". ");
    }

    let (instruction, consumed) = objective.render(record.query.as_deref());
    if let (Some(q), false) = (&record.query, consumed) {
        w.text(&format!("The query is {q}. "));
    }
    w.text(&instruction);

    let mut tokens = w.0;
    if let Some(Token::Text(last)) = tokens.last_mut() {
        let trimmed = last.trim_end().len();
        last.truncate(trimmed);
    }
    tokens.extend((0..config.n_query_tokens).map(|j| Token::Query(j as u16)));
    tokens
}

/// Human-readable rendering: items as `[id]`, query sentinels as `<q_j>`.
pub fn render_tokens(tokens: &[Token]) -> String {
    let mut s = String::new();
    for t in tokens {
        match t {
            Token::Text(x) => s.push_str(x),
            Token::Item(id) => s.push_str(&format!("[{id}]")),
            Token::Query(j) => s.push_str(&format!("<q{j}>")),
        }
    }
    s
}

/// Instantiate the item-description template; missing fields are omitted.
pub fn serialize_item(catalog: &CandidateCatalog, id: ItemId) -> Result<String> {
    let m = catalog.metadata(id)?;
    let mut parts = Vec::new();
    if let Some(t) = &m.title {
        parts.push(format!("The item title is {t}."));
    }
    if let Some(c) = &m.category {
        parts.push(format!("The category is {c}."));
    }
    if let Some(p) = &m.price {
        parts.push(format!("The price is {p}."));
    }
    if let Some(s) = &m.shop {
        parts.push(format!("The shop name is {s}."));
    }
    match (&m.sales, &m.ctr) {
        (Some(s), Some(c)) => parts.push(format!(
            "Over the past 7 days, its sales volume is {s} and click-through rate is {c}."
        )),
        (Some(s), None) => parts.push(format!("Over the past 7 days, its sales volume is {s}.")),
        (None, Some(c)) => parts.push(format!("Over the past 7 days, its click-through rate is {c}.")),
        (None, None) => {}
    }
    Ok(parts.join(" "))
}

/// Result of densifying a catalog with arbitrary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdRemap {
    /// `original[new_id]` is the original id.
    pub original: Vec<u64>,
    lookup: HashMap<u64, u32>,
}

impl IdRemap {
    pub fn new_id(&self, original: u64) -> Option<ItemId> {
        self.lookup.get(&original).map(|&i| ItemId(i))
    }
}

/// Raw interaction line with sparse ids.
#[derive(Deserialize)]
struct SparseInteraction {
    user: String,
    objective: String,
    history: Vec<u64>,
    positives: Vec<u64>,
    #[serde(default)]
    query: Option<String>,
}

/// Rewrite a catalog with sparse ids into dense `0..n` ids (ascending by
/// original id) and, optionally, its interaction file. Interaction ids that
/// are not in the catalog are dropped.
pub fn remap_files(catalog_in: &Path, catalog_out: &Path, interactions: Option<(&Path, &Path)>) -> Result<IdRemap> {
    let mut lines: Vec<(usize, CatalogLine<u64>)> = read_jsonl(catalog_in)?;
    lines.sort_by_key(|(_, l)| l.id);
    let mut lookup = HashMap::new();
    let mut original = Vec::with_capacity(lines.len());
    for (lineno, l) in &lines {
        if lookup.insert(l.id, original.len() as u32).is_some() {
            return Err(Error::Parse {
                line: *lineno,
                message: format!("duplicate item id {}", l.id),
            });
        }
        original.push(l.id);
    }
    let remap = IdRemap { original, lookup };
    write_jsonl(
        catalog_out,
        lines.into_iter().enumerate().map(|(new, (_, l))| CatalogLine::<usize> {
            id: new,
            freq: l.freq,
            text_vec: l.text_vec,
            title: l.title,
            category: l.category,
            price: l.price,
            shop: l.shop,
            sales: l.sales,
            ctr: l.ctr,
        }),
    )?;
    if let Some((inp, out)) = interactions {
        let recs: Vec<(usize, SparseInteraction)> = read_jsonl(inp)?;
        let map = |ids: &[u64]| -> Vec<ItemId> { ids.iter().filter_map(|&i| remap.new_id(i)).collect() };
        let dense: Vec<InteractionRecord> = recs
            .into_iter()
            .map(|(_, r)| InteractionRecord {
                user: r.user,
                objective: r.objective,
                history: map(&r.history),
                positives: map(&r.positives),
                query: r.query,
                ..Default::default()
            })
            .collect();
        write_jsonl(out, &dense)?;
    }
    Ok(remap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn smallest_catalog_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "c.jsonl",
            "{\"id\":0,\"freq\":3,\"text_vec\":[1,2,3,4]}\n{\"id\":1,\"freq\":0,\"text_vec\":[0,0,0,0.5],\"title\":\"x\"}\n",
        );
        let c = load_catalog(&p).unwrap();
        assert_eq!(c.n_items(), 2);
        assert_eq!(c.text_dim(), 4);
        assert!(c.is_seen(ItemId(0)));
        assert!(!c.is_seen(ItemId(1)));
    }

    #[test]
    fn gap_in_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "c.jsonl",
            "{\"id\":0,\"freq\":1,\"text_vec\":[1]}\n{\"id\":2,\"freq\":1,\"text_vec\":[1]}\n",
        );
        let err = load_catalog(&p).unwrap_err();
        assert!(matches!(err, Error::NonDenseIds { expected: 1, found: 2 }), "{err}");
        assert!(err.to_string().contains("non-dense ids"));
    }

    #[test]
    fn inconsistent_text_width_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "c.jsonl",
            "{\"id\":0,\"freq\":1,\"text_vec\":[1,2]}\n{\"id\":1,\"freq\":1,\"text_vec\":[1]}\n",
        );
        assert!(matches!(load_catalog(&p), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "c.jsonl",
            "{\"id\":0,\"freq\":1,\"text_vec\":[1]}\n{\"id\":1,\"freq\":\n",
        );
        match load_catalog(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn all_zero_frequencies_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.jsonl", "{\"id\":0,\"freq\":0,\"text_vec\":[1]}\n");
        assert!(matches!(load_catalog(&p), Err(Error::InvalidArgument(_))));
    }

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    #[test]
    fn empty_user_serializes_to_objective_and_queries() {
        let rec = InteractionRecord {
            user: "u".into(),
            objective: "CPR".into(),
            ..Default::default()
        };
        let obj = ObjectiveRegistry::default().get("CPR").unwrap();
        let cfg = SerializeConfig {
            max_history: 300,
            n_query_tokens: 3,
        };
        let toks = serialize_user(&rec, &obj, &cfg);
        assert_eq!(
            toks,
            vec![
                Token::Text("Please retrieve items that the user will click on.".into()),
                Token::Query(0),
                Token::Query(1),
                Token::Query(2),
            ]
        );
    }

    #[test]
    fn purchases_fragment_appears_once() {
        let rec = InteractionRecord {
            user: "u".into(),
            objective: "PPR".into(),
            purchased: ids(&[5, 9]),
            ..Default::default()
        };
        let obj = ObjectiveRegistry::default().get("PPR").unwrap();
        let text = render_tokens(&serialize_user(&rec, &obj, &SerializeConfig::default()));
        assert_eq!(text.matches("purchased [5] [9]").count(), 1, "{text}");
        assert!(!text.contains("clicked"));
        assert!(!text.contains("attributes"));
    }

    #[test]
    fn full_user_template() {
        let rec = InteractionRecord {
            user: "u".into(),
            objective: "RQ".into(),
            history: ids(&[8380]),
            favorited: ids(&[7502]),
            purchased: ids(&[8274]),
            query: Some("running shoes".into()),
            attributes: UserAttributes {
                age: Some("30".into()),
                gender: Some("female".into()),
                province: Some("Zhejiang".into()),
                city: Some("Hangzhou".into()),
            },
            ..Default::default()
        };
        let obj = ObjectiveRegistry::default().get("RQ").unwrap();
        let cfg = SerializeConfig {
            max_history: 300,
            n_query_tokens: 2,
        };
        assert_eq!(
            render_tokens(&serialize_user(&rec, &obj, &cfg)),
            "The user attributes are as follows: age 30, gender female, located in Zhejiang, Hangzhou. \
             The user has favorited [7502], purchased [8274], clicked [8380]. \
             Please retrieve items that match the given query: running shoes.<q0><q1>"
        );
    }

    #[test]
    fn history_truncation_keeps_recent_suffix() {
        let history: Vec<ItemId> = (0..500).map(ItemId).collect();
        let rec = InteractionRecord {
            user: "u".into(),
            objective: "CPR".into(),
            history: history.clone(),
            ..Default::default()
        };
        let obj = ObjectiveRegistry::default().get("CPR").unwrap();
        let toks = serialize_user(&rec, &obj, &SerializeConfig::default());
        let kept: Vec<ItemId> = toks
            .iter()
            .filter_map(|t| match t {
                Token::Item(i) => Some(*i),
                _ => None,
            })
            .collect();
        assert_eq!(kept, history[200..].to_vec());
    }

    #[test]
    fn item_template_omits_missing_fields() {
        let meta = vec![
            ItemMetadata {
                title: Some("X".into()),
                ..Default::default()
            },
            ItemMetadata {
                title: Some("Trail runner".into()),
                price: Some("59.90".into()),
                ..Default::default()
            },
            ItemMetadata {
                title: Some("Trail runner".into()),
                category: Some("Shoes".into()),
                price: Some("59.90".into()),
                shop: Some("Peak Outfitters".into()),
                sales: Some("1204".into()),
                ctr: Some("3.1%".into()),
            },
        ];
        let c = CandidateCatalog::new(vec![1, 1, 1], Matrix::zeros(3, 1), meta).unwrap();
        assert_eq!(serialize_item(&c, ItemId(0)).unwrap(), "The item title is X.");
        assert_eq!(
            serialize_item(&c, ItemId(1)).unwrap(),
            "The item title is Trail runner. The price is 59.90."
        );
        assert_eq!(
            serialize_item(&c, ItemId(2)).unwrap(),
            include_str!("../tests/fixtures/full_item.txt").trim_end()
        );
        assert!(matches!(serialize_item(&c, ItemId(3)), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn registry_parses_flat_file_in_order() {
        let reg = ObjectiveRegistry::parse("CPR = \"click\"\nRSA = \"scene a\"\n").unwrap();
        assert_eq!(reg.tags().collect::<Vec<_>>(), vec!["CPR", "RSA"]);
        assert_eq!(reg.index_of("RSA"), Some(1));
        assert!(ObjectiveRegistry::parse("CPR = \"a\"\nCPR = \"b\"\n").is_err());
        assert!(ObjectiveRegistry::parse("CPR = 3\n").is_err());
    }

    #[test]
    fn remap_densifies_sparse_ids() {
        let dir = tempfile::tempdir().unwrap();
        let cat = write(
            &dir,
            "c.jsonl",
            "{\"id\":70,\"freq\":1,\"text_vec\":[1]}\n{\"id\":5,\"freq\":2,\"text_vec\":[2]}\n",
        );
        let inter = write(
            &dir,
            "i.jsonl",
            "{\"user\":\"a\",\"objective\":\"CPR\",\"history\":[70,5,999],\"positives\":[5]}\n",
        );
        let cat_out = dir.path().join("c2.jsonl");
        let inter_out = dir.path().join("i2.jsonl");
        let remap = remap_files(&cat, &cat_out, Some((&inter, &inter_out))).unwrap();
        assert_eq!(remap.original, vec![5, 70]);
        let c = load_catalog(&cat_out).unwrap();
        assert_eq!(c.frequencies(), &[2, 1]);
        let recs = load_interactions(&inter_out, c.n_items()).unwrap();
        assert_eq!(recs[0].history, ids(&[1, 0]));
        assert_eq!(recs[0].positives, ids(&[0]));
    }

    #[test]
    fn interactions_with_bad_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "i.jsonl",
            "{\"user\":\"a\",\"objective\":\"CPR\",\"history\":[0],\"positives\":[1]}\n{\"user\":\"b\",\"objective\":\"CPR\",\"history\":[7],\"positives\":[1]}\n",
        );
        match load_interactions(&p, 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
