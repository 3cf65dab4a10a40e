//! Synthetic e-commerce catalogs and search sessions.
//!
//! Sessions carry a hidden intent (a category plus a brand affinity) that
//! drives both the user's history and the current query, so the target item
//! is recoverable from context but not from the query text alone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{indexed_rng, stream, stream_rng, Rng};

pub type ItemId = u32;
pub type UserId = u64;

/// Exponent of the power-law prior over categories.
pub const CATEGORY_EXPONENT: f64 = 0.8;
/// Exponent of the power-law prior over brands within a category.
pub const BRAND_EXPONENT: f64 = 1.1;
/// Exponent of the item popularity prior.
pub const POPULARITY_EXPONENT: f64 = 0.9;
/// Default maximum history length.
pub const DEFAULT_HISTORY_LEN: usize = 10;

const CATEGORY_WORDS: &[(&str, &str)] = &[
    ("phone", "smartphone"),
    ("case", "cover"),
    ("charger", "adapter"),
    ("headphone", "earphone"),
    ("laptop", "notebook"),
    ("mouse", "clicker"),
    ("keyboard", "keypad"),
    ("shoe", "sneaker"),
    ("sock", "hosiery"),
    ("jacket", "coat"),
    ("shirt", "tee"),
    ("dress", "gown"),
    ("bag", "tote"),
    ("watch", "timepiece"),
    ("lamp", "lantern"),
    ("chair", "seat"),
    ("desk", "workbench"),
    ("pillow", "cushion"),
    ("blanket", "quilt"),
    ("mug", "cup"),
    ("bottle", "flask"),
    ("kettle", "teapot"),
    ("pan", "skillet"),
    ("knife", "blade"),
    ("towel", "washcloth"),
    ("soap", "cleanser"),
    ("shampoo", "haircare"),
    ("lipstick", "lipcolor"),
    ("perfume", "fragrance"),
    ("toy", "plaything"),
    ("tent", "shelter"),
    ("bike", "bicycle"),
    ("helmet", "headgear"),
    ("camera", "camcorder"),
    ("speaker", "soundbar"),
    ("router", "modem"),
    ("monitor", "screen"),
    ("printer", "copier"),
    ("vase", "urn"),
    ("rug", "carpet"),
];

const BRAND_SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ze", "ru", "ta", "vi", "no", "be", "sa", "do", "fu",
];

pub const COLORS: &[&str] = &[
    "red", "blue", "green", "black", "white", "pink", "grey", "gold", "silver", "navy", "beige",
    "purple",
];

pub const STYLES: &[&str] = &[
    "classic", "sport", "slim", "mini", "pro", "vintage", "soft", "smart", "eco", "deluxe",
    "basic", "travel",
];

pub const AGE_BANDS: &[&str] = &["teen", "young", "adult", "middle", "senior"];
pub const GENDERS: &[&str] = &["female", "male"];
pub const REGIONS: &[&str] = &[
    "north", "south", "east", "west", "central", "coastal", "mountain", "island",
];

/// Query words signalling a price preference within a category.
pub const QUERY_PRICE_WORDS: [&str; 2] = ["cheap", "luxury"];

/// Words of the serialized JSON schemas plus the reasoning-trace template.
pub const TEMPLATE_WORDS: &[&str] = &[
    "profile", "age", "gender", "region", "history", "query", "time", "location", "clicked",
    "non", "current", "title", "price", "brand", "category", "gmv", "none", "budget", "mid",
    "premium",
];

/// Name of the `index`-th category.
pub fn category_name(index: usize) -> String {
    match CATEGORY_WORDS.get(index) {
        Some((name, _)) => (*name).to_string(),
        None => format!("cat{index}"),
    }
}

/// Query-side synonym of a category name.
pub fn category_synonym(name: &str) -> String {
    CATEGORY_WORDS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| (*s).to_string())
        .unwrap_or_else(|| format!("{name}alt"))
}

/// Name of the `index`-th brand: three syllables, unique below 12^3.
pub fn brand_name(index: usize) -> String {
    let n = BRAND_SYLLABLES.len();
    let mut name = format!(
        "{}{}{}",
        BRAND_SYLLABLES[index % n],
        BRAND_SYLLABLES[(index / n) % n],
        BRAND_SYLLABLES[(index / (n * n)) % n]
    );
    if index >= n * n * n {
        name.push_str(&index.to_string());
    }
    name
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: ItemId,
    pub title: String,
    pub brand_id: u32,
    pub brand: String,
    pub category_id: u32,
    pub category: String,
    pub price: f64,
    pub gmv: f64,
}

impl ItemRecord {
    /// Title words in `brand color style category` order.
    pub fn title_words(&self) -> Vec<&str> {
        self.title.split_whitespace().collect()
    }

    /// Units sold, the popularity signal used by the session generator.
    pub fn units(&self) -> f64 {
        (self.gmv / self.price).max(1e-9)
    }
}

/// A query issued by a user, with its click outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEvent {
    pub query_text: String,
    pub timestamp: i64,
    pub location: String,
    pub clicked_items: Vec<ItemId>,
    pub non_clicked_items: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub age: String,
    pub gender: String,
    pub region: String,
}

/// Generator-only factor behind a user's behavior. Never serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentIntent {
    pub category_id: u32,
    pub brand_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserContext {
    pub user_id: UserId,
    pub profile: Profile,
    pub history: Vec<QueryEvent>,
    pub current_query: QueryEvent,
    pub latent_intent: Option<LatentIntent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub context: UserContext,
    pub target_item: ItemId,
}

/// An item collection plus its brand and category vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    items: Vec<ItemRecord>,
    brands: Vec<String>,
    categories: Vec<String>,
    index: HashMap<ItemId, usize>,
}

impl Catalog {
    /// Build a catalog, deriving the vocabularies from the items.
    pub fn new(items: Vec<ItemRecord>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let mut index = HashMap::with_capacity(items.len());
        let mut brands: BTreeMap<u32, String> = BTreeMap::new();
        let mut categories: BTreeMap<u32, String> = BTreeMap::new();
        for (pos, item) in items.iter().enumerate() {
            if index.insert(item.item_id, pos).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate item_id {}",
                    item.item_id
                )));
            }
            if !(item.price > 0.0) || !(item.gmv >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "item {} has price {} and gmv {}",
                    item.item_id, item.price, item.gmv
                )));
            }
            for (vocab, id, name) in [
                (&mut brands, item.brand_id, &item.brand),
                (&mut categories, item.category_id, &item.category),
            ] {
                match vocab.get(&id) {
                    Some(existing) if existing != name => {
                        return Err(Error::InvalidArgument(format!(
                            "id {id} names both {existing:?} and {name:?}"
                        )))
                    }
                    _ => {
                        vocab.insert(id, name.clone());
                    }
                }
            }
        }
        let dense = |m: BTreeMap<u32, String>| -> Vec<String> {
            let len = m.keys().next_back().map_or(0, |k| *k as usize + 1);
            let mut v = vec![String::new(); len];
            for (k, name) in m {
                v[k as usize] = name;
            }
            v
        };
        Ok(Self {
            items,
            brands: dense(brands),
            categories: dense(categories),
            index,
        })
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn brands(&self) -> &[String] {
        &self.brands
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn get(&self, item_id: ItemId) -> Option<&ItemRecord> {
        self.index.get(&item_id).map(|&pos| &self.items[pos])
    }

    pub fn contains(&self, item_id: ItemId) -> bool {
        self.index.contains_key(&item_id)
    }

    /// Same catalog with items reordered by `order` (positions into the
    /// current item list).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        Catalog::new(order.iter().map(|&i| self.items[i].clone()).collect())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.items)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Catalog::new(read_jsonl(path)?)
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn power_law_weights(n: usize, exponent: f64) -> Vec<f64> {
    (0..n).map(|k| 1.0 / ((k + 1) as f64).powf(exponent)).collect()
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

/// Inverse-CDF draw over a cumulative weight table.
fn draw_cumulative(cum: &[f64], rng: &mut Rng) -> usize {
    let total = *cum.last().expect("non-empty weights");
    let u = rng.random::<f64>() * total;
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

/// Generate a catalog whose categories and brands follow power-law priors.
///
/// The first `n_categories` items cover every category once; the remaining
/// items draw their category from the prior. Brands are drawn per item from
/// a power law over a category-specific rotation of the brand list, so each
/// category is dominated by a few brands.
pub fn generate_catalog(
    seed: u64,
    n_items: usize,
    n_brands: usize,
    n_categories: usize,
) -> Result<Catalog> {
    if n_items == 0 {
        return Err(Error::EmptyCatalog);
    }
    if n_categories == 0 || n_brands == 0 || n_items < n_categories {
        return Err(Error::InvalidArgument(format!(
            "need n_items >= n_categories >= 1 and n_brands >= 1, got {n_items}/{n_categories}/{n_brands}"
        )));
    }
    let brands: Vec<String> = (0..n_brands).map(brand_name).collect();
    let categories: Vec<String> = (0..n_categories).map(category_name).collect();

    let mut cat_rng = stream_rng(seed, stream::CATALOG_CATEGORY);
    let cat_cum = cumulative(&power_law_weights(n_categories, CATEGORY_EXPONENT));
    let item_categories: Vec<usize> = (0..n_items)
        .map(|i| {
            if i < n_categories {
                i
            } else {
                draw_cumulative(&cat_cum, &mut cat_rng)
            }
        })
        .collect();

    let mut brand_rng = stream_rng(seed, stream::CATALOG_BRAND);
    let brand_cum = cumulative(&power_law_weights(n_brands, BRAND_EXPONENT));
    let mut attr_rng = stream_rng(seed, stream::CATALOG_ATTRS);
    let mut price_rng = stream_rng(seed, stream::CATALOG_PRICE);
    let base_prices: Vec<f64> = (0..n_categories)
        .map(|_| (5f64.ln() + price_rng.random::<f64>() * (500f64.ln() - 5f64.ln())).exp())
        .collect();
    let price_noise = LogNormal::new(0.0, 0.35).expect("valid lognormal");

    let mut pop_rng = stream_rng(seed, stream::CATALOG_POPULARITY);
    let mut ranks: Vec<usize> = (0..n_items).collect();
    ranks.shuffle(&mut pop_rng);
    let sales_noise = LogNormal::new(0.0, 0.2).expect("valid lognormal");

    let items = (0..n_items)
        .map(|i| {
            let category_id = item_categories[i];
            let offset = (category_id * 7919) % n_brands;
            let brand_id = (offset + draw_cumulative(&brand_cum, &mut brand_rng)) % n_brands;
            let color = COLORS[attr_rng.random_range(0..COLORS.len())];
            let style = STYLES[attr_rng.random_range(0..STYLES.len())];
            let price = round2(base_prices[category_id] * price_noise.sample(&mut price_rng)).max(0.01);
            let popularity = 1.0 / ((ranks[i] + 1) as f64).powf(POPULARITY_EXPONENT);
            let units = (2000.0 * popularity * sales_noise.sample(&mut pop_rng)).round() + 1.0;
            ItemRecord {
                item_id: i as ItemId,
                title: format!(
                    "{} {} {} {}",
                    brands[brand_id], color, style, categories[category_id]
                ),
                brand_id: brand_id as u32,
                brand: brands[brand_id].clone(),
                category_id: category_id as u32,
                category: categories[category_id].clone(),
                price,
                gmv: round2(price * units),
            }
        })
        .collect();
    let catalog = Catalog::new(items)?;
    debug_assert!(catalog.brands().len() <= n_brands);
    Ok(catalog)
}

/// Price band of each item within its category: 0 cheapest third,
/// 1 middle, 2 most expensive third.
pub fn price_bands(catalog: &Catalog) -> HashMap<ItemId, u8> {
    let mut by_cat: BTreeMap<u32, Vec<&ItemRecord>> = BTreeMap::new();
    for item in catalog.items() {
        by_cat.entry(item.category_id).or_default().push(item);
    }
    let mut bands = HashMap::with_capacity(catalog.len());
    for items in by_cat.values_mut() {
        items.sort_by(|a, b| a.price.total_cmp(&b.price).then(a.item_id.cmp(&b.item_id)));
        let n = items.len();
        for (rank, item) in items.iter().enumerate() {
            let band = if 3 * rank < n {
                0
            } else if 3 * rank < 2 * n {
                1
            } else {
                2
            };
            bands.insert(item.item_id, band);
        }
    }
    bands
}

struct WeightedPool {
    items: Vec<usize>,
    dist: WeightedIndex<f64>,
}

impl WeightedPool {
    fn new(items: Vec<usize>, catalog: &Catalog) -> Self {
        let weights: Vec<f64> = items.iter().map(|&i| catalog.items()[i].units()).collect();
        let dist = WeightedIndex::new(&weights).expect("positive weights");
        Self { items, dist }
    }

    fn draw(&self, rng: &mut Rng) -> usize {
        self.items[self.dist.sample(rng)]
    }
}

struct SessionSampler<'a> {
    catalog: &'a Catalog,
    all: WeightedPool,
    by_category: BTreeMap<u32, WeightedPool>,
    by_category_brand: BTreeMap<(u32, u32), WeightedPool>,
    bands: HashMap<ItemId, u8>,
}

impl<'a> SessionSampler<'a> {
    fn new(catalog: &'a Catalog) -> Self {
        let mut cat_lists: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut cb_lists: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
        for (pos, item) in catalog.items().iter().enumerate() {
            cat_lists.entry(item.category_id).or_default().push(pos);
            cb_lists
                .entry((item.category_id, item.brand_id))
                .or_default()
                .push(pos);
        }
        Self {
            catalog,
            all: WeightedPool::new((0..catalog.len()).collect(), catalog),
            by_category: cat_lists
                .into_iter()
                .map(|(k, v)| (k, WeightedPool::new(v, catalog)))
                .collect(),
            by_category_brand: cb_lists
                .into_iter()
                .map(|(k, v)| (k, WeightedPool::new(v, catalog)))
                .collect(),
            bands: price_bands(catalog),
        }
    }

    fn item(&self, pos: usize) -> &ItemRecord {
        &self.catalog.items()[pos]
    }

    fn draw_intent(&self, rng: &mut Rng) -> LatentIntent {
        let category_id = self.item(self.all.draw(rng)).category_id;
        let brand_id = self.item(self.by_category[&category_id].draw(rng)).brand_id;
        LatentIntent {
            category_id,
            brand_id,
        }
    }

    /// An item consistent with the intent: its category, and with
    /// probability 0.6 its preferred brand.
    fn draw_on_intent(&self, intent: LatentIntent, rng: &mut Rng) -> usize {
        if rng.random::<f64>() < 0.6 {
            if let Some(pool) = self
                .by_category_brand
                .get(&(intent.category_id, intent.brand_id))
            {
                return pool.draw(rng);
            }
        }
        self.by_category[&intent.category_id].draw(rng)
    }

    /// Noisy query over an item's attributes: the category (or a synonym) is
    /// always present; brand, color and style survive token dropout.
    fn query_for(&self, pos: usize, rng: &mut Rng) -> String {
        let item = self.item(pos);
        let words = item.title_words();
        let mut out: Vec<String> = Vec::with_capacity(5);
        let band = self.bands[&item.item_id];
        if band != 1 && rng.random::<f64>() < 0.5 {
            out.push(QUERY_PRICE_WORDS[(band / 2) as usize].to_string());
        }
        if rng.random::<f64>() < 0.6 {
            out.push(words[0].to_string());
        }
        if rng.random::<f64>() < 0.45 {
            out.push(words[1].to_string());
        }
        if rng.random::<f64>() < 0.45 {
            out.push(words[2].to_string());
        }
        if rng.random::<f64>() < 0.3 {
            out.push(category_synonym(&item.category));
        } else {
            out.push(item.category.clone());
        }
        out.join(" ")
    }

    fn location(&self, home: &str, rng: &mut Rng) -> String {
        if rng.random::<f64>() < 0.8 {
            home.to_string()
        } else {
            REGIONS[rng.random_range(0..REGIONS.len())].to_string()
        }
    }

    fn user(&self, user_id: UserId, seed: u64, history_len: usize, noise: f64) -> LabeledExample {
        let mut rng = indexed_rng(seed, stream::SESSION, user_id);
        let profile = Profile {
            age: AGE_BANDS[rng.random_range(0..AGE_BANDS.len())].to_string(),
            gender: GENDERS[rng.random_range(0..GENDERS.len())].to_string(),
            region: REGIONS[rng.random_range(0..REGIONS.len())].to_string(),
        };
        let intent = self.draw_intent(&mut rng);
        let n_history = rng.random_range(0..=history_len);
        let gap = LogNormal::new((6.0f64 * 3600.0).ln(), 1.0).expect("valid lognormal");
        let mut time = 1_700_000_000i64 + rng.random_range(0..2_592_000i64);

        let mut history = Vec::with_capacity(n_history);
        for _ in 0..n_history {
            let anchor = if rng.random::<f64>() < 0.75 {
                self.draw_on_intent(intent, &mut rng)
            } else {
                self.all.draw(&mut rng)
            };
            let query_text = self.query_for(anchor, &mut rng);
            let mut clicked = vec![anchor];
            if rng.random::<f64>() < 0.3 {
                let cat = self.item(anchor).category_id;
                let extra = self.by_category[&cat].draw(&mut rng);
                if !clicked.contains(&extra) {
                    clicked.push(extra);
                }
            }
            let mut non_clicked = Vec::new();
            let n_skip = rng.random_range(1..=3);
            for _ in 0..n_skip {
                let cand = if rng.random::<f64>() < 0.5 {
                    self.by_category[&self.item(anchor).category_id].draw(&mut rng)
                } else {
                    self.all.draw(&mut rng)
                };
                if !clicked.contains(&cand) && !non_clicked.contains(&cand) {
                    non_clicked.push(cand);
                }
            }
            let location = self.location(&profile.region, &mut rng);
            history.push(QueryEvent {
                query_text,
                timestamp: time,
                location,
                clicked_items: clicked.iter().map(|&p| self.item(p).item_id).collect(),
                non_clicked_items: non_clicked.iter().map(|&p| self.item(p).item_id).collect(),
            });
            time += (gap.sample(&mut rng).ceil() as i64).max(60);
        }

        let anchor = self.draw_on_intent(intent, &mut rng);
        let query_text = self.query_for(anchor, &mut rng);
        let location = self.location(&profile.region, &mut rng);
        let target = if rng.random::<f64>() < noise {
            rng.random_range(0..self.catalog.len())
        } else {
            anchor
        };
        LabeledExample {
            context: UserContext {
                user_id,
                profile,
                history,
                current_query: QueryEvent {
                    query_text,
                    timestamp: time,
                    location,
                    clicked_items: Vec::new(),
                    non_clicked_items: Vec::new(),
                },
                latent_intent: Some(intent),
            },
            target_item: self.item(target).item_id,
        }
    }
}

/// Generate one labeled search session per user.
///
/// Each user draws a history length uniformly from `0..=history_len`. With
/// probability `1 - noise` the target is the on-intent item the current
/// query was generated from; otherwise it is uniform over the catalog.
pub fn generate_sessions(
    catalog: &Catalog,
    seed: u64,
    n_users: usize,
    history_len: usize,
    noise: f64,
) -> Result<Vec<LabeledExample>> {
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::InvalidArgument(format!("noise {noise} outside [0, 1]")));
    }
    let sampler = SessionSampler::new(catalog);
    Ok((0..n_users as UserId)
        .map(|u| sampler.user(u, seed, history_len, noise))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ContextView {
    profile: Profile,
    history: Vec<EventView>,
    current_query: CurrentView,
}

#[derive(Serialize, Deserialize)]
struct EventView {
    query: String,
    time: i64,
    location: String,
    clicked: Vec<ItemId>,
    non_clicked: Vec<ItemId>,
}

#[derive(Serialize, Deserialize)]
struct CurrentView {
    query: String,
    time: i64,
    location: String,
}

/// Canonical JSON text of a user context.
///
/// Key order is fixed: `profile` (`age`, `gender`, `region`), `history`
/// (chronological; each event `query`, `time`, `location`, `clicked`,
/// `non_clicked`), then `current_query` (`query`, `time`, `location`).
/// The latent intent is never emitted.
pub fn serialize_user_context(ctx: &UserContext) -> String {
    let view = ContextView {
        profile: ctx.profile.clone(),
        history: ctx
            .history
            .iter()
            .map(|e| EventView {
                query: e.query_text.clone(),
                time: e.timestamp,
                location: e.location.clone(),
                clicked: e.clicked_items.clone(),
                non_clicked: e.non_clicked_items.clone(),
            })
            .collect(),
        current_query: CurrentView {
            query: ctx.current_query.query_text.clone(),
            time: ctx.current_query.timestamp,
            location: ctx.current_query.location.clone(),
        },
    };
    serde_json::to_string(&view).expect("context view serializes")
}

/// Inverse of [`serialize_user_context`]; the latent intent is unknown.
pub fn parse_user_context(user_id: UserId, text: &str) -> Result<UserContext> {
    let view: ContextView = serde_json::from_str(text)?;
    Ok(UserContext {
        user_id,
        profile: view.profile,
        history: view
            .history
            .into_iter()
            .map(|e| QueryEvent {
                query_text: e.query,
                timestamp: e.time,
                location: e.location,
                clicked_items: e.clicked,
                non_clicked_items: e.non_clicked,
            })
            .collect(),
        current_query: QueryEvent {
            query_text: view.current_query.query,
            timestamp: view.current_query.time,
            location: view.current_query.location,
            clicked_items: Vec::new(),
            non_clicked_items: Vec::new(),
        },
        latent_intent: None,
    })
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

/// Canonical JSON text of an item: `title`, `price`, `brand`, `category`,
/// `gmv`, with money rendered to two decimals.
pub fn serialize_item_context(item: &ItemRecord) -> String {
    format!(
        "{{\"title\":{},\"price\":{:.2},\"brand\":{},\"category\":{},\"gmv\":{:.2}}}",
        json_str(&item.title),
        item.price,
        json_str(&item.brand),
        json_str(&item.category),
        item.gmv
    )
}

/// Split users (not examples) into train and eval sides.
pub fn split_by_user<T: Clone>(
    examples: &[T],
    user_of: impl Fn(&T) -> UserId,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Split(format!(
            "holdout fraction {holdout_fraction} must lie in (0, 1)"
        )));
    }
    let users: BTreeSet<UserId> = examples.iter().map(&user_of).collect();
    if users.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 users, found {}",
            users.len()
        )));
    }
    let mut users: Vec<UserId> = users.into_iter().collect();
    users.shuffle(&mut stream_rng(seed, stream::SPLIT));
    let n_eval = ((users.len() as f64 * holdout_fraction).round() as usize).clamp(1, users.len() - 1);
    let eval_users: BTreeSet<UserId> = users[..n_eval].iter().copied().collect();
    let (eval, train): (Vec<T>, Vec<T>) = examples
        .iter()
        .cloned()
        .partition(|e| eval_users.contains(&user_of(e)));
    Ok((train, eval))
}

pub fn split_dataset(
    examples: &[LabeledExample],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    split_by_user(examples, |e| e.context.user_id, holdout_fraction, seed)
}

/// One persisted corpus line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub user_id: UserId,
    pub context_text: String,
    pub target_item: ItemId,
}

impl CorpusRecord {
    pub fn from_example(example: &LabeledExample) -> Self {
        Self {
            user_id: example.context.user_id,
            context_text: serialize_user_context(&example.context),
            target_item: example.target_item,
        }
    }

    pub fn to_example(&self) -> Result<LabeledExample> {
        Ok(LabeledExample {
            context: parse_user_context(self.user_id, &self.context_text)?,
            target_item: self.target_item,
        })
    }
}

pub fn write_corpus(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let records: Vec<CorpusRecord> = examples.iter().map(CorpusRecord::from_example).collect();
    write_jsonl(path, &records)
}

pub fn read_corpus(path: &Path) -> Result<Vec<LabeledExample>> {
    read_jsonl::<CorpusRecord>(path)?
        .iter()
        .map(CorpusRecord::to_example)
        .collect()
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_catalog() -> Catalog {
        generate_catalog(7, 100, 10, 5).unwrap()
    }

    #[test]
    fn catalog_ids_are_distinct() {
        let catalog = small_catalog();
        assert_eq!(catalog.len(), 100);
        let ids: BTreeSet<ItemId> = catalog.items().iter().map(|i| i.item_id).collect();
        assert_eq!(ids.len(), 100);
        for item in catalog.items() {
            assert!(item.price > 0.0 && item.gmv >= 0.0);
            let words = item.title_words();
            assert_eq!(words[0], item.brand);
            assert_eq!(words[3], item.category);
        }
    }

    #[test]
    fn catalog_is_deterministic() {
        assert_eq!(small_catalog(), small_catalog());
        assert_ne!(small_catalog(), generate_catalog(8, 100, 10, 5).unwrap());
    }

    #[test]
    fn catalog_rejects_bad_sizes() {
        assert!(matches!(generate_catalog(1, 0, 3, 1), Err(Error::EmptyCatalog)));
        assert!(generate_catalog(1, 3, 3, 5).is_err());
        assert!(generate_catalog(1, 3, 0, 1).is_err());
    }

    #[test]
    fn every_category_is_populated() {
        let catalog = generate_catalog(3, 40, 6, 20).unwrap();
        let cats: BTreeSet<u32> = catalog.items().iter().map(|i| i.category_id).collect();
        assert_eq!(cats.len(), 20);
    }

    #[test]
    fn noiseless_targets_follow_the_intent() {
        let catalog = small_catalog();
        let examples = generate_sessions(&catalog, 11, 300, 0, 0.0).unwrap();
        for ex in &examples {
            assert!(ex.context.history.is_empty());
            let intent = ex.context.latent_intent.unwrap();
            let target = catalog.get(ex.target_item).unwrap();
            assert_eq!(target.category_id, intent.category_id);
            // The query always names the category, possibly via its synonym.
            let q = &ex.context.current_query.query_text;
            let last = q.split_whitespace().last().unwrap();
            assert!(last == target.category || last == category_synonym(&target.category));
        }
    }

    #[test]
    fn sessions_are_deterministic_and_well_formed() {
        let catalog = small_catalog();
        let a = generate_sessions(&catalog, 5, 50, 10, 0.3).unwrap();
        let b = generate_sessions(&catalog, 5, 50, 10, 0.3).unwrap();
        assert_eq!(a, b);
        for ex in &a {
            assert!(catalog.contains(ex.target_item));
            assert!(ex.context.history.len() <= 10);
            let times: Vec<i64> = ex.context.history.iter().map(|e| e.timestamp).collect();
            assert!(times.windows(2).all(|w| w[0] < w[1]));
            if let Some(last) = times.last() {
                assert!(*last < ex.context.current_query.timestamp);
            }
            for e in &ex.context.history {
                assert!(e.clicked_items.iter().all(|c| !e.non_clicked_items.contains(c)));
                assert!(!e.clicked_items.is_empty());
            }
            assert!(ex.context.current_query.clicked_items.is_empty());
        }
    }

    #[test]
    fn empty_history_serializes_as_empty_array() {
        let catalog = small_catalog();
        let ex = &generate_sessions(&catalog, 1, 1, 0, 0.0).unwrap()[0];
        let text = serialize_user_context(&ex.context);
        assert!(text.contains("\"history\":[]"));
        assert!(text.contains("\"current_query\":{\"query\":"));
        assert_eq!(text, serialize_user_context(&ex.context));
    }

    #[test]
    fn serialized_history_is_chronological_and_hides_intent() {
        let catalog = small_catalog();
        let examples = generate_sessions(&catalog, 2, 40, 10, 0.2).unwrap();
        let ex = examples
            .iter()
            .find(|e| e.context.history.len() >= 3)
            .unwrap();
        let text = serialize_user_context(&ex.context);
        assert!(!text.contains("intent"));
        assert!(text.starts_with("{\"profile\":{\"age\":"));
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let times: Vec<i64> = value["history"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["time"].as_i64().unwrap())
            .collect();
        assert!(times.windows(2).all(|w| w[0] < w[1]));
        let parsed = parse_user_context(ex.context.user_id, &text).unwrap();
        assert_eq!(parsed.history, ex.context.history);
        assert_eq!(serialize_user_context(&parsed), text);
    }

    #[test]
    fn item_context_has_exactly_five_keys() {
        let catalog = small_catalog();
        for item in catalog.items().iter().take(20) {
            let text = serialize_item_context(item);
            let value: serde_json::Map<String, serde_json::Value> =
                serde_json::from_str(&text).unwrap();
            let keys: Vec<&str> = value.keys().map(String::as_str).collect();
            let mut expected = vec!["title", "price", "brand", "category", "gmv"];
            expected.sort();
            let mut keys_sorted = keys.clone();
            keys_sorted.sort();
            assert_eq!(keys_sorted, expected);
            assert_eq!(value["price"].as_f64().unwrap(), item.price);
            assert_eq!(value["gmv"].as_f64().unwrap(), item.gmv);
            assert_eq!(text, serialize_item_context(&item.clone()));
        }
    }

    #[test]
    fn split_is_user_disjoint_and_sized() {
        let catalog = small_catalog();
        let examples = generate_sessions(&catalog, 1, 100, 2, 0.5).unwrap();
        let (train, eval) = split_dataset(&examples, 0.2, 9).unwrap();
        assert_eq!(train.len() + eval.len(), 100);
        assert!((eval.len() as i64 - 20).abs() <= 1);
        let tu: BTreeSet<UserId> = train.iter().map(|e| e.context.user_id).collect();
        assert!(eval.iter().all(|e| !tu.contains(&e.context.user_id)));
        let (train2, eval2) = split_dataset(&examples, 0.2, 9).unwrap();
        assert_eq!((train, eval), (train2, eval2));
    }

    #[test]
    fn split_errors() {
        let catalog = small_catalog();
        let examples = generate_sessions(&catalog, 1, 1, 2, 0.5).unwrap();
        assert!(matches!(split_dataset(&examples, 0.5, 0), Err(Error::Split(_))));
        let examples = generate_sessions(&catalog, 1, 4, 2, 0.5).unwrap();
        assert!(split_dataset(&examples, 0.0, 0).is_err());
        assert!(split_dataset(&examples, 1.0, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = small_catalog();
        catalog.write_jsonl(&dir.path().join("catalog.jsonl")).unwrap();
        assert_eq!(Catalog::read_jsonl(&dir.path().join("catalog.jsonl")).unwrap(), catalog);
        let mut examples = generate_sessions(&catalog, 3, 10, 4, 0.1).unwrap();
        write_corpus(&dir.path().join("c.jsonl"), &examples).unwrap();
        let back = read_corpus(&dir.path().join("c.jsonl")).unwrap();
        for e in &mut examples {
            e.context.latent_intent = None;
        }
        assert_eq!(back, examples);
    }
}
