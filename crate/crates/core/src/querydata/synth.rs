//! Synthetic tagged-query corpora whose drop labels follow tag co-occurrence
//! rules.
//!
//! Each query belongs to one category. Its tags are drawn from that
//! category's inventory: required tags always appear, optional tags appear
//! with a fixed probability, and the remaining slots are filled by weighted
//! draws. Surface words come from named pools; tags that share a pool share
//! surface forms, so a word alone does not reveal its tag.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use serde::{Deserialize, Serialize};

use super::{QueryDataError, QueryRecord, LABEL_DROP, LABEL_KEEP};
use crate::util::fnv1a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Free,
    First,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub name: String,
    pub size: usize,
    /// Zipf exponent of word frequencies within the pool.
    pub zipf_exponent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagConfig {
    pub name: String,
    pub pool: String,
    #[serde(default = "free")]
    pub placement: Placement,
    #[serde(default)]
    pub required: bool,
    /// Probability of one occurrence when not required.
    #[serde(default)]
    pub presence: f64,
    /// Weight for filling the remaining slots.
    #[serde(default)]
    pub fill_weight: f64,
}

fn free() -> Placement {
    Placement::Free
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryConfig {
    pub name: String,
    pub weight: f64,
    pub tags: Vec<TagConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleCondition {
    Present,
    Absent,
}

/// A `target` token is dropped when a `trigger` token is present (or absent)
/// elsewhere in the same query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropRule {
    pub target: String,
    pub trigger: String,
    pub when: RuleCondition,
}

impl DropRule {
    pub fn new(target: &str, trigger: &str, when: RuleCondition) -> Self {
        Self {
            target: target.into(),
            trigger: trigger.into(),
            when,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub pools: Vec<PoolConfig>,
    pub categories: Vec<CategoryConfig>,
    /// Query length to probability.
    pub length_dist: BTreeMap<usize, f64>,
    pub rules: Vec<DropRule>,
    pub records: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// Four categories with one trigger/target rule each, 33,334 records.
    /// The target shares its surface pool with a decoy tag that co-occurs
    /// with the trigger but is never dropped, and with long-tail aspect
    /// tags. The trigger follows the type word at the end of the query.
    fn default() -> Self {
        let specs = [
            ("motors", "fitment", "year", "make"),
            ("fashion", "brand", "condition", "color"),
            ("electronics", "carrier", "storage", "model"),
            ("home", "material", "size", "style"),
        ];
        let mut pools = Vec::new();
        let mut categories = Vec::new();
        let mut rules = Vec::new();
        for (cat, trigger, target, decoy) in specs {
            let pool = |suffix: &str, size, zipf_exponent| PoolConfig {
                name: format!("{cat}_{suffix}"),
                size,
                zipf_exponent,
            };
            pools.push(pool("type", 80, 1.0));
            pools.push(pool(trigger, 15, 1.0));
            pools.push(pool("terms", 1500, 1.05));
            let mut tags = vec![
                TagConfig {
                    name: format!("{cat}_type"),
                    pool: format!("{cat}_type"),
                    placement: Placement::Last,
                    required: true,
                    presence: 0.0,
                    fill_weight: 0.0,
                },
                TagConfig {
                    name: trigger.into(),
                    pool: format!("{cat}_{trigger}"),
                    placement: Placement::Last,
                    required: false,
                    presence: 0.5,
                    fill_weight: 0.0,
                },
                TagConfig {
                    name: target.into(),
                    pool: format!("{cat}_terms"),
                    placement: Placement::Free,
                    required: false,
                    presence: 0.0,
                    fill_weight: 0.4,
                },
                TagConfig {
                    name: decoy.into(),
                    pool: format!("{cat}_terms"),
                    placement: Placement::Free,
                    required: false,
                    presence: 0.0,
                    fill_weight: 0.1,
                },
            ];
            for k in 0..80 {
                tags.push(TagConfig {
                    name: format!("{cat}_aspect{k:02}"),
                    pool: format!("{cat}_terms"),
                    placement: Placement::Free,
                    required: false,
                    presence: 0.0,
                    fill_weight: 0.00625,
                });
            }
            categories.push(CategoryConfig {
                name: cat.into(),
                weight: 1.0,
                tags,
            });
            rules.push(DropRule::new(target, trigger, RuleCondition::Present));
        }
        let length_dist = [
            (2, 0.002),
            (3, 0.24),
            (4, 0.28),
            (5, 0.18),
            (6, 0.14),
            (7, 0.10),
            (8, 0.058),
        ]
        .into_iter()
        .collect();
        Self {
            pools,
            categories,
            length_dist,
            rules,
            records: 33_334,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), QueryDataError> {
        let bad = |m: String| Err(QueryDataError::InvalidConfig(m));
        if self.length_dist.is_empty() {
            return bad("empty length distribution".into());
        }
        let total: f64 = self.length_dist.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("length distribution sums to {total}"));
        }
        if let Some((&len, _)) = self.length_dist.iter().find(|(&l, &p)| p > 0.0 && l < 2) {
            return bad(format!("query length {len} below 2"));
        }
        if self.length_dist.values().any(|&p| !(0.0..=1.0).contains(&p)) {
            return bad("length probabilities must lie in [0, 1]".into());
        }
        let pools: HashSet<&str> = self.pools.iter().map(|p| p.name.as_str()).collect();
        for p in &self.pools {
            if p.size == 0 || !(p.zipf_exponent >= 0.0) {
                return bad(format!(
                    "pool `{}` needs a positive size and non-negative exponent",
                    p.name
                ));
            }
        }
        if self.categories.is_empty() || self.categories.iter().all(|c| c.weight <= 0.0) {
            return bad("no category with positive weight".into());
        }
        let min_len = *self
            .length_dist
            .iter()
            .find(|(_, &p)| p > 0.0)
            .map(|(l, _)| l)
            .unwrap_or(&2);
        let max_len = *self
            .length_dist
            .iter()
            .rev()
            .find(|(_, &p)| p > 0.0)
            .map(|(l, _)| l)
            .unwrap_or(&2);
        let mut known = HashSet::new();
        for c in &self.categories {
            if c.weight < 0.0 {
                return bad(format!("category `{}` has negative weight", c.name));
            }
            for t in &c.tags {
                if !pools.contains(t.pool.as_str()) {
                    return bad(format!("tag `{}` uses unknown pool `{}`", t.name, t.pool));
                }
                if !(0.0..=1.0).contains(&t.presence) || t.fill_weight < 0.0 {
                    return bad(format!("tag `{}` has an invalid presence or fill weight", t.name));
                }
                known.insert(t.name.as_str());
            }
            let required = c.tags.iter().filter(|t| t.required).count();
            if required > min_len {
                return bad(format!(
                    "category `{}` requires {required} tags but queries may have {min_len}",
                    c.name
                ));
            }
            let optional = c.tags.iter().filter(|t| !t.required && t.presence > 0.0).count();
            let can_fill = c.tags.iter().any(|t| t.fill_weight > 0.0);
            if !can_fill && max_len > required && required + optional < max_len {
                return bad(format!("category `{}` cannot fill queries of length {max_len}", c.name));
            }
        }
        for r in &self.rules {
            for tag in [&r.target, &r.trigger] {
                if !known.contains(tag.as_str()) {
                    return bad(format!("rule references unknown tag `{tag}`"));
                }
            }
        }
        Ok(())
    }

    /// Drop decision for every position of a tag sequence.
    pub fn apply_rules<S: AsRef<str>>(&self, tags: &[S]) -> Vec<u8> {
        tags.iter()
            .enumerate()
            .map(|(i, t)| {
                let fires = self.rules.iter().filter(|r| r.target == t.as_ref()).any(|r| {
                    let present = tags
                        .iter()
                        .enumerate()
                        .any(|(k, other)| k != i && other.as_ref() == r.trigger);
                    match r.when {
                        RuleCondition::Present => present,
                        RuleCondition::Absent => !present,
                    }
                });
                if fires {
                    LABEL_DROP
                } else {
                    LABEL_KEEP
                }
            })
            .collect()
    }
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "tr",
];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "y"];

/// Distinct pronounceable words for a pool, fixed by the pool name.
fn pool_words(pool: &PoolConfig) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&pool.name));
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(pool.size);
    while words.len() < pool.size {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(NUCLEI[rng.gen_range(0..NUCLEI.len())]);
        }
        if rng.gen_bool(0.3) {
            w.push_str(ONSETS[rng.gen_range(0..12)]);
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

struct PoolSampler {
    words: Vec<String>,
    zipf: Zipf<f64>,
}

impl PoolSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> String {
        let rank = self.zipf.sample(rng) as usize;
        self.words[rank.clamp(1, self.words.len()) - 1].clone()
    }
}

/// Generates `cfg.records` records, deterministic in `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<QueryRecord>, QueryDataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samplers: HashMap<&str, PoolSampler> = cfg
        .pools
        .iter()
        .map(|p| {
            let zipf = Zipf::new(p.size as u64, p.zipf_exponent)
                .map_err(|e| QueryDataError::InvalidConfig(format!("pool `{}`: {e}", p.name)))?;
            Ok((
                p.name.as_str(),
                PoolSampler {
                    words: pool_words(p),
                    zipf,
                },
            ))
        })
        .collect::<Result<_, QueryDataError>>()?;
    let categories = WeightedIndex::new(cfg.categories.iter().map(|c| c.weight))
        .map_err(|e| QueryDataError::InvalidConfig(e.to_string()))?;
    let (lengths, length_probs): (Vec<usize>, Vec<f64>) = cfg.length_dist.iter().map(|(&l, &p)| (l, p)).unzip();
    let lengths_dist = WeightedIndex::new(&length_probs).map_err(|e| QueryDataError::InvalidConfig(e.to_string()))?;
    let fills: Vec<Option<WeightedIndex<f64>>> = cfg
        .categories
        .iter()
        .map(|c| WeightedIndex::new(c.tags.iter().map(|t| t.fill_weight)).ok())
        .collect();

    let mut records = Vec::with_capacity(cfg.records);
    for n in 0..cfg.records {
        let ci = categories.sample(&mut rng);
        let cat = &cfg.categories[ci];
        let len = lengths[lengths_dist.sample(&mut rng)];

        let mut chosen: Vec<&TagConfig> = cat.tags.iter().filter(|t| t.required).collect();
        for t in cat.tags.iter().filter(|t| !t.required && t.presence > 0.0) {
            if rng.gen_bool(t.presence) && chosen.len() < len {
                chosen.push(t);
            }
        }
        while chosen.len() < len {
            let Some(fill) = &fills[ci] else {
                return Err(QueryDataError::Unsatisfiable(format!(
                    "category `{}` has no tags to fill a query of length {len}",
                    cat.name
                )));
            };
            chosen.push(&cat.tags[fill.sample(&mut rng)]);
        }

        let mut first: Vec<&TagConfig> = chosen
            .iter()
            .copied()
            .filter(|t| t.placement == Placement::First)
            .collect();
        let mut middle: Vec<&TagConfig> = chosen
            .iter()
            .copied()
            .filter(|t| t.placement == Placement::Free)
            .collect();
        let last = chosen.iter().copied().filter(|t| t.placement == Placement::Last);
        middle.shuffle(&mut rng);
        first.extend(middle);
        first.extend(last);

        let tags: Vec<String> = first.iter().map(|t| t.name.clone()).collect();
        // Repeated surfaces would make the greedy alignment ambiguous.
        let mut source: Vec<String> = Vec::with_capacity(len);
        for t in &first {
            let sampler = &samplers[t.pool.as_str()];
            let mut word = sampler.sample(&mut rng);
            let mut tries = 0;
            while source.contains(&word) {
                tries += 1;
                if tries > 1000 {
                    return Err(QueryDataError::Unsatisfiable(format!(
                        "pool `{}` cannot supply distinct words for record {n}",
                        t.pool
                    )));
                }
                word = sampler.sample(&mut rng);
            }
            source.push(word);
        }
        let labels = cfg.apply_rules(&tags);
        if labels.iter().all(|&l| l == LABEL_DROP) {
            return Err(QueryDataError::Unsatisfiable(format!(
                "record {n} ({}) would drop every token",
                tags.join(" ")
            )));
        }
        records.push(QueryRecord::from_labels(source, tags, labels)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(records: usize) -> SynthConfig {
        SynthConfig {
            records,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        SynthConfig::default().validate().unwrap();
        let total: f64 = SynthConfig::default().length_dist.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small(300);
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn records_replay_their_rules() {
        let cfg = small(2000);
        for r in generate_synthetic(&cfg).unwrap() {
            assert!(r.len() >= 2);
            assert_eq!(cfg.apply_rules(&r.tags), r.labels);
            r.validate().unwrap();
        }
    }

    #[test]
    fn absent_rules_fire_without_trigger() {
        let cfg = SynthConfig {
            rules: vec![DropRule::new("year", "fitment", RuleCondition::Absent)],
            ..small(1)
        };
        assert_eq!(cfg.apply_rules(&["year", "motors_type"]), vec![3, 2]);
        assert_eq!(cfg.apply_rules(&["fitment", "year", "motors_type"]), vec![2, 2, 2]);
    }

    #[test]
    fn trigger_on_same_token_does_not_count() {
        let cfg = SynthConfig {
            rules: vec![DropRule::new("x", "x", RuleCondition::Present)],
            ..small(1)
        };
        assert_eq!(cfg.apply_rules(&["x", "y"]), vec![2, 2]);
        assert_eq!(cfg.apply_rules(&["x", "x"]), vec![3, 3]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small(10);
        cfg.length_dist.insert(9, 0.5);
        assert!(cfg.validate().is_err());

        let mut cfg = small(10);
        cfg.rules.push(DropRule::new("nope", "brand", RuleCondition::Present));
        assert!(cfg.validate().is_err());

        let mut cfg = small(10);
        cfg.length_dist = [(1, 1.0)].into_iter().collect();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dropping_everything_is_unsatisfiable() {
        let mut cfg = small(50);
        for c in &mut cfg.categories {
            let ty = c.tags[0].name.clone();
            cfg.rules
                .push(DropRule::new(&ty, "nothing_here", RuleCondition::Absent));
        }
        for c in &mut cfg.categories {
            c.tags.push(TagConfig {
                name: "nothing_here".into(),
                pool: c.tags[0].pool.clone(),
                placement: Placement::Free,
                required: false,
                presence: 0.0,
                fill_weight: 0.0,
            });
        }
        cfg.rules.extend(
            ["year", "condition", "storage", "size"].map(|t| DropRule::new(t, "nothing_here", RuleCondition::Absent)),
        );
        for c in &mut cfg.categories {
            for t in &mut c.tags {
                if t.fill_weight > 0.0 && t.name.contains("aspect") {
                    t.fill_weight = 0.0;
                }
            }
            c.tags[1].presence = 0.0;
        }
        assert!(matches!(
            generate_synthetic(&cfg),
            Err(QueryDataError::Unsatisfiable(_))
        ));
    }

    #[test]
    fn pool_words_are_distinct_and_stable() {
        let p = PoolConfig {
            name: "x".into(),
            size: 500,
            zipf_exponent: 1.0,
        };
        let w = pool_words(&p);
        assert_eq!(w.len(), 500);
        assert_eq!(w.iter().collect::<HashSet<_>>().len(), 500);
        assert_eq!(w, pool_words(&p));
    }
}
