//! Deterministic generator of grounded-captioning instances: scenes of
//! regions with object/attribute identities, template captions with NP/NV
//! tags and exact gold token-to-region alignment, and noisy one-hot block
//! features.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::captioner::{RegionFeatureSet, BOS, EOS};
use crate::error::{Error, Result};
use crate::prophet::{TaggedCaption, TokenTag};

/// Broad class of a vocabulary token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordClass {
    Reserved,
    NonVisual,
    Object,
    Attribute,
    Relation,
}

/// Fixed word lists with disjoint classes and a stable token-id assignment:
/// reserved ids first, then non-visual words, objects, attributes, relations.
#[derive(Debug, Clone)]
pub struct Catalog {
    pub objects: Vec<String>,
    pub attributes: Vec<String>,
    pub relations: Vec<String>,
    pub nv_words: Vec<String>,
}

impl Default for Catalog {
    fn default() -> Self {
        let words = |list: &[&str]| list.iter().map(|s| s.to_string()).collect();
        Catalog {
            objects: words(&[
                "shirt", "pants", "car", "dog", "house", "tree", "ball", "hat", "cat", "bird",
                "chair", "table", "cup", "book", "bike", "umbrella",
            ]),
            attributes: words(&[
                "black", "white", "red", "green", "blue", "yellow", "brown", "gray", "purple",
                "orange",
            ]),
            relations: words(&["beside", "above", "under", "near", "behind", "facing"]),
            nv_words: words(&["a", "the", "of"]),
        }
    }
}

const NUM_RESERVED: usize = 3;

impl Catalog {
    pub fn vocab_size(&self) -> usize {
        NUM_RESERVED
            + self.nv_words.len()
            + self.objects.len()
            + self.attributes.len()
            + self.relations.len()
    }

    pub fn nv_token(&self, i: usize) -> usize {
        NUM_RESERVED + i
    }

    pub fn object_token(&self, i: usize) -> usize {
        NUM_RESERVED + self.nv_words.len() + i
    }

    pub fn attribute_token(&self, i: usize) -> usize {
        self.object_token(self.objects.len()) + i
    }

    pub fn relation_token(&self, i: usize) -> usize {
        self.attribute_token(self.attributes.len()) + i
    }

    pub fn word_class(&self, token: usize) -> WordClass {
        if token < NUM_RESERVED {
            WordClass::Reserved
        } else if token < self.object_token(0) {
            WordClass::NonVisual
        } else if token < self.attribute_token(0) {
            WordClass::Object
        } else if token < self.relation_token(0) {
            WordClass::Attribute
        } else {
            WordClass::Relation
        }
    }

    /// Object index of an object-class token.
    pub fn object_index(&self, token: usize) -> Option<usize> {
        (self.word_class(token) == WordClass::Object).then(|| token - self.object_token(0))
    }

    pub fn word(&self, token: usize) -> &str {
        match self.word_class(token) {
            WordClass::Reserved => ["<bos>", "<eos>", "<pad>"][token],
            WordClass::NonVisual => &self.nv_words[token - self.nv_token(0)],
            WordClass::Object => &self.objects[token - self.object_token(0)],
            WordClass::Attribute => &self.attributes[token - self.attribute_token(0)],
            WordClass::Relation => &self.relations[token - self.relation_token(0)],
        }
    }
}

/// One region of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub object: usize,
    pub attribute: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub regions: Vec<Region>,
}

/// One benchmark instance: scene, noisy features, tagged caption.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub scene: Scene,
    pub features: RegionFeatureSet,
    pub caption: TaggedCaption,
}

/// Generator settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
    /// Tag caption articles as NV instead of NP-span members.
    pub articles_as_nv: bool,
    /// Fraction of scenes forced to contain two regions sharing an attribute.
    pub ambiguity_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_min: 2,
            n_max: 5,
            feat_dim: 32,
            noise_sigma: 0.1,
            articles_as_nv: false,
            ambiguity_fraction: 0.5,
        }
    }
}

impl GenConfig {
    fn validate(&self, catalog: &Catalog) -> Result<()> {
        if self.n_min < 2 {
            return Err(Error::InvalidConfig(
                "two-NP template needs at least 2 regions (n_min >= 2)".into(),
            ));
        }
        if self.n_min > self.n_max {
            return Err(Error::InvalidConfig("n_min > n_max".into()));
        }
        let block = catalog.objects.len() + catalog.attributes.len();
        if self.feat_dim < block {
            return Err(Error::InvalidConfig(format!(
                "feat_dim {} smaller than one-hot block width {}",
                self.feat_dim, block
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_fraction) {
            return Err(Error::InvalidConfig("ambiguity_fraction outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Region feature: one-hot object block then one-hot attribute block, zero
/// padded to `feat_dim`, plus elementwise Gaussian noise.
fn region_feature(
    region: Region,
    catalog: &Catalog,
    config: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut v = vec![0.0; config.feat_dim];
    v[region.object] = 1.0;
    v[catalog.objects.len() + region.attribute] = 1.0;
    if config.noise_sigma > 0.0 {
        for x in &mut v {
            let n: f64 = StandardNormal.sample(rng);
            *x += config.noise_sigma * n;
        }
    }
    v
}

/// Deterministically generate one instance from a seed.
///
/// Caption shape: BOS, [a ATTR OBJ] for a subject region, REL, [a ATTR OBJ]
/// for a distinct object region, EOS. The relation token is tagged OTHER and
/// gold-aligned to the subject region.
pub fn generate_instance(seed: u64, catalog: &Catalog, config: &GenConfig) -> Result<Instance> {
    config.validate(catalog)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n = rng.random_range(config.n_min..=config.n_max);
    let mut regions: Vec<Region> = (0..n)
        .map(|_| Region {
            object: rng.random_range(0..catalog.objects.len()),
            attribute: rng.random_range(0..catalog.attributes.len()),
        })
        .collect();

    // Ambiguity stressor: give the lexicographically smallest region (the
    // caption subject, chosen below) a distractor sharing its object word but
    // carrying a different attribute. The object word alone then cannot
    // identify the region; only attribute binding can.
    if rng.random_range(0.0..1.0) < config.ambiguity_fraction {
        let key = |r: &Region| (r.object, r.attribute);
        let first = (0..n).min_by_key(|&i| key(&regions[i])).unwrap();
        let mut second = rng.random_range(0..n - 1);
        if second >= first {
            second += 1;
        }
        regions[second].object = regions[first].object;
        if regions[second].attribute == regions[first].attribute {
            regions[second].attribute =
                (regions[first].attribute + 1) % catalog.attributes.len();
        }
    }

    // Deterministic narrative: the subject is the lexicographically smallest
    // (object, attribute) region and the sentence object the largest, with
    // index as tie-breaker; the relation is a function of the pair. The whole
    // caption is therefore predictable from the scene alone, so attention
    // quality is the only obstacle to reproducing it.
    let key = |i: usize| (regions[i].object, regions[i].attribute, i);
    let subject = (0..n).min_by_key(|&i| key(i)).unwrap();
    let object = (0..n).max_by_key(|&i| key(i)).unwrap();
    let relation = (regions[subject].object + regions[object].object) % catalog.relations.len();

    let article = catalog.nv_token(0);
    let mut tokens = vec![BOS];
    let mut tags = vec![TokenTag::NonVisual];
    let mut gold = vec![None];
    for region_idx in [subject, object] {
        let region = regions[region_idx];
        let phrase_start = tokens.len();
        // Object before attribute: the object word lands right after the
        // region transition, where lagging attention is most likely to point
        // at the previous phrase's region.
        tokens.extend([
            article,
            catalog.object_token(region.object),
            catalog.attribute_token(region.attribute),
        ]);
        let span_start = if config.articles_as_nv {
            phrase_start + 1
        } else {
            phrase_start
        };
        let span_end = phrase_start + 2;
        if config.articles_as_nv {
            tags.push(TokenTag::NonVisual);
            gold.push(None);
        } else {
            tags.push(TokenTag::NounPhrase {
                start: span_start,
                end: span_end,
            });
            gold.push(Some(region_idx));
        }
        for _ in 0..2 {
            tags.push(TokenTag::NounPhrase {
                start: span_start,
                end: span_end,
            });
            gold.push(Some(region_idx));
        }
        if region_idx == subject {
            tokens.push(catalog.relation_token(relation));
            tags.push(TokenTag::Other);
            gold.push(Some(subject));
        }
    }
    tokens.push(EOS);
    tags.push(TokenTag::NonVisual);
    gold.push(None);

    let columns: Vec<Vec<f64>> = regions
        .iter()
        .map(|&r| region_feature(r, catalog, config, &mut rng))
        .collect();
    let features = feature_set_from_columns(&columns)?;

    let caption = TaggedCaption {
        tokens,
        tags,
        gold_regions: gold,
    };
    caption.validate()?;
    Ok(Instance {
        seed,
        scene: Scene { regions },
        features,
        caption,
    })
}

/// Build the d x N feature matrix from per-region column vectors.
pub fn feature_set_from_columns(columns: &[Vec<f64>]) -> Result<RegionFeatureSet> {
    let n = columns.len();
    let d = columns.first().map_or(0, |c| c.len());
    let mut data = vec![0.0; d * n];
    for (j, col) in columns.iter().enumerate() {
        if col.len() != d {
            return Err(Error::BadShape {
                op: "region-features",
                shape: vec![col.len()],
            });
        }
        for (i, &v) in col.iter().enumerate() {
            data[i * n + j] = v;
        }
    }
    RegionFeatureSet::new(Tensor::new(vec![d, n], data))
}

/// Deterministic train/val/test split; instance k consumes its own derived
/// seed, so splits are disjoint by construction.
pub fn make_split(
    seed: u64,
    catalog: &Catalog,
    sizes: (usize, usize, usize),
    config: &GenConfig,
) -> Result<(Vec<Instance>, Vec<Instance>, Vec<Instance>)> {
    let (train, val, test) = sizes;
    // SplitMix64-style spread keeps instance seeds far from run seeds.
    let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x1234_5678);
    let make = |count: usize, offset: u64| -> Result<Vec<Instance>> {
        (0..count as u64)
            .map(|k| generate_instance(base.wrapping_add(offset + k), catalog, config))
            .collect()
    };
    let train_set = make(train, 0)?;
    let val_set = make(val, train as u64)?;
    let test_set = make(test, (train + val) as u64)?;
    Ok((train_set, val_set, test_set))
}

// ── Dataset file format ──────────────────────────────────────────────

/// One JSONL record; features are stored per region.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetRecord {
    seed: u64,
    regions: Vec<Region>,
    features: Vec<Vec<f64>>,
    tokens: Vec<usize>,
    tags: Vec<String>,
    gold_regions: Vec<Option<usize>>,
}

fn tag_to_string(tag: TokenTag) -> String {
    match tag {
        TokenTag::NounPhrase { start, end } => format!("np:{start}:{end}"),
        TokenTag::NonVisual => "nv".to_string(),
        TokenTag::Other => "other".to_string(),
    }
}

fn tag_from_string(s: &str) -> Option<TokenTag> {
    match s {
        "nv" => Some(TokenTag::NonVisual),
        "other" => Some(TokenTag::Other),
        _ => {
            let rest = s.strip_prefix("np:")?;
            let (start, end) = rest.split_once(':')?;
            Some(TokenTag::NounPhrase {
                start: start.parse().ok()?,
                end: end.parse().ok()?,
            })
        }
    }
}

pub fn write_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for inst in instances {
        let d = inst.features.feat_dim();
        let n = inst.features.num_regions();
        let features = (0..n)
            .map(|j| (0..d).map(|i| inst.features.v.at(i, j)).collect())
            .collect();
        let record = DatasetRecord {
            seed: inst.seed,
            regions: inst.scene.regions.clone(),
            features,
            tokens: inst.caption.tokens.clone(),
            tags: inst.caption.tags.iter().map(|&t| tag_to_string(t)).collect(),
            gold_regions: inst.caption.gold_regions.clone(),
        };
        serde_json::to_writer(&mut file, &record)
            .map_err(|e| Error::Dataset { line: 0, message: e.to_string() })?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Instance>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let bad = |message: String| Error::Dataset { line: line_no, message };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let tags = record
            .tags
            .iter()
            .map(|s| tag_from_string(s).ok_or_else(|| bad(format!("bad tag `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let caption = TaggedCaption {
            tokens: record.tokens,
            tags,
            gold_regions: record.gold_regions,
        };
        caption
            .validate()
            .map_err(|e| bad(e.to_string()))?;
        let features = feature_set_from_columns(&record.features)
            .map_err(|e| bad(e.to_string()))?;
        let n = features.num_regions();
        for (t, gold) in caption.gold_regions.iter().enumerate() {
            if let Some(g) = gold {
                if *g >= n {
                    return Err(bad(format!(
                        "gold region {g} at token {t} out of range ({n} regions)"
                    )));
                }
            }
        }
        instances.push(Instance {
            seed: record.seed,
            scene: Scene { regions: record.regions },
            features,
            caption,
        });
    }
    Ok(instances)
}
