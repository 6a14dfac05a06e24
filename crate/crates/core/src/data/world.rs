//! Deterministic compositional scenes standing in for annotated images.
//!
//! A scene holds two to four objects, each with a size and a color, plus one
//! spatial relation between the first two. Its "visual features" are a fixed
//! slot layout: slot `i` carries the sum of the symbol embeddings of object
//! `i`, the last slot carries the relation, and every slot gets Gaussian
//! noise. Five reference captions are rendered from five template grammars.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

pub const REFS_PER_SCENE: usize = 5;

const COUNT_WORDS: [&str; 7] = ["zero", "one", "two", "three", "four", "five", "six"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// (color, object) pairs outside the held-out set.
    InDomain,
    /// Only held-out (color, object) pairs; never seen in training.
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub objects: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    /// `[phrase, inverse phrase]`, e.g. `["left of", "right of"]`.
    pub relations: Vec<(String, String)>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Number of feature slots per scene (R).
    pub num_slots: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    /// Seed of the fixed symbol embedding table, shared by every scene.
    pub symbol_seed: u64,
    /// A (color, object) pair is held out when
    /// `(color + 2 * object) % holdout_modulus == 0`; 0 disables hold-out.
    pub holdout_modulus: usize,
    pub domain: Domain,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            objects: s(&["cube", "ball", "cone", "ring", "star", "disk", "block", "vase"]),
            colors: s(&["red", "blue", "green", "yellow", "white", "black"]),
            sizes: s(&["small", "large"]),
            relations: vec![
                ("left of".into(), "right of".into()),
                ("right of".into(), "left of".into()),
                ("above".into(), "below".into()),
                ("below".into(), "above".into()),
            ],
            min_objects: 2,
            max_objects: 4,
            num_slots: 16,
            feature_dim: 256,
            noise_std: 0.1,
            symbol_seed: 1234,
            holdout_modulus: 4,
            domain: Domain::InDomain,
        }
    }
}

impl WorldConfig {
    pub fn shifted(&self) -> Self {
        Self {
            domain: Domain::Shifted,
            ..self.clone()
        }
    }

    pub fn is_held_out(&self, color: usize, object: usize) -> bool {
        self.holdout_modulus > 0 && (color + 2 * object) % self.holdout_modulus == 0
    }

    /// Colors each object may take in this config's domain.
    fn allowed_colors(&self) -> Vec<Vec<usize>> {
        (0..self.objects.len())
            .map(|o| {
                (0..self.colors.len())
                    .filter(|&c| match self.domain {
                        Domain::InDomain => !self.is_held_out(c, o),
                        Domain::Shifted => self.is_held_out(c, o),
                    })
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let empty = |name: &str, n: usize| {
            if n == 0 {
                Err(Error::Config(format!("world.{name} must not be empty")))
            } else {
                Ok(())
            }
        };
        empty("objects", self.objects.len())?;
        empty("colors", self.colors.len())?;
        empty("sizes", self.sizes.len())?;
        empty("relations", self.relations.len())?;
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return Err(Error::Config(
                "world requires 2 <= min_objects <= max_objects".into(),
            ));
        }
        if self.max_objects >= COUNT_WORDS.len() {
            return Err(Error::Config(format!(
                "world.max_objects must be below {}",
                COUNT_WORDS.len()
            )));
        }
        if self.num_slots < self.max_objects + 1 {
            return Err(Error::Config(
                "world.num_slots must exceed max_objects (one slot holds the relation)".into(),
            ));
        }
        if self.feature_dim == 0 || !(self.noise_std >= 0.0) {
            return Err(Error::Config(
                "world.feature_dim must be positive and noise_std non-negative".into(),
            ));
        }
        let usable = self
            .allowed_colors()
            .iter()
            .filter(|c| !c.is_empty())
            .count();
        if usable < self.max_objects {
            return Err(Error::Config(format!(
                "only {usable} objects have colors available in {:?}; need {}",
                self.domain, self.max_objects
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneObject {
    pub object: usize,
    pub color: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub objects: Vec<SceneObject>,
    /// Relation between `objects[0]` and `objects[1]`.
    pub relation: usize,
}

impl SceneLayout {
    pub fn color_object_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.objects.iter().map(|o| (o.color, o.object))
    }
}

/// Row-major `slots x dim` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub slots: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl Features {
    pub fn zeros(slots: usize, dim: usize) -> Self {
        Self {
            slots,
            dim,
            values: vec![0.0; slots * dim],
        }
    }

    pub fn slot(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// One synthetic "image" with its five reference captions.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance {
    pub id: u64,
    pub seed: u64,
    pub layout: SceneLayout,
    pub features: Features,
    pub references: [String; REFS_PER_SCENE],
}

/// Fixed embedding per symbol, drawn once from `symbol_seed`.
#[derive(Debug, Clone)]
pub struct SymbolTable {
    pub objects: Vec<Vec<f32>>,
    pub colors: Vec<Vec<f32>>,
    pub sizes: Vec<Vec<f32>>,
    pub relations: Vec<Vec<f32>>,
}

impl SymbolTable {
    pub fn new(cfg: &WorldConfig) -> Self {
        let mut rng = Rng::seed_from_u64(cfg.symbol_seed);
        let normal = Normal::new(0.0f64, 1.0 / (cfg.feature_dim as f64).sqrt())
            .expect("finite std");
        let mut table = |n: usize| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| {
                    (0..cfg.feature_dim)
                        .map(|_| normal.sample(&mut rng) as f32)
                        .collect()
                })
                .collect()
        };
        Self {
            objects: table(cfg.objects.len()),
            colors: table(cfg.colors.len()),
            sizes: table(cfg.sizes.len()),
            relations: table(cfg.relations.len()),
        }
    }
}

/// Generates a scene; a pure function of `(seed, cfg)`.
pub fn generate_scene(id: u64, seed: u64, cfg: &WorldConfig) -> Result<SceneInstance> {
    cfg.validate()?;
    let symbols = SymbolTable::new(cfg);
    Ok(generate_with_symbols(id, seed, cfg, &symbols))
}

/// As [`generate_scene`] with a precomputed symbol table (for bulk generation).
pub fn generate_with_symbols(
    id: u64,
    seed: u64,
    cfg: &WorldConfig,
    symbols: &SymbolTable,
) -> SceneInstance {
    let mut rng = Rng::seed_from_u64(seed);
    let layout = sample_layout(cfg, &mut rng);
    let features = render_features(&layout, cfg, symbols, &mut rng);
    let references = render_references(&layout, cfg);
    SceneInstance {
        id,
        seed,
        layout,
        features,
        references,
    }
}

fn sample_layout(cfg: &WorldConfig, rng: &mut Rng) -> SceneLayout {
    let allowed = cfg.allowed_colors();
    let candidates: Vec<usize> = (0..cfg.objects.len())
        .filter(|&o| !allowed[o].is_empty())
        .collect();
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let objects = sample(rng, candidates.len(), count)
        .into_iter()
        .map(|k| {
            let object = candidates[k];
            let colors = &allowed[object];
            SceneObject {
                object,
                color: colors[rng.random_range(0..colors.len())],
                size: rng.random_range(0..cfg.sizes.len()),
            }
        })
        .collect();
    SceneLayout {
        objects,
        relation: rng.random_range(0..cfg.relations.len()),
    }
}

fn render_features(
    layout: &SceneLayout,
    cfg: &WorldConfig,
    symbols: &SymbolTable,
    rng: &mut Rng,
) -> Features {
    let mut features = Features::zeros(cfg.num_slots, cfg.feature_dim);
    let d = cfg.feature_dim;
    let mut add = |slot: usize, v: &[f32]| {
        for (dst, src) in features.values[slot * d..(slot + 1) * d].iter_mut().zip(v) {
            *dst += src;
        }
    };
    for (slot, o) in layout.objects.iter().enumerate() {
        add(slot, &symbols.objects[o.object]);
        add(slot, &symbols.colors[o.color]);
        add(slot, &symbols.sizes[o.size]);
    }
    add(cfg.num_slots - 1, &symbols.relations[layout.relation]);
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0f64, cfg.noise_std / (d as f64).sqrt()).expect("finite std");
        for v in features.values.iter_mut() {
            *v += noise.sample(rng) as f32;
        }
    }
    features
}

fn render_references(layout: &SceneLayout, cfg: &WorldConfig) -> [String; REFS_PER_SCENE] {
    let obj = |i: usize| cfg.objects[layout.objects[i].object].as_str();
    let col = |i: usize| cfg.colors[layout.objects[i].color].as_str();
    let size = |i: usize| cfg.sizes[layout.objects[i].size].as_str();
    let (rel, inv) = {
        let (a, b) = &cfg.relations[layout.relation];
        (a.as_str(), b.as_str())
    };
    let extra = 2..layout.objects.len();

    let mut full = format!(
        "a {} {} {} is {rel} a {} {} {}",
        size(0),
        col(0),
        obj(0),
        size(1),
        col(1),
        obj(1)
    );
    for i in extra.clone() {
        full += &format!(" and a {} {}", col(i), obj(i));
    }

    let mut listing = format!("there is a {} {} and a {} {}", col(0), obj(0), col(1), obj(1));
    for i in extra {
        listing += &format!(" and a {} {}", col(i), obj(i));
    }

    let terse = format!("a {} {rel} a {}", obj(0), obj(1));
    let inverted = format!("a {} {} {inv} a {} {}", col(1), obj(1), col(0), obj(0));
    let counted = format!(
        "{} objects with a {} {} {rel} a {} {}",
        COUNT_WORDS[layout.objects.len()],
        size(0),
        obj(0),
        size(1),
        obj(1)
    );
    [full, listing, terse, inverted, counted]
}

/// All (color, object) pairs present in a set of scenes.
pub fn color_object_pairs<'a>(
    scenes: impl IntoIterator<Item = &'a SceneInstance>,
) -> BTreeSet<(usize, usize)> {
    scenes
        .into_iter()
        .flat_map(|s| s.layout.color_object_pairs())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = WorldConfig::default();
        let a = generate_scene(0, 7, &cfg).unwrap();
        let b = generate_scene(0, 7, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.features.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.features.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = generate_scene(0, 8, &cfg).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn five_distinct_references() {
        let cfg = WorldConfig::default();
        for seed in 0..200 {
            let s = generate_scene(seed, seed, &cfg).unwrap();
            let set: BTreeSet<_> = s.references.iter().collect();
            assert_eq!(set.len(), REFS_PER_SCENE);
            for r in &s.references {
                assert!(r.split_whitespace().count() + 1 <= 20, "{r}");
                assert!(!r.contains("  "));
            }
        }
    }

    #[test]
    fn rejects_empty_inventories() {
        let mut cfg = WorldConfig::default();
        cfg.colors.clear();
        assert!(matches!(generate_scene(0, 0, &cfg), Err(Error::Config(_))));
        let mut cfg = WorldConfig::default();
        cfg.relations.clear();
        assert!(generate_scene(0, 0, &cfg).is_err());
    }

    #[test]
    fn domains_partition_color_object_pairs() {
        let cfg = WorldConfig::default();
        let shifted = cfg.shifted();
        for seed in 0..300 {
            let s = generate_scene(seed, seed, &cfg).unwrap();
            assert!(s.layout.color_object_pairs().all(|(c, o)| !cfg.is_held_out(c, o)));
            let t = generate_scene(seed, seed, &shifted).unwrap();
            assert!(t.layout.color_object_pairs().all(|(c, o)| cfg.is_held_out(c, o)));
        }
    }

    #[test]
    fn features_carry_object_symbols() {
        let cfg = WorldConfig {
            noise_std: 0.0,
            ..WorldConfig::default()
        };
        let symbols = SymbolTable::new(&cfg);
        let s = generate_with_symbols(0, 3, &cfg, &symbols);
        let o = s.layout.objects[0];
        let expected: Vec<f32> = (0..cfg.feature_dim)
            .map(|k| symbols.objects[o.object][k] + symbols.colors[o.color][k] + symbols.sizes[o.size][k])
            .collect();
        assert_eq!(s.features.slot(0), expected.as_slice());
        let empty = s.layout.objects.len();
        assert!(s.features.slot(empty).iter().all(|&v| v == 0.0));
    }
}
