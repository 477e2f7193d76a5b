// SPDX-License-Identifier: Apache-2.0

//! Synthetic grounded-captioning tasks.
//!
//! A [`Scene`] is a set of objects on a grid, each with a salience in `[0, 1]`.
//! Rendering hides objects whose salience falls below the view's effective
//! threshold, so a model that only sees the [`Observation`] has to fall back on
//! co-occurrence priors for what it cannot see. Those fallbacks are the
//! hallucinations the rest of the pipeline measures and corrects.
//!
//! The augmentations are symbolic stand-ins for image transforms: crop zooms
//! into a sub-rectangle, noise masks attribute words, contrast halves the
//! visibility threshold and gamma lifts low saliences (`s -> s^gamma`).

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};
use crate::tokenization::{TokenId, Tokenizer, UNK_GLYPH};

pub const CAPTION_PROMPT: &str = "describe the scene.";

/// One object type in the generator's closed inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    /// Presence probability when none of the object's co-occurrence parents is present.
    pub base_rate: f64,
    /// Probability that a present instance is dim (salience drawn from `dim_salience`).
    #[serde(default)]
    pub dim_prob: f64,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

/// `P(child present | parent present) = prob`. Parents must precede children in the inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cooccurrence {
    pub parent: String,
    pub child: String,
    pub prob: f64,
}

/// Visibility rules shared by every rendered view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Objects with salience below this are not rendered in the plain view.
    pub threshold: f64,
    /// Views whose effective threshold is at or below this render with the
    /// high-exposure header.
    pub clear_exposure: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            threshold: 0.5,
            clear_exposure: 0.45,
        }
    }
}

/// Generator configuration; every field has a default (see [`SceneConfig::default`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub max_objects: usize,
    pub objects: Vec<ObjectSpec>,
    pub cooccurrence: Vec<Cooccurrence>,
    pub attributes: Vec<String>,
    pub bright_salience: (f64, f64),
    pub dim_salience: (f64, f64),
    pub render: RenderConfig,
    /// Caption-to-presence query ratio used by [`make_dataset`].
    pub query_ratio: (u32, u32),
    /// How often a caption writer looking at a low-exposure view names the
    /// unseen co-occurrence partner of a visible object.
    pub prior_completion_rate: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let anchor = |name: &str, rate: f64, syn: &[&str]| ObjectSpec {
            name: name.into(),
            base_rate: rate,
            dim_prob: 0.0,
            synonyms: syn.iter().map(|s| s.to_string()).collect(),
        };
        let partner = |name: &str, syn: &[&str]| ObjectSpec {
            name: name.into(),
            base_rate: 0.0,
            dim_prob: 0.3,
            synonyms: syn.iter().map(|s| s.to_string()).collect(),
        };
        let pair = |parent: &str, child: &str| Cooccurrence {
            parent: parent.into(),
            child: child.into(),
            prob: 0.5,
        };
        SceneConfig {
            grid_rows: 4,
            grid_cols: 4,
            max_objects: 8,
            objects: vec![
                anchor("table", 0.5, &[]),
                anchor("road", 0.4, &["street"]),
                anchor("person", 0.5, &["man", "woman"]),
                anchor("bed", 0.35, &[]),
                anchor("cat", 0.25, &["kitty"]),
                anchor("tree", 0.3, &[]),
                anchor("cup", 0.3, &["mug"]),
                anchor("bird", 0.2, &[]),
                partner("chair", &[]),
                partner("car", &["automobile"]),
                partner("dog", &["puppy"]),
                partner("lamp", &[]),
            ],
            cooccurrence: vec![
                pair("table", "chair"),
                pair("road", "car"),
                pair("person", "dog"),
                pair("bed", "lamp"),
            ],
            attributes: ["red", "blue", "green", "small", "big", "old"]
                .map(String::from)
                .to_vec(),
            bright_salience: (0.6, 1.0),
            dim_salience: (0.45, 0.5),
            render: RenderConfig::default(),
            query_ratio: (3, 1),
            prior_completion_rate: 0.85,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.objects.is_empty() {
            return bad("object inventory is empty".into());
        }
        if self.max_objects == 0 || self.max_objects > self.objects.len() {
            return bad(format!(
                "max_objects = {} must lie in 1..={}",
                self.max_objects,
                self.objects.len()
            ));
        }
        if (self.grid_rows as usize) * (self.grid_cols as usize) < self.max_objects {
            return bad("grid has fewer cells than max_objects".into());
        }
        let mut names = BTreeSet::new();
        for o in &self.objects {
            if !names.insert(o.name.as_str()) {
                return bad(format!("duplicate object {:?}", o.name));
            }
            if o.name.is_empty() || !o.name.chars().all(|c| c.is_ascii_lowercase()) {
                return bad(format!("object name {:?} must be lower-case letters", o.name));
            }
            if !(0.0..=1.0).contains(&o.base_rate) || !(0.0..=1.0).contains(&o.dim_prob) {
                return bad(format!("probabilities of {:?} must lie in [0, 1]", o.name));
            }
        }
        for c in &self.cooccurrence {
            let (Some(p), Some(ch)) = (self.index_of(&c.parent), self.index_of(&c.child)) else {
                return bad(format!("co-occurrence {} -> {} names unknown objects", c.parent, c.child));
            };
            if p >= ch {
                return bad(format!("parent {} must precede child {}", c.parent, c.child));
            }
            if !(0.0..=1.0).contains(&c.prob) {
                return bad(format!("co-occurrence {} -> {} outside [0, 1]", c.parent, c.child));
            }
        }
        for (lo, hi) in [self.bright_salience, self.dim_salience] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return bad("salience ranges must be ordered within [0, 1]".into());
            }
        }
        if self.query_ratio.0 + self.query_ratio.1 == 0 {
            return bad("query ratio is 0:0".into());
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.objects.iter().map(|o| o.name.as_str())
    }

    /// Dense `[parent][child]` co-occurrence matrix; zero where no prior is set.
    pub fn cooccurrence_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.objects.len();
        let mut m = vec![vec![0.0; n]; n];
        for c in &self.cooccurrence {
            if let (Some(p), Some(ch)) = (self.index_of(&c.parent), self.index_of(&c.child)) {
                m[p][ch] = c.prob;
            }
        }
        m
    }

    /// Children of `name` in the co-occurrence graph.
    pub fn partners_of<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.cooccurrence
            .iter()
            .filter(move |c| c.parent == name)
            .map(|c| c.child.as_str())
    }

    /// Object names in inventory order, space separated. Unknown names are dropped.
    pub fn canonical_caption<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> String {
        let set: BTreeSet<usize> = names.into_iter().filter_map(|n| self.index_of(n)).collect();
        set.into_iter()
            .map(|i| self.objects[i].name.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub attributes: Vec<String>,
    pub salience: f64,
    pub cell: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub grid: (u32, u32),
    pub rng_seed: u64,
}

impl Scene {
    pub fn contains(&self, name: &str) -> bool {
        self.objects.iter().any(|o| o.name == name)
    }

    pub fn object_names(&self) -> BTreeSet<&str> {
        self.objects.iter().map(|o| o.name.as_str()).collect()
    }

    /// Objects in canonical render order: row-major by cell, then by name.
    fn ordered(&self) -> Vec<(usize, &SceneObject)> {
        let mut v: Vec<(usize, &SceneObject)> = self.objects.iter().enumerate().collect();
        v.sort_by(|a, b| a.1.cell.cmp(&b.1.cell).then_with(|| a.1.name.cmp(&b.1.name)));
        v
    }
}

pub fn sample_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut r = rng(seed);
    let matrix = config.cooccurrence_matrix();
    let n = config.objects.len();

    let mut present = vec![false; n];
    let mut attempts = 0;
    loop {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InvalidConfig(
                "could not draw a scene within the object-count bounds".into(),
            ));
        }
        for i in 0..n {
            let mut absent = 1.0;
            let mut has_parent = false;
            for p in 0..i {
                if present[p] && matrix[p][i] > 0.0 {
                    has_parent = true;
                    absent *= 1.0 - matrix[p][i];
                }
            }
            let prob = if has_parent {
                1.0 - absent
            } else {
                config.objects[i].base_rate
            };
            present[i] = r.gen::<f64>() < prob;
        }
        let count = present.iter().filter(|&&p| p).count();
        if (1..=config.max_objects).contains(&count) {
            break;
        }
    }

    let mut cells: Vec<(u32, u32)> = (0..config.grid_rows)
        .flat_map(|row| (0..config.grid_cols).map(move |col| (row, col)))
        .collect();
    cells.shuffle(&mut r);

    let mut objects = Vec::new();
    for (_, spec) in config.objects.iter().enumerate().filter(|(i, _)| present[*i]) {
        let (lo, hi) = if r.gen::<f64>() < spec.dim_prob {
            config.dim_salience
        } else {
            config.bright_salience
        };
        let salience = if hi > lo { r.gen_range(lo..hi) } else { lo };
        let attributes = match config.attributes.choose(&mut r) {
            Some(a) => vec![a.clone()],
            None => Vec::new(),
        };
        let cell = cells[objects.len()];
        objects.push(SceneObject {
            name: spec.name.clone(),
            attributes,
            salience,
            cell,
        });
    }
    Ok(Scene {
        objects,
        grid: (config.grid_rows, config.grid_cols),
        rng_seed: seed,
    })
}

/// Symbolic image augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum AugmentKind {
    /// Zoom into a random sub-rectangle covering a fraction in `[s_min, s_max]` of the cells.
    Crop { s_min: f64, s_max: f64 },
    /// Mask each visible attribute with probability `rate`.
    NoiseStrong { rate: f64 },
    NoiseWeak { rate: f64 },
    /// Divide the visibility threshold by `factor`.
    Contrast { factor: f64 },
    /// Map salience `s` to `s^gamma`.
    Gamma { gamma: f64 },
}

impl AugmentKind {
    pub fn crop() -> Self {
        AugmentKind::Crop { s_min: 0.2, s_max: 0.5 }
    }
    pub fn noise_strong() -> Self {
        AugmentKind::NoiseStrong { rate: 0.5 }
    }
    pub fn noise_weak() -> Self {
        AugmentKind::NoiseWeak { rate: 0.2 }
    }
    pub fn contrast() -> Self {
        AugmentKind::Contrast { factor: 2.0 }
    }
    pub fn gamma() -> Self {
        AugmentKind::Gamma { gamma: 0.8 }
    }
    /// Full-frame crop: renders exactly like the plain view.
    pub fn identity() -> Self {
        AugmentKind::Crop { s_min: 1.0, s_max: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AugmentKind::Crop { s_min, s_max } => 0.0 < s_min && s_min <= s_max && s_max <= 1.0,
            AugmentKind::NoiseStrong { rate } | AugmentKind::NoiseWeak { rate } => (0.0..=1.0).contains(&rate),
            AugmentKind::Contrast { factor } => factor.is_finite() && factor >= 1.0,
            AugmentKind::Gamma { gamma } => gamma.is_finite() && gamma > 0.0 && gamma <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidAugment(format!("{self:?}")))
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AugmentKind::Crop { .. } => "crop",
            AugmentKind::NoiseStrong { .. } => "noise_strong",
            AugmentKind::NoiseWeak { .. } => "noise_weak",
            AugmentKind::Contrast { .. } => "contrast",
            AugmentKind::Gamma { .. } => "gamma",
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exposure {
    Low,
    High,
}

impl Exposure {
    pub fn header(self) -> &'static str {
        match self {
            Exposure::Low => "lo",
            Exposure::High => "hi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedObject {
    pub name: String,
    /// `None` when the attribute was masked by noise.
    pub attribute: Option<String>,
    pub has_attribute: bool,
}

/// What a model sees of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub exposure: Exposure,
    /// Visible objects in canonical order.
    pub items: Vec<ObservedObject>,
    /// Per scene object (scene order): was it rendered?
    pub visibility: Vec<bool>,
    pub provenance: Option<AugmentKind>,
}

impl Observation {
    /// `"lo red table blue cup"`; masked attributes render as the UNK glyph.
    pub fn text(&self) -> String {
        let mut s = String::from(self.exposure.header());
        for item in &self.items {
            match (&item.attribute, item.has_attribute) {
                (Some(a), _) => {
                    s.push(' ');
                    s.push_str(a);
                }
                (None, true) => {
                    s.push(' ');
                    s.push(UNK_GLYPH);
                }
                (None, false) => {}
            }
            s.push(' ');
            s.push_str(&item.name);
        }
        s
    }

    pub fn tokens(&self, tok: &Tokenizer) -> Vec<TokenId> {
        tok.encode(&self.text())
    }

    pub fn visible_names(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.name.as_str()).collect()
    }
}

fn render_with(
    scene: &Scene,
    render: &RenderConfig,
    effective_threshold: f64,
    region: Option<((u32, u32), (u32, u32))>,
    provenance: Option<AugmentKind>,
) -> Observation {
    let mut visibility = vec![false; scene.objects.len()];
    let mut items = Vec::new();
    for (idx, obj) in scene.ordered() {
        let inside = match region {
            Some(((r0, c0), (r1, c1))) => (r0..r1).contains(&obj.cell.0) && (c0..c1).contains(&obj.cell.1),
            None => true,
        };
        if inside && obj.salience >= effective_threshold {
            visibility[idx] = true;
            items.push(ObservedObject {
                name: obj.name.clone(),
                attribute: obj.attributes.first().cloned(),
                has_attribute: !obj.attributes.is_empty(),
            });
        }
    }
    let exposure = if effective_threshold <= render.clear_exposure {
        Exposure::High
    } else {
        Exposure::Low
    };
    Observation {
        exposure,
        items,
        visibility,
        provenance,
    }
}

/// Plain view at the configured threshold.
pub fn render_view(scene: &Scene, render: &RenderConfig) -> Observation {
    render_with(scene, render, render.threshold, None, None)
}

pub fn augment(scene: &Scene, kind: &AugmentKind, seed: u64, render: &RenderConfig) -> Result<Observation> {
    kind.validate()?;
    let mut r = rng(seed);
    let t = render.threshold;
    let obs = match *kind {
        AugmentKind::Crop { s_min, s_max } => {
            let (rows, cols) = scene.grid;
            let total = (rows * cols) as f64;
            let mut rects = Vec::new();
            for h in 1..=rows {
                for w in 1..=cols {
                    let frac = (h * w) as f64 / total;
                    if frac + 1e-12 >= s_min && frac <= s_max + 1e-12 {
                        for r0 in 0..=(rows - h) {
                            for c0 in 0..=(cols - w) {
                                rects.push(((r0, c0), (r0 + h, c0 + w), frac));
                            }
                        }
                    }
                }
            }
            let Some(&(a, b, frac)) = rects.choose(&mut r) else {
                return Err(Error::InvalidAugment(format!(
                    "no {rows}x{cols} sub-rectangle covers a fraction in [{s_min}, {s_max}]"
                )));
            };
            // Zooming in by 1/frac scales apparent salience by the same factor.
            render_with(scene, render, t * frac, Some((a, b)), Some(*kind))
        }
        AugmentKind::NoiseStrong { rate } | AugmentKind::NoiseWeak { rate } => {
            let mut obs = render_with(scene, render, t, None, Some(*kind));
            for item in obs.items.iter_mut() {
                if item.attribute.is_some() && r.gen::<f64>() < rate {
                    item.attribute = None;
                }
            }
            obs
        }
        AugmentKind::Contrast { factor } => render_with(scene, render, t / factor, None, Some(*kind)),
        AugmentKind::Gamma { gamma } => {
            // s^gamma >= t  <=>  s >= t^(1/gamma)
            render_with(scene, render, t.powf(1.0 / gamma), None, Some(*kind))
        }
    };
    Ok(obs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Query {
    Caption { text: String },
    Presence { object: String, text: String },
}

impl Query {
    pub fn caption() -> Self {
        Query::Caption {
            text: CAPTION_PROMPT.into(),
        }
    }

    pub fn presence(object: &str) -> Self {
        Query::Presence {
            object: object.into(),
            text: format!("is there a {object}?"),
        }
    }

    pub fn text(&self) -> &str {
        match self {
            Query::Caption { text } | Query::Presence { text, .. } => text,
        }
    }

    pub fn is_caption(&self) -> bool {
        matches!(self, Query::Caption { .. })
    }
}

/// Exact answer to `query` given full knowledge of the scene.
pub fn truth_response(scene: &Scene, query: &Query, config: &SceneConfig) -> String {
    match query {
        Query::Caption { .. } => config.canonical_caption(scene.objects.iter().map(|o| o.name.as_str())),
        Query::Presence { object, .. } => yes_no(scene.contains(object)).into(),
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Reference response a caption writer produces from the observation alone.
///
/// On high-exposure views the writer reports exactly what is visible. On
/// low-exposure views the writer also names the unseen co-occurrence partner
/// of each visible object with probability `prior_completion_rate`, whether or
/// not it is actually there. Training on these references is what makes the
/// base model hallucinate.
pub fn reference_response(
    obs: &Observation,
    query: &Query,
    config: &SceneConfig,
    rng: &mut impl Rng,
) -> String {
    let visible = obs.visible_names();
    let mut guessed: BTreeSet<&str> = BTreeSet::new();
    if obs.exposure == Exposure::Low {
        for name in &visible {
            for child in config.partners_of(name) {
                if !visible.contains(child) && !guessed.contains(child) && rng.gen::<f64>() < config.prior_completion_rate {
                    guessed.insert(child);
                }
            }
        }
    }
    match query {
        Query::Caption { .. } => config.canonical_caption(visible.iter().chain(guessed.iter()).copied()),
        Query::Presence { object, .. } => yes_no(visible.contains(object.as_str()) || guessed.contains(object.as_str())).into(),
    }
}

/// One line of the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub query: Query,
    pub scene: Scene,
    pub seed: u64,
}

const STREAM_SCENE: u64 = 1;
const STREAM_QUERY: u64 = 2;

/// `n` (query, scene) records. Query kinds follow `config.query_ratio` by a
/// deterministic stratified interleave; presence queries probe a present
/// object half of the time and otherwise an absent one, preferring unseen
/// co-occurrence partners.
pub fn make_dataset(n: usize, seed: u64, config: &SceneConfig) -> Result<Vec<DatasetRecord>> {
    if n == 0 {
        return Err(Error::InvalidSize("dataset size must be at least 1".into()));
    }
    config.validate()?;
    let (c, p) = config.query_ratio;
    let total = (c + p) as u64;
    (0..n as u64)
        .map(|i| {
            let scene_seed = derive_seed(seed, STREAM_SCENE, i);
            let scene = sample_scene(scene_seed, config)?;
            let is_caption = ((i + 1) * c as u64) / total > (i * c as u64) / total;
            let query = if is_caption {
                Query::caption()
            } else {
                let mut r = rng(derive_seed(seed, STREAM_QUERY, i));
                Query::presence(&pick_probe_object(&scene, config, &mut r))
            };
            Ok(DatasetRecord {
                id: i,
                query,
                scene,
                seed: scene_seed,
            })
        })
        .collect()
}

fn pick_probe_object(scene: &Scene, config: &SceneConfig, r: &mut impl Rng) -> String {
    let present: Vec<&str> = scene.objects.iter().map(|o| o.name.as_str()).collect();
    let absent: Vec<&str> = config.names().filter(|n| !scene.contains(n)).collect();
    if absent.is_empty() || r.gen::<bool>() {
        return present.choose(r).expect("scenes are non-empty").to_string();
    }
    let partners: Vec<&str> = absent
        .iter()
        .copied()
        .filter(|a| present.iter().any(|p| config.partners_of(p).any(|c| c == *a)))
        .collect();
    if !partners.is_empty() && r.gen::<bool>() {
        partners.choose(r).unwrap().to_string()
    } else {
        absent.choose(r).unwrap().to_string()
    }
}

pub fn write_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
