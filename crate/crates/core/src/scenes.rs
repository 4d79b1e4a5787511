//! Procedural grid scenes with exact captions and question answering.
//!
//! A scene places one to five colored shapes on a 4x4 grid, at most one per
//! cell. Rendering rasterizes each object as a fixed 8x8 stencil into a
//! 3x32x32 image with an exactly zero background, so the ground truth for
//! every caption and question is known by construction and the renderer is
//! bit-deterministic.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_for;
use crate::tensor::{Scalar, Tensor};

/// Grid side length in cells.
pub const GRID: usize = 4;
/// Cell side length in pixels.
pub const CELL: usize = 8;
/// Image side length in pixels.
pub const IMG: usize = GRID * CELL;
/// Color channels.
pub const CHANNELS: usize = 3;
/// Most objects a scene can hold.
pub const MAX_OBJECTS: usize = 5;

pub const COUNT_WORDS: [&str; 6] = ["zero", "one", "two", "three", "four", "five"];

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("scene has {0} objects, expected 1..={MAX_OBJECTS}")]
    ObjectCount(usize),
    #[error("object at row {row} col {col} is outside the {GRID}x{GRID} grid")]
    OutOfGrid { row: usize, col: usize },
    #[error("two objects share cell row {row} col {col}")]
    CellCollision { row: usize, col: usize },
    #[error("could not sample a scene with {want} within {attempts} attempts")]
    ResampleExhausted { want: &'static str, attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Circle => "circles",
            Shape::Square => "squares",
            Shape::Triangle => "triangles",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [bool; 3] {
        match self {
            Color::Red => [true, false, false],
            Color::Green => [false, true, false],
            Color::Blue => [false, false, true],
            Color::Yellow => [true, true, false],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub row: usize,
    pub col: usize,
    pub shape: Shape,
    pub color: Color,
}

impl fmt::Display for SceneObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.word(), self.shape.word())
    }
}

/// Objects stored in row-major order (top row first, left to right).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(SceneError::ObjectCount(self.objects.len()));
        }
        let mut cells = BTreeSet::new();
        for o in &self.objects {
            if o.row >= GRID || o.col >= GRID {
                return Err(SceneError::OutOfGrid {
                    row: o.row,
                    col: o.col,
                });
            }
            if !cells.insert((o.row, o.col)) {
                return Err(SceneError::CellCollision {
                    row: o.row,
                    col: o.col,
                });
            }
        }
        Ok(())
    }

    /// Canonical identity for scene-disjointness bookkeeping.
    pub fn signature(&self) -> Vec<SceneObject> {
        let mut objs = self.objects.clone();
        objs.sort();
        objs
    }
}

/// One shape's 8x8 stencil. `#` pixels take the object color, `.` pixels
/// stay background.
fn stencil(shape: Shape) -> [&'static str; 8] {
    match shape {
        Shape::Square => [
            "........",
            ".######.",
            ".######.",
            ".######.",
            ".######.",
            ".######.",
            ".######.",
            "........",
        ],
        Shape::Circle => [
            "........",
            "..####..",
            ".######.",
            ".######.",
            ".######.",
            ".######.",
            "..####..",
            "........",
        ],
        Shape::Triangle => [
            "........",
            "...##...",
            "...##...",
            "..####..",
            "..####..",
            ".######.",
            ".######.",
            "........",
        ],
    }
}

/// Rasterize a scene to `[3, 32, 32]` with values exactly zero or one.
pub fn render<S: Scalar>(spec: &SceneSpec) -> Result<Tensor<S>, SceneError> {
    spec.validate()?;
    let mut img = Tensor::zeros(&[CHANNELS, IMG, IMG]);
    let data = img.data_mut();
    for o in &spec.objects {
        let art = stencil(o.shape);
        let rgb = o.color.rgb();
        for (dr, line) in art.iter().enumerate() {
            for (dc, ch) in line.bytes().enumerate() {
                if ch != b'#' {
                    continue;
                }
                let (r, c) = (o.row * CELL + dr, o.col * CELL + dc);
                for (chan, &on) in rgb.iter().enumerate() {
                    if on {
                        data[(chan * IMG + r) * IMG + c] = S::ONE;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Exact caption: objects in row-major order, each as "a <color> <shape>",
/// joined with "and".
pub fn caption(spec: &SceneSpec) -> String {
    let mut objs = spec.objects.clone();
    objs.sort_by_key(|o| (o.row, o.col));
    objs.iter()
        .map(|o| format!("a {o}"))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Counting-style caption: per-shape totals in `Shape::ALL` order, absent
/// shapes omitted — "one circle and two squares". A second way people
/// describe the same scene; it grounds the count words visually.
pub fn count_caption(spec: &SceneSpec) -> String {
    Shape::ALL
        .iter()
        .filter_map(|&s| {
            let n = spec.objects.iter().filter(|o| o.shape == s).count();
            match n {
                0 => None,
                1 => Some(format!("{} {}", COUNT_WORDS[1], s.word())),
                _ => Some(format!("{} {}", COUNT_WORDS[n], s.plural())),
            }
        })
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Declarative statement about one true fact of the scene: either the
/// color of a shape that occurs exactly once ("the color of the circle is
/// red") or an adjacency ("the red square is left of the blue circle",
/// using the same nearest-left-in-row relation the questions use). Falls
/// back to the counting caption for scenes supporting neither. Statements
/// put attribute and relation vocabulary into descriptive text without
/// ever showing a question-answer exchange.
pub fn statement(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> String {
    let mut facts: Vec<String> = unique_shapes(spec)
        .into_iter()
        .map(|s| {
            let obj = spec.objects.iter().find(|o| o.shape == s).unwrap();
            format!("the color of the {} is {}", s.word(), obj.color.word())
        })
        .collect();
    for o in &spec.objects {
        if let Some(n) = left_neighbor(spec, o) {
            facts.push(format!("the {n} is left of the {o}"));
        }
    }
    if facts.is_empty() {
        return count_caption(spec);
    }
    facts.swap_remove(rng.gen_range(0..facts.len()))
}

/// Draw a valid scene: 1..=5 objects on distinct cells.
pub fn sample_scene(rng: &mut ChaCha8Rng) -> SceneSpec {
    let n = rng.gen_range(1..=MAX_OBJECTS);
    let mut cells: Vec<(usize, usize)> = (0..GRID * GRID).map(|i| (i / GRID, i % GRID)).collect();
    cells.shuffle(rng);
    let mut objects: Vec<SceneObject> = cells[..n]
        .iter()
        .map(|&(row, col)| SceneObject {
            row,
            col,
            shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
        })
        .collect();
    objects.sort_by_key(|o| (o.row, o.col));
    SceneSpec { objects }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetId {
    Attr,
    Count,
    Rel,
}

impl DatasetId {
    pub const ALL: [DatasetId; 3] = [DatasetId::Attr, DatasetId::Count, DatasetId::Rel];

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Attr => "attr",
            DatasetId::Count => "count",
            DatasetId::Rel => "rel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub scene: SceneSpec,
    pub question: String,
    pub answer: String,
}

const RESAMPLE_BUDGET: usize = 256;

/// Shapes that occur exactly once in the scene.
fn unique_shapes(spec: &SceneSpec) -> Vec<Shape> {
    Shape::ALL
        .iter()
        .copied()
        .filter(|&s| spec.objects.iter().filter(|o| o.shape == s).count() == 1)
        .collect()
}

/// Objects whose (color, shape) pair occurs exactly once in the scene.
fn unique_objects(spec: &SceneSpec) -> Vec<SceneObject> {
    spec.objects
        .iter()
        .copied()
        .filter(|o| {
            spec.objects
                .iter()
                .filter(|p| p.color == o.color && p.shape == o.shape)
                .count()
                == 1
        })
        .collect()
}

/// The object directly left of `of` in the same row, if any.
fn left_neighbor(spec: &SceneSpec, of: &SceneObject) -> Option<SceneObject> {
    spec.objects
        .iter()
        .copied()
        .filter(|o| o.row == of.row && o.col < of.col)
        .max_by_key(|o| o.col)
}

/// Largest count a counting question asks about. Capped below the object
/// budget so every target stays reasonably likely under rejection.
pub const MAX_COUNT_TARGET: usize = 3;

/// Generate one question-answer item. Scenes that cannot support the
/// question type (attribute needs a shape occurring exactly once, relation
/// needs an unambiguous reference object) are resampled within a bounded
/// budget.
pub fn generate_qa(
    dataset: DatasetId,
    rng: &mut ChaCha8Rng,
) -> Result<QaItem, SceneError> {
    // For counting, commit to the target before resampling scenes so the
    // answer marginal is uniform over 0..=MAX_COUNT_TARGET instead of
    // piling up on the easy-to-realize low counts.
    let count_target = rng.gen_range(0..=MAX_COUNT_TARGET);
    for _ in 0..RESAMPLE_BUDGET {
        let scene = sample_scene(rng);
        match dataset {
            DatasetId::Attr => {
                let uniq = unique_shapes(&scene);
                if uniq.is_empty() {
                    continue;
                }
                let shape = uniq[rng.gen_range(0..uniq.len())];
                let obj = scene.objects.iter().find(|o| o.shape == shape).unwrap();
                return Ok(QaItem {
                    question: format!("what color is the {} ?", shape.word()),
                    answer: obj.color.word().to_string(),
                    scene,
                });
            }
            DatasetId::Count => {
                let matching: Vec<Shape> = Shape::ALL
                    .iter()
                    .copied()
                    .filter(|&s| {
                        scene.objects.iter().filter(|o| o.shape == s).count() == count_target
                    })
                    .collect();
                if matching.is_empty() {
                    continue;
                }
                let shape = matching[rng.gen_range(0..matching.len())];
                return Ok(QaItem {
                    question: format!("how many {} ?", shape.plural()),
                    answer: COUNT_WORDS[count_target].to_string(),
                    scene,
                });
            }
            DatasetId::Rel => {
                // Only reference objects with a left neighbor, so the answer
                // is always a color-shape pair drawn near-uniformly rather
                // than a "nothing" majority class.
                let uniq: Vec<SceneObject> = unique_objects(&scene)
                    .into_iter()
                    .filter(|o| left_neighbor(&scene, o).is_some())
                    .collect();
                if uniq.is_empty() {
                    continue;
                }
                let obj = uniq[rng.gen_range(0..uniq.len())];
                let neighbor = left_neighbor(&scene, &obj).unwrap();
                return Ok(QaItem {
                    question: format!("what is left of the {obj} ?"),
                    answer: neighbor.to_string(),
                    scene,
                });
            }
        }
    }
    Err(SceneError::ResampleExhausted {
        want: match dataset {
            DatasetId::Attr => "a shape occurring exactly once",
            DatasetId::Count => "a shape with the drawn target count",
            DatasetId::Rel => "an unambiguous reference object with a left neighbor",
        },
        attempts: RESAMPLE_BUDGET,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSet {
    pub dataset: DatasetId,
    /// Pool the harness draws in-context shots from; also defines the
    /// candidate answers.
    pub train: Vec<QaItem>,
    pub test: Vec<QaItem>,
    /// Unique train-pool answers, sorted.
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldData {
    /// Captioning split: scene plus its exact caption.
    pub vl_train: Vec<(SceneSpec, String)>,
    pub evals: Vec<EvalSet>,
}

#[derive(Debug, Clone, Copy)]
pub struct WorldConfig {
    pub n_vl_train: usize,
    pub n_pool_train: usize,
    pub n_pool_test: usize,
}

/// Build every split with globally disjoint scenes: no scene appears in more
/// than one of the caption split and the per-dataset shot/test pools.
pub fn build_splits(cfg: &WorldConfig, seed: u64) -> Result<WorldData, SceneError> {
    let mut seen: BTreeSet<Vec<SceneObject>> = BTreeSet::new();
    let fresh = |rng: &mut ChaCha8Rng,
                     seen: &mut BTreeSet<Vec<SceneObject>>,
                     dataset: Option<DatasetId>|
     -> Result<Option<QaItem>, SceneError> {
        for _ in 0..RESAMPLE_BUDGET {
            match dataset {
                None => {
                    let scene = sample_scene(rng);
                    // Rotate through the three description styles so
                    // enumeration, counting, and attribute/relation language
                    // are all visually grounded.
                    let text = match rng.gen_range(0..3u32) {
                        0 => caption(&scene),
                        1 => count_caption(&scene),
                        _ => statement(&scene, rng),
                    };
                    if seen.insert(scene.signature()) {
                        return Ok(Some(QaItem {
                            question: String::new(),
                            answer: text,
                            scene,
                        }));
                    }
                }
                Some(d) => {
                    let item = generate_qa(d, rng)?;
                    if seen.insert(item.scene.signature()) {
                        return Ok(Some(item));
                    }
                }
            }
        }
        Err(SceneError::ResampleExhausted {
            want: "a scene unused by other splits",
            attempts: RESAMPLE_BUDGET,
        })
    };

    let mut rng = rng_for(seed, "world-captions", &[]);
    let mut vl_train = Vec::with_capacity(cfg.n_vl_train);
    for _ in 0..cfg.n_vl_train {
        let item = fresh(&mut rng, &mut seen, None)?.unwrap();
        vl_train.push((item.scene, item.answer));
    }

    let mut evals = Vec::new();
    for dataset in DatasetId::ALL {
        let mut rng = rng_for(seed, "world-qa", &[dataset as u64]);
        let mut train = Vec::with_capacity(cfg.n_pool_train);
        for _ in 0..cfg.n_pool_train {
            train.push(fresh(&mut rng, &mut seen, Some(dataset))?.unwrap());
        }
        let mut test = Vec::with_capacity(cfg.n_pool_test);
        for _ in 0..cfg.n_pool_test {
            test.push(fresh(&mut rng, &mut seen, Some(dataset))?.unwrap());
        }
        let mut candidates: Vec<String> = train.iter().map(|i| i.answer.clone()).collect();
        candidates.sort();
        candidates.dedup();
        evals.push(EvalSet {
            dataset,
            train,
            test,
            candidates,
        });
    }
    Ok(WorldData { vl_train, evals })
}

/// Every word scenes, captions, and questions can produce.
pub fn vocab_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = vec![
        "a", "and", "what", "color", "is", "the", "how", "many", "left", "of", "nothing", "?",
    ];
    for s in Shape::ALL {
        words.push(s.word());
        words.push(s.plural());
    }
    for c in Color::ALL {
        words.push(c.word());
    }
    words.extend(COUNT_WORDS);
    words
}
