//! Procedural shape-story corpus: scene graphs, integer rasterization,
//! template captions with an exact inverse parser, and on-disk storage.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VistaError};
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;

pub const IMG: usize = 32;
pub const CHANNELS: usize = 3;
/// Pixel index of the cell centers along either axis.
pub const CELL_CENTERS: [i32; 3] = [5, 16, 26];
pub const CORPUS_VERSION: u32 = 1;
const STORIES_MAGIC: &[u8; 4] = b"VSTB";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

impl Serialize for Shape {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Shape {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Shape::from_name(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown shape {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Radius in half-pixel units.
    fn radius2(self) -> i32 {
        match self {
            Size::Small => 7,
            Size::Large => 11,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verb {
    Sits,
    MovesLeft,
    MovesRight,
    Jumps,
}

impl Verb {
    pub const ALL: [Verb; 4] = [Verb::Sits, Verb::MovesLeft, Verb::MovesRight, Verb::Jumps];

    pub fn phrase(self) -> &'static str {
        match self {
            Verb::Sits => "sits",
            Verb::MovesLeft => "moves left",
            Verb::MovesRight => "moves right",
            Verb::Jumps => "jumps",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Verb::Sits => "sits",
            Verb::MovesLeft => "moves-left",
            Verb::MovesRight => "moves-right",
            Verb::Jumps => "jumps",
        }
    }

    fn from_key(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.key() == s)
    }

    /// Where the protagonist ends up when the verb is applied from `from`.
    pub fn apply(self, from: Cell) -> Option<Cell> {
        let (r, c) = (from.row as i32, from.col as i32);
        let (nr, nc) = match self {
            Verb::Sits => (r, c),
            Verb::MovesLeft => (r, c - 1),
            Verb::MovesRight => (r, c + 1),
            Verb::Jumps => (r - 1, c),
        };
        ((0..3).contains(&nr) && (0..3).contains(&nc)).then(|| Cell::new(nr as u8, nc as u8))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [u8; 3],
}

const fn nc(name: &'static str, r: u8, g: u8, b: u8) -> NamedColor {
    NamedColor { name, rgb: [r, g, b] }
}

pub const OBJECT_COLORS: [NamedColor; 8] = [
    nc("red", 220, 40, 40),
    nc("orange", 245, 140, 20),
    nc("yellow", 240, 220, 40),
    nc("green", 40, 170, 60),
    nc("blue", 40, 80, 220),
    nc("purple", 140, 60, 190),
    nc("pink", 245, 130, 190),
    nc("brown", 130, 80, 40),
];

pub const BACKGROUND_COLORS: [NamedColor; 6] = [
    nc("white", 245, 245, 245),
    nc("black", 15, 15, 15),
    nc("gray", 128, 128, 128),
    nc("beige", 220, 205, 165),
    nc("navy", 20, 30, 90),
    nc("teal", 30, 130, 130),
];

fn object_color(name: &str) -> Option<usize> {
    OBJECT_COLORS.iter().position(|c| c.name == name)
}

fn background_color(name: &str) -> Option<usize> {
    BACKGROUND_COLORS.iter().position(|c| c.name == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub fn new(row: u8, col: u8) -> Self {
        Self { row, col }
    }

    pub fn all() -> impl Iterator<Item = Cell> {
        (0..3).flat_map(|r| (0..3).map(move |c| Cell::new(r, c)))
    }

    pub fn center(self) -> (i32, i32) {
        (CELL_CENTERS[self.row as usize], CELL_CENTERS[self.col as usize])
    }

    /// Location name; the center cell is "center".
    pub fn name(self) -> &'static str {
        const NAMES: [[&str; 3]; 3] = [
            ["top left", "top", "top right"],
            ["left", "center", "right"],
            ["bottom left", "bottom", "bottom right"],
        ];
        NAMES[self.row as usize][self.col as usize]
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Cell::all().find(|c| c.name() == s)
    }

    fn neighbor(self) -> Cell {
        Cell::new(self.row, (self.col + 1) % 3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: Shape,
    /// Index into [`OBJECT_COLORS`].
    pub color: usize,
    pub size: Size,
}

impl Object {
    pub fn describe(&self) -> String {
        format!("{} {}", OBJECT_COLORS[self.color].name, self.shape.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Companion {
    pub shape: Shape,
    pub color: usize,
}

impl Companion {
    pub fn object(&self) -> Object {
        Object {
            shape: self.shape,
            color: self.color,
            size: Size::Small,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SceneGraph {
    pub protagonist: Object,
    /// Index into [`BACKGROUND_COLORS`].
    pub background: usize,
    pub cell: Cell,
    pub verb: Verb,
    pub companion: Option<Companion>,
}

impl SceneGraph {
    pub fn companion_cell(&self) -> Cell {
        self.cell.neighbor()
    }

    pub fn placements(&self) -> Vec<(Object, Cell)> {
        let mut out = vec![(self.protagonist, self.cell)];
        if let Some(c) = self.companion {
            out.push((c.object(), self.companion_cell()));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.protagonist.color >= OBJECT_COLORS.len() || self.background >= BACKGROUND_COLORS.len() {
            return Err(VistaError::Data("scene graph color out of range".into()));
        }
        if self.cell.row > 2 || self.cell.col > 2 {
            return Err(VistaError::Data("scene graph cell out of range".into()));
        }
        if let Some(c) = self.companion {
            if c.color >= OBJECT_COLORS.len() || c.color == self.protagonist.color || c.shape == self.protagonist.shape {
                return Err(VistaError::Data("companion must differ in color and shape".into()));
            }
        }
        Ok(())
    }

    /// One-line canonical text form, stable across versions.
    pub fn canonical(&self) -> String {
        let p = &self.protagonist;
        let comp = match self.companion {
            Some(c) => format!("{},{}", c.shape.name(), OBJECT_COLORS[c.color].name),
            None => "none".into(),
        };
        format!(
            "p={},{},{};bg={};cell={},{};verb={};c={}",
            p.shape.name(),
            OBJECT_COLORS[p.color].name,
            p.size.name(),
            BACKGROUND_COLORS[self.background].name,
            self.cell.row,
            self.cell.col,
            self.verb.key(),
            comp
        )
    }

    pub fn from_canonical(s: &str) -> Result<Self> {
        let bad = || VistaError::Data(format!("malformed scene graph {s:?}"));
        let mut fields = std::collections::HashMap::new();
        for part in s.split(';') {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        let p: Vec<&str> = get("p")?.split(',').collect();
        if p.len() != 3 {
            return Err(bad());
        }
        let protagonist = Object {
            shape: Shape::from_name(p[0]).ok_or_else(bad)?,
            color: object_color(p[1]).ok_or_else(bad)?,
            size: Size::from_name(p[2]).ok_or_else(bad)?,
        };
        let cell: Vec<u8> = get("cell")?
            .split(',')
            .map(|x| x.parse::<u8>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if cell.len() != 2 {
            return Err(bad());
        }
        let companion = match get("c")? {
            "none" => None,
            c => {
                let (sh, co) = c.split_once(',').ok_or_else(bad)?;
                Some(Companion {
                    shape: Shape::from_name(sh).ok_or_else(bad)?,
                    color: object_color(co).ok_or_else(bad)?,
                })
            }
        };
        let g = SceneGraph {
            protagonist,
            background: background_color(get("bg")?).ok_or_else(bad)?,
            cell: Cell::new(cell[0], cell[1]),
            verb: Verb::from_key(get("verb")?).ok_or_else(bad)?,
            companion,
        };
        g.validate()?;
        Ok(g)
    }
}

impl fmt::Display for SceneGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

// Star outlines in half-pixel units around the shape center.
const STAR_SMALL: [(i32, i32); 10] = [
    (0, -9), (3, -4), (9, -3), (4, 1), (5, 7), (0, 4), (-5, 7), (-4, 1), (-9, -3), (-3, -4),
];
const STAR_LARGE: [(i32, i32); 10] = [
    (0, -12), (4, -5), (11, -4), (6, 2), (7, 10), (0, 6), (-7, 10), (-6, 2), (-11, -4), (-4, -5),
];

fn star_table(size: Size) -> &'static [(i32, i32)] {
    match size {
        Size::Small => &STAR_SMALL,
        Size::Large => &STAR_LARGE,
    }
}

fn inside_polygon(px: i32, py: i32, poly: &[(i32, i32)]) -> bool {
    let mut inside = false;
    for i in 0..poly.len() {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % poly.len()];
        if (y1 > py) != (y2 > py) {
            let lhs = (px - x1) * (y2 - y1);
            let rhs = (x2 - x1) * (py - y1);
            if (y2 > y1 && lhs < rhs) || (y2 < y1 && lhs > rhs) {
                inside = !inside;
            }
        }
    }
    inside
}

/// Whether the pixel at offset `(dy, dx)` from the shape center is covered.
pub fn covers(shape: Shape, size: Size, dy: i32, dx: i32) -> bool {
    let (x, y, r) = (2 * dx, 2 * dy, size.radius2());
    match shape {
        Shape::Circle => x * x + y * y <= r * r,
        Shape::Square => x.abs() < r && y.abs() < r,
        Shape::Triangle => 2 * x.abs() <= y + r && y <= r,
        Shape::Star => inside_polygon(x, y, star_table(size)),
    }
}

/// Exact area of the continuous shape in pixels.
pub fn analytic_area(shape: Shape, size: Size) -> f64 {
    let r = size.radius2() as f64 / 2.0;
    match shape {
        Shape::Circle => std::f64::consts::PI * r * r,
        Shape::Square => 4.0 * r * r,
        Shape::Triangle => 2.0 * r * r,
        Shape::Star => {
            let t = star_table(size);
            let twice: i32 = (0..t.len())
                .map(|i| {
                    let (x1, y1) = t[i];
                    let (x2, y2) = t[(i + 1) % t.len()];
                    x1 * y2 - x2 * y1
                })
                .sum();
            twice.abs() as f64 / 8.0
        }
    }
}

/// Binary coverage mask of one object placed at a cell, `IMG*IMG` entries.
pub fn object_mask(shape: Shape, size: Size, cell: Cell) -> Vec<bool> {
    let (cy, cx) = cell.center();
    let mut m = vec![false; IMG * IMG];
    for y in 0..IMG as i32 {
        for x in 0..IMG as i32 {
            m[(y as usize) * IMG + x as usize] = covers(shape, size, y - cy, x - cx);
        }
    }
    m
}

fn rgb_f32(rgb: [u8; 3]) -> [f32; 3] {
    rgb.map(|v| v as f32 / 255.0)
}

/// Background fill followed by each object in order. Values in `[0, 1]`.
pub fn render_placements(background: usize, objects: &[(Object, Cell)]) -> Tensor<f32> {
    let bg = rgb_f32(BACKGROUND_COLORS[background].rgb);
    let mut data = Vec::with_capacity(IMG * IMG * CHANNELS);
    for _ in 0..IMG * IMG {
        data.extend_from_slice(&bg);
    }
    for (obj, cell) in objects {
        let col = rgb_f32(OBJECT_COLORS[obj.color].rgb);
        for (i, on) in object_mask(obj.shape, obj.size, *cell).into_iter().enumerate() {
            if on {
                data[i * 3..i * 3 + 3].copy_from_slice(&col);
            }
        }
    }
    Tensor::new(&[IMG, IMG, CHANNELS], data).expect("fixed image shape")
}

pub fn render_scene(graph: &SceneGraph) -> Tensor<f32> {
    render_placements(graph.background, &graph.placements())
}

pub fn caption_from_graph(g: &SceneGraph) -> String {
    let p = &g.protagonist;
    let mut s = format!(
        "the {} {} {} {}",
        p.size.name(),
        OBJECT_COLORS[p.color].name,
        p.shape.name(),
        g.verb.phrase()
    );
    if g.cell != Cell::new(1, 1) {
        s.push_str(" at the ");
        s.push_str(g.cell.name());
    }
    s.push_str(" on the ");
    s.push_str(BACKGROUND_COLORS[g.background].name);
    s.push_str(" background");
    if let Some(c) = g.companion {
        s.push_str(&format!(", with a {} {}", OBJECT_COLORS[c.color].name, c.shape.name()));
    }
    s
}

/// Split a caption into grammar words; commas are separate words.
pub fn caption_words(caption: &str) -> Vec<String> {
    caption
        .replace(',', " , ")
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Inverse of [`caption_from_graph`].
pub fn parse_caption(caption: &str) -> Result<SceneGraph> {
    let bad = |why: &str| VistaError::Data(format!("caption {caption:?}: {why}"));
    let w = caption_words(caption);
    let mut i = 0;
    macro_rules! next {
        ($what:expr) => {{
            let t = w.get(i).cloned().ok_or_else(|| bad(&format!("missing {}", $what)))?;
            i += 1;
            t
        }};
    }
    let expect = |got: String, want: &str| -> Result<()> {
        if got == want {
            Ok(())
        } else {
            Err(bad(&format!("expected {want:?}, found {got:?}")))
        }
    };
    expect(next!("article"), "the")?;
    let size = Size::from_name(&next!("size")).ok_or_else(|| bad("size"))?;
    let color = object_color(&next!("color")).ok_or_else(|| bad("color"))?;
    let shape = Shape::from_name(&next!("shape")).ok_or_else(|| bad("shape"))?;
    let verb = match next!("verb").as_str() {
        "sits" => Verb::Sits,
        "jumps" => Verb::Jumps,
        "moves" => match next!("direction").as_str() {
            "left" => Verb::MovesLeft,
            "right" => Verb::MovesRight,
            _ => return Err(bad("direction")),
        },
        _ => return Err(bad("verb")),
    };
    let mut tok = next!("preposition");
    let mut cell = Cell::new(1, 1);
    if tok == "at" {
        expect(next!("article"), "the")?;
        let mut loc = Vec::new();
        loop {
            tok = next!("location");
            if tok == "on" {
                break;
            }
            loc.push(tok.clone());
        }
        cell = Cell::from_name(&loc.join(" "))
            .filter(|c| *c != Cell::new(1, 1))
            .ok_or_else(|| bad("location"))?;
    }
    expect(tok, "on")?;
    expect(next!("article"), "the")?;
    let background = background_color(&next!("background")).ok_or_else(|| bad("background"))?;
    expect(next!("background noun"), "background")?;
    let companion = match w.get(i) {
        None => None,
        Some(_) => {
            expect(next!(","), ",")?;
            expect(next!("with"), "with")?;
            expect(next!("a"), "a")?;
            let c = object_color(&next!("companion color")).ok_or_else(|| bad("companion color"))?;
            let s = Shape::from_name(&next!("companion shape")).ok_or_else(|| bad("companion shape"))?;
            Some(Companion { shape: s, color: c })
        }
    };
    if i != w.len() {
        return Err(bad("trailing words"));
    }
    let g = SceneGraph {
        protagonist: Object { shape, color, size },
        background,
        cell,
        verb,
        companion,
    };
    g.validate()?;
    Ok(g)
}

/// Every word the caption grammar can emit, in a fixed order.
pub fn grammar_words() -> Vec<&'static str> {
    let mut w: Vec<&'static str> = vec![
        "the", "a", "at", "on", "with", ",", "background", "sits", "moves", "jumps", "left", "right",
        "top", "bottom", "center",
    ];
    w.extend(Size::ALL.iter().map(|s| s.name()));
    w.extend(OBJECT_COLORS.iter().map(|c| c.name));
    w.extend(Shape::ALL.iter().map(|s| s.name()));
    w.extend(BACKGROUND_COLORS.iter().map(|c| c.name));
    w
}

pub fn grammar_hash() -> String {
    let mut h = Sha256::new();
    for w in grammar_words() {
        h.update(w.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub graph: SceneGraph,
    pub caption: String,
    pub image: Tensor<f32>,
}

impl Frame {
    pub fn from_graph(graph: SceneGraph) -> Self {
        Self {
            caption: caption_from_graph(&graph),
            image: render_scene(&graph),
            graph,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoryRecord {
    pub id: u32,
    pub split: Split,
    pub frames: Vec<Frame>,
}

fn pick<T: Copy>(rng: &mut RngStream, items: &[T]) -> T {
    items[rng.below(items.len())]
}

pub fn sample_protagonist(rng: &mut RngStream) -> Object {
    Object {
        shape: pick(rng, &Shape::ALL),
        color: rng.below(OBJECT_COLORS.len()),
        size: pick(rng, &Size::ALL),
    }
}

fn sample_companion(rng: &mut RngStream, p: &Object) -> Option<Companion> {
    if !rng.bernoulli(0.5) {
        return None;
    }
    let colors: Vec<usize> = (0..OBJECT_COLORS.len()).filter(|&c| c != p.color).collect();
    let shapes: Vec<Shape> = Shape::ALL.into_iter().filter(|&s| s != p.shape).collect();
    Some(Companion {
        color: pick(rng, &colors),
        shape: pick(rng, &shapes),
    })
}

/// One story of `k` frames around a single protagonist.
pub fn generate_story(rng: &mut RngStream, id: u32, split: Split, k: usize) -> Result<StoryRecord> {
    if k < 2 {
        return Err(VistaError::Config(format!("story length {k} < 2")));
    }
    let protagonist = sample_protagonist(rng);
    let mut frames = Vec::with_capacity(k);
    let mut cell = Cell::new(rng.below(3) as u8, rng.below(3) as u8);
    for f in 0..k {
        let verb = if f == 0 {
            pick(rng, &Verb::ALL)
        } else {
            let options: Vec<Verb> = Verb::ALL.into_iter().filter(|v| v.apply(cell).is_some()).collect();
            let v = pick(rng, &options);
            cell = v.apply(cell).expect("filtered to valid verbs");
            v
        };
        let graph = SceneGraph {
            protagonist,
            background: rng.below(BACKGROUND_COLORS.len()),
            cell,
            verb,
            companion: sample_companion(rng, &protagonist),
        };
        frames.push(Frame::from_graph(graph));
    }
    Ok(StoryRecord { id, split, frames })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub frames_per_story: usize,
    pub stories: Vec<StoryRecord>,
}

/// Consecutive `(P_k, I_k, P_{k+1}, I_{k+1})` within one story.
#[derive(Clone, Copy, Debug)]
pub struct FourTuple<'a> {
    pub story_id: u32,
    pub k: usize,
    pub prev: &'a Frame,
    pub next: &'a Frame,
}

pub fn extract_four_tuples<'a>(stories: impl IntoIterator<Item = &'a StoryRecord>) -> Vec<FourTuple<'a>> {
    stories
        .into_iter()
        .flat_map(|s| {
            s.frames.windows(2).enumerate().map(move |(k, w)| FourTuple {
                story_id: s.id,
                k,
                prev: &w[0],
                next: &w[1],
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StoryIndex {
    pub id: u32,
    pub split: Split,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub train_stories: usize,
    pub test_stories: usize,
    pub frames_per_story: usize,
    pub image_shape: [usize; 3],
    pub dtype: String,
    pub grammar_hash: String,
    pub data_sha256: String,
    pub stories: Vec<StoryIndex>,
}

impl Corpus {
    pub fn generate(seed: u64, train: usize, test: usize, k: usize) -> Result<Self> {
        let root = RngStream::new(seed, streams::DATA);
        let stories = (0..train + test)
            .into_par_iter()
            .map(|i| {
                let split = if i < train { Split::Train } else { Split::Test };
                generate_story(&mut root.fork(i as u64), i as u32, split, k)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed,
            frames_per_story: k,
            stories,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &StoryRecord> {
        self.stories.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn story(&self, id: u32) -> Option<&StoryRecord> {
        self.stories.iter().find(|s| s.id == id)
    }

    /// Binary body plus per-story byte offsets.
    pub fn encode(&self) -> (Vec<u8>, Vec<StoryIndex>) {
        let mut out = Vec::new();
        out.extend_from_slice(STORIES_MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.stories.len() as u32).to_le_bytes());
        let mut index = Vec::with_capacity(self.stories.len());
        for s in &self.stories {
            index.push(StoryIndex {
                id: s.id,
                split: s.split,
                offset: out.len() as u64,
            });
            out.extend_from_slice(&s.id.to_le_bytes());
            out.push(match s.split {
                Split::Train => 0,
                Split::Test => 1,
            });
            out.extend_from_slice(&(s.frames.len() as u32).to_le_bytes());
            for f in &s.frames {
                for text in [f.graph.canonical(), f.caption.clone()] {
                    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
                    out.extend_from_slice(text.as_bytes());
                }
                let bytes = f.image.to_le_bytes();
                out.extend_from_slice(&(f.image.len() as u32).to_le_bytes());
                out.extend_from_slice(&bytes);
            }
        }
        (out, index)
    }

    pub fn decode(bytes: &[u8], seed: u64) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != STORIES_MAGIC {
            return Err(VistaError::Format { offset: 0, msg: "bad corpus magic".into() });
        }
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(VistaError::Format { offset: 4, msg: format!("corpus version {version}") });
        }
        let n = r.u32()? as usize;
        let mut stories = Vec::with_capacity(n);
        let mut k = 0;
        for _ in 0..n {
            let id = r.u32()?;
            let at = r.pos;
            let split = match r.take(1)?[0] {
                0 => Split::Train,
                1 => Split::Test,
                b => return Err(VistaError::Format { offset: at as u64, msg: format!("split byte {b}") }),
            };
            let nf = r.u32()? as usize;
            k = nf;
            let mut frames = Vec::with_capacity(nf);
            for _ in 0..nf {
                let at = r.pos;
                let graph = SceneGraph::from_canonical(&r.string()?).map_err(|e| VistaError::Format {
                    offset: at as u64,
                    msg: e.to_string(),
                })?;
                let caption = r.string()?;
                let len = r.u32()? as usize;
                if len != IMG * IMG * CHANNELS {
                    return Err(VistaError::Format { offset: r.pos as u64, msg: format!("image of {len} floats") });
                }
                let image = Tensor::from_le_bytes(&[IMG, IMG, CHANNELS], r.take(len * 4)?)?;
                frames.push(Frame { graph, caption, image });
            }
            stories.push(StoryRecord { id, split, frames });
        }
        if r.pos != bytes.len() {
            return Err(VistaError::Format { offset: r.pos as u64, msg: "trailing bytes".into() });
        }
        Ok(Self { seed, frames_per_story: k, stories })
    }

    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        let (bytes, index) = self.encode();
        let manifest = Manifest {
            version: CORPUS_VERSION,
            seed: self.seed,
            train_stories: self.count(Split::Train),
            test_stories: self.count(Split::Test),
            frames_per_story: self.frames_per_story,
            image_shape: [IMG, IMG, CHANNELS],
            dtype: "f32le".into(),
            grammar_hash: grammar_hash(),
            data_sha256: hex::encode(Sha256::digest(&bytes)),
            stories: index,
        };
        fs::write(dir.join("stories.bin"), &bytes)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.version != CORPUS_VERSION {
            return Err(VistaError::Data(format!("corpus version {}", manifest.version)));
        }
        if manifest.grammar_hash != grammar_hash() {
            return Err(VistaError::Data("corpus was built with a different grammar".into()));
        }
        let bytes = fs::read(dir.join("stories.bin"))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != manifest.data_sha256 {
            return Err(VistaError::Data("stories.bin hash does not match manifest".into()));
        }
        Ok((Self::decode(&bytes, manifest.seed)?, manifest))
    }

    /// Every caption and image agrees with its scene graph.
    pub fn verify(&self) -> Result<()> {
        for s in &self.stories {
            for (k, f) in s.frames.iter().enumerate() {
                if f.caption != caption_from_graph(&f.graph) || f.image != render_scene(&f.graph) {
                    return Err(VistaError::Data(format!("story {} frame {k} is inconsistent", s.id)));
                }
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(VistaError::Format {
                offset: self.pos as u64,
                msg: format!("need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| VistaError::Format {
            offset: at as u64,
            msg: "invalid utf-8".into(),
        })
    }
}

/// Every valid scene graph, for exhaustive checks.
pub fn all_graphs() -> Vec<SceneGraph> {
    let mut out = Vec::new();
    for shape in Shape::ALL {
        for color in 0..OBJECT_COLORS.len() {
            for size in Size::ALL {
                let protagonist = Object { shape, color, size };
                for background in 0..BACKGROUND_COLORS.len() {
                    for cell in Cell::all() {
                        for verb in Verb::ALL {
                            let mut comps = vec![None];
                            for cc in (0..OBJECT_COLORS.len()).filter(|&c| c != color) {
                                for cs in Shape::ALL.into_iter().filter(|&s| s != shape) {
                                    comps.push(Some(Companion { shape: cs, color: cc }));
                                }
                            }
                            for companion in comps {
                                out.push(SceneGraph { protagonist, background, cell, verb, companion });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> SceneGraph {
        SceneGraph {
            protagonist: Object { shape: Shape::Circle, color: 0, size: Size::Small },
            background: 0,
            cell: Cell::new(1, 1),
            verb: Verb::Sits,
            companion: None,
        }
    }

    #[test]
    fn minimal_caption() {
        assert_eq!(caption_from_graph(&minimal()), "the small red circle sits on the white background");
    }

    #[test]
    fn caption_with_location_and_companion() {
        let mut g = minimal();
        g.cell = Cell::new(0, 2);
        g.verb = Verb::MovesLeft;
        g.companion = Some(Companion { shape: Shape::Star, color: 4 });
        let c = caption_from_graph(&g);
        assert_eq!(c, "the small red circle moves left at the top right on the white background, with a blue star");
        assert_eq!(parse_caption(&c).unwrap(), g);
    }

    #[test]
    fn background_only_render_is_constant() {
        let img = render_placements(3, &[]);
        let want = rgb_f32(BACKGROUND_COLORS[3].rgb);
        for px in img.data().chunks(3) {
            assert_eq!(px, want);
        }
    }

    #[test]
    fn pixel_counts_near_analytic_area() {
        for shape in Shape::ALL {
            for size in Size::ALL {
                let count = object_mask(shape, size, Cell::new(1, 1)).iter().filter(|&&b| b).count() as f64;
                let area = analytic_area(shape, size);
                assert!((count - area).abs() <= 0.1 * area, "{shape:?} {size:?}: {count} vs {area}");
            }
        }
    }

    #[test]
    fn objects_stay_inside_the_image() {
        for shape in Shape::ALL {
            for cell in Cell::all() {
                let (cy, cx) = cell.center();
                let full: usize = (-8..=8)
                    .flat_map(|dy| (-8..=8).map(move |dx| (dy, dx)))
                    .filter(|&(dy, dx)| covers(shape, Size::Large, dy, dx))
                    .count();
                let inside = object_mask(shape, Size::Large, cell).iter().filter(|&&b| b).count();
                assert!(full - inside <= 1, "{shape:?} at {cell:?} ({cy},{cx}) clipped");
            }
        }
    }

    #[test]
    fn story_protagonist_is_constant() {
        let mut rng = RngStream::new(1, streams::DATA);
        let s = generate_story(&mut rng, 0, Split::Train, 8).unwrap();
        assert_eq!(s.frames.len(), 8);
        assert!(s.frames.iter().all(|f| f.graph.protagonist == s.frames[0].graph.protagonist));
        assert!(generate_story(&mut rng, 1, Split::Train, 1).is_err());
    }

    #[test]
    fn four_tuple_counts() {
        let c = Corpus::generate(3, 5, 2, 8).unwrap();
        let all = extract_four_tuples(&c.stories);
        assert_eq!(all.len(), 7 * 7);
        for t in &all {
            let s = c.story(t.story_id).unwrap();
            assert_eq!(t.prev, &s.frames[t.k]);
            assert_eq!(t.next, &s.frames[t.k + 1]);
        }
    }

    #[test]
    fn canonical_round_trip() {
        let mut rng = RngStream::new(9, streams::DATA);
        for i in 0..50 {
            let s = generate_story(&mut rng, i, Split::Test, 4).unwrap();
            for f in &s.frames {
                assert_eq!(SceneGraph::from_canonical(&f.graph.canonical()).unwrap(), f.graph);
            }
        }
    }

    #[test]
    fn corrupt_corpus_reports_offset() {
        let c = Corpus::generate(4, 2, 1, 3).unwrap();
        let (bytes, _) = c.encode();
        assert_eq!(Corpus::decode(&bytes, 4).unwrap(), c);
        match Corpus::decode(&bytes[..bytes.len() - 10], 4) {
            Err(VistaError::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut flipped = bytes.clone();
        flipped[0] = b'X';
        assert!(matches!(Corpus::decode(&flipped, 4), Err(VistaError::Format { offset: 0, .. })));
    }
}
