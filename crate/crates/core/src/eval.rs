//! Evaluation: template questions answered by a deterministic pixel oracle,
//! embedding-space similarity from the frozen encoder, and Fréchet distance.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Cell, SceneGraph, Shape, Size, BACKGROUND_COLORS, CHANNELS, IMG, OBJECT_COLORS};
use crate::encoders::cosine;
use crate::error::{Result, VistaError};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionKind {
    YesNo,
    MultipleChoice,
}

/// The graph attribute a question probes, with what the oracle needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "fact")]
pub enum Fact {
    /// Is an object of this color and shape present?
    Presence { color: usize, shape: Shape },
    ProtagonistColor { shape: Shape },
    ProtagonistShape { color: usize },
    Background,
    Position { color: usize, shape: Shape },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub question: String,
    pub kind: QuestionKind,
    pub choices: Vec<String>,
    pub answer: usize,
    pub fact: Fact,
}

pub trait QuestionSource {
    fn questions(&self, graph: &SceneGraph) -> Vec<QAItem>;
}

pub trait Answerer {
    fn answer(&self, image: &Tensor<f32>, item: &QAItem) -> usize;
}

/// Deterministic question templates over the scene graph.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateQuestions;

fn graph_rng(graph: &SceneGraph) -> RngStream {
    let h = Sha256::digest(graph.canonical().as_bytes());
    let seed = u64::from_le_bytes(h[..8].try_into().expect("digest has 32 bytes"));
    RngStream::new(seed, 0)
}

/// Four options containing `answer`, the rest drawn from `pool`, in a
/// graph-seeded order. Returns the options and the answer's position.
fn options<T: Copy + PartialEq>(answer: T, pool: &[T], rng: &mut RngStream) -> (Vec<T>, usize) {
    let mut others: Vec<T> = pool.iter().copied().filter(|&x| x != answer).collect();
    rng.shuffle(&mut others);
    let mut opts = vec![answer];
    opts.extend(others.into_iter().take(3));
    rng.shuffle(&mut opts);
    let pos = opts.iter().position(|&x| x == answer).expect("answer is an option");
    (opts, pos)
}

fn yes_no(question: String, yes: bool, fact: Fact) -> QAItem {
    QAItem {
        question,
        kind: QuestionKind::YesNo,
        choices: vec!["yes".into(), "no".into()],
        answer: if yes { 0 } else { 1 },
        fact,
    }
}

fn color_name(c: usize) -> &'static str {
    OBJECT_COLORS[c].name
}

impl QuestionSource for TemplateQuestions {
    fn questions(&self, g: &SceneGraph) -> Vec<QAItem> {
        let mut rng = graph_rng(g);
        let p = g.protagonist;
        let mut out = vec![yes_no(
            format!("Is there a {} {}?", color_name(p.color), p.shape.name()),
            true,
            Fact::Presence { color: p.color, shape: p.shape },
        )];
        match g.companion {
            Some(c) => out.push(yes_no(
                format!("Is there a {} {}?", color_name(c.color), c.shape.name()),
                true,
                Fact::Presence { color: c.color, shape: c.shape },
            )),
            None => {
                let colors: Vec<usize> = (0..OBJECT_COLORS.len()).filter(|&c| c != p.color).collect();
                let shapes: Vec<Shape> = Shape::ALL.iter().copied().filter(|&s| s != p.shape).collect();
                let (c, s) = (colors[rng.below(colors.len())], shapes[rng.below(shapes.len())]);
                out.push(yes_no(
                    format!("Is there a {} {}?", color_name(c), s.name()),
                    false,
                    Fact::Presence { color: c, shape: s },
                ));
            }
        }
        let all_colors: Vec<usize> = (0..OBJECT_COLORS.len()).collect();
        let (opts, answer) = options(p.color, &all_colors, &mut rng);
        out.push(QAItem {
            question: format!("What color is the {}?", p.shape.name()),
            kind: QuestionKind::MultipleChoice,
            choices: opts.iter().map(|&c| color_name(c).to_string()).collect(),
            answer,
            fact: Fact::ProtagonistColor { shape: p.shape },
        });
        let (opts, answer) = options(p.shape, &Shape::ALL, &mut rng);
        out.push(QAItem {
            question: format!("What shape is the {} object?", color_name(p.color)),
            kind: QuestionKind::MultipleChoice,
            choices: opts.iter().map(|s| s.name().to_string()).collect(),
            answer,
            fact: Fact::ProtagonistShape { color: p.color },
        });
        let bgs: Vec<usize> = (0..BACKGROUND_COLORS.len()).collect();
        let (opts, answer) = options(g.background, &bgs, &mut rng);
        out.push(QAItem {
            question: "What color is the background?".into(),
            kind: QuestionKind::MultipleChoice,
            choices: opts.iter().map(|&c| BACKGROUND_COLORS[c].name.to_string()).collect(),
            answer,
            fact: Fact::Background,
        });
        let cells: Vec<Cell> = Cell::all().collect();
        let (opts, answer) = options(g.cell, &cells, &mut rng);
        out.push(QAItem {
            question: format!("Where is the {} {}?", color_name(p.color), p.shape.name()),
            kind: QuestionKind::MultipleChoice,
            choices: opts.iter().map(|c| c.name().to_string()).collect(),
            answer,
            fact: Fact::Position { color: p.color, shape: p.shape },
        });
        out
    }
}

/// Pixel-statistics answerer over nearest-named-color label maps.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelOracle;

/// Presence needs the best-matching prototype to reach this overlap.
pub const PRESENCE_IOU: f64 = 0.5;

struct Prototype {
    shape: Shape,
    mask: Vec<bool>,
    area: usize,
}

fn prototypes() -> &'static [Prototype] {
    static P: OnceLock<Vec<Prototype>> = OnceLock::new();
    P.get_or_init(|| {
        let mut v = Vec::new();
        for shape in Shape::ALL {
            for size in Size::ALL {
                for cell in Cell::all() {
                    let mask = crate::dataset::object_mask(shape, size, cell);
                    let area = mask.iter().filter(|&&m| m).count();
                    v.push(Prototype { shape, mask, area });
                }
            }
        }
        v
    })
}

/// Palette index per pixel: object colors first, then backgrounds.
pub fn label_map(image: &Tensor<f32>) -> Vec<usize> {
    let palette: Vec<[f32; 3]> = OBJECT_COLORS
        .iter()
        .chain(BACKGROUND_COLORS.iter())
        .map(|c| c.rgb.map(|v| v as f32 / 255.0))
        .collect();
    image
        .data()
        .chunks(CHANNELS)
        .map(|px| nearest(px, &palette))
        .collect()
}

fn nearest(px: &[f32], palette: &[[f32; 3]]) -> usize {
    let mut best = (f32::INFINITY, 0);
    for (i, c) in palette.iter().enumerate() {
        let d: f32 = px.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

fn iou(mask: &[bool], count: usize, proto: &Prototype) -> f64 {
    let inter = mask.iter().zip(&proto.mask).filter(|(a, b)| **a && **b).count();
    let union = count + proto.area - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Best overlap of any prototype of `shape` with the mask.
fn best_iou(mask: &[bool], shape: Shape) -> f64 {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return 0.0;
    }
    prototypes()
        .iter()
        .filter(|p| p.shape == shape)
        .map(|p| iou(mask, count, p))
        .fold(0.0, f64::max)
}

fn best_shape(mask: &[bool]) -> Option<(Shape, f64)> {
    Shape::ALL
        .iter()
        .map(|&s| (s, best_iou(mask, s)))
        .filter(|&(_, v)| v > 0.0)
        .fold(None, |acc: Option<(Shape, f64)>, x| match acc {
            Some(a) if a.1 >= x.1 => Some(a),
            _ => Some(x),
        })
}

fn color_mask(labels: &[usize], color: usize) -> Vec<bool> {
    labels.iter().map(|&l| l == color).collect()
}

/// Index of the largest score; option 0 when nothing scores above zero.
fn pick(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

impl PixelOracle {
    fn answer_labels(&self, labels: &[usize], item: &QAItem) -> usize {
        let opt_color = |name: &str| OBJECT_COLORS.iter().position(|c| c.name == name);
        match item.fact {
            Fact::Presence { color, shape } => {
                let present = matches!(best_shape(&color_mask(labels, color)), Some((s, v)) if s == shape && v >= PRESENCE_IOU);
                if present {
                    0
                } else {
                    1
                }
            }
            Fact::ProtagonistColor { shape } => {
                let scores: Vec<f64> = item
                    .choices
                    .iter()
                    .map(|c| opt_color(c).map_or(0.0, |c| best_iou(&color_mask(labels, c), shape)))
                    .collect();
                pick(&scores)
            }
            Fact::ProtagonistShape { color } => {
                let mask = color_mask(labels, color);
                let scores: Vec<f64> = item
                    .choices
                    .iter()
                    .map(|s| Shape::from_name(s).map_or(0.0, |s| best_iou(&mask, s)))
                    .collect();
                pick(&scores)
            }
            Fact::Background => {
                let n_obj = OBJECT_COLORS.len();
                let palette: Vec<[f32; 3]> = item
                    .choices
                    .iter()
                    .map(|c| {
                        BACKGROUND_COLORS
                            .iter()
                            .find(|b| b.name == c)
                            .map_or([f32::NAN; 3], |b| b.rgb.map(|v| v as f32 / 255.0))
                    })
                    .collect();
                let mut counts = vec![0.0; palette.len()];
                for &l in labels {
                    if l >= n_obj {
                        let rgb = BACKGROUND_COLORS[l - n_obj].rgb.map(|v| v as f32 / 255.0);
                        counts[nearest(&rgb, &palette)] += 1.0;
                    }
                }
                pick(&counts)
            }
            Fact::Position { color, .. } => {
                let mask = color_mask(labels, color);
                let n = mask.iter().filter(|&&m| m).count();
                if n == 0 {
                    return 0;
                }
                let (mut sy, mut sx) = (0.0, 0.0);
                for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    sy += (i / IMG) as f64;
                    sx += (i % IMG) as f64;
                }
                let (cy, cx) = (sy / n as f64, sx / n as f64);
                let dist: Vec<f64> = item
                    .choices
                    .iter()
                    .map(|c| {
                        Cell::from_name(c).map_or(f64::INFINITY, |c| {
                            let (y, x) = c.center();
                            (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)
                        })
                    })
                    .collect();
                pick(&dist.iter().map(|d| -d).collect::<Vec<_>>())
            }
        }
    }
}

impl Answerer for PixelOracle {
    fn answer(&self, image: &Tensor<f32>, item: &QAItem) -> usize {
        self.answer_labels(&label_map(image), item)
    }
}

/// Fraction of a frame's questions answered correctly.
pub fn frame_accuracy(image: &Tensor<f32>, items: &[QAItem], oracle: &PixelOracle) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let labels = label_map(image);
    let correct = items
        .iter()
        .filter(|q| oracle.answer_labels(&labels, q) == q.answer)
        .count();
    correct as f64 / items.len() as f64
}

/// Mean per-frame question accuracy.
pub fn tifa_score(images: &[&Tensor<f32>], graphs: &[&SceneGraph]) -> Result<f64> {
    if images.is_empty() {
        return Err(VistaError::Data("no frames to score".into()));
    }
    if images.len() != graphs.len() {
        return Err(VistaError::Data(format!("{} images vs {} graphs", images.len(), graphs.len())));
    }
    let q = TemplateQuestions;
    let o = PixelOracle;
    let total: f64 = images
        .iter()
        .zip(graphs)
        .map(|(img, g)| frame_accuracy(img, &q.questions(g), &o))
        .sum();
    Ok(total / images.len() as f64)
}

/// Cosine of pooled embeddings; see [`crate::encoders::pooled_embedding`].
pub fn clip_similarity(a: &[f32], b: &[f32]) -> f64 {
    cosine(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fid {
    pub value: f64,
    /// Set when a covariance needed the ridge to stay well conditioned.
    pub regularized: bool,
}

fn moments(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(VistaError::Data("need at least two feature vectors".into()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(VistaError::dim("feature rows must share a non-zero width"));
    }
    let mut mu = DVector::zeros(d);
    for r in x {
        mu += DVector::from_column_slice(r);
    }
    mu /= n as f64;
    let mut c = DMatrix::zeros(d, d);
    for r in x {
        let v = DVector::from_column_slice(r) - &mu;
        c += &v * v.transpose();
    }
    c /= (n - 1) as f64;
    Ok((mu, c))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

fn ill_conditioned(c: &DMatrix<f64>) -> bool {
    let e = SymmetricEigen::new(c.clone()).eigenvalues;
    let max = e.max();
    let min = e.min();
    max <= 0.0 || min <= 1e-10 * max
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Fid> {
    let (mu_a, mut ca) = moments(a)?;
    let (mu_b, mut cb) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(VistaError::dim("feature widths differ"));
    }
    let d = mu_a.len();
    let regularized = ill_conditioned(&ca) || ill_conditioned(&cb);
    if regularized {
        let ridge = DMatrix::identity(d, d) * 1e-6;
        ca += &ridge;
        cb += &ridge;
    }
    let sa = sym_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner).eigenvalues;
    let tr_sqrt: f64 = eig.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let diff = &mu_a - &mu_b;
    let value = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(VistaError::numeric("non-finite Fréchet distance"));
    }
    Ok(Fid { value, regularized })
}

/// One-sided paired sign test that `b` exceeds `a`. Ties are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(VistaError::dim(format!("paired samples of {} and {}", a.len(), b.len())));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| y > x).count();
    let losses = a.iter().zip(b).filter(|(x, y)| y < x).count();
    let n = wins + losses;
    // P(X >= wins) for X ~ Binomial(n, 1/2), summed in log space.
    let ln_choose = |n: usize, k: usize| -> f64 {
        let lf = |m: usize| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
        lf(n) - lf(k) - lf(n - k)
    };
    let p_value = (wins..=n)
        .map(|k| (ln_choose(n, k) - n as f64 * std::f64::consts::LN_2).exp())
        .sum::<f64>()
        .min(1.0);
    Ok(SignTest {
        wins,
        losses,
        ties: a.len() - n,
        p_value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoryMetrics {
    pub story_id: u64,
    pub tifa: f64,
    pub clip_t: f64,
    pub clip_i: f64,
    pub clip_i_ref: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tifa: f64,
    /// Generated frame vs its caption.
    pub clip_t: f64,
    /// Generated frame vs the ground-truth frame.
    pub clip_i: f64,
    /// Generated frame vs the story's real first frame.
    pub clip_i_ref: f64,
    pub fid: f64,
    pub fid_regularized: bool,
    pub frames: usize,
    pub per_story: Vec<StoryMetrics>,
    pub corpus_hash: String,
    pub config: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{render_scene, Companion, Object, Verb};
    use crate::rng::streams;

    fn graph(shape: Shape, color: usize, size: Size, bg: usize, cell: Cell, comp: Option<Companion>) -> SceneGraph {
        SceneGraph {
            protagonist: Object { shape, color, size },
            background: bg,
            cell,
            verb: Verb::Sits,
            companion: comp,
        }
    }

    #[test]
    fn sign_test_tail() {
        let a = vec![0.0; 10];
        let all = sign_test(&a, &vec![1.0; 10]).unwrap();
        assert!((all.p_value - 1.0 / 1024.0).abs() < 1e-12);
        let mut b = vec![1.0; 10];
        b[0] = -1.0;
        b[1] = 0.0;
        let r = sign_test(&a, &b).unwrap();
        assert_eq!((r.wins, r.losses, r.ties), (8, 1, 1));
        assert!((r.p_value - 10.0 / 512.0).abs() < 1e-12);
        assert_eq!(sign_test(&a, &a).unwrap().p_value, 1.0);
        assert!(sign_test(&a, &[1.0]).is_err());
    }

    #[test]
    fn question_templates() {
        let g = graph(Shape::Circle, 0, Size::Small, 0, Cell::new(1, 1), None);
        let qs = TemplateQuestions.questions(&g);
        assert_eq!(qs.len(), 6);
        assert_eq!(qs[0].question, "Is there a red circle?");
        assert_eq!(qs[0].answer, 0);
        assert_eq!(qs[1].answer, 1);
        for q in &qs[2..] {
            assert_eq!(q.kind, QuestionKind::MultipleChoice);
            assert_eq!(q.choices.len(), 4);
            let mut c = q.choices.clone();
            c.sort();
            c.dedup();
            assert_eq!(c.len(), 4, "distinct options");
        }
        assert_eq!(qs[4].question, "What color is the background?");
        assert_eq!(qs[4].choices[qs[4].answer], "white");
        assert_eq!(TemplateQuestions.questions(&g), qs);
    }

    #[test]
    fn oracle_answers_renders_correctly() {
        let mut rng = RngStream::new(11, streams::EVAL);
        let graphs = crate::dataset::all_graphs();
        for _ in 0..300 {
            let g = graphs[rng.below(graphs.len())];
            let img = render_scene(&g);
            let qs = TemplateQuestions.questions(&g);
            assert_eq!(frame_accuracy(&img, &qs, &PixelOracle), 1.0, "{g}");
        }
    }

    #[test]
    fn gray_image_denies_presence() {
        let g = graph(Shape::Star, 4, Size::Large, 1, Cell::new(0, 2), Some(Companion { shape: Shape::Square, color: 1 }));
        let gray = Tensor::full(&[IMG, IMG, CHANNELS], 0.5f32);
        for q in TemplateQuestions.questions(&g) {
            if q.kind == QuestionKind::YesNo {
                assert_eq!(PixelOracle.answer(&gray, &q), 1);
            }
        }
    }

    #[test]
    fn corrupting_an_attribute_never_helps() {
        let g = graph(Shape::Triangle, 2, Size::Large, 3, Cell::new(2, 0), None);
        let qs = TemplateQuestions.questions(&g);
        let full = frame_accuracy(&render_scene(&g), &qs, &PixelOracle);
        let mut bad = g;
        bad.protagonist.color = 5;
        assert!(frame_accuracy(&render_scene(&bad), &qs, &PixelOracle) < full);
    }

    #[test]
    fn tifa_errors() {
        assert!(tifa_score(&[], &[]).is_err());
        let g = graph(Shape::Circle, 0, Size::Small, 0, Cell::new(1, 1), None);
        let img = render_scene(&g);
        assert!(tifa_score(&[&img, &img], &[&g]).is_err());
        assert_eq!(tifa_score(&[&img], &[&g]).unwrap(), 1.0);
    }

    fn gaussian(rng: &mut RngStream, n: usize, mu: &[f64], sd: &[f64]) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| mu.iter().zip(sd).map(|(m, s)| m + s * rng.normal()).collect())
            .collect()
    }

    #[test]
    fn fid_identity_and_symmetry() {
        let mut rng = RngStream::new(1, streams::EVAL);
        let a = gaussian(&mut rng, 400, &[0.0, 1.0, -1.0], &[1.0, 2.0, 0.5]);
        let b = gaussian(&mut rng, 300, &[0.5, 1.0, 0.0], &[1.5, 1.0, 0.5]);
        assert!(fid(&a, &a).unwrap().value.abs() <= 1e-6);
        let (ab, ba) = (fid(&a, &b).unwrap().value, fid(&b, &a).unwrap().value);
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab > 0.0);
    }

    #[test]
    fn fid_diagonal_closed_form() {
        // Exact moments: two-point symmetric samples give mean m and variance v.
        let build = |mu: &[f64], var: &[f64]| -> Vec<Vec<f64>> {
            let d = mu.len();
            let mut rows = Vec::new();
            for i in 0..d {
                for sign in [-1.0, 1.0] {
                    let mut r = mu.to_vec();
                    r[i] += sign * (var[i] * (2 * d - 1) as f64 / 2.0).sqrt();
                    rows.push(r);
                }
            }
            rows
        };
        let (ma, va) = ([0.0, 1.0, 2.0], [1.0, 4.0, 0.25]);
        let (mb, vb) = ([1.0, 1.0, 0.0], [9.0, 1.0, 1.0]);
        let want: f64 = (0..3)
            .map(|i| (va[i] as f64).sqrt() - (vb[i] as f64).sqrt())
            .map(|x| x * x)
            .sum::<f64>()
            + (0..3).map(|i| (ma[i] - mb[i]) * (ma[i] - mb[i])).sum::<f64>();
        let got = fid(&build(&ma, &va), &build(&mb, &vb)).unwrap();
        assert!((got.value - want).abs() < 1e-9, "{} vs {want}", got.value);
        assert!(!got.regularized);
    }

    #[test]
    fn fid_flags_singular_covariance() {
        let a: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0]).collect();
        let f = fid(&a, &a).unwrap();
        assert!(f.regularized);
        assert!(f.value.abs() < 1e-6);
        assert!(fid(&a[..1], &a).is_err());
        assert!(fid(&a, &[vec![1.0], vec![2.0]]).is_err());
    }
}
