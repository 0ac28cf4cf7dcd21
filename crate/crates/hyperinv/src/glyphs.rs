//! Procedurally drawn glyph classes: a network-free stand-in for MNIST
//! when no IDX files are present. Ten stroke patterns, rendered at 28x28
//! with per-sample jitter, chosen so that (a) a linear model on raw
//! pixels separates the classes and (b) no class is 4-fold rotationally
//! symmetric, keeping rotation prediction solvable.

use crate::rng::Rng;
use crate::tensor::Tensor;

const SIDE: usize = 28;

type Seg = ((f64, f64), (f64, f64));

/// Two disjoint stroke alphabets: `Training` backs the pre-training
/// corpus, `Transfer` stands in for the downstream domain shift (a
/// different glyph set with the same factor structure).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlyphAlphabet {
    Training,
    Transfer,
}

// Strokes in unit coordinates (x, y), y down.
fn strokes(alphabet: GlyphAlphabet, class: usize) -> Vec<Seg> {
    match alphabet {
        GlyphAlphabet::Training => training_strokes(class),
        GlyphAlphabet::Transfer => transfer_strokes(class),
    }
}

fn training_strokes(class: usize) -> Vec<Seg> {
    match class {
        // Gamma: top bar plus left vertical.
        0 => vec![((0.2, 0.2), (0.8, 0.2)), ((0.2, 0.2), (0.2, 0.8))],
        // Off-center vertical bar.
        1 => vec![((0.35, 0.15), (0.35, 0.85))],
        // Z.
        2 => vec![
            ((0.2, 0.2), (0.8, 0.2)),
            ((0.8, 0.2), (0.2, 0.8)),
            ((0.2, 0.8), (0.8, 0.8)),
        ],
        // Mirrored E.
        3 => vec![
            ((0.25, 0.2), (0.75, 0.2)),
            ((0.25, 0.5), (0.75, 0.5)),
            ((0.25, 0.8), (0.75, 0.8)),
            ((0.75, 0.2), (0.75, 0.8)),
        ],
        // L.
        4 => vec![((0.25, 0.15), (0.25, 0.8)), ((0.25, 0.8), (0.8, 0.8))],
        // T.
        5 => vec![((0.15, 0.25), (0.85, 0.25)), ((0.5, 0.25), (0.5, 0.85))],
        // 7.
        6 => vec![((0.2, 0.2), (0.8, 0.2)), ((0.8, 0.2), (0.35, 0.85))],
        // Off-center cross.
        7 => vec![((0.4, 0.15), (0.4, 0.75)), ((0.15, 0.45), (0.75, 0.45))],
        // Lopsided V.
        8 => vec![((0.2, 0.2), (0.5, 0.8)), ((0.5, 0.8), (0.8, 0.35))],
        // Slash with a hook.
        9 => vec![((0.25, 0.75), (0.75, 0.25)), ((0.75, 0.25), (0.75, 0.6))],
        _ => panic!("glyph class {class} out of range"),
    }
}

fn transfer_strokes(class: usize) -> Vec<Seg> {
    match class {
        // F.
        0 => vec![
            ((0.3, 0.15), (0.3, 0.85)),
            ((0.3, 0.15), (0.75, 0.15)),
            ((0.3, 0.5), (0.65, 0.5)),
        ],
        // J.
        1 => vec![
            ((0.65, 0.15), (0.65, 0.75)),
            ((0.65, 0.75), (0.45, 0.85)),
            ((0.45, 0.85), (0.3, 0.7)),
        ],
        // P.
        2 => vec![
            ((0.3, 0.15), (0.3, 0.85)),
            ((0.3, 0.15), (0.65, 0.2)),
            ((0.65, 0.2), (0.65, 0.45)),
            ((0.65, 0.45), (0.3, 0.5)),
        ],
        // y.
        3 => vec![((0.3, 0.2), (0.5, 0.55)), ((0.7, 0.2), (0.4, 0.85))],
        // Pi.
        4 => vec![
            ((0.2, 0.2), (0.8, 0.2)),
            ((0.3, 0.2), (0.3, 0.8)),
            ((0.7, 0.2), (0.7, 0.8)),
        ],
        // b.
        5 => vec![
            ((0.35, 0.15), (0.35, 0.85)),
            ((0.35, 0.5), (0.65, 0.55)),
            ((0.65, 0.55), (0.65, 0.8)),
            ((0.65, 0.8), (0.35, 0.85)),
        ],
        // k.
        6 => vec![
            ((0.3, 0.15), (0.3, 0.85)),
            ((0.65, 0.3), (0.3, 0.55)),
            ((0.3, 0.55), (0.65, 0.85)),
        ],
        // r.
        7 => vec![
            ((0.35, 0.35), (0.35, 0.85)),
            ((0.35, 0.45), (0.55, 0.35)),
            ((0.55, 0.35), (0.68, 0.42)),
        ],
        // q.
        8 => vec![
            ((0.6, 0.3), (0.4, 0.3)),
            ((0.4, 0.3), (0.35, 0.5)),
            ((0.35, 0.5), (0.6, 0.55)),
            ((0.6, 0.3), (0.6, 0.9)),
        ],
        // t.
        9 => vec![
            ((0.45, 0.15), (0.45, 0.8)),
            ((0.45, 0.8), (0.62, 0.85)),
            ((0.3, 0.35), (0.65, 0.35)),
        ],
        _ => panic!("glyph class {class} out of range"),
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Render one jittered instance of a glyph class as a [1, 28, 28] tensor.
pub fn render_glyph(class: usize, rng: &mut Rng) -> Tensor {
    render_glyph_from(GlyphAlphabet::Training, class, rng)
}

/// Render from a chosen alphabet.
///
/// Glyphs are compact and centered, so rotation information lives mostly
/// in local stroke orientation rather than gross mass position.
pub fn render_glyph_from(alphabet: GlyphAlphabet, class: usize, rng: &mut Rng) -> Tensor {
    let scale = (SIDE - 1) as f64;
    // Shrink the unit design box about its center.
    let extent = 0.55;
    let shift_x = rng.uniform(-1.2, 1.2);
    let shift_y = rng.uniform(-1.2, 1.2);
    let intensity = rng.uniform(0.75, 1.0);
    let thickness = rng.uniform(1.4, 1.9);
    // Within-class slant, well inside the 30-degree label grid spacing.
    let slant = rng.uniform(-10.0, 10.0) * std::f64::consts::PI / 180.0;
    let (sin, cos) = slant.sin_cos();
    let c = (SIDE - 1) as f64 / 2.0;
    let place = |x: f64, y: f64, rng: &mut Rng| {
        let (px, py) = (
            (0.5 + (x - 0.5) * extent) * scale - c,
            (0.5 + (y - 0.5) * extent) * scale - c,
        );
        (
            cos * px - sin * py + c + shift_x + rng.uniform(-0.5, 0.5),
            sin * px + cos * py + c + shift_y + rng.uniform(-0.5, 0.5),
        )
    };
    let segs: Vec<Seg> = strokes(alphabet, class)
        .into_iter()
        .map(|((x0, y0), (x1, y1))| {
            (place(x0, y0, rng), place(x1, y1, rng))
        })
        .collect();

    let mut data = vec![0.0; SIDE * SIDE];
    for r in 0..SIDE {
        for x in 0..SIDE {
            let p = (x as f64, r as f64);
            let mut v: f64 = 0.0;
            for &(a, b) in &segs {
                let d = dist_to_segment(p, a, b);
                v = v.max((thickness - d).clamp(0.0, 1.0));
            }
            data[r * SIDE + x] = v * intensity;
        }
    }
    Tensor::new(vec![1, SIDE, SIDE], data).unwrap()
}

/// A balanced glyph corpus: `n_per_class` instances of each of the 10
/// classes, deterministic in `seed`. Returns images [N, 1, 28, 28] and
/// class labels.
pub fn synth_glyph_dataset(n_per_class: usize, seed: u64) -> (Tensor, Vec<usize>) {
    synth_glyph_dataset_from(GlyphAlphabet::Training, n_per_class, seed)
}

/// A balanced corpus over a chosen alphabet.
pub fn synth_glyph_dataset_from(
    alphabet: GlyphAlphabet,
    n_per_class: usize,
    seed: u64,
) -> (Tensor, Vec<usize>) {
    let n = n_per_class * 10;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let mut rng = Rng::from_parts(seed, "glyph", &[i as u64]);
        images.push(render_glyph_from(alphabet, class, &mut rng));
        labels.push(class);
    }
    (Tensor::stack(&images).unwrap(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::rotate_image;

    #[test]
    fn same_class_draws_differ() {
        let mut r1 = Rng::from_parts(3, "glyph", &[0]);
        let mut r2 = Rng::from_parts(3, "glyph", &[10]);
        let a = render_glyph(0, &mut r1);
        let b = render_glyph(0, &mut r2);
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn dataset_is_deterministic_in_seed() {
        let (a, la) = synth_glyph_dataset(3, 11);
        let (b, lb) = synth_glyph_dataset(3, 11);
        assert_eq!(a.data(), b.data());
        assert_eq!(la, lb);
        let (c, _) = synth_glyph_dataset(3, 12);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn glyphs_are_not_rotationally_symmetric() {
        for alphabet in [GlyphAlphabet::Training, GlyphAlphabet::Transfer] {
            for class in 0..10 {
                let mut rng = Rng::from_parts(1, "glyph", &[class as u64]);
                let g = render_glyph_from(alphabet, class, &mut rng);
                let rot = rotate_image(&g, 90.0).unwrap();
                let dist: f64 = g
                    .data()
                    .iter()
                    .zip(rot.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 1.0, "{alphabet:?} class {class} too symmetric: L2 {dist}");
            }
        }
    }

    #[test]
    fn alphabets_differ() {
        let (a, _) = synth_glyph_dataset_from(GlyphAlphabet::Training, 2, 9);
        let (b, _) = synth_glyph_dataset_from(GlyphAlphabet::Transfer, 2, 9);
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn pixel_range_is_unit_interval() {
        let (images, _) = synth_glyph_dataset(2, 5);
        for &v in images.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    // Logistic-regression oracle: the classes must be learnable by a
    // linear model on raw pixels.
    #[test]
    fn linear_model_separates_classes() {
        use crate::autodiff::Graph;
        use crate::optim::{Adam, ParamSet};

        for alphabet in [GlyphAlphabet::Training, GlyphAlphabet::Transfer] {
            let (images, labels) = synth_glyph_dataset_from(alphabet, 30, 77);
            let n = labels.len();
            let flat = images.clone().reshaped(vec![n, 28 * 28]).unwrap();
            let mut params = ParamSet::new();
            let w = params.push("w", Tensor::zeros(vec![28 * 28, 10]), false);
            let mut adam = Adam::new(&params, 0.0);
            for _ in 0..150 {
                let mut g = Graph::new();
                let wid = g.leaf(params.tensor(w));
                let x = g.leaf(&flat);
                let logits = g.matmul(x, wid).unwrap();
                let loss = g.softmax_cross_entropy(logits, &labels).unwrap();
                g.backward(loss).unwrap();
                params.tensor_mut(w).grad = g.grad(wid).map(|v| v.to_vec());
                adam.step(&mut params, 0.05).unwrap();
            }
            let mut g = Graph::new();
            let wid = g.leaf(params.tensor(w));
            let x = g.leaf(&flat);
            let logits = g.matmul(x, wid).unwrap();
            let data = g.data(logits);
            let hits = labels
                .iter()
                .enumerate()
                .filter(|&(i, &y)| {
                    let row = &data[i * 10..(i + 1) * 10];
                    let best = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    best == y
                })
                .count();
            let acc = hits as f64 / n as f64;
            assert!(acc > 0.9, "{alphabet:?} linear train accuracy {acc}");
        }
    }
}
