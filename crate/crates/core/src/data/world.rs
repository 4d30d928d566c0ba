//! Attribute space, renderer and the attribute-recovery oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizers::ToyImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

/// Cell of the 3x3 placement grid, row-major from the top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position(pub u8);

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether pixel `(x, y)` of a `box_size` square bounding box is covered.
    pub fn covers(self, x: usize, y: usize, box_size: usize) -> bool {
        let b = box_size as f64;
        let cx = x as f64 + 0.5 - b / 2.0;
        let cy = y as f64 + 0.5 - b / 2.0;
        match self {
            Shape::Square => true,
            Shape::Circle => cx * cx + cy * cy <= (b / 2.0) * (b / 2.0),
            Shape::Triangle => cx.abs() <= (y as f64 + 1.0) / 2.0,
            Shape::Cross => cx.abs() <= b / 6.0 || cy.abs() <= b / 6.0,
        }
    }
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Magenta,
        Color::Cyan,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::Cyan => [0.0, 1.0, 1.0],
        }
    }
}

impl Position {
    pub const COUNT: usize = 9;
    const WORDS: [&'static str; 9] = [
        "top-left",
        "top-center",
        "top-right",
        "middle-left",
        "center",
        "middle-right",
        "bottom-left",
        "bottom-center",
        "bottom-right",
    ];

    pub fn all() -> impl Iterator<Item = Position> {
        (0..9u8).map(Position)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn row(self) -> usize {
        self.index() / 3
    }

    pub fn col(self) -> usize {
        self.index() % 3
    }

    pub fn word(self) -> &'static str {
        Self::WORDS[self.index()]
    }
}

/// The ground-truth label of a toy image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
}

/// Which attribute an edit instruction changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttributeField {
    Shape,
    Color,
    Position,
}

impl Attributes {
    pub const COUNT: usize = 4 * 6 * 9;

    pub fn from_index(i: usize) -> Self {
        assert!(i < Self::COUNT);
        Self {
            shape: Shape::ALL[i / 54],
            color: Color::ALL[(i / 9) % 6],
            position: Position((i % 9) as u8),
        }
    }

    pub fn index(&self) -> usize {
        self.shape.index() * 54 + self.color.index() * 9 + self.position.index()
    }

    pub fn all() -> impl Iterator<Item = Attributes> {
        (0..Self::COUNT).map(Self::from_index)
    }

    /// Fields that differ from `other`.
    pub fn diff(&self, other: &Attributes) -> Vec<AttributeField> {
        let mut d = Vec::new();
        if self.shape != other.shape {
            d.push(AttributeField::Shape);
        }
        if self.color != other.color {
            d.push(AttributeField::Color);
        }
        if self.position != other.position {
            d.push(AttributeField::Position);
        }
        d
    }

    /// Pixel bounding box `(x0, y0, size)` of the shape in a `side`-pixel image.
    pub fn bbox(&self, side: usize) -> (usize, usize, usize) {
        let cell = side / 3;
        let size = cell - 2;
        (
            self.position.col() * cell + 1,
            self.position.row() * cell + 1,
            size,
        )
    }
}

/// Renders a shape over a uniform gray background of intensity `background`.
pub fn render(attrs: &Attributes, side: usize, background: f32) -> Result<ToyImage> {
    if !side.is_multiple_of(3) || side < 9 {
        return Err(Error::Config(format!(
            "image side {side} must be a multiple of 3 and at least 9"
        )));
    }
    let mut pixels = vec![background; side * side * 3];
    let (x0, y0, size) = attrs.bbox(side);
    let rgb = attrs.color.rgb();
    for y in 0..size {
        for x in 0..size {
            if attrs.shape.covers(x, y, size) {
                let o = ((y0 + y) * side + x0 + x) * 3;
                pixels[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }
    ToyImage::new(side, side, pixels, Some(*attrs))
}

/// Blank background image without any attributes.
pub fn render_blank(side: usize, background: f32) -> Result<ToyImage> {
    ToyImage::new(side, side, vec![background; side * side * 3], None)
}

/// Residual MSE above which a template fit is rejected.
const MATCH_RESIDUAL: f64 = 0.03;
/// Max RGB distance between the fitted foreground and the nearest palette color.
const MATCH_COLOR_DIST: f64 = 0.45;

/// Recovers `(shape, color, position)` by least-squares template fitting.
///
/// For each shape mask at each grid position the foreground and background
/// colors are fitted as the per-channel means inside and outside the mask.
/// The best fit is accepted only if its residual is small and its foreground
/// is close to a palette color. Returns `None` otherwise.
pub fn attribute_oracle(img: &ToyImage) -> Option<Attributes> {
    let side = img.width();
    if img.height() != side || !side.is_multiple_of(3) || side < 9 {
        return None;
    }
    let px = img.pixels();
    let n = (side * side) as f64;
    let mut total = [0.0f64; 3];
    let mut total_sq = 0.0f64;
    for p in px.chunks_exact(3) {
        for c in 0..3 {
            total[c] += p[c] as f64;
            total_sq += (p[c] as f64) * (p[c] as f64);
        }
    }
    let mut best: Option<(f64, Shape, Position, [f64; 3])> = None;
    for shape in Shape::ALL {
        for position in Position::all() {
            let attrs = Attributes {
                shape,
                color: Color::Red,
                position,
            };
            let (x0, y0, size) = attrs.bbox(side);
            let mut inside = [0.0f64; 3];
            let mut count = 0usize;
            for y in 0..size {
                for x in 0..size {
                    if shape.covers(x, y, size) {
                        let o = ((y0 + y) * side + x0 + x) * 3;
                        for c in 0..3 {
                            inside[c] += px[o + c] as f64;
                        }
                        count += 1;
                    }
                }
            }
            let nin = count as f64;
            let nout = n - nin;
            // SSE of the two-mean fit = sum x^2 - sum_in^2/n_in - sum_out^2/n_out.
            let mut sse = total_sq;
            let mut fg = [0.0; 3];
            for c in 0..3 {
                let out = total[c] - inside[c];
                sse -= inside[c] * inside[c] / nin + out * out / nout;
                fg[c] = inside[c] / nin;
            }
            let mse = sse / (n * 3.0);
            if best.as_ref().is_none_or(|b| mse < b.0) {
                best = Some((mse, shape, position, fg));
            }
        }
    }
    let (mse, shape, position, fg) = best?;
    if mse > MATCH_RESIDUAL {
        return None;
    }
    let (color, dist) = Color::ALL
        .iter()
        .map(|&c| {
            let rgb = c.rgb();
            let d: f64 = (0..3).map(|i| (fg[i] - rgb[i] as f64).powi(2)).sum();
            (c, d.sqrt())
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    if dist > MATCH_COLOR_DIST {
        return None;
    }
    Some(Attributes {
        shape,
        color,
        position,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attribute_index_is_a_bijection() {
        for i in 0..Attributes::COUNT {
            assert_eq!(Attributes::from_index(i).index(), i);
        }
    }

    #[test]
    fn shapes_have_distinct_masks() {
        for size in [6, 14] {
            let masks: Vec<Vec<bool>> = Shape::ALL
                .iter()
                .map(|s| {
                    (0..size * size)
                        .map(|i| s.covers(i % size, i / size, size))
                        .collect()
                })
                .collect();
            for i in 0..4 {
                for j in i + 1..4 {
                    assert_ne!(masks[i], masks[j], "size {size}");
                }
            }
        }
    }

    #[test]
    fn oracle_recovers_every_clean_render() {
        for side in [24, 48] {
            for bg in [0.0, 0.15, 0.3] {
                for a in Attributes::all() {
                    let img = render(&a, side, bg).unwrap();
                    assert_eq!(attribute_oracle(&img), Some(a), "side {side} bg {bg}");
                }
            }
        }
    }

    #[test]
    fn oracle_rejects_uniform_noise_and_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let px = (0..24 * 24 * 3).map(|_| rng.random::<f32>()).collect();
            let img = ToyImage::new(24, 24, px, None).unwrap();
            assert_eq!(attribute_oracle(&img), None);
        }
        assert_eq!(attribute_oracle(&render_blank(24, 0.2).unwrap()), None);
    }

    #[test]
    fn render_rejects_bad_side() {
        let a = Attributes::from_index(0);
        assert!(render(&a, 16, 0.0).is_err());
    }
}
