//! Scene aspects, rendering, caption grammar and the caption verifier.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LlipError, Result};
use crate::numerics::Tensor;

pub const IMAGE_SIZE: usize = 32;

macro_rules! aspect_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Caption wording.
            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.word() == w)
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

aspect_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Diamond => "diamond",
    Cross => "cross",
    Ring => "ring",
    Frame => "frame",
    Bar => "bar",
});

aspect_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
});

aspect_enum!(Position {
    TopLeft => "top left",
    TopRight => "top right",
    BottomLeft => "bottom left",
    BottomRight => "bottom right",
});

aspect_enum!(Size {
    Small => "small",
    Large => "large",
});

aspect_enum!(Background {
    Black => "black",
    Gray => "gray",
    White => "white",
    Pink => "pink",
});

impl Color {
    fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.25, 0.95],
            Color::Yellow => [0.95, 0.9, 0.1],
            Color::Purple => [0.6, 0.15, 0.8],
            Color::Orange => [1.0, 0.55, 0.05],
        }
    }
}

impl Background {
    fn rgb(self) -> [f32; 3] {
        match self {
            Background::Black => [0.05, 0.05, 0.05],
            Background::Gray => [0.5, 0.5, 0.5],
            Background::White => [0.95, 0.95, 0.95],
            Background::Pink => [1.0, 0.75, 0.8],
        }
    }
}

impl Position {
    fn centre(self) -> (f32, f32) {
        let q = IMAGE_SIZE as f32 / 4.0;
        match self {
            Position::TopLeft => (q, q),
            Position::TopRight => (3.0 * q, q),
            Position::BottomLeft => (q, 3.0 * q),
            Position::BottomRight => (3.0 * q, 3.0 * q),
        }
    }
}

impl Size {
    fn radius(self) -> f32 {
        match self {
            Size::Small => 3.5,
            Size::Large => 6.5,
        }
    }
}

/// The ground-truth description of one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Aspects {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
    pub size: Size,
    pub background: Background,
}

/// Maximum centre offset in pixels along each axis.
pub const JITTER: f32 = 1.5;
/// Maximum per-channel additive pixel noise.
pub const NOISE: f32 = 0.04;

fn inside(shape: Shape, dx: f32, dy: f32, r: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let dist = (dx * dx + dy * dy).sqrt();
    match shape {
        Shape::Circle => dist <= r,
        Shape::Square => ax.max(ay) <= 0.85 * r,
        Shape::Triangle => dy >= -r && dy <= r && ax <= 0.5 * (dy + r),
        Shape::Diamond => ax + ay <= r,
        Shape::Cross => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
        Shape::Ring => dist <= r && dist >= 0.55 * r,
        Shape::Frame => ax.max(ay) <= 0.85 * r && ax.max(ay) >= 0.45 * r,
        Shape::Bar => ax <= r && ay <= 0.35 * r,
    }
}

/// Renders `[3, 32, 32]` pixels quantized to multiples of 1/255 (so that the
/// in-memory image equals its PPM round trip).
pub fn render<R: Rng>(a: &Aspects, rng: &mut R) -> Tensor<f32> {
    let s = IMAGE_SIZE;
    let (cx, cy) = a.position.centre();
    let cx = cx + rng.random_range(-JITTER..=JITTER);
    let cy = cy + rng.random_range(-JITTER..=JITTER);
    let r = a.size.radius();
    let fg = a.color.rgb();
    let bg = a.background.rgb();
    let mut data = vec![0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let base = if inside(a.shape, dx, dy, r) { fg } else { bg };
            for c in 0..3 {
                let v = (base[c] + rng.random_range(-NOISE..=NOISE)).clamp(0.0, 1.0);
                data[c * s * s + y * s + x] = (v * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(&[3, s, s], data).expect("render shape")
}

fn article(next: &str) -> &'static str {
    if next.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn with_article(rest: String) -> String {
    format!("{} {}", article(&rest), rest)
}

pub const CAPTION_PREFIXES: [&str; 3] = ["", "a photo of ", "an image of "];

/// One caption per aspect subset, each optionally prefixed.
pub fn captions<R: Rng>(a: &Aspects, rng: &mut R) -> Vec<String> {
    let (shape, color, pos, size, bg) = (
        a.shape.word(),
        a.color.word(),
        a.position.word(),
        a.size.word(),
        a.background.word(),
    );
    let bodies = [
        with_article(format!("{color} {shape}")),
        with_article(format!("{shape} in the {pos}")),
        with_article(format!("{size} shape on a {bg} background")),
        with_article(format!("{color} shape in the {pos}")),
        with_article(format!("{size} {shape} on a {bg} background")),
    ];
    bodies
        .into_iter()
        .map(|b| format!("{}{}", CAPTION_PREFIXES.choose(rng).expect("prefixes"), b))
        .collect()
}

/// Aspect predicates a caption asserts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Claims {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub position: Option<Position>,
    pub size: Option<Size>,
    pub background: Option<Background>,
}

impl Claims {
    pub fn holds_for(&self, a: &Aspects) -> bool {
        self.shape.is_none_or(|v| v == a.shape)
            && self.color.is_none_or(|v| v == a.color)
            && self.position.is_none_or(|v| v == a.position)
            && self.size.is_none_or(|v| v == a.size)
            && self.background.is_none_or(|v| v == a.background)
    }

    pub fn count(&self) -> usize {
        [
            self.shape.is_some(),
            self.color.is_some(),
            self.position.is_some(),
            self.size.is_some(),
            self.background.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }
}

/// Parses a caption of the generator grammar back into aspect claims.
pub fn parse_caption(caption: &str) -> Result<Claims> {
    let bad = || LlipError::Input(format!("caption outside the grammar: {:?}", caption));
    let mut w: Vec<&str> = caption.split_whitespace().collect();
    for prefix in ["a photo of", "an image of"] {
        let p: Vec<&str> = prefix.split(' ').collect();
        if w.len() > p.len() && w[..p.len()] == p[..] {
            w.drain(..p.len());
            break;
        }
    }
    let mut it = w.into_iter();
    let mut c = Claims::default();
    match it.next() {
        Some("a") | Some("an") => {}
        _ => return Err(bad()),
    }
    let mut tok = it.next().ok_or_else(bad)?;
    if let Some(s) = Size::from_word(tok) {
        c.size = Some(s);
        tok = it.next().ok_or_else(bad)?;
    }
    if let Some(col) = Color::from_word(tok) {
        c.color = Some(col);
        tok = it.next().ok_or_else(bad)?;
    }
    if let Some(s) = Shape::from_word(tok) {
        c.shape = Some(s);
    } else if tok != "shape" {
        return Err(bad());
    }
    match it.next() {
        None => {}
        Some("in") => {
            if it.next() != Some("the") {
                return Err(bad());
            }
            let v = it.next().ok_or_else(bad)?;
            let h = it.next().ok_or_else(bad)?;
            c.position = Some(Position::from_word(&format!("{v} {h}")).ok_or_else(bad)?);
            if it.next().is_some() {
                return Err(bad());
            }
        }
        Some("on") => {
            if it.next() != Some("a") {
                return Err(bad());
            }
            let b = it.next().ok_or_else(bad)?;
            c.background = Some(Background::from_word(b).ok_or_else(bad)?);
            if it.next() != Some("background") || it.next().is_some() {
                return Err(bad());
            }
        }
        Some(_) => return Err(bad()),
    }
    if c.count() == 0 {
        return Err(bad());
    }
    Ok(c)
}

/// True when `caption` parses and every claim holds for `a`.
pub fn verify_caption(caption: &str, a: &Aspects) -> bool {
    parse_caption(caption).is_ok_and(|c| c.holds_for(a))
}

/// Balanced aspect draws: each aspect cycles through shuffled blocks of its
/// category list, so every category count is within one of `n / |category|`.
pub fn balanced_aspects<R: Rng>(n: usize, rng: &mut R) -> Vec<Aspects> {
    fn column<T: Copy, R: Rng>(all: &[T], n: usize, rng: &mut R) -> Vec<T> {
        let mut out = Vec::with_capacity(n + all.len());
        while out.len() < n {
            let mut block = all.to_vec();
            block.shuffle(rng);
            out.extend(block);
        }
        out.truncate(n);
        out
    }
    let shapes = column(Shape::ALL, n, rng);
    let colors = column(Color::ALL, n, rng);
    let positions = column(Position::ALL, n, rng);
    let sizes = column(Size::ALL, n, rng);
    let backgrounds = column(Background::ALL, n, rng);
    (0..n)
        .map(|i| Aspects {
            shape: shapes[i],
            color: colors[i],
            position: positions[i],
            size: sizes[i],
            background: backgrounds[i],
        })
        .collect()
}
