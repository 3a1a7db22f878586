//! Digit bitmaps: the pool sampled during generation and a built-in
//! seven-segment font for running without MNIST files.

use crate::error::{Error, Result};

pub const GLYPH_SIDE: usize = 28;
pub const GLYPH_LEN: usize = GLYPH_SIDE * GLYPH_SIDE;

/// A 28x28 grayscale bitmap, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glyph(Vec<u8>);

impl Glyph {
    pub fn new(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != GLYPH_LEN {
            return Err(Error::ShapeMismatch {
                expected: format!("{GLYPH_LEN} pixels"),
                found: format!("{} pixels", pixels.len()),
            });
        }
        Ok(Glyph(pixels))
    }

    pub fn pixels(&self) -> &[u8] {
        &self.0
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.0[y * GLYPH_SIDE + x]
    }
}

/// Bitmaps grouped by digit label.
#[derive(Debug, Clone)]
pub struct DigitPool {
    by_digit: [Vec<Glyph>; 10],
}

impl DigitPool {
    /// Groups `(label, glyph)` pairs. Every digit must be present.
    pub fn from_labeled(items: impl IntoIterator<Item = (u8, Glyph)>) -> Result<Self> {
        let mut by_digit: [Vec<Glyph>; 10] = Default::default();
        for (label, g) in items {
            let slot = by_digit
                .get_mut(label as usize)
                .ok_or_else(|| Error::InvalidConfig(format!("digit label {label} out of range")))?;
            slot.push(g);
        }
        if let Some(d) = by_digit.iter().position(Vec::is_empty) {
            return Err(Error::MissingDigitClass(d as u8));
        }
        Ok(DigitPool { by_digit })
    }

    /// One rendered glyph per digit.
    pub fn synthetic() -> Self {
        DigitPool::from_labeled((0..10u8).map(|d| (d, render_glyph(d)))).expect("all ten digits rendered")
    }

    pub fn class(&self, digit: u8) -> &[Glyph] {
        &self.by_digit[digit as usize]
    }

    pub fn len(&self) -> usize {
        self.by_digit.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// (row0, row1, col0, col1), half-open
const SEGMENTS: [(usize, usize, usize, usize); 7] = [
    (4, 7, 9, 19),    // a: top
    (5, 14, 18, 21),  // b: upper right
    (14, 23, 18, 21), // c: lower right
    (21, 24, 9, 19),  // d: bottom
    (14, 23, 7, 10),  // e: lower left
    (5, 14, 7, 10),   // f: upper left
    (12, 15, 9, 19),  // g: middle
];

// bit i set => segment i lit, segments ordered a..g
const DIGIT_SEGMENTS: [u8; 10] = [
    0b0111111, // 0: abcdef
    0b0000110, // 1: bc
    0b1011011, // 2: abdeg
    0b1001111, // 3: abcdg
    0b1100110, // 4: bcfg
    0b1101101, // 5: acdfg
    0b1111101, // 6: acdefg
    0b0000111, // 7: abc
    0b1111111, // 8
    0b1101111, // 9: abcdfg
];

/// Seven-segment style glyph for `digit` (taken modulo 10). Strokes are 255
/// with a one-pixel 96-valued halo so the bitmap has MNIST-like soft edges.
pub fn render_glyph(digit: u8) -> Glyph {
    let mask = DIGIT_SEGMENTS[(digit % 10) as usize];
    let mut px = vec![0u8; GLYPH_LEN];
    for (i, &(r0, r1, c0, c1)) in SEGMENTS.iter().enumerate() {
        if mask & (1 << i) == 0 {
            continue;
        }
        for y in r0.saturating_sub(1)..(r1 + 1).min(GLYPH_SIDE) {
            for x in c0.saturating_sub(1)..(c1 + 1).min(GLYPH_SIDE) {
                let core = (r0..r1).contains(&y) && (c0..c1).contains(&x);
                let v = if core { 255 } else { 96 };
                let p = &mut px[y * GLYPH_SIDE + x];
                *p = (*p).max(v);
            }
        }
    }
    Glyph(px)
}
