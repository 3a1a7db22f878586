//! The attribute vocabulary and its sentence templates.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder replaced by the attribute name inside a template.
pub const SLOT: &str = "[slot]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttrId(pub u8);

impl AttrId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for AttrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Digit,
    DigitColor,
    Shape,
    ShapeSize,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Digit,
        Category::DigitColor,
        Category::Shape,
        Category::ShapeSize,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub id: AttrId,
    pub name: String,
    pub category: Category,
    /// Render color for `DigitColor` attributes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb: Option<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCatalog {
    pub attributes: Vec<Attribute>,
    pub templates: BTreeMap<Category, Vec<String>>,
}

pub const DIGIT_NAMES: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

const COLORS: [(&str, [u8; 3]); 5] = [
    ("purple", [128, 0, 255]),
    ("blue", [0, 0, 255]),
    ("green", [0, 200, 0]),
    ("yellow", [255, 220, 0]),
    ("red", [255, 0, 0]),
];

impl AttributeCatalog {
    /// The 20-attribute digit-grid catalog: ten digits, five colors, two
    /// shapes and three sizes, with ids assigned in that order.
    pub fn standard() -> Self {
        let mut attributes = Vec::with_capacity(20);
        let mut push = |name: &str, category, rgb| {
            let id = AttrId(attributes.len() as u8);
            attributes.push(Attribute {
                id,
                name: name.to_string(),
                category,
                rgb,
            });
        };
        for d in DIGIT_NAMES {
            push(d, Category::Digit, None);
        }
        for (c, rgb) in COLORS {
            push(c, Category::DigitColor, Some(rgb));
        }
        for s in ["rectangle", "circle"] {
            push(s, Category::Shape, None);
        }
        for s in ["small", "medium", "large"] {
            push(s, Category::ShapeSize, None);
        }

        let t = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut templates = BTreeMap::new();
        templates.insert(
            Category::Digit,
            t(&[
                "The image shows a [slot]",
                "The digit appears to be [slot]",
                "There is an image showing a [slot]",
                "The number is a [slot]",
            ]),
        );
        templates.insert(
            Category::DigitColor,
            t(&[
                "The color is [slot]",
                "The digit appears to be [slot]",
                "There is a [slot] image",
                "The image is [slot]",
            ]),
        );
        templates.insert(
            Category::Shape,
            t(&[
                "The shape is a [slot]",
                "The shape appears to be a [slot]",
                "There is a [slot]",
                "The image has a [slot]",
            ]),
        );
        templates.insert(
            Category::ShapeSize,
            t(&[
                "The shape size is [slot]",
                "The size of the shape is [slot]",
                "The shape is [slot]",
            ]),
        );
        AttributeCatalog { attributes, templates }
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn get(&self, id: AttrId) -> Result<&Attribute> {
        self.attributes
            .get(id.index())
            .filter(|a| a.id == id)
            .ok_or_else(|| Error::UnknownAttribute(id.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn in_category(&self, category: Category) -> impl Iterator<Item = &Attribute> {
        self.attributes.iter().filter(move |a| a.category == category)
    }

    pub fn templates_for(&self, category: Category) -> &[String] {
        self.templates.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All prompts for one attribute: every template of its category with
    /// the slot filled.
    pub fn prompts(&self, id: AttrId) -> Result<Vec<String>> {
        let attr = self.get(id)?;
        Ok(self
            .templates_for(attr.category)
            .iter()
            .map(|t| fill(t, &attr.name))
            .collect())
    }

    /// Attribute ids whose names occur as whole tokens in `sentence`.
    pub fn attributes_in(&self, sentence: &str) -> Vec<AttrId> {
        let tokens = tokenize(sentence);
        let mut found: Vec<AttrId> = self
            .attributes
            .iter()
            .filter(|a| tokens.contains(&a.name))
            .map(|a| a.id)
            .collect();
        found.sort();
        found.dedup();
        found
    }

    /// Checks the structural invariants: ids match positions, names are
    /// unique, every category has at least three templates and every
    /// template has exactly one slot.
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.attributes.iter().enumerate() {
            if a.id.index() != i {
                return Err(Error::InvalidConfig(format!(
                    "attribute {} has id {} at position {i}",
                    a.name, a.id
                )));
            }
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::InvalidConfig(format!("duplicate name {}", a.name)));
            }
        }
        for c in Category::ALL {
            let ts = self.templates_for(c);
            if ts.len() < 3 {
                return Err(Error::InvalidConfig(format!(
                    "category {c:?} has {} templates",
                    ts.len()
                )));
            }
            if let Some(t) = ts.iter().find(|t| t.matches(SLOT).count() != 1) {
                return Err(Error::InvalidConfig(format!("template {t:?} needs one slot")));
            }
        }
        Ok(())
    }
}

pub fn fill(template: &str, name: &str) -> String {
    template.replacen(SLOT, name, 1)
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}
