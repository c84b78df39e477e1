//! Dataset types, file formats and the synthetic paired-digit generator.

pub mod idx;
pub mod manifest;
pub mod prepared;
pub mod synthetic;
pub mod wav;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::Utterance;
use crate::error::{Error, Result};

/// A 28×28 grayscale image with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageItem {
    pixels: Vec<f32>,
    pub label: Option<String>,
}

impl ImageItem {
    pub const SIDE: usize = 28;
    pub const PIXELS: usize = Self::SIDE * Self::SIDE;

    pub fn new(pixels: Vec<f32>, label: Option<String>) -> Result<Self> {
        if pixels.len() != Self::PIXELS {
            return Err(Error::invalid(format!(
                "image needs {} pixels, got {}",
                Self::PIXELS,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("pixel {i} = {} outside [0,1]", pixels[i])));
        }
        Ok(ImageItem { pixels, label })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Items grouped by split; disjoint by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Partitioned<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Default for Partitioned<T> {
    fn default() -> Self {
        Partitioned {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        }
    }
}

impl<T> Partitioned<T> {
    pub fn get(&self, split: Split) -> &[T] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut Vec<T> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Vision,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Speech => "speech",
            Modality::Vision => "vision",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speech" => Ok(Modality::Speech),
            "vision" | "image" => Ok(Modality::Vision),
            other => Err(Error::invalid(format!("unknown modality {other:?}"))),
        }
    }
}

/// A borrowed single-modality item collection.
#[derive(Debug, Clone, Copy)]
pub enum Items<'a> {
    Speech(&'a [Utterance]),
    Images(&'a [ImageItem]),
}

impl<'a> Items<'a> {
    pub fn modality(&self) -> Modality {
        match self {
            Items::Speech(_) => Modality::Speech,
            Items::Images(_) => Modality::Vision,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Items::Speech(u) => u.len(),
            Items::Images(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> Option<&'a str> {
        match self {
            Items::Speech(u) => u[i].label.as_deref(),
            Items::Images(m) => m[i].label.as_deref(),
        }
    }

    /// Speaker of item `i`; `None` for images.
    pub fn speaker(&self, i: usize) -> Option<&'a str> {
        match self {
            Items::Speech(u) => Some(u[i].speaker_id.as_str()),
            Items::Images(_) => None,
        }
    }

    /// Whether `i` and `j` may form a training pair: distinct items and,
    /// for speech, distinct speakers.
    pub fn may_pair(&self, i: usize, j: usize) -> bool {
        i != j && (self.speaker(i).is_none() || self.speaker(i) != self.speaker(j))
    }
}

/// Speech and image collections drawn from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub id: String,
    pub speech: Partitioned<Utterance>,
    pub images: Partitioned<ImageItem>,
}

impl PairedDataset {
    pub fn items(&self, modality: Modality, split: Split) -> Items<'_> {
        match modality {
            Modality::Speech => Items::Speech(self.speech.get(split)),
            Modality::Vision => Items::Images(self.images.get(split)),
        }
    }

    pub fn speech_labels(&self) -> BTreeSet<&str> {
        Split::ALL
            .iter()
            .flat_map(|&s| self.speech.get(s))
            .filter_map(|u| u.label.as_deref())
            .collect()
    }

    pub fn image_labels(&self) -> BTreeSet<&str> {
        Split::ALL
            .iter()
            .flat_map(|&s| self.images.get(s))
            .filter_map(|u| u.label.as_deref())
            .collect()
    }
}

/// Fail if the background set shares any speech or image class with the
/// in-domain set.
pub fn check_class_disjoint(background: &PairedDataset, in_domain: &PairedDataset) -> Result<()> {
    let shared_speech: Vec<_> = background
        .speech_labels()
        .intersection(&in_domain.speech_labels())
        .map(|s| s.to_string())
        .collect();
    let shared_images: Vec<_> = background
        .image_labels()
        .intersection(&in_domain.image_labels())
        .map(|s| s.to_string())
        .collect();
    if shared_speech.is_empty() && shared_images.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "background set {} shares classes with {}: speech {shared_speech:?}, images {shared_images:?}",
            background.id, in_domain.id
        )))
    }
}

pub const SPOKEN_DIGITS: [&str; 11] = [
    "zero", "oh", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

/// Image class named by a spoken digit; both "zero" and "oh" denote 0.
pub fn spoken_to_digit(label: &str) -> Option<u8> {
    match label {
        "zero" | "oh" => Some(0),
        other => SPOKEN_DIGITS[2..].iter().position(|&d| d == other).map(|i| i as u8 + 1),
    }
}
