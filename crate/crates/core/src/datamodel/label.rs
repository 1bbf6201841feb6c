use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index as stored in 8-bit label images.
pub type ClassId = u8;

/// Reserved label value excluded from every loss and metric.
pub const IGNORE_VALUE: ClassId = 255;

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer of {} bytes does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }
}

/// An ordered set of class indices with O(1) membership.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<ClassId>", into = "Vec<ClassId>")]
pub struct ClassSet {
    ids: Vec<ClassId>,
    member: Box<[bool; 256]>,
}

impl ClassSet {
    pub fn new(ids: impl IntoIterator<Item = ClassId>) -> Self {
        let mut member = Box::new([false; 256]);
        let mut sorted: Vec<ClassId> = ids.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        for &c in &sorted {
            member[c as usize] = true;
        }
        Self {
            ids: sorted,
            member,
        }
    }

    pub fn range(start: ClassId, end: ClassId) -> Self {
        Self::new(start..end)
    }

    pub fn contains(&self, c: ClassId) -> bool {
        self.member[c as usize]
    }

    pub fn ids(&self) -> &[ClassId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max(&self) -> Option<ClassId> {
        self.ids.last().copied()
    }

    pub fn union(&self, other: &ClassSet) -> ClassSet {
        ClassSet::new(self.ids.iter().chain(other.ids.iter()).copied())
    }

    pub fn is_disjoint(&self, other: &ClassSet) -> bool {
        self.ids.iter().all(|&c| !other.contains(c))
    }

    pub fn is_subset(&self, other: &ClassSet) -> bool {
        self.ids.iter().all(|&c| other.contains(c))
    }
}

impl std::fmt::Debug for ClassSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.ids.iter()).finish()
    }
}

impl From<Vec<ClassId>> for ClassSet {
    fn from(v: Vec<ClassId>) -> Self {
        ClassSet::new(v)
    }
}

impl From<ClassSet> for Vec<ClassId> {
    fn from(s: ClassSet) -> Self {
        s.ids
    }
}

/// H×W grid of class indices with a reserved ignore value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<ClassId>,
    ignore_value: ClassId,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<ClassId>) -> Result<Self> {
        Self::with_ignore(height, width, values, IGNORE_VALUE)
    }

    pub fn with_ignore(
        height: usize,
        width: usize,
        values: Vec<ClassId>,
        ignore_value: ClassId,
    ) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "label buffer of {} values does not match {height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            ignore_value,
        })
    }

    pub fn filled(height: usize, width: usize, value: ClassId) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
            ignore_value: IGNORE_VALUE,
        }
    }

    pub fn ignored(height: usize, width: usize) -> Self {
        Self::filled(height, width, IGNORE_VALUE)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ignore_value(&self) -> ClassId {
        self.ignore_value
    }

    pub fn values(&self) -> &[ClassId] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ClassId] {
        &mut self.values
    }

    pub fn get(&self, y: usize, x: usize) -> ClassId {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: ClassId) {
        self.values[y * self.width + x] = value;
    }

    pub fn is_ignore(&self, value: ClassId) -> bool {
        value == self.ignore_value
    }

    /// Copy with every class outside `keep` replaced by the ignore value.
    pub fn restrict_to(&self, keep: &ClassSet) -> LabelMap {
        let values = self
            .values
            .iter()
            .map(|&v| {
                if v != self.ignore_value && keep.contains(v) {
                    v
                } else {
                    self.ignore_value
                }
            })
            .collect();
        LabelMap {
            values,
            ..*self
        }
    }

    pub fn count_in(&self, classes: &ClassSet) -> usize {
        self.values
            .iter()
            .filter(|&&v| v != self.ignore_value && classes.contains(v))
            .count()
    }

    pub fn contains_any(&self, classes: &ClassSet) -> bool {
        self.values
            .iter()
            .any(|&v| v != self.ignore_value && classes.contains(v))
    }

    pub fn count_non_ignore(&self) -> usize {
        self.values.iter().filter(|&&v| v != self.ignore_value).count()
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut out = self.clone();
        for y in 0..self.height {
            let row = &mut out.values[y * self.width..(y + 1) * self.width];
            row.reverse();
        }
        out
    }

    /// Every non-ignore value must belong to `allowed`.
    pub fn validate(&self, allowed: &ClassSet) -> Result<()> {
        if let Some(bad) = self
            .values
            .iter()
            .find(|&&v| v != self.ignore_value && !allowed.contains(v))
        {
            return Err(Error::Validation(format!(
                "label value {bad} is not a declared class (allowed: {:?})",
                allowed
            )));
        }
        Ok(())
    }

    pub fn check_same_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::Shape(format!(
                "label map is {}x{}, expected {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}
