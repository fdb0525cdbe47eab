use std::ops::Range;

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

/// Handle to a named slice inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceId(pub(crate) usize);

/// A named, shaped, contiguous region of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat storage for every trainable real, partitioned into disjoint named
/// slices that cover the whole array in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    values: Vec<f64>,
    slices: Vec<ParamSlice>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a row-major `rows × cols` slice.
    ///
    /// Panics if `values.len() != rows * cols`.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, values: &[f64]) -> SliceId {
        assert_eq!(values.len(), rows * cols, "slice shape does not match data");
        let id = SliceId(self.slices.len());
        self.slices.push(ParamSlice {
            name: name.into(),
            offset: self.values.len(),
            rows,
            cols,
        });
        self.values.extend_from_slice(values);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn slice(&self, id: SliceId) -> &ParamSlice {
        &self.slices[id.0]
    }

    pub fn find(&self, name: &str) -> Option<SliceId> {
        self.slices.iter().position(|s| s.name == name).map(SliceId)
    }

    pub fn get(&self, id: SliceId) -> &[f64] {
        &self.values[self.slices[id.0].range()]
    }

    pub fn get_mut(&mut self, id: SliceId) -> &mut [f64] {
        let r = self.slices[id.0].range();
        &mut self.values[r]
    }

    pub fn view(&self, id: SliceId) -> ArrayView2<'_, f64> {
        let s = &self.slices[id.0];
        ArrayView2::from_shape((s.rows, s.cols), &self.values[s.range()]).expect("slice shape")
    }

    pub fn view_mut(&mut self, id: SliceId) -> ArrayViewMut2<'_, f64> {
        let s = self.slices[id.0].clone();
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut self.values[s.range()]).expect("slice shape")
    }

    /// Index of the slice containing flat position `index`.
    pub fn slice_of(&self, index: usize) -> Option<&ParamSlice> {
        self.slices.iter().find(|s| s.range().contains(&index))
    }

    /// Zeroed gradient buffer of matching length.
    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_are_disjoint_and_cover() {
        let mut s = ParamStore::new();
        let a = s.push("a", 2, 3, &[1.0; 6]);
        let b = s.push("b", 1, 1, &[2.0]);
        let c = s.push("c", 4, 1, &[3.0; 4]);
        assert_eq!(s.len(), 11);
        let mut covered = vec![false; s.len()];
        for sl in s.slices() {
            for i in sl.range() {
                assert!(!covered[i]);
                covered[i] = true;
            }
        }
        assert!(covered.into_iter().all(|c| c));
        assert_eq!(s.get(b), &[2.0]);
        assert_eq!(s.view(a).shape(), &[2, 3]);
        assert_eq!(s.find("c"), Some(c));
        assert_eq!(s.slice_of(7).unwrap().name, "c");
        assert_eq!(s.zeros_like().len(), s.len());
    }
}
