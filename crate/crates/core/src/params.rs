//! Flat parameter vectors with a named segment table.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// A named, contiguous block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Weight tensors are split into one group per output row (a conv filter
    /// or a dense output neuron); every other segment is a single group.
    pub fn normalization_groups(&self) -> Vec<std::ops::Range<usize>> {
        if self.name.ends_with(".weight") && self.shape.len() >= 2 && self.shape[0] > 0 {
            let rows = self.shape[0];
            let width = self.len() / rows;
            (0..rows)
                .map(|r| self.offset + r * width..self.offset + (r + 1) * width)
                .collect()
        } else {
            vec![self.range()]
        }
    }
}

/// Ordered segment table. Segments are disjoint, contiguous and cover
/// `[0, len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0;
        for s in &segments {
            if s.offset != cursor {
                return Err(Error::Layout(format!(
                    "segment `{}` starts at {} but previous segment ends at {}",
                    s.name, s.offset, cursor
                )));
            }
            cursor += s.len();
        }
        Ok(Self { segments, len: cursor })
    }

    /// Builds a layout from `(name, shape)` pairs laid out back to back.
    pub fn from_shapes<S: Into<String>>(shapes: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let segments = shapes
            .into_iter()
            .map(|(name, shape)| {
                let s = Segment { name: name.into(), offset, shape };
                offset += s.len();
                s
            })
            .collect();
        Self { segments, len: offset }
    }

    /// Single unnamed vector segment of length `d`.
    pub fn flat(d: usize) -> Self {
        Self::from_shapes([("theta", vec![d])])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn normalization_groups(&self) -> Vec<std::ops::Range<usize>> {
        self.segments.iter().flat_map(|s| s.normalization_groups()).collect()
    }
}

pub(crate) fn same_layout(a: &Arc<Layout>, b: &Arc<Layout>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

#[derive(Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl fmt::Debug for ParameterVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParameterVector")
            .field("d", &self.values.len())
            .field("segments", &self.layout.segments.len())
            .finish()
    }
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout(format!(
                "{} values for a layout of length {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    /// A vector with a single flat segment.
    pub fn from_vec(values: Vec<f64>) -> Self {
        let layout = Arc::new(Layout::flat(values.len()));
        Self { values, layout }
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self { values: vec![0.0; layout.len()], layout }
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

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn check_layout(&self, other: &Arc<Layout>) -> Result<()> {
        if same_layout(&self.layout, other) {
            Ok(())
        } else {
            Err(Error::Layout(format!(
                "expected d = {} with {} segments, got d = {} with {} segments",
                self.layout.len(),
                self.layout.segments.len(),
                other.len(),
                other.segments.len()
            )))
        }
    }

    /// `a·p + b·q`, keeping the layout of `p`.
    pub fn linear_combination(a: f64, p: &ParameterVector, b: f64, q: &ParameterVector) -> Result<Self> {
        p.check_layout(&q.layout)?;
        let values = p
            .values
            .iter()
            .zip(&q.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Self { values, layout: p.layout.clone() })
    }

    /// `self + scale·dir`.
    pub fn axpy(&self, scale: f64, dir: &ParameterVector) -> Result<Self> {
        self.check_layout(&dir.layout)?;
        let values = self
            .values
            .iter()
            .zip(&dir.values)
            .map(|(x, d)| x + scale * d)
            .collect();
        Ok(Self { values, layout: self.layout.clone() })
    }

    pub fn add(&self, other: &ParameterVector) -> Result<Self> {
        self.check_layout(&other.layout)?;
        let values = self.values.iter().zip(&other.values).map(|(x, y)| x + y).collect();
        Ok(Self { values, layout: self.layout.clone() })
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|x| c * x).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn dot(&self, other: &ParameterVector) -> Result<f64> {
        self.check_layout(&other.layout)?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Averaged minibatch gradient, laid out like the parameters it
/// differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
    pub batch_size: usize,
}

impl Gradient {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>, batch_size: usize) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout(format!(
                "gradient of length {} for layout of length {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout, batch_size })
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm, rescaled by the largest magnitude so squares cannot
/// overflow or underflow.
pub fn l2_norm(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let sum: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * sum.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_combination_examples() {
        let p = ParameterVector::from_vec(vec![2.0]);
        let q = ParameterVector::from_vec(vec![4.0]);
        let r = ParameterVector::linear_combination(0.5, &p, 0.5, &q).unwrap();
        assert_eq!(r.values(), &[3.0]);

        let p = ParameterVector::from_vec(vec![1.0, 1.0]);
        let q = ParameterVector::linear_combination(1.0, &p, 0.0, &p).unwrap();
        assert_eq!(q.values(), p.values());

        let q = ParameterVector::new(vec![2.0, 3.0], p.layout().clone()).unwrap();
        let r = ParameterVector::linear_combination(-1.0, &p, 2.0, &q).unwrap();
        assert_eq!(r.values(), &[3.0, 5.0]);
        assert!(Arc::ptr_eq(r.layout(), p.layout()));
    }

    #[test]
    fn identity_combination_is_exact() {
        let p = ParameterVector::from_vec(vec![0.1, -3.7e-9, 1e300, 0.0]);
        let q = ParameterVector::new(vec![5.0, 6.0, 7.0, 8.0], p.layout().clone()).unwrap();
        let r = ParameterVector::linear_combination(1.0, &p, 0.0, &q).unwrap();
        assert_eq!(r.values(), p.values());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let p = ParameterVector::from_vec(vec![1.0, 2.0]);
        let q = ParameterVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            ParameterVector::linear_combination(1.0, &p, 1.0, &q),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn layout_rejects_gaps() {
        let segs = vec![
            Segment { name: "a".into(), offset: 0, shape: vec![2] },
            Segment { name: "b".into(), offset: 3, shape: vec![2] },
        ];
        assert!(Layout::new(segs).is_err());
    }

    #[test]
    fn weight_rows_are_groups() {
        let layout = Layout::from_shapes([("fc0.weight", vec![3, 2]), ("fc0.bias", vec![3])]);
        let groups = layout.normalization_groups();
        assert_eq!(groups, vec![0..2, 2..4, 4..6, 6..9]);
    }

    #[test]
    fn norm_is_scaled() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l2_norm(&[0.0, 0.0]), 0.0);
        let big = l2_norm(&[3e200, 4e200]);
        assert!((big / 5e200 - 1.0).abs() < 1e-15);
    }
}
