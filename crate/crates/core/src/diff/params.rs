use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Which subnetwork a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Backbone,
    Coefficient,
}

/// Selects the trainable part of a parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subset {
    Backbone,
    Coefficient,
    Both,
}

impl Subset {
    pub fn contains(self, g: Group) -> bool {
        matches!(
            (self, g),
            (Subset::Both, _) | (Subset::Backbone, Group::Backbone) | (Subset::Coefficient, Group::Coefficient)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub group: Group,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector with a layout mapping named tensors to index ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub values: Vec<f64>,
    pub layout: Vec<TensorSpec>,
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    layout: Vec<TensorSpec>,
    len: usize,
}

impl LayoutBuilder {
    /// Appends a tensor and returns its index in the layout.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, group: Group) -> usize {
        let spec = TensorSpec { name: name.into(), rows, cols, offset: self.len, group };
        self.len += spec.len();
        self.layout.push(spec);
        self.layout.len() - 1
    }

    pub fn finish(self) -> ParamSet {
        ParamSet { values: vec![0.0; self.len], layout: self.layout }
    }
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn view(&self, tensor: usize) -> ArrayView2<'_, f64> {
        let t = &self.layout[tensor];
        ArrayView2::from_shape((t.rows, t.cols), &self.values[t.range()]).expect("layout is consistent")
    }

    pub fn tensor_mut(&mut self, tensor: usize) -> &mut [f64] {
        let r = self.layout[tensor].range();
        &mut self.values[r]
    }

    pub fn unpack(&self) -> Vec<Array2<f64>> {
        (0..self.layout.len()).map(|i| self.view(i).to_owned()).collect()
    }

    pub fn pack(&mut self, tensors: &[Array2<f64>]) -> Result<()> {
        if tensors.len() != self.layout.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", self.layout.len(), tensors.len())));
        }
        for (i, t) in tensors.iter().enumerate() {
            let spec = &self.layout[i];
            if t.dim() != (spec.rows, spec.cols) {
                return Err(Error::Shape(format!("tensor {} has shape {:?}, expected ({}, {})", spec.name, t.dim(), spec.rows, spec.cols)));
            }
            let r = spec.range();
            for (dst, src) in self.values[r].iter_mut().zip(t.iter()) {
                *dst = *src;
            }
        }
        Ok(())
    }

    /// Flat indices of the parameters in `subset`, ascending.
    pub fn indices(&self, subset: Subset) -> Vec<usize> {
        self.layout.iter().filter(|t| subset.contains(t.group)).flat_map(|t| t.range()).collect()
    }

    pub fn count(&self, subset: Subset) -> usize {
        self.layout.iter().filter(|t| subset.contains(t.group)).map(|t| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} is {}", self.values[i])));
        }
        Ok(())
    }
}
