//! Named parameter tensors shared between the tape, the optimizer, and
//! checkpoints.

use std::sync::Arc;

use crate::real::Real;

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub data: Arc<Vec<S>>,
    pub rows: usize,
    pub cols: usize,
}

/// Flat registry of model parameters.  Ids are dense indices in insertion
/// order, which fixes both checkpoint layout and optimizer traversal order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<S>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter data does not match its shape");
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, data: Arc::new(data), rows, cols });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id]
    }

    pub fn data(&self, id: ParamId) -> &[S] {
        &self.params[id].data
    }

    /// Mutable view of one parameter's values (copy-on-write if a tape still
    /// holds the old version alive).
    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<S> {
        Arc::make_mut(&mut self.params[id].data)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Replace one parameter's contents, keeping name and shape.
    pub fn set_data(&mut self, id: ParamId, data: Vec<S>) {
        assert_eq!(data.len(), self.params[id].data.len());
        self.params[id].data = Arc::new(data);
    }

    /// Convert every tensor to a different precision (used when a checkpoint
    /// trained in one dtype is probed in another).
    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        let params = self
            .params
            .iter()
            .map(|p| Param {
                name: p.name.clone(),
                data: Arc::new(p.data.iter().map(|v| T::from_f64(v.as_f64())).collect()),
                rows: p.rows,
                cols: p.cols,
            })
            .collect();
        ParamStore { params }
    }
}
