use ndarray::Array2;
use rand::Rng;

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of 2-D tensors. Vectors are stored as `1 × n`.
///
/// Gradients and optimizer moments use the same type with identical layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Array2<T>>,
}

impl<T> Default for Params<T> {
    fn default() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform `rows × cols` matrix.
    pub fn add_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let t = Array2::from_shape_fn((rows, cols), |_| T::of(rng.random_range(-limit..limit)));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_filled(&mut self, name: &str, rows: usize, cols: usize, v: T) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), v))
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| U::of(v.as_f64())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    /// Sum of squares over every entry.
    pub fn norm_sq(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }

    /// Replaces the tensor called `name`, requiring an identical shape.
    pub fn replace(&mut self, name: &str, tensor: Array2<T>) -> Result<(), String> {
        let id = self.id(name).ok_or_else(|| format!("unknown parameter {name}"))?;
        let slot = self.get_mut(id);
        if slot.dim() != tensor.dim() {
            return Err(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                slot.dim(),
                tensor.dim()
            ));
        }
        *slot = tensor;
        Ok(())
    }
}
