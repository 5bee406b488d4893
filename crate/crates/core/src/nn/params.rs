use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors in insertion order.
///
/// Values are held at single precision: they are rounded to the nearest
/// `f32` on insertion and after every optimizer update, so a float32
/// checkpoint reproduces them exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

pub(crate) fn round_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        round_f32(value.data_mut());
        self.entries.insert(
            name,
            Param {
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get_index(&self, i: usize) -> Option<(&str, &Param)> {
        self.entries.get_index(i).map(|(k, v)| (k.as_str(), v))
    }

    pub fn get_index_mut(&mut self, i: usize) -> Option<(&str, &mut Param)> {
        self.entries.get_index_mut(i).map(|(k, v)| (k.as_str(), v))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(name, "no such parameter"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters (trainable or not).
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::config(name, "no such parameter"))
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Overwrite values from `other`, which must hold the same names and
    /// shapes. Trainability flags of `self` are kept.
    /// Nothing is written unless every tensor matches.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in self.entries.iter() {
            let src = other.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing tensor `{name}`"))
            })?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}`: checkpoint shape {:?} vs model shape {:?}",
                    src.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if let Some(extra) = other.names().find(|n| self.get(n).is_none()) {
            return Err(Error::Checkpoint(format!(
                "checkpoint tensor `{extra}` has no counterpart in the model"
            )));
        }
        for (name, p) in self.entries.iter_mut() {
            p.value = other.get(name).expect("checked above").value.clone();
        }
        Ok(())
    }
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_rounded_to_single_precision() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![0.1, 1.0 / 3.0])).unwrap();
        let v = s.value("w").unwrap().data();
        assert_eq!(v[0], 0.1f32 as f64);
        assert_eq!(v[1], (1.0f64 / 3.0) as f32 as f64);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn load_values_checks_shapes() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        let mut b = ParamStore::new();
        b.insert("w", Tensor::zeros(&[3, 2])).unwrap();
        match a.load_values_from(&b) {
            Err(Error::Shape(m)) => assert!(m.contains("`w`")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut r = crate::rng::stream(&[1]);
        let t = trunc_normal(&mut r, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }
}
