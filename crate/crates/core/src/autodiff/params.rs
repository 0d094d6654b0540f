use rand::Rng;

use super::{Real, Tensor};

/// Identifier of a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u32);

#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f32> {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor<T>,
}

/// Registry of every model parameter. Ids are dense and never reused.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let id = ParamId(self.params.len() as u32);
        self.params.push(Parameter {
            id,
            name: name.into(),
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0 as usize]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0 as usize].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0 as usize].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.params.iter().map(|p| p.id).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().find(|p| p.name == name).map(|p| p.id)
    }

    /// Same registry at another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    id: p.id,
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<Tensor<T>> {
        ids.iter().map(|&id| self.value(id).clone()).collect()
    }

    pub fn restore(&mut self, ids: &[ParamId], values: Vec<Tensor<T>>) {
        for (&id, v) in ids.iter().zip(values) {
            *self.value_mut(id) = v;
        }
    }

    /// Sum of squared entries over `ids`, i.e. `||theta||^2`.
    pub fn squared_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .map(|&id| self.value(id).sum_squares().to_f64_lossy())
            .sum()
    }

    /// FNV-1a over the bit patterns of the selected parameters.
    pub fn fingerprint(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u64| {
            for byte in b.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &id in ids {
            let p = self.value(id);
            feed(id.0 as u64);
            for d in p.shape() {
                feed(*d as u64);
            }
            for v in p.data() {
                feed(v.to_f64_lossy().to_bits());
            }
        }
        h
    }
}

/// Glorot/Xavier uniform initialisation: `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Real, R: Rng + ?Sized>(fan_out: usize, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::matrix(fan_out, fan_in, data).expect("consistent shape")
}
