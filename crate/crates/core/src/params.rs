//! Named, grouped trainable parameters and the forward context that decides
//! which groups participate in autograd.

use std::collections::BTreeMap;
use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    ImageEncoder,
    TextEncoder,
    PromptBank,
    MappingHead,
    Heads,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::ImageEncoder,
        Group::TextEncoder,
        Group::PromptBank,
        Group::MappingHead,
        Group::Heads,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::ImageEncoder => "image_encoder",
            Group::TextEncoder => "text_encoder",
            Group::PromptBank => "prompt_bank",
            Group::MappingHead => "mapping_head",
            Group::Heads => "heads",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A small bit set over [`Group`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<Group>", into = "Vec<Group>")]
pub struct GroupSet(u8);

impl From<Vec<Group>> for GroupSet {
    fn from(v: Vec<Group>) -> Self {
        GroupSet::of(&v)
    }
}

impl From<GroupSet> for Vec<Group> {
    fn from(s: GroupSet) -> Self {
        s.iter().collect()
    }
}

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);
    pub const ALL: GroupSet = GroupSet(0b1_1111);

    fn bit(g: Group) -> u8 {
        1 << (g as u8)
    }

    pub fn of(groups: &[Group]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | Self::bit(*g)))
    }

    pub fn contains(&self, g: Group) -> bool {
        self.0 & Self::bit(g) != 0
    }

    pub fn union(self, other: GroupSet) -> Self {
        GroupSet(self.0 | other.0)
    }

    pub fn intersects(self, other: GroupSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn complement(self) -> Self {
        GroupSet(!self.0 & Self::ALL.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

/// One learnable array. Cloning shares storage.
#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub var: Var,
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Param({}, {:?}, {:?})", self.name, self.group, self.var.shape())
    }
}

/// Forward-pass context. Parameters of frozen groups enter the graph detached,
/// so no gradient can ever reach them.
#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    pub frozen: GroupSet,
    pub check_finite: bool,
}

impl Ctx {
    pub fn train(trainable: GroupSet) -> Self {
        Ctx {
            frozen: trainable.complement(),
            check_finite: true,
        }
    }

    pub fn inference() -> Self {
        Ctx {
            frozen: GroupSet::ALL,
            check_finite: true,
        }
    }

    pub fn t(&self, p: &Param) -> Tensor {
        if self.frozen.contains(p.group) {
            p.var.as_tensor().detach()
        } else {
            p.var.as_tensor().clone()
        }
    }

    pub fn is_inference(&self) -> bool {
        self.frozen == GroupSet::ALL
    }
}

/// Shared initializer state used while constructing a model.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
    pub registry: &'a mut ParamRegistry,
}

impl Init<'_> {
    fn register(&mut self, name: String, group: Group, data: Vec<f32>, shape: &[usize]) -> Result<Param> {
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let p = Param { name, group, var };
        self.registry.insert(p.clone())?;
        Ok(p)
    }

    /// Truncated normal at two standard deviations.
    pub fn trunc_normal(&mut self, name: impl Into<String>, group: Group, shape: &[usize], std: f32) -> Result<Param> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0f32, 1f32).expect("unit normal");
        let data = (0..n)
            .map(|_| loop {
                let z: f32 = normal.sample(self.rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        self.register(name.into(), group, data, shape)
    }

    pub fn normal(&mut self, name: impl Into<String>, group: Group, shape: &[usize], std: f32) -> Result<Param> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0f32, std).map_err(|e| Error::config(e.to_string()))?;
        let data = (0..n).map(|_| normal.sample(self.rng)).collect();
        self.register(name.into(), group, data, shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, group: Group, shape: &[usize], value: f32) -> Result<Param> {
        let n: usize = shape.iter().product();
        self.register(name.into(), group, vec![value; n], shape)
    }

    /// Registers a copy of existing values under a new name and group.
    pub fn copy_of(&mut self, name: impl Into<String>, group: Group, src: &Param) -> Result<Param> {
        let t = src.var.as_tensor().copy()?;
        let var = Var::from_tensor(&t)?;
        let p = Param {
            name: name.into(),
            group,
            var,
        };
        self.registry.insert(p.clone())?;
        Ok(p)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

/// All parameters of a model, keyed by unique name.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    params: BTreeMap<String, Param>,
}

impl ParamRegistry {
    pub fn insert(&mut self, p: Param) -> Result<()> {
        if self.params.contains_key(&p.name) {
            return Err(Error::config(format!("duplicate parameter name {}", p.name)));
        }
        self.params.insert(p.name.clone(), p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.values()
    }

    pub fn in_groups(&self, groups: GroupSet) -> Vec<Param> {
        self.params
            .values()
            .filter(|p| groups.contains(p.group))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self, groups: GroupSet) -> usize {
        self.params
            .values()
            .filter(|p| groups.contains(p.group))
            .map(|p| p.var.elem_count())
            .sum()
    }

    /// SHA-256 over names and raw values of every parameter in `groups`.
    pub fn fingerprint(&self, groups: GroupSet) -> Result<String> {
        let mut h = Sha256::new();
        for p in self.params.values().filter(|p| groups.contains(p.group)) {
            h.update(p.name.as_bytes());
            hash_tensor(&mut h, p.var.as_tensor())?;
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn fingerprint_group(&self, group: Group) -> Result<String> {
        self.fingerprint(GroupSet::of(&[group]))
    }
}

pub(crate) fn hash_tensor(h: &mut Sha256, t: &Tensor) -> Result<()> {
    let flat = t.flatten_all()?;
    match flat.dtype() {
        DType::F64 => {
            for v in flat.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        _ => {
            for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn group_set_ops() {
        let s = GroupSet::of(&[Group::PromptBank]);
        assert!(s.contains(Group::PromptBank));
        assert!(!s.contains(Group::Heads));
        let c = s.complement();
        assert!(!c.intersects(s));
        assert_eq!(c.union(s), GroupSet::ALL);
        assert_eq!(c.iter().count(), 4);
    }

    #[test]
    fn frozen_params_are_detached() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reg = ParamRegistry::default();
        let mut init = Init {
            rng: &mut rng,
            dtype: DType::F32,
            device: Device::Cpu,
            registry: &mut reg,
        };
        let a = init.normal("a", Group::TextEncoder, &[3], 1.0)?;
        let b = init.normal("b", Group::PromptBank, &[3], 1.0)?;
        let ctx = Ctx::train(GroupSet::of(&[Group::PromptBank]));
        let loss = (ctx.t(&a) * ctx.t(&b))?.sum_all()?;
        let grads = loss.backward()?;
        assert!(grads.get(a.var.as_tensor()).is_none());
        assert!(grads.get(b.var.as_tensor()).is_some());
        Ok(())
    }

    #[test]
    fn trunc_normal_is_bounded_and_seeded() -> Result<()> {
        let draw = |seed| -> Result<Vec<f32>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut reg = ParamRegistry::default();
            let mut init = Init {
                rng: &mut rng,
                dtype: DType::F32,
                device: Device::Cpu,
                registry: &mut reg,
            };
            let p = init.trunc_normal("w", Group::Heads, &[1000], 0.02)?;
            Ok(p.var.as_tensor().to_vec1::<f32>()?)
        };
        let a = draw(3)?;
        assert_eq!(a, draw(3)?);
        assert!(a.iter().all(|v| v.abs() <= 0.04 + 1e-7));
        Ok(())
    }
}
