use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::model::ParamGroupTag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    tensor: Tensor,
    tag: Option<ParamGroupTag>,
}

/// Ordered, named collection of parameter tensors.
///
/// Insertion order is significant: it fixes checkpoint layout and the flat
/// element numbering used by masks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: IndexMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        tag: Option<ParamGroupTag>,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Entry { tensor, tag });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn tag(&self, name: &str) -> Option<ParamGroupTag> {
        self.entries.get(name).and_then(|e| e.tag)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries
            .iter_mut()
            .map(|(k, e)| (k.as_str(), &mut e.tensor))
    }

    pub fn iter_tagged(&self) -> impl Iterator<Item = (&str, &Tensor, Option<ParamGroupTag>)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.tensor, e.tag))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Same names, shapes and tags with every value zero.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: Tensor::zeros(e.tensor.shape()),
                            tag: e.tag,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Element-wise product with a binary mask.
    pub fn masked(&self, mask: &BinaryMask) -> Result<ParamStore> {
        mask.check_congruent(self)?;
        let mut out = self.clone();
        for (name, tensor) in out.iter_mut() {
            let bits = mask.bits(name).expect("congruence checked");
            for (v, &keep) in tensor.data_mut().iter_mut().zip(bits) {
                *v *= if keep { 1.0 } else { 0.0 };
            }
        }
        Ok(out)
    }

    /// True when both stores hold the same names, shapes and bit patterns.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    pub fn checksums(&self) -> Vec<(String, u64)> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.checksum()))
            .collect()
    }

    /// Verifies that every entry carries a tag.
    pub fn check_tagged(&self) -> Result<()> {
        match self.entries.iter().find(|(_, e)| e.tag.is_none()) {
            Some((name, _)) => Err(Error::contract(format!(
                "parameter `{name}` has no group tag"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct MaskEntry {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

/// Per-tensor 0/1 arrays congruent with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BinaryMask {
    entries: IndexMap<String, MaskEntry>,
}

impl BinaryMask {
    pub fn filled_like(params: &ParamStore, value: bool) -> Self {
        Self::from_fn(params, |_, _, _| value)
    }

    pub fn ones_like(params: &ParamStore) -> Self {
        Self::filled_like(params, true)
    }

    pub fn zeros_like(params: &ParamStore) -> Self {
        Self::filled_like(params, false)
    }

    /// Build a mask by evaluating `f(name, tag, flat_index)` for every element.
    pub fn from_fn(
        params: &ParamStore,
        mut f: impl FnMut(&str, Option<ParamGroupTag>, usize) -> bool,
    ) -> Self {
        let entries = params
            .iter_tagged()
            .map(|(name, t, tag)| {
                let bits = (0..t.len()).map(|i| f(name, tag, i)).collect();
                (
                    name.to_string(),
                    MaskEntry {
                        shape: t.shape().to_vec(),
                        bits,
                    },
                )
            })
            .collect();
        BinaryMask { entries }
    }

    /// Whole-tensor mask: every element of a tensor gets `f(name, tag)`.
    pub fn by_tensor(params: &ParamStore, mut f: impl FnMut(&str, Option<ParamGroupTag>) -> bool) -> Self {
        let entries = params
            .iter_tagged()
            .map(|(name, t, tag)| {
                let v = f(name, tag);
                (
                    name.to_string(),
                    MaskEntry {
                        shape: t.shape().to_vec(),
                        bits: vec![v; t.len()],
                    },
                )
            })
            .collect();
        BinaryMask { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, bits: Vec<bool>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::contract(format!(
                "mask for `{name}`: shape {shape:?} does not match {} bits",
                bits.len()
            )));
        }
        self.entries.insert(name, MaskEntry { shape, bits });
        Ok(())
    }

    pub fn bits(&self, name: &str) -> Option<&[bool]> {
        self.entries.get(name).map(|e| e.bits.as_slice())
    }

    pub fn bits_mut(&mut self, name: &str) -> Option<&mut [bool]> {
        self.entries.get_mut(name).map(|e| e.bits.as_mut_slice())
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.get(name).map(|e| e.shape.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), e.bits.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.entries
            .values()
            .map(|e| e.bits.iter().filter(|&&b| b).count())
            .sum()
    }

    pub fn popcount_of(&self, name: &str) -> usize {
        self.bits(name)
            .map(|b| b.iter().filter(|&&x| x).count())
            .unwrap_or(0)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.bits.len()).sum()
    }

    pub fn check_congruent(&self, params: &ParamStore) -> Result<()> {
        if self.entries.len() != params.len() {
            return Err(Error::contract(format!(
                "mask covers {} tensors but the store has {}",
                self.entries.len(),
                params.len()
            )));
        }
        for ((mn, me), (pn, pt)) in self.entries.iter().zip(params.iter()) {
            if mn != pn || me.shape != pt.shape() {
                return Err(Error::shape(
                    pn,
                    format!("mask entry `{mn}` {:?} vs parameter {:?}", me.shape, pt.shape()),
                ));
            }
        }
        Ok(())
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::contract("masks cover different tensor sets"));
        }
        let mut entries = IndexMap::with_capacity(self.entries.len());
        for ((na, ea), (nb, eb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ea.shape != eb.shape {
                return Err(Error::shape(na, format!("mask entry mismatch with `{nb}`")));
            }
            let bits = ea.bits.iter().zip(&eb.bits).map(|(&a, &b)| f(a, b)).collect();
            entries.insert(
                na.clone(),
                MaskEntry {
                    shape: ea.shape.clone(),
                    bits,
                },
            );
        }
        Ok(BinaryMask { entries })
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    /// Elements set in `self` but not in `other`.
    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn not(&self) -> BinaryMask {
        let mut out = self.clone();
        for e in out.entries.values_mut() {
            for b in &mut e.bits {
                *b = !*b;
            }
        }
        out
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool> {
        Ok(self.and_not(other)?.popcount() == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::vector(vec![1.0, -2.0, 3.0]), None).unwrap();
        p.insert("b", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), None)
            .unwrap();
        p
    }

    #[test]
    fn masked_zeroes_unset_positions() {
        let p = store();
        let mask = BinaryMask::from_fn(&p, |_, _, i| i % 2 == 0);
        let m = p.masked(&mask).unwrap();
        assert_eq!(m.get("a").unwrap().data(), &[1.0, -0.0, 3.0]);
        assert_eq!(m.get("b").unwrap().data(), &[1.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn mask_algebra() {
        let p = store();
        let even = BinaryMask::from_fn(&p, |_, _, i| i % 2 == 0);
        let all = BinaryMask::ones_like(&p);
        assert_eq!(even.popcount(), 4);
        assert_eq!(even.not().popcount(), 3);
        assert_eq!(all.and_not(&even).unwrap(), even.not());
        assert!(even.is_subset_of(&all).unwrap());
        assert_eq!(even.or(&even.not()).unwrap(), all);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = store();
        assert!(p.insert("a", Tensor::scalar(0.0), None).is_err());
    }
}
