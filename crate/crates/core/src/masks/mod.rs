//! Domain ownership of individual parameter elements.
//!
//! Every element is in exactly one state: free, permanently frozen (shared
//! embeddings and layer norms in multi-domain mode), or owned by one domain.
//! Ownership is stored as one small integer per element, so an element can
//! never have two owners, and an owned element is never reassigned.

mod file;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use crate::tensor::BinaryMask;
use crate::error::{Error, Result};
use crate::tensor::ParamStore;
pub use file::{decode_masks, encode_masks, load_masks, save_masks, MASKS_VERSION};

const FREE: u16 = 0;
const FROZEN: u16 = 1;
const FIRST_DOMAIN: u16 = 2;

/// A registered domain. Ordinals follow assignment order; the first domain
/// (normally "general") gets 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainId {
    pub name: String,
    pub ordinal: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Free,
    Frozen,
    Domain(u16),
}

impl Owner {
    fn from_code(code: u16) -> Owner {
        match code {
            FREE => Owner::Free,
            FROZEN => Owner::Frozen,
            c => Owner::Domain(c - FIRST_DOMAIN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct DomainEntry {
    pub(crate) id: DomainId,
    pub(crate) ancestors: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct OwnerTensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) codes: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRegistry {
    pub(crate) multi_domain: bool,
    pub(crate) tensors: IndexMap<String, OwnerTensor>,
    pub(crate) domains: Vec<DomainEntry>,
}

/// Element counts of one tensor (or the whole store).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnershipCounts {
    pub total: usize,
    pub frozen: usize,
    pub free: usize,
    /// Per domain, in ordinal order.
    pub owned: Vec<usize>,
}

impl OwnershipCounts {
    pub fn eligible(&self) -> usize {
        self.total - self.frozen
    }
}

impl MaskRegistry {
    /// Fresh registry: shared tensors frozen iff `multi_domain`, everything else free.
    pub fn new(params: &ParamStore, multi_domain: bool) -> Result<Self> {
        Self::with_freeze(params, multi_domain, multi_domain)
    }

    /// Like [`MaskRegistry::new`] but with an explicit choice of whether the
    /// shared embedding/layer-norm tensors are frozen.
    pub fn with_freeze(params: &ParamStore, multi_domain: bool, freeze_shared: bool) -> Result<Self> {
        params.check_tagged()?;
        let tensors = params
            .iter_tagged()
            .map(|(name, t, tag)| {
                let frozen = freeze_shared && tag.expect("checked").is_shared();
                let code = if frozen { FROZEN } else { FREE };
                (
                    name.to_string(),
                    OwnerTensor {
                        shape: t.shape().to_vec(),
                        codes: vec![code; t.len()],
                    },
                )
            })
            .collect();
        Ok(MaskRegistry {
            multi_domain,
            tensors,
            domains: Vec::new(),
        })
    }

    pub fn multi_domain(&self) -> bool {
        self.multi_domain
    }

    pub fn domains(&self) -> impl Iterator<Item = &DomainId> {
        self.domains.iter().map(|d| &d.id)
    }

    pub fn domain(&self, name: &str) -> Result<&DomainId> {
        self.entry(name).map(|e| &e.id)
    }

    fn entry(&self, name: &str) -> Result<&DomainEntry> {
        self.domains
            .iter()
            .find(|d| d.id.name == name)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    pub fn ancestors(&self, name: &str) -> Result<Vec<&DomainId>> {
        let e = self.entry(name)?;
        Ok(e.ancestors
            .iter()
            .map(|&o| &self.domains[o as usize].id)
            .collect())
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn owner(&self, tensor: &str, index: usize) -> Option<Owner> {
        self.tensors
            .get(tensor)
            .and_then(|t| t.codes.get(index))
            .map(|&c| Owner::from_code(c))
    }

    fn check_params(&self, params: &ParamStore) -> Result<()> {
        if params.len() != self.tensors.len() {
            return Err(Error::contract("registry and parameter store cover different tensors"));
        }
        for ((rn, rt), (pn, pt)) in self.tensors.iter().zip(params.iter()) {
            if rn != pn || rt.shape != pt.shape() {
                return Err(Error::shape(pn, format!("registry entry `{rn}` {:?}", rt.shape)));
            }
        }
        Ok(())
    }

    /// Give every element set in `keep` to a new domain `name`.
    ///
    /// Fails without modifying anything if any such element is not free, if
    /// the name is taken, or if an ancestor is unknown.
    pub fn assign_domain(&mut self, name: &str, keep: &BinaryMask, ancestors: &[&str]) -> Result<DomainId> {
        if name.is_empty() {
            return Err(Error::contract("domain name must be non-empty"));
        }
        if self.domains.iter().any(|d| d.id.name == name) {
            return Err(Error::contract(format!("domain `{name}` is already registered")));
        }
        let mut anc = Vec::with_capacity(ancestors.len());
        for a in ancestors {
            let o = self.entry(a)?.id.ordinal;
            if !anc.contains(&o) {
                anc.push(o);
            }
        }
        anc.sort_unstable();
        if keep.len() != self.tensors.len() {
            return Err(Error::contract("keep mask does not cover the registry"));
        }
        for ((tn, t), (mn, bits)) in self.tensors.iter().zip(keep.iter()) {
            if tn != mn || bits.len() != t.codes.len() {
                return Err(Error::shape(tn, format!("keep mask entry `{mn}` mismatched")));
            }
            if let Some(i) = bits.iter().zip(&t.codes).position(|(&b, &c)| b && c != FREE) {
                return Err(Error::Overlap {
                    tensor: tn.clone(),
                    index: i,
                    current: self.describe(t.codes[i]),
                });
            }
        }
        let ordinal = u16::try_from(self.domains.len())
            .ok()
            .filter(|o| *o < u16::MAX - FIRST_DOMAIN)
            .ok_or_else(|| Error::contract("too many domains"))?;
        let code = ordinal + FIRST_DOMAIN;
        for (t, (_, bits)) in self.tensors.values_mut().zip(keep.iter()) {
            for (c, &b) in t.codes.iter_mut().zip(bits) {
                if b {
                    *c = code;
                }
            }
        }
        let id = DomainId {
            name: name.to_string(),
            ordinal,
        };
        self.domains.push(DomainEntry {
            id: id.clone(),
            ancestors: anc,
        });
        Ok(id)
    }

    fn describe(&self, code: u16) -> String {
        match Owner::from_code(code) {
            Owner::Free => "free".into(),
            Owner::Frozen => "permanently frozen".into(),
            Owner::Domain(o) => format!("owned by `{}`", self.domains[o as usize].id.name),
        }
    }

    fn mask_where(&self, pred: impl Fn(u16) -> bool) -> BinaryMask {
        let mut m = BinaryMask::default();
        for (name, t) in &self.tensors {
            m.insert(name.clone(), t.shape.clone(), t.codes.iter().map(|&c| pred(c)).collect())
                .expect("consistent shapes");
        }
        m
    }

    pub fn free_mask(&self) -> BinaryMask {
        self.mask_where(|c| c == FREE)
    }

    pub fn frozen_mask(&self) -> BinaryMask {
        self.mask_where(|c| c == FROZEN)
    }

    /// Elements that are not permanently frozen.
    pub fn eligible_mask(&self) -> BinaryMask {
        self.mask_where(|c| c != FROZEN)
    }

    pub fn owned_mask(&self, domain: &str) -> Result<BinaryMask> {
        let code = self.entry(domain)?.id.ordinal + FIRST_DOMAIN;
        Ok(self.mask_where(|c| c == code))
    }

    /// Elements an optimizer may update: free elements when `active` is
    /// `None` (warm-up), otherwise exactly the elements owned by `active`.
    pub fn trainable_mask(&self, active: Option<&str>) -> Result<BinaryMask> {
        match active {
            None => Ok(self.free_mask()),
            Some(d) => self.owned_mask(d),
        }
    }

    /// Elements used when decoding `domain`: its own, its ancestors', and the frozen ones.
    pub fn inference_mask(&self, domain: &str) -> Result<BinaryMask> {
        let e = self.entry(domain)?;
        let mut codes: Vec<u16> = e.ancestors.iter().map(|&o| o + FIRST_DOMAIN).collect();
        codes.push(e.id.ordinal + FIRST_DOMAIN);
        codes.push(FROZEN);
        Ok(self.mask_where(|c| codes.contains(&c)))
    }

    /// Forward mask during a domain's warm-up: ancestors, frozen and free elements.
    pub fn warmup_mask(&self, ancestors: &[&str]) -> Result<BinaryMask> {
        let mut codes = vec![FREE, FROZEN];
        for a in ancestors {
            codes.push(self.entry(a)?.id.ordinal + FIRST_DOMAIN);
        }
        Ok(self.mask_where(|c| codes.contains(&c)))
    }

    fn count(codes: &[u16], domains: usize) -> OwnershipCounts {
        let mut c = OwnershipCounts {
            total: codes.len(),
            owned: vec![0; domains],
            ..Default::default()
        };
        for &x in codes {
            match x {
                FREE => c.free += 1,
                FROZEN => c.frozen += 1,
                d => c.owned[(d - FIRST_DOMAIN) as usize] += 1,
            }
        }
        c
    }

    pub fn counts(&self) -> OwnershipCounts {
        let mut total = OwnershipCounts {
            owned: vec![0; self.domains.len()],
            ..Default::default()
        };
        for (_, c) in self.tensor_counts() {
            total.total += c.total;
            total.free += c.free;
            total.frozen += c.frozen;
            for (a, b) in total.owned.iter_mut().zip(&c.owned) {
                *a += b;
            }
        }
        total
    }

    pub fn tensor_counts(&self) -> Vec<(String, OwnershipCounts)> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), Self::count(&t.codes, self.domains.len())))
            .collect()
    }

    /// Verifies shapes against a parameter store.
    pub fn matches(&self, params: &ParamStore) -> Result<()> {
        self.check_params(params)
    }

    /// Human-readable per-domain, per-tensor ownership table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = self.domains.iter().map(|d| d.id.name.as_str()).collect();
        out.push_str(&format!("{:<28} {:>8} {:>8} {:>8}", "tensor", "total", "frozen", "free"));
        for n in &names {
            out.push_str(&format!(" {:>10}", n));
        }
        out.push('\n');
        let mut rows = self.tensor_counts();
        rows.push(("TOTAL".into(), self.counts()));
        for (name, c) in rows {
            out.push_str(&format!("{:<28} {:>8} {:>8} {:>8}", name, c.total, c.frozen, c.free));
            for o in &c.owned {
                out.push_str(&format!(" {:>10}", o));
            }
            out.push('\n');
        }
        for d in &self.domains {
            let anc: Vec<&str> = d
                .ancestors
                .iter()
                .map(|&o| self.domains[o as usize].id.name.as_str())
                .collect();
            out.push_str(&format!("domain {} (#{}) ancestors: [{}]\n", d.id.name, d.id.ordinal, anc.join(", ")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, ParamGroup};

    fn small() -> ParamStore {
        let cfg = ModelConfig {
            num_layers: 1,
            model_dim: 8,
            ffn_dim: 16,
            heads: 2,
            vocab_size: 10,
            max_len: 8,
        };
        init_params(&cfg, 1).unwrap()
    }

    fn shared_size(p: &ParamStore) -> usize {
        p.iter_tagged()
            .filter(|(_, _, t)| matches!(t.unwrap().group, ParamGroup::Embedding | ParamGroup::LayerNorm))
            .map(|(_, t, _)| t.len())
            .sum()
    }

    #[test]
    fn frozen_only_in_multi_domain_mode() {
        let p = small();
        let single = MaskRegistry::new(&p, false).unwrap();
        assert_eq!(single.counts().frozen, 0);
        let multi = MaskRegistry::new(&p, true).unwrap();
        assert_eq!(multi.counts().frozen, shared_size(&p));
        let c = multi.counts();
        let trainable = multi.trainable_mask(None).unwrap().popcount();
        assert_eq!(trainable, c.total - c.frozen);
    }

    #[test]
    fn untagged_store_rejected() {
        let mut p = ParamStore::new();
        p.insert("x", crate::tensor::Tensor::scalar(1.0), None).unwrap();
        assert!(MaskRegistry::new(&p, false).is_err());
    }

    #[test]
    fn overlap_names_tensor_and_index() {
        let p = small();
        let mut r = MaskRegistry::new(&p, false).unwrap();
        let first = BinaryMask::from_fn(&p, |_, _, i| i < 3);
        r.assign_domain("general", &first, &[]).unwrap();
        let clash = BinaryMask::from_fn(&p, |n, _, i| n == "out.bias" && i == 2);
        let before = r.clone();
        match r.assign_domain("a", &clash, &["general"]) {
            Err(Error::Overlap { tensor, index, .. }) => {
                assert_eq!(tensor, "out.bias");
                assert_eq!(index, 2);
            }
            other => panic!("expected overlap, got {other:?}"),
        }
        assert_eq!(r, before);
    }

    #[test]
    fn disjoint_assignments_add_up() {
        let p = small();
        let mut r = MaskRegistry::new(&p, false).unwrap();
        let a = BinaryMask::from_fn(&p, |_, _, i| i % 3 == 0);
        let b = BinaryMask::from_fn(&p, |_, _, i| i % 3 == 1);
        r.assign_domain("a", &a, &[]).unwrap();
        r.assign_domain("b", &b, &[]).unwrap();
        let c = r.counts();
        assert_eq!(c.owned, vec![a.popcount(), b.popcount()]);
        assert_eq!(c.free + c.owned.iter().sum::<usize>(), c.total);
        assert_eq!(r.trainable_mask(Some("a")).unwrap(), a);
    }

    #[test]
    fn inference_masks_of_siblings() {
        let p = small();
        let mut r = MaskRegistry::new(&p, true).unwrap();
        let eligible = r.eligible_mask();
        let g = BinaryMask::from_fn(&p, |_, _, i| i % 4 == 0).and(&eligible).unwrap();
        let a = BinaryMask::from_fn(&p, |_, _, i| i % 4 == 1).and(&eligible).unwrap();
        let b = BinaryMask::from_fn(&p, |_, _, i| i % 4 == 2).and(&eligible).unwrap();
        r.assign_domain("general", &g, &[]).unwrap();
        r.assign_domain("a", &a, &["general"]).unwrap();
        r.assign_domain("b", &b, &["general"]).unwrap();
        let frozen = r.frozen_mask();
        let ig = r.inference_mask("general").unwrap();
        assert_eq!(ig, g.or(&frozen).unwrap());
        let ia = r.inference_mask("a").unwrap();
        assert_eq!(ia.popcount(), a.popcount() + g.popcount() + frozen.popcount());
        let ib = r.inference_mask("b").unwrap();
        // symmetric difference is exactly the two budgets
        let diff = ia.and_not(&ib).unwrap().or(&ib.and_not(&ia).unwrap()).unwrap();
        assert_eq!(diff, a.or(&b).unwrap());
        assert_eq!(ia.and(&ib).unwrap(), g.or(&frozen).unwrap());
        assert!(matches!(r.inference_mask("zzz"), Err(Error::UnknownDomain(_))));
        assert!(matches!(r.trainable_mask(Some("zzz")), Err(Error::UnknownDomain(_))));
    }

    #[test]
    fn unknown_ancestor_rejected() {
        let p = small();
        let mut r = MaskRegistry::new(&p, false).unwrap();
        let none = BinaryMask::zeros_like(&p);
        assert!(r.assign_domain("a", &none, &["missing"]).is_err());
        assert!(r.domains().next().is_none());
    }
}
