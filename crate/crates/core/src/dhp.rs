//! Dual-length hybrid patches: shuffle patch tokens, split them into one
//! half-length and two quarter-length groups that share the class token,
//! refine each group with the final encoder block.

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoders::ImageEncoder;
use crate::error::{Error, Result};
use crate::params::Ctx;

/// Token positions (1-based, the class token being 0) of the three groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DhpGroups {
    pub perm: Vec<usize>,
    pub g1: Vec<usize>,
    pub g2: Vec<usize>,
    pub g3: Vec<usize>,
}

impl DhpGroups {
    /// Splits a permutation of `1..=N` into consecutive slices of N/2, N/4, N/4.
    pub fn from_perm(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        if n < 4 || n % 4 != 0 {
            return Err(Error::config(format!("patch count {n} must be a positive multiple of 4")));
        }
        let mut seen = vec![false; n + 1];
        for &p in &perm {
            if p == 0 || p > n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::config("not a permutation of 1..=N"));
            }
        }
        let (h, q) = (n / 2, n / 4);
        Ok(DhpGroups {
            g1: perm[..h].to_vec(),
            g2: perm[h..h + q].to_vec(),
            g3: perm[h + q..].to_vec(),
            perm,
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_perm((1..=n).collect())
    }

    pub fn groups(&self) -> [&[usize]; 3] {
        [&self.g1, &self.g2, &self.g3]
    }

    pub fn num_patches(&self) -> usize {
        self.perm.len()
    }
}

/// Uniformly random grouping.
pub fn shuffle_partition<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<DhpGroups> {
    if n < 4 || n % 4 != 0 {
        return Err(Error::config(format!("patch count {n} must be a positive multiple of 4")));
    }
    let mut perm: Vec<usize> = (1..=n).collect();
    perm.shuffle(rng);
    DhpGroups::from_perm(perm)
}

/// Builds `[t⁰] ++ tokens[group]` for every sample and group. `tokens` is
/// `[B, 1+N, D]`; `groups` holds one grouping per sample.
pub fn group_features(tokens: &Tensor, groups: &[DhpGroups]) -> Result<[Tensor; 3]> {
    let (b, t, d) = tokens.dims3()?;
    if groups.len() != b {
        return Err(Error::Shape(format!("{} groupings for batch of {b}", groups.len())));
    }
    if let Some(g) = groups.iter().find(|g| g.num_patches() + 1 != t) {
        return Err(Error::Shape(format!("grouping over {} patches for {t} tokens", g.num_patches())));
    }
    let flat = tokens.reshape((b * t, d))?;
    let mut out = Vec::with_capacity(3);
    for k in 0..3 {
        let len = 1 + groups[0].groups()[k].len();
        let mut idx = Vec::with_capacity(b * len);
        for (s, g) in groups.iter().enumerate() {
            let base = (s * t) as u32;
            idx.push(base);
            idx.extend(g.groups()[k].iter().map(|&p| base + p as u32));
        }
        let sel = flat.index_select(&Tensor::new(idx.as_slice(), tokens.device())?, 0)?;
        out.push(sel.reshape((b, len, d))?);
    }
    let [a, b2, c]: [Tensor; 3] = out.try_into().expect("three groups");
    Ok([a, b2, c])
}

/// Refines each group with the encoder's final block; returns the three local
/// embeddings, `[B, shared_dim]` each.
pub fn dhp_forward(ctx: &Ctx, encoder: &ImageEncoder, tokens: &Tensor, groups: &[DhpGroups]) -> Result<[Tensor; 3]> {
    let seqs = group_features(tokens, groups)?;
    let mut locals = Vec::with_capacity(3);
    for s in &seqs {
        let refined = encoder.refine_last_block(ctx, s)?;
        locals.push(encoder.embed(ctx, &refined)?);
    }
    let [a, b, c]: [Tensor; 3] = locals.try_into().expect("three locals");
    Ok([a, b, c])
}

/// `concat(F_ori, F'_loc1, F'_loc2, F'_loc3)` along the feature axis.
/// Segment `k` occupies columns `k·d .. (k+1)·d`.
pub fn final_feature(f_ori: &Tensor, locals: &[Tensor; 3]) -> Result<Tensor> {
    Ok(Tensor::cat(&[f_ori, &locals[0], &locals[1], &locals[2]], 1)?)
}
