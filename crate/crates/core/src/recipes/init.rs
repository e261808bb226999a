//! Initializations built from existing checkpoints.

use std::collections::BTreeSet;

use super::{GrowSource, RecipeError};
use crate::model::{extract_layer_range, Attention, Block, Mlp, ModelCheckpoint, ModelConfig, ModelError, Norm, Provenance, Submodule, Weights};
use crate::tensor::Tensor;

/// First `l` layers of `reference` (only `submodules`; the rest freshly
/// initialized from `seed`) plus its embeddings, final norm and head.
pub fn inherit_init(reference: &ModelCheckpoint, l: usize, submodules: &BTreeSet<Submodule>, seed: u64) -> Result<ModelCheckpoint, RecipeError> {
    let subs: Vec<String> = submodules.iter().map(|s| s.to_string()).collect();
    let prov = Provenance::new("inheritune")
        .note("source_layers", format!("0..{l}"))
        .note("submodules", subs.join(","));
    layer_range_init(reference, 0, l, submodules, seed, prov)
}

/// Layers `first..last` of `reference` as a new model.
pub fn layer_range_init(
    reference: &ModelCheckpoint,
    first: usize,
    last: usize,
    submodules: &BTreeSet<Submodule>,
    seed: u64,
    provenance: Provenance,
) -> Result<ModelCheckpoint, RecipeError> {
    let part = extract_layer_range(reference, first, last, submodules)?;
    let mut prov = provenance;
    prov.source_digest = Some(reference.digest());
    prov.notes.entry("source_layers".into()).or_insert(format!("{first}..{last}"));
    Ok(part.into_checkpoint(seed, prov)?)
}

/// Appends `step` layers after the target's current stack: the reference's
/// layers `l..l+step` or, for [`GrowSource::Random`], fresh blocks.
pub fn grow(target: &ModelCheckpoint, reference: &ModelCheckpoint, step: usize, source: GrowSource, seed: u64) -> Result<ModelCheckpoint, RecipeError> {
    let l = target.n_layers();
    let max = reference.n_layers();
    if l + step > max {
        return Err(RecipeError::LayerCap { layers: l, step, max });
    }
    let config = target.config.with_layers(l + step);
    let mut weights = target.weights.clone();
    for i in l..l + step {
        weights.blocks.push(match source {
            GrowSource::Reference => reference.weights.blocks[i].clone(),
            GrowSource::Random => Block::random(&config, i, seed),
        });
    }
    let mut prov = target.provenance.clone();
    let key = format!("grow_{l}_to_{}", l + step);
    let val = match source {
        GrowSource::Reference => format!("reference layers {l}..{}", l + step),
        GrowSource::Random => format!("random seed {seed}"),
    };
    prov.notes.insert(key, val);
    Ok(ModelCheckpoint::new(config, weights, prov)?)
}

/// Doubles depth: layer `i` and layer `k + i` both start from input layer `i`.
pub fn stacking_init(half: &ModelCheckpoint) -> Result<ModelCheckpoint, RecipeError> {
    let k = half.n_layers();
    let mut weights = half.weights.clone();
    weights.blocks.extend(half.weights.blocks.iter().cloned());
    let prov = Provenance {
        source_digest: Some(half.digest()),
        ..Provenance::new("stacking")
    }
    .note("layout", format!("0..{k} repeated"));
    Ok(ModelCheckpoint::new(half.config.with_layers(2 * k), weights, prov)?)
}

/// `2k` layers whose two halves are copies of reference layers `0..k`.
pub fn hybrid_stacking_init(reference: &ModelCheckpoint, k: usize) -> Result<ModelCheckpoint, RecipeError> {
    if k == 0 || k > reference.n_layers() {
        return Err(ModelError::LayerRange {
            first: 0,
            last: k,
            layers: reference.n_layers(),
        }
        .into());
    }
    let mut weights = reference.weights.clone();
    weights.blocks.truncate(k);
    weights.blocks.extend(reference.weights.blocks[..k].iter().cloned());
    let prov = Provenance {
        source_digest: Some(reference.digest()),
        ..Provenance::new("hybrid_stacking")
    }
    .note("layout", format!("reference 0..{k} twice"));
    Ok(ModelCheckpoint::new(reference.config.with_layers(2 * k), weights, prov)?)
}

/// Half hidden size and half the heads, taking leading slices everywhere:
/// heads `0..H/2` of attention, the first `e/2` input and output
/// coordinates, and the first half of the MLP's inner units.
pub fn half_width_init(reference: &ModelCheckpoint) -> Result<ModelCheckpoint, RecipeError> {
    let c = &reference.config;
    if c.hidden % 2 != 0 || c.n_heads % 2 != 0 {
        return Err(ModelError::InvalidConfig(format!("half width needs even hidden ({}) and heads ({})", c.hidden, c.n_heads)).into());
    }
    let e = c.hidden / 2;
    let config = ModelConfig {
        hidden: e,
        n_heads: c.n_heads / 2,
        ..c.clone()
    };
    let f = config.mlp_hidden();
    let w = &reference.weights;
    let norm = |n: &Norm| -> Result<Norm, RecipeError> {
        Ok(Norm {
            gamma: n.gamma.prefix(e)?,
            beta: n.beta.prefix(e)?,
        })
    };
    let sq = |t: &Tensor| t.slice2(0..e, 0..e);
    let blocks = w
        .blocks
        .iter()
        .map(|b| -> Result<Block, RecipeError> {
            let a = &b.attn;
            let m = &b.mlp;
            Ok(Block {
                ln_1: norm(&b.ln_1)?,
                attn: Attention {
                    w_q: sq(&a.w_q)?,
                    b_q: a.b_q.prefix(e)?,
                    w_k: sq(&a.w_k)?,
                    b_k: a.b_k.prefix(e)?,
                    w_v: sq(&a.w_v)?,
                    b_v: a.b_v.prefix(e)?,
                    w_o: sq(&a.w_o)?,
                    b_o: a.b_o.prefix(e)?,
                },
                ln_2: norm(&b.ln_2)?,
                mlp: Mlp {
                    w_fc: m.w_fc.slice2(0..e, 0..f)?,
                    b_fc: m.b_fc.prefix(f)?,
                    w_proj: m.w_proj.slice2(0..f, 0..e)?,
                    b_proj: m.b_proj.prefix(e)?,
                },
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let weights = Weights {
        wte: w.wte.slice2(0..c.vocab, 0..e)?,
        wpe: w.wpe.slice2(0..c.context, 0..e)?,
        blocks,
        ln_f: norm(&w.ln_f)?,
        head: w.head.slice2(0..e, 0..c.vocab)?,
    };
    let prov = Provenance {
        source_digest: Some(reference.digest()),
        ..Provenance::new("half_width")
    };
    Ok(ModelCheckpoint::new(config, weights, prov)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(l: usize, e: usize, h: usize) -> ModelCheckpoint {
        ModelCheckpoint::init_random(&ModelConfig::new(l, h, e, 8, 16), 2).unwrap()
    }

    #[test]
    fn full_inherit_is_identity() {
        let r = model(3, 8, 2);
        let t = inherit_init(&r, 3, &Submodule::all(), 9).unwrap();
        assert_eq!(t.digest(), r.digest());
    }

    #[test]
    fn grow_appends_next_layers() {
        let r = model(6, 8, 2);
        let t = inherit_init(&r, 2, &Submodule::all(), 0).unwrap();
        let g = grow(&t, &r, 2, GrowSource::Reference, 0).unwrap();
        assert_eq!(g.n_layers(), 4);
        for i in 0..4 {
            assert_eq!(g.layer_digest(i), r.layer_digest(i));
        }
        let g = grow(&g, &r, 2, GrowSource::Reference, 0).unwrap();
        assert!(matches!(grow(&g, &r, 2, GrowSource::Reference, 0), Err(RecipeError::LayerCap { .. })));
        let rnd = grow(&t, &r, 1, GrowSource::Random, 5).unwrap();
        assert_ne!(rnd.layer_digest(2), r.layer_digest(2));
    }

    #[test]
    fn stacking_layouts() {
        let h = model(2, 8, 2);
        let s = stacking_init(&h).unwrap();
        assert_eq!(s.layer_digest(0), s.layer_digest(2));
        assert_eq!(s.layer_digest(1), s.layer_digest(3));
        let r = model(6, 8, 2);
        let hy = hybrid_stacking_init(&r, 2).unwrap();
        assert_eq!(hy.n_layers(), 4);
        assert_eq!(hy.layer_digest(3), r.layer_digest(1));
    }

    #[test]
    fn half_width_slices() {
        let r = model(2, 8, 2);
        let h = half_width_init(&r).unwrap();
        assert_eq!((h.config.hidden, h.config.n_heads), (4, 1));
        let (a, b) = (&r.weights.blocks[1].attn.w_k, &h.weights.blocks[1].attn.w_k);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.at(i, j), b.at(i, j));
            }
        }
        let q = half_width_init(&model(1, 8, 4)).unwrap();
        let qq = half_width_init(&q).unwrap();
        assert_eq!((qq.config.hidden, qq.config.n_heads), (2, 1));
        assert!(half_width_init(&qq).is_err());
    }
}
