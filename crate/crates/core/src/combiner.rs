//! Fusion of the image, style and dialogue encodings into a single context
//! vector, and dot-product scoring against candidate encodings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::{Float, Graph, Initializer, ParameterStore, Tensor, Var};
use crate::encoders::transformer::{encoder_stack, init_encoder_stack, TransformerConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Style,
    Dialogue,
}

/// Which modalities feed the combiner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub image: bool,
    pub style: bool,
    pub dialogue: bool,
}

impl ModalityMask {
    pub const FULL: ModalityMask = ModalityMask { image: true, style: true, dialogue: true };
    pub const NONE: ModalityMask = ModalityMask { image: false, style: false, dialogue: false };

    pub fn new(image: bool, style: bool, dialogue: bool) -> Self {
        ModalityMask { image, style, dialogue }
    }

    pub fn is_empty(self) -> bool {
        !(self.image || self.style || self.dialogue)
    }

    pub fn contains(self, m: Modality) -> bool {
        match m {
            Modality::Image => self.image,
            Modality::Style => self.style,
            Modality::Dialogue => self.dialogue,
        }
    }

    pub fn intersect(self, other: ModalityMask) -> Self {
        ModalityMask {
            image: self.image && other.image,
            style: self.style && other.style,
            dialogue: self.dialogue && other.dialogue,
        }
    }

    /// The seven nonempty masks in ablation-table order, with row labels.
    pub fn ablation_rows() -> [(&'static str, ModalityMask); 7] {
        [
            ("Image Only", ModalityMask::new(true, false, false)),
            ("Style Only", ModalityMask::new(false, true, false)),
            ("Dialogue History Only", ModalityMask::new(false, false, true)),
            ("Style + Dialogue (no image)", ModalityMask::new(false, true, true)),
            ("Image + Dialogue (no style)", ModalityMask::new(true, false, true)),
            ("Image + Style (no dialogue)", ModalityMask::new(true, true, false)),
            ("Style + Dialogue + Image (full model)", ModalityMask::FULL),
        ]
    }
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.image, "image"), (self.style, "style"), (self.dialogue, "dialogue")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for ModalityMask {
    type Err = Error;

    /// Comma-separated subset of `image`, `style`, `dialogue`; `full` for all.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "full" {
            return Ok(Self::FULL);
        }
        let mut m = Self::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "image" => m.image = true,
                "style" => m.style = true,
                "dialogue" | "history" => m.dialogue = true,
                other => return Err(Error::config(format!("unknown modality {other:?}"))),
            }
        }
        if m.is_empty() {
            return Err(Error::config("modality mask is empty"));
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CombinerKind {
    #[default]
    MmSum,
    MmAtt,
}

impl FromStr for CombinerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mm_sum" | "mm-sum" | "sum" => Ok(CombinerKind::MmSum),
            "mm_att" | "mm-att" | "att" => Ok(CombinerKind::MmAtt),
            _ => Err(Error::config(format!("unknown combiner {s:?}"))),
        }
    }
}

/// What MM-Att sums after computing the modality weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionReadout {
    /// Weighted sum of the encoder outputs r_I, r_S, r_D.
    #[default]
    Originals,
    /// Weighted sum of the fusion Transformer's output states.
    Contextual,
}

/// Encoded modality vectors; `None` marks a modality with no input.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModalityVectors {
    pub image: Option<Var>,
    pub style: Option<Var>,
    pub dialogue: Option<Var>,
}

impl ModalityVectors {
    pub fn present(&self) -> ModalityMask {
        ModalityMask::new(self.image.is_some(), self.style.is_some(), self.dialogue.is_some())
    }

    fn selected(&self, mask: ModalityMask) -> Result<Vec<Var>> {
        if mask.is_empty() {
            return Err(Error::contract("combiner called with an empty modality mask"));
        }
        let mut out = Vec::with_capacity(3);
        for (on, v, name) in [
            (mask.image, self.image, "image"),
            (mask.style, self.style, "style"),
            (mask.dialogue, self.dialogue, "dialogue"),
        ] {
            if on {
                out.push(v.ok_or_else(|| Error::contract(format!("{name} is in the mask but was not encoded")))?);
            }
        }
        Ok(out)
    }
}

/// The fused context representation r_T.
#[derive(Clone, Copy, Debug)]
pub struct FusedContext {
    pub r_t: Var,
    pub kind: CombinerKind,
    pub modalities: ModalityMask,
}

fn check_widths<T: Float>(g: &Graph<T>, vs: &[Var]) -> Result<usize> {
    let w = g.shape(vs[0]).to_vec();
    if w.len() != 1 || vs.iter().any(|&v| g.shape(v) != w.as_slice()) {
        return Err(Error::contract("modality vectors must be rank-1 and of equal width"));
    }
    Ok(w[0])
}

/// r_T = sum of the masked-in modality vectors, added in image, style,
/// dialogue order.
pub fn mm_sum_fuse<T: Float>(g: &mut Graph<T>, vecs: &ModalityVectors, mask: ModalityMask) -> Result<FusedContext> {
    let vs = vecs.selected(mask)?;
    check_widths(g, &vs)?;
    let mut r_t = vs[0];
    for &v in &vs[1..] {
        r_t = g.add(r_t, v)?;
    }
    Ok(FusedContext { r_t, kind: CombinerKind::MmSum, modalities: mask })
}

pub fn init_mm_att<T: Float>(store: &mut ParameterStore<T>, init: &mut Initializer, prefix: &str, cfg: &TransformerConfig) -> Result<()> {
    store.insert(format!("{prefix}.query"), init.normal_vector(cfg.hidden, 0.02))?;
    init_encoder_stack(store, init, &format!("{prefix}.stack"), cfg)
}

/// Attention combiner.
///
/// The masked-in vectors are stacked behind a learned aggregation query and
/// passed through a self-attention stack without position embeddings. The
/// query is never attended to. Its final-layer attention over the modality
/// positions, averaged over heads, gives convex weights; r_T is the weighted
/// sum selected by `readout`.
pub fn mm_att_fuse<T: Float>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    cfg: &TransformerConfig,
    readout: AttentionReadout,
    vecs: &ModalityVectors,
    mask: ModalityMask,
) -> Result<FusedContext> {
    let vs = vecs.selected(mask)?;
    let width = check_widths(g, &vs)?;
    if width != cfg.hidden {
        return Err(Error::contract(format!("MM-Att width {} but modality vectors are {width}", cfg.hidden)));
    }
    let k = vs.len();
    let query = g.param(store, &format!("{prefix}.query"))?;
    let modalities = g.concat_rows(&vs)?;
    let seq = g.concat_rows(&[query, modalities])?;
    let l = k + 1;
    let attn_mask: Vec<bool> = (0..l * l).map(|i| i % l != 0).collect();
    let (states, probs) = encoder_stack(g, store, &format!("{prefix}.stack"), cfg, seq, &attn_mask)?;

    let mut weights: Option<Var> = None;
    for &p in &probs {
        let row = g.gather_rows(p, &[0])?;
        let w = g.slice_cols(row, 1, k)?;
        weights = Some(match weights {
            None => w,
            Some(acc) => g.add(acc, w)?,
        });
    }
    let weights = weights.ok_or_else(|| Error::contract("MM-Att stack has no layers"))?;
    let weights = if probs.len() > 1 { g.scale(weights, 1.0 / probs.len() as f64)? } else { weights };

    let values = match readout {
        AttentionReadout::Originals => modalities,
        AttentionReadout::Contextual => {
            let ids: Vec<usize> = (1..l).collect();
            g.gather_rows(states, &ids)?
        }
    };
    let r = g.matmul(weights, values)?;
    let r_t = g.reshape(r, vec![width])?;
    Ok(FusedContext { r_t, kind: CombinerKind::MmAtt, modalities: mask })
}

/// Head-averaged modality weights MM-Att assigns to these vectors.
pub fn mm_att_weights<T: Float>(
    store: &ParameterStore<T>,
    prefix: &str,
    cfg: &TransformerConfig,
    modality_values: &[Vec<T>],
) -> Result<Vec<T>> {
    let mut g = Graph::inference();
    let vs: Vec<Var> = modality_values
        .iter()
        .map(|v| g.constant(Tensor::vector(v.clone())))
        .collect::<Result<_>>()?;
    let query = g.param(store, &format!("{prefix}.query"))?;
    let modalities = g.concat_rows(&vs)?;
    let seq = g.concat_rows(&[query, modalities])?;
    let l = vs.len() + 1;
    let attn_mask: Vec<bool> = (0..l * l).map(|i| i % l != 0).collect();
    let (_, probs) = encoder_stack(&mut g, store, &format!("{prefix}.stack"), cfg, seq, &attn_mask)?;
    let mut w = vec![T::zero(); vs.len()];
    for &p in &probs {
        for (j, wj) in w.iter_mut().enumerate() {
            *wj += g.value(p).row(0)[j + 1];
        }
    }
    let h = T::from_f64_lossy(probs.len() as f64);
    Ok(w.into_iter().map(|x| x / h).collect())
}

/// Scores of every candidate row `[n, d]` against r_T.
pub fn score_candidates<T: Float>(g: &mut Graph<T>, fused: &FusedContext, candidates: Var) -> Result<Var> {
    let d = g.shape(fused.r_t).first().copied().unwrap_or(0);
    let cs = g.shape(candidates).to_vec();
    if cs.len() != 2 || cs[1] != d {
        return Err(Error::contract(format!("candidate matrix {cs:?} does not match r_T width {d}")));
    }
    let row = g.reshape(fused.r_t, vec![1, d])?;
    let s = g.matmul_nt(row, candidates)?;
    g.reshape(s, vec![cs[0]])
}

/// Plain dot-product scores, accumulated in the same order as the tape.
pub fn score_values<T: Float>(r_t: &[T], candidates: &[Tensor<T>]) -> Result<Vec<T>> {
    if candidates.is_empty() {
        return Err(Error::contract("no candidates to score"));
    }
    candidates
        .iter()
        .map(|c| {
            if c.numel() != r_t.len() {
                return Err(Error::contract("candidate width differs from r_T"));
            }
            let mut s = T::zero();
            for (&x, &y) in r_t.iter().zip(c.data()) {
                s += x * y;
            }
            Ok(s)
        })
        .collect()
}

/// A block of context-by-candidate scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub context_ids: Vec<String>,
    pub candidate_ids: Vec<String>,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(context_ids: Vec<String>, candidate_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != context_ids.len() * candidate_ids.len() {
            return Err(Error::contract("score matrix size does not match its ids"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score matrix"));
        }
        Ok(ScoreMatrix { context_ids, candidate_ids, values })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.candidate_ids.len();
        &self.values[i * n..(i + 1) * n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs(g: &mut Graph<f64>, i: &[f64], s: &[f64], d: &[f64]) -> ModalityVectors {
        ModalityVectors {
            image: Some(g.constant(Tensor::vector(i.to_vec())).unwrap()),
            style: Some(g.constant(Tensor::vector(s.to_vec())).unwrap()),
            dialogue: Some(g.constant(Tensor::vector(d.to_vec())).unwrap()),
        }
    }

    #[test]
    fn mm_sum_examples() {
        let mut g = Graph::new();
        let v = vecs(&mut g, &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]);
        let full = mm_sum_fuse(&mut g, &v, ModalityMask::FULL).unwrap();
        assert_eq!(g.value(full.r_t).data(), &[2.0, 2.0]);
        let id = mm_sum_fuse(&mut g, &v, "image,dialogue".parse().unwrap()).unwrap();
        assert_eq!(g.value(id.r_t).data(), &[2.0, 1.0]);
        let so = mm_sum_fuse(&mut g, &v, "style".parse().unwrap()).unwrap();
        assert_eq!(g.value(so.r_t).data(), &[0.0, 1.0]);
        assert!(mm_sum_fuse(&mut g, &v, ModalityMask::NONE).is_err());
    }

    #[test]
    fn missing_modality_is_error() {
        let mut g = Graph::<f64>::new();
        let mut v = vecs(&mut g, &[1.0], &[1.0], &[1.0]);
        v.dialogue = None;
        assert!(matches!(mm_sum_fuse(&mut g, &v, ModalityMask::FULL), Err(Error::Contract(_))));
    }

    #[test]
    fn scoring_examples() {
        let mut g = Graph::<f64>::new();
        let v = vecs(&mut g, &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]);
        let fused = mm_sum_fuse(&mut g, &v, ModalityMask::FULL).unwrap();
        let c = g.constant(Tensor::matrix(2, 2, vec![2.0, 3.0, 1.0, 0.0]).unwrap()).unwrap();
        let s = score_candidates(&mut g, &fused, c).unwrap();
        assert_eq!(g.value(s).data(), &[10.0, 2.0]);
        let plain = score_values(&[2.0, 2.0], &[Tensor::vector(vec![2.0, 3.0]), Tensor::vector(vec![1.0, 0.0])]).unwrap();
        assert_eq!(plain, vec![10.0, 2.0]);
        assert!(score_values::<f64>(&[1.0], &[]).is_err());
    }

    #[test]
    fn mask_parsing() {
        assert_eq!("image,style".parse::<ModalityMask>().unwrap(), ModalityMask::new(true, true, false));
        assert_eq!("full".parse::<ModalityMask>().unwrap(), ModalityMask::FULL);
        assert!("".parse::<ModalityMask>().is_err());
        assert!("smell".parse::<ModalityMask>().is_err());
        let rows = ModalityMask::ablation_rows();
        let distinct: std::collections::HashSet<_> = rows.iter().map(|r| r.1).collect();
        assert_eq!(distinct.len(), 7);
        for (_, m) in rows {
            assert_eq!(m.to_string().parse::<ModalityMask>().unwrap(), m);
        }
    }

    fn att_setup(seed: u64, width: usize) -> (ParameterStore<f64>, TransformerConfig) {
        let cfg = TransformerConfig { n_layers: 2, hidden: width, n_heads: 4, ffn_dim: 2 * width };
        let mut s = ParameterStore::new(seed);
        init_mm_att(&mut s, &mut Initializer::new(seed), "att", &cfg).unwrap();
        (s, cfg)
    }

    #[test]
    fn mm_att_single_modality_is_identity_weight() {
        let (s, cfg) = att_setup(5, 8);
        let mut g = Graph::<f64>::new();
        let iv: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let v = ModalityVectors { image: Some(g.constant(Tensor::vector(iv.clone())).unwrap()), style: None, dialogue: None };
        let mask = ModalityMask::new(true, false, false);
        let orig = mm_att_fuse(&mut g, &s, "att", &cfg, AttentionReadout::Originals, &v, mask).unwrap();
        assert_eq!(g.value(orig.r_t).data(), iv.as_slice());

        let ctx = mm_att_fuse(&mut g, &s, "att", &cfg, AttentionReadout::Contextual, &v, mask).unwrap();
        // The post-stack state of the lone modality position.
        let mut g2 = Graph::<f64>::inference();
        let q = g2.param(&s, "att.query").unwrap();
        let m = g2.constant(Tensor::vector(iv.clone())).unwrap();
        let seq = g2.concat_rows(&[q, m]).unwrap();
        let (states, _) = encoder_stack(&mut g2, &s, "att.stack", &cfg, seq, &[false, true, false, true]).unwrap();
        assert_eq!(g.value(ctx.r_t).data(), g2.value(states).row(1));
    }

    #[test]
    fn mm_att_weights_are_convex_and_differ_from_sum() {
        let (s, cfg) = att_setup(11, 8);
        let mut g = Graph::<f64>::new();
        let mk = |k: f64| (0..8).map(|i| ((i as f64 + k) * 0.7).sin()).collect::<Vec<_>>();
        let v = vecs(&mut g, &mk(0.0), &mk(1.0), &mk(2.0));
        let att = mm_att_fuse(&mut g, &s, "att", &cfg, AttentionReadout::Originals, &v, ModalityMask::FULL).unwrap();
        let sum = mm_sum_fuse(&mut g, &v, ModalityMask::FULL).unwrap();
        assert_eq!(g.value(att.r_t).numel(), 8);
        assert_ne!(g.value(att.r_t).data(), g.value(sum.r_t).data());
        let w = mm_att_weights(&s, "att", &cfg, &[mk(0.0), mk(1.0), mk(2.0)]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x > 0.0));
    }
}
