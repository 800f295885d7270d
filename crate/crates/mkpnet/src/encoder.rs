//! Token adaptor: whitespace/punctuation tokenizer, vocabulary, and the
//! shared mini-transformer that encodes an argument pair into the hidden
//! state at the leading [CLS] position. Both tasks run through the same
//! stored parameter group (`bert.*`), which is what lets token-level
//! knowledge transfer between them.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorgrad::{Binder, Graph, ParamSet, Rng, Tensor, TensorId};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Token inventory. Ids 0..4 are fixed to [PAD], [UNK], [CLS], [SEP].
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from a corpus of texts: tokens sorted by frequency (ties
    /// alphabetical), capped to `cap` total entries including the reserved
    /// four.
    pub fn build(texts: impl Iterator<Item = String>, cap: usize) -> Vocab {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(&text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(cap.saturating_sub(4)).map(|(t, _)| t));
        Vocab::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, ids }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    /// One token per line, line number = id; first four lines are reserved.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot open vocab {}: {e}", path.display())))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < 4 || tokens[..4] != RESERVED.map(String::from) {
            return Err(Error::Data(format!(
                "vocab {} must start with [PAD],[UNK],[CLS],[SEP]",
                path.display()
            )));
        }
        Ok(Vocab::from_tokens(tokens))
    }

    /// Content hash of the token list, for checkpoint sidecars.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        format!("{:x}", h.finalize())
    }
}

/// Lowercase, whitespace split, punctuation separated into its own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() || ch == '\'' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// `[CLS] arg1 [SEP] arg2 [SEP]` with segment, position and mask vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPair {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

/// Lays out `[CLS] a1 [SEP] a2 [SEP]`, truncating each argument
/// proportionally to its length to fit `max_len` (the leftover of an uneven
/// split goes to arg1).
pub fn tokenize_pair(arg1: &str, arg2: &str, vocab: &Vocab, max_len: usize) -> Result<TokenizedPair> {
    if max_len < 5 {
        return Err(Error::Invalid(format!(
            "max_len {max_len} cannot hold [CLS] a [SEP] b [SEP]"
        )));
    }
    let t1 = tokenize(arg1);
    let t2 = tokenize(arg2);
    if t1.is_empty() || t2.is_empty() {
        return Err(Error::Data("empty argument after normalization".into()));
    }
    let budget = max_len - 3;
    let (n1, n2) = if t1.len() + t2.len() <= budget {
        (t1.len(), t2.len())
    } else {
        let total = t1.len() + t2.len();
        // proportional share for arg1, rounded up (ties to arg1)
        let mut n1 = (budget * t1.len() + total - 1) / total;
        n1 = n1.clamp(1, t1.len().min(budget - 1));
        let n2 = (budget - n1).min(t2.len());
        (n1 + (budget - n1 - n2).min(t1.len() - n1), n2)
    };

    let mut token_ids = Vec::with_capacity(n1 + n2 + 3);
    let mut segment_ids = Vec::with_capacity(n1 + n2 + 3);
    token_ids.push(CLS);
    segment_ids.push(0);
    for t in &t1[..n1] {
        token_ids.push(vocab.id(t));
        segment_ids.push(0);
    }
    token_ids.push(SEP);
    segment_ids.push(0);
    for t in &t2[..n2] {
        token_ids.push(vocab.id(t));
        segment_ids.push(1);
    }
    token_ids.push(SEP);
    segment_ids.push(1);

    let len = token_ids.len();
    Ok(TokenizedPair {
        token_ids,
        segment_ids,
        position_ids: (0..len).collect(),
        attention_mask: vec![1; len],
    })
}

impl TokenizedPair {
    /// Extends to `len` with masked [PAD] positions.
    pub fn pad_to(&self, len: usize) -> TokenizedPair {
        let mut out = self.clone();
        while out.token_ids.len() < len {
            out.token_ids.push(PAD);
            out.segment_ids.push(1);
            out.position_ids.push(out.position_ids.len());
            out.attention_mask.push(0);
        }
        out
    }
}

/// Encoder hyperparameters (θ^BERT shape).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Creates the `bert.*` parameter group for a vocabulary of size `v`.
pub fn init_params(ps: &mut ParamSet, cfg: &EncoderConfig, v: usize, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let emb = |name: &str, rows: usize, ps: &mut ParamSet, rng: &mut Rng| {
        ps.add(name, Tensor::new(vec![rows, d], rng.normal_vec(rows * d, 0.02)).unwrap())
    };
    emb("bert.tok_emb", v, ps, rng)?;
    emb("bert.seg_emb", 2, ps, rng)?;
    emb("bert.pos_emb", cfg.max_len, ps, rng)?;
    for l in 0..cfg.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            ps.add(
                &format!("bert.l{l}.{w}"),
                Tensor::new(vec![d, d], rng.normal_vec(d * d, 0.02))?,
            )?;
            ps.add(&format!("bert.l{l}.b{}", &w[1..]), Tensor::zeros(vec![d]))?;
        }
        ps.add(&format!("bert.l{l}.ln1.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
        ps.add(&format!("bert.l{l}.ln1.b"), Tensor::zeros(vec![d]))?;
        ps.add(
            &format!("bert.l{l}.ff.w1"),
            Tensor::new(vec![d, cfg.ff_dim], rng.normal_vec(d * cfg.ff_dim, 0.02))?,
        )?;
        ps.add(&format!("bert.l{l}.ff.b1"), Tensor::zeros(vec![cfg.ff_dim]))?;
        ps.add(
            &format!("bert.l{l}.ff.w2"),
            Tensor::new(vec![cfg.ff_dim, d], rng.normal_vec(cfg.ff_dim * d, 0.02))?,
        )?;
        ps.add(&format!("bert.l{l}.ff.b2"), Tensor::zeros(vec![d]))?;
        ps.add(&format!("bert.l{l}.ln2.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
        ps.add(&format!("bert.l{l}.ln2.b"), Tensor::zeros(vec![d]))?;
    }
    Ok(())
}

/// Encodes one tokenized pair; returns the final-layer hidden state at the
/// [CLS] position as a rank-1 `[d]` node.
pub fn encode_one(
    g: &mut Graph,
    binder: &mut Binder,
    ps: &ParamSet,
    cfg: &EncoderConfig,
    pair: &TokenizedPair,
) -> Result<TensorId> {
    let t = pair.token_ids.len();
    if t > cfg.max_len {
        return Err(Error::Invalid(format!(
            "sequence length {t} exceeds position table {}",
            cfg.max_len
        )));
    }
    let d = cfg.d_model;
    let dh = d / cfg.heads;

    let tok = binder.bind(g, ps, "bert.tok_emb")?;
    let seg = binder.bind(g, ps, "bert.seg_emb")?;
    let pos = binder.bind(g, ps, "bert.pos_emb")?;
    let te = g.embedding(tok, &pair.token_ids)?;
    let se = g.embedding(seg, &pair.segment_ids)?;
    let pe = g.embedding(pos, &pair.position_ids)?;
    let sum = g.add(te, se)?;
    let mut x = g.add(sum, pe)?;

    // additive attention bias: masked keys get a large negative score
    let mut bias = vec![0.0f32; t * t];
    for (j, &m) in pair.attention_mask.iter().enumerate() {
        if m == 0 {
            for i in 0..t {
                bias[i * t + j] = -1e9;
            }
        }
    }
    let mask_bias = g.constant(Tensor::new(vec![t, t], bias)?)?;

    for l in 0..cfg.layers {
        let wq = binder.bind(g, ps, &format!("bert.l{l}.wq"))?;
        let bq = binder.bind(g, ps, &format!("bert.l{l}.bq"))?;
        let wk = binder.bind(g, ps, &format!("bert.l{l}.wk"))?;
        let bk = binder.bind(g, ps, &format!("bert.l{l}.bk"))?;
        let wv = binder.bind(g, ps, &format!("bert.l{l}.wv"))?;
        let bv = binder.bind(g, ps, &format!("bert.l{l}.bv"))?;
        let wo = binder.bind(g, ps, &format!("bert.l{l}.wo"))?;
        let bo = binder.bind(g, ps, &format!("bert.l{l}.bo"))?;

        let q = g.affine(x, wq, bq)?;
        let k = g.affine(x, wk, bk)?;
        let v = g.affine(x, wv, bv)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = g.slice_last(q, h * dh, dh)?;
            let kh = g.slice_last(k, h * dh, dh)?;
            let vh = g.slice_last(v, h * dh, dh)?;
            heads.push(g.attention(qh, kh, vh, mask_bias)?);
        }
        let mut cat = heads[0];
        for &hd in &heads[1..] {
            cat = g.concat(cat, hd)?;
        }
        let proj = g.affine(cat, wo, bo)?;
        let res1 = g.add(x, proj)?;
        let g1 = binder.bind(g, ps, &format!("bert.l{l}.ln1.g"))?;
        let b1 = binder.bind(g, ps, &format!("bert.l{l}.ln1.b"))?;
        x = g.layer_norm(res1, g1, b1)?;

        let w1 = binder.bind(g, ps, &format!("bert.l{l}.ff.w1"))?;
        let fb1 = binder.bind(g, ps, &format!("bert.l{l}.ff.b1"))?;
        let w2 = binder.bind(g, ps, &format!("bert.l{l}.ff.w2"))?;
        let fb2 = binder.bind(g, ps, &format!("bert.l{l}.ff.b2"))?;
        let h1 = g.affine(x, w1, fb1)?;
        let h1 = g.tanh(h1)?;
        let h2 = g.affine(h1, w2, fb2)?;
        let res2 = g.add(x, h2)?;
        let g2 = binder.bind(g, ps, &format!("bert.l{l}.ln2.g"))?;
        let b2 = binder.bind(g, ps, &format!("bert.l{l}.ln2.b"))?;
        x = g.layer_norm(res2, g2, b2)?;
    }
    g.row(x, 0)
}

/// Batch encode: returns the `[CLS]` representations as a `B x d` tensor
/// (inference convenience; no gradients are tracked).
pub fn encode_pair(
    ps: &ParamSet,
    cfg: &EncoderConfig,
    batch: &[TokenizedPair],
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(batch.len() * cfg.d_model);
    for pair in batch {
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let h = encode_one(&mut g, &mut binder, ps, cfg, pair)?;
        data.extend_from_slice(&g.value(h).data);
    }
    Tensor::new(vec![batch.len(), cfg.d_model], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocab() -> Vocab {
        Vocab::build(
            ["per goes to the restaurant", "per is so hungry", "a"]
                .iter()
                .map(|s| s.to_string()),
            64,
        )
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig { layers: 2, heads: 2, d_model: 16, ff_dim: 32, max_len: 32 }
    }

    fn tiny_params(cfg: &EncoderConfig, v: usize) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut rng = Rng::seeded(42);
        init_params(&mut ps, cfg, v, &mut rng).unwrap();
        ps
    }

    #[test]
    fn layout_matches_cls_sep_scheme() {
        let v = tiny_vocab();
        let p = tokenize_pair("PER goes to the restaurant", "PER is so hungry", &v, 64).unwrap();
        assert_eq!(p.token_ids[0], CLS);
        assert_eq!(p.token_ids[6], SEP);
        assert_eq!(*p.token_ids.last().unwrap(), SEP);
        assert_eq!(p.segment_ids, vec![0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(p.position_ids, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn minimal_fit_at_max_len_five() {
        let v = tiny_vocab();
        let p = tokenize_pair("a", "a", &v, 5).unwrap();
        let a = v.id("a");
        assert_eq!(p.token_ids, vec![CLS, a, SEP, a, SEP]);
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let v = tiny_vocab();
        let p = tokenize_pair("zyzzyva goes", "per is", &v, 16).unwrap();
        assert_eq!(p.token_ids[1], UNK);
    }

    #[test]
    fn empty_argument_rejected() {
        let v = tiny_vocab();
        assert!(tokenize_pair("", "per", &v, 16).is_err());
        assert!(tokenize_pair("per", "   ", &v, 16).is_err());
    }

    #[test]
    fn truncation_is_proportional_and_fits() {
        let v = tiny_vocab();
        let long1 = "per goes to the restaurant per goes to the restaurant";
        let long2 = "per is so hungry";
        let p = tokenize_pair(long1, long2, &v, 12).unwrap();
        assert_eq!(p.token_ids.len(), 12);
        let seps: Vec<usize> =
            p.token_ids.iter().enumerate().filter(|(_, &t)| t == SEP).map(|(i, _)| i).collect();
        assert_eq!(seps.len(), 2);
        // arg1 is ~3x longer, so it should keep more than half the budget
        assert!(seps[0] - 1 > (12 - 3) / 2);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = tiny_vocab();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let v2 = Vocab::load(&path).unwrap();
        assert_eq!(v.size(), v2.size());
        assert_eq!(v.hash(), v2.hash());
        assert_eq!(v2.id("[CLS]"), CLS);
    }

    #[test]
    fn encode_shape_and_determinism() {
        let v = tiny_vocab();
        let cfg = tiny_cfg();
        let ps = tiny_params(&cfg, v.size());
        let p = tokenize_pair("per goes to the restaurant", "per is so hungry", &v, 32).unwrap();
        let out = encode_pair(&ps, &cfg, &[p.clone(), p.clone()]).unwrap();
        assert_eq!(out.shape, vec![2, 16]);
        assert_eq!(out.data[..16], out.data[16..]);
    }

    #[test]
    fn permuting_batch_permutes_rows() {
        let v = tiny_vocab();
        let cfg = tiny_cfg();
        let ps = tiny_params(&cfg, v.size());
        let a = tokenize_pair("per goes to the restaurant", "per is so hungry", &v, 32).unwrap();
        let b = tokenize_pair("per is so hungry", "a", &v, 32).unwrap();
        let ab = encode_pair(&ps, &cfg, &[a.clone(), b.clone()]).unwrap();
        let ba = encode_pair(&ps, &cfg, &[b, a]).unwrap();
        assert_eq!(ab.data[..16], ba.data[16..]);
        assert_eq!(ab.data[16..], ba.data[..16]);
    }

    #[test]
    fn padding_does_not_change_cls() {
        let v = tiny_vocab();
        let cfg = tiny_cfg();
        let ps = tiny_params(&cfg, v.size());
        let p = tokenize_pair("per goes to the restaurant", "per is so hungry", &v, 32).unwrap();
        let padded = p.pad_to(p.token_ids.len() + 7);
        let plain = encode_pair(&ps, &cfg, &[p]).unwrap();
        let pad = encode_pair(&ps, &cfg, &[padded]).unwrap();
        for (a, b) in plain.data.iter().zip(&pad.data) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn overlong_sequence_rejected() {
        let v = tiny_vocab();
        let cfg = EncoderConfig { max_len: 8, ..tiny_cfg() };
        let ps = tiny_params(&cfg, v.size());
        let p = tokenize_pair("per goes to the restaurant", "per is so hungry", &v, 32).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new();
        assert!(encode_one(&mut g, &mut b, &ps, &cfg, &p).is_err());
    }
}
