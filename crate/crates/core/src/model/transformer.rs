//! The scalar-valued transformer over `[Q tokens, P tokens, z]`.

use dhn_autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{linear, normal_tensor, ParamStore};

/// Which read-out head (discrete right or left Hamiltonian) to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Plus,
    Minus,
}

/// A scalar block Hamiltonian that can be recorded onto a tape.
///
/// `q` and `p` are `b x dof`, `z` is `1 x width`, and `noise` holds one
/// noise level per state token (`b` for `q`, then `b` for `p`).
pub trait BlockHamiltonian {
    fn energy(&self, tape: &mut Tape, q: Var, p: Var, z: Var, noise: &[f64], head: Head) -> Var;
}

impl<F> BlockHamiltonian for F
where
    F: Fn(&mut Tape, Var, Var, Var, &[f64], Head) -> Var,
{
    fn energy(&self, tape: &mut Tape, q: Var, p: Var, z: Var, noise: &[f64], head: Head) -> Var {
        self(tape, q, p, z, noise, head)
    }
}

#[derive(Clone, Debug)]
struct AttnHead {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    heads: Vec<AttnHead>,
    attn_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug)]
struct TrunkIdx {
    q_w: usize,
    q_b: usize,
    p_w: usize,
    p_b: usize,
    pos: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    trunks: Vec<TrunkIdx>,
    plus_w: usize,
    plus_b: usize,
    minus_w: usize,
    minus_b: usize,
}

fn build(config: &ModelConfig, params: &mut ParamStore) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let d = config.width;
    let dh = config.head_dim();
    let hidden = d * config.mlp_ratio;
    let resid_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
    let n_trunks = if config.shared_trunk { 1 } else { 2 };
    let mut trunks = Vec::with_capacity(n_trunks);
    for t in 0..n_trunks {
        let mut push = |name: String, value: Tensor| params.push(format!("trunk{t}.{name}"), value);
        let q_w = push("q_in.w".into(), normal_tensor(&mut rng, config.dof, d, 1.0));
        let q_b = push("q_in.b".into(), Tensor::zeros(1, d));
        let p_w = push("p_in.w".into(), normal_tensor(&mut rng, config.dof, d, 1.0));
        let p_b = push("p_in.b".into(), Tensor::zeros(1, d));
        let pos = push("pos".into(), normal_tensor(&mut rng, config.tokens(), d, 0.1));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let ln1_g = push(format!("l{l}.ln1.g"), Tensor::full(1, d, 1.0));
            let ln1_b = push(format!("l{l}.ln1.b"), Tensor::zeros(1, d));
            let heads = (0..config.heads)
                .map(|h| AttnHead {
                    wq: push(format!("l{l}.h{h}.wq"), normal_tensor(&mut rng, d, dh, (d as f64).powf(-0.5))),
                    wk: push(format!("l{l}.h{h}.wk"), normal_tensor(&mut rng, d, dh, (d as f64).powf(-0.5))),
                    wv: push(format!("l{l}.h{h}.wv"), normal_tensor(&mut rng, d, dh, (d as f64).powf(-0.5))),
                    wo: push(
                        format!("l{l}.h{h}.wo"),
                        normal_tensor(&mut rng, dh, d, resid_scale * (d as f64).powf(-0.5)),
                    ),
                })
                .collect();
            let attn_b = push(format!("l{l}.attn.b"), Tensor::zeros(1, d));
            let ln2_g = push(format!("l{l}.ln2.g"), Tensor::full(1, d, 1.0));
            let ln2_b = push(format!("l{l}.ln2.b"), Tensor::zeros(1, d));
            let fc1_w = push(format!("l{l}.fc1.w"), normal_tensor(&mut rng, d, hidden, (d as f64).powf(-0.5)));
            let fc1_b = push(format!("l{l}.fc1.b"), Tensor::zeros(1, hidden));
            let fc2_w = push(
                format!("l{l}.fc2.w"),
                normal_tensor(&mut rng, hidden, d, resid_scale * (hidden as f64).powf(-0.5)),
            );
            let fc2_b = push(format!("l{l}.fc2.b"), Tensor::zeros(1, d));
            layers.push(LayerIdx {
                ln1_g,
                ln1_b,
                heads,
                attn_b,
                ln2_g,
                ln2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        let lnf_g = push("ln_f.g".into(), Tensor::full(1, d, 1.0));
        let lnf_b = push("ln_f.b".into(), Tensor::zeros(1, d));
        trunks.push(TrunkIdx {
            q_w,
            q_b,
            p_w,
            p_b,
            pos,
            layers,
            lnf_g,
            lnf_b,
        });
    }
    let plus_w = params.push("head_plus.w", normal_tensor(&mut rng, d, 1, (d as f64).powf(-0.5)));
    let plus_b = params.push("head_plus.b", Tensor::zeros(1, 1));
    let minus_w = params.push("head_minus.w", normal_tensor(&mut rng, d, 1, (d as f64).powf(-0.5)));
    let minus_b = params.push("head_minus.b", Tensor::zeros(1, 1));
    Layout {
        trunks,
        plus_w,
        plus_b,
        minus_w,
        minus_b,
    }
}

/// Sinusoidal embedding of a noise level in `[0, 1]`.
pub fn noise_embedding(alpha: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    let t = alpha * 1000.0;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (t * freq).sin();
        out[2 * i + 1] = (t * freq).cos();
    }
    out
}

/// Weights of the block Hamiltonian transformer.
#[derive(Clone, Debug)]
pub struct DhnWeights {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl DhnWeights {
    /// Freshly initialized weights; deterministic in `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build(&config, &mut params);
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Sets both read-out heads to zero.
    pub fn zero_heads(&mut self) {
        for i in [self.layout.plus_w, self.layout.plus_b, self.layout.minus_w, self.layout.minus_b] {
            self.params.tensors_mut()[i].scale_assign(0.0);
        }
    }

    /// Records the weights as trainable parameters (in `params()` order).
    pub fn bind_trainable(&self, tape: &mut Tape) -> BoundDhn<'_> {
        BoundDhn {
            weights: self,
            vars: self.params.bind_trainable(tape),
        }
    }

    /// Records the weights as constants; no parameter gradients flow.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundDhn<'_> {
        BoundDhn {
            weights: self,
            vars: self.params.bind_frozen(tape),
        }
    }

    /// Uses already-recorded variables, one per tensor of `params()`.
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundDhn<'_> {
        assert_eq!(vars.len(), self.params.len(), "one variable per weight tensor");
        BoundDhn { weights: self, vars }
    }

    /// Value of one head on concrete blocks.
    pub fn hamiltonian_value(&self, q: &Tensor, p: &Tensor, z: &Tensor, noise: &[f64], head: Head) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let qv = tape.constant(q.clone());
        let pv = tape.constant(p.clone());
        let zv = tape.constant(z.clone());
        bound.check_inputs(&tape, qv, pv, zv, noise)?;
        let h = bound.energy(&mut tape, qv, pv, zv, noise, head);
        tape.check_finite()?;
        Ok(tape.value(h).item())
    }
}

/// Weights bound to one tape.
pub struct BoundDhn<'a> {
    weights: &'a DhnWeights,
    vars: Vec<Var>,
}

impl BoundDhn<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Shape checks shared by every operator entry point.
    pub fn check_inputs(&self, tape: &Tape, q: Var, p: Var, z: Var, noise: &[f64]) -> Result<()> {
        let c = &self.weights.config;
        let b = c.geometry.b;
        let mut problems = Vec::new();
        if tape.shape(q) != (b, c.dof) {
            problems.push(format!("Q block is {:?}, expected ({b}, {})", tape.shape(q), c.dof));
        }
        if tape.shape(p) != (b, c.dof) {
            problems.push(format!("P block is {:?}, expected ({b}, {})", tape.shape(p), c.dof));
        }
        if tape.shape(z) != (1, c.width) {
            problems.push(format!("latent is {:?}, expected (1, {})", tape.shape(z), c.width));
        }
        if noise.len() != 2 * b {
            problems.push(format!("{} noise levels for {} state tokens", noise.len(), 2 * b));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn ln(&self, tape: &mut Tape, x: Var, g: usize, b: usize) -> Var {
        let n = tape.layer_norm_rows(x, 1e-5);
        let rows = tape.shape(n).0;
        let gain = tape.expand_rows(self.vars[g], rows);
        let scaled = tape.mul(n, gain);
        tape.add_row(scaled, self.vars[b])
    }
}

impl BlockHamiltonian for BoundDhn<'_> {
    fn energy(&self, tape: &mut Tape, q: Var, p: Var, z: Var, noise: &[f64], head: Head) -> Var {
        let c = &self.weights.config;
        let lay = &self.weights.layout;
        let trunk = match (head, lay.trunks.len()) {
            (Head::Minus, 2) => &lay.trunks[1],
            _ => &lay.trunks[0],
        };
        let v = &self.vars;
        let n = c.tokens();
        let b = c.geometry.b;
        let d = c.width;

        let qt = linear(tape, q, v[trunk.q_w], v[trunk.q_b]);
        let pt = linear(tape, p, v[trunk.p_w], v[trunk.p_b]);
        let tokens = tape.concat_rows(&[qt, pt, z]);
        let mut emb = Vec::with_capacity(n * d);
        for &alpha in noise.iter().take(2 * b) {
            emb.extend(noise_embedding(alpha, d));
        }
        emb.resize(n * d, 0.0);
        let emb = tape.constant(Tensor::new(n, d, emb));
        let x = tape.add(tokens, v[trunk.pos]);
        let mut x = tape.add(x, emb);

        let scale = 1.0 / (c.head_dim() as f64).sqrt();
        let last = trunk.layers.len() - 1;
        for (li, layer) in trunk.layers.iter().enumerate() {
            let h = self.ln(tape, x, layer.ln1_g, layer.ln1_b);
            // Only the latent token feeds the read-out, so the final layer
            // computes queries and the residual stream for that row alone.
            let (hq, resid) = if li == last {
                (tape.slice_rows(h, n - 1, 1), tape.slice_rows(x, n - 1, 1))
            } else {
                (h, x)
            };
            let mut attn = None;
            for ah in &layer.heads {
                let qh = tape.matmul(hq, v[ah.wq]);
                let kh = tape.matmul(h, v[ah.wk]);
                let vh = tape.matmul(h, v[ah.wv]);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, scale);
                let w = tape.softmax_rows(scores);
                let mixed = tape.matmul(w, vh);
                let out = tape.matmul(mixed, v[ah.wo]);
                attn = Some(match attn {
                    None => out,
                    Some(acc) => tape.add(acc, out),
                });
            }
            let attn = tape.add_row(attn.expect("at least one head"), v[layer.attn_b]);
            let x1 = tape.add(resid, attn);
            let h2 = self.ln(tape, x1, layer.ln2_g, layer.ln2_b);
            let f = linear(tape, h2, v[layer.fc1_w], v[layer.fc1_b]);
            let f = c.activation.apply(tape, f);
            let f = linear(tape, f, v[layer.fc2_w], v[layer.fc2_b]);
            x = tape.add(x1, f);
        }
        let rows = tape.shape(x).0;
        let zrow = if rows == 1 { x } else { tape.slice_rows(x, rows - 1, 1) };
        let zf = self.ln(tape, zrow, trunk.lnf_g, trunk.lnf_b);
        let (hw, hb) = match head {
            Head::Plus => (lay.plus_w, lay.plus_b),
            Head::Minus => (lay.minus_w, lay.minus_b),
        };
        let e = linear(tape, zf, v[hw], v[hb]);
        if !c.identity_skip {
            return e;
        }
        let sign = match head {
            Head::Plus => 1.0,
            Head::Minus => -1.0,
        };
        let gate = Tensor::from_fn(b, c.dof, |k, _| {
            let level = |i: usize| noise.get(i).copied().unwrap_or(0.0);
            sign * (1.0 - level(k)) * (1.0 - level(b + k))
        });
        let qp = tape.mul(q, p);
        let gate = tape.constant(gate);
        let skip = tape.mul(qp, gate);
        let skip = tape.sum(skip);
        tape.add(e, skip)
    }
}

impl BlockHamiltonian for DhnWeights {
    fn energy(&self, tape: &mut Tape, q: Var, p: Var, z: Var, noise: &[f64], head: Head) -> Var {
        self.bind_frozen(tape).energy(tape, q, p, z, noise, head)
    }
}

/// Rebuilds weights for `config` from named arrays, validating every shape.
pub fn weights_from_arrays(config: ModelConfig, arrays: Vec<(String, Tensor)>) -> Result<DhnWeights> {
    let mut w = DhnWeights::new(config)?;
    w.params.load(arrays)?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::BlockGeometry;

    fn small(b: usize) -> ModelConfig {
        let mut c = ModelConfig::new(2, BlockGeometry::new(b, 1).unwrap());
        c.width = 8;
        c.heads = 2;
        c.identity_skip = false;
        c
    }

    fn blocks(b: usize) -> (Tensor, Tensor, Tensor) {
        (
            Tensor::from_fn(b, 2, |r, c| 0.3 * r as f64 - 0.2 * c as f64 + 0.1),
            Tensor::from_fn(b, 2, |r, c| -0.5 * r as f64 + 0.4 * c as f64),
            Tensor::from_fn(1, 8, |_, c| 0.05 * c as f64),
        )
    }

    #[test]
    fn zero_head_gives_zero_energy() {
        let mut w = DhnWeights::new(small(2)).unwrap();
        w.zero_heads();
        let (q, p, z) = blocks(2);
        for head in [Head::Plus, Head::Minus] {
            assert_eq!(w.hamiltonian_value(&q, &p, &z, &[0.1, 0.0, 0.3, 1.0], head).unwrap(), 0.0);
        }
    }

    #[test]
    fn skip_alone_copies_clean_states_and_drops_noisy_ones() {
        let mut c = small(2);
        c.identity_skip = true;
        let mut w = DhnWeights::new(c).unwrap();
        w.zero_heads();
        let (q, p, z) = blocks(2);
        let (pq, pp) = crate::model::h_plus_apply(&w, &q, &p, &z, &[0.0; 4]).unwrap();
        assert_eq!((pq, pp), (q.clone(), p.clone()));
        let (mq, mp) = crate::model::h_minus_apply(&w, &q, &p, &z, &[0.0; 4]).unwrap();
        assert_eq!((mq, mp), (q.clone(), p.clone()));
        // Step 1 has a pure-noise momentum, so neither of its outputs sees the skip.
        let (pq, pp) = crate::model::h_plus_apply(&w, &q, &p, &z, &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!((pq.row_slice(0), pp.row_slice(0)), (q.row_slice(0), p.row_slice(0)));
        assert_eq!(pq.row_slice(1), &[0.0, 0.0]);
        assert_eq!(pp.row_slice(1), &[0.0, 0.0]);
    }

    #[test]
    fn energy_is_deterministic_and_seed_dependent() {
        let (q, p, z) = blocks(2);
        let noise = [0.0; 4];
        let a = DhnWeights::new(small(2)).unwrap().hamiltonian_value(&q, &p, &z, &noise, Head::Plus).unwrap();
        let b = DhnWeights::new(small(2)).unwrap().hamiltonian_value(&q, &p, &z, &noise, Head::Plus).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let mut c = small(2);
        c.init_seed = 1;
        let other = DhnWeights::new(c).unwrap().hamiltonian_value(&q, &p, &z, &noise, Head::Plus).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn permuting_tokens_with_their_embeddings_is_invariant() {
        let w = DhnWeights::new(small(2)).unwrap();
        let (q, p, z) = blocks(2);
        let noise = [0.2, 0.7, 0.0, 0.4];
        let h = w.hamiltonian_value(&q, &p, &z, &noise, Head::Plus).unwrap();

        let mut swapped = w.clone();
        let pos_idx = swapped.layout.trunks[0].pos;
        let pos = &mut swapped.params.tensors_mut()[pos_idx];
        for c in 0..8 {
            let (a, b) = (pos.get(0, c), pos.get(1, c));
            pos.set(0, c, b);
            pos.set(1, c, a);
        }
        let q_sw = Tensor::concat_rows(&[&q.slice_rows(1, 1), &q.slice_rows(0, 1)]);
        let h_sw = swapped
            .hamiltonian_value(&q_sw, &p, &z, &[0.7, 0.2, 0.0, 0.4], Head::Plus)
            .unwrap();
        assert!((h - h_sw).abs() < 1e-12, "{h} vs {h_sw}");
    }

    #[test]
    fn separate_trunks_double_the_trunk_parameters() {
        let shared = DhnWeights::new(small(2)).unwrap();
        let mut c = small(2);
        c.shared_trunk = false;
        let split = DhnWeights::new(c).unwrap();
        let heads = 2 * (8 + 1);
        assert_eq!(split.params().count() - heads, 2 * (shared.params().count() - heads));
    }

    #[test]
    fn wrong_shapes_are_configuration_errors() {
        let w = DhnWeights::new(small(2)).unwrap();
        let (q, p, _) = blocks(2);
        let err = w.hamiltonian_value(&q, &p, &Tensor::zeros(1, 3), &[0.0; 4], Head::Plus).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = w.hamiltonian_value(&q, &p, &Tensor::zeros(1, 8), &[0.0; 3], Head::Plus).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
