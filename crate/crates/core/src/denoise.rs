//! Noise schedules, masks, training-time corruption and iterative denoising.

use std::fmt;
use std::str::FromStr;

use dhn_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{h_minus_on_tape, h_plus_on_tape, BlockGeometry, BlockHamiltonian};

/// Increasing noise levels `0 = a_0 < a_1 < ... < a_N = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    levels: Vec<f64>,
}

/// Linear schedule `a_i = i / N`.
pub fn make_schedule(n: usize) -> Result<NoiseSchedule> {
    if n == 0 {
        return Err(Error::config("a noise schedule needs at least one denoising step"));
    }
    Ok(NoiseSchedule {
        levels: (0..=n).map(|i| i as f64 / n as f64).collect(),
    })
}

impl NoiseSchedule {
    /// Number of denoising steps `N`.
    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> f64 {
        self.levels[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// The last `s` states of the span are unknown.
    Autoregressive,
    /// Everything between the first and last state is unknown.
    Superres,
    /// Each state is unknown with probability one half.
    Random,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Autoregressive => "autoregressive",
            MaskKind::Superres => "superres",
            MaskKind::Random => "random",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autoregressive" | "ar" => Ok(MaskKind::Autoregressive),
            "superres" => Ok(MaskKind::Superres),
            "random" => Ok(MaskKind::Random),
            other => Err(Error::config(format!("unknown mask kind `{other}`"))),
        }
    }
}

/// Known (`1`) / unknown (`0`) flags over a span of `b + s` states.
pub fn mask_pattern(kind: MaskKind, geometry: BlockGeometry, rng: &mut impl Rng) -> Vec<f64> {
    let span = geometry.span();
    match kind {
        MaskKind::Autoregressive => (0..span).map(|i| if i < span - geometry.s { 1.0 } else { 0.0 }).collect(),
        MaskKind::Superres => (0..span).map(|i| if i == 0 || i == span - 1 { 1.0 } else { 0.0 }).collect(),
        MaskKind::Random => (0..span).map(|_| if rng.random_bool(0.5) { 0.0 } else { 1.0 }).collect(),
    }
}

/// `A' = A (1 - M)`, then `(1 - A') x + A' eps`, elementwise.
pub fn corrupt(values: &[f64], m: &[f64], a: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    let n = values.len();
    if m.len() != n || a.len() != n || eps.len() != n {
        return Err(Error::config(format!(
            "corrupt needs equal lengths, got values {n}, mask {}, scales {}, noise {}",
            m.len(),
            a.len(),
            eps.len()
        )));
    }
    Ok((0..n)
        .map(|i| {
            let eff = a[i] * (1.0 - m[i]);
            (1.0 - eff) * values[i] + eff * eps[i]
        })
        .collect())
}

/// Noise, scales and mask for one training span.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionDraw {
    pub mask: Vec<f64>,
    /// Schedule index per state; `q` and `p` of a state share it.
    pub level_idx: Vec<usize>,
    /// `span x dof` standard normal draws for positions and momenta.
    pub eps_q: Tensor,
    pub eps_p: Tensor,
}

impl CorruptionDraw {
    /// A draw that leaves every state clean.
    pub fn clean(span: usize, dof: usize) -> Self {
        Self {
            mask: vec![1.0; span],
            level_idx: vec![0; span],
            eps_q: Tensor::zeros(span, dof),
            eps_p: Tensor::zeros(span, dof),
        }
    }

    pub fn span(&self) -> usize {
        self.mask.len()
    }

    /// Effective per-state noise level `A (1 - M)`.
    pub fn effective_levels(&self, schedule: &NoiseSchedule) -> Vec<f64> {
        self.level_idx
            .iter()
            .zip(&self.mask)
            .map(|(&i, m)| schedule.level(i) * (1.0 - m))
            .collect()
    }

    /// Applies the draw to a clean span.
    pub fn apply(&self, q: &Tensor, p: &Tensor, schedule: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
        let (rows, dof) = q.shape();
        if rows != self.span() || p.shape() != q.shape() || self.eps_q.shape() != q.shape() {
            return Err(Error::config(format!(
                "corruption over {} states does not fit a {rows} x {dof} span",
                self.span()
            )));
        }
        let per_elem = |v: &[f64]| -> Vec<f64> { v.iter().flat_map(|&x| std::iter::repeat_n(x, dof)).collect() };
        let m = per_elem(&self.mask);
        let a: Vec<f64> = per_elem(&self.level_idx.iter().map(|&i| schedule.level(i)).collect::<Vec<_>>());
        let cq = corrupt(q.data(), &m, &a, self.eps_q.data())?;
        let cp = corrupt(p.data(), &m, &a, self.eps_p.data())?;
        Ok((Tensor::new(rows, dof, cq), Tensor::new(rows, dof, cp)))
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws mask, per-state levels (uniform over `0..=N`) and Gaussian noise.
pub fn sample_training_corruption(
    rng: &mut impl Rng,
    kind: MaskKind,
    geometry: BlockGeometry,
    schedule: &NoiseSchedule,
    dof: usize,
) -> CorruptionDraw {
    let span = geometry.span();
    let mask = mask_pattern(kind, geometry, rng);
    let level_idx = (0..span).map(|_| rng.random_range(0..=schedule.steps())).collect();
    let eps_q = Tensor::new(span, dof, normal_vec(rng, span * dof));
    let eps_p = Tensor::new(span, dof, normal_vec(rng, span * dof));
    CorruptionDraw {
        mask,
        level_idx,
        eps_q,
        eps_p,
    }
}

/// Operator outputs over one span, each `b x dof`.
#[derive(Clone, Copy, Debug)]
pub struct SpanPredictions {
    /// `H+`: `Q` over `[s, s+b)` and `P` over `[0, b)`.
    pub plus_q: Var,
    pub plus_p: Var,
    /// `H-`: `Q` over `[0, b)` and `P` over `[s, s+b)`.
    pub minus_q: Var,
    pub minus_p: Var,
}

/// Applies both operators to a `(b+s) x dof` span on `tape`.
/// `levels` holds the noise level of every state in the span.
pub fn span_predictions_on_tape<H: BlockHamiltonian + ?Sized>(
    tape: &mut Tape,
    h: &H,
    geometry: BlockGeometry,
    q: Var,
    p: Var,
    z: Var,
    levels: &[f64],
) -> SpanPredictions {
    let BlockGeometry { b, s } = geometry;
    let q_lo = tape.slice_rows(q, 0, b);
    let q_hi = tape.slice_rows(q, s, b);
    let p_lo = tape.slice_rows(p, 0, b);
    let p_hi = tape.slice_rows(p, s, b);
    let noise_plus: Vec<f64> = levels[..b].iter().chain(&levels[s..s + b]).copied().collect();
    let noise_minus: Vec<f64> = levels[s..s + b].iter().chain(&levels[..b]).copied().collect();
    let (plus_q, plus_p) = h_plus_on_tape(tape, h, q_lo, p_hi, z, &noise_plus);
    let (minus_q, minus_p) = h_minus_on_tape(tape, h, q_hi, p_lo, z, &noise_minus);
    SpanPredictions {
        plus_q,
        plus_p,
        minus_q,
        minus_p,
    }
}

/// Clean estimate of every state in the span: the mean of the two
/// operators where both predict a state, otherwise the single prediction.
pub fn combine_predictions(tape: &Tape, geometry: BlockGeometry, preds: &SpanPredictions) -> (Tensor, Tensor) {
    let BlockGeometry { b, s } = geometry;
    let dof = tape.shape(preds.plus_q).1;
    let span = b + s;
    let mut q = Tensor::zeros(span, dof);
    let mut p = Tensor::zeros(span, dof);
    let mut count = vec![0.0; span];
    let add = |dst: &mut Tensor, src: &Tensor, offset: usize, count: Option<&mut Vec<f64>>| {
        for r in 0..b {
            for c in 0..dof {
                dst.set(offset + r, c, dst.get(offset + r, c) + src.get(r, c));
            }
        }
        if let Some(count) = count {
            for n in &mut count[offset..offset + b] {
                *n += 1.0;
            }
        }
    };
    add(&mut q, tape.value(preds.plus_q), s, Some(&mut count));
    add(&mut q, tape.value(preds.minus_q), 0, Some(&mut count));
    add(&mut p, tape.value(preds.minus_p), s, None);
    add(&mut p, tape.value(preds.plus_p), 0, None);
    for r in 0..span {
        for c in 0..dof {
            q.set(r, c, q.get(r, c) / count[r]);
            p.set(r, c, p.get(r, c) / count[r]);
        }
    }
    (q, p)
}

/// Iteratively denoises the unknown states of one `(b+s)`-state span.
///
/// Unknown states start as standard normal draws, are replaced by the
/// operators' clean estimate at each level `a_n` and re-noised to
/// `a_{n-1}` with fresh noise. Known states are never modified.
#[allow(clippy::too_many_arguments)]
pub fn denoise_infer<H: BlockHamiltonian + ?Sized>(
    h: &H,
    geometry: BlockGeometry,
    q: &Tensor,
    p: &Tensor,
    known: &[bool],
    z: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let span = geometry.span();
    let dof = q.cols();
    if q.rows() != span || p.shape() != q.shape() || known.len() != span {
        return Err(Error::config(format!(
            "denoising span of {span} states got q {:?}, p {:?}, {} mask entries",
            q.shape(),
            p.shape(),
            known.len()
        )));
    }
    if known.iter().all(|&k| k) {
        return Ok((q.clone(), p.clone()));
    }
    if !known.iter().any(|&k| k) {
        return Err(Error::config("denoising needs at least one known state in the span"));
    }
    let mut xq = q.clone();
    let mut xp = p.clone();
    // Level a_N = 1: unknown states are pure noise.
    for r in (0..span).filter(|&r| !known[r]) {
        for c in 0..dof {
            xq.set(r, c, StandardNormal.sample(rng));
            xp.set(r, c, StandardNormal.sample(rng));
        }
    }
    for n in (1..=schedule.steps()).rev() {
        let alpha = schedule.level(n);
        let levels: Vec<f64> = known.iter().map(|&k| if k { 0.0 } else { alpha }).collect();
        let mut tape = Tape::new();
        let qv = tape.constant(xq.clone());
        let pv = tape.constant(xp.clone());
        let zv = tape.constant(z.clone());
        let preds = span_predictions_on_tape(&mut tape, h, geometry, qv, pv, zv, &levels);
        if tape.first_non_finite().is_some() {
            return Err(Error::Numeric {
                step: n,
                detail: "non-finite value while denoising".into(),
            });
        }
        let (hat_q, hat_p) = combine_predictions(&tape, geometry, &preds);
        let next = schedule.level(n - 1);
        for r in (0..span).filter(|&r| !known[r]) {
            for c in 0..dof {
                let (mut nq, mut np) = (hat_q.get(r, c), hat_p.get(r, c));
                if next > 0.0 {
                    let (eq, ep): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
                    nq = (1.0 - next) * nq + next * eq;
                    np = (1.0 - next) * np + next * ep;
                }
                xq.set(r, c, nq);
                xp.set(r, c, np);
            }
        }
        if !xq.is_finite() || !xp.is_finite() {
            return Err(Error::Numeric {
                step: n,
                detail: "non-finite state while denoising".into(),
            });
        }
    }
    Ok((xq, xp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Head;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints_and_spacing() {
        assert!(make_schedule(0).is_err());
        assert_eq!(make_schedule(1).unwrap().levels(), &[0.0, 1.0]);
        let s = make_schedule(10).unwrap();
        assert_eq!(s.steps(), 10);
        for (i, a) in s.levels().iter().enumerate() {
            assert_eq!(*a, i as f64 / 10.0);
        }
    }

    #[test]
    fn corrupt_direct_evaluation() {
        let out = corrupt(&[1.0, 2.0], &[1.0, 0.0], &[0.5, 0.5], &[9.0, 9.0]).unwrap();
        assert_eq!(out, vec![1.0, 5.5]);
        assert!(corrupt(&[1.0], &[1.0, 0.0], &[0.5], &[0.0]).is_err());
    }

    #[test]
    fn mask_patterns_from_the_protocols() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = BlockGeometry::new(4, 2).unwrap();
        assert_eq!(mask_pattern(MaskKind::Autoregressive, g, &mut rng), vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let g = BlockGeometry::new(2, 1).unwrap();
        assert_eq!(mask_pattern(MaskKind::Superres, g, &mut rng), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn training_draws_are_reproducible() {
        let g = BlockGeometry::new(2, 1).unwrap();
        let s = make_schedule(10).unwrap();
        let a = sample_training_corruption(&mut ChaCha8Rng::seed_from_u64(4), MaskKind::Random, g, &s, 2);
        let b = sample_training_corruption(&mut ChaCha8Rng::seed_from_u64(4), MaskKind::Random, g, &s, 2);
        assert_eq!(a, b);
        assert!(a.level_idx.iter().all(|&i| i <= 10));
    }

    fn zero_field(t: &mut Tape, q: Var, _p: Var, _z: Var, _n: &[f64], _h: Head) -> Var {
        let s = t.sum(q);
        t.scale(s, 0.0)
    }

    #[test]
    fn fully_known_span_is_returned_unchanged() {
        let g = BlockGeometry::new(2, 1).unwrap();
        let q = Tensor::from_fn(3, 1, |r, _| r as f64);
        let p = Tensor::from_fn(3, 1, |r, _| -(r as f64));
        let out = denoise_infer(
            &zero_field,
            g,
            &q,
            &p,
            &[true; 3],
            &Tensor::zeros(1, 1),
            &make_schedule(10).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out, (q, p));
    }

    #[test]
    fn single_step_schedule_returns_the_clean_estimate() {
        // H+ = sum(P) and H- = -sum(Q): H+ predicts Q = 1, P = 0; H- predicts Q = 0, P = 1.
        let h = |t: &mut Tape, q: Var, p: Var, _z: Var, _n: &[f64], head: Head| match head {
            Head::Plus => t.sum(p),
            Head::Minus => {
                let s = t.sum(q);
                t.neg(s)
            }
        };
        let g = BlockGeometry::new(2, 1).unwrap();
        let q = Tensor::from_fn(3, 1, |r, _| 10.0 + r as f64);
        let known = [true, false, false];
        let (oq, op) = denoise_infer(
            &h,
            g,
            &q,
            &q,
            &known,
            &Tensor::zeros(1, 1),
            &make_schedule(1).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(oq.data(), &[10.0, 0.5, 1.0]);
        assert_eq!(op.data(), &[10.0, 0.5, 1.0]);
    }
}
