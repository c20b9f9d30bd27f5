use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;

/// Block size `b` and stride `s` of the block-wise operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub b: usize,
    pub s: usize,
}

impl BlockGeometry {
    pub fn new(b: usize, s: usize) -> Result<Self> {
        let g = Self { b, s };
        let mut problems = Vec::new();
        g.collect_problems(&mut problems);
        if problems.is_empty() {
            Ok(g)
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// `b` with stride `b / 2` (at least 1).
    pub fn half_stride(b: usize) -> Result<Self> {
        Self::new(b, (b / 2).max(1))
    }

    pub fn overlap(self) -> usize {
        self.b.saturating_sub(self.s)
    }

    /// Number of states touched by one application: `b + s`.
    pub fn span(self) -> usize {
        self.b + self.s
    }

    pub(crate) fn collect_problems(self, out: &mut Vec<String>) {
        if self.b == 0 {
            out.push("block size b must be at least 1".into());
        }
        if self.s == 0 {
            out.push("stride s must be at least 1 (s = 0 reduces the loss to self-coherence only)".into());
        }
        if self.s > self.b {
            out.push(format!("stride s = {} exceeds block size b = {}", self.s, self.b));
        }
    }
}

impl fmt::Display for BlockGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b={},s={}", self.b, self.s)
    }
}

/// Parses `b=4,s=2`, `4,2` or `4:2`.
impl FromStr for BlockGeometry {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = || Error::config(format!("cannot parse geometry `{text}`, expected `b=<int>,s=<int>`"));
        let parts: Vec<&str> = text.split([',', ':']).map(str::trim).collect();
        if parts.len() != 2 {
            return Err(bad());
        }
        let mut b = None;
        let mut s = None;
        for (i, part) in parts.iter().enumerate() {
            let (key, val) = match part.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => (if i == 0 { "b" } else { "s" }, *part),
            };
            let val: usize = val.parse().map_err(|_| bad())?;
            match key {
                "b" => b = Some(val),
                "s" => s = Some(val),
                _ => return Err(bad()),
            }
        }
        match (b, s) {
            (Some(b), Some(s)) => Self::new(b, s),
            _ => Err(bad()),
        }
    }
}

/// Architecture of the Hamiltonian transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Degrees of freedom of one state (length of `q`).
    pub dof: usize,
    /// Token width; also the latent code dimension.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hidden width of the feed-forward sublayer as a multiple of `width`.
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub geometry: BlockGeometry,
    /// One trunk feeding both read-out heads, or one trunk per head.
    pub shared_trunk: bool,
    /// Adds the identity generating function `±sum q.p`, gated per step by
    /// `(1 - a_q)(1 - a_p)`, so untrained operators map states to themselves.
    #[serde(default)]
    pub identity_skip: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(dof: usize, geometry: BlockGeometry) -> Self {
        Self {
            dof,
            width: 128,
            heads: 4,
            layers: 2,
            mlp_ratio: 4,
            activation: Activation::Silu,
            geometry,
            shared_trunk: true,
            identity_skip: true,
            init_seed: 0,
        }
    }

    /// Sequence length: `b` position tokens, `b` momentum tokens, one latent.
    pub fn tokens(&self) -> usize {
        2 * self.geometry.b + 1
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    /// Checks every constraint and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.dof == 0 {
            problems.push("dof must be at least 1".into());
        }
        if self.width == 0 {
            problems.push("width must be at least 1".into());
        }
        if self.heads == 0 {
            problems.push("heads must be at least 1".into());
        } else if self.width % self.heads != 0 {
            problems.push(format!("width {} is not divisible by heads {}", self.width, self.heads));
        }
        if self.layers == 0 {
            problems.push("layers must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            problems.push("mlp_ratio must be at least 1".into());
        }
        if let Err(Error::Validation(mut p)) = self.activation.check() {
            problems.append(&mut p);
        }
        self.geometry.collect_problems(&mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}
