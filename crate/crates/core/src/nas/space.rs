use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ArchConfig;

pub const LAYER_LADDER: [usize; 11] = [2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12];
pub const HEAD_LADDER: [usize; 6] = [2, 4, 6, 8, 10, 12];
pub const HEAD_DIM_LADDER: [usize; 8] = [2, 4, 8, 16, 32, 64, 96, 128];
pub const FFD_LADDER: [usize; 11] = [4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 3072];

/// The four searchable architecture fields, in pruning order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Layers,
    Heads,
    HeadDim,
    Ffd,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Layers, Component::Heads, Component::HeadDim, Component::Ffd];
}

/// Architecture genome. Field order gives the lexicographic tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Genome {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffd_size: usize,
}

impl Genome {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize, ffd_size: usize) -> Self {
        Self { num_layers, num_heads, head_dim, ffd_size }
    }

    pub fn of(config: &ArchConfig) -> Self {
        Self::new(config.num_layers, config.num_heads, config.head_dim, config.ffd_size)
    }

    pub fn hidden_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn get(&self, c: Component) -> usize {
        match c {
            Component::Layers => self.num_layers,
            Component::Heads => self.num_heads,
            Component::HeadDim => self.head_dim,
            Component::Ffd => self.ffd_size,
        }
    }

    pub fn with(mut self, c: Component, value: usize) -> Self {
        match c {
            Component::Layers => self.num_layers = value,
            Component::Heads => self.num_heads = value,
            Component::HeadDim => self.head_dim = value,
            Component::Ffd => self.ffd_size = value,
        }
        self
    }

    /// `base` with this genome's body; task fields are kept.
    pub fn apply(&self, base: &ArchConfig) -> ArchConfig {
        base.with_body(self.num_layers, self.num_heads, self.head_dim, self.ffd_size)
    }
}

impl std::fmt::Display for Genome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}-H{}x{}-F{}", self.num_layers, self.num_heads, self.head_dim, self.ffd_size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub head_dims: Vec<usize>,
    pub ffd_sizes: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            layers: LAYER_LADDER.to_vec(),
            heads: HEAD_LADDER.to_vec(),
            head_dims: HEAD_DIM_LADDER.to_vec(),
            ffd_sizes: FFD_LADDER.to_vec(),
        }
    }
}

impl SearchSpace {
    /// Ladders truncated to values no larger than `config`'s.
    pub fn capped_at(config: &ArchConfig) -> Result<Self> {
        let cap = |ladder: &[usize], max: usize, what: &str| -> Result<Vec<usize>> {
            let v: Vec<usize> = ladder.iter().copied().filter(|&x| x <= max).collect();
            if v.is_empty() {
                return Err(Error::InvalidConfig(format!("{what} {max} is below the smallest ladder value")));
            }
            Ok(v)
        };
        Ok(Self {
            layers: cap(&LAYER_LADDER, config.num_layers, "num_layers")?,
            heads: cap(&HEAD_LADDER, config.num_heads, "num_heads")?,
            head_dims: cap(&HEAD_DIM_LADDER, config.head_dim, "head_dim")?,
            ffd_sizes: cap(&FFD_LADDER, config.ffd_size, "ffd_size")?,
        })
    }

    pub fn ladder(&self, c: Component) -> &[usize] {
        match c {
            Component::Layers => &self.layers,
            Component::Heads => &self.heads,
            Component::HeadDim => &self.head_dims,
            Component::Ffd => &self.ffd_sizes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in Component::ALL {
            let l = self.ladder(c);
            if l.is_empty() || l.contains(&0) || l.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidConfig(format!("{c:?} ladder {l:?} must be non-empty, positive, increasing")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, g: &Genome) -> bool {
        Component::ALL.iter().all(|&c| self.ladder(c).contains(&g.get(c)))
    }

    pub fn minimal(&self) -> Genome {
        Genome::new(self.layers[0], self.heads[0], self.head_dims[0], self.ffd_sizes[0])
    }

    pub fn maximal(&self) -> Genome {
        let last = |v: &[usize]| *v.last().unwrap();
        Genome::new(last(&self.layers), last(&self.heads), last(&self.head_dims), last(&self.ffd_sizes))
    }

    /// The next smaller ladder value of `c` below `value`, if any.
    pub fn step_down(&self, c: Component, value: usize) -> Option<usize> {
        self.ladder(c).iter().rev().copied().find(|&x| x < value)
    }

    pub fn sample_field(&self, c: Component, rng: &mut impl Rng) -> usize {
        let l = self.ladder(c);
        l[rng.random_range(0..l.len())]
    }
}

/// Every field drawn uniformly from its ladder.
pub fn sample_genome(space: &SearchSpace, rng: &mut impl Rng) -> Genome {
    Genome::new(
        space.sample_field(Component::Layers, rng),
        space.sample_field(Component::Heads, rng),
        space.sample_field(Component::HeadDim, rng),
        space.sample_field(Component::Ffd, rng),
    )
}
