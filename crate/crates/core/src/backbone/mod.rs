//! ViT encoder shared by the teacher (joint attention at every layer) and the
//! asymmetric student (per-stream stage 1, joint stage 2).

mod accounting;
mod config;
mod encoder;
mod network;
mod params;

pub use accounting::{count_flops, count_params, mac_breakdown, FlopConvention, MacBreakdown};
pub use config::{Arch, BackboneConfig};
pub use encoder::{EncoderLayer, LayerTrace};
pub use network::{Forward, TrackerNet};
pub use params::{Binder, ParamEntry, ParamId, ParamStore};

use crate::numerics::Var;

/// Which stream a token sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Template,
    Search,
    /// Template tokens followed by search tokens.
    Joint,
}

/// Token matrix (`N×D`) living in a graph, with its grid layout.
///
/// For template and search streams `grid.0 * grid.1 == N`. For joint
/// sequences `grid` is the search grid and the first `template_len` rows are
/// template tokens.
#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    pub var: Var,
    pub origin: Origin,
    pub grid: (usize, usize),
    pub template_len: usize,
}

impl TokenSeq {
    pub(crate) fn stream(var: Var, origin: Origin, grid: (usize, usize)) -> Self {
        let template_len = if origin == Origin::Template { grid.0 * grid.1 } else { 0 };
        TokenSeq { var, origin, grid, template_len }
    }

    /// Number of tokens.
    pub fn len(&self) -> usize {
        match self.origin {
            Origin::Joint => self.template_len + self.search_len(),
            _ => self.grid.0 * self.grid.1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn search_len(&self) -> usize {
        match self.origin {
            Origin::Template => 0,
            _ => self.grid.0 * self.grid.1,
        }
    }
}
