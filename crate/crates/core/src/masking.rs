//! Visibility grids over `L` timesteps x 3 modalities.
//!
//! Cells are flattened in sequence order `t * 3 + modality`, so the last cell
//! is the action at the final timestep.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, MtmError, Result};
use crate::trajdata::{Modality, NUM_MODALITIES};

pub const DEFAULT_RATIO_RANGE: (f64, f64) = (0.0, 0.6);

/// `true` = visible, `false` = hidden.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskGrid {
    len: usize,
    cells: Vec<bool>,
}

impl MaskGrid {
    pub fn filled(len: usize, visible: bool) -> Self {
        Self {
            len,
            cells: vec![visible; len * NUM_MODALITIES],
        }
    }

    pub fn from_cells(len: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != len * NUM_MODALITIES {
            return Err(MtmError::Dimension(format!("mask of {} cells for L = {len}", cells.len())));
        }
        Ok(Self { len, cells })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    /// `t` is 0-based.
    pub fn visible(&self, t: usize, m: Modality) -> bool {
        self.cells[t * NUM_MODALITIES + m.index()]
    }

    pub fn set(&mut self, t: usize, m: Modality, visible: bool) {
        self.cells[t * NUM_MODALITIES + m.index()] = visible;
    }

    pub fn n_visible(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn n_hidden(&self) -> usize {
        self.cells.len() - self.n_visible()
    }

    /// Hides every cell of an absent modality.
    pub fn with_presence(mut self, presence: [bool; NUM_MODALITIES]) -> Self {
        for (i, c) in self.cells.iter_mut().enumerate() {
            *c &= presence[i % NUM_MODALITIES];
        }
        self
    }

    /// True if some hidden cell has no visible cell after it in sequence order.
    pub fn has_autoregressive_token(&self) -> bool {
        self.cells.last() == Some(&false)
    }
}

impl fmt::Display for MaskGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in Modality::ALL {
            let row: String = (0..self.len).map(|t| if self.visible(t, m) { '#' } else { '.' }).collect();
            writeln!(f, "{:>6} {row}", format!("{m:?}"))?;
        }
        Ok(())
    }
}

fn check_range(range: (f64, f64)) -> Result<()> {
    let (lo, hi) = range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(invalid(format!("mask ratio range [{lo}, {hi}] is not inside [0, 1]")));
    }
    Ok(())
}

fn draw_ratio<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

/// Hides exactly `round(ratio * 3L)` cells chosen without replacement.
pub fn mask_with_ratio<R: Rng + ?Sized>(len: usize, ratio: f64, rng: &mut R) -> MaskGrid {
    let n = len * NUM_MODALITIES;
    let k = ((ratio * n as f64).round() as usize).min(n);
    let mut grid = MaskGrid::filled(len, true);
    for i in index::sample(rng, n, k) {
        grid.cells[i] = false;
    }
    grid
}

/// Ratio drawn uniformly from `range`, then [`mask_with_ratio`].
pub fn random_mask<R: Rng + ?Sized>(len: usize, range: (f64, f64), rng: &mut R) -> Result<MaskGrid> {
    check_range(range)?;
    let r = draw_ratio(range, rng);
    Ok(mask_with_ratio(len, r, rng))
}

/// Everything drawn while building one random-autoregressive mask.
#[derive(Clone, Debug)]
pub struct AutoregressiveDraw {
    pub grid: MaskGrid,
    pub ratio: f64,
    /// Hidden cells before the suffix was applied.
    pub base_hidden: usize,
    /// Flattened index from which every cell is hidden.
    pub pivot: usize,
}

pub fn random_autoregressive_draw<R: Rng + ?Sized>(len: usize, range: (f64, f64), rng: &mut R) -> Result<AutoregressiveDraw> {
    check_range(range)?;
    if len == 0 {
        return Err(invalid("segment length must be positive"));
    }
    let ratio = draw_ratio(range, rng);
    let mut grid = mask_with_ratio(len, ratio, rng);
    let base_hidden = grid.n_hidden();
    let hidden: Vec<usize> = (0..grid.cells.len()).filter(|&i| !grid.cells[i]).collect();
    let pivot = if hidden.is_empty() {
        grid.cells.len() - 1
    } else {
        hidden[rng.random_range(0..hidden.len())]
    };
    grid.cells[pivot..].fill(false);
    Ok(AutoregressiveDraw {
        grid,
        ratio,
        base_hidden,
        pivot,
    })
}

/// Random mask whose hidden set always ends in a suffix of the sequence.
pub fn random_autoregressive_mask<R: Rng + ?Sized>(len: usize, range: (f64, f64), rng: &mut R) -> Result<MaskGrid> {
    Ok(random_autoregressive_draw(len, range, rng)?.grid)
}

/// Inference-time mask families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Bc,
    Rcbc,
    Id,
    Fd,
    Full,
    /// Stage one of two-stage acting: rtg and states visible through the
    /// query, actions hidden, target the next state.
    StatePlan,
}

impl Capability {
    /// Cell the capability predicts, as 0-based `(t, modality)`. `None` for FULL.
    pub fn target(self, query_t: usize) -> Option<(usize, Modality)> {
        match self {
            Self::Bc | Self::Rcbc | Self::Id => Some((query_t - 1, Modality::Action)),
            Self::Fd | Self::StatePlan => Some((query_t, Modality::State)),
            Self::Full => None,
        }
    }

    fn needs_next_slot(self) -> bool {
        matches!(self, Self::Id | Self::Fd | Self::StatePlan)
    }
}

impl FromStr for Capability {
    type Err = MtmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bc" => Ok(Self::Bc),
            "rcbc" => Ok(Self::Rcbc),
            "id" => Ok(Self::Id),
            "fd" => Ok(Self::Fd),
            "full" => Ok(Self::Full),
            "state_plan" => Ok(Self::StatePlan),
            other => Err(invalid(format!("unknown capability {other:?}"))),
        }
    }
}

/// Deterministic capability layout; `query_t` is 1-based.
pub fn capability_mask(kind: Capability, len: usize, query_t: usize) -> Result<MaskGrid> {
    if query_t == 0 || query_t > len {
        return Err(invalid(format!("query_t must be in 1..={len}, got {query_t}")));
    }
    if kind.needs_next_slot() && query_t == len {
        return Err(invalid(format!("{kind:?} at query_t = L has no next-state slot")));
    }
    use Modality::*;
    let mut g = MaskGrid::filled(len, kind == Capability::Full);
    let q = query_t;
    for t in 0..len {
        let step = t + 1;
        match kind {
            Capability::Full => {}
            Capability::Bc | Capability::Rcbc => {
                g.set(t, State, step <= q);
                g.set(t, Action, step < q);
                g.set(t, Rtg, kind == Capability::Rcbc && step <= q);
            }
            Capability::Id => g.set(t, State, step <= q + 1),
            Capability::Fd => {
                g.set(t, State, step <= q);
                g.set(t, Action, step <= q);
            }
            Capability::StatePlan => {
                g.set(t, State, step <= q);
                g.set(t, Rtg, step <= q);
            }
        }
    }
    Ok(g)
}

/// Training mask families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Random,
    RandomAutoregressive,
    Bc,
    Rcbc,
    Id,
    Fd,
}

impl MaskKind {
    /// The capability mask used when training a specialized model, at the
    /// query position used for inference.
    pub fn specialized(self, len: usize) -> Option<(Capability, usize)> {
        match self {
            Self::Random | Self::RandomAutoregressive => None,
            Self::Bc => Some((Capability::Bc, len)),
            Self::Rcbc => Some((Capability::Rcbc, len)),
            Self::Id => Some((Capability::Id, len.saturating_sub(1))),
            Self::Fd => Some((Capability::Fd, len.saturating_sub(1))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::RandomAutoregressive => "random_autoregressive",
            Self::Bc => "bc",
            Self::Rcbc => "rcbc",
            Self::Id => "id",
            Self::Fd => "fd",
        }
    }

    pub fn validate(self, len: usize) -> Result<()> {
        match self.specialized(len) {
            Some((cap, q)) => capability_mask(cap, len, q).map(|_| ()),
            None if len == 0 => Err(invalid("segment length must be positive")),
            None => Ok(()),
        }
    }

    /// One training mask for a segment of length `len`.
    pub fn draw<R: Rng + ?Sized>(self, len: usize, range: (f64, f64), rng: &mut R) -> Result<MaskGrid> {
        match self.specialized(len) {
            Some((cap, q)) => capability_mask(cap, len, q),
            None if self == Self::Random => random_mask(len, range, rng),
            None => random_autoregressive_mask(len, range, rng),
        }
    }
}

impl FromStr for MaskKind {
    type Err = MtmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "random_autoregressive" => Ok(Self::RandomAutoregressive),
            "bc" => Ok(Self::Bc),
            "rcbc" => Ok(Self::Rcbc),
            "id" => Ok(Self::Id),
            "fd" => Ok(Self::Fd),
            other => Err(invalid(format!("unknown mask kind {other:?}"))),
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use Modality::*;

    #[test]
    fn ratio_zero_is_all_visible() {
        let mut rng = seeded_rng(0, 0);
        assert_eq!(random_mask(4, (0.0, 0.0), &mut rng).unwrap(), MaskGrid::filled(4, true));
    }

    #[test]
    fn half_ratio_hides_six_of_twelve() {
        let mut rng = seeded_rng(0, 0);
        let g = mask_with_ratio(4, 0.5, &mut rng);
        assert_eq!(g.cells().len(), 12);
        assert_eq!(g.n_hidden(), 6);
    }

    #[test]
    fn bad_ratio_range_is_rejected() {
        let mut rng = seeded_rng(0, 0);
        assert!(random_mask(4, (0.5, 0.2), &mut rng).is_err());
        assert!(random_mask(4, (0.0, 1.5), &mut rng).is_err());
    }

    #[test]
    fn default_range_hides_thirty_percent_on_average() {
        let mut rng = seeded_rng(1, 0);
        let total: usize = (0..10_000).map(|_| random_mask(4, DEFAULT_RATIO_RANGE, &mut rng).unwrap().n_hidden()).sum();
        let mean = total as f64 / (10_000.0 * 12.0);
        assert!((mean - 0.30).abs() < 0.02, "{mean}");
    }

    #[test]
    fn single_timestep_autoregressive_hides_last() {
        let mut rng = seeded_rng(2, 0);
        for _ in 0..100 {
            let g = random_autoregressive_mask(1, DEFAULT_RATIO_RANGE, &mut rng).unwrap();
            assert!(!g.visible(0, Action));
        }
    }

    proptest! {
        #[test]
        fn autoregressive_suffix_property(seed in 0u64..u64::MAX, len in 1usize..9) {
            let mut rng = seeded_rng(seed, 0);
            let d = random_autoregressive_draw(len, DEFAULT_RATIO_RANGE, &mut rng).unwrap();
            let cells = d.grid.cells();
            prop_assert!(cells[d.pivot..].iter().all(|c| !c));
            prop_assert!(d.grid.has_autoregressive_token());
            prop_assert!(d.grid.n_hidden() >= d.base_hidden);
        }

        #[test]
        fn presence_never_exposes_absent_cells(seed in 0u64..u64::MAX, p in proptest::array::uniform3(any::<bool>())) {
            let mut rng = seeded_rng(seed, 0);
            let g = random_mask(5, (0.0, 1.0), &mut rng).unwrap().with_presence(p);
            for t in 0..5 {
                for m in Modality::ALL {
                    prop_assert!(!g.visible(t, m) || p[m.index()]);
                }
            }
        }

        #[test]
        fn masks_are_pure_functions_of_rng(seed in 0u64..u64::MAX) {
            let a = random_autoregressive_mask(4, DEFAULT_RATIO_RANGE, &mut seeded_rng(seed, 3)).unwrap();
            let b = random_autoregressive_mask(4, DEFAULT_RATIO_RANGE, &mut seeded_rng(seed, 3)).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    fn visible_set(g: &MaskGrid) -> Vec<(usize, Modality)> {
        (0..g.len()).flat_map(|t| Modality::ALL.into_iter().map(move |m| (t, m))).filter(|(t, m)| g.visible(*t, *m)).collect()
    }

    #[test]
    fn fd_layout() {
        let g = capability_mask(Capability::Fd, 4, 3).unwrap();
        let want: Vec<(usize, Modality)> = (0..3).flat_map(|t| [(t, State), (t, Action)]).collect();
        assert_eq!(visible_set(&g), want);
        assert_eq!(Capability::Fd.target(3), Some((3, State)));
    }

    #[test]
    fn rcbc_layout() {
        let g = capability_mask(Capability::Rcbc, 4, 4).unwrap();
        for t in 0..4 {
            assert!(g.visible(t, Rtg) && g.visible(t, State));
            assert_eq!(g.visible(t, Action), t < 3);
        }
    }

    #[test]
    fn bc_id_state_plan_layouts() {
        let bc = capability_mask(Capability::Bc, 4, 2).unwrap();
        assert_eq!(visible_set(&bc), vec![(0, State), (0, Action), (1, State)]);
        let id = capability_mask(Capability::Id, 4, 2).unwrap();
        assert_eq!(visible_set(&id), vec![(0, State), (1, State), (2, State)]);
        let sp = capability_mask(Capability::StatePlan, 3, 2).unwrap();
        assert_eq!(visible_set(&sp), vec![(0, Rtg), (0, State), (1, Rtg), (1, State)]);
    }

    #[test]
    fn full_and_errors() {
        assert_eq!(capability_mask(Capability::Full, 3, 1).unwrap(), MaskGrid::filled(3, true));
        assert!(capability_mask(Capability::Fd, 4, 4).is_err());
        assert!(capability_mask(Capability::Id, 4, 4).is_err());
        assert!(capability_mask(Capability::Bc, 4, 0).is_err());
        assert!(capability_mask(Capability::Bc, 4, 5).is_err());
    }

    #[test]
    fn mask_kind_names_round_trip() {
        for k in [MaskKind::Random, MaskKind::RandomAutoregressive, MaskKind::Bc, MaskKind::Rcbc, MaskKind::Id, MaskKind::Fd] {
            assert_eq!(k.name().parse::<MaskKind>().unwrap(), k);
        }
        assert!("causal".parse::<MaskKind>().is_err());
        assert!(MaskKind::Fd.validate(1).is_err());
    }
}
