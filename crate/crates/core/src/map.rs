//! 2D temporal map geometry.
//!
//! Cell `(i, j)` of an `N x N` map is the proposal spanning clips `i..=j`.
//! Candidates are split by length into three bins: short proposals
//! (`l <= N/4`) are dense, medium proposals (`N/4 < l <= N/2`) use stride 2
//! and long proposals (`l > N/2`) use stride 4. A strided candidate must
//! start and end on the stride grid: `i % s == 0` and `(j + 1) % s == 0`.
//!
//! Each bin is also laid out as a compact sub-map. The short map is the full
//! `N x N` grid restricted to the short band. Medium and long candidates are
//! stride-reduced to `u = i / s`, `v = (j + 1) / s - 1` and stored at
//! `(u, v - N/8)`, which yields `3N/8 x 3N/8` and `N/8 x N/8` maps while
//! keeping neighbouring proposals adjacent.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{Tensor, NO_SOURCE};

pub const MEDIUM_STRIDE: usize = 2;
pub const LONG_STRIDE: usize = 4;

/// Sampling pattern and label thresholds for an `N`-clip map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    num_clips: usize,
    t_min: f64,
    t_max: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            num_clips: 256,
            t_min: 0.5,
            t_max: 1.0,
        }
    }
}

impl SamplingConfig {
    pub fn new(num_clips: usize) -> Result<Self> {
        Self::with_thresholds(num_clips, 0.5, 1.0)
    }

    pub fn with_thresholds(num_clips: usize, t_min: f64, t_max: f64) -> Result<Self> {
        let cfg = SamplingConfig {
            num_clips,
            t_min,
            t_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clips == 0 || !self.num_clips.is_multiple_of(8) {
            return Err(Error::config(format!(
                "number of clips must be a positive multiple of 8, got {}",
                self.num_clips
            )));
        }
        if self.num_clips > u32::MAX as usize / 4 {
            return Err(Error::config("number of clips is too large"));
        }
        if !(0.0..1.0).contains(&self.t_min) || !(self.t_max > self.t_min && self.t_max <= 1.0) {
            return Err(Error::config(format!(
                "label thresholds need 0 <= t_min < t_max <= 1, got t_min={} t_max={}",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    pub fn num_clips(&self) -> usize {
        self.num_clips
    }

    /// Longest short proposal, `N/4`.
    pub fn short_bound(&self) -> usize {
        self.num_clips / 4
    }

    /// Longest medium proposal, `N/2`.
    pub fn medium_bound(&self) -> usize {
        self.num_clips / 2
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn bin_of(&self, len: usize) -> Bin {
        if len <= self.short_bound() {
            Bin::Short
        } else if len <= self.medium_bound() {
            Bin::Medium
        } else {
            Bin::Long
        }
    }

    fn check_index(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.num_clips || j >= self.num_clips {
            return Err(Error::Index(format!(
                "map coordinate ({i}, {j}) outside 0..{}",
                self.num_clips
            )));
        }
        Ok(())
    }

    fn is_candidate(&self, i: usize, j: usize) -> bool {
        if j < i {
            return false;
        }
        let s = self.bin_of(j - i + 1).stride();
        i.is_multiple_of(s) && (j + 1).is_multiple_of(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bin {
    Short,
    Medium,
    Long,
}

impl Bin {
    pub const ALL: [Bin; 3] = [Bin::Short, Bin::Medium, Bin::Long];

    pub fn stride(self) -> usize {
        match self {
            Bin::Short => 1,
            Bin::Medium => MEDIUM_STRIDE,
            Bin::Long => LONG_STRIDE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Bin::Short => "short",
            Bin::Medium => "medium",
            Bin::Long => "long",
        }
    }
}

impl fmt::Display for Bin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A proposal spanning clips `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MapCoord {
    pub start: usize,
    pub end: usize,
}

impl MapCoord {
    pub fn new(start: usize, end: usize) -> Self {
        MapCoord { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, other: &MapCoord) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

pub fn is_valid_candidate(cfg: &SamplingConfig, i: usize, j: usize) -> Result<bool> {
    cfg.check_index(i, j)?;
    Ok(cfg.is_candidate(i, j))
}

/// All candidates ordered by length, then start.
pub fn enumerate_candidates(cfg: &SamplingConfig) -> Vec<MapCoord> {
    let n = cfg.num_clips;
    let mut out = Vec::new();
    for len in 1..=n {
        for i in 0..=n - len {
            let j = i + len - 1;
            if cfg.is_candidate(i, j) {
                out.push(MapCoord::new(i, j));
            }
        }
    }
    out
}

/// Number of candidates per bin, in [`Bin::ALL`] order.
pub fn candidate_counts(cfg: &SamplingConfig) -> [usize; 3] {
    let mut counts = [0; 3];
    for c in enumerate_candidates(cfg) {
        counts[cfg.bin_of(c.len()) as usize] += 1;
    }
    counts
}

/// Number of max layers in the stacked pooling scheme.
///
/// `N/4 - 1` window-2 layers, then `N/8` stride-2 layers and `N/8` stride-4
/// layers, so 127 at `N = 256`.
pub fn pooling_layer_count(cfg: &SamplingConfig) -> usize {
    let sb = cfg.short_bound();
    let mb = cfg.medium_bound();
    (sb - 1) + (mb - sb) / MEDIUM_STRIDE + (cfg.num_clips - mb) / LONG_STRIDE
}

/// `N x N` candidate mask, stored row-major by `(start, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    n: usize,
    cells: Vec<bool>,
}

impl ValidityMask {
    pub fn for_config(cfg: &SamplingConfig) -> Self {
        let n = cfg.num_clips;
        let cells = (0..n * n).map(|k| cfg.is_candidate(k / n, k % n)).collect();
        ValidityMask { n, cells }
    }

    /// Candidates of a single length bin.
    pub fn for_bin(cfg: &SamplingConfig, bin: Bin) -> Self {
        let mut mask = Self::for_config(cfg);
        let n = mask.n;
        for (k, cell) in mask.cells.iter_mut().enumerate() {
            let (i, j) = (k / n, k % n);
            if *cell && cfg.bin_of(j - i + 1) != bin {
                *cell = false;
            }
        }
        mask
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && self.cells[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// `N x N x H` proposal features; invalid cells hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFeatureMap {
    values: Tensor,
    mask: ValidityMask,
}

impl TemporalFeatureMap {
    pub fn new(values: Tensor, mask: ValidityMask) -> Result<Self> {
        let n = mask.size();
        if values.rank() != 3 || values.shape()[0] != n || values.shape()[1] != n {
            return Err(Error::shape(format!(
                "feature map must be {n} x {n} x H, got {:?}",
                values.shape()
            )));
        }
        Ok(TemporalFeatureMap { values, mask })
    }

    pub fn num_clips(&self) -> usize {
        self.mask.size()
    }

    pub fn hidden(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let h = self.hidden();
        let k = (i * self.num_clips() + j) * h;
        &self.values.data()[k..k + h]
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

fn check_projected(cfg: &SamplingConfig, projected: &Tensor) -> Result<usize> {
    cfg.validate()?;
    if projected.rank() != 2 || projected.shape()[0] != cfg.num_clips {
        return Err(Error::shape(format!(
            "projected clip features must be {} x H, got {:?}",
            cfg.num_clips,
            projected.shape()
        )));
    }
    if !projected.is_finite() {
        return Err(Error::shape(
            "projected clip features contain non-finite values",
        ));
    }
    Ok(projected.shape()[1])
}

/// Stacked max pooling that also records, for every output element, the flat
/// index (`row * H + channel`) of the input element it came from.
///
/// Returns the `N x N x H` map and the source table ([`NO_SOURCE`] at invalid
/// cells). Ties keep the earlier operand.
pub fn stacked_pool_with_sources(
    cfg: &SamplingConfig,
    projected: &Tensor,
) -> Result<(Tensor, Vec<u32>)> {
    let h = check_projected(cfg, projected)?;
    let n = cfg.num_clips;
    let mut map = Tensor::zeros(&[n, n, h]);
    let mut sources = vec![NO_SOURCE; n * n * h];

    // level[i] holds the pooled features of the span of the current length
    // starting at clip i
    let mut level: Vec<f64> = projected.data().to_vec();
    let mut level_src: Vec<u32> = (0..(n * h) as u32).collect();

    let mut emit = |len: usize, start: usize, level: &[f64], src: &[u32]| {
        let j = start + len - 1;
        let dst = (start * n + j) * h;
        map.data_mut()[dst..dst + h].copy_from_slice(&level[start * h..(start + 1) * h]);
        sources[dst..dst + h].copy_from_slice(&src[start * h..(start + 1) * h]);
    };

    // combines spans starting at i and i + offset, in place, for starts on the grid
    let step = |level: &mut [f64], src: &mut [u32], len: usize, offset: usize, grid: usize| {
        for i in (0..=n - len).step_by(grid) {
            for c in 0..h {
                let a = i * h + c;
                let b = (i + offset) * h + c;
                if level[b] > level[a] {
                    level[a] = level[b];
                    src[a] = src[b];
                }
            }
        }
    };

    for i in 0..n {
        emit(1, i, &level, &level_src);
    }
    for len in 2..=cfg.short_bound() {
        step(&mut level, &mut level_src, len, 1, 1);
        for i in 0..=n - len {
            emit(len, i, &level, &level_src);
        }
    }
    let mut len = cfg.short_bound();
    while len < cfg.medium_bound() {
        len += MEDIUM_STRIDE;
        step(
            &mut level,
            &mut level_src,
            len,
            MEDIUM_STRIDE,
            MEDIUM_STRIDE,
        );
        for i in (0..=n - len).step_by(MEDIUM_STRIDE) {
            emit(len, i, &level, &level_src);
        }
    }
    while len < n {
        len += LONG_STRIDE;
        step(&mut level, &mut level_src, len, LONG_STRIDE, LONG_STRIDE);
        for i in (0..=n - len).step_by(LONG_STRIDE) {
            emit(len, i, &level, &level_src);
        }
    }
    Ok((map, sources))
}

/// Builds the proposal feature map by stacked max pooling over projected clips.
pub fn build_map_stacked_pool(
    cfg: &SamplingConfig,
    projected: &Tensor,
) -> Result<TemporalFeatureMap> {
    let (values, _) = stacked_pool_with_sources(cfg, projected)?;
    TemporalFeatureMap::new(values, ValidityMask::for_config(cfg))
}

/// `(rows, cols)` of the short, medium and long compact maps.
pub fn compact_shapes(cfg: &SamplingConfig) -> [(usize, usize); 3] {
    let n = cfg.num_clips;
    [(n, n), (3 * n / 8, 3 * n / 8), (n / 8, n / 8)]
}

/// Compact position of a candidate within its bin's sub-map.
pub fn to_compact(cfg: &SamplingConfig, coord: MapCoord) -> Result<(Bin, usize, usize)> {
    if !is_valid_candidate(cfg, coord.start, coord.end)? {
        return Err(Error::Index(format!(
            "({}, {}) is not a candidate",
            coord.start, coord.end
        )));
    }
    let bin = cfg.bin_of(coord.len());
    let s = bin.stride();
    Ok(match bin {
        Bin::Short => (bin, coord.start, coord.end),
        _ => (
            bin,
            coord.start / s,
            (coord.end + 1) / s - 1 - cfg.num_clips / 8,
        ),
    })
}

/// Full-map candidate stored at compact cell `(u, w)` of `bin`, if any.
pub fn from_compact(cfg: &SamplingConfig, bin: Bin, u: usize, w: usize) -> Option<MapCoord> {
    let n = cfg.num_clips;
    let (i, j) = match bin {
        Bin::Short => (u, w),
        _ => {
            let s = bin.stride();
            (s * u, s * (w + n / 8 + 1) - 1)
        }
    };
    (i < n && j < n && cfg.is_candidate(i, j) && cfg.bin_of(j - i + 1) == bin)
        .then_some(MapCoord::new(i, j))
}

/// Index tables between the full map and one compact sub-map.
#[derive(Debug, Clone, PartialEq)]
pub struct BinLayout {
    pub bin: Bin,
    pub rows: usize,
    pub cols: usize,
    /// Per compact cell: validity.
    pub mask: Vec<bool>,
    /// Per compact cell: flat full-map cell index, or [`NO_SOURCE`].
    pub full_of_compact: Vec<u32>,
    /// Per full-map cell: flat compact cell index, or [`NO_SOURCE`].
    pub compact_of_full: Vec<u32>,
}

impl BinLayout {
    pub fn new(cfg: &SamplingConfig, bin: Bin) -> Self {
        let n = cfg.num_clips;
        let (rows, cols) = compact_shapes(cfg)[bin as usize];
        let mut mask = vec![false; rows * cols];
        let mut full_of_compact = vec![NO_SOURCE; rows * cols];
        let mut compact_of_full = vec![NO_SOURCE; n * n];
        for u in 0..rows {
            for w in 0..cols {
                if let Some(c) = from_compact(cfg, bin, u, w) {
                    let ck = u * cols + w;
                    let fk = c.start * n + c.end;
                    mask[ck] = true;
                    full_of_compact[ck] = fk as u32;
                    compact_of_full[fk] = ck as u32;
                }
            }
        }
        BinLayout {
            bin,
            rows,
            cols,
            mask,
            full_of_compact,
            compact_of_full,
        }
    }

    pub fn valid_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Layouts for all three bins.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactLayout {
    pub num_clips: usize,
    pub bins: [BinLayout; 3],
}

impl CompactLayout {
    pub fn new(cfg: &SamplingConfig) -> Self {
        CompactLayout {
            num_clips: cfg.num_clips,
            bins: Bin::ALL.map(|b| BinLayout::new(cfg, b)),
        }
    }

    pub fn bin(&self, bin: Bin) -> &BinLayout {
        &self.bins[bin as usize]
    }
}

/// One bin's compact features with its mask and coordinate records.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactMap {
    pub bin: Bin,
    pub values: Tensor,
    pub mask: Vec<bool>,
    /// Full-map coordinate represented by each compact cell.
    pub coords: Vec<Option<MapCoord>>,
}

impl CompactMap {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn cell(&self, u: usize, w: usize) -> &[f64] {
        let h = self.values.shape()[2];
        let k = (u * self.cols() + w) * h;
        &self.values.data()[k..k + h]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactMaps {
    pub short: CompactMap,
    pub medium: CompactMap,
    pub long: CompactMap,
}

impl CompactMaps {
    pub fn get(&self, bin: Bin) -> &CompactMap {
        match bin {
            Bin::Short => &self.short,
            Bin::Medium => &self.medium,
            Bin::Long => &self.long,
        }
    }

    pub fn get_mut(&mut self, bin: Bin) -> &mut CompactMap {
        match bin {
            Bin::Short => &mut self.short,
            Bin::Medium => &mut self.medium,
            Bin::Long => &mut self.long,
        }
    }
}

/// Splits a full map into the three compact sub-maps.
pub fn rearrange(cfg: &SamplingConfig, map: &TemporalFeatureMap) -> Result<CompactMaps> {
    cfg.validate()?;
    let n = cfg.num_clips;
    if map.num_clips() != n {
        return Err(Error::shape(format!(
            "map has {} clips, config expects {}",
            map.num_clips(),
            n
        )));
    }
    let h = map.hidden();
    let src = map.values().data();
    let build = |bin: Bin| {
        let layout = BinLayout::new(cfg, bin);
        let mut values = Tensor::zeros(&[layout.rows, layout.cols, h]);
        let mut coords = vec![None; layout.rows * layout.cols];
        for (ck, &fk) in layout.full_of_compact.iter().enumerate() {
            if fk == NO_SOURCE {
                continue;
            }
            let fk = fk as usize;
            values.data_mut()[ck * h..(ck + 1) * h].copy_from_slice(&src[fk * h..(fk + 1) * h]);
            coords[ck] = Some(MapCoord::new(fk / n, fk % n));
        }
        CompactMap {
            bin,
            values,
            mask: layout.mask,
            coords,
        }
    };
    Ok(CompactMaps {
        short: build(Bin::Short),
        medium: build(Bin::Medium),
        long: build(Bin::Long),
    })
}

/// Writes every valid compact cell back to its full-map position.
pub fn recover(cfg: &SamplingConfig, compact: &CompactMaps) -> Result<TemporalFeatureMap> {
    cfg.validate()?;
    let n = cfg.num_clips;
    let shapes = compact_shapes(cfg);
    let h = compact.short.values.shape().get(2).copied().unwrap_or(0);
    for bin in Bin::ALL {
        let m = compact.get(bin);
        let (rows, cols) = shapes[bin as usize];
        if m.values.shape() != [rows, cols, h] {
            return Err(Error::shape(format!(
                "{bin} compact map should be {rows} x {cols} x {h}, got {:?}",
                m.values.shape()
            )));
        }
    }
    let mut values = Tensor::zeros(&[n, n, h]);
    for bin in Bin::ALL {
        let layout = BinLayout::new(cfg, bin);
        let src = compact.get(bin).values.data();
        for (ck, &fk) in layout.full_of_compact.iter().enumerate() {
            if fk == NO_SOURCE {
                continue;
            }
            let fk = fk as usize;
            values.data_mut()[fk * h..(fk + 1) * h].copy_from_slice(&src[ck * h..(ck + 1) * h]);
        }
    }
    TemporalFeatureMap::new(values, ValidityMask::for_config(cfg))
}
