//! Patch-coordinate selection on score maps.
//!
//! Every strategy splits the map into `G` disjoint cells and selects exactly
//! `P / G` coordinates per cell, with pairwise Chebyshev distance of at least
//! `min_center_distance` across the whole map. Candidates that violate the
//! spacing are rejected and redrawn; each rejection counts against
//! `max_retries` for the cell.

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::ScoreMap;

const POOL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PooledMultinomial,
    Multinomial,
    TopP,
    ThreePRandom,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::PooledMultinomial,
        Strategy::Multinomial,
        Strategy::TopP,
        Strategy::ThreePRandom,
        Strategy::Random,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::PooledMultinomial => "pooled_multinomial",
            Strategy::Multinomial => "multinomial",
            Strategy::TopP => "top_p",
            Strategy::ThreePRandom => "three_p_random",
            Strategy::Random => "random",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .iter()
            .find(|st| st.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sampling strategy '{s}'")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Total patches per grid (`P`).
    pub patches: usize,
    /// Number of disjoint grid cells (`G`).
    pub grid_cells: usize,
    pub strategy: Strategy,
    /// Minimum Chebyshev distance between coordinates, in score-map pixels.
    pub min_center_distance: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            patches: 80,
            grid_cells: 4,
            strategy: Strategy::PooledMultinomial,
            min_center_distance: 3,
            max_retries: 256,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patches == 0 || self.grid_cells == 0 {
            return Err(Error::InvalidArgument(
                "patches and grid_cells must be at least 1".into(),
            ));
        }
        if !self.patches.is_multiple_of(self.grid_cells) {
            return Err(Error::InvalidArgument(format!(
                "grid_cells {} must divide patches {}",
                self.grid_cells, self.patches
            )));
        }
        Ok(())
    }

    pub fn per_cell(&self) -> usize {
        self.patches / self.grid_cells
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Axis-aligned rectangle of score-map pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Cell {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// Row-major coordinates inside the cell.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y0 + self.height)
            .flat_map(move |y| (self.x0..self.x0 + self.width).map(move |x| (x, y)))
    }
}

fn split(len: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let size = base + usize::from(i < extra);
        out.push((start, size));
        start += size;
    }
    out
}

/// Tiles an `h x w` map with `g = rows x cols` near-equal cells, row-major.
///
/// The factorization whose cells are closest to square is chosen; cell sides
/// differ by at most one pixel.
pub fn partition_cells(h: usize, w: usize, g: usize) -> Result<Vec<Cell>> {
    if g == 0 || g > h * w {
        return Err(Error::InvalidArgument(format!(
            "cannot split a {h}x{w} map into {g} cells"
        )));
    }
    let best = (1..=g)
        .filter(|r| g.is_multiple_of(*r) && *r <= h && g / r <= w)
        .min_by(|&a, &b| {
            let skew = |r: usize| {
                let cell_h = h as f64 / r as f64;
                let cell_w = w as f64 / (g / r) as f64;
                (cell_h / cell_w).ln().abs()
            };
            skew(a).total_cmp(&skew(b))
        })
        .ok_or_else(|| {
            Error::InvalidArgument(format!("no {g}-cell tiling fits a {h}x{w} map"))
        })?;
    let rows = split(h, best);
    let cols = split(w, g / best);
    Ok(rows
        .iter()
        .flat_map(|&(y0, height)| {
            cols.iter().map(move |&(x0, width)| Cell {
                x0,
                y0,
                width,
                height,
            })
        })
        .collect())
}

/// Categorical distribution over non-negative weights with removal.
struct WeightedPool {
    weights: Vec<f64>,
}

impl WeightedPool {
    fn new(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    fn positive(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        let total: f64 = self.weights.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut last = None;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > 0.0 {
                acc += w;
                last = Some(i);
                if u < acc {
                    return Some(i);
                }
            }
        }
        last
    }

    fn remove(&mut self, i: usize) {
        self.weights[i] = 0.0;
    }
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "weights must be finite and non-negative, found {w}"
        )));
    }
    Ok(())
}

/// Draws `k` distinct indices by sequential sampling from the renormalized
/// categorical distribution.
pub fn multinomial_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_weights(weights)?;
    let mut pool = WeightedPool::new(weights.to_vec());
    let available = pool.positive();
    if available < k {
        return Err(Error::InsufficientSupport {
            needed: k,
            available,
        });
    }
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let i = pool.draw(rng).expect("positive support remains");
        pool.remove(i);
        out.push(i);
    }
    Ok(out)
}

/// Zero-mass regions fall back to uniform: all-zero weights become uniform and
/// a shortfall of positive entries is filled uniformly from the zeros.
fn with_fallback(mut weights: Vec<f64>, needed: usize) -> Vec<f64> {
    let positive: Vec<f64> = weights.iter().copied().filter(|w| *w > 0.0).collect();
    if positive.is_empty() {
        weights.fill(1.0);
    } else if positive.len() < needed {
        let floor = positive.iter().copied().fold(f64::INFINITY, f64::min) * 1e-9;
        for w in weights.iter_mut().filter(|w| **w == 0.0) {
            *w = floor;
        }
    }
    weights
}

/// One selected coordinate at score-map resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchCoord {
    pub x: usize,
    pub y: usize,
    /// Index of the grid cell the coordinate was drawn in.
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchCoordinates {
    pub coords: Vec<PatchCoord>,
    pub cells: Vec<Cell>,
}

impl PatchCoordinates {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Smallest pairwise Chebyshev distance, `None` for fewer than two points.
    pub fn min_chebyshev(&self) -> Option<usize> {
        let mut best = None;
        for (i, a) in self.coords.iter().enumerate() {
            for b in &self.coords[i + 1..] {
                let d = a.x.abs_diff(b.x).max(a.y.abs_diff(b.y));
                best = Some(best.map_or(d, |m: usize| m.min(d)));
            }
        }
        best
    }

    pub fn per_cell_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.cells.len()];
        for c in &self.coords {
            counts[c.cell] += 1;
        }
        counts
    }

    /// Writes `t,x_sc,y_sc,score` rows.
    pub fn write_csv<W: Write>(&self, w: &mut W, t: i64, score: &ScoreMap, header: bool) -> Result<()> {
        if header {
            writeln!(w, "t,x_sc,y_sc,score")?;
        }
        for c in &self.coords {
            writeln!(w, "{t},{},{},{}", c.x, c.y, score.get(c.x, c.y))?;
        }
        Ok(())
    }
}

struct Selection {
    accepted: Vec<PatchCoord>,
    min_distance: usize,
}

impl Selection {
    fn new(min_distance: usize) -> Self {
        Self {
            accepted: Vec::new(),
            min_distance,
        }
    }

    fn fits(&self, x: usize, y: usize) -> bool {
        self.accepted
            .iter()
            .all(|c| c.x.abs_diff(x).max(c.y.abs_diff(y)) >= self.min_distance)
    }
}

fn failure(cell: usize, reason: impl Into<String>) -> Error {
    Error::SamplingFailure {
        cell,
        reason: reason.into(),
    }
}

/// Multinomial draws over the cell's coordinates with spacing rejection.
fn sample_cell_multinomial<R: Rng + ?Sized>(
    score: &ScoreMap,
    cell_idx: usize,
    cell: &Cell,
    quota: usize,
    weighted: bool,
    max_retries: usize,
    sel: &mut Selection,
    rng: &mut R,
) -> Result<()> {
    let coords: Vec<(usize, usize)> = cell.coords().collect();
    let weights = if weighted {
        coords.iter().map(|&(x, y)| score.get(x, y)).collect()
    } else {
        vec![1.0; coords.len()]
    };
    check_weights(&weights)?;
    let mut pool = WeightedPool::new(with_fallback(weights, quota));
    let (mut taken, mut rejected) = (0, 0);
    while taken < quota {
        let i = pool
            .draw(rng)
            .ok_or_else(|| failure(cell_idx, "candidate pool exhausted"))?;
        pool.remove(i);
        let (x, y) = coords[i];
        if sel.fits(x, y) {
            sel.accepted.push(PatchCoord { x, y, cell: cell_idx });
            taken += 1;
        } else {
            rejected += 1;
            if rejected > max_retries {
                return Err(failure(cell_idx, "retry budget exhausted"));
            }
        }
    }
    Ok(())
}

/// 4x4 average pool of the score map.
pub fn pool_scores(score: &ScoreMap) -> Result<ScoreMap> {
    if !score.width.is_multiple_of(POOL) || !score.height.is_multiple_of(POOL) {
        return Err(Error::InvalidArgument(format!(
            "score map {}x{} must have sides divisible by {POOL}",
            score.width, score.height
        )));
    }
    let (pw, ph) = (score.width / POOL, score.height / POOL);
    let mut data = vec![0.0; pw * ph];
    for y in 0..score.height {
        for x in 0..score.width {
            data[(y / POOL) * pw + x / POOL] += score.get(x, y) / (POOL * POOL) as f64;
        }
    }
    ScoreMap::new(pw, ph, data)
}

/// Two-stage sampling: pooled windows without replacement, then one
/// coordinate per window from the unpooled scores.
pub fn pooled_multinomial_sample<R: Rng + ?Sized>(
    score: &ScoreMap,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PatchCoordinates> {
    cfg.validate()?;
    check_weights(&score.data)?;
    let pooled = pool_scores(score)?;
    let pooled_cells = partition_cells(pooled.height, pooled.width, cfg.grid_cells)?;
    let cells: Vec<Cell> = pooled_cells
        .iter()
        .map(|c| Cell {
            x0: c.x0 * POOL,
            y0: c.y0 * POOL,
            width: c.width * POOL,
            height: c.height * POOL,
        })
        .collect();
    let quota = cfg.per_cell();
    let mut sel = Selection::new(cfg.min_center_distance);
    for (ci, pcell) in pooled_cells.iter().enumerate() {
        let windows: Vec<(usize, usize)> = pcell.coords().collect();
        if windows.len() < quota {
            return Err(failure(
                ci,
                format!("{} pooled windows cannot hold {quota} patches", windows.len()),
            ));
        }
        let mut outer = WeightedPool::new(with_fallback(
            windows.iter().map(|&(x, y)| pooled.get(x, y)).collect(),
            quota,
        ));
        // per-window inner pools shrink as candidates are rejected
        let mut inner: Vec<Option<WeightedPool>> = (0..windows.len()).map(|_| None).collect();
        let (mut taken, mut rejected) = (0, 0);
        while taken < quota {
            let wi = outer
                .draw(rng)
                .ok_or_else(|| failure(ci, "pooled windows exhausted"))?;
            let (wx, wy) = windows[wi];
            let pool = inner[wi].get_or_insert_with(|| {
                let w: Vec<f64> = (0..POOL * POOL)
                    .map(|k| score.get(wx * POOL + k % POOL, wy * POOL + k / POOL))
                    .collect();
                WeightedPool::new(with_fallback(w, 1))
            });
            let Some(k) = pool.draw(rng) else {
                outer.remove(wi);
                continue;
            };
            let (x, y) = (wx * POOL + k % POOL, wy * POOL + k / POOL);
            if sel.fits(x, y) {
                sel.accepted.push(PatchCoord { x, y, cell: ci });
                outer.remove(wi);
                taken += 1;
            } else {
                pool.remove(k);
                if pool.positive() == 0 {
                    outer.remove(wi);
                }
                rejected += 1;
                if rejected > cfg.max_retries {
                    return Err(failure(ci, "retry budget exhausted"));
                }
            }
        }
    }
    Ok(PatchCoordinates {
        coords: sel.accepted,
        cells,
    })
}

/// Multinomial sampling over all coordinates of each cell.
pub fn multinomial_sample<R: Rng + ?Sized>(
    score: &ScoreMap,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PatchCoordinates> {
    per_cell_sampling(score, cfg, rng, true)
}

/// Uniform sampling with spacing; scores only provide the map shape.
pub fn random_sample<R: Rng + ?Sized>(
    score: &ScoreMap,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PatchCoordinates> {
    per_cell_sampling(score, cfg, rng, false)
}

fn per_cell_sampling<R: Rng + ?Sized>(
    score: &ScoreMap,
    cfg: &SamplerConfig,
    rng: &mut R,
    weighted: bool,
) -> Result<PatchCoordinates> {
    cfg.validate()?;
    let cells = partition_cells(score.height, score.width, cfg.grid_cells)?;
    let mut sel = Selection::new(cfg.min_center_distance);
    for (ci, cell) in cells.iter().enumerate() {
        sample_cell_multinomial(
            score,
            ci,
            cell,
            cfg.per_cell(),
            weighted,
            cfg.max_retries,
            &mut sel,
            rng,
        )?;
    }
    Ok(PatchCoordinates {
        coords: sel.accepted,
        cells,
    })
}

/// Greedy highest-score selection per cell; ties resolve in row-major order.
pub fn top_p_sample(score: &ScoreMap, cfg: &SamplerConfig) -> Result<PatchCoordinates> {
    cfg.validate()?;
    let cells = partition_cells(score.height, score.width, cfg.grid_cells)?;
    let quota = cfg.per_cell();
    let mut sel = Selection::new(cfg.min_center_distance);
    for (ci, cell) in cells.iter().enumerate() {
        let mut coords: Vec<(usize, usize)> = cell.coords().collect();
        // row-major order within a cell agrees with global row-major order
        coords.sort_by(|a, b| score.get(b.0, b.1).total_cmp(&score.get(a.0, a.1)));
        let mut taken = 0;
        for (x, y) in coords {
            if taken == quota {
                break;
            }
            if sel.fits(x, y) {
                sel.accepted.push(PatchCoord { x, y, cell: ci });
                taken += 1;
            }
        }
        if taken < quota {
            return Err(failure(ci, format!("only {taken} of {quota} spaced coordinates fit")));
        }
    }
    Ok(PatchCoordinates {
        coords: sel.accepted,
        cells,
    })
}

/// Evaluates `3 P/G` uniform candidates per cell and keeps the best `P/G`.
pub fn three_p_random_sample<R: Rng + ?Sized>(
    score: &ScoreMap,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PatchCoordinates> {
    cfg.validate()?;
    let cells = partition_cells(score.height, score.width, cfg.grid_cells)?;
    let quota = cfg.per_cell();
    let mut sel = Selection::new(cfg.min_center_distance);
    for (ci, cell) in cells.iter().enumerate() {
        let coords: Vec<(usize, usize)> = cell.coords().collect();
        if coords.len() < 3 * quota {
            return Err(Error::InvalidArgument(format!(
                "cell {ci} has {} coordinates, fewer than 3 * {quota}",
                coords.len()
            )));
        }
        let mut order: Vec<usize> = sample_indices(rng, coords.len(), coords.len()).into_vec();
        let rest = order.split_off(3 * quota);
        let mut candidates = order;
        candidates.sort_by(|&a, &b| {
            let (sa, sb) = (score.get(coords[a].0, coords[a].1), score.get(coords[b].0, coords[b].1));
            sb.total_cmp(&sa).then(a.cmp(&b))
        });
        let mut taken = 0;
        let mut rejected = 0;
        let mut extra = rest.into_iter();
        let mut queue = candidates.into_iter();
        while taken < quota {
            let i = match queue.next() {
                Some(i) => i,
                None => {
                    // candidates ran out under the spacing constraint
                    rejected += 1;
                    if rejected > cfg.max_retries {
                        return Err(failure(ci, "retry budget exhausted"));
                    }
                    extra
                        .next()
                        .ok_or_else(|| failure(ci, "candidate pool exhausted"))?
                }
            };
            let (x, y) = coords[i];
            if sel.fits(x, y) {
                sel.accepted.push(PatchCoord { x, y, cell: ci });
                taken += 1;
            }
        }
    }
    Ok(PatchCoordinates {
        coords: sel.accepted,
        cells,
    })
}

/// Dispatches on `cfg.strategy`.
pub fn sample<R: Rng + ?Sized>(
    score: &ScoreMap,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<PatchCoordinates> {
    match cfg.strategy {
        Strategy::PooledMultinomial => pooled_multinomial_sample(score, cfg, rng),
        Strategy::Multinomial => multinomial_sample(score, cfg, rng),
        Strategy::TopP => top_p_sample(score, cfg),
        Strategy::ThreePRandom => three_p_random_sample(score, cfg, rng),
        Strategy::Random => random_sample(score, cfg, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(strategy: Strategy, patches: usize, grid_cells: usize) -> SamplerConfig {
        SamplerConfig {
            patches,
            grid_cells,
            strategy,
            ..Default::default()
        }
    }

    fn random_map(seed: u64, w: usize, h: usize) -> ScoreMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScoreMap::new(w, h, (0..w * h).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_cell_covers_map() {
        let cells = partition_cells(10, 7, 1).unwrap();
        assert_eq!(cells, vec![Cell { x0: 0, y0: 0, width: 7, height: 10 }]);
    }

    #[test]
    fn two_by_two_on_square_map() {
        let cells = partition_cells(64, 64, 4).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|c| c.width == 32 && c.height == 32));
    }

    #[test]
    fn uneven_rows_differ_by_one() {
        let cells = partition_cells(65, 64, 4).unwrap();
        let mut rows: Vec<usize> = cells.iter().map(|c| c.height).collect();
        rows.dedup();
        assert_eq!(rows, vec![33, 32]);
        assert!(partition_cells(2, 2, 5).is_err());
    }

    #[test]
    fn cells_partition_exactly() {
        for (h, w, g) in [(17, 23, 6), (16, 16, 4), (9, 40, 8), (5, 5, 25)] {
            let cells = partition_cells(h, w, g).unwrap();
            let mut hits = vec![0; h * w];
            for c in &cells {
                for (x, y) in c.coords() {
                    hits[y * w + x] += 1;
                }
            }
            assert!(hits.iter().all(|&n| n == 1), "{h}x{w}/{g}");
        }
    }

    #[test]
    fn one_hot_weights_pick_that_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let idx = multinomial_without_replacement(&[0.0, 0.0, 2.0, 0.0], 1, &mut rng).unwrap();
            assert_eq!(idx, vec![2]);
        }
    }

    #[test]
    fn exhaustive_draw_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut idx = multinomial_without_replacement(&[1.0; 9], 9, &mut rng).unwrap();
        idx.sort();
        assert_eq!(idx, (0..9).collect::<Vec<_>>());
        assert!(matches!(
            multinomial_without_replacement(&[1.0, 0.0, 0.0], 2, &mut rng),
            Err(Error::InsufficientSupport { needed: 2, available: 1 })
        ));
    }

    #[test]
    fn mass_in_one_window_stays_there() {
        let mut data = vec![0.0; 16 * 16];
        for y in 8..12 {
            for x in 4..8 {
                data[y * 16 + x] = 0.5;
            }
        }
        let map = ScoreMap::new(16, 16, data).unwrap();
        let c = cfg(Strategy::PooledMultinomial, 1, 1);
        let mut rng = c.rng();
        for _ in 0..200 {
            let p = pooled_multinomial_sample(&map, &c, &mut rng).unwrap();
            let pc = p.coords[0];
            assert!((4..8).contains(&pc.x) && (8..12).contains(&pc.y));
        }
    }

    #[test]
    fn uniform_map_meets_cell_quota() {
        let map = ScoreMap::new(32, 32, vec![0.5; 1024]).unwrap();
        let c = cfg(Strategy::PooledMultinomial, 8, 4);
        let p = pooled_multinomial_sample(&map, &c, &mut c.rng()).unwrap();
        assert_eq!(p.per_cell_counts(), vec![2, 2, 2, 2]);
        for pc in &p.coords {
            assert!(p.cells[pc.cell].contains(pc.x, pc.y));
        }
    }

    #[test]
    fn top_p_picks_argmax_and_breaks_ties_row_major() {
        let mut map = random_map(3, 8, 8);
        map.data[27] = 5.0;
        let p = top_p_sample(&map, &cfg(Strategy::TopP, 1, 1)).unwrap();
        assert_eq!((p.coords[0].x, p.coords[0].y), (3, 3));
        map.data[27] = 7.0;
        map.data[12] = 7.0;
        let p = top_p_sample(&map, &cfg(Strategy::TopP, 1, 1)).unwrap();
        assert_eq!((p.coords[0].x, p.coords[0].y), (4, 1));
    }

    #[test]
    fn top_p_matches_greedy_oracle() {
        let map = random_map(5, 16, 16);
        let c = cfg(Strategy::TopP, 8, 4);
        let p = top_p_sample(&map, &c).unwrap();
        // oracle: repeatedly scan each cell for the best admissible coordinate
        let cells = partition_cells(16, 16, 4).unwrap();
        let mut chosen: Vec<(usize, usize)> = Vec::new();
        for cell in &cells {
            for _ in 0..2 {
                let mut best: Option<(f64, usize, usize)> = None;
                for y in cell.y0..cell.y0 + cell.height {
                    for x in cell.x0..cell.x0 + cell.width {
                        let ok = chosen
                            .iter()
                            .all(|&(cx, cy)| cx.abs_diff(x).max(cy.abs_diff(y)) >= 3);
                        let s = map.get(x, y);
                        if ok && best.is_none_or(|b| s > b.0) {
                            best = Some((s, x, y));
                        }
                    }
                }
                let b = best.unwrap();
                chosen.push((b.1, b.2));
            }
        }
        let got: Vec<(usize, usize)> = p.coords.iter().map(|c| (c.x, c.y)).collect();
        assert_eq!(got, chosen);
    }

    #[test]
    fn three_p_random_keeps_best_candidate() {
        let mut map = ScoreMap::new(4, 4, vec![0.1; 16]).unwrap();
        map.data[6] = 0.9;
        let c = cfg(Strategy::ThreePRandom, 1, 1);
        let mut rng = c.rng();
        let mut hits = 0;
        for _ in 0..500 {
            let p = three_p_random_sample(&map, &c, &mut rng).unwrap();
            if (p.coords[0].x, p.coords[0].y) == (2, 1) {
                hits += 1;
            }
        }
        // the 0.9 entry is kept whenever it is among the 3 candidates: P = 3/16
        assert!((hits as f64 / 500.0 - 3.0 / 16.0).abs() < 0.06);
        let small = ScoreMap::new(2, 1, vec![0.5; 2]).unwrap();
        assert!(three_p_random_sample(&small, &c, &mut rng).is_err());
    }

    #[test]
    fn seeded_strategies_are_reproducible() {
        let map = random_map(7, 32, 32);
        for s in Strategy::ALL {
            let c = cfg(s, 16, 4);
            let a = sample(&map, &c, &mut c.rng()).unwrap();
            let b = sample(&map, &c, &mut c.rng()).unwrap();
            assert_eq!(a, b, "{s}");
        }
    }

    #[test]
    fn tight_packing_terminates() {
        let map = ScoreMap::new(3, 3, vec![1.0; 9]).unwrap();
        let c = cfg(Strategy::Random, 1, 1);
        let p = random_sample(&map, &c, &mut c.rng()).unwrap();
        assert_eq!(p.len(), 1);
        // a 3x3 map cannot hold two spaced patches; must fail, not spin
        let c = cfg(Strategy::Random, 2, 1);
        assert!(matches!(
            random_sample(&map, &c, &mut c.rng()),
            Err(Error::SamplingFailure { cell: 0, .. })
        ));
    }

    #[test]
    fn scaling_leaves_top_p_unchanged() {
        let map = random_map(9, 16, 16);
        let scaled = ScoreMap::new(16, 16, map.data.iter().map(|v| v * 0.37).collect()).unwrap();
        let c = cfg(Strategy::TopP, 8, 4);
        assert_eq!(top_p_sample(&map, &c).unwrap(), top_p_sample(&scaled, &c).unwrap());
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("best".parse::<Strategy>().is_err());
    }
}
