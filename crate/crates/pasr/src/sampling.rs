//! Spatial kNN index over locations and the three negative samplers.
//!
//! Distances are haversine great-circle kilometers. Neighbor lists are
//! precomputed by exhaustive pairwise scan; at desk scale (a few
//! thousand locations) this is faster to build and verify than a tree.
//! Ties break by ascending location id so builds are deterministic.

use rand::Rng;

use crate::config::SamplerKind;
use crate::error::{PasrError, Result};
use crate::geocode::GeoCoordinate;
use crate::pipeline::LocationTable;

const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in kilometers.
pub fn haversine_km(a: &GeoCoordinate, b: &GeoCoordinate) -> f64 {
    let (lat1, lon1) = (a.lat().to_radians(), a.lon().to_radians());
    let (lat2, lon2) = (b.lat().to_radians(), b.lon().to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Precomputed K-nearest-neighbor lists, indexed by location id
/// (ids are 1-based; slot 0 is the padding id and stays empty).
#[derive(Debug, Clone)]
pub struct KnnIndex {
    neighbors: Vec<Vec<u32>>,
    k: usize,
}

impl KnnIndex {
    /// Exhaustive build: for every location the true K nearest others,
    /// sorted ascending by distance, ties by id.
    pub fn build(table: &LocationTable, k: usize) -> Result<Self> {
        let q = table.num_locations();
        if q < 2 {
            return Err(PasrError::Domain("kNN index needs at least 2 locations".into()));
        }
        let mut neighbors = vec![Vec::new(); q + 1];
        for id in 1..=q {
            let here = table.coord(id);
            let mut dists: Vec<(f64, u32)> = (1..=q)
                .filter(|&other| other != id)
                .map(|other| (haversine_km(&here, &table.coord(other)), other as u32))
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            dists.truncate(k);
            neighbors[id] = dists.into_iter().map(|(_, i)| i).collect();
        }
        Ok(Self { neighbors, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors_of(&self, id: usize) -> &[u32] {
        &self.neighbors[id]
    }

    pub fn num_locations(&self) -> usize {
        self.neighbors.len() - 1
    }
}

/// Per-location visit counts with the ln(c+1) proposal weights.
#[derive(Debug, Clone)]
pub struct PopularityTable {
    counts: Vec<u64>,
    log1p_counts: Vec<f64>,
}

impl PopularityTable {
    /// `counts[id]` for ids 1..=Q; slot 0 is padding.
    pub fn new(counts: Vec<u64>) -> Self {
        let log1p_counts = counts.iter().map(|&c| ((c + 1) as f64).ln()).collect();
        Self { counts, log1p_counts }
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    /// Unnormalized proposal mass ln(c_l + 1).
    pub fn weight(&self, id: usize) -> f64 {
        self.log1p_counts[id]
    }

    pub fn num_locations(&self) -> usize {
        self.counts.len() - 1
    }
}

/// One sampled negative with its unnormalized proposal log-mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeDraw {
    pub location_id: usize,
    pub log_q: f64,
}

/// Negative sampler over a fixed location universe.
pub struct NegativeSampler<'a> {
    kind: SamplerKind,
    num_locations: usize,
    knn: Option<&'a KnnIndex>,
    popularity: Option<&'a PopularityTable>,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(
        kind: SamplerKind,
        num_locations: usize,
        knn: Option<&'a KnnIndex>,
        popularity: Option<&'a PopularityTable>,
    ) -> Result<Self> {
        match kind {
            SamplerKind::Uniform => {}
            SamplerKind::KnnUniform => {
                if knn.is_none() {
                    return Err(PasrError::Domain("knn-uniform sampler needs a kNN index".into()));
                }
            }
            SamplerKind::KnnPopularity => {
                if knn.is_none() || popularity.is_none() {
                    return Err(PasrError::Domain(
                        "knn-popularity sampler needs a kNN index and popularity table".into(),
                    ));
                }
            }
        }
        Ok(Self { kind, num_locations, knn, popularity })
    }

    /// Draw `count` negatives for the given positive target. Draws
    /// never equal the target; i.i.d. with replacement otherwise.
    pub fn sample(&self, target: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<NegativeDraw>> {
        if count == 0 {
            return Err(PasrError::Domain("sample count must be >= 1".into()));
        }
        match self.kind {
            SamplerKind::Uniform => {
                if self.num_locations < 2 {
                    return Err(PasrError::Domain("uniform sampler: empty candidate pool".into()));
                }
                let mut out = Vec::with_capacity(count);
                while out.len() < count {
                    let id = rng.gen_range(1..=self.num_locations);
                    if id != target {
                        out.push(NegativeDraw { location_id: id, log_q: 0.0 });
                    }
                }
                Ok(out)
            }
            SamplerKind::KnnUniform => {
                let pool: Vec<u32> = self
                    .knn
                    .unwrap()
                    .neighbors_of(target)
                    .iter()
                    .copied()
                    .filter(|&id| id as usize != target)
                    .collect();
                if pool.is_empty() {
                    return Err(PasrError::Domain("knn-uniform sampler: empty candidate pool".into()));
                }
                Ok((0..count)
                    .map(|_| {
                        let id = pool[rng.gen_range(0..pool.len())] as usize;
                        NegativeDraw { location_id: id, log_q: 0.0 }
                    })
                    .collect())
            }
            SamplerKind::KnnPopularity => {
                let pop = self.popularity.unwrap();
                let pool: Vec<(u32, f64)> = self
                    .knn
                    .unwrap()
                    .neighbors_of(target)
                    .iter()
                    .copied()
                    .filter(|&id| id as usize != target)
                    .map(|id| (id, pop.weight(id as usize)))
                    .filter(|&(_, w)| w > 0.0)
                    .collect();
                if pool.is_empty() {
                    return Err(PasrError::Domain("knn-popularity sampler: empty candidate pool".into()));
                }
                let total: f64 = pool.iter().map(|&(_, w)| w).sum();
                let mut cumulative = Vec::with_capacity(pool.len());
                let mut acc = 0.0;
                for &(_, w) in &pool {
                    acc += w;
                    cumulative.push(acc);
                }
                Ok((0..count)
                    .map(|_| {
                        let u = rng.gen_range(0.0..total);
                        let idx = cumulative.partition_point(|&c| c <= u).min(pool.len() - 1);
                        let (id, w) = pool[idx];
                        NegativeDraw { location_id: id as usize, log_q: w.ln() }
                    })
                    .collect())
            }
        }
    }
}
