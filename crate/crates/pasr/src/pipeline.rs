//! Dataset ingestion, filtering, sequence construction, splitting,
//! synthetic data generation and the training loop.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use chrono::DateTime;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::autodiff::Adam;
use crate::config::{KnnAnchor, RunConfig, SamplerKind};
use crate::error::{PasrError, Result};
use crate::geocode::GeoCoordinate;
use crate::model::Pasr;
use crate::sampling::{KnnIndex, NegativeSampler, PopularityTable};

/// One user behavior record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckIn {
    pub user: usize,
    pub timestamp: i64,
    pub coord: GeoCoordinate,
    pub location: usize,
}

/// Dense location registry. Internal ids are 1-based; id 0 is the
/// padding id and never maps to a real location.
#[derive(Debug, Clone)]
pub struct LocationTable {
    coords: Vec<GeoCoordinate>,
    counts: Vec<u64>,
}

impl LocationTable {
    pub fn from_coords(coords: Vec<GeoCoordinate>) -> Self {
        let n = coords.len();
        let mut all = Vec::with_capacity(n + 1);
        all.push(GeoCoordinate::new(0.0, 0.0).unwrap()); // pad slot
        all.extend(coords);
        Self { coords: all, counts: vec![0; n + 1] }
    }

    pub fn num_locations(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn coord(&self, id: usize) -> GeoCoordinate {
        self.coords[id]
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn all_coords(&self) -> &[GeoCoordinate] {
        &self.coords[1..]
    }

    fn tally(&mut self, users: &[Vec<CheckIn>]) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        for seq in users {
            for ci in seq {
                self.counts[ci.location] += 1;
            }
        }
    }
}

/// Chronologically sorted check-ins grouped per user.
#[derive(Debug, Clone)]
pub struct CheckInDataset {
    pub users: Vec<Vec<CheckIn>>,
    pub table: LocationTable,
    pub provenance: u64,
    pub malformed_rows: usize,
}

impl CheckInDataset {
    pub fn num_checkins(&self) -> usize {
        self.users.iter().map(Vec::len).sum()
    }

    pub fn summary(&self) -> String {
        format!(
            "locations\t{}\nusers\t{}\ncheck-ins\t{}\n",
            self.table.num_locations(),
            self.users.len(),
            self.num_checkins()
        )
    }
}

fn parse_timestamp(field: &str) -> Option<i64> {
    if let Ok(epoch) = field.parse::<i64>() {
        return Some(epoch);
    }
    DateTime::parse_from_rfc3339(field).ok().map(|dt| dt.timestamp())
}

/// Parse a Gowalla-style tab-separated check-in file:
/// `user_id  timestamp  latitude  longitude  location_id`, where the
/// timestamp is ISO-8601 UTC or epoch seconds. Malformed rows are
/// counted and skipped.
pub fn ingest(path: &Path) -> Result<CheckInDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PasrError::Input(format!("cannot read {}: {e}", path.display())))?;
    ingest_str(&text)
}

pub fn ingest_str(text: &str) -> Result<CheckInDataset> {
    let mut user_ids: HashMap<String, usize> = HashMap::new();
    let mut loc_ids: HashMap<String, usize> = HashMap::new();
    let mut coords: Vec<GeoCoordinate> = Vec::new();
    let mut users: Vec<Vec<CheckIn>> = Vec::new();
    let mut malformed = 0usize;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parsed = (|| -> Option<CheckIn> {
            if fields.len() != 5 {
                return None;
            }
            let ts = parse_timestamp(fields[1].trim())?;
            let lat: f64 = fields[2].trim().parse().ok()?;
            let lon: f64 = fields[3].trim().parse().ok()?;
            let coord = GeoCoordinate::new(lat, lon).ok()?;
            let next_user = user_ids.len();
            let user = *user_ids.entry(fields[0].trim().to_string()).or_insert(next_user);
            let next_loc = loc_ids.len() + 1;
            let location = *loc_ids.entry(fields[4].trim().to_string()).or_insert(next_loc);
            if location > coords.len() {
                coords.push(coord);
            }
            Some(CheckIn { user, timestamp: ts, coord, location })
        })();
        match parsed {
            Some(ci) => {
                if ci.user == users.len() {
                    users.push(Vec::new());
                }
                users[ci.user].push(ci);
            }
            None => malformed += 1,
        }
    }
    if users.is_empty() {
        return Err(PasrError::Input("no valid check-in rows".into()));
    }
    for seq in &mut users {
        seq.sort_by_key(|ci| ci.timestamp); // stable within equal timestamps
    }
    let mut hasher = DefaultHasher::new();
    text.hash(&mut hasher);
    let mut table = LocationTable::from_coords(coords);
    table.tally(&users);
    Ok(CheckInDataset { users, table, provenance: hasher.finish(), malformed_rows: malformed })
}

/// Remove under-visited locations, then under-active users: one pass
/// each, in that order. Location ids are re-densified afterwards.
pub fn filter_dataset(ds: &CheckInDataset, min_user_checkins: usize, min_loc_visits: usize) -> Result<CheckInDataset> {
    let keep_loc: HashSet<usize> = (1..=ds.table.num_locations())
        .filter(|&id| ds.table.count(id) >= min_loc_visits as u64)
        .collect();
    let mut remap: HashMap<usize, usize> = HashMap::new();
    let mut coords = Vec::new();
    for id in 1..=ds.table.num_locations() {
        if keep_loc.contains(&id) {
            coords.push(ds.table.coord(id));
            remap.insert(id, coords.len());
        }
    }
    let mut users: Vec<Vec<CheckIn>> = Vec::new();
    for seq in &ds.users {
        let kept: Vec<CheckIn> = seq
            .iter()
            .filter(|ci| keep_loc.contains(&ci.location))
            .map(|ci| CheckIn { location: remap[&ci.location], user: users.len(), ..*ci })
            .collect();
        if kept.len() >= min_user_checkins {
            users.push(kept);
        }
    }
    if users.is_empty() {
        return Err(PasrError::Input("filtering removed every user".into()));
    }
    let mut table = LocationTable::from_coords(coords);
    table.tally(&users);
    Ok(CheckInDataset { users, table, provenance: ds.provenance, malformed_rows: ds.malformed_rows })
}

/// One training chunk: at most m check-ins; step t is supervised with
/// target step t+1.
#[derive(Debug, Clone)]
pub struct TrainSequence {
    pub user: usize,
    pub steps: Vec<(usize, GeoCoordinate)>,
}

/// Held-out evaluation case for one user.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub user: usize,
    /// Most recent <= m training records.
    pub history: Vec<(usize, GeoCoordinate)>,
    pub target: (usize, GeoCoordinate),
    /// 100 sampled negative candidate ids (target excluded).
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub cases: Vec<EvalCase>,
}

#[derive(Debug, Clone)]
pub struct BuiltSequences {
    pub train: Vec<TrainSequence>,
    pub eval: EvalSplit,
    pub skipped_users: usize,
}

/// Split ds into training chunks and the leave-one-out eval split.
///
/// The eval target is each user's last check-in at a location unvisited
/// before that moment; records after it are dropped. Training chunks
/// are cut right-to-left, non-overlapping, length m; chunks shorter
/// than 2 are dropped. Eval negatives are drawn uniformly (seeded)
/// from all locations except the target.
pub fn build_sequences(ds: &CheckInDataset, m: usize, eval_neg_count: usize, seed: u64) -> BuiltSequences {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed_ca5e);
    let q = ds.table.num_locations();
    let mut train = Vec::new();
    let mut cases = Vec::new();
    let mut skipped = 0usize;
    for (user, seq) in ds.users.iter().enumerate() {
        if seq.len() < 2 {
            skipped += 1;
            continue;
        }
        // last check-in at a location not seen earlier in the sequence
        let mut test_idx = None;
        let mut seen: HashSet<usize> = HashSet::new();
        let mut first_visit = vec![false; seq.len()];
        for (i, ci) in seq.iter().enumerate() {
            first_visit[i] = seen.insert(ci.location);
        }
        for i in (1..seq.len()).rev() {
            if first_visit[i] {
                test_idx = Some(i);
                break;
            }
        }
        let train_records: &[CheckIn] = match test_idx {
            Some(i) => &seq[..i],
            None => &seq[..],
        };
        // right-to-left non-overlapping chunks
        let mut end = train_records.len();
        while end > 0 {
            let start = end.saturating_sub(m);
            let chunk = &train_records[start..end];
            if chunk.len() >= 2 {
                train.push(TrainSequence {
                    user,
                    steps: chunk.iter().map(|ci| (ci.location, ci.coord)).collect(),
                });
            }
            end = start;
        }
        if let Some(i) = test_idx {
            if i >= 1 && q >= 2 {
                let hist_start = i.saturating_sub(m);
                let history: Vec<(usize, GeoCoordinate)> =
                    seq[hist_start..i].iter().map(|ci| (ci.location, ci.coord)).collect();
                let target = (seq[i].location, seq[i].coord);
                let mut negatives = Vec::with_capacity(eval_neg_count);
                while negatives.len() < eval_neg_count {
                    let cand = rng.gen_range(1..=q);
                    if cand != target.0 {
                        negatives.push(cand);
                    }
                }
                cases.push(EvalCase { user, history, target, negatives });
            }
        }
    }
    BuiltSequences { train, eval: EvalSplit { cases }, skipped_users: skipped }
}

/// Specification for the planted synthetic dataset.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub users: usize,
    pub locations: usize,
    pub clusters: usize,
    /// Fraction of consecutive moves that stay inside a cluster.
    pub locality: f64,
    pub checkins_per_user: usize,
    /// Probability of a uniform random teleport per step.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { users: 100, locations: 200, clusters: 10, locality: 0.9, checkins_per_user: 60, noise: 0.02 }
    }
}

/// Generate a clustered synthetic dataset with planted transitions.
///
/// Locations are placed in spatial clusters and chained into a single
/// global tour that stays inside a cluster for runs of about
/// 1/(1-locality) steps before hopping to the next cluster. Users walk
/// the tour from random offsets with a small teleport probability, so
/// both the sequential structure and the geography carry signal.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<CheckInDataset> {
    if spec.users == 0 || spec.locations < 2 || spec.clusters == 0 || spec.clusters > spec.locations {
        return Err(PasrError::Domain("infeasible synthetic spec".into()));
    }
    if !(0.0..=0.999).contains(&spec.locality) || !(0.0..=1.0).contains(&spec.noise) {
        return Err(PasrError::Domain("locality must be in [0, 1), noise in [0, 1]".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    // cluster centers on a rough grid with per-location jitter
    let mut coords: Vec<GeoCoordinate> = Vec::with_capacity(spec.locations);
    let mut cluster_of: Vec<usize> = Vec::with_capacity(spec.locations);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.clusters];
    for loc in 0..spec.locations {
        let cluster = loc % spec.clusters;
        let base_lat = 30.0 + 2.0 * (cluster / 4) as f64;
        let base_lon = -100.0 + 2.0 * (cluster % 4) as f64;
        let lat = base_lat + rng.gen_range(-0.05..0.05);
        let lon = base_lon + rng.gen_range(-0.05..0.05);
        coords.push(GeoCoordinate::new(lat, lon).unwrap());
        cluster_of.push(cluster);
        members[cluster].push(loc + 1); // 1-based ids
    }
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    // global tour: take runs of `run_len` unused members per cluster,
    // cycling the clusters round-robin
    let run_len = (1.0 / (1.0 - spec.locality)).round().max(1.0) as usize;
    let mut cursors = vec![0usize; spec.clusters];
    let mut tour: Vec<usize> = Vec::with_capacity(spec.locations);
    let mut cluster = 0usize;
    while tour.len() < spec.locations {
        let mut advanced = false;
        for _ in 0..spec.clusters {
            if cursors[cluster] < members[cluster].len() {
                let take = run_len.min(members[cluster].len() - cursors[cluster]);
                tour.extend_from_slice(&members[cluster][cursors[cluster]..cursors[cluster] + take]);
                cursors[cluster] += take;
                advanced = true;
                cluster = (cluster + 1) % spec.clusters;
                break;
            }
            cluster = (cluster + 1) % spec.clusters;
        }
        if !advanced {
            break;
        }
    }
    let mut tour_pos = vec![0usize; spec.locations + 1];
    for (i, &loc) in tour.iter().enumerate() {
        tour_pos[loc] = i;
    }
    let mut users: Vec<Vec<CheckIn>> = Vec::with_capacity(spec.users);
    for user in 0..spec.users {
        let mut pos = rng.gen_range(0..tour.len());
        let mut seq = Vec::with_capacity(spec.checkins_per_user);
        for step in 0..spec.checkins_per_user {
            if step > 0 {
                if rng.gen_bool(spec.noise) {
                    pos = rng.gen_range(0..tour.len());
                } else {
                    pos = (pos + 1) % tour.len();
                }
            }
            let loc = tour[pos];
            seq.push(CheckIn {
                user,
                timestamp: (user * spec.checkins_per_user + step) as i64,
                coord: coords[loc - 1],
                location: loc,
            });
        }
        users.push(seq);
    }
    let mut table = LocationTable::from_coords(coords);
    table.tally(&users);
    let mut hasher = DefaultHasher::new();
    (spec.users, spec.locations, spec.clusters, seed).hash(&mut hasher);
    Ok(CheckInDataset { users, table, provenance: hasher.finish(), malformed_rows: 0 })
}

/// Write a dataset back out in the Gowalla-style tab-separated format.
pub fn write_dataset(ds: &CheckInDataset, path: &Path) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    for seq in &ds.users {
        for ci in seq {
            writeln!(
                out,
                "u{}\t{}\t{}\t{}\tl{}",
                ci.user,
                ci.timestamp,
                ci.coord.lat(),
                ci.coord.lon(),
                ci.location
            )?;
        }
    }
    Ok(())
}

/// Per-epoch training log entry.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_secs: f64,
}

pub struct TrainOutcome {
    pub model: Pasr,
    pub log: Vec<EpochLog>,
}

/// Train a model on a built dataset. Deterministic under a fixed seed.
pub fn train(cfg: &RunConfig, ds: &CheckInDataset, sequences: &[TrainSequence]) -> Result<TrainOutcome> {
    cfg.model.validate()?;
    let mut model = Pasr::new(cfg.model.clone(), &ds.table, cfg.seed)?;
    let q = ds.table.num_locations();
    let knn;
    let pop;
    let (knn_ref, pop_ref) = match cfg.model.sampler {
        SamplerKind::Uniform => (None, None),
        SamplerKind::KnnUniform => {
            knn = KnnIndex::build(&ds.table, cfg.model.knn)?;
            (Some(&knn), None)
        }
        SamplerKind::KnnPopularity => {
            knn = KnnIndex::build(&ds.table, cfg.model.knn)?;
            pop = PopularityTable::new(ds.table.counts().to_vec());
            (Some(&knn), Some(&pop))
        }
    };
    let sampler = NegativeSampler::new(cfg.model.sampler, q, knn_ref, pop_ref)?;
    let mut optimizer = Adam::new(&model.params, cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut rng = StdRng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut step_count = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let batch_seqs: Vec<&TrainSequence> = batch.iter().map(|&i| &sequences[i]).collect();
            // fresh negatives per step, per epoch
            let mut negatives = Vec::with_capacity(batch_seqs.len());
            for seq in &batch_seqs {
                let mut per_step = Vec::with_capacity(seq.steps.len().saturating_sub(1));
                for t in 0..seq.steps.len().saturating_sub(1) {
                    let anchor = match cfg.model.knn_anchor {
                        KnnAnchor::NextLocation => seq.steps[t + 1].0,
                        KnnAnchor::InputLocation => seq.steps[t].0,
                    };
                    let mut draws = sampler.sample(anchor, cfg.model.neg_count, &mut rng)?;
                    // the draw must not equal the step's positive target
                    let positive = seq.steps[t + 1].0;
                    for d in draws.iter_mut() {
                        while d.location_id == positive {
                            *d = sampler.sample(anchor, 1, &mut rng)?[0];
                        }
                    }
                    per_step.push(draws);
                }
                negatives.push(per_step);
            }
            let (loss, steps) = model.train_batch(&batch_seqs, &negatives, &mut optimizer)?;
            if !loss.is_finite() {
                return Err(PasrError::Domain(format!("training diverged at epoch {epoch}: loss {loss}")));
            }
            loss_sum += loss * steps as f64;
            step_count += steps;
        }
        let mean_loss = if step_count > 0 { loss_sum / step_count as f64 } else { 0.0 };
        log.push(EpochLog { epoch, mean_loss, wall_secs: started.elapsed().as_secs_f64() });
    }
    Ok(TrainOutcome { model, log })
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut out = String::new();
    for e in log {
        out.push_str(&format!("{}\t{:.6}\t{:.3}\n", e.epoch, e.mean_loss, e.wall_secs));
    }
    out
}
