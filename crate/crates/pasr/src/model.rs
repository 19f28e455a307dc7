//! The PASR network: 4-way embedding concatenation, positional
//! embeddings, an N-layer causal self-attention encoder, a geography
//! sub-encoder over geohash n-grams, a target-aware attention decoder,
//! and dot-product scoring.

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::autodiff::{causal_mask, Adam, Graph, ParamSet, Var};
use crate::config::ModelConfig;
use crate::error::{PasrError, Result};
use crate::geocode::{encode_geohash, ngram_tokenize, ngram_vocab_size};
use crate::gridmap::{fit_bounds, map_to_cell, RegionBounds};
use crate::objective::importance_weights;
use crate::pipeline::{LocationTable, TrainSequence};
use crate::sampling::NegativeDraw;

/// Sequential location recommender with geography-aware embeddings.
pub struct Pasr {
    pub config: ModelConfig,
    pub bounds: RegionBounds,
    pub params: ParamSet,
    /// Real-location coordinates, index 0 unused (padding id).
    coords: Vec<crate::geocode::GeoCoordinate>,
    /// Geohash n-gram token ids per location id; empty at the pad id.
    loc_tokens: Vec<Vec<usize>>,
    /// Grid (row, col) per location id, shifted by one so index 0 in
    /// the row/col embedding tables is a dedicated zero padding row.
    loc_cells: Vec<(usize, usize)>,
    num_locations: usize,
}

/// One candidate with its preference score, in rank order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedCandidate {
    pub location_id: usize,
    pub score: f64,
}

fn expected_shapes(config: &ModelConfig, num_locations: usize) -> Vec<(String, usize, usize)> {
    let w = config.width();
    let d = config.d;
    let mut shapes = vec![
        ("loc_embed".to_string(), num_locations + 1, d),
        ("pos_embed".to_string(), config.m, w),
    ];
    if config.use_geo_encoder {
        shapes.push(("geo_token_embed".to_string(), ngram_vocab_size(config.ngram), d));
        if config.geo_positional {
            shapes.push(("geo_pos_embed".to_string(), config.geohash_prefix_len - config.ngram + 1, d));
        }
    }
    if config.use_grid_mapper {
        shapes.push(("row_embed".to_string(), config.grid_intervals + 1, d));
        shapes.push(("col_embed".to_string(), config.grid_intervals + 1, d));
    }
    let mut stack = |prefix: &str, width: usize| {
        for l in 0..config.layers {
            for name in ["wq", "wk", "wv"] {
                shapes.push((format!("{prefix}{l}_{name}"), width, width));
            }
            shapes.push((format!("{prefix}{l}_ln1_gamma"), 1, width));
            shapes.push((format!("{prefix}{l}_ln1_beta"), 1, width));
            shapes.push((format!("{prefix}{l}_w1"), width, config.d_h));
            shapes.push((format!("{prefix}{l}_b1"), 1, config.d_h));
            shapes.push((format!("{prefix}{l}_w2"), config.d_h, width));
            shapes.push((format!("{prefix}{l}_b2"), 1, width));
            shapes.push((format!("{prefix}{l}_ln2_gamma"), 1, width));
            shapes.push((format!("{prefix}{l}_ln2_beta"), 1, width));
        }
    };
    stack("enc", w);
    if config.use_geo_encoder {
        stack("geo", d);
    }
    if config.use_target_decoder {
        shapes.push(("dec_w".to_string(), w, w));
    }
    shapes
}

impl Pasr {
    /// Freshly initialized model for a dataset's location table.
    pub fn new(config: ModelConfig, table: &LocationTable, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
        let mut params = ParamSet::new();
        for (name, rows, cols) in expected_shapes(&config, table.num_locations()) {
            let value = init_tensor(&name, rows, cols, &mut rng);
            params.add(&name, rows, cols, value);
        }
        Self::assemble(config, table, params)
    }

    /// Reattach loaded parameters to a location table; shapes must
    /// match the configuration exactly.
    pub fn with_params(config: ModelConfig, table: &LocationTable, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expect = expected_shapes(&config, table.num_locations());
        if params.len() != expect.len() {
            return Err(PasrError::Checkpoint(format!(
                "parameter count mismatch: {} tensors, expected {}",
                params.len(),
                expect.len()
            )));
        }
        for (name, rows, cols) in &expect {
            let pid = params
                .id_of(name)
                .ok_or_else(|| PasrError::Checkpoint(format!("missing parameter tensor {name}")))?;
            let p = params.get(pid);
            if p.rows != *rows || p.cols != *cols {
                return Err(PasrError::Checkpoint(format!(
                    "tensor {name} is {}x{}, expected {rows}x{cols}",
                    p.rows, p.cols
                )));
            }
        }
        Self::assemble(config, table, params)
    }

    fn assemble(config: ModelConfig, table: &LocationTable, params: ParamSet) -> Result<Self> {
        let bounds = fit_bounds(table.all_coords())?;
        let q = table.num_locations();
        let mut coords = Vec::with_capacity(q + 1);
        coords.push(table.coord(0));
        let mut loc_tokens = vec![Vec::new()];
        let mut loc_cells = vec![(0usize, 0usize)];
        for id in 1..=q {
            let c = table.coord(id);
            coords.push(c);
            let hash = encode_geohash(&c, config.geohash_prefix_len)?;
            let tokens = ngram_tokenize(&hash, config.ngram)?;
            loc_tokens.push(tokens.into_iter().map(|t| t as usize).collect());
            let cell = map_to_cell(&c, &bounds, config.grid_intervals);
            loc_cells.push((cell.row + 1, cell.col + 1));
        }
        let mut model = Self { config, bounds, params, coords, loc_tokens, loc_cells, num_locations: q };
        model.zero_pad_rows();
        Ok(model)
    }

    pub fn num_locations(&self) -> usize {
        self.num_locations
    }

    pub fn location_coords(&self) -> &[crate::geocode::GeoCoordinate] {
        &self.coords[1..]
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.len()).sum()
    }

    /// The padding id and the grid-pad rows must stay exactly zero so
    /// padded steps contribute nothing beyond the positional term.
    pub fn zero_pad_rows(&mut self) {
        for name in ["loc_embed", "row_embed", "col_embed"] {
            if let Some(pid) = self.params.id_of(name) {
                let p = self.params.get_mut(pid);
                for v in &mut p.value[..p.cols] {
                    *v = 0.0;
                }
            }
        }
    }

    fn pid(&self, name: &str) -> usize {
        self.params.id_of(name).expect("parameter registered at construction")
    }

    /// Run one encoder stack (`enc` causal over the behavior sequence,
    /// `geo` unmasked over geohash n-grams) on an input matrix.
    fn run_stack(&self, g: &mut Graph, prefix: &str, e: Var, masked: bool) -> Result<Var> {
        let mask = if masked { Some(causal_mask(e.rows)) } else { None };
        let mut f = e;
        for l in 0..self.config.layers {
            let wq = g.param(self.pid(&format!("{prefix}{l}_wq")))?;
            let wk = g.param(self.pid(&format!("{prefix}{l}_wk")))?;
            let wv = g.param(self.pid(&format!("{prefix}{l}_wv")))?;
            let q = g.matmul(f, wq)?;
            let k = g.matmul(f, wk)?;
            let v = g.matmul(f, wv)?;
            let sa = g.attention(q, k, v, mask.as_deref())?;
            let g1 = g.param(self.pid(&format!("{prefix}{l}_ln1_gamma")))?;
            let b1 = g.param(self.pid(&format!("{prefix}{l}_ln1_beta")))?;
            let normed = g.layer_norm(sa, g1, b1)?;
            let s = g.add(f, normed)?;
            let w1 = g.param(self.pid(&format!("{prefix}{l}_w1")))?;
            let bias1 = g.param(self.pid(&format!("{prefix}{l}_b1")))?;
            let w2 = g.param(self.pid(&format!("{prefix}{l}_w2")))?;
            let bias2 = g.param(self.pid(&format!("{prefix}{l}_b2")))?;
            let h = g.matmul(s, w1)?;
            let h = g.add_row(h, bias1)?;
            let h = g.relu(h)?;
            let ffn = g.matmul(h, w2)?;
            let ffn = g.add_row(ffn, bias2)?;
            let g2 = g.param(self.pid(&format!("{prefix}{l}_ln2_gamma")))?;
            let b2 = g.param(self.pid(&format!("{prefix}{l}_ln2_beta")))?;
            let normed = g.layer_norm(ffn, g2, b2)?;
            f = g.add(s, normed)?;
        }
        Ok(f)
    }

    /// Geography representation of one location: geohash n-gram token
    /// embeddings through the unmasked sub-encoder, mean-pooled.
    fn geo_vector(&self, g: &mut Graph, id: usize) -> Result<Var> {
        let tokens = &self.loc_tokens[id];
        let mut e = g.gather(self.pid("geo_token_embed"), tokens)?;
        if self.config.geo_positional {
            let p = g.gather(self.pid("geo_pos_embed"), &(0..tokens.len()).collect::<Vec<_>>())?;
            e = g.add(e, p)?;
        }
        let f = self.run_stack(g, "geo", e, false)?;
        g.mean_rows(f)
    }

    /// Concatenated (location | geography | grid-row | grid-col)
    /// embedding rows for a list of ids, before positional terms. The
    /// pad id 0 yields an all-zero row.
    fn embed_ids(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        for &id in ids {
            if id > self.num_locations {
                return Err(PasrError::Domain(format!("unknown location id {id}")));
            }
        }
        let d = self.config.d;
        let mut parts = vec![g.gather(self.pid("loc_embed"), ids)?];
        if self.config.use_geo_encoder {
            let mut geo_rows = Vec::with_capacity(ids.len());
            for &id in ids {
                if id == 0 {
                    geo_rows.push(g.input(1, d, vec![0.0; d])?);
                } else {
                    geo_rows.push(self.geo_vector(g, id)?);
                }
            }
            parts.push(g.concat_rows(&geo_rows)?);
        }
        if self.config.use_grid_mapper {
            let rows: Vec<usize> = ids.iter().map(|&id| self.loc_cells[id].0).collect();
            let cols: Vec<usize> = ids.iter().map(|&id| self.loc_cells[id].1).collect();
            parts.push(g.gather(self.pid("row_embed"), &rows)?);
            parts.push(g.gather(self.pid("col_embed"), &cols)?);
        }
        g.concat_cols(&parts)
    }

    /// Rows of a precomputed unique-id embedding matrix, with the
    /// positional embedding added.
    fn rows_with_positions(
        &self,
        g: &mut Graph,
        table: Var,
        index: &HashMap<usize, usize>,
        ids: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        if ids.len() != positions.len() {
            return Err(PasrError::ShapeMismatch("ids and positions lengths differ".into()));
        }
        if positions.iter().any(|&p| p >= self.config.m) {
            return Err(PasrError::Domain("position beyond sequence length m".into()));
        }
        let rows: Vec<usize> = ids.iter().map(|id| index[id]).collect();
        let e = g.gather_rows(table, &rows)?;
        let p = g.gather(self.pid("pos_embed"), positions)?;
        g.add(e, p)
    }

    /// Embedding matrix for a sequence occupying `positions`, with the
    /// positional embedding added.
    pub fn embed_locations(&self, g: &mut Graph, ids: &[usize], positions: &[usize]) -> Result<Var> {
        let (uniq, index) = unique_index(ids);
        let table = self.embed_ids(g, &uniq)?;
        self.rows_with_positions(g, table, &index, ids, positions)
    }

    /// Causal self-attention encoder: F^0 is the embedded input,
    /// each layer applies attention and FFN blocks with residual
    /// layer-norm, and the causal mask keeps row i blind to rows > i.
    pub fn encode(&self, g: &mut Graph, e_input: Var) -> Result<Var> {
        self.run_stack(g, "enc", e_input, true)
    }

    /// Target-aware attention decoder: row i of the output attends
    /// over encoder rows `allowed` with query T_i, keys F W and
    /// values F. With the decoder ablated the encoder output passes
    /// through unchanged.
    pub fn decode_target_aware(&self, g: &mut Graph, f: Var, t: Var, allowed: Option<&[bool]>) -> Result<Var> {
        if !self.config.use_target_decoder {
            return Ok(f);
        }
        if t.cols != f.cols {
            return Err(PasrError::ShapeMismatch(format!(
                "decoder: target width {} vs encoder width {}",
                t.cols, f.cols
            )));
        }
        let w = g.param(self.pid("dec_w"))?;
        let keys = g.matmul(f, w)?;
        g.attention(t, keys, f, allowed)
    }

    /// Preference score of one decoded row against one target row.
    pub fn score(&self, g: &mut Graph, a: Var, t: Var) -> Result<Var> {
        g.rowwise_dot(a, t)
    }

    /// Score 101-candidate sets against a user history. The history is
    /// truncated to its most recent m records, each candidate queries
    /// the full encoded history, and the result is sorted by
    /// descending score with ties broken by ascending id.
    pub fn rank_candidates(&self, history: &[usize], candidates: &[usize]) -> Result<Vec<RankedCandidate>> {
        if history.is_empty() {
            return Err(PasrError::EmptyInput("rank_candidates history"));
        }
        if candidates.is_empty() {
            return Err(PasrError::EmptyInput("rank_candidates candidates"));
        }
        for &c in candidates {
            if c == 0 || c > self.num_locations {
                return Err(PasrError::Domain(format!("unknown candidate id {c}")));
            }
        }
        let recent = &history[history.len().saturating_sub(self.config.m)..];
        let h = recent.len();
        let mut g = Graph::new(&self.params);
        let mut all_ids = recent.to_vec();
        all_ids.extend_from_slice(candidates);
        let (uniq, index) = unique_index(&all_ids);
        let table = self.embed_ids(&mut g, &uniq)?;
        let positions: Vec<usize> = (0..h).collect();
        let e = self.rows_with_positions(&mut g, table, &index, recent, &positions)?;
        let f = self.encode(&mut g, e)?;
        let t = self.rows_with_positions(&mut g, table, &index, candidates, &vec![h - 1; candidates.len()])?;
        let a = if self.config.use_target_decoder {
            self.decode_target_aware(&mut g, f, t, None)?
        } else {
            g.gather_rows(f, &vec![h - 1; candidates.len()])?
        };
        let scores = self.score(&mut g, a, t)?;
        let values = g.value(scores).to_vec();
        let mut ranked: Vec<RankedCandidate> = candidates
            .iter()
            .zip(values)
            .map(|(&location_id, score)| RankedCandidate { location_id, score })
            .collect();
        ranked.sort_by(|x, y| {
            y.score.partial_cmp(&x.score).unwrap().then(x.location_id.cmp(&y.location_id))
        });
        Ok(ranked)
    }

    /// Build the batch loss graph: mean per-supervised-step weighted
    /// BCE over every sequence in the batch. Negatives are given per
    /// sequence, per supervised step.
    pub fn batch_forward(
        &self,
        g: &mut Graph,
        seqs: &[&TrainSequence],
        negatives: &[Vec<Vec<NegativeDraw>>],
    ) -> Result<(Var, usize)> {
        if seqs.len() != negatives.len() {
            return Err(PasrError::ShapeMismatch("sequences vs negative sets".into()));
        }
        // one deduplicated embedding matrix serves the whole batch
        let mut all_ids: Vec<usize> = Vec::new();
        for (seq, negs) in seqs.iter().zip(negatives) {
            all_ids.extend(seq.steps.iter().map(|s| s.0));
            for step in negs {
                all_ids.extend(step.iter().map(|d| d.location_id));
            }
        }
        let (uniq, index) = unique_index(&all_ids);
        let table = self.embed_ids(g, &uniq)?;
        let mut total: Option<Var> = None;
        let mut steps_total = 0usize;
        for (seq, negs) in seqs.iter().zip(negatives) {
            let len = seq.steps.len();
            if len < 2 {
                return Err(PasrError::Domain("training sequence shorter than 2".into()));
            }
            if len > self.config.m {
                return Err(PasrError::Domain(format!("sequence length {len} exceeds m")));
            }
            let sup = len - 1;
            if negs.len() != sup {
                return Err(PasrError::ShapeMismatch("negatives per supervised step".into()));
            }
            let input_ids: Vec<usize> = seq.steps.iter().map(|s| s.0).collect();
            let positions: Vec<usize> = (0..len).collect();
            let e = self.rows_with_positions(g, table, &index, &input_ids, &positions)?;
            let f = self.encode(g, e)?;
            // supervised step t queries with the step-(t+1) target and
            // may attend encoder rows <= t
            let mut mask = vec![false; sup * len];
            for t in 0..sup {
                for j in 0..=t {
                    mask[t * len + j] = true;
                }
            }
            let target_ids: Vec<usize> = (1..len).map(|t| seq.steps[t].0).collect();
            let sup_positions: Vec<usize> = (0..sup).collect();
            let t_pos = self.rows_with_positions(g, table, &index, &target_ids, &sup_positions)?;
            let a_pos = if self.config.use_target_decoder {
                self.decode_target_aware(g, f, t_pos, Some(&mask))?
            } else {
                g.gather_rows(f, &sup_positions)?
            };
            let y_pos = self.score(g, a_pos, t_pos)?;
            let k = self.config.neg_count;
            let mut y_negs = Vec::with_capacity(k);
            for j in 0..k {
                let ids: Vec<usize> = negs
                    .iter()
                    .map(|step| {
                        step.get(j).map(|d| d.location_id).ok_or_else(|| {
                            PasrError::ShapeMismatch("missing negative draw".into())
                        })
                    })
                    .collect::<Result<_>>()?;
                let t_neg = self.rows_with_positions(g, table, &index, &ids, &sup_positions)?;
                let a_neg = if self.config.use_target_decoder {
                    self.decode_target_aware(g, f, t_neg, Some(&mask))?
                } else {
                    g.gather_rows(f, &sup_positions)?
                };
                y_negs.push(self.score(g, a_neg, t_neg)?);
            }
            let seq_loss = self.sequence_loss(g, y_pos, &y_negs, negs)?;
            total = Some(match total {
                Some(acc) => g.add(acc, seq_loss)?,
                None => seq_loss,
            });
            steps_total += sup;
        }
        let total = total.ok_or(PasrError::EmptyInput("batch_forward"))?;
        let mean = g.scale(total, 1.0 / steps_total as f64)?;
        Ok((mean, steps_total))
    }

    /// Loss of one sequence: -log sigma(y_pos) plus the (weighted) sum
    /// of -log(1 - sigma(y_neg)) per supervised step.
    fn sequence_loss(
        &self,
        g: &mut Graph,
        y_pos: Var,
        y_negs: &[Var],
        negs: &[Vec<NegativeDraw>],
    ) -> Result<Var> {
        let sup = y_pos.rows;
        let k = y_negs.len();
        let neg_pos = g.scale(y_pos, -1.0)?;
        let pos_terms = g.softplus(neg_pos)?;
        let mut loss = g.sum_all(pos_terms)?;
        if self.config.weighted_loss && self.config.propagate_weights && k > 1 {
            // in-graph softmax over (y/T - ln q) so gradients flow
            // through the weights as well
            let scaled: Vec<Var> = y_negs
                .iter()
                .map(|&y| g.scale(y, 1.0 / self.config.temperature))
                .collect::<Result<_>>()?;
            let z = g.concat_cols(&scaled)?;
            let mut neg_ln_q = vec![0.0; sup * k];
            for t in 0..sup {
                for j in 0..k {
                    neg_ln_q[t * k + j] = -negs[t][j].log_q;
                }
            }
            let z = g.add_const(z, &neg_ln_q)?;
            let w = g.softmax_rows(z, None)?;
            let sp_cols: Vec<Var> = y_negs.iter().map(|&y| g.softplus(y)).collect::<Result<_>>()?;
            let sp = g.concat_cols(&sp_cols)?;
            let weighted = g.mul(w, sp)?;
            let term = g.sum_all(weighted)?;
            return g.add(loss, term);
        }
        // detached weights: computed eagerly from current scores and
        // folded in as constants
        let mut weights = vec![vec![0.0; sup]; k];
        for t in 0..sup {
            let w_t = if self.config.weighted_loss && k > 0 {
                let y: Vec<f64> = y_negs.iter().map(|v| g.value(*v)[t]).collect();
                let ln_q: Vec<f64> = negs[t].iter().take(k).map(|d| d.log_q).collect();
                importance_weights(&y, &ln_q, self.config.temperature)?
            } else {
                vec![1.0; k]
            };
            for j in 0..k {
                weights[j][t] = w_t[j];
            }
        }
        for (j, &y) in y_negs.iter().enumerate() {
            let sp = g.softplus(y)?;
            let weighted = g.mul_const(sp, &weights[j])?;
            let term = g.sum_all(weighted)?;
            loss = g.add(loss, term)?;
        }
        Ok(loss)
    }

    /// Loss value of a batch without touching parameters.
    pub fn batch_loss(&self, seqs: &[&TrainSequence], negatives: &[Vec<Vec<NegativeDraw>>]) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let (loss, _) = self.batch_forward(&mut g, seqs, negatives)?;
        Ok(g.scalar(loss))
    }

    /// One optimizer step on a batch; returns (mean step loss,
    /// supervised step count).
    pub fn train_batch(
        &mut self,
        seqs: &[&TrainSequence],
        negatives: &[Vec<Vec<NegativeDraw>>],
        optimizer: &mut Adam,
    ) -> Result<(f64, usize)> {
        let (loss_value, steps, grads) = {
            let mut g = Graph::new(&self.params);
            let (loss, steps) = self.batch_forward(&mut g, seqs, negatives)?;
            g.backward(loss)?;
            (g.scalar(loss), steps, std::mem::take(&mut g.param_grads))
        };
        optimizer.step(&mut self.params, &grads);
        self.zero_pad_rows();
        Ok((loss_value, steps))
    }
}

fn init_tensor(name: &str, rows: usize, cols: usize, rng: &mut StdRng) -> Vec<f64> {
    if name.ends_with("_gamma") {
        return vec![1.0; rows * cols];
    }
    if name.ends_with("_beta") || name.ends_with("_b1") || name.ends_with("_b2") {
        return vec![0.0; rows * cols];
    }
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Map location ids to rows of a deduplicated embedding matrix; used
/// by callers that batch many overlapping id lists.
pub fn unique_index(ids: &[usize]) -> (Vec<usize>, HashMap<usize, usize>) {
    let mut uniq = Vec::new();
    let mut index = HashMap::new();
    for &id in ids {
        index.entry(id).or_insert_with(|| {
            uniq.push(id);
            uniq.len() - 1
        });
    }
    (uniq, index)
}
