//! Evolutionary and exhaustive search over cells, with a predictor (or any
//! other [`Scorer`]) as fitness.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cellgraph::{CellError, CellGraph, Op, MAX_NODES};
use crate::tensornet::{NetError, PredictorModel};

/// Largest node count [`enumerate_space`] accepts.
pub const MAX_ENUMERABLE_NODES: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("space of cells with up to {0} nodes is too large to enumerate (limit {MAX_ENUMERABLE_NODES})")]
    TooLarge(usize),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Batch fitness function. Results must be in input order.
pub trait Scorer {
    fn score(&self, cells: &[CellGraph]) -> Result<Vec<f64>, SearchError>;
}

impl Scorer for PredictorModel {
    fn score(&self, cells: &[CellGraph]) -> Result<Vec<f64>, SearchError> {
        Ok(self.score_cells(cells)?)
    }
}

/// Adapts a per-cell function into a [`Scorer`].
pub struct FnScorer<F>(pub F);

impl<F: Fn(&CellGraph) -> f64> Scorer for FnScorer<F> {
    fn score(&self, cells: &[CellGraph]) -> Result<Vec<f64>, SearchError> {
        Ok(cells.iter().map(&self.0).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EaConfig {
    pub generations: usize,
    pub population: usize,
    pub p_select: f64,
    pub p_crossover: f64,
    pub p_mutate: f64,
    pub seed: u64,
    pub top_k: usize,
    /// Node count of the genome template, 3 to 7.
    pub max_nodes: usize,
}

impl Default for EaConfig {
    fn default() -> Self {
        EaConfig {
            generations: 500,
            population: 64,
            p_select: 0.5,
            p_crossover: 0.3,
            p_mutate: 0.2,
            seed: 0,
            top_k: 10,
            max_nodes: MAX_NODES,
        }
    }
}

impl EaConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        for (name, p) in [("p_select", self.p_select), ("p_crossover", self.p_crossover), ("p_mutate", self.p_mutate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SearchError::InvalidConfig(format!("{name} = {p} is not a probability")));
            }
        }
        if self.population < 2 {
            return Err(SearchError::InvalidConfig(format!("population {} < 2", self.population)));
        }
        if self.top_k == 0 {
            return Err(SearchError::InvalidConfig("top_k must be positive".into()));
        }
        if !(3..=MAX_NODES).contains(&self.max_nodes) {
            return Err(SearchError::InvalidConfig(format!("max_nodes {} outside 3..={MAX_NODES}", self.max_nodes)));
        }
        Ok(())
    }
}

/// Upper-triangular edge bits of an `m`-node template followed by `m − 2`
/// interior op genes. Decoding goes through [`CellGraph::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genome {
    nodes: usize,
    edges: Vec<bool>,
    ops: Vec<Op>,
}

impl Genome {
    fn edge_slots(nodes: usize) -> Vec<(usize, usize)> {
        (0..nodes).flat_map(|i| (i + 1..nodes).map(move |j| (i, j))).collect()
    }

    pub fn random<R: Rng + ?Sized>(nodes: usize, rng: &mut R) -> Genome {
        let bits = nodes * (nodes - 1) / 2;
        Genome {
            nodes,
            edges: (0..bits).map(|_| rng.random_bool(0.5)).collect(),
            ops: (0..nodes - 2).map(|_| Op::INTERIOR[rng.random_range(0..3)]).collect(),
        }
    }

    pub fn decode(&self) -> Result<CellGraph, CellError> {
        let mut adj = vec![vec![0u8; self.nodes]; self.nodes];
        for (&(i, j), &on) in Self::edge_slots(self.nodes).iter().zip(&self.edges) {
            adj[i][j] = u8::from(on);
        }
        let mut ops = Vec::with_capacity(self.nodes);
        ops.push(Op::Input);
        ops.extend_from_slice(&self.ops);
        ops.push(Op::Output);
        CellGraph::validate(&adj, &ops)
    }

    fn gene_count(&self) -> usize {
        self.edges.len() + self.ops.len()
    }

    fn crossover<R: Rng + ?Sized>(&self, mate: &Genome, rng: &mut R) -> Genome {
        let mut child = self.clone();
        for (bit, &other) in child.edges.iter_mut().zip(&mate.edges) {
            if rng.random_bool(0.5) {
                *bit = other;
            }
        }
        for (op, &other) in child.ops.iter_mut().zip(&mate.ops) {
            if rng.random_bool(0.5) {
                *op = other;
            }
        }
        child
    }

    /// Flips one edge bit or replaces one op gene by a different op.
    fn mutate<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let g = rng.random_range(0..self.gene_count());
        if g < self.edges.len() {
            self.edges[g] = !self.edges[g];
        } else {
            let slot = &mut self.ops[g - self.edges.len()];
            let others: Vec<Op> = Op::INTERIOR.into_iter().filter(|op| op != slot).collect();
            *slot = others[rng.random_range(0..others.len())];
        }
    }

    /// Drops random edges while the pruned cell has too many; resamples a
    /// fresh genome when the result is disconnected or the trivial cell.
    fn repair<R: Rng + ?Sized>(mut self, rng: &mut R) -> (Genome, CellGraph) {
        loop {
            match self.decode() {
                Ok(cell) if cell.n() > 2 => return (self, cell),
                Err(CellError::TooManyEdges(_)) => {
                    let on: Vec<usize> = (0..self.edges.len()).filter(|&i| self.edges[i]).collect();
                    self.edges[on[rng.random_range(0..on.len())]] = false;
                }
                _ => self = Genome::random(self.nodes, rng),
            }
        }
    }
}

/// A random valid cell with at most `nodes` nodes and at least one interior
/// node.
pub fn random_cell<R: Rng + ?Sized>(nodes: usize, rng: &mut R) -> CellGraph {
    assert!((3..=MAX_NODES).contains(&nodes), "template size {nodes} outside 3..={MAX_NODES}");
    Genome::random(nodes, rng).repair(rng).1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub cell: CellGraph,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// Hall of fame, best first.
    pub top: Vec<Scored>,
    /// Best hall-of-fame score after each generation, starting with the
    /// initial population.
    pub trace: Vec<f64>,
    /// Distinct cells scored.
    pub evaluated: usize,
}

fn ranked(mut v: Vec<Scored>) -> Vec<Scored> {
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.cell.cmp(&b.cell)));
    v
}

struct Individual {
    genome: Genome,
    cell: CellGraph,
}

struct Evaluator<'a, S: Scorer + ?Sized> {
    scorer: &'a S,
    cache: HashMap<CellGraph, f64>,
}

impl<S: Scorer + ?Sized> Evaluator<'_, S> {
    /// Scores every not yet cached cell of `pop` in one batch.
    fn evaluate(&mut self, pop: &[Individual]) -> Result<Vec<f64>, SearchError> {
        let mut fresh = Vec::new();
        let mut queued = BTreeSet::new();
        for ind in pop {
            if !self.cache.contains_key(&ind.cell) && queued.insert(&ind.cell) {
                fresh.push(ind.cell.clone());
            }
        }
        if !fresh.is_empty() {
            let scores = self.scorer.score(&fresh)?;
            self.cache.extend(fresh.into_iter().zip(scores));
        }
        Ok(pop.iter().map(|ind| self.cache[&ind.cell]).collect())
    }
}

/// Generational EA. Per individual and generation, selection (tournament of
/// two), uniform crossover with a random mate and single-gene mutation fire
/// independently with their probabilities, in that order.
pub fn ea_search<S: Scorer + ?Sized>(scorer: &S, cfg: &EaConfig) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval = Evaluator { scorer, cache: HashMap::new() };

    let mut pop: Vec<Individual> = (0..cfg.population)
        .map(|_| {
            let (genome, cell) = Genome::random(cfg.max_nodes, &mut rng).repair(&mut rng);
            Individual { genome, cell }
        })
        .collect();
    let mut fitness = eval.evaluate(&pop)?;
    let mut hall: Vec<Scored> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.generations + 1);

    let admit = |hall: &mut Vec<Scored>, pop: &[Individual], fitness: &[f64]| {
        let mut seen: BTreeSet<CellGraph> = hall.iter().map(|s| s.cell.clone()).collect();
        for (ind, &score) in pop.iter().zip(fitness) {
            if seen.insert(ind.cell.clone()) {
                hall.push(Scored { cell: ind.cell.clone(), score });
            }
        }
        let mut sorted = ranked(std::mem::take(hall));
        sorted.truncate(cfg.top_k);
        *hall = sorted;
        hall[0].score
    };
    trace.push(admit(&mut hall, &pop, &fitness));

    for _ in 0..cfg.generations {
        let mut next = Vec::with_capacity(pop.len());
        for i in 0..pop.len() {
            let mut child = pop[i].genome.clone();
            if rng.random_bool(cfg.p_select) {
                let a = rng.random_range(0..pop.len());
                let b = rng.random_range(0..pop.len());
                let winner = if fitness[b] > fitness[a] { b } else { a };
                child = pop[winner].genome.clone();
            }
            if rng.random_bool(cfg.p_crossover) {
                let mate = rng.random_range(0..pop.len());
                child = child.crossover(&pop[mate].genome, &mut rng);
            }
            if rng.random_bool(cfg.p_mutate) {
                child.mutate(&mut rng);
            }
            let (genome, cell) = child.repair(&mut rng);
            next.push(Individual { genome, cell });
        }
        pop = next;
        fitness = eval.evaluate(&pop)?;
        trace.push(admit(&mut hall, &pop, &fitness));
    }

    Ok(SearchResult { top: hall, trace, evaluated: eval.cache.len() })
}

/// Scores every distinct cell of `space` and returns the best `top_k`,
/// ordered by descending score and then by cell. The result does not
/// depend on the iteration order of `space`.
pub fn exhaustive_search<S: Scorer + ?Sized>(
    scorer: &S,
    space: impl IntoIterator<Item = CellGraph>,
    top_k: usize,
) -> Result<Vec<Scored>, SearchError> {
    let cells: Vec<CellGraph> = space.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    let scores = scorer.score(&cells)?;
    let mut all = ranked(cells.into_iter().zip(scores).map(|(cell, score)| Scored { cell, score }).collect());
    all.truncate(top_k);
    Ok(all)
}

/// Every distinct canonical valid cell with at most `max_nodes` nodes, in
/// ascending [`CellGraph`] order.
pub fn enumerate_space(max_nodes: usize) -> Result<Vec<CellGraph>, SearchError> {
    if max_nodes > MAX_ENUMERABLE_NODES {
        return Err(SearchError::TooLarge(max_nodes));
    }
    if max_nodes < 2 {
        return Err(SearchError::InvalidConfig(format!("max_nodes {max_nodes} < 2")));
    }
    let mut out = BTreeSet::new();
    for n in 2..=max_nodes {
        let slots = Genome::edge_slots(n);
        let interior = n - 2;
        for mask in 0u32..(1 << slots.len()) {
            for code in 0..3usize.pow(interior as u32) {
                let mut c = code;
                let ops = (0..interior)
                    .map(|_| {
                        let op = Op::INTERIOR[c % 3];
                        c /= 3;
                        op
                    })
                    .collect();
                let genome = Genome { nodes: n, edges: (0..slots.len()).map(|b| mask >> b & 1 == 1).collect(), ops };
                if let Ok(cell) = genome.decode() {
                    out.insert(cell);
                }
            }
        }
    }
    Ok(out.into_iter().collect())
}
