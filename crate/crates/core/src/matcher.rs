//! Random forest over synthetic feature clusters and probability-ranked
//! match filtering.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correspondence::FeatureCluster;
use crate::error::{Error, Result};
use crate::features::{Cursor, Descriptor};
use crate::geometry::{ImagePoint, ScenePoint};

const MAGIC: &[u8; 4] = b"FRST";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 100,
            max_depth: 20,
            min_leaf: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split { dim: u32, threshold: f32, right: u32 },
    /// Sparse `(class, count)` pairs sorted by class.
    Leaf { hist: Vec<(u32, u32)>, total: u32 },
}

/// Nodes in preorder; a split's left child is the next node.
#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn leaf(&self, x: &[f32]) -> (&[(u32, u32)], u32) {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Split { dim, threshold, right } => {
                    i = if x[*dim as usize] <= *threshold { i + 1 } else { *right as usize };
                }
                Node::Leaf { hist, total } => return (hist, *total),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForestModel {
    dim: usize,
    trees: Vec<Tree>,
    /// Class index to cluster scene point.
    class_map: Vec<ScenePoint>,
}

struct Builder<'a> {
    data: &'a [f32],
    labels: &'a [u32],
    dim: usize,
    cfg: &'a ForestConfig,
    candidate_dims: usize,
    left: Vec<u32>,
    right: Vec<u32>,
    touched: Vec<u32>,
}

impl Builder<'_> {
    fn value(&self, sample: u32, d: usize) -> f32 {
        self.data[sample as usize * self.dim + d]
    }

    fn grow(&mut self, samples: &mut [u32], depth: usize, rng: &mut impl Rng, nodes: &mut Vec<Node>) {
        let first = self.labels[samples[0] as usize];
        let pure = samples.iter().all(|&s| self.labels[s as usize] == first);
        if depth >= self.cfg.max_depth || samples.len() < 2 * self.cfg.min_leaf.max(1) || pure {
            nodes.push(self.make_leaf(samples));
            return;
        }
        match self.best_split(samples, rng) {
            None => nodes.push(self.make_leaf(samples)),
            Some((dim, threshold)) => {
                let at = nodes.len();
                nodes.push(Node::Split {
                    dim: dim as u32,
                    threshold,
                    right: 0,
                });
                // stable partition keeps the sample order deterministic
                let (mut l, mut r): (Vec<u32>, Vec<u32>) =
                    samples.iter().partition(|&&s| self.value(s, dim) <= threshold);
                self.grow(&mut l, depth + 1, rng, nodes);
                let right_at = nodes.len() as u32;
                if let Node::Split { right, .. } = &mut nodes[at] {
                    *right = right_at;
                }
                self.grow(&mut r, depth + 1, rng, nodes);
            }
        }
    }

    fn make_leaf(&self, samples: &[u32]) -> Node {
        let mut classes: Vec<u32> = samples.iter().map(|&s| self.labels[s as usize]).collect();
        classes.sort_unstable();
        let mut hist: Vec<(u32, u32)> = Vec::new();
        for c in classes {
            match hist.last_mut() {
                Some((last, n)) if *last == c => *n += 1,
                _ => hist.push((c, 1)),
            }
        }
        Node::Leaf {
            hist,
            total: samples.len() as u32,
        }
    }

    /// Gini-optimal threshold over `⌊√D⌋` sampled dimensions.
    fn best_split(&mut self, samples: &mut [u32], rng: &mut impl Rng) -> Option<(usize, f32)> {
        let n = samples.len();
        let min_leaf = self.cfg.min_leaf.max(1);
        let dims = index::sample(rng, self.dim, self.candidate_dims).into_vec();
        let mut best: Option<(f64, usize, f32)> = None;
        for d in dims {
            samples.sort_by(|&a, &b| self.value(a, d).total_cmp(&self.value(b, d)).then(a.cmp(&b)));
            for &c in &self.touched {
                self.left[c as usize] = 0;
                self.right[c as usize] = 0;
            }
            self.touched.clear();
            let mut sq_right = 0.0f64;
            for &s in samples.iter() {
                let c = self.labels[s as usize] as usize;
                if self.right[c] == 0 && self.left[c] == 0 {
                    self.touched.push(c as u32);
                }
                sq_right += 2.0 * self.right[c] as f64 + 1.0;
                self.right[c] += 1;
            }
            let mut sq_left = 0.0f64;
            for i in 0..n - 1 {
                let c = self.labels[samples[i] as usize] as usize;
                sq_left += 2.0 * self.left[c] as f64 + 1.0;
                self.left[c] += 1;
                sq_right -= 2.0 * self.right[c] as f64 - 1.0;
                self.right[c] -= 1;
                let nl = i + 1;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let (lo, hi) = (self.value(samples[i], d), self.value(samples[i + 1], d));
                if lo == hi {
                    continue;
                }
                // maximising Σ n_c²/n per side minimises weighted Gini impurity
                let score = sq_left / nl as f64 + sq_right / nr as f64;
                if best.is_none_or(|(b, _, _)| score > b) {
                    let mid = lo + (hi - lo) / 2.0;
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some((score, d, threshold));
                }
            }
        }
        best.map(|(_, d, t)| (d, t))
    }
}

fn flatten(db: &[FeatureCluster]) -> Result<(usize, Vec<f32>, Vec<u32>)> {
    if db.len() < 2 {
        return Err(Error::TooFewClasses(db.len()));
    }
    if let Some(c) = db.iter().find(|c| c.is_empty()) {
        return Err(Error::ClusterTooSmall(c.len()));
    }
    let dim = db[0].members[0].descriptor.dim();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (ci, c) in db.iter().enumerate() {
        for m in &c.members {
            if m.descriptor.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.descriptor.dim(),
                });
            }
            data.extend_from_slice(m.descriptor.values());
            labels.push(ci as u32);
        }
    }
    Ok((dim, data, labels))
}

/// Trains the forest with one class per cluster and reports the
/// out-of-bag accuracy (NaN when no sample is ever out of bag).
pub fn train_forest_oob(db: &[FeatureCluster], cfg: &ForestConfig) -> Result<(RandomForestModel, f64)> {
    let (dim, data, labels) = flatten(db)?;
    let n = labels.len();
    let n_classes = db.len();
    let candidate_dims = ((dim as f64).sqrt().floor() as usize).clamp(1, dim);
    let grown = crate::par::map_range(cfg.trees, |t| {
        let mut rng = crate::seed::rng(cfg.seed, "forest-tree", t as u64);
        let mut bag: Vec<u32> = (0..n).map(|_| rng.random_range(0..n as u32)).collect();
        let mut in_bag = vec![false; n];
        for &s in &bag {
            in_bag[s as usize] = true;
        }
        bag.sort_unstable();
        let mut b = Builder {
            data: &data,
            labels: &labels,
            dim,
            cfg,
            candidate_dims,
            left: vec![0; n_classes],
            right: vec![0; n_classes],
            touched: Vec::new(),
        };
        let mut nodes = Vec::new();
        b.grow(&mut bag, 0, &mut rng, &mut nodes);
        (Tree { nodes }, in_bag)
    });

    let model = RandomForestModel {
        dim,
        trees: grown.iter().map(|(t, _)| t.clone()).collect(),
        class_map: db.iter().map(|c| c.scene_point).collect(),
    };
    let votes = crate::par::map_range(n, |s| {
        let x = &data[s * dim..(s + 1) * dim];
        let mut probs = vec![0.0; n_classes];
        let mut any = false;
        for (tree, in_bag) in &grown {
            if !in_bag[s] {
                any = true;
                accumulate(tree, x, &mut probs);
            }
        }
        any.then(|| argmax(&probs).0 as u32 == labels[s])
    });
    let scored: Vec<bool> = votes.into_iter().flatten().collect();
    let oob = if scored.is_empty() {
        f64::NAN
    } else {
        scored.iter().filter(|&&ok| ok).count() as f64 / scored.len() as f64
    };
    Ok((model, oob))
}

pub fn train_forest(db: &[FeatureCluster], cfg: &ForestConfig) -> Result<RandomForestModel> {
    train_forest_oob(db, cfg).map(|(m, _)| m)
}

fn accumulate(tree: &Tree, x: &[f32], probs: &mut [f64]) {
    let (hist, total) = tree.leaf(x);
    let w = 1.0 / total as f64;
    for &(c, k) in hist {
        probs[c as usize] += k as f64 * w;
    }
}

/// Highest entry, ties to the lower index.
fn argmax(p: &[f64]) -> (usize, f64) {
    let mut best = (0, p[0]);
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

impl RandomForestModel {
    pub fn n_classes(&self) -> usize {
        self.class_map.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn class_point(&self, class: usize) -> &ScenePoint {
        &self.class_map[class]
    }

    /// Mean of the normalised leaf histograms.
    pub fn probabilities(&self, f: &[f32]) -> Result<Vec<f64>> {
        if f.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: f.len(),
            });
        }
        let mut probs = vec![0.0; self.n_classes()];
        for t in &self.trees {
            accumulate(t, f, &mut probs);
        }
        let k = 1.0 / self.trees.len() as f64;
        probs.iter_mut().for_each(|p| *p *= k);
        Ok(probs)
    }

    /// Most probable class with its probability.
    pub fn predict(&self, f: &[f32]) -> Result<(usize, f64)> {
        Ok(argmax(&self.probabilities(f)?))
    }

    pub fn classify(&self, f: &Descriptor) -> Result<(ScenePoint, Vec<f64>)> {
        let p = self.probabilities(f.values())?;
        let (c, _) = argmax(&p);
        Ok((self.class_map[c], p))
    }

    /// One candidate per query, in query order.
    pub fn match_features(&self, queries: &[(ImagePoint, Descriptor)]) -> Result<Vec<MatchCandidate>> {
        let idx: Vec<usize> = (0..queries.len()).collect();
        crate::par::try_map(&idx, |&i| {
            let (u, f) = &queries[i];
            let (class, confidence) = self.predict(f.values())?;
            Ok(MatchCandidate {
                query_index: i,
                u: *u,
                scene_point: self.class_map[class],
                class,
                confidence,
            })
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    /// Little-endian: magic, version, dim, class count, class points as
    /// f64 triples, tree count, then per tree its node count and preorder
    /// nodes. A split is tag 0, dim u32, threshold f32, right-child index
    /// u32; a leaf is tag 1, total u32, entry count u32 and (class, count)
    /// u32 pairs.
    pub fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        let u32le = |v: usize| (v as u32).to_le_bytes();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32le(self.dim))?;
        w.write_all(&u32le(self.class_map.len()))?;
        for p in &self.class_map {
            for v in p.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&u32le(self.trees.len()))?;
        for t in &self.trees {
            w.write_all(&u32le(t.nodes.len()))?;
            for n in &t.nodes {
                match n {
                    Node::Split { dim, threshold, right } => {
                        w.write_all(&[0])?;
                        w.write_all(&dim.to_le_bytes())?;
                        w.write_all(&threshold.to_le_bytes())?;
                        w.write_all(&right.to_le_bytes())?;
                    }
                    Node::Leaf { hist, total } => {
                        w.write_all(&[1])?;
                        w.write_all(&total.to_le_bytes())?;
                        w.write_all(&u32le(hist.len()))?;
                        for (c, k) in hist {
                            w.write_all(&c.to_le_bytes())?;
                            w.write_all(&k.to_le_bytes())?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::format("forest", m.to_string());
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::io("<forest>", e))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        if cur.u32()? != VERSION {
            return Err(bad("unsupported version"));
        }
        let dim = cur.u32()? as usize;
        let n_classes = cur.u32()? as usize;
        let mut class_map = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let mut p = [0.0; 3];
            for v in &mut p {
                *v = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
            }
            class_map.push(ScenePoint::new(p[0], p[1], p[2]));
        }
        let n_trees = cur.u32()? as usize;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let count = cur.u32()? as usize;
            let mut nodes = Vec::with_capacity(count);
            for i in 0..count {
                match cur.u8()? {
                    0 => {
                        let d = cur.u32()?;
                        let threshold = cur.f32()?;
                        let right = cur.u32()?;
                        if d as usize >= dim || right as usize <= i + 1 || right as usize >= count {
                            return Err(bad("split out of range"));
                        }
                        nodes.push(Node::Split { dim: d, threshold, right });
                    }
                    1 => {
                        let total = cur.u32()?;
                        let entries = cur.u32()? as usize;
                        let mut hist = Vec::with_capacity(entries);
                        for _ in 0..entries {
                            let c = cur.u32()?;
                            if c as usize >= n_classes {
                                return Err(bad("class out of range"));
                            }
                            hist.push((c, cur.u32()?));
                        }
                        if total == 0 || hist.iter().map(|(_, k)| *k).sum::<u32>() != total {
                            return Err(bad("leaf histogram does not match its total"));
                        }
                        nodes.push(Node::Leaf { hist, total });
                    }
                    _ => return Err(bad("unknown node tag")),
                }
            }
            if nodes.is_empty() {
                return Err(bad("empty tree"));
            }
            trees.push(Tree { nodes });
        }
        if cur.pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        if trees.is_empty() {
            return Err(bad("no trees"));
        }
        Ok(RandomForestModel { dim, trees, class_map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_owned()));
        }
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read(&mut f)
    }
}

/// Clusters with at least `min_size` members, in their original order.
pub fn select_classes(clusters: Vec<FeatureCluster>, min_size: usize) -> Vec<FeatureCluster> {
    clusters.into_iter().filter(|c| c.len() >= min_size).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchCandidate {
    pub query_index: usize,
    pub u: ImagePoint,
    pub scene_point: ScenePoint,
    pub class: usize,
    pub confidence: f64,
}

/// Highest-confidence candidates first, ties by lower query index,
/// truncated to `cap`.
pub fn filter_matches(mut candidates: Vec<MatchCandidate>, cap: usize) -> Vec<MatchCandidate> {
    candidates.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.query_index.cmp(&b.query_index)));
    candidates.truncate(cap);
    candidates
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::ClusterKey;
    use crate::features::{FeatureRecord, Origin};
    use nalgebra::Point3;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cluster(i: usize, descs: Vec<Vec<f32>>) -> FeatureCluster {
        let x = Point3::new(i as f64, 0.0, 0.0);
        FeatureCluster {
            key: ClusterKey::of(&x, 0.5),
            scene_point: x,
            origin: Origin::Synthetic,
            members: descs
                .into_iter()
                .map(|d| FeatureRecord::new(Descriptor::new(d).unwrap(), ImagePoint::origin(), 0, Origin::Synthetic, Some(x)))
                .collect(),
        }
    }

    fn blobs(classes: usize, per: usize, dim: usize, sigma: f64, seed: u64) -> Vec<FeatureCluster> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        (0..classes)
            .map(|c| {
                let centre: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..10.0)).collect();
                let members = (0..per)
                    .map(|_| centre.iter().map(|m| (m + noise.sample(&mut rng)) as f32).collect())
                    .collect();
                cluster(c, members)
            })
            .collect()
    }

    #[test]
    fn separable_pair_is_learned() {
        let db = vec![cluster(0, vec![vec![0.0, 0.0]]), cluster(1, vec![vec![1.0, 1.0]])];
        let cfg = ForestConfig {
            trees: 10,
            min_leaf: 1,
            ..ForestConfig::default()
        };
        let m = train_forest(&db, &cfg).unwrap();
        // a bootstrap may miss one class; the ensemble still separates them
        assert_eq!(m.predict(&[0.0, 0.0]).unwrap().0, 0);
        assert_eq!(m.predict(&[1.0, 1.0]).unwrap().0, 1);
    }

    #[test]
    fn rejects_degenerate_databases() {
        assert!(matches!(train_forest(&[cluster(0, vec![vec![1.0]])], &ForestConfig::default()), Err(Error::TooFewClasses(1))));
        let db = vec![cluster(0, vec![vec![1.0]]), cluster(1, vec![])];
        assert!(train_forest(&db, &ForestConfig::default()).is_err());
    }

    #[test]
    fn blobs_are_classified_out_of_bag() {
        let db = blobs(20, 15, 8, 0.3, 1);
        let (m, oob) = train_forest_oob(&db, &ForestConfig { trees: 50, ..ForestConfig::default() }).unwrap();
        assert!(oob > 0.95, "{oob}");
        for c in &db {
            let (x, p) = m.classify(&c.members[0].descriptor).unwrap();
            assert_eq!(x, c.scene_point);
            assert!(p.iter().cloned().fold(0.0, f64::max) > 0.9);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn more_trees_do_not_hurt_oob() {
        for seed in 0..3 {
            let db = blobs(20, 12, 8, 1.5, 10 + seed);
            let small = train_forest_oob(&db, &ForestConfig { trees: 10, seed, ..ForestConfig::default() }).unwrap().1;
            let large = train_forest_oob(&db, &ForestConfig { trees: 100, seed, ..ForestConfig::default() }).unwrap().1;
            assert!(1.0 - large <= 1.0 - small + 0.03, "{small} {large}");
        }
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let db = blobs(6, 10, 5, 1.0, 3);
        let cfg = ForestConfig { trees: 12, ..ForestConfig::default() };
        let a = train_forest(&db, &cfg).unwrap();
        let b = train_forest(&db, &cfg).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reversed = a.clone();
        reversed.trees.reverse();
        for _ in 0..50 {
            let probe: Vec<f32> = (0..5).map(|_| rng.random_range(0.0..10.0)).collect();
            let pa = a.probabilities(&probe).unwrap();
            let pr = reversed.probabilities(&probe).unwrap();
            assert_eq!(a.predict(&probe).unwrap().0, b.predict(&probe).unwrap().0);
            assert!(pa.iter().zip(&pr).all(|(x, y)| (x - y).abs() < 1e-12));
            assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(a.probabilities(&[1.0]).is_err());
    }

    #[test]
    fn single_tree_reproduces_leaf_histogram() {
        let db = blobs(4, 6, 3, 3.0, 9);
        let m = train_forest(&db, &ForestConfig { trees: 1, max_depth: 2, ..ForestConfig::default() }).unwrap();
        let probe = [5.0f32, 5.0, 5.0];
        let (hist, total) = m.trees[0].leaf(&probe);
        let mut want = vec![0.0; 4];
        for &(c, k) in hist {
            want[c as usize] = k as f64 / total as f64;
        }
        assert_eq!(m.probabilities(&probe).unwrap(), want);
        for t in &m.trees {
            for n in &t.nodes {
                if let Node::Leaf { hist, total } = n {
                    assert_eq!(hist.iter().map(|h| h.1).sum::<u32>(), *total);
                }
            }
        }
    }

    #[test]
    fn model_file_round_trip() {
        let db = blobs(5, 8, 4, 1.0, 4);
        let m = train_forest(&db, &ForestConfig { trees: 7, ..ForestConfig::default() }).unwrap();
        let mut bytes = Vec::new();
        m.write(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"FRST");
        assert_eq!(RandomForestModel::read(&mut bytes.as_slice()).unwrap(), m);
        bytes.truncate(bytes.len() - 1);
        assert!(RandomForestModel::read(&mut bytes.as_slice()).is_err());
    }

    fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
        let mut v = items.to_vec();
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        v
    }

    fn cand(i: usize, c: f64) -> MatchCandidate {
        MatchCandidate {
            query_index: i,
            u: ImagePoint::new(i as f64, 0.0),
            scene_point: Point3::origin(),
            class: 0,
            confidence: c,
        }
    }

    #[test]
    fn filter_keeps_top_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let many: Vec<MatchCandidate> = (0..250).map(|i| cand(i, (rng.random_range(0..20) as f64) / 20.0)).collect();
        let top = filter_matches(many.clone(), 100);
        assert_eq!(top.len(), 100);
        assert!(top.windows(2).all(|w| w[0].confidence > w[1].confidence
            || (w[0].confidence == w[1].confidence && w[0].query_index < w[1].query_index)));
        let cutoff = top.last().unwrap().confidence;
        assert!(many.iter().filter(|c| c.confidence > cutoff).all(|c| top.contains(c)));
        let few = filter_matches(shuffled(&many[..30], 2), 100);
        assert_eq!(few.len(), 30);
        assert!(few.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        assert!(filter_matches(Vec::new(), 100).is_empty());
    }
}
