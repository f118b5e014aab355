use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{euclidean, ToyTask};
use crate::error::{Error, Result};
use crate::model::{NfeCounter, VelocityField};
use crate::rectflow::ode::{integrate_with, Direction, Solver};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const COUPLING_MAGIC: &[u8; 4] = b"RMFC";
pub const COUPLING_VERSION: u32 = 1;
const PROVENANCE_MAGIC: &[u8; 4] = b"PROV";
/// Pairs integrated together; fixed so output never depends on worker count.
const CHUNK: usize = 1024;

/// A data point `x` (t = 0) paired with a noise point `z` (t = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub class: Option<u32>,
    pub distance: f64,
}

impl Coupling {
    pub fn new(x: Vec<f64>, z: Vec<f64>, class: Option<u32>) -> Self {
        let distance = euclidean(&x, &z);
        Coupling { x, z, class, distance }
    }
}

/// Where a coupling set came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Identifier (digest) of the generating flow checkpoint.
    pub generator: String,
    pub solver: String,
    pub steps: u64,
    pub seed: u64,
    pub truncated: bool,
    pub truncate_k: f64,
    pub num_classes: usize,
    /// Pairs requested before failures and truncation.
    pub requested_pairs: u64,
    /// Indices of pairs whose trajectory went non-finite.
    pub failed_pairs: Vec<u64>,
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSet {
    pub couplings: Vec<Coupling>,
    pub provenance: Provenance,
}

/// A batch of couplings as `(n, d)` tensors.
#[derive(Debug, Clone)]
pub struct CouplingBatch {
    pub x: Tensor,
    pub z: Tensor,
    pub classes: Option<Vec<usize>>,
}

impl CouplingBatch {
    /// Rows of `(1 − t) x + t z`.
    pub fn interpolate(&self, t: &[f64]) -> Result<Tensor> {
        if t.len() != self.x.rows() {
            return Err(Error::Shape("one time per coupling required".into()));
        }
        let d = self.x.cols();
        let mut values = Vec::with_capacity(self.x.len());
        for (i, &ti) in t.iter().enumerate() {
            let (xr, zr) = (self.x.row(i), self.z.row(i));
            values.extend((0..d).map(|j| (1.0 - ti) * xr[j] + ti * zr[j]));
        }
        Tensor::new(vec![t.len(), d], values)
    }
}

/// Training couplings: fresh independent draws, or resampling a fixed set.
#[derive(Debug, Clone, Copy)]
pub enum CouplingSource<'a> {
    Independent(&'a ToyTask),
    Dataset(&'a CouplingSet),
}

impl CouplingSource<'_> {
    pub fn dim(&self) -> usize {
        match self {
            CouplingSource::Independent(task) => task.dim(),
            CouplingSource::Dataset(set) => set.dim(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            CouplingSource::Independent(task) => task.num_classes(),
            CouplingSource::Dataset(set) => set.provenance.num_classes,
        }
    }

    /// `n` couplings; dataset rows are drawn uniformly with replacement.
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<CouplingBatch> {
        match self {
            CouplingSource::Independent(task) => {
                let (x, classes) = task.sample_data(n, rng)?;
                let z = task.sample_prior(n, rng)?;
                Ok(CouplingBatch { x, z, classes })
            }
            CouplingSource::Dataset(set) => {
                if set.is_empty() {
                    return Err(Error::InvalidArgument("empty coupling set".into()));
                }
                let d = set.dim();
                let mut xs = Vec::with_capacity(n * d);
                let mut zs = Vec::with_capacity(n * d);
                let has_class = set.has_class();
                let mut classes = Vec::with_capacity(if has_class { n } else { 0 });
                for _ in 0..n {
                    let c = &set.couplings[rng.gen_range(0..set.len())];
                    xs.extend_from_slice(&c.x);
                    zs.extend_from_slice(&c.z);
                    if let Some(k) = c.class {
                        classes.push(k as usize);
                    }
                }
                Ok(CouplingBatch {
                    x: Tensor::new(vec![n, d], xs)?,
                    z: Tensor::new(vec![n, d], zs)?,
                    classes: has_class.then_some(classes),
                })
            }
        }
    }
}

impl CouplingSet {
    pub fn new(couplings: Vec<Coupling>, provenance: Provenance) -> Self {
        CouplingSet { couplings, provenance }
    }

    pub fn len(&self) -> usize {
        self.couplings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.couplings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.couplings.first().map_or(0, |c| c.x.len())
    }

    pub fn has_class(&self) -> bool {
        self.couplings.first().is_some_and(|c| c.class.is_some())
    }

    pub fn distances(&self) -> Vec<f64> {
        self.couplings.iter().map(|c| c.distance).collect()
    }

    /// The first `n` couplings as a batch.
    pub fn head_batch(&self, n: usize) -> Result<CouplingBatch> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::InvalidArgument("empty coupling set".into()));
        }
        let d = self.dim();
        let rows = &self.couplings[..n];
        let x = rows.iter().flat_map(|c| c.x.iter().copied()).collect();
        let z = rows.iter().flat_map(|c| c.z.iter().copied()).collect();
        let classes = self.has_class().then(|| rows.iter().map(|c| c.class.unwrap_or(0) as usize).collect());
        Ok(CouplingBatch { x: Tensor::new(vec![n, d], x)?, z: Tensor::new(vec![n, d], z)?, classes })
    }

    /// Little-endian binary encoding: header, fixed-width records, then a
    /// provenance trailer (`PROV`, u32 length, JSON).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = self.dim();
        let has_class = self.has_class();
        let record = 16 * d + if has_class { 4 } else { 0 } + 8;
        let mut out = Vec::with_capacity(21 + record * self.len() + 256);
        out.extend_from_slice(COUPLING_MAGIC);
        out.extend_from_slice(&COUPLING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.push(u8::from(has_class));
        for c in &self.couplings {
            if c.x.len() != d || c.z.len() != d || c.class.is_some() != has_class {
                return Err(Error::Format("heterogeneous coupling records".into()));
            }
            for v in c.x.iter().chain(&c.z) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(k) = c.class {
                out.extend_from_slice(&k.to_le_bytes());
            }
            out.extend_from_slice(&c.distance.to_le_bytes());
        }
        let prov = serde_json::to_vec(&self.provenance).map_err(|e| Error::Format(e.to_string()))?;
        out.extend_from_slice(PROVENANCE_MAGIC);
        out.extend_from_slice(&(prov.len() as u32).to_le_bytes());
        out.extend_from_slice(&prov);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor(bytes);
        if cur.take(4)? != COUPLING_MAGIC {
            return Err(Error::Format("bad magic, not a coupling file".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != COUPLING_VERSION {
            return Err(Error::Format(format!("unsupported coupling file version {version}")));
        }
        let n = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let has_class = match cur.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad has_class byte {b}"))),
        };
        let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
        let mut couplings = Vec::with_capacity(n);
        for _ in 0..n {
            let xz = cur.take(16 * d)?;
            let x = xz[..8 * d].chunks_exact(8).map(f64_at).collect();
            let z = xz[8 * d..].chunks_exact(8).map(f64_at).collect();
            let class = if has_class { Some(u32::from_le_bytes(cur.take(4)?.try_into().unwrap())) } else { None };
            let distance = f64_at(cur.take(8)?);
            couplings.push(Coupling { x, z, class, distance });
        }
        let provenance = if cur.0.is_empty() {
            Provenance::default()
        } else {
            if cur.take(4)? != PROVENANCE_MAGIC {
                return Err(Error::Format("unexpected bytes after records".into()));
            }
            let len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let json = cur.take(len)?;
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("provenance: {e}")))?
        };
        Ok(CouplingSet { couplings, provenance })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path).and_then(|mut f| f.write_all(&bytes)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        CouplingSet::from_bytes(&bytes)
    }

    /// CSV mirror of the binary records, header row first.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut cols: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        cols.extend((0..d).map(|j| format!("z{j}")));
        if self.has_class() {
            cols.push("class".into());
        }
        cols.push("distance".into());
        let mut out = cols.join(",");
        out.push('\n');
        for c in &self.couplings {
            let mut fields: Vec<String> = c.x.iter().chain(&c.z).map(|v| format!("{v:?}")).collect();
            if let Some(k) = c.class {
                fields.push(k.to_string());
            }
            fields.push(format!("{:?}", c.distance));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

struct ByteCursor<'a>(&'a [u8]);

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Format("truncated coupling file".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
}

/// Nearest-rank `p`-th percentile (0 < p ≤ 100) of `values`.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty set".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside (0, 100]")));
    }
    let n = values.len();
    let rank = ((p * n as f64 / 100.0).ceil() as usize).clamp(1, n);
    let mut scratch = values.to_vec();
    let (_, q, _) = scratch.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*q)
}

/// Drops the couplings above the `(100 − k)`-th distance percentile.
pub fn truncate_by_distance(set: &CouplingSet, k_percent: f64) -> Result<CouplingSet> {
    if !(0.0..100.0).contains(&k_percent) {
        return Err(Error::InvalidArgument(format!("truncation k = {k_percent} outside [0, 100)")));
    }
    if set.is_empty() {
        return Err(Error::InvalidArgument("cannot truncate an empty coupling set".into()));
    }
    let q = nearest_rank_percentile(&set.distances(), 100.0 - k_percent)?;
    let couplings = set.couplings.iter().filter(|c| c.distance <= q).cloned().collect();
    let provenance = Provenance { truncated: true, truncate_k: k_percent, ..set.provenance.clone() };
    Ok(CouplingSet { couplings, provenance })
}

/// Samples data points and integrates each from `t = 0` to `t = 1` under
/// `field`, pairing it with the noise point it reaches.
///
/// Pair `i` draws its data point from its own seed stream, and pairs are
/// integrated in fixed chunks, so the result is identical for any `workers`.
#[allow(clippy::too_many_arguments)]
pub fn generate_couplings<F: VelocityField>(
    field: &F,
    task: &ToyTask,
    n_pairs: usize,
    steps: usize,
    solver: Solver,
    seed: u64,
    workers: usize,
    generator: &str,
    nfe: &NfeCounter,
) -> Result<CouplingSet> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be positive".into()));
    }
    if field.dim() != task.dim() {
        return Err(Error::Shape(format!("field dim {} vs task dim {}", field.dim(), task.dim())));
    }
    let d = task.dim();
    let conditional = task.class_labels.is_some();
    let chunks: Vec<(usize, usize)> = (0..n_pairs).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n_pairs))).collect();

    let run_chunk = |&(lo, hi): &(usize, usize)| -> Result<(Vec<Coupling>, Vec<u64>)> {
        let m = hi - lo;
        let mut xs = vec![0.0; m * d];
        let mut classes = Vec::with_capacity(m);
        for (row, i) in xs.chunks_exact_mut(d).zip(lo..hi) {
            let mut rng = stream(seed, "pair", i as u64);
            let comp = task.target.sample_into(&mut rng, row);
            classes.push(task.class_labels.as_ref().map(|l| l[comp]));
        }
        let x = Tensor::new(vec![m, d], xs)?;
        let cls = conditional.then_some(classes.as_slice());
        let z = integrate_with(field, &x, steps, solver, Direction::DataToNoise, cls, nfe, |_, _| Ok(()))?;
        let mut kept = Vec::with_capacity(m);
        let mut failed = Vec::new();
        for (j, i) in (lo..hi).enumerate() {
            let (xr, zr) = (x.row(j), z.row(j));
            if zr.iter().all(|v| v.is_finite()) {
                kept.push(Coupling::new(xr.to_vec(), zr.to_vec(), classes[j].map(|k| k as u32)));
            } else {
                failed.push(i as u64);
            }
        }
        Ok((kept, failed))
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<(Vec<Coupling>, Vec<u64>)>> = pool.install(|| chunks.par_iter().map(run_chunk).collect());

    let mut couplings = Vec::with_capacity(n_pairs);
    let mut failed_pairs = Vec::new();
    for r in results {
        let (kept, failed) = r?;
        couplings.extend(kept);
        failed_pairs.extend(failed);
    }
    Ok(CouplingSet {
        couplings,
        provenance: Provenance {
            generator: generator.to_string(),
            solver: solver.name().to_string(),
            steps: steps as u64,
            seed,
            truncated: false,
            truncate_k: 0.0,
            num_classes: task.num_classes(),
            requested_pairs: n_pairs as u64,
            failed_pairs,
            config_hash: String::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rectflow::FlowModel;
    use proptest::prelude::*;

    fn set_from_distances(ds: &[f64]) -> CouplingSet {
        let couplings = ds.iter().map(|&d| Coupling::new(vec![0.0], vec![d], None)).collect();
        CouplingSet::new(couplings, Provenance::default())
    }

    #[test]
    fn truncation_nearest_rank_on_one_to_ten() {
        let set = set_from_distances(&(1..=10).map(f64::from).collect::<Vec<_>>());
        let kept = truncate_by_distance(&set, 10.0).unwrap();
        assert_eq!(kept.distances(), (1..=9).map(f64::from).collect::<Vec<_>>());
        assert!(kept.provenance.truncated);
        assert_eq!(set.len(), 10);
    }

    #[test]
    fn zero_truncation_is_identity() {
        let set = set_from_distances(&[3.0, 1.0, 2.0]);
        let kept = truncate_by_distance(&set, 0.0).unwrap();
        assert_eq!(kept.couplings, set.couplings);
    }

    #[test]
    fn truncation_errors() {
        assert!(truncate_by_distance(&set_from_distances(&[]), 10.0).is_err());
        assert!(truncate_by_distance(&set_from_distances(&[1.0]), 100.0).is_err());
        assert!(truncate_by_distance(&set_from_distances(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn zero_and_constant_fields_give_known_couplings() {
        let task = ToyTask::imbalanced_toy();
        let nfe = NfeCounter::new();
        let zero = FlowModel::constant(&[0.0, 0.0]);
        let set = generate_couplings(&zero, &task, 50, 4, Solver::Euler, 1, 1, "zero", &nfe).unwrap();
        assert!(set.couplings.iter().all(|c| c.distance == 0.0 && c.x == c.z));
        assert_eq!(nfe.get(), 200);

        let c = FlowModel::constant(&[3.0, 4.0]);
        let set = generate_couplings(&c, &task, 50, 4, Solver::Heun, 1, 1, "const", &nfe).unwrap();
        for cp in &set.couplings {
            assert!((cp.distance - 5.0).abs() < 1e-12);
            assert!((cp.z[0] - cp.x[0] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_layout_header() {
        let set = CouplingSet::new(
            vec![Coupling::new(vec![1.0, 2.0], vec![3.0, 4.0], Some(7))],
            Provenance { generator: "g".into(), ..Provenance::default() },
        );
        let bytes = set.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"RMFC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(bytes[20], 1);
        assert_eq!(f64::from_le_bytes(bytes[21..29].try_into().unwrap()), 1.0);
        assert_eq!(u32::from_le_bytes(bytes[53..57].try_into().unwrap()), 7);
        let back = CouplingSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, set);
        assert!(CouplingSet::from_bytes(&bytes[..30]).is_err());
        assert!(CouplingSet::from_bytes(b"XXXX").is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let set = CouplingSet::new(vec![Coupling::new(vec![0.0], vec![2.0], None)], Provenance::default());
        assert_eq!(set.to_csv(), "x0,z0,distance\n0.0,2.0,2.0\n");
    }

    proptest! {
        #[test]
        fn binary_round_trip(
            rows in prop::collection::vec((prop::array::uniform2(-1e6f64..1e6), prop::array::uniform2(-1e6f64..1e6), 0u32..5), 1..40),
            with_class in any::<bool>(),
        ) {
            let couplings: Vec<Coupling> = rows
                .iter()
                .map(|(x, z, k)| Coupling::new(x.to_vec(), z.to_vec(), with_class.then_some(*k)))
                .collect();
            let set = CouplingSet::new(couplings, Provenance { seed: 9, steps: 3, ..Provenance::default() });
            let back = CouplingSet::from_bytes(&set.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, set);
        }

        #[test]
        fn truncation_bounds(ds in prop::collection::vec(0.0f64..100.0, 1..300), k in 0.0f64..99.0) {
            let set = set_from_distances(&ds);
            let kept = truncate_by_distance(&set, k).unwrap();
            let mut sorted = ds.clone();
            sorted.sort_by(f64::total_cmp);
            let rank = (((100.0 - k) * ds.len() as f64 / 100.0).ceil() as usize).clamp(1, ds.len());
            let q = sorted[rank - 1];
            prop_assert!(kept.distances().iter().all(|&d| d <= q));
            prop_assert!(kept.len() >= rank);
            prop_assert_eq!(kept.len(), sorted.iter().filter(|&&d| d <= q).count());
        }
    }
}
