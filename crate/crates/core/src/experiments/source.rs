use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::snapshot::{read_span_file, ReadOptions, SnapshotSpan, SpanDims};
use crate::toymodel::{self, LinearSystem, ToyModel, ToySpec, Trace};
use crate::{Error, Result};

/// Toy calibration images used when none are requested.
pub const DEFAULT_CALIBRATION_IMAGES: usize = 256;
/// Toy held-out images used when none are requested.
pub const DEFAULT_EVALUATION_IMAGES: usize = 128;

/// Anything that can hand out calibration and held-out spans.
///
/// Calibration and evaluation spans never share an image.
pub trait SpanSource: Sync {
    fn id(&self) -> String;
    /// Number of blocks `L`.
    fn depth(&self) -> usize;
    /// Cut starts at which a span of length `p` is available, ascending.
    fn cut_starts(&self, p: usize) -> Vec<usize>;
    /// Calibration images available.
    fn calibration_size(&self) -> usize;
    /// Calibration span over the first `budget` images (all if `None`).
    fn calibration_span(
        &self,
        i: usize,
        p: usize,
        budget: Option<usize>,
    ) -> Result<SnapshotSpan<f64>>;
    fn evaluation_span(&self, i: usize, p: usize) -> Result<SnapshotSpan<f64>>;
    /// Seeds that determine the data, for provenance.
    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::new()
    }
}

fn take_budget(span: SnapshotSpan<f64>, budget: Option<usize>) -> Result<SnapshotSpan<f64>> {
    match budget {
        None => Ok(span),
        Some(b) if b == 0 || b > span.dims().images => Err(Error::validation(format!(
            "budget {b} outside 1..={} available calibration images",
            span.dims().images
        ))),
        Some(b) if b == span.dims().images => Ok(span),
        Some(b) => span.select_images(0, b),
    }
}

/// Spans cut from forward passes of a seeded [`ToyModel`].
pub struct ToySource {
    model: ToyModel<f64>,
    calibration: Trace<f64>,
    evaluation: Trace<f64>,
}

impl ToySource {
    pub fn new(spec: ToySpec, calibration_images: usize, evaluation_images: usize) -> Result<Self> {
        if calibration_images == 0 || evaluation_images == 0 {
            return Err(Error::validation(
                "toy source needs calibration and evaluation images",
            ));
        }
        let model = ToyModel::generate(spec)?;
        let calibration =
            model.trace(&model.sample_inputs(calibration_images, toymodel::CALIBRATION_STREAM))?;
        let evaluation =
            model.trace(&model.sample_inputs(evaluation_images, toymodel::EVALUATION_STREAM))?;
        Ok(Self {
            model,
            calibration,
            evaluation,
        })
    }

    pub fn model(&self) -> &ToyModel<f64> {
        &self.model
    }

    pub fn calibration_trace(&self) -> &Trace<f64> {
        &self.calibration
    }

    pub fn evaluation_trace(&self) -> &Trace<f64> {
        &self.evaluation
    }

    fn check(&self, i: usize, p: usize) -> Result<()> {
        if i == 0 || p == 0 || i + p > self.depth() {
            return Err(Error::validation(format!(
                "toy spans need 1 <= i and i + p <= {}, got i = {i}, p = {p}",
                self.depth()
            )));
        }
        Ok(())
    }
}

impl SpanSource for ToySource {
    fn id(&self) -> String {
        let s = self.model.spec();
        format!("toy(seed={},d={},t={},L={})", s.seed, s.d, s.t, s.depth)
    }

    fn depth(&self) -> usize {
        self.model.depth()
    }

    /// Block 0 has no taps, so spans start at 1.
    fn cut_starts(&self, p: usize) -> Vec<usize> {
        if p == 0 || p >= self.depth() {
            return Vec::new();
        }
        (1..=self.depth() - p).collect()
    }

    fn calibration_size(&self) -> usize {
        self.calibration.images()
    }

    fn calibration_span(
        &self,
        i: usize,
        p: usize,
        budget: Option<usize>,
    ) -> Result<SnapshotSpan<f64>> {
        self.check(i, p)?;
        take_budget(self.calibration.span(i, p)?, budget)
    }

    fn evaluation_span(&self, i: usize, p: usize) -> Result<SnapshotSpan<f64>> {
        self.check(i, p)?;
        self.evaluation.span(i, p)
    }

    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([("model".to_string(), self.model.spec().seed)])
    }
}

/// Trajectories of an exact linear system, with anchor `0` and MLP tap `X_i`.
pub struct LinearSource {
    system: LinearSystem<f64>,
    t_kept: usize,
    depth: usize,
    seed: u64,
    calibration: Vec<DMatrix<f64>>,
    evaluation: Vec<DMatrix<f64>>,
}

impl LinearSource {
    pub fn new(
        system: LinearSystem<f64>,
        t_kept: usize,
        calibration_images: usize,
        evaluation_images: usize,
        depth: usize,
        seed: u64,
    ) -> Result<Self> {
        let roll = |images: usize, s: u64| -> Result<Vec<DMatrix<f64>>> {
            let dims = SpanDims::from_kept(system.dim(), t_kept, images, depth, 0, depth, 0);
            Ok(toymodel::generate_linear_span(&system, dims, s)?
                .states()
                .to_vec())
        };
        let calibration = roll(calibration_images, seed)?;
        let evaluation = roll(evaluation_images, seed.wrapping_add(1))?;
        Ok(Self {
            system,
            t_kept,
            depth,
            seed,
            calibration,
            evaluation,
        })
    }

    pub fn system(&self) -> &LinearSystem<f64> {
        &self.system
    }

    fn span(&self, states: &[DMatrix<f64>], i: usize, p: usize) -> Result<SnapshotSpan<f64>> {
        if p == 0 || i + p > self.depth {
            return Err(Error::validation(format!(
                "span i = {i}, p = {p} exceeds depth {}",
                self.depth
            )));
        }
        let d = self.system.dim();
        let images = states[0].ncols() / self.t_kept;
        let dims = SpanDims::from_kept(d, self.t_kept, images, p, i, self.depth, 0);
        SnapshotSpan::new(
            dims,
            states[i..=i + p].to_vec(),
            Some(DMatrix::zeros(d, states[0].ncols())),
            Some(states[i].clone()),
        )
    }
}

impl SpanSource for LinearSource {
    fn id(&self) -> String {
        format!(
            "linear(seed={},d={},L={})",
            self.seed,
            self.system.dim(),
            self.depth
        )
    }

    fn depth(&self) -> usize {
        self.depth
    }

    fn cut_starts(&self, p: usize) -> Vec<usize> {
        if p == 0 || p > self.depth {
            return Vec::new();
        }
        (0..=self.depth - p).collect()
    }

    fn calibration_size(&self) -> usize {
        self.calibration[0].ncols() / self.t_kept
    }

    fn calibration_span(
        &self,
        i: usize,
        p: usize,
        budget: Option<usize>,
    ) -> Result<SnapshotSpan<f64>> {
        take_budget(self.span(&self.calibration, i, p)?, budget)
    }

    fn evaluation_span(&self, i: usize, p: usize) -> Result<SnapshotSpan<f64>> {
        self.span(&self.evaluation, i, p)
    }

    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("calibration".to_string(), self.seed),
            ("evaluation".to_string(), self.seed.wrapping_add(1)),
        ])
    }
}

/// SDMS files, one span each. The first `calibration_images` images of every
/// file calibrate; the rest are held out.
pub struct FileSource {
    spans: BTreeMap<(usize, usize), SnapshotSpan<f64>>,
    paths: Vec<PathBuf>,
    calibration_images: usize,
    depth: usize,
}

impl FileSource {
    pub fn open(
        paths: &[impl AsRef<Path>],
        calibration_images: usize,
        opts: ReadOptions,
    ) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::validation("no SDMS files given"));
        }
        let mut spans = BTreeMap::new();
        let mut depth = None;
        let mut d = None;
        for path in paths {
            let path = path.as_ref();
            let span = read_span_file(path, opts)?.cast::<f64>();
            let dims = *span.dims();
            if *depth.get_or_insert(dims.depth) != dims.depth || *d.get_or_insert(dims.d) != dims.d
            {
                return Err(Error::validation(format!(
                    "{} disagrees with earlier files on d or depth",
                    path.display()
                )));
            }
            if calibration_images == 0 || calibration_images >= dims.images {
                return Err(Error::validation(format!(
                    "{} has {} images; the calibration split {calibration_images} must leave held-out images",
                    path.display(),
                    dims.images
                )));
            }
            if spans.insert((dims.i, dims.p), span).is_some() {
                return Err(Error::validation(format!(
                    "duplicate span i = {}, p = {}",
                    dims.i, dims.p
                )));
            }
        }
        Ok(Self {
            spans,
            paths: paths.iter().map(|p| p.as_ref().to_path_buf()).collect(),
            calibration_images,
            depth: depth.unwrap_or(0),
        })
    }

    /// Shortest stored span at `i` covering `p` steps, truncated to `p`.
    fn find(&self, i: usize, p: usize) -> Result<SnapshotSpan<f64>> {
        let (_, span) = self
            .spans
            .range((i, p)..(i + 1, 0))
            .next()
            .ok_or_else(|| Error::validation(format!("no file covers i = {i}, p = {p}")))?;
        if span.dims().p == p {
            Ok(span.clone())
        } else {
            span.truncate_steps(p)
        }
    }
}

impl SpanSource for FileSource {
    fn id(&self) -> String {
        let names: Vec<String> = self
            .paths
            .iter()
            .map(|p| {
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect();
        format!("files({})", names.join(","))
    }

    fn depth(&self) -> usize {
        self.depth
    }

    fn cut_starts(&self, p: usize) -> Vec<usize> {
        let mut starts: Vec<usize> = self
            .spans
            .keys()
            .filter(|(_, fp)| *fp >= p && p > 0)
            .map(|(i, _)| *i)
            .collect();
        starts.dedup();
        starts
    }

    fn calibration_size(&self) -> usize {
        self.calibration_images
    }

    fn calibration_span(
        &self,
        i: usize,
        p: usize,
        budget: Option<usize>,
    ) -> Result<SnapshotSpan<f64>> {
        let cal = self.find(i, p)?.select_images(0, self.calibration_images)?;
        take_budget(cal, budget)
    }

    fn evaluation_span(&self, i: usize, p: usize) -> Result<SnapshotSpan<f64>> {
        let span = self.find(i, p)?;
        let held_out = span.dims().images - self.calibration_images;
        span.select_images(self.calibration_images, held_out)
    }
}
