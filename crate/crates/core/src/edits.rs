//! User edits: scribbles on the solver grid become the `(H, α, β)`
//! constraint encoding, and are propagated through the similarity structure
//! of the gray image.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GcrfError, Result};
use crate::gcrf::{assemble_from_structure, Constraints, GcrfSystem, Solution, SystemOptions};
use crate::image::{ColorFieldLab, GrayImage, CHROMA_SCALE};
use crate::similarity::{baseline_embeddings, build_similarity, BaselineWeights, PixelEmbeddings, SimilarityMatrix, BASELINE_EMBEDDING_DIM};

/// Constraint strength used for interactive and test-time solves.
pub const TEST_BETA: f64 = 5.0;
/// Constraint strength used for solves during training.
pub const TRAIN_BETA: f64 = 1.0;

fn default_beta() -> f64 {
    TEST_BETA
}

/// One user edit in grid coordinates; `a`, `b` are native Lab chroma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edit {
    pub row: i64,
    pub col: i64,
    pub a: f64,
    pub b: f64,
}

/// The edits file / request body: `{"beta": 5.0, "edits": [{"row", "col", "a", "b"}, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSet {
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub edits: Vec<Edit>,
}

impl Default for EditSet {
    fn default() -> Self {
        Self {
            beta: TEST_BETA,
            edits: Vec::new(),
        }
    }
}

impl EditSet {
    pub fn new(edits: Vec<Edit>, beta: f64) -> Self {
        Self { beta, edits }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: EditSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("edit sets always serialize")
    }

    /// Checks values that the schema alone cannot express.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(GcrfError::InvalidInput(format!("beta must be positive, got {}", self.beta)));
        }
        if let Some(i) = self.edits.iter().position(|e| !(e.a.is_finite() && e.b.is_finite())) {
            return Err(GcrfError::InvalidInput(format!("edit {i} has a non-finite color")));
        }
        Ok(())
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for (index, e) in self.edits.iter().enumerate() {
            if e.row < 0 || e.col < 0 || e.row as usize >= height || e.col as usize >= width {
                return Err(GcrfError::OutOfBounds {
                    index,
                    row: e.row,
                    col: e.col,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }

    /// Builds the shared mask and per-channel targets (solver units).
    /// Later edits on the same pixel overwrite earlier ones.
    pub fn to_constraints(&self, width: usize, height: usize) -> Result<Constraints> {
        self.check_bounds(width, height)?;
        let p = width * height;
        let mut mask = vec![false; p];
        let mut ta = vec![0.0; p];
        let mut tb = vec![0.0; p];
        for e in &self.edits {
            let i = e.row as usize * width + e.col as usize;
            mask[i] = true;
            ta[i] = e.a / CHROMA_SCALE;
            tb[i] = e.b / CHROMA_SCALE;
        }
        Constraints::new(mask, ta, tb, self.beta)
    }

    /// Adds the same chroma offset to every edit.
    pub fn shifted(&self, da: f64, db: f64) -> Self {
        Self {
            beta: self.beta,
            edits: self
                .edits
                .iter()
                .map(|e| Edit {
                    a: e.a + da,
                    b: e.b + db,
                    ..*e
                })
                .collect(),
        }
    }
}

/// Where the pixel embeddings come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSource {
    Baseline { dim: usize, weights: BaselineWeights },
    Provided(PixelEmbeddings),
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::Baseline {
            dim: BASELINE_EMBEDDING_DIM,
            weights: BaselineWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagateConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    pub temperature: f64,
    pub normalize_columns: bool,
    pub embeddings: EmbeddingSource,
    pub system: SystemOptions,
}

impl Default for PropagateConfig {
    fn default() -> Self {
        Self {
            grid_width: 32,
            grid_height: 32,
            temperature: 2.0,
            normalize_columns: false,
            embeddings: EmbeddingSource::default(),
            system: SystemOptions::default(),
        }
    }
}

/// Gray image prepared for repeated solves: grid resampling, embeddings,
/// similarity and the structure matrix are computed once.
#[derive(Debug, Clone)]
pub struct Scene {
    pub native: GrayImage,
    pub grid: GrayImage,
    pub embeddings: PixelEmbeddings,
    pub similarity: SimilarityMatrix,
    pub structure: nalgebra::DMatrix<f64>,
    pub system_options: SystemOptions,
}

impl Scene {
    pub fn new(native: &GrayImage, cfg: &PropagateConfig) -> Result<Self> {
        let grid = native.resample(cfg.grid_width, cfg.grid_height)?;
        let mut embeddings = match &cfg.embeddings {
            EmbeddingSource::Baseline { dim, weights } => baseline_embeddings(&grid, *dim, weights)?,
            EmbeddingSource::Provided(e) => {
                if e.pixel_count() != grid.pixel_count() {
                    return Err(GcrfError::DimensionMismatch(format!(
                        "embeddings cover {} pixels, grid has {}",
                        e.pixel_count(),
                        grid.pixel_count()
                    )));
                }
                e.clone()
            }
        };
        if cfg.normalize_columns {
            embeddings = embeddings.normalized_columns();
        }
        let similarity = build_similarity(&embeddings, cfg.temperature)?;
        let structure = similarity.structure_matrix();
        Ok(Self {
            native: native.clone(),
            grid,
            embeddings,
            similarity,
            structure,
            system_options: cfg.system,
        })
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.grid.width(), self.grid.height())
    }

    pub fn assemble(&self, constraints: &Constraints) -> Result<GcrfSystem> {
        assemble_from_structure(&self.structure, constraints, &self.system_options)
    }

    /// Grid-resolution solve of an edit set.
    pub fn solve(&self, edits: &EditSet) -> Result<Solution> {
        let (w, h) = self.grid_size();
        let c = edits.to_constraints(w, h)?;
        self.assemble(&c)?.solve()
    }

    /// Upsamples a grid solution to the native resolution.
    pub fn to_native(&self, solution: &Solution) -> Result<ColorFieldLab> {
        let (w, h) = self.grid_size();
        solution
            .to_field(w, h)?
            .resample(self.native.width(), self.native.height())
    }
}

/// Result of propagating an edit set over an image.
#[derive(Debug, Clone)]
pub struct Propagation {
    /// Chroma at native resolution.
    pub field: ColorFieldLab,
    pub grid_solution: Solution,
    pub active_constraints: usize,
}

/// Embeddings → similarity → assemble → solve → upsample.
pub fn propagate(g: &GrayImage, edits: &EditSet, cfg: &PropagateConfig) -> Result<Propagation> {
    let scene = Scene::new(g, cfg)?;
    let (w, h) = scene.grid_size();
    let constraints = edits.to_constraints(w, h)?;
    let solution = scene.assemble(&constraints)?.solve()?;
    Ok(Propagation {
        field: scene.to_native(&solution)?,
        grid_solution: solution,
        active_constraints: constraints.active(),
    })
}

/// How a revealed patch becomes constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchMode {
    /// One edit at the patch center carrying the patch-mean color.
    #[default]
    CenterMean,
    /// One edit per pixel of the patch with its own ground-truth color.
    AllPixels,
}

/// Reveals `n_points` distinct, uniformly drawn patch centers of the ground
/// truth. Patches are clipped at the image border. Centers are a prefix of
/// one seeded permutation, so a larger count reveals a superset.
pub fn reveal_patches(
    gt: &ColorFieldLab,
    n_points: usize,
    patch: usize,
    seed: u64,
    mode: PatchMode,
    beta: f64,
) -> Result<EditSet> {
    let p = gt.pixel_count();
    if n_points == 0 || n_points > p {
        return Err(GcrfError::InvalidInput(format!(
            "n_points must be in 1..={p}, got {n_points}"
        )));
    }
    if patch == 0 {
        return Err(GcrfError::InvalidInput("patch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut rng);
    let centers = &order[..n_points];
    let (w, h) = (gt.width, gt.height);
    let half = patch / 2;
    let mut edits = Vec::new();
    for &center in centers {
        let (r, c) = (center / w, center % w);
        let rows = r.saturating_sub(half)..(r + patch - half).min(h);
        let cols = c.saturating_sub(half)..(c + patch - half).min(w);
        match mode {
            PatchMode::CenterMean => {
                let (mut sa, mut sb, mut n) = (0.0, 0.0, 0.0);
                for rr in rows {
                    for cc in cols.clone() {
                        sa += gt.a[rr * w + cc];
                        sb += gt.b[rr * w + cc];
                        n += 1.0;
                    }
                }
                edits.push(Edit {
                    row: r as i64,
                    col: c as i64,
                    a: sa / n,
                    b: sb / n,
                });
            }
            PatchMode::AllPixels => {
                for rr in rows {
                    for cc in cols.clone() {
                        edits.push(Edit {
                            row: rr as i64,
                            col: cc as i64,
                            a: gt.a[rr * w + cc],
                            b: gt.b[rr * w + cc],
                        });
                    }
                }
            }
        }
    }
    Ok(EditSet::new(edits, beta))
}
