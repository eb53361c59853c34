//! Analytic task router.
//!
//! The router is a multi-output ridge regression from expanded features to
//! one-hot task labels. It keeps three sufficient statistics:
//!
//! * `R = (Σ HᵀH + λI)⁻¹`, the inverse regularized autocorrelation,
//! * `Q = Σ HᵀY`, the cross-correlation,
//! * `W = R·Q`, the router weights.
//!
//! New data is absorbed with a block Woodbury step, so the weights after any
//! sequence of updates equal the joint closed-form solution on all data seen
//! so far, without keeping that data around.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_CHUNK_SIZE: usize = 64;

/// Router weights, `E × K`.
pub type RouterWeights = DMatrix<f64>;

/// A block of expanded features together with one-hot task labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedBatch {
    features: DMatrix<f64>,
    labels: DMatrix<f64>,
}

impl ExpandedBatch {
    /// Builds a batch, checking that every label row is one-hot.
    pub fn new(features: DMatrix<f64>, labels: DMatrix<f64>) -> Result<Self> {
        if features.nrows() != labels.nrows() {
            return Err(Error::DimensionMismatch {
                what: "label rows vs feature rows",
                expected: features.nrows(),
                got: labels.nrows(),
            });
        }
        for (i, row) in labels.row_iter().enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let nonzero = row.iter().filter(|&&v| v != 0.0).count();
            if ones != 1 || nonzero != 1 {
                return Err(Error::InvalidArgument(format!(
                    "label row {i} is not one-hot"
                )));
            }
        }
        Ok(Self { features, labels })
    }

    /// Every row belongs to `class` out of `num_classes`.
    pub fn single_class(features: DMatrix<f64>, class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        let mut labels = DMatrix::zeros(features.nrows(), num_classes);
        labels.column_mut(class).fill(1.0);
        Ok(Self { features, labels })
    }

    /// Rows with per-row class indices.
    pub fn from_classes(
        features: DMatrix<f64>,
        classes: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if classes.len() != features.nrows() {
            return Err(Error::DimensionMismatch {
                what: "class count vs feature rows",
                expected: features.nrows(),
                got: classes.len(),
            });
        }
        let mut labels = DMatrix::zeros(features.nrows(), num_classes);
        for (i, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "class {c} out of range for {num_classes} classes"
                )));
            }
            labels[(i, c)] = 1.0;
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &DMatrix<f64> {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Labels widened with zero columns to `width`.
    fn labels_padded(&self, width: usize) -> Result<DMatrix<f64>> {
        let have = self.labels.ncols();
        if have > width {
            return Err(Error::DimensionMismatch {
                what: "label width exceeds registered task count",
                expected: width,
                got: have,
            });
        }
        if have == width {
            return Ok(self.labels.clone());
        }
        Ok(self.labels.clone().resize_horizontally(width, 0.0))
    }

    /// Splits into consecutive row blocks of at most `chunk` rows.
    pub fn chunks(&self, chunk: usize) -> Vec<ExpandedBatch> {
        let n = self.len();
        let chunk = chunk.max(1);
        (0..n)
            .step_by(chunk)
            .map(|start| {
                let rows = chunk.min(n - start);
                ExpandedBatch {
                    features: self.features.rows(start, rows).into_owned(),
                    labels: self.labels.rows(start, rows).into_owned(),
                }
            })
            .collect()
    }
}

/// Closed-form ridge solution over all batches:
/// `(Σ HᵢᵀHᵢ + λI)⁻¹ (Σ HᵢᵀYᵢ)`.
///
/// Labels narrower than the widest batch are padded with zero columns.
pub fn solve_joint(batches: &[ExpandedBatch], dim: usize, lambda: f64) -> Result<RouterWeights> {
    check_lambda(lambda)?;
    let width = batches.iter().map(|b| b.labels.ncols()).max().unwrap_or(0);
    let mut gram = DMatrix::<f64>::identity(dim, dim) * lambda;
    let mut cross = DMatrix::<f64>::zeros(dim, width);
    for batch in batches {
        if batch.features.ncols() != dim {
            return Err(Error::DimensionMismatch {
                what: "batch feature width",
                expected: dim,
                got: batch.features.ncols(),
            });
        }
        let h = &batch.features;
        gram += h.transpose() * h;
        cross += h.transpose() * batch.labels_padded(width)?;
    }
    let chol = gram
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("regularized autocorrelation"))?;
    Ok(chol.solve(&cross))
}

/// Sufficient statistics of the recursive router.
#[derive(Clone, Debug, PartialEq)]
pub struct RlsState {
    r: DMatrix<f64>,
    q: DMatrix<f64>,
    w: DMatrix<f64>,
    lambda: f64,
    chunk_size: usize,
}

impl RlsState {
    /// Empty router: `R = λ⁻¹I`, no task columns.
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "router dimension must be >= 1".into(),
            ));
        }
        check_lambda(lambda)?;
        Ok(Self {
            r: DMatrix::identity(dim, dim) / lambda,
            q: DMatrix::zeros(dim, 0),
            w: DMatrix::zeros(dim, 0),
            lambda,
            chunk_size: DEFAULT_CHUNK_SIZE,
        })
    }

    /// Reassembles a state from stored matrices, validating shapes and the
    /// `W = R·Q` relation.
    pub fn from_parts(
        r: DMatrix<f64>,
        q: DMatrix<f64>,
        w: DMatrix<f64>,
        lambda: f64,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        let e = r.nrows();
        if r.ncols() != e || q.nrows() != e || w.nrows() != e || w.ncols() != q.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "R {}x{}, Q {}x{}, W {}x{}",
                r.nrows(),
                r.ncols(),
                q.nrows(),
                q.ncols(),
                w.nrows(),
                w.ncols()
            )));
        }
        Ok(Self {
            r,
            q,
            w,
            lambda,
            chunk_size: DEFAULT_CHUNK_SIZE,
        })
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size.max(1);
        self
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn task_count(&self) -> usize {
        self.q.ncols()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn autocorrelation_inverse(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn cross_correlation(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn weights(&self) -> &RouterWeights {
        &self.w
    }

    /// Appends `new_tasks` zero label columns.
    pub fn grow_label_space(&mut self, new_tasks: usize) -> Result<()> {
        if new_tasks == 0 {
            return Err(Error::InvalidArgument("new_tasks must be >= 1".into()));
        }
        let k = self.q.ncols() + new_tasks;
        let q = std::mem::replace(&mut self.q, DMatrix::zeros(0, 0));
        self.q = q.resize_horizontally(k, 0.0);
        let w = std::mem::replace(&mut self.w, DMatrix::zeros(0, 0));
        self.w = w.resize_horizontally(k, 0.0);
        Ok(())
    }

    /// Absorbs a batch; `W` is recomputed as `R'·Q'`.
    pub fn update(&mut self, batch: &ExpandedBatch) -> Result<()> {
        self.absorb(batch, WeightForm::Product)
    }

    /// Absorbs a batch; `W` is advanced with the direct recursion
    /// `W' = (I − R'HᵀH)·W + R'HᵀY` instead of `R'·Q'`.
    pub fn update_weight_direct(&mut self, batch: &ExpandedBatch) -> Result<()> {
        self.absorb(batch, WeightForm::Direct)
    }

    fn absorb(&mut self, batch: &ExpandedBatch, form: WeightForm) -> Result<()> {
        let e = self.dim();
        if batch.features.ncols() != e {
            return Err(Error::DimensionMismatch {
                what: "batch feature width",
                expected: e,
                got: batch.features.ncols(),
            });
        }
        let labels = batch.labels_padded(self.task_count())?;
        let n = batch.len();
        let chunk = self.chunk_size;
        let mut start = 0;
        while start < n {
            let rows = chunk.min(n - start);
            let h = batch.features.rows(start, rows).into_owned();
            let y = labels.rows(start, rows).into_owned();
            self.woodbury_step(&h, &y, form)?;
            start += rows;
        }
        Ok(())
    }

    fn woodbury_step(
        &mut self,
        h: &DMatrix<f64>,
        y: &DMatrix<f64>,
        form: WeightForm,
    ) -> Result<()> {
        let n = h.nrows();
        // R Hᵀ, E×n
        let rh = &self.r * h.transpose();
        // I + H R Hᵀ, symmetric positive definite since R is.
        let mut s = h * &rh;
        for i in 0..n {
            s[(i, i)] += 1.0;
        }
        symmetrize(&mut s);
        let chol = s
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("I + H R Hᵀ in Woodbury step"))?;
        // (I + H R Hᵀ)⁻¹ H R, n×E
        let gain = chol.solve(&rh.transpose());
        let mut r_next = &self.r - &rh * gain;
        symmetrize(&mut r_next);

        let hty = h.transpose() * y;
        self.q += &hty;
        self.w = match form {
            WeightForm::Product => &r_next * &self.q,
            WeightForm::Direct => {
                let r_hth = &r_next * (h.transpose() * h);
                &self.w - r_hth * &self.w + &r_next * hty
            }
        };
        self.r = r_next;
        Ok(())
    }

    /// Largest element-wise `|R − Rᵀ|`.
    pub fn symmetry_residual(&self) -> f64 {
        max_abs_diff(&self.r, &self.r.transpose())
    }

    /// Largest element-wise `|W − R·Q|`.
    pub fn consistency_residual(&self) -> f64 {
        max_abs_diff(&self.w, &(&self.r * &self.q))
    }

    pub fn is_positive_definite(&self) -> bool {
        self.r.clone().cholesky().is_some()
    }

    pub fn route(&self, h_expanded: &[f64]) -> Result<RouteDecision> {
        route(&self.w, h_expanded)
    }
}

#[derive(Clone, Copy, Debug)]
enum WeightForm {
    Product,
    Direct,
}

/// Softmax routing probabilities plus the selected task column.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteDecision {
    pub probabilities: Vec<f64>,
    pub selected: usize,
}

/// `softmax(h̃·W)` with argmax selection; ties go to the lowest index.
pub fn route(weights: &RouterWeights, h_expanded: &[f64]) -> Result<RouteDecision> {
    if weights.ncols() == 0 {
        return Err(Error::NoTasks);
    }
    if h_expanded.len() != weights.nrows() {
        return Err(Error::DimensionMismatch {
            what: "expanded feature length",
            expected: weights.nrows(),
            got: h_expanded.len(),
        });
    }
    let h = DVector::from_column_slice(h_expanded);
    let logits: Vec<f64> = (weights.transpose() * h).iter().copied().collect();
    Ok(decide(&logits))
}

/// Softmax and argmax over raw logits.
pub fn decide(logits: &[f64]) -> RouteDecision {
    let selected = argmax(logits);
    let max = logits[selected];
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    RouteDecision {
        probabilities: exps.into_iter().map(|v| v / total).collect(),
        selected,
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in max_abs_diff");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "lambda must be positive and finite, got {lambda}"
        )))
    }
}
