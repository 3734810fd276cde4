//! Difficulty scores from predicted log-variances.
//!
//! Certainty is the inverse of the log-variance, `c = exp(-log sigma)`,
//! min-max normalized against running extrema tracked per attribute with an
//! exponential moving average seeded from the first batch.

use thiserror::Error;

use crate::{real, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum UncertaintyError {
    #[error("non-finite value")]
    NonFinite,
    #[error("running extrema not seeded yet")]
    Uninitialized,
    #[error("empty batch")]
    EmptyBatch,
}

/// The five attributes carrying an uncertainty head: depth plus the four
/// reparameterized box coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attribute {
    Depth,
    Left,
    Top,
    Right,
    Bottom,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Depth,
        Attribute::Left,
        Attribute::Top,
        Attribute::Right,
        Attribute::Bottom,
    ];

    pub fn index(&self) -> usize {
        match self {
            Attribute::Depth => 0,
            Attribute::Left => 1,
            Attribute::Top => 2,
            Attribute::Right => 3,
            Attribute::Bottom => 4,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Attribute::Depth => "d",
            Attribute::Left => "l",
            Attribute::Top => "t",
            Attribute::Right => "r",
            Attribute::Bottom => "b",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Attribute::ALL.iter().copied().find(|a| a.as_str() == s)
    }
}

/// Predicted log of the Laplace scale per attribute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogVariances<F>([F; 5]);

impl<F: Real> LogVariances<F> {
    /// Values in `(d, l, t, r, b)` order.
    pub fn new(values: [F; 5]) -> Result<Self, UncertaintyError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(UncertaintyError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn get(&self, attr: Attribute) -> F {
        self.0[attr.index()]
    }

    pub fn values(&self) -> [F; 5] {
        self.0
    }
}

/// Normalized certainty per attribute, every entry in `[0, 1]`. Higher means
/// more certain, hence a larger perturbation under DAP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyScores<F>([F; 5]);

impl<F: Real> DifficultyScores<F> {
    /// Values in `(d, l, t, r, b)` order.
    pub fn new(values: [F; 5]) -> Result<Self, UncertaintyError> {
        if values
            .iter()
            .any(|v| !v.is_finite() || *v < F::zero() || *v > F::one())
        {
            return Err(UncertaintyError::NonFinite);
        }
        Ok(Self(values))
    }

    /// The same score for every attribute; the uniform-noise baseline.
    pub fn uniform(value: F) -> Result<Self, UncertaintyError> {
        Self::new([value; 5])
    }

    pub fn get(&self, attr: Attribute) -> F {
        self.0[attr.index()]
    }

    pub fn values(&self) -> [F; 5] {
        self.0
    }

    /// Box-coordinate scores in `(l, t, r, b)` order.
    pub fn box_scores(&self) -> [F; 4] {
        [self.0[1], self.0[2], self.0[3], self.0[4]]
    }

    pub fn depth_score(&self) -> F {
        self.0[0]
    }
}

/// Certainty from a log-variance: `exp(-log_sigma)`.
pub fn certainty<F: Real>(log_sigma: F) -> Result<F, UncertaintyError> {
    if !log_sigma.is_finite() {
        return Err(UncertaintyError::NonFinite);
    }
    Ok((-log_sigma).exp())
}

/// Min-max normalization clamped to `[0, 1]`; a degenerate range maps to the
/// neutral score 0.5.
pub fn normalize<F: Real>(c: F, c_min: F, c_max: F) -> F {
    let range = c_max - c_min;
    if range < real::<F>(1e-12) {
        return real::<F>(0.5);
    }
    ((c - c_min) / range).max(F::zero()).min(F::one())
}

/// EMA-tracked per-attribute certainty extrema.
///
/// Single-writer state: one training thread calls [`ema_update`] between
/// batches; reads may interleave only outside update calls.
///
/// [`ema_update`]: RunningExtrema::ema_update
#[derive(Debug, Clone, PartialEq)]
pub struct RunningExtrema<F> {
    min: [F; 5],
    max: [F; 5],
    initialized: bool,
}

impl<F: Real> Default for RunningExtrema<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> RunningExtrema<F> {
    pub fn new() -> Self {
        Self {
            min: [F::zero(); 5],
            max: [F::zero(); 5],
            initialized: false,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn range(&self, attr: Attribute) -> Result<(F, F), UncertaintyError> {
        if !self.initialized {
            return Err(UncertaintyError::Uninitialized);
        }
        let i = attr.index();
        Ok((self.min[i], self.max[i]))
    }

    /// Folds one batch of per-object certainties into the extrema. The first
    /// batch seeds min/max verbatim; later batches blend with momentum
    /// `beta`: `new = beta * old + (1 - beta) * batch`.
    pub fn ema_update(
        &mut self,
        batch: &[[F; 5]],
        beta: F,
    ) -> Result<(), UncertaintyError> {
        if batch.is_empty() {
            return Err(UncertaintyError::EmptyBatch);
        }
        let mut bmin = batch[0];
        let mut bmax = batch[0];
        for obj in &batch[1..] {
            for i in 0..5 {
                bmin[i] = bmin[i].min(obj[i]);
                bmax[i] = bmax[i].max(obj[i]);
            }
        }
        if !self.initialized {
            self.min = bmin;
            self.max = bmax;
            self.initialized = true;
        } else {
            let keep = beta;
            let take = F::one() - beta;
            for i in 0..5 {
                self.min[i] = keep * self.min[i] + take * bmin[i];
                self.max[i] = keep * self.max[i] + take * bmax[i];
                if self.min[i] > self.max[i] {
                    core::mem::swap(&mut self.min[i], &mut self.max[i]);
                }
            }
        }
        Ok(())
    }

    /// Certainty, normalization and clamping composed per attribute. Does not
    /// mutate the extrema.
    pub fn scores_from_logvars(
        &self,
        lv: &LogVariances<F>,
    ) -> Result<DifficultyScores<F>, UncertaintyError> {
        if !self.initialized {
            return Err(UncertaintyError::Uninitialized);
        }
        let mut out = [F::zero(); 5];
        for (i, attr) in Attribute::ALL.iter().enumerate() {
            let c = certainty(lv.get(*attr))?;
            out[i] = normalize(c, self.min[i], self.max[i]);
        }
        DifficultyScores::new(out)
    }

    /// Plain-text checkpoint section: one `attr min max` line per attribute.
    pub fn to_checkpoint_lines(&self) -> String {
        let mut out = format!("initialized {}\n", self.initialized);
        for (i, attr) in Attribute::ALL.iter().enumerate() {
            out.push_str(&format!(
                "{} {} {}\n",
                attr.as_str(),
                self.min[i].to_f64().unwrap_or(f64::NAN),
                self.max[i].to_f64().unwrap_or(f64::NAN)
            ));
        }
        out
    }

    pub fn from_checkpoint_lines(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        let first = lines.next()?;
        let initialized = match first.strip_prefix("initialized ")? {
            "true" => true,
            "false" => false,
            _ => return None,
        };
        let mut min = [F::zero(); 5];
        let mut max = [F::zero(); 5];
        for line in lines {
            let mut parts = line.split_whitespace();
            let attr = Attribute::parse(parts.next()?)?;
            let lo: f64 = parts.next()?.parse().ok()?;
            let hi: f64 = parts.next()?.parse().ok()?;
            min[attr.index()] = F::from_f64(lo)?;
            max[attr.index()] = F::from_f64(hi)?;
        }
        Some(Self {
            min,
            max,
            initialized,
        })
    }
}

/// Per-object certainties from per-object log-variances, the batch input to
/// [`RunningExtrema::ema_update`].
pub fn batch_certainties<F: Real>(
    logvars: &[LogVariances<F>],
) -> Result<Vec<[F; 5]>, UncertaintyError> {
    logvars
        .iter()
        .map(|lv| {
            let mut row = [F::zero(); 5];
            for (i, attr) in Attribute::ALL.iter().enumerate() {
                row[i] = certainty(lv.get(*attr))?;
            }
            Ok(row)
        })
        .collect()
}
