//! Fixed-order reductions shared by the estimators and probes.

/// Standard deviation convention. Population divides by `n`, sample by `n - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StdConvention {
    #[default]
    Population,
    Sample,
}

impl StdConvention {
    pub fn name(self) -> &'static str {
        match self {
            StdConvention::Population => "population",
            StdConvention::Sample => "sample",
        }
    }
}

impl std::str::FromStr for StdConvention {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "population" => Ok(StdConvention::Population),
            "sample" => Ok(StdConvention::Sample),
            other => Err(format!("unknown std convention `{other}`")),
        }
    }
}

/// Left-to-right mean. Empty input gives NaN.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Two-pass mean and standard deviation, summed left to right.
pub fn mean_std(values: &[f64], convention: StdConvention) -> (f64, f64) {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    let denom = match convention {
        StdConvention::Population => values.len() as f64,
        StdConvention::Sample => (values.len() as f64 - 1.0).max(1.0),
    };
    (m, (ss / denom).sqrt())
}

/// Streaming first and second moments, mergeable in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Chan et al. parallel merge.
    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            f64::INFINITY
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}
