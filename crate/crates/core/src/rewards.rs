//! Reward shaping: raw judge scores are mapped to [0, 1] with a
//! piecewise-linear anchor scheme (worst -> 0, baseline mean -> 0.5,
//! best -> 1) and combined with fixed weights.

use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::policy::{PolicyParams, RolloutSampling};
use crate::rng::{self, tag};
use crate::synthworld::oracles::{Oracle, RawScores, QUALITY_MAX};
use crate::synthworld::PromptSet;

pub const ANCHORS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    LowerIsBetter,
    HigherIsBetter,
}

/// Three-point anchor map for one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub worst: f64,
    pub baseline_mean: f64,
    pub best: f64,
    pub orientation: Orientation,
}

impl AnchorSpec {
    /// Orientation follows from the order of `worst` and `best`.
    pub fn new(worst: f64, baseline_mean: f64, best: f64) -> Result<Self> {
        let orientation = if best < worst {
            Orientation::LowerIsBetter
        } else {
            Orientation::HigherIsBetter
        };
        let spec = AnchorSpec {
            worst,
            baseline_mean,
            best,
            orientation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn cer(baseline_mean: f64) -> Result<Self> {
        AnchorSpec::new(1.0, baseline_mean, 0.0)
    }

    pub fn ssim(baseline_mean: f64) -> Result<Self> {
        AnchorSpec::new(0.0, baseline_mean, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.worst.is_finite() && self.best.is_finite() && self.baseline_mean.is_finite();
        if !finite || self.worst == self.best {
            return Err(Error::Config(format!("degenerate anchor spec {self:?}")));
        }
        let consistent = match self.orientation {
            Orientation::LowerIsBetter => self.best < self.worst,
            Orientation::HigherIsBetter => self.best > self.worst,
        };
        let m = self.progress(self.baseline_mean);
        if !consistent || !(0.0..=1.0).contains(&m) {
            return Err(Error::Config(format!("inconsistent anchor spec {self:?}")));
        }
        Ok(())
    }

    /// True when the mean sits on an end anchor and the map falls back to a
    /// single segment.
    pub fn is_degenerate(&self) -> bool {
        let m = self.progress(self.baseline_mean);
        m <= 0.0 || m >= 1.0
    }

    fn progress(&self, raw: f64) -> f64 {
        (raw - self.worst) / (self.best - self.worst)
    }
}

/// Map a raw score through the anchors. Scores beyond the end anchors are
/// clipped first.
pub fn normalize_piecewise(raw: f64, spec: &AnchorSpec) -> Result<f64> {
    spec.validate()?;
    if raw.is_nan() {
        return Err(Error::InvalidInput("raw score is NaN".into()));
    }
    let u = spec.progress(raw).clamp(0.0, 1.0);
    let m = spec.progress(spec.baseline_mean);
    if spec.is_degenerate() {
        return Ok(u);
    }
    Ok(if u <= m {
        0.5 * (u / m)
    } else {
        0.5 + 0.5 * ((u - m) / (1.0 - m))
    })
}

pub fn normalize_pesq(raw: f64) -> f64 {
    raw.clamp(0.0, QUALITY_MAX) / QUALITY_MAX
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub w_cer: f64,
    pub w_ssim: f64,
    pub w_pesq: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_cer: 0.45,
            w_ssim: 0.45,
            w_pesq: 0.1,
        }
    }
}

impl RewardWeights {
    /// Negative or non-finite weights are rejected; a sum other than one
    /// is allowed with a warning.
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_cer, self.w_ssim, self.w_pesq];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("reward weights must be nonnegative, got {self:?}")));
        }
        let sum: f64 = ws.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            warn!("reward weights sum to {sum}, not 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRewards {
    pub r_cer: f64,
    pub r_ssim: f64,
    pub r_pesq: f64,
    pub r_total: f64,
}

pub fn aggregate(r_cer: f64, r_ssim: f64, r_pesq: f64, weights: &RewardWeights) -> Result<f64> {
    for (name, v) in [("cer", r_cer), ("ssim", r_ssim), ("pesq", r_pesq)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!("normalized {name} reward {v} outside [0, 1]")));
        }
    }
    Ok(weights.w_cer * r_cer + weights.w_ssim * r_ssim + weights.w_pesq * r_pesq)
}

/// Frozen anchors for a run, estimated from the policy it starts from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchors {
    pub cer: AnchorSpec,
    pub ssim: AnchorSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorsFile {
    version: u32,
    anchors: Anchors,
    n_prompts: usize,
    n_samples: usize,
}

impl Anchors {
    pub fn rewards(&self, raw: &RawScores, weights: &RewardWeights) -> Result<NormalizedRewards> {
        let r_cer = normalize_piecewise(raw.cer, &self.cer)?;
        let r_ssim = normalize_piecewise(raw.ssim, &self.ssim)?;
        let r_pesq = normalize_pesq(raw.pesq);
        Ok(NormalizedRewards {
            r_cer,
            r_ssim,
            r_pesq,
            r_total: aggregate(r_cer, r_ssim, r_pesq, weights)?,
        })
    }

    pub fn save(&self, path: &Path, n_prompts: usize, n_samples: usize) -> Result<()> {
        io::write_json(
            path,
            &AnchorsFile {
                version: ANCHORS_FORMAT_VERSION,
                anchors: *self,
                n_prompts,
                n_samples,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: AnchorsFile = io::read_json(path)?;
        if file.version != ANCHORS_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported anchors version {}",
                path.display(),
                file.version
            )));
        }
        file.anchors.cer.validate()?;
        file.anchors.ssim.validate()?;
        Ok(file.anchors)
    }
}

/// Mean raw CER and SSIM of `n_samples` generations per prompt. A judge
/// failure counts as the worst score on both metrics.
pub fn estimate_baseline_anchors(
    params: &PolicyParams,
    prompts: &PromptSet,
    oracle: &dyn Oracle,
    n_samples: usize,
    sampling: &RolloutSampling,
    seed: u64,
) -> Result<Anchors> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("anchor estimation needs at least one prompt".into()));
    }
    if n_samples == 0 {
        return Err(Error::InvalidInput("anchor estimation needs n_samples >= 1".into()));
    }
    let per_prompt: Vec<Result<(f64, f64)>> = prompts
        .prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut cer = 0.0;
            let mut ssim = 0.0;
            for j in 0..n_samples {
                let mut r = rng::rng_for(seed, &[tag("anchors"), i as u64, j as u64]);
                let sample = sampling.sample(params, prompt, &mut r)?;
                match oracle.score(prompt, &sample.response) {
                    Ok(s) => {
                        cer += s.cer.min(1.0);
                        ssim += s.ssim;
                    }
                    Err(e) => {
                        warn!("anchor sample {i}/{j} scored as worst: {e}");
                        cer += 1.0;
                    }
                }
            }
            Ok((cer, ssim))
        })
        .collect();
    let mut cer = 0.0;
    let mut ssim = 0.0;
    for r in per_prompt {
        let (c, s) = r?;
        cer += c;
        ssim += s;
    }
    let n = (prompts.len() * n_samples) as f64;
    let anchors = Anchors {
        cer: AnchorSpec::cer((cer / n).clamp(0.0, 1.0))?,
        ssim: AnchorSpec::ssim((ssim / n).clamp(0.0, 1.0))?,
    };
    for (name, spec) in [("cer", &anchors.cer), ("ssim", &anchors.ssim)] {
        if spec.is_degenerate() {
            warn!("{name} baseline mean {} sits on an end anchor; using a single segment", spec.baseline_mean);
        }
    }
    Ok(anchors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cer_examples() {
        let s = AnchorSpec::cer(0.3).unwrap();
        assert_eq!(s.orientation, Orientation::LowerIsBetter);
        assert_eq!(normalize_piecewise(0.0, &s).unwrap(), 1.0);
        assert_eq!(normalize_piecewise(0.3, &s).unwrap(), 0.5);
        assert!((normalize_piecewise(0.65, &s).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(normalize_piecewise(1.7, &s).unwrap(), 0.0);
        assert_eq!(normalize_piecewise(1.0, &s).unwrap(), 0.0);
    }

    #[test]
    fn pesq_examples() {
        assert_eq!(normalize_pesq(4.5), 1.0);
        assert_eq!(normalize_pesq(2.25), 0.5);
        assert_eq!(normalize_pesq(-0.2), 0.0);
        assert_eq!(normalize_pesq(0.0), 0.0);
        assert_eq!(normalize_pesq(7.0), 1.0);
    }

    #[test]
    fn aggregate_examples() {
        let w = RewardWeights::default();
        assert!((aggregate(1.0, 1.0, 1.0, &w).unwrap() - 1.0).abs() < 1e-15);
        assert!((aggregate(1.0, 1.0, 0.0, &w).unwrap() - 0.9).abs() < 1e-15);
        assert!((aggregate(0.5, 0.5, 0.5, &w).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(aggregate(1.1, 0.0, 0.0, &w), Err(Error::InvalidInput(_))));
        assert!(matches!(aggregate(0.0, -0.1, 0.0, &w), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn degenerate_specs() {
        assert!(matches!(AnchorSpec::new(0.5, 0.5, 0.5), Err(Error::Config(_))));
        let s = AnchorSpec::cer(0.0).unwrap();
        assert!(s.is_degenerate());
        assert_eq!(normalize_piecewise(0.25, &s).unwrap(), 0.75);
        let s = AnchorSpec::ssim(0.0).unwrap();
        assert_eq!(normalize_piecewise(0.4, &s).unwrap(), 0.4);
        assert!(AnchorSpec::cer(1.5).is_err());
        assert!(normalize_piecewise(f64::NAN, &AnchorSpec::cer(0.3).unwrap()).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(RewardWeights::default().validate().is_ok());
        let odd = RewardWeights {
            w_cer: 0.5,
            w_ssim: 0.5,
            w_pesq: 0.5,
        };
        assert!(odd.validate().is_ok());
        let neg = RewardWeights { w_cer: -0.1, ..odd };
        assert!(neg.validate().is_err());
    }

    fn spec_strategy() -> impl Strategy<Value = AnchorSpec> {
        (-5.0f64..5.0, 0.01f64..5.0, 0.0f64..=1.0, any::<bool>()).prop_map(|(a, span, frac, flip)| {
            let (worst, best) = if flip { (a + span, a) } else { (a, a + span) };
            AnchorSpec::new(worst, worst + frac * (best - worst), best).unwrap()
        })
    }

    proptest! {
        #[test]
        fn anchors_are_exact(spec in spec_strategy()) {
            prop_assert_eq!(normalize_piecewise(spec.worst, &spec).unwrap(), 0.0);
            prop_assert_eq!(normalize_piecewise(spec.best, &spec).unwrap(), 1.0);
            if !spec.is_degenerate() {
                prop_assert_eq!(normalize_piecewise(spec.baseline_mean, &spec).unwrap(), 0.5);
            }
        }

        #[test]
        fn map_is_monotone_and_bounded(spec in spec_strategy(), a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let fl = normalize_piecewise(lo, &spec).unwrap();
            let fh = normalize_piecewise(hi, &spec).unwrap();
            prop_assert!((0.0..=1.0).contains(&fl) && (0.0..=1.0).contains(&fh));
            match spec.orientation {
                Orientation::HigherIsBetter => prop_assert!(fl <= fh),
                Orientation::LowerIsBetter => prop_assert!(fl >= fh),
            }
        }

        #[test]
        fn aggregate_is_linear_and_bounded(x in 0.0f64..=1.0, y in 0.0f64..=1.0, z in 0.0f64..=1.0, t in 0.0f64..=1.0) {
            let w = RewardWeights::default();
            let r = aggregate(x, y, z, &w).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
            let r0 = aggregate(0.0, y, z, &w).unwrap();
            let r1 = aggregate(1.0, y, z, &w).unwrap();
            let mid = aggregate(t * x, y, z, &w).unwrap();
            prop_assert!((mid - (r0 + t * (aggregate(x, y, z, &w).unwrap() - r0))).abs() < 1e-12);
            prop_assert!((r1 - r0 - w.w_cer).abs() < 1e-12);
        }
    }
}
