//! Training objectives. Generator total:
//! `l1 * L_1 + feat * L_feat + adv * L_adv + stat * L_stat + ker * L_ker`.
//!
//! Pixel and feature terms use mean reduction so the weights do not depend on image size.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{per_sample_variance, scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_1: f64,
    pub lambda_feat: f64,
    pub lambda_adv: f64,
    pub lambda_stat: f64,
    pub lambda_ker: f64,
    /// Weight of the temporal-continuity part inside `L_stat`.
    pub lambda_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_1: 1.0,
            lambda_feat: 10.0,
            lambda_adv: 0.05,
            lambda_stat: 0.1,
            lambda_ker: 1.0,
            lambda_t: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_1", self.lambda_1),
            ("lambda_feat", self.lambda_feat),
            ("lambda_adv", self.lambda_adv),
            ("lambda_stat", self.lambda_stat),
            ("lambda_ker", self.lambda_ker),
            ("lambda_t", self.lambda_t),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn l1_loss(sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    same_shape(sr, hr, "l1")?;
    Ok((sr - hr)?.abs()?.mean_all()?)
}

/// Mean over layers of the per-layer mean squared difference; real features are detached.
pub fn feature_matching_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::shape(format!(
            "feature lists of length {} and {}",
            real.len(),
            fake.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        same_shape(r, f, "feature map")?;
        let mse = (f - r.detach())?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + mse)?,
            None => mse,
        });
    }
    Ok((total.expect("non-empty") / real.len() as f64)?)
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_d_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    if real.elem_count() == 0 || fake.elem_count() == 0 {
        return Err(Error::invalid("hinge loss needs at least one real and one fake score"));
    }
    let r = (1.0 - real)?.relu()?.mean_all()?;
    let f = (fake + 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

/// `-mean(D_S(fake)) - mean(D_T(fake stack))`.
pub fn hinge_g_loss(fake_spatial: &Tensor, fake_temporal: &Tensor) -> Result<Tensor> {
    Ok((fake_spatial.mean_all()?.neg()? - fake_temporal.mean_all()?)?)
}

/// Batch mean of `(var(sr) - var(hr))^2`, variances over each frame's pixels.
pub fn spatial_energy_loss(sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    same_shape(sr, hr, "spatial energy")?;
    Ok((per_sample_variance(sr)? - per_sample_variance(hr)?)?.sqr()?.mean_all()?)
}

/// Batch mean of `var(sr_t - sr_prev)`.
pub fn temporal_continuity_loss(sr_t: &Tensor, sr_prev: &Tensor) -> Result<Tensor> {
    same_shape(sr_t, sr_prev, "temporal continuity")?;
    Ok(per_sample_variance(&(sr_t - sr_prev)?)?.mean_all()?)
}

/// `(var(sr_t) - var(hr_t))^2 + lambda_t * var(sr_t - sr_prev)`; the temporal part is skipped
/// when no previous SR frame exists.
pub fn stat_loss(sr_t: &Tensor, hr_t: &Tensor, sr_prev: Option<&Tensor>, lambda_t: f64) -> Result<Tensor> {
    let spatial = spatial_energy_loss(sr_t, hr_t)?;
    match sr_prev {
        Some(prev) => Ok((spatial + (temporal_continuity_loss(sr_t, prev)? * lambda_t)?)?),
        None => Ok(spatial),
    }
}

/// Unweighted (or weighted) value of every generator term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub l1: f64,
    pub feat: f64,
    pub adv: f64,
    pub stat: f64,
    pub ker: f64,
}

impl TermValues {
    pub const NAMES: [&'static str; 5] = ["l1", "feat", "adv", "stat", "ker"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.l1, self.feat, self.adv, self.stat, self.ker]
    }

    pub fn sum(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub terms: TermValues,
    pub weighted: TermValues,
    pub total: f64,
    pub d_spatial: f64,
    pub d_temporal: f64,
}

/// Differentiable generator terms (scalar tensors).
#[derive(Debug, Clone)]
pub struct GeneratorTerms {
    pub l1: Tensor,
    pub feat: Tensor,
    pub adv: Tensor,
    pub stat: Tensor,
    pub ker: Tensor,
}

pub fn total_generator_loss(terms: &GeneratorTerms, weights: &LossWeights) -> Result<(Tensor, LossReport)> {
    let named = [
        ("l1", &terms.l1, weights.lambda_1),
        ("feat", &terms.feat, weights.lambda_feat),
        ("adv", &terms.adv, weights.lambda_adv),
        ("stat", &terms.stat, weights.lambda_stat),
        ("ker", &terms.ker, weights.lambda_ker),
    ];
    let mut values = [0.0; 5];
    let mut total: Option<Tensor> = None;
    for (i, (name, t, w)) in named.iter().enumerate() {
        let v = scalar(t)?;
        if !v.is_finite() {
            return Err(Error::TrainingFault {
                term: (*name).to_string(),
            });
        }
        values[i] = v;
        let weighted = (*t * *w)?;
        total = Some(match total {
            Some(acc) => (acc + weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("five terms");
    let unweighted = TermValues {
        l1: values[0],
        feat: values[1],
        adv: values[2],
        stat: values[3],
        ker: values[4],
    };
    let weighted = TermValues {
        l1: values[0] * weights.lambda_1,
        feat: values[1] * weights.lambda_feat,
        adv: values[2] * weights.lambda_adv,
        stat: values[3] * weights.lambda_stat,
        ker: values[4] * weights.lambda_ker,
    };
    let report = LossReport {
        terms: unweighted,
        weighted,
        total: weighted.sum(),
        ..LossReport::default()
    };
    if !report.total.is_finite() {
        return Err(Error::TrainingFault {
            term: "total".to_string(),
        });
    }
    Ok((total, report))
}

impl LossReport {
    pub const FIELDS: [&'static str; 13] = [
        "l1", "feat", "adv", "stat", "ker", "w_l1", "w_feat", "w_adv", "w_stat", "w_ker", "total",
        "d_spatial", "d_temporal",
    ];

    /// Values in [`Self::FIELDS`] order.
    pub fn values(&self) -> [f64; 13] {
        let t = self.terms.as_array();
        let w = self.weighted.as_array();
        [
            t[0], t[1], t[2], t[3], t[4], w[0], w[1], w[2], w[3], w[4], self.total,
            self.d_spatial, self.d_temporal,
        ]
    }

    /// `step<TAB>name=value...` with a fixed field order.
    pub fn to_log_line(&self) -> String {
        let mut line = self.step.to_string();
        for (name, v) in Self::FIELDS.iter().zip(self.values()) {
            line.push('\t');
            line.push_str(name);
            line.push('=');
            line.push_str(&v.to_string());
        }
        line
    }

    pub fn from_log_line(line: &str) -> Result<Self> {
        let mut parts = line.trim_end().split('\t');
        let bad = |why: String| Error::invalid(format!("log line `{line}`: {why}"));
        let step = parts
            .next()
            .ok_or_else(|| bad("empty".into()))?
            .parse::<u64>()
            .map_err(|e| bad(e.to_string()))?;
        let mut v = [0.0; 13];
        for (i, name) in Self::FIELDS.iter().enumerate() {
            let field = parts.next().ok_or_else(|| bad(format!("missing `{name}`")))?;
            let (key, value) = field.split_once('=').ok_or_else(|| bad(format!("malformed `{field}`")))?;
            if key != *name {
                return Err(bad(format!("expected `{name}`, found `{key}`")));
            }
            v[i] = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
        }
        let terms = |o: usize| TermValues {
            l1: v[o],
            feat: v[o + 1],
            adv: v[o + 2],
            stat: v[o + 3],
            ker: v[o + 4],
        };
        Ok(Self {
            step,
            terms: terms(0),
            weighted: terms(5),
            total: v[10],
            d_spatial: v[11],
            d_temporal: v[12],
        })
    }
}
